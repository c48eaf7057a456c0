//! LSTM cell and stack with exact backpropagation through time.
//!
//! Gate order in the packed weight matrices is `[input, forget, cell, output]`.
//! Per timestep:
//!
//! ```text
//! a   = Wx x_t + Wh h_{t-1} + b            (4H)
//! i   = sigma(a[0..H])      f = sigma(a[H..2H])
//! g   = tanh(a[2H..3H])     o = sigma(a[3H..4H])
//! c_t = f .* c_{t-1} + i .* g
//! h_t = o .* tanh(c_t)
//! ```

use rand::Rng;

use super::matrix::Matrix;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Parameters of a single LSTM cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub input_size: usize,
    pub hidden_size: usize,
    /// Input-to-gate weights, `4H x D`.
    pub wx: Matrix,
    /// Hidden-to-gate weights, `4H x H`.
    pub wh: Matrix,
    /// Gate biases, `4H`.
    pub b: Vec<f64>,
}

/// Intermediates saved by one forward timestep, enough for exact BPTT.
#[derive(Debug, Clone)]
struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    steps: Vec<StepCache>,
}

impl LstmCache {
    pub fn seq_len(&self) -> usize {
        self.steps.len()
    }

    /// The input sequence this cache was built from.
    pub fn inputs(&self) -> Vec<&[f64]> {
        self.steps.iter().map(|s| s.x.as_slice()).collect()
    }
}

/// Parameter gradients matching [`LstmCell`] shapes.
#[derive(Debug, Clone)]
pub struct LstmCellGrads {
    pub wx: Matrix,
    pub wh: Matrix,
    pub b: Vec<f64>,
}

impl LstmCellGrads {
    pub fn zeros(cell: &LstmCell) -> Self {
        Self { wx: cell.wx.zeros_like(), wh: cell.wh.zeros_like(), b: vec![0.0; cell.b.len()] }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.wx.add_assign(&other.wx);
        self.wh.add_assign(&other.wh);
        for (a, b) in self.b.iter_mut().zip(other.b.iter()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.wx.scale(factor);
        self.wh.scale(factor);
        for a in &mut self.b {
            *a *= factor;
        }
    }
}

impl LstmCell {
    /// Weights uniform in `[-1/sqrt(H), 1/sqrt(H))`, biases zero except the
    /// forget-gate bias at +1.
    pub fn new<R: Rng>(input_size: usize, hidden_size: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden_size as f64).sqrt();
        let wx = Matrix::uniform(4 * hidden_size, input_size, bound, rng);
        let wh = Matrix::uniform(4 * hidden_size, hidden_size, bound, rng);
        let mut b = vec![0.0; 4 * hidden_size];
        for v in &mut b[hidden_size..2 * hidden_size] {
            *v = 1.0;
        }
        Self { input_size, hidden_size, wx, wh, b }
    }

    /// Run the cell over an input sequence, returning the hidden sequence,
    /// the final `(h, c)`, and the cache for [`LstmCell::backward`].
    pub fn forward(
        &self,
        inputs: &[Vec<f64>],
        h0: &[f64],
        c0: &[f64],
    ) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>, LstmCache) {
        assert!(!inputs.is_empty(), "lstm forward needs at least one timestep");
        assert_eq!(h0.len(), self.hidden_size, "h0 length mismatch");
        assert_eq!(c0.len(), self.hidden_size, "c0 length mismatch");
        let hs = self.hidden_size;

        let mut h = h0.to_vec();
        let mut c = c0.to_vec();
        let mut hidden_seq = Vec::with_capacity(inputs.len());
        let mut steps = Vec::with_capacity(inputs.len());

        for x in inputs {
            assert_eq!(x.len(), self.input_size, "input width mismatch");
            let mut a = self.wx.matvec(x);
            let ah = self.wh.matvec(&h);
            for ((av, bv), gv) in a.iter_mut().zip(self.b.iter()).zip(ah.iter()) {
                *av += bv + gv;
            }

            let mut i = vec![0.0; hs];
            let mut f = vec![0.0; hs];
            let mut g = vec![0.0; hs];
            let mut o = vec![0.0; hs];
            for k in 0..hs {
                i[k] = sigmoid(a[k]);
                f[k] = sigmoid(a[hs + k]);
                g[k] = a[2 * hs + k].tanh();
                o[k] = sigmoid(a[3 * hs + k]);
            }

            let c_prev = c.clone();
            let h_prev = h.clone();
            let mut tanh_c = vec![0.0; hs];
            for k in 0..hs {
                c[k] = f[k] * c_prev[k] + i[k] * g[k];
                tanh_c[k] = c[k].tanh();
                h[k] = o[k] * tanh_c[k];
            }

            hidden_seq.push(h.clone());
            steps.push(StepCache { x: x.clone(), h_prev, c_prev, i, f, g, o, tanh_c });
        }

        (hidden_seq, h, c, LstmCache { steps })
    }

    /// Exact gradients of the forward map given upstream gradients on every
    /// hidden-sequence element. Returns parameter gradients and gradients on
    /// the input sequence.
    pub fn backward(
        &self,
        cache: &LstmCache,
        d_hidden_seq: &[Vec<f64>],
    ) -> (LstmCellGrads, Vec<Vec<f64>>) {
        assert_eq!(d_hidden_seq.len(), cache.steps.len(), "upstream gradient length mismatch");
        let hs = self.hidden_size;
        let mut grads = LstmCellGrads::zeros(self);
        let mut d_inputs = vec![Vec::new(); cache.steps.len()];

        let mut dh_next = vec![0.0; hs];
        let mut dc_next = vec![0.0; hs];

        for t in (0..cache.steps.len()).rev() {
            let s = &cache.steps[t];
            assert_eq!(d_hidden_seq[t].len(), hs, "upstream gradient width mismatch");

            let mut d4 = vec![0.0; 4 * hs];
            for k in 0..hs {
                let dh = d_hidden_seq[t][k] + dh_next[k];
                let dc = dh * s.o[k] * (1.0 - s.tanh_c[k] * s.tanh_c[k]) + dc_next[k];

                d4[k] = dc * s.g[k] * s.i[k] * (1.0 - s.i[k]);
                d4[hs + k] = dc * s.c_prev[k] * s.f[k] * (1.0 - s.f[k]);
                d4[2 * hs + k] = dc * s.i[k] * (1.0 - s.g[k] * s.g[k]);
                d4[3 * hs + k] = dh * s.tanh_c[k] * s.o[k] * (1.0 - s.o[k]);

                dc_next[k] = dc * s.f[k];
            }

            grads.wx.add_outer(&d4, &s.x);
            grads.wh.add_outer(&d4, &s.h_prev);
            for (gb, &d) in grads.b.iter_mut().zip(d4.iter()) {
                *gb += d;
            }

            d_inputs[t] = self.wx.matvec_t(&d4);
            dh_next = self.wh.matvec_t(&d4);
        }

        (grads, d_inputs)
    }

    pub fn param_blocks(&self) -> Vec<&[f64]> {
        vec![self.wx.data(), self.wh.data(), &self.b]
    }

    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.wx.data_mut(), self.wh.data_mut(), &mut self.b]
    }
}

/// A stack of LSTM cells: layer `l` consumes layer `l-1`'s hidden sequence.
/// Initial states are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedLstm {
    pub cells: Vec<LstmCell>,
}

#[derive(Debug, Clone)]
pub struct StackCache {
    layers: Vec<LstmCache>,
}

impl StackedLstm {
    pub fn new<R: Rng>(input_size: usize, hidden_size: usize, layers: usize, rng: &mut R) -> Self {
        assert!(layers >= 1, "stack needs at least one layer");
        let mut cells = Vec::with_capacity(layers);
        for l in 0..layers {
            let d = if l == 0 { input_size } else { hidden_size };
            cells.push(LstmCell::new(d, hidden_size, rng));
        }
        Self { cells }
    }

    pub fn hidden_size(&self) -> usize {
        self.cells[0].hidden_size
    }

    /// Top-layer hidden sequence plus the caches of every layer.
    pub fn forward(&self, inputs: &[Vec<f64>]) -> (Vec<Vec<f64>>, StackCache) {
        let mut seq = inputs.to_vec();
        let mut layers = Vec::with_capacity(self.cells.len());
        for cell in &self.cells {
            let zeros = vec![0.0; cell.hidden_size];
            let (hidden, _, _, cache) = cell.forward(&seq, &zeros, &zeros);
            seq = hidden;
            layers.push(cache);
        }
        (seq, StackCache { layers })
    }

    /// Backward through all layers given upstream gradients on the top-layer
    /// hidden sequence.
    pub fn backward(
        &self,
        cache: &StackCache,
        d_top: &[Vec<f64>],
    ) -> (Vec<LstmCellGrads>, Vec<Vec<f64>>) {
        let mut d_seq = d_top.to_vec();
        let mut grads: Vec<Option<LstmCellGrads>> = vec![None; self.cells.len()];
        for (l, cell) in self.cells.iter().enumerate().rev() {
            let (g, d_in) = cell.backward(&cache.layers[l], &d_seq);
            grads[l] = Some(g);
            d_seq = d_in;
        }
        (grads.into_iter().map(|g| g.expect("all layers visited")).collect(), d_seq)
    }

    pub fn param_blocks(&self) -> Vec<&[f64]> {
        self.cells.iter().flat_map(|c| c.param_blocks()).collect()
    }

    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.cells.iter_mut().flat_map(|c| c.param_blocks_mut()).collect()
    }
}
