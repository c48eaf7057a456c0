//! The forecasting architecture: three stacked-LSTM components, a fully
//! connected aggregator producing softmax attention over them, and one of two
//! output paths.
//!
//! Short-term variant: each component feeds its final hidden state through a
//! per-component scalar head; the output is the attention-weighted sum of the
//! three residual predictions.
//!
//! Long-term variant: the attention weights scale each component's full
//! hidden sequence; the scaled sequences are concatenated and mapped through
//! a final dense layer + softmax to a six-bin histogram.
//!
//! Parameters are partitioned into two groups trained alternately: the
//! component group (all LSTM stacks plus the per-component heads) and the
//! aggregator group (attention layer plus, for the long variant, the
//! histogram head). The aggregator reads the flattened input window, so
//! attention is computable independently of the components.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio;
use crate::data::{WindowValues, BIN_COUNT, BIN_EDGES, FEATURE_NAMES, NUM_FEATURES, WINDOW_LEN};
use crate::ingest::Standardizer;
use crate::nn::{
    ensure_finite, kl_loss, softmax, softmax_backward, Dense, DenseGrads, GradCheckReport,
    LstmCellGrads, NnError, StackCache, StackedLstm,
};

pub const NUM_COMPONENTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Short,
    Long,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Short => "short",
            Variant::Long => "long",
        }
    }
}

/// Architecture hyperparameters. The paper-level knobs live in the trainer;
/// these shape the network itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureConfig {
    pub variant: Variant,
    /// LSTM stack depth per component.
    pub layers: usize,
    /// Hidden width per LSTM layer.
    pub hidden: usize,
    /// Forecast horizon in hours; required for the long variant.
    pub horizon: Option<u32>,
}

impl MixtureConfig {
    pub fn short() -> Self {
        Self { variant: Variant::Short, layers: 2, hidden: 32, horizon: None }
    }

    pub fn long(horizon: u32) -> Self {
        Self { variant: Variant::Long, layers: 2, hidden: 32, horizon: Some(horizon) }
    }
}

/// One mixture component: an LSTM stack plus, in the short variant, a scalar
/// residual head reading the final hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentNet {
    pub lstm: StackedLstm,
    pub head: Option<Dense>,
}

impl ComponentNet {
    pub fn param_blocks(&self) -> Vec<&[f64]> {
        let mut out = self.lstm.param_blocks();
        if let Some(h) = &self.head {
            out.extend(h.param_blocks());
        }
        out
    }

    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.lstm.param_blocks_mut();
        if let Some(h) = &mut self.head {
            out.extend(h.param_blocks_mut());
        }
        out
    }
}

/// How attention weights are produced for a forward pass: learned from the
/// aggregator, or forced one-hot onto a single component (used to train
/// components in isolation). With forced attention the masked components
/// contribute exactly zero, so their LSTMs are not evaluated at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attention {
    Learned,
    Forced(usize),
}

/// Which parameter groups a backward pass must produce gradients for.
/// Skipped groups cost nothing: leaving out `components` skips BPTT
/// entirely, which is what makes the aggregator training phase cheap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradScope {
    pub components: bool,
    pub aggregator: bool,
    pub long_head: bool,
}

impl GradScope {
    pub fn all() -> Self {
        Self { components: true, aggregator: true, long_head: true }
    }

    /// The component training phase: LSTM stacks and per-component heads.
    pub fn component_group() -> Self {
        Self { components: true, aggregator: false, long_head: false }
    }

    /// The aggregator training phase: attention layer plus histogram head.
    pub fn aggregator_group() -> Self {
        Self { components: false, aggregator: true, long_head: true }
    }

    /// Pre-training: one component plus the histogram head it feeds.
    pub fn pretrain() -> Self {
        Self { components: true, aggregator: false, long_head: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    pub variant: Variant,
    pub layers: usize,
    pub hidden: usize,
    pub horizon: Option<u32>,
    pub components: Vec<ComponentNet>,
    /// Flattened window (6x9 = 54) -> 3 attention logits.
    pub aggregator: Dense,
    /// Long variant only: 3*6*H scaled hidden values -> 6 bin logits.
    pub long_head: Option<Dense>,
}

impl MixtureModel {
    pub fn new(cfg: MixtureConfig, rng: &mut ChaCha8Rng) -> Self {
        assert!(cfg.variant == Variant::Short || cfg.horizon.is_some(), "long variant needs a horizon");
        let flat_len = WINDOW_LEN * NUM_FEATURES;
        let components = (0..NUM_COMPONENTS)
            .map(|_| {
                let lstm = StackedLstm::new(NUM_FEATURES, cfg.hidden, cfg.layers, rng);
                let head = match cfg.variant {
                    Variant::Short => Some(Dense::new(cfg.hidden, 1, rng)),
                    Variant::Long => None,
                };
                ComponentNet { lstm, head }
            })
            .collect();
        let aggregator = Dense::new(flat_len, NUM_COMPONENTS, rng);
        let long_head = match cfg.variant {
            Variant::Short => None,
            Variant::Long => Some(Dense::new(NUM_COMPONENTS * WINDOW_LEN * cfg.hidden, BIN_COUNT, rng)),
        };
        Self {
            variant: cfg.variant,
            layers: cfg.layers,
            hidden: cfg.hidden,
            horizon: cfg.horizon,
            components,
            aggregator,
            long_head,
        }
    }

    /// All-zero parameters with the right shapes (deserialization target).
    pub fn with_shape(cfg: MixtureConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(cfg, &mut rng);
        for block in model.all_blocks_mut() {
            block.fill(0.0);
        }
        model
    }

    pub fn config(&self) -> MixtureConfig {
        MixtureConfig {
            variant: self.variant,
            layers: self.layers,
            hidden: self.hidden,
            horizon: self.horizon,
        }
    }

    fn window_rows(window: &WindowValues) -> Vec<Vec<f64>> {
        window.iter().map(|r| r.to_vec()).collect()
    }

    fn flat_window(window: &WindowValues) -> Vec<f64> {
        window.iter().flatten().copied().collect()
    }

    fn attention_weights(&self, flat: &[f64], attention: Attention) -> Vec<f64> {
        match attention {
            Attention::Learned => softmax(&self.aggregator.forward(flat)),
            Attention::Forced(k) => {
                assert!(k < NUM_COMPONENTS, "forced attention index out of range");
                let mut weights = vec![0.0; NUM_COMPONENTS];
                weights[k] = 1.0;
                weights
            }
        }
    }

    /// Predicted residual (standardized units) plus the cache for backward.
    pub fn forward_short(
        &self,
        window: &WindowValues,
        attention: Attention,
    ) -> Result<(f64, ShortCache), NnError> {
        assert_eq!(self.variant, Variant::Short, "forward_short on a long model");
        let rows = Self::window_rows(window);
        let flat = Self::flat_window(window);
        let weights = self.attention_weights(&flat, attention);

        let mut caches = Vec::with_capacity(NUM_COMPONENTS);
        let mut final_h = Vec::with_capacity(NUM_COMPONENTS);
        let mut preds = [0.0; NUM_COMPONENTS];
        for (k, comp) in self.components.iter().enumerate() {
            if weights[k] == 0.0 {
                // Masked by forced attention: contributes a_k * y_k = 0.
                caches.push(None);
                final_h.push(None);
                continue;
            }
            let (hseq, cache) = comp.lstm.forward(&rows);
            let fh = hseq.last().expect("non-empty window").clone();
            let head = comp.head.as_ref().expect("short component has a head");
            preds[k] = head.forward(&fh)[0];
            caches.push(Some(cache));
            final_h.push(Some(fh));
        }
        let output: f64 = weights.iter().zip(preds.iter()).map(|(a, y)| a * y).sum();
        ensure_finite(&[output], "short forward output")?;
        Ok((output, ShortCache { flat, caches, final_h, preds, weights, attention }))
    }

    /// Predicted six-bin histogram plus the cache for backward. The output of
    /// the softmax head is always a valid distribution.
    pub fn forward_long(
        &self,
        window: &WindowValues,
        attention: Attention,
    ) -> Result<([f64; BIN_COUNT], LongCache), NnError> {
        assert_eq!(self.variant, Variant::Long, "forward_long on a short model");
        let rows = Self::window_rows(window);
        let flat = Self::flat_window(window);
        let weights = self.attention_weights(&flat, attention);

        let mut caches = Vec::with_capacity(NUM_COMPONENTS);
        let mut hseqs = Vec::with_capacity(NUM_COMPONENTS);
        for (k, comp) in self.components.iter().enumerate() {
            if weights[k] == 0.0 {
                // Masked by forced attention: its scaled block is all zeros.
                caches.push(None);
                hseqs.push(None);
                continue;
            }
            let (hseq, cache) = comp.lstm.forward(&rows);
            caches.push(Some(cache));
            hseqs.push(Some(hseq));
        }

        let seg = WINDOW_LEN * self.hidden;
        let mut scaled = vec![0.0; NUM_COMPONENTS * seg];
        for k in 0..NUM_COMPONENTS {
            let Some(hseq) = &hseqs[k] else { continue };
            for (t, h) in hseq.iter().enumerate() {
                for (j, &v) in h.iter().enumerate() {
                    scaled[k * seg + t * self.hidden + j] = weights[k] * v;
                }
            }
        }
        let head = self.long_head.as_ref().expect("long model has a histogram head");
        let bin_logits = head.forward(&scaled);
        let probs_vec = softmax(&bin_logits);
        ensure_finite(&probs_vec, "long forward output")?;
        let mut probs = [0.0; BIN_COUNT];
        probs.copy_from_slice(&probs_vec);
        Ok((probs, LongCache { flat, caches, hseqs, scaled, probs, weights, attention }))
    }

    /// Exact gradients of the short-term output w.r.t. the parameter groups
    /// selected by `scope`. Forced attention routes no gradient to the
    /// aggregator; masked components receive none either.
    pub fn backward_short(&self, cache: &ShortCache, d_output: f64, scope: GradScope) -> MixtureGrads {
        let mut grads = MixtureGrads::zeros(self);

        if scope.aggregator && cache.attention == Attention::Learned {
            let d_weights: Vec<f64> = cache.preds.iter().map(|y| d_output * y).collect();
            let d_logits = softmax_backward(&cache.weights, &d_weights);
            let (agg, _) = self.aggregator.backward(&cache.flat, &d_logits);
            grads.aggregator = agg;
        }

        if scope.components {
            for (k, comp) in self.components.iter().enumerate() {
                let Some(stack_cache) = &cache.caches[k] else { continue };
                let fh = cache.final_h[k].as_ref().expect("cache and final_h are aligned");
                let d_pred = d_output * cache.weights[k];
                let head = comp.head.as_ref().expect("short component has a head");
                let (head_grads, d_fh) = head.backward(fh, &[d_pred]);
                let mut d_hseq = vec![vec![0.0; self.hidden]; WINDOW_LEN];
                d_hseq[WINDOW_LEN - 1] = d_fh;
                let (lstm_grads, _) = comp.lstm.backward(stack_cache, &d_hseq);
                grads.components[k] = ComponentGrads { lstm: lstm_grads, head: Some(head_grads) };
            }
        }
        grads
    }

    /// Exact gradients of the long-term output given the loss gradient on
    /// the predicted histogram (post-softmax), restricted to `scope`.
    pub fn backward_long(
        &self,
        cache: &LongCache,
        d_probs: &[f64; BIN_COUNT],
        scope: GradScope,
    ) -> MixtureGrads {
        let mut grads = MixtureGrads::zeros(self);
        let head = self.long_head.as_ref().expect("long model has a histogram head");
        let seg = WINDOW_LEN * self.hidden;

        let needs_head_input_grad =
            scope.components || (scope.aggregator && cache.attention == Attention::Learned);
        let d_bin_logits = softmax_backward(&cache.probs, d_probs);
        let d_scaled = if needs_head_input_grad {
            let (head_grads, d_scaled) = head.backward(&cache.scaled, &d_bin_logits);
            if scope.long_head {
                grads.long_head = Some(head_grads);
            }
            Some(d_scaled)
        } else {
            if scope.long_head {
                let (head_grads, _) = head.backward(&cache.scaled, &d_bin_logits);
                grads.long_head = Some(head_grads);
            }
            None
        };

        if let Some(d_scaled) = d_scaled {
            let mut d_weights = vec![0.0; NUM_COMPONENTS];
            for k in 0..NUM_COMPONENTS {
                let Some(hseq) = &cache.hseqs[k] else { continue };
                let stack_cache = cache.caches[k].as_ref().expect("cache and hseqs are aligned");
                let block = &d_scaled[k * seg..(k + 1) * seg];
                let mut d_hseq = vec![vec![0.0; self.hidden]; WINDOW_LEN];
                for (t, h) in hseq.iter().enumerate() {
                    for (j, &v) in h.iter().enumerate() {
                        let d = block[t * self.hidden + j];
                        d_hseq[t][j] = cache.weights[k] * d;
                        d_weights[k] += d * v;
                    }
                }
                if scope.components {
                    let (lstm_grads, _) = self.components[k].lstm.backward(stack_cache, &d_hseq);
                    grads.components[k] = ComponentGrads { lstm: lstm_grads, head: None };
                }
            }

            if scope.aggregator && cache.attention == Attention::Learned {
                let d_logits = softmax_backward(&cache.weights, &d_weights);
                let (agg, _) = self.aggregator.backward(&cache.flat, &d_logits);
                grads.aggregator = agg;
            }
        }
        grads
    }

    // Parameter plumbing. Block order is fixed: components (lstm cells then
    // head, per component), aggregator, long head. Serialization, optimizer
    // states, and gradient checking all rely on this order.

    pub fn component_group_blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for c in &self.components {
            out.extend(c.lstm.param_blocks());
            if let Some(h) = &c.head {
                out.extend(h.param_blocks());
            }
        }
        out
    }

    pub fn component_group_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for c in &mut self.components {
            out.extend(c.lstm.param_blocks_mut());
            if let Some(h) = &mut c.head {
                out.extend(h.param_blocks_mut());
            }
        }
        out
    }

    pub fn aggregator_group_blocks(&self) -> Vec<&[f64]> {
        let mut out = self.aggregator.param_blocks();
        if let Some(h) = &self.long_head {
            out.extend(h.param_blocks());
        }
        out
    }

    pub fn aggregator_group_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.aggregator.param_blocks_mut();
        if let Some(h) = &mut self.long_head {
            out.extend(h.param_blocks_mut());
        }
        out
    }

    pub fn all_blocks(&self) -> Vec<&[f64]> {
        let mut out = self.component_group_blocks();
        out.extend(self.aggregator_group_blocks());
        out
    }

    pub fn all_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        // Same order as all_blocks; the two groups borrow disjoint fields.
        let mut out = Vec::new();
        for c in &mut self.components {
            out.extend(c.lstm.param_blocks_mut());
            if let Some(h) = &mut c.head {
                out.extend(h.param_blocks_mut());
            }
        }
        out.extend(self.aggregator.param_blocks_mut());
        if let Some(h) = &mut self.long_head {
            out.extend(h.param_blocks_mut());
        }
        out
    }

    /// `(name, len)` per block, in `all_blocks` order.
    pub fn block_names(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (k, c) in self.components.iter().enumerate() {
            for (l, cell) in c.lstm.cells.iter().enumerate() {
                out.push((format!("component{k}.lstm{l}.wx"), cell.wx.data().len()));
                out.push((format!("component{k}.lstm{l}.wh"), cell.wh.data().len()));
                out.push((format!("component{k}.lstm{l}.b"), cell.b.len()));
            }
            if let Some(h) = &c.head {
                out.push((format!("component{k}.head.w"), h.w.data().len()));
                out.push((format!("component{k}.head.b"), h.b.len()));
            }
        }
        out.push(("aggregator.w".to_string(), self.aggregator.w.data().len()));
        out.push(("aggregator.b".to_string(), self.aggregator.b.len()));
        if let Some(h) = &self.long_head {
            out.push(("long_head.w".to_string(), h.w.data().len()));
            out.push(("long_head.b".to_string(), h.b.len()));
        }
        out
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.all_blocks().iter().flat_map(|b| b.iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for block in self.all_blocks_mut() {
            block.copy_from_slice(&flat[offset..offset + block.len()]);
            offset += block.len();
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }
}

/// Forward cache of the short variant. Component slots are `None` when the
/// component was masked out by forced attention.
pub struct ShortCache {
    flat: Vec<f64>,
    caches: Vec<Option<StackCache>>,
    final_h: Vec<Option<Vec<f64>>>,
    pub preds: [f64; NUM_COMPONENTS],
    pub weights: Vec<f64>,
    attention: Attention,
}

/// Forward cache of the long variant.
pub struct LongCache {
    flat: Vec<f64>,
    caches: Vec<Option<StackCache>>,
    hseqs: Vec<Option<Vec<Vec<f64>>>>,
    scaled: Vec<f64>,
    pub probs: [f64; BIN_COUNT],
    pub weights: Vec<f64>,
    attention: Attention,
}

#[derive(Debug, Clone)]
pub struct ComponentGrads {
    pub lstm: Vec<LstmCellGrads>,
    pub head: Option<DenseGrads>,
}

impl ComponentGrads {
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for g in &self.lstm {
            out.push(g.wx.data());
            out.push(g.wh.data());
            out.push(g.b.as_slice());
        }
        if let Some(h) = &self.head {
            out.push(h.w.data());
            out.push(h.b.as_slice());
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for g in &mut self.lstm {
            out.push(g.wx.data_mut());
            out.push(g.wh.data_mut());
            out.push(g.b.as_mut_slice());
        }
        if let Some(h) = &mut self.head {
            out.push(h.w.data_mut());
            out.push(h.b.as_mut_slice());
        }
        out
    }
}

/// Gradients aligned with the model's parameter partition.
#[derive(Debug, Clone)]
pub struct MixtureGrads {
    pub components: Vec<ComponentGrads>,
    pub aggregator: DenseGrads,
    pub long_head: Option<DenseGrads>,
}

impl MixtureGrads {
    pub fn zeros(model: &MixtureModel) -> Self {
        Self {
            components: model
                .components
                .iter()
                .map(|c| ComponentGrads {
                    lstm: c.lstm.cells.iter().map(LstmCellGrads::zeros).collect(),
                    head: c.head.as_ref().map(DenseGrads::zeros),
                })
                .collect(),
            aggregator: DenseGrads::zeros(&model.aggregator),
            long_head: model.long_head.as_ref().map(DenseGrads::zeros),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.components.iter_mut().zip(other.components.iter()) {
            for (x, y) in a.lstm.iter_mut().zip(b.lstm.iter()) {
                x.add_assign(y);
            }
            if let (Some(x), Some(y)) = (a.head.as_mut(), b.head.as_ref()) {
                x.add_assign(y);
            }
        }
        self.aggregator.add_assign(&other.aggregator);
        if let (Some(x), Some(y)) = (self.long_head.as_mut(), other.long_head.as_ref()) {
            x.add_assign(y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for c in &mut self.components {
            for g in &mut c.lstm {
                g.scale(factor);
            }
            if let Some(h) = &mut c.head {
                h.scale(factor);
            }
        }
        self.aggregator.scale(factor);
        if let Some(h) = &mut self.long_head {
            h.scale(factor);
        }
    }

    pub fn component_group_blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for c in &self.components {
            for g in &c.lstm {
                out.push(g.wx.data());
                out.push(g.wh.data());
                out.push(g.b.as_slice());
            }
            if let Some(h) = &c.head {
                out.push(h.w.data());
                out.push(h.b.as_slice());
            }
        }
        out
    }

    pub fn component_group_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for c in &mut self.components {
            for g in &mut c.lstm {
                out.push(g.wx.data_mut());
                out.push(g.wh.data_mut());
                out.push(g.b.as_mut_slice());
            }
            if let Some(h) = &mut c.head {
                out.push(h.w.data_mut());
                out.push(h.b.as_mut_slice());
            }
        }
        out
    }

    pub fn aggregator_group_blocks(&self) -> Vec<&[f64]> {
        let mut out = vec![self.aggregator.w.data(), self.aggregator.b.as_slice()];
        if let Some(h) = &self.long_head {
            out.push(h.w.data());
            out.push(h.b.as_slice());
        }
        out
    }

    pub fn aggregator_group_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.aggregator.w.data_mut(), self.aggregator.b.as_mut_slice()];
        if let Some(h) = &mut self.long_head {
            out.push(h.w.data_mut());
            out.push(h.b.as_mut_slice());
        }
        out
    }

    pub fn all_blocks(&self) -> Vec<&[f64]> {
        let mut out = self.component_group_blocks();
        out.extend(self.aggregator_group_blocks());
        out
    }
}

/// Mean squared-error loss and averaged gradients over a batch of
/// (window, standardized residual target) pairs.
pub fn short_batch_loss(
    model: &MixtureModel,
    batch: &[(&WindowValues, f64)],
    attention: Attention,
    scope: GradScope,
) -> Result<(f64, MixtureGrads), NnError> {
    assert!(!batch.is_empty(), "empty batch");
    let inv = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut grads = MixtureGrads::zeros(model);
    for (window, target) in batch {
        let (pred, cache) = model.forward_short(window, attention)?;
        let diff = pred - target;
        total += diff * diff * inv;
        let g = model.backward_short(&cache, 2.0 * diff * inv, scope);
        grads.add_assign(&g);
    }
    Ok((total, grads))
}

/// Smoothed-KL loss and averaged gradients over a batch of
/// (window, target histogram) pairs.
pub fn long_batch_loss(
    model: &MixtureModel,
    batch: &[(&WindowValues, [f64; BIN_COUNT])],
    attention: Attention,
    scope: GradScope,
) -> Result<(f64, MixtureGrads), NnError> {
    assert!(!batch.is_empty(), "empty batch");
    let inv = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut grads = MixtureGrads::zeros(model);
    for (window, target) in batch {
        let (probs, cache) = model.forward_long(window, attention)?;
        let (loss, d_probs) = kl_loss(target, &probs);
        total += loss * inv;
        let mut d = [0.0; BIN_COUNT];
        for (dk, &g) in d.iter_mut().zip(d_probs.iter()) {
            *dk = g * inv;
        }
        let g = model.backward_long(&cache, &d, scope);
        grads.add_assign(&g);
    }
    Ok((total, grads))
}

/// Check every parameter block of a model variant against central finite
/// differences on a random batch. Small widths keep this fast; every block
/// of the architecture is exercised regardless of width.
pub fn grad_check_model(
    cfg: MixtureConfig,
    batch_size: usize,
    seed: u64,
    step: f64,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = MixtureModel::new(cfg, &mut rng);

    let windows: Vec<WindowValues> = (0..batch_size)
        .map(|_| {
            let mut w = [[0.0; NUM_FEATURES]; WINDOW_LEN];
            for row in &mut w {
                for v in row.iter_mut() {
                    *v = rng.gen_range(-1.5..1.5);
                }
            }
            w
        })
        .collect();

    let analytic_flat: Vec<f64>;
    let blocks = model.block_names();
    let mut params = model.flat_params();

    match cfg.variant {
        Variant::Short => {
            let targets: Vec<f64> = (0..batch_size).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let batch: Vec<(&WindowValues, f64)> =
                windows.iter().zip(targets.iter().copied()).collect();
            let (_, grads) = short_batch_loss(&model, &batch, Attention::Learned, GradScope::all()).unwrap();
            analytic_flat = grads.all_blocks().iter().flat_map(|b| b.iter().copied()).collect();

            let mut scratch = model.clone();
            let loss_fn = move |flat: &[f64]| -> f64 {
                scratch.set_flat_params(flat);
                let batch: Vec<(&WindowValues, f64)> =
                    windows.iter().zip(targets.iter().copied()).collect();
                short_batch_loss(&scratch, &batch, Attention::Learned, GradScope::all()).unwrap().0
            };
            crate::nn::grad_check(loss_fn, &mut params, &analytic_flat, &blocks, step)
        }
        Variant::Long => {
            let targets: Vec<[f64; BIN_COUNT]> = (0..batch_size)
                .map(|_| {
                    let raw: Vec<f64> = (0..BIN_COUNT).map(|_| rng.gen_range(0.0..1.0)).collect();
                    let sum: f64 = raw.iter().sum();
                    let mut t = [0.0; BIN_COUNT];
                    for (tk, &r) in t.iter_mut().zip(raw.iter()) {
                        *tk = r / sum;
                    }
                    t
                })
                .collect();
            let batch: Vec<(&WindowValues, [f64; BIN_COUNT])> =
                windows.iter().zip(targets.iter().copied()).collect();
            let (_, grads) = long_batch_loss(&model, &batch, Attention::Learned, GradScope::all()).unwrap();
            analytic_flat = grads.all_blocks().iter().flat_map(|b| b.iter().copied()).collect();

            let mut scratch = model.clone();
            let loss_fn = move |flat: &[f64]| -> f64 {
                scratch.set_flat_params(flat);
                let batch: Vec<(&WindowValues, [f64; BIN_COUNT])> =
                    windows.iter().zip(targets.iter().copied()).collect();
                long_batch_loss(&scratch, &batch, Attention::Learned, GradScope::all()).unwrap().0
            };
            crate::nn::grad_check(loss_fn, &mut params, &analytic_flat, &blocks, step)
        }
    }
}

/// A trained model plus everything needed to run it on raw data: the feature
/// standardizer, the residual scale (short variant), and whether the flow
/// feature was zeroed during training.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub model: MixtureModel,
    pub standardizer: Standardizer,
    /// Multiplier converting standardized residual predictions to µg/m³.
    pub residual_scale: f64,
    pub nef_ablated: bool,
}

const MODEL_MAGIC: &[u8] = b"AQMX";
const MODEL_VERSION: u32 = 1;

impl ModelBundle {
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()
    }

    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MODEL_MAGIC)?;
        binio::write_u32(w, MODEL_VERSION)?;
        binio::write_u8(w, match self.model.variant {
            Variant::Short => 0,
            Variant::Long => 1,
        })?;
        binio::write_u32(w, self.model.layers as u32)?;
        binio::write_u32(w, self.model.hidden as u32)?;
        binio::write_u32(w, self.model.horizon.unwrap_or(0))?;
        binio::write_u8(w, u8::from(self.nef_ablated))?;
        binio::write_u32(w, NUM_FEATURES as u32)?;
        for k in 0..NUM_FEATURES {
            binio::write_str(w, FEATURE_NAMES[k])?;
            binio::write_f64(w, self.standardizer.mean()[k])?;
            binio::write_f64(w, self.standardizer.std()[k])?;
        }
        binio::write_f64(w, self.residual_scale)?;
        for &edge in &BIN_EDGES {
            binio::write_f64(w, edge)?;
        }
        let names = self.model.block_names();
        let blocks = self.model.all_blocks();
        binio::write_u32(w, blocks.len() as u32)?;
        for ((name, _), block) in names.iter().zip(blocks.iter()) {
            binio::write_str(w, name)?;
            binio::write_f64_slice(w, block)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read(&mut r)
    }

    pub fn read<R: Read>(r: &mut R) -> std::io::Result<Self> {
        let invalid = |msg: String| std::io::Error::new(std::io::ErrorKind::InvalidData, msg);
        binio::expect_magic(r, MODEL_MAGIC)?;
        let version = binio::read_u32(r)?;
        if version != MODEL_VERSION {
            return Err(invalid(format!("unsupported model version {version}")));
        }
        let variant = match binio::read_u8(r)? {
            0 => Variant::Short,
            1 => Variant::Long,
            v => return Err(invalid(format!("unknown variant tag {v}"))),
        };
        let layers = binio::read_u32(r)? as usize;
        let hidden = binio::read_u32(r)? as usize;
        let horizon = match binio::read_u32(r)? {
            0 => None,
            s => Some(s),
        };
        let nef_ablated = binio::read_u8(r)? != 0;
        let n_features = binio::read_u32(r)? as usize;
        if n_features != NUM_FEATURES {
            return Err(invalid(format!("expected {NUM_FEATURES} features, found {n_features}")));
        }
        let mut mean = [0.0; NUM_FEATURES];
        let mut std = [0.0; NUM_FEATURES];
        for k in 0..NUM_FEATURES {
            let name = binio::read_str(r)?;
            if name != FEATURE_NAMES[k] {
                return Err(invalid(format!("feature order mismatch: {name}")));
            }
            mean[k] = binio::read_f64(r)?;
            std[k] = binio::read_f64(r)?;
        }
        let standardizer = Standardizer::from_stats(mean, std)
            .map_err(|e| invalid(e.to_string()))?;
        let residual_scale = binio::read_f64(r)?;
        for &edge in &BIN_EDGES {
            let stored = binio::read_f64(r)?;
            if stored != edge {
                return Err(invalid(format!("bin scheme mismatch: edge {stored} vs {edge}")));
            }
        }

        let cfg = MixtureConfig { variant, layers, hidden, horizon };
        let mut model = MixtureModel::with_shape(cfg);
        let names = model.block_names();
        let n_blocks = binio::read_u32(r)? as usize;
        if n_blocks != names.len() {
            return Err(invalid(format!("expected {} blocks, found {n_blocks}", names.len())));
        }
        let mut loaded = Vec::with_capacity(n_blocks);
        for (name, len) in &names {
            let stored_name = binio::read_str(r)?;
            if &stored_name != name {
                return Err(invalid(format!("block order mismatch: {stored_name} vs {name}")));
            }
            let values = binio::read_f64_vec(r)?;
            if values.len() != *len {
                return Err(invalid(format!("block {name}: length {} vs {len}", values.len())));
            }
            loaded.push(values);
        }
        for (block, values) in model.all_blocks_mut().into_iter().zip(loaded.iter()) {
            block.copy_from_slice(values);
        }
        Ok(Self { model, standardizer, residual_scale, nef_ablated })
    }
}
