//! Fully connected layer `y = W x + b`.

use rand::Rng;

use super::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`.
    pub w: Matrix,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl DenseGrads {
    pub fn zeros(layer: &Dense) -> Self {
        Self { w: layer.w.zeros_like(), b: vec![0.0; layer.b.len()] }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.w.add_assign(&other.w);
        for (a, b) in self.b.iter_mut().zip(other.b.iter()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.w.scale(factor);
        for a in &mut self.b {
            *a *= factor;
        }
    }
}

impl Dense {
    /// Weights uniform in `[-1/sqrt(in), 1/sqrt(in))`, zero bias.
    pub fn new<R: Rng>(input_size: usize, output_size: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input_size as f64).sqrt();
        Self { w: Matrix::uniform(output_size, input_size, bound, rng), b: vec![0.0; output_size] }
    }

    pub fn zeroed(input_size: usize, output_size: usize) -> Self {
        Self { w: Matrix::zeros(output_size, input_size), b: vec![0.0; output_size] }
    }

    pub fn input_size(&self) -> usize {
        self.w.cols()
    }

    pub fn output_size(&self) -> usize {
        self.w.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.w.matvec(x);
        for (yo, bo) in y.iter_mut().zip(self.b.iter()) {
            *yo += bo;
        }
        y
    }

    pub fn backward(&self, x: &[f64], dy: &[f64]) -> (DenseGrads, Vec<f64>) {
        assert_eq!(dy.len(), self.output_size(), "dense backward: dy length mismatch");
        let mut grads = DenseGrads::zeros(self);
        grads.w.add_outer(dy, x);
        grads.b.copy_from_slice(dy);
        let dx = self.w.matvec_t(dy);
        (grads, dx)
    }

    pub fn param_blocks(&self) -> Vec<&[f64]> {
        vec![self.w.data(), &self.b]
    }

    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w.data_mut(), &mut self.b]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_and_backward_match_hand_computation() {
        let layer = Dense {
            w: Matrix::from_vec(2, 3, vec![1.0, 0.0, -1.0, 2.0, 1.0, 0.5]),
            b: vec![0.5, -0.5],
        };
        let x = [1.0, 2.0, 3.0];
        let y = layer.forward(&x);
        assert_eq!(y, vec![1.0 - 3.0 + 0.5, 2.0 + 2.0 + 1.5 - 0.5]);

        let dy = [1.0, -1.0];
        let (grads, dx) = layer.backward(&x, &dy);
        assert_eq!(grads.b, vec![1.0, -1.0]);
        assert_eq!(grads.w.data(), &[1.0, 2.0, 3.0, -1.0, -2.0, -3.0]);
        // dx = Wᵀ dy
        assert_eq!(dx, vec![1.0 - 2.0, 0.0 - 1.0, -1.0 - 0.5]);
    }
}
