//! Adam with bias correction, operating on lists of flat parameter blocks,
//! plus global-norm gradient clipping.

use std::io::{Read, Write};

use crate::binio;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.005, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First/second-moment accumulators for a fixed list of parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(block_sizes: &[usize]) -> Self {
        Self {
            m: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn for_blocks(blocks: &[&[f64]]) -> Self {
        Self::new(&blocks.iter().map(|b| b.len()).collect::<Vec<_>>())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. `params` and `grads` must match the shapes
    /// this state was created with.
    pub fn step(&mut self, cfg: &AdamConfig, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len(), "adam: block count mismatch");
        assert_eq!(grads.len(), self.m.len(), "adam: gradient block count mismatch");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);

        for (block, ((p, g), (m, v))) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .enumerate()
        {
            assert_eq!(p.len(), m.len(), "adam: block {block} size mismatch");
            assert_eq!(g.len(), m.len(), "adam: gradient block {block} size mismatch");
            for k in 0..p.len() {
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
    }

    pub fn save<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        binio::write_u64(w, self.step)?;
        binio::write_u32(w, self.m.len() as u32)?;
        for (m, v) in self.m.iter().zip(self.v.iter()) {
            binio::write_f64_slice(w, m)?;
            binio::write_f64_slice(w, v)?;
        }
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> std::io::Result<Self> {
        let step = binio::read_u64(r)?;
        let n = binio::read_u32(r)? as usize;
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            m.push(binio::read_f64_vec(r)?);
            v.push(binio::read_f64_vec(r)?);
        }
        Ok(Self { m, v, step })
    }
}

/// Euclidean norm across all blocks.
pub fn global_norm(blocks: &[&[f64]]) -> f64 {
    blocks.iter().flat_map(|b| b.iter()).map(|g| g * g).sum::<f64>().sqrt()
}

/// Scale every block in place so the global norm does not exceed `max_norm`.
pub fn clip_global_norm(blocks: &mut [&mut [f64]], max_norm: f64) {
    let norm = blocks.iter().flat_map(|b| b.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for b in blocks.iter_mut() {
            for g in b.iter_mut() {
                *g *= scale;
            }
        }
    }
}
