//! Central-difference gradient checking against analytic gradients, reported
//! per named parameter block.

/// Worst relative error found in one parameter block.
#[derive(Debug, Clone)]
pub struct BlockResult {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockResult>,
    pub step: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err() < tolerance
    }

    /// One line per block: name and worst relative error.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            out.push_str(&format!("{:<40} max rel err {:.3e}\n", b.name, b.max_rel_err));
        }
        out
    }
}

/// Compare `analytic` to central finite differences of `loss` around
/// `params`, block by block. `loss` must be deterministic in `params`.
///
/// Relative error uses `|fd - an| / max(|fd|, |an|, 1e-6)` so near-zero
/// gradients degrade gracefully to an absolute comparison.
pub fn grad_check<F>(
    mut loss: F,
    params: &mut [f64],
    analytic: &[f64],
    blocks: &[(String, usize)],
    step: f64,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let total: usize = blocks.iter().map(|(_, n)| n).sum();
    assert_eq!(total, params.len(), "block spans must cover all parameters");

    let mut results = Vec::with_capacity(blocks.len());
    let mut offset = 0;
    for (name, len) in blocks {
        let mut max_rel: f64 = 0.0;
        for k in offset..offset + len {
            let original = params[k];
            params[k] = original + step;
            let up = loss(params);
            params[k] = original - step;
            let down = loss(params);
            params[k] = original;
            let fd = (up - down) / (2.0 * step);
            let an = analytic[k];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
        results.push(BlockResult { name: name.clone(), max_rel_err: max_rel });
        offset += len;
    }
    GradCheckReport { blocks: results, step }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_matches_to_machine_precision() {
        // loss = 0.5 * ||p||^2, gradient = p.
        let mut params = vec![0.3, -1.7, 2.4, 0.0];
        let analytic = params.clone();
        let report = grad_check(
            |p| 0.5 * p.iter().map(|v| v * v).sum::<f64>(),
            &mut params,
            &analytic,
            &[("params".to_string(), 4)],
            1e-5,
        );
        assert!(report.max_rel_err() < 1e-9, "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut params = vec![1.0, 2.0];
        let analytic = vec![1.0, 1.0]; // wrong for the second coordinate
        let report = grad_check(
            |p| 0.5 * p.iter().map(|v| v * v).sum::<f64>(),
            &mut params,
            &analytic,
            &[("a".to_string(), 1), ("b".to_string(), 1)],
            1e-5,
        );
        assert!(report.blocks[0].max_rel_err < 1e-9);
        assert!(report.blocks[1].max_rel_err > 0.1);
        assert!(!report.passes(1e-4));
    }
}
