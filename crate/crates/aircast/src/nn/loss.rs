//! Softmax and the two training losses: mean squared error for residual
//! regression and Kullback-Leibler divergence for histogram prediction.
//!
//! Empirical histograms contain zeros, so KL is always evaluated after
//! additive-epsilon smoothing of BOTH distributions (then renormalizing);
//! the same smoothing is used for training and evaluation. The direction is
//! KL(actual || predicted).

/// Additive smoothing applied to both histograms before KL.
pub const KL_EPSILON: f64 = 1e-6;

/// Numerically stable softmax; outputs are positive and sum to 1.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    assert!(!logits.is_empty(), "softmax needs at least one logit");
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Gradient of a loss w.r.t. logits given its gradient w.r.t. softmax outputs.
pub fn softmax_backward(probs: &[f64], d_probs: &[f64]) -> Vec<f64> {
    assert_eq!(probs.len(), d_probs.len(), "softmax backward length mismatch");
    let dot: f64 = probs.iter().zip(d_probs.iter()).map(|(p, d)| p * d).sum();
    probs.iter().zip(d_probs.iter()).map(|(p, d)| p * (d - dot)).collect()
}

/// Mean squared error and its gradient w.r.t. the prediction.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(pred.len(), target.len(), "mse length mismatch");
    assert!(!pred.is_empty(), "mse needs at least one element");
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (g, (&p, &t)) in grad.iter_mut().zip(pred.iter().zip(target.iter())) {
        let d = p - t;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    (loss / n, grad)
}

/// Raw KL(p || q) = sum p ln(p/q) with the convention 0 ln 0 = 0.
/// Callers must ensure q > 0 wherever p > 0 (the smoothed entry points do).
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "kl length mismatch");
    p.iter()
        .zip(q.iter())
        .map(|(&pk, &qk)| if pk > 0.0 { pk * (pk / qk).ln() } else { 0.0 })
        .sum()
}

fn smooth(h: &[f64]) -> Vec<f64> {
    let norm = 1.0 + h.len() as f64 * KL_EPSILON;
    h.iter().map(|&v| (v + KL_EPSILON) / norm).collect()
}

/// Smoothed KL(actual || predicted); the evaluation metric.
pub fn kl_smoothed(actual: &[f64], predicted: &[f64]) -> f64 {
    kl_divergence(&smooth(actual), &smooth(predicted))
}

/// Smoothed KL(actual || predicted) plus its exact gradient w.r.t. the raw
/// (unsmoothed) prediction.
pub fn kl_loss(actual: &[f64], predicted: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(actual.len(), predicted.len(), "kl length mismatch");
    let p = smooth(actual);
    let q = smooth(predicted);
    let loss = kl_divergence(&p, &q);
    // d/dq_k' of -sum p ln q' is -p_k/q_k'; the smoothing map is affine with
    // slope 1/(1 + K eps).
    let slope = 1.0 / (1.0 + actual.len() as f64 * KL_EPSILON);
    let grad = p.iter().zip(q.iter()).map(|(&pk, &qk)| -pk / qk * slope).collect();
    (loss, grad)
}
