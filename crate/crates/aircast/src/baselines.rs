//! KNN and linear-regression baselines.
//!
//! Both predict the same next-hour residual target as the mixture model and
//! plug into the shared iterated-forecast procedure, so every method faces
//! identical horizons. KNN additionally serves probabilistic forecasts by
//! averaging the target histograms of the identified neighborhood.

use thiserror::Error;

use crate::data::{HistogramTarget, WindowValues, BIN_COUNT, NUM_FEATURES, WINDOW_LEN};
use crate::dataset::{HistogramExample, PointExample};
use crate::forecast::{ForecastError, ResidualModel};

const FLAT_LEN: usize = WINDOW_LEN * NUM_FEATURES;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("cannot fit on an empty training set")]
    EmptyTrainSet,
    #[error("design matrix is rank-deficient beyond ridge rescue (pivot {pivot:.3e} at column {column})")]
    RankDeficient { pivot: f64, column: usize },
}

fn flatten(values: &WindowValues) -> [f64; FLAT_LEN] {
    let mut out = [0.0; FLAT_LEN];
    for (t, row) in values.iter().enumerate() {
        out[t * NUM_FEATURES..(t + 1) * NUM_FEATURES].copy_from_slice(row);
    }
    out
}

fn squared_distance(a: &[f64; FLAT_LEN], b: &[f64; FLAT_LEN]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Indices of the `k` nearest stored windows under Euclidean distance on
/// flattened standardized windows; ties broken by training-example index.
fn nearest_indices(stored: &[[f64; FLAT_LEN]], query: &[f64; FLAT_LEN], k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> =
        stored.iter().enumerate().map(|(i, w)| (squared_distance(w, query), i)).collect();
    let k = k.min(scored.len());
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    scored.into_iter().map(|(_, i)| i).collect()
}

fn effective_k(requested: usize, train_size: usize) -> usize {
    assert!(requested >= 1, "k must be >= 1");
    if requested > train_size {
        log::warn!("k={requested} exceeds training size {train_size}; clamping");
        train_size
    } else {
        requested
    }
}

/// Brute-force KNN over point examples: the prediction is the mean residual
/// target (µg/m³) of the k nearest training windows.
pub struct KnnPointModel {
    windows: Vec<[f64; FLAT_LEN]>,
    targets: Vec<f64>,
    k: usize,
}

impl KnnPointModel {
    pub fn fit(train: &[PointExample], k: usize) -> Result<Self, BaselineError> {
        if train.is_empty() {
            return Err(BaselineError::EmptyTrainSet);
        }
        Ok(Self {
            windows: train.iter().map(|e| flatten(&e.window.values)).collect(),
            targets: train.iter().map(|e| e.target).collect(),
            k: effective_k(k, train.len()),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

impl ResidualModel for KnnPointModel {
    fn predict_residual(&self, window: &WindowValues) -> Result<f64, ForecastError> {
        let q = flatten(window);
        let idx = nearest_indices(&self.windows, &q, self.k);
        Ok(idx.iter().map(|&i| self.targets[i]).sum::<f64>() / idx.len() as f64)
    }
}

/// KNN over histogram examples: element-wise mean of the k nearest
/// neighbors' target histograms (a mean of valid histograms is valid).
pub struct KnnHistogramModel {
    windows: Vec<[f64; FLAT_LEN]>,
    targets: Vec<[f64; BIN_COUNT]>,
    k: usize,
    pub horizon: u32,
}

impl KnnHistogramModel {
    pub fn fit(train: &[HistogramExample], k: usize) -> Result<Self, BaselineError> {
        if train.is_empty() {
            return Err(BaselineError::EmptyTrainSet);
        }
        Ok(Self {
            windows: train.iter().map(|e| flatten(&e.window.values)).collect(),
            targets: train.iter().map(|e| *e.target.probabilities()).collect(),
            k: effective_k(k, train.len()),
            horizon: train[0].horizon,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn predict(&self, window: &WindowValues) -> HistogramTarget {
        let q = flatten(window);
        let idx = nearest_indices(&self.windows, &q, self.k);
        let mut probs = [0.0; BIN_COUNT];
        for &i in &idx {
            for (p, &t) in probs.iter_mut().zip(self.targets[i].iter()) {
                *p += t;
            }
        }
        for p in &mut probs {
            *p /= idx.len() as f64;
        }
        HistogramTarget::new(probs).expect("mean of valid histograms is valid")
    }
}

/// Ridge-damped least squares on flattened windows plus an intercept,
/// solved by Cholesky on the normal equations.
pub struct LinearModel {
    /// FLAT_LEN feature coefficients followed by the intercept.
    coefficients: Vec<f64>,
}

const RIDGE_LAMBDA: f64 = 1e-8;

impl LinearModel {
    pub fn fit(train: &[PointExample]) -> Result<Self, BaselineError> {
        if train.is_empty() {
            return Err(BaselineError::EmptyTrainSet);
        }
        let d = FLAT_LEN + 1;
        // Normal equations: (XᵀX + λI) β = Xᵀy with an intercept column.
        let mut ata = vec![0.0; d * d];
        let mut aty = vec![0.0; d];
        let mut x = [0.0; FLAT_LEN + 1];
        for e in train {
            x[..FLAT_LEN].copy_from_slice(&flatten(&e.window.values));
            x[FLAT_LEN] = 1.0;
            for i in 0..d {
                aty[i] += x[i] * e.target;
                for j in i..d {
                    ata[i * d + j] += x[i] * x[j];
                }
            }
        }
        for i in 0..d {
            ata[i * d + i] += RIDGE_LAMBDA;
            for j in 0..i {
                ata[i * d + j] = ata[j * d + i];
            }
        }
        let coefficients = cholesky_solve(&ata, &aty, d)?;
        Ok(Self { coefficients })
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn predict(&self, window: &WindowValues) -> f64 {
        let x = flatten(window);
        let mut y = self.coefficients[FLAT_LEN];
        for (b, v) in self.coefficients[..FLAT_LEN].iter().zip(x.iter()) {
            y += b * v;
        }
        y
    }
}

impl ResidualModel for LinearModel {
    fn predict_residual(&self, window: &WindowValues) -> Result<f64, ForecastError> {
        Ok(self.predict(window))
    }
}

/// Solve the SPD system `A x = b` via Cholesky. Fails when a pivot collapses,
/// which with the ridge term means rank deficiency beyond rescue.
fn cholesky_solve(a: &[f64], b: &[f64], d: usize) -> Result<Vec<f64>, BaselineError> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut sum = a[i * d + j];
            for k in 0..j {
                sum -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(BaselineError::RankDeficient { pivot: sum, column: i });
                }
                l[i * d + i] = sum.sqrt();
            } else {
                l[i * d + j] = sum / l[j * d + j];
            }
        }
    }
    // Forward then backward substitution.
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * d + k] * y[k];
        }
        y[i] = sum / l[i * d + i];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut sum = y[i];
        for k in i + 1..d {
            sum -= l[k * d + i] * x[k];
        }
        x[i] = sum / l[i * d + i];
    }
    Ok(x)
}
