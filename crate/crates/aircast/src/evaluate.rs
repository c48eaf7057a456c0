//! MAE / KL evaluation harness: per-method, per-horizon metrics on the test
//! split, emitted as CSV and aligned-text tables.
//!
//! Point forecasts are evaluated per example: each test timestamp starts
//! from the true observed window and iterates the next-hour model out to the
//! horizon (no chaining across examples). Probabilistic forecasts compare
//! predicted histograms against the histograms built from true future
//! values.

use std::collections::BTreeMap;
use std::collections::HashMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{ForecastMode, HistogramTarget, WindowValues, WINDOW_LEN};
use crate::dataset::{
    build_histogram_examples, build_point_examples, split_histogram_examples,
    split_point_examples, Split,
};
use crate::forecast::{predict_histogram, predict_point, ForecastError, MixtureResidualModel};
use crate::baselines::{BaselineError, KnnHistogramModel, KnnPointModel, LinearModel};
use crate::ingest::{FeatureSet, StationSeries};
use crate::model::ModelBundle;
use crate::nn::kl_smoothed;

/// Point-forecast horizons of the benchmark grid (hours).
pub const POINT_HORIZONS: [u32; 9] = [1, 2, 3, 4, 5, 6, 8, 12, 24];

/// Probabilistic-forecast horizons of the benchmark grid (hours).
pub const PROB_HORIZONS: [u32; 5] = [6, 8, 12, 24, 48];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric called on empty input")]
    Empty,
    #[error("prediction/actual length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

/// Mean absolute error in µg/m³.
pub fn mae(predictions: &[f64], actuals: &[f64]) -> Result<f64, EvalError> {
    if predictions.len() != actuals.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), actuals.len()));
    }
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    let sum: f64 = predictions.iter().zip(actuals.iter()).map(|(p, a)| (p - a).abs()).sum();
    Ok(sum / predictions.len() as f64)
}

/// Mean smoothed KL(actual || predicted) over paired histograms.
pub fn mean_kl(
    predictions: &[HistogramTarget],
    actuals: &[HistogramTarget],
) -> Result<f64, EvalError> {
    if predictions.len() != actuals.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), actuals.len()));
    }
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    let sum: f64 = predictions
        .iter()
        .zip(actuals.iter())
        .map(|(p, a)| kl_smoothed(a.probabilities(), p.probabilities()))
        .sum();
    Ok(sum / predictions.len() as f64)
}

/// One point-forecast evaluation case: the true observed window ending at
/// `t` plus the true pm2.5 `horizon` hours later.
#[derive(Debug, Clone)]
pub struct PointEvalCase {
    pub station_id: String,
    pub t: i64,
    pub window: WindowValues,
    pub last_pm25: f64,
    pub actual: f64,
    pub split: Split,
}

/// All valid evaluation cases for a horizon, every split, deterministic
/// order. Only the window and the value at `t + horizon` must exist; the
/// iterated forecaster supplies the hours between.
pub fn point_eval_cases(series: &[StationSeries], horizon: u32) -> Vec<PointEvalCase> {
    let mut out = Vec::new();
    for s in series {
        let index: HashMap<i64, usize> =
            s.rows.iter().enumerate().map(|(i, r)| (r.timestamp, i)).collect();
        let mut contig = 0usize;
        for i in 0..s.rows.len() {
            contig = if i > 0 && s.rows[i].timestamp == s.rows[i - 1].timestamp + 1 {
                contig + 1
            } else {
                1
            };
            if contig < WINDOW_LEN {
                continue;
            }
            let t = s.rows[i].timestamp;
            let Some(&target_idx) = index.get(&(t + horizon as i64)) else { continue };
            let mut window = [[0.0; crate::data::NUM_FEATURES]; WINDOW_LEN];
            for (k, row) in s.rows[i + 1 - WINDOW_LEN..=i].iter().enumerate() {
                window[k] = row.features;
            }
            let first = t - (WINDOW_LEN as i64 - 1);
            let last = t + horizon as i64;
            let split = if last < s.split_boundary {
                Split::Train
            } else if first >= s.split_boundary {
                Split::Test
            } else {
                Split::Straddling
            };
            out.push(PointEvalCase {
                station_id: s.station_id.clone(),
                t,
                window,
                last_pm25: s.rows[i].raw_pm25,
                actual: s.rows[target_idx].raw_pm25,
                split,
            });
        }
    }
    out
}

/// Deterministic even-stride subsample capping a cell's example count.
pub fn stride_sample<T>(items: Vec<T>, max: usize) -> Vec<T> {
    if items.len() <= max || max == 0 {
        return items;
    }
    let stride = items.len().div_ceil(max);
    items.into_iter().step_by(stride).collect()
}

/// Trained mixture bundles available to the benchmark, keyed by role.
#[derive(Default)]
pub struct ModelRegistry {
    pub short: Option<ModelBundle>,
    pub long: BTreeMap<u32, ModelBundle>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkConfig {
    pub knn_k: usize,
    /// Cap on evaluation examples per (method, horizon) cell.
    pub max_examples: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self { knn_k: 5, max_examples: 400, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub horizon: u32,
    pub mode: ForecastMode,
    pub metric: &'static str,
    /// None marks an absent cell (no model / no examples).
    pub value: Option<f64>,
    pub n_examples: usize,
    pub k: Option<usize>,
    pub seed: u64,
}

/// Per-horizon MAE (point) and KL (probabilistic) results for all methods.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForecastReport {
    pub rows: Vec<ReportRow>,
}

impl ForecastReport {
    pub fn value(&self, method: &str, horizon: u32, mode: ForecastMode) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.horizon == horizon && r.mode == mode)
            .and_then(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,horizon,mode,metric,value,n_examples,k,seed\n");
        for r in &self.rows {
            let mode = match r.mode {
                ForecastMode::Point => "point",
                ForecastMode::Probabilistic => "probabilistic",
            };
            let value = r.value.map(|v| v.to_string()).unwrap_or_default();
            let k = r.k.map(|k| k.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.method, r.horizon, mode, r.metric, value, r.n_examples, k, r.seed
            ));
        }
        out
    }

    /// Two aligned-text grids shaped like the benchmark tables.
    pub fn render_tables(&self) -> String {
        let fmt_cell = |v: Option<f64>| match v {
            Some(v) => format!("{v:>12.2}"),
            None => format!("{:>12}", "-"),
        };
        let mut out = String::new();
        out.push_str("Point prediction MAE (ug/m3) by horizon (hours)\n");
        out.push_str(&format!("{:<10}", "method"));
        for h in POINT_HORIZONS {
            out.push_str(&format!("{h:>12}"));
        }
        out.push('\n');
        for method in ["knn", "linear", "mixture"] {
            out.push_str(&format!("{method:<10}"));
            for h in POINT_HORIZONS {
                out.push_str(&fmt_cell(self.value(method, h, ForecastMode::Point)));
            }
            out.push('\n');
        }
        out.push('\n');
        out.push_str("Probabilistic prediction mean KL by horizon (hours, window s +/- s/2)\n");
        out.push_str(&format!("{:<10}", "method"));
        for h in PROB_HORIZONS {
            out.push_str(&format!("{h:>12}"));
        }
        out.push('\n');
        for method in ["knn", "mixture"] {
            out.push_str(&format!("{method:<10}"));
            for h in PROB_HORIZONS {
                out.push_str(&fmt_cell(self.value(method, h, ForecastMode::Probabilistic)));
            }
            out.push('\n');
        }
        out
    }
}

/// Run the full benchmark grid: point MAE for {knn, linear, mixture} over
/// the point horizons and mean KL for {knn, mixture} over the probabilistic
/// horizons, all on the test split. Missing models produce absent cells;
/// the run continues.
pub fn run_benchmark(
    features: &FeatureSet,
    registry: &ModelRegistry,
    cfg: &BenchmarkConfig,
) -> Result<ForecastReport, EvalError> {
    let mut report = ForecastReport::default();
    let standardizer = &features.standardizer;

    let (point_train, _) = split_point_examples(build_point_examples(&features.series));
    let knn = if point_train.is_empty() {
        None
    } else {
        Some(KnnPointModel::fit(&point_train, cfg.knn_k)?)
    };
    let linear = match LinearModel::fit(&point_train) {
        Ok(m) => Some(m),
        Err(e) => {
            log::warn!("linear baseline unavailable: {e}");
            None
        }
    };
    let mixture_short =
        registry.short.as_ref().map(MixtureResidualModel::new).transpose().map_err(EvalError::from)?;

    for horizon in POINT_HORIZONS {
        let cases: Vec<PointEvalCase> = stride_sample(
            point_eval_cases(&features.series, horizon)
                .into_iter()
                .filter(|c| c.split == Split::Test)
                .collect(),
            cfg.max_examples,
        );
        assert!(cases.iter().all(|c| c.split == Split::Test), "metric input must be test-only");
        let actuals: Vec<f64> = cases.iter().map(|c| c.actual).collect();

        let mut eval_method = |method: &str,
                               model: Option<&dyn crate::forecast::ResidualModel>,
                               k: Option<usize>|
         -> Result<(), EvalError> {
            let (value, n) = match (model, cases.is_empty()) {
                (Some(model), false) => {
                    let preds: Result<Vec<f64>, ForecastError> = cases
                        .par_iter()
                        .map(|c| predict_point(model, standardizer, &c.window, c.last_pm25, horizon))
                        .collect();
                    (Some(mae(&preds?, &actuals)?), cases.len())
                }
                _ => (None, cases.len()),
            };
            report.rows.push(ReportRow {
                method: method.to_string(),
                horizon,
                mode: ForecastMode::Point,
                metric: "mae",
                value,
                n_examples: n,
                k,
                seed: cfg.seed,
            });
            Ok(())
        };

        eval_method("knn", knn.as_ref().map(|m| m as _), knn.as_ref().map(|m| m.k()))?;
        eval_method("linear", linear.as_ref().map(|m| m as _), None)?;
        eval_method("mixture", mixture_short.as_ref().map(|m| m as _), None)?;
    }

    for horizon in PROB_HORIZONS {
        let examples = build_histogram_examples(&features.series, horizon)?;
        let (train_h, test_h) = split_histogram_examples(examples);
        let test_h = stride_sample(test_h, cfg.max_examples);
        assert!(test_h.iter().all(|e| e.split == Split::Test), "metric input must be test-only");
        let actuals: Vec<HistogramTarget> = test_h.iter().map(|e| e.target.clone()).collect();

        let knn_h = if train_h.is_empty() {
            None
        } else {
            Some(KnnHistogramModel::fit(&train_h, cfg.knn_k)?)
        };
        let (knn_value, knn_k) = match (&knn_h, test_h.is_empty()) {
            (Some(model), false) => {
                let preds: Vec<HistogramTarget> =
                    test_h.par_iter().map(|e| model.predict(&e.window.values)).collect();
                (Some(mean_kl(&preds, &actuals)?), Some(model.k()))
            }
            _ => (None, None),
        };
        report.rows.push(ReportRow {
            method: "knn".into(),
            horizon,
            mode: ForecastMode::Probabilistic,
            metric: "kl",
            value: knn_value,
            n_examples: test_h.len(),
            k: knn_k,
            seed: cfg.seed,
        });

        let mixture_value = match (registry.long.get(&horizon), test_h.is_empty()) {
            (Some(bundle), false) => {
                let preds: Result<Vec<HistogramTarget>, ForecastError> = test_h
                    .par_iter()
                    .map(|e| predict_histogram(bundle, &e.window.values, horizon))
                    .collect();
                Some(mean_kl(&preds?, &actuals)?)
            }
            _ => None,
        };
        report.rows.push(ReportRow {
            method: "mixture".into(),
            horizon,
            mode: ForecastMode::Probabilistic,
            metric: "kl",
            value: mixture_value,
            n_examples: test_h.len(),
            k: None,
            seed: cfg.seed,
        });
    }

    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{StationMeta, NUM_FEATURES};
    use crate::ingest::{FeatureRow, Standardizer};
    use crate::model::{MixtureConfig, MixtureModel};
    use crate::nn::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mae_basics() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((mae(&[10.0, 20.0], &[12.0, 16.0]).unwrap() - 3.0).abs() < 1e-12);
        assert!(mae(&[], &[]).is_err());
        assert!(mae(&[1.0], &[]).is_err());
    }

    #[test]
    fn mae_matches_naive_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let preds: Vec<f64> = (0..1000).map(|_| rng.gen_range(-100.0..100.0)).collect();
        let actuals: Vec<f64> = (0..1000).map(|_| rng.gen_range(-100.0..100.0)).collect();
        let got = mae(&preds, &actuals).unwrap();
        let mut sum = 0.0;
        for i in 0..1000 {
            let d = preds[i] - actuals[i];
            sum += if d < 0.0 { -d } else { d };
        }
        let expect = sum / 1000.0;
        assert_eq!(got, expect);
    }

    fn random_histograms(n: usize, seed: u64) -> Vec<HistogramTarget> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
                let s: f64 = raw.iter().sum();
                let mut p = [0.0; 6];
                for (pk, r) in p.iter_mut().zip(raw.iter()) {
                    *pk = r / s;
                }
                HistogramTarget::new(p).unwrap()
            })
            .collect()
    }

    #[test]
    fn mean_kl_basics() {
        let hs = random_histograms(10, 2);
        assert_eq!(mean_kl(&hs, &hs).unwrap(), 0.0);

        let point = vec![HistogramTarget::new([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap()];
        let uniform = vec![HistogramTarget::new([1.0 / 6.0; 6]).unwrap()];
        let kl = mean_kl(&uniform, &point).unwrap();
        assert!((kl - 6.0f64.ln()).abs() < 1e-4, "kl {kl}");
    }

    #[test]
    fn mean_kl_matches_naive_loop_oracle() {
        let preds = random_histograms(50, 3);
        let actuals = random_histograms(50, 4);
        let got = mean_kl(&preds, &actuals).unwrap();
        let mut sum = 0.0;
        for (p, a) in preds.iter().zip(actuals.iter()) {
            sum += kl_smoothed(a.probabilities(), p.probabilities());
        }
        assert!((got - sum / 50.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let preds: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..50.0)).collect();
        let actuals: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..50.0)).collect();
        let base = mae(&preds, &actuals).unwrap();
        let perm: Vec<usize> = {
            use rand::seq::SliceRandom;
            let mut idx: Vec<usize> = (0..64).collect();
            idx.shuffle(&mut rng);
            idx
        };
        let preds_p: Vec<f64> = perm.iter().map(|&i| preds[i]).collect();
        let actuals_p: Vec<f64> = perm.iter().map(|&i| actuals[i]).collect();
        let permuted = mae(&preds_p, &actuals_p).unwrap();
        assert!((base - permuted).abs() < 1e-12);

        let hp = random_histograms(64, 6);
        let ha = random_histograms(64, 7);
        let base = mean_kl(&hp, &ha).unwrap();
        let hp_p: Vec<_> = perm.iter().map(|&i| hp[i].clone()).collect();
        let ha_p: Vec<_> = perm.iter().map(|&i| ha[i].clone()).collect();
        let permuted = mean_kl(&hp_p, &ha_p).unwrap();
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn stride_sample_caps_and_preserves_order() {
        let items: Vec<usize> = (0..1000).collect();
        let sampled = stride_sample(items, 400);
        assert!(sampled.len() <= 400);
        assert!(sampled.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sampled[0], 0);
        let small = stride_sample(vec![1, 2, 3], 400);
        assert_eq!(small, vec![1, 2, 3]);
    }

    /// A deployment with constant pm2.5 and a zero-head mixture: every
    /// method that can run is exact persistence, so every MAE cell is zero.
    #[test]
    fn constant_data_with_persistence_models_gives_zero_mae() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let stations = vec![
            StationMeta::new("a", 28.5, 77.1).unwrap(),
            StationMeta::new("b", 28.6, 77.2).unwrap(),
        ];
        let mean = [0.0; NUM_FEATURES];
        let mut std = [1.0; NUM_FEATURES];
        std[crate::data::F_PM25] = 10.0;
        let standardizer = Standardizer::from_stats(mean, std).unwrap();
        let series: Vec<_> = stations
            .iter()
            .map(|m| crate::ingest::StationSeries {
                station_id: m.station_id.clone(),
                rows: (0..400)
                    .map(|t| {
                        let mut features = [0.0; NUM_FEATURES];
                        for f in features.iter_mut() {
                            *f = rng.gen_range(-1.0..1.0);
                        }
                        features[crate::data::F_PM25] = 4.2; // constant 42 raw
                        FeatureRow { timestamp: t, features, raw_pm25: 42.0 }
                    })
                    .collect(),
                split_boundary: 340,
            })
            .collect();
        let features = FeatureSet { stations, standardizer, series, train_percent: 85 };

        let mut model = MixtureModel::new(MixtureConfig::short(), &mut rng);
        for c in &mut model.components {
            let head = c.head.as_mut().unwrap();
            head.w = Matrix::zeros(1, model.hidden);
            head.b = vec![0.0];
        }
        let registry = ModelRegistry {
            short: Some(ModelBundle {
                model,
                standardizer: features.standardizer.clone(),
                residual_scale: 1.0,
                nef_ablated: false,
            }),
            long: BTreeMap::new(),
        };
        let report =
            run_benchmark(&features, &registry, &BenchmarkConfig::default()).unwrap();
        for h in POINT_HORIZONS {
            for method in ["knn", "linear", "mixture"] {
                let v = report.value(method, h, ForecastMode::Point);
                let v = v.unwrap_or_else(|| panic!("{method}@{h} missing"));
                assert!(v.abs() < 1e-9, "{method}@{h}: mae {v}");
            }
        }
        // Regenerating the report from the same inputs is bit-identical.
        let report2 =
            run_benchmark(&features, &registry, &BenchmarkConfig::default()).unwrap();
        assert_eq!(report.to_csv(), report2.to_csv());
        // Grid shape: 3 methods x 9 point horizons + 2 methods x 5 prob horizons.
        assert_eq!(report.rows.len(), 3 * 9 + 2 * 5);
    }
}
