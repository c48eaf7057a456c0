//! Inference: iterated multi-hour point prediction and long-term histogram
//! prediction.
//!
//! An s-hour point forecast applies the next-hour residual model s times,
//! sliding the six-hour window one hour forward each time. The appended row
//! persists every feature of the last observed row except pm2.5, which takes
//! the model's own prediction (standardized with the training statistics);
//! future covariates are unknown at inference time, so persistence is the
//! neutral fill. Predictions are clamped at 0 µg/m³ at every step.

use thiserror::Error;

use crate::data::{HistogramTarget, WindowValues, F_NEF, F_PM25, WINDOW_LEN};
use crate::ingest::Standardizer;
use crate::model::{Attention, ModelBundle, Variant};
use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("point horizons must be in 1..=24 hours, got {0}")]
    InvalidPointHorizon(u32),
    #[error("non-finite prediction at step {step} of a {horizon}-hour forecast")]
    NonFinite { step: u32, horizon: u32 },
    #[error("model serves horizon {model:?}, requested {requested}")]
    HorizonMismatch { model: Option<u32>, requested: u32 },
    #[error("expected a {expected} model, got {actual}")]
    WrongVariant { expected: &'static str, actual: &'static str },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Anything that predicts the next-hour pm2.5 residual (µg/m³) from a
/// standardized window. The mixture model and both baselines implement this,
/// so they all share the same iterated-forecast procedure.
pub trait ResidualModel: Sync {
    fn predict_residual(&self, window: &WindowValues) -> Result<f64, ForecastError>;
}

impl ModelBundle {
    /// Apply the bundle's input convention: zero the flow feature when the
    /// model was trained with it ablated.
    pub fn prepare_window(&self, window: &WindowValues) -> WindowValues {
        let mut w = *window;
        if self.nef_ablated {
            for row in &mut w {
                row[F_NEF] = 0.0;
            }
        }
        w
    }
}

/// The trained mixture as a residual predictor: forward pass in standardized
/// units, then scaled back to µg/m³.
pub struct MixtureResidualModel<'a> {
    bundle: &'a ModelBundle,
}

impl<'a> MixtureResidualModel<'a> {
    pub fn new(bundle: &'a ModelBundle) -> Result<Self, ForecastError> {
        if bundle.model.variant != Variant::Short {
            return Err(ForecastError::WrongVariant {
                expected: "short",
                actual: bundle.model.variant.as_str(),
            });
        }
        Ok(Self { bundle })
    }
}

impl ResidualModel for MixtureResidualModel<'_> {
    fn predict_residual(&self, window: &WindowValues) -> Result<f64, ForecastError> {
        let w = self.bundle.prepare_window(window);
        let (pred, _) = self.bundle.model.forward_short(&w, Attention::Learned)?;
        Ok(pred * self.bundle.residual_scale)
    }
}

/// Slide the window one hour: rows shift up, the new last row persists every
/// feature of the previous last row except pm2.5, which is set to the
/// predicted value in standardized units.
pub fn slide_window(window: &mut WindowValues, standardizer: &Standardizer, predicted_pm25: f64) {
    for t in 0..WINDOW_LEN - 1 {
        window[t] = window[t + 1];
    }
    let mut row = window[WINDOW_LEN - 1];
    row[F_PM25] = standardizer.standardize_feature(F_PM25, predicted_pm25);
    window[WINDOW_LEN - 1] = row;
}

/// Iterated point forecast: predicted pm2.5 (µg/m³) `horizon` hours after the
/// window end. `last_pm25` is the raw observation at the window end.
pub fn predict_point<M: ResidualModel + ?Sized>(
    model: &M,
    standardizer: &Standardizer,
    window: &WindowValues,
    last_pm25: f64,
    horizon: u32,
) -> Result<f64, ForecastError> {
    if !(1..=24).contains(&horizon) {
        return Err(ForecastError::InvalidPointHorizon(horizon));
    }
    let mut window = *window;
    let mut pm = last_pm25;
    for step in 0..horizon {
        let delta = model.predict_residual(&window)?;
        pm = (pm + delta).max(0.0);
        if !pm.is_finite() {
            return Err(ForecastError::NonFinite { step, horizon });
        }
        if step + 1 < horizon {
            slide_window(&mut window, standardizer, pm);
        }
    }
    Ok(pm)
}

/// Histogram forecast from a long-variant bundle trained for exactly the
/// requested horizon.
pub fn predict_histogram(
    bundle: &ModelBundle,
    window: &WindowValues,
    horizon: u32,
) -> Result<HistogramTarget, ForecastError> {
    if bundle.model.variant != Variant::Long {
        return Err(ForecastError::WrongVariant {
            expected: "long",
            actual: bundle.model.variant.as_str(),
        });
    }
    if bundle.model.horizon != Some(horizon) {
        return Err(ForecastError::HorizonMismatch { model: bundle.model.horizon, requested: horizon });
    }
    let w = bundle.prepare_window(window);
    let (probs, _) = bundle.model.forward_long(&w, Attention::Learned)?;
    Ok(HistogramTarget::new(probs).expect("softmax output is a valid histogram"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NUM_FEATURES;
    use crate::model::{MixtureConfig, MixtureModel};
    use crate::nn::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_standardizer() -> Standardizer {
        let mean = [15.0, 90.0, 60.0, 18.0, 55.0, 8.0, 3.0, 180.0, 0.5];
        let std = [5.0, 30.0, 25.0, 6.0, 15.0, 3.0, 1.5, 100.0, 0.12];
        Standardizer::from_stats(mean, std).unwrap()
    }

    fn random_window(seed: u64) -> WindowValues {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = [[0.0; NUM_FEATURES]; WINDOW_LEN];
        for row in &mut w {
            for v in row.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        w
    }

    fn bundle_with_zero_heads(seed: u64) -> ModelBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = MixtureModel::new(MixtureConfig::short(), &mut rng);
        for c in &mut model.components {
            let head = c.head.as_mut().unwrap();
            head.w = Matrix::zeros(1, model.hidden);
            head.b = vec![0.0];
        }
        ModelBundle {
            model,
            standardizer: test_standardizer(),
            residual_scale: 9.5,
            nef_ablated: false,
        }
    }

    #[test]
    fn zero_head_model_is_exact_persistence_at_every_horizon() {
        let bundle = bundle_with_zero_heads(1);
        let model = MixtureResidualModel::new(&bundle).unwrap();
        let window = random_window(2);
        for (i, last_pm25) in [0.0, 13.25, 250.0, 999.75].into_iter().enumerate() {
            for s in 1..=24 {
                let pred = predict_point(
                    &model,
                    &bundle.standardizer,
                    &window,
                    last_pm25,
                    s,
                )
                .unwrap();
                assert_eq!(pred.to_bits(), last_pm25.to_bits(), "case {i}, horizon {s}");
            }
        }
    }

    #[test]
    fn one_hour_forecast_is_a_single_model_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = MixtureModel::new(MixtureConfig::short(), &mut rng);
        let bundle = ModelBundle {
            model,
            standardizer: test_standardizer(),
            residual_scale: 9.5,
            nef_ablated: false,
        };
        let rm = MixtureResidualModel::new(&bundle).unwrap();
        let window = random_window(4);
        let last = 72.0;
        let got = predict_point(&rm, &bundle.standardizer, &window, last, 1).unwrap();
        let (raw, _) = bundle.model.forward_short(&window, Attention::Learned).unwrap();
        let expect = (last + raw * bundle.residual_scale).max(0.0);
        assert_eq!(got.to_bits(), expect.to_bits());
    }

    #[test]
    fn three_hour_forecast_matches_manual_step_by_step_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = MixtureModel::new(MixtureConfig::short(), &mut rng);
        let bundle = ModelBundle {
            model,
            standardizer: test_standardizer(),
            residual_scale: 4.0,
            nef_ablated: false,
        };
        let rm = MixtureResidualModel::new(&bundle).unwrap();
        let window = random_window(6);
        let last = 48.0;
        let got = predict_point(&rm, &bundle.standardizer, &window, last, 3).unwrap();

        // Manual iteration with explicit window slides.
        let std = &bundle.standardizer;
        let mut w = window;
        let mut pm = last;
        for _ in 0..3 {
            let (raw, _) = bundle.model.forward_short(&w, Attention::Learned).unwrap();
            pm = (pm + raw * bundle.residual_scale).max(0.0);
            // slide
            for t in 0..WINDOW_LEN - 1 {
                w[t] = w[t + 1];
            }
            w[WINDOW_LEN - 1][F_PM25] = std.standardize_feature(F_PM25, pm);
        }
        assert_eq!(got.to_bits(), pm.to_bits());
    }

    #[test]
    fn forecasts_are_clamped_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut model = MixtureModel::new(MixtureConfig::short(), &mut rng);
        for c in &mut model.components {
            let head = c.head.as_mut().unwrap();
            head.w = Matrix::zeros(1, model.hidden);
            head.b = vec![-10.0];
        }
        let bundle = ModelBundle {
            model,
            standardizer: test_standardizer(),
            residual_scale: 50.0,
            nef_ablated: false,
        };
        let rm = MixtureResidualModel::new(&bundle).unwrap();
        let pred = predict_point(&rm, &bundle.standardizer, &random_window(8), 30.0, 6).unwrap();
        assert_eq!(pred, 0.0);
    }

    #[test]
    fn horizon_bounds_are_enforced() {
        let bundle = bundle_with_zero_heads(9);
        let rm = MixtureResidualModel::new(&bundle).unwrap();
        let w = random_window(10);
        assert!(matches!(
            predict_point(&rm, &bundle.standardizer, &w, 10.0, 0),
            Err(ForecastError::InvalidPointHorizon(0))
        ));
        assert!(matches!(
            predict_point(&rm, &bundle.standardizer, &w, 10.0, 25),
            Err(ForecastError::InvalidPointHorizon(25))
        ));
    }

    #[test]
    fn histogram_prediction_checks_variant_and_horizon() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = MixtureModel::new(MixtureConfig::long(12), &mut rng);
        let bundle = ModelBundle {
            model,
            standardizer: test_standardizer(),
            residual_scale: 1.0,
            nef_ablated: false,
        };
        let w = random_window(12);
        assert!(predict_histogram(&bundle, &w, 12).is_ok());
        assert!(matches!(
            predict_histogram(&bundle, &w, 24),
            Err(ForecastError::HorizonMismatch { .. })
        ));

        let short = bundle_with_zero_heads(13);
        assert!(matches!(
            predict_histogram(&short, &w, 12),
            Err(ForecastError::WrongVariant { .. })
        ));
        assert!(MixtureResidualModel::new(&bundle).is_err());
    }

    #[test]
    fn histogram_outputs_are_valid_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let model = MixtureModel::new(MixtureConfig::long(8), &mut rng);
        let bundle = ModelBundle {
            model,
            standardizer: test_standardizer(),
            residual_scale: 1.0,
            nef_ablated: false,
        };
        for seed in 0..1000 {
            let h = predict_histogram(&bundle, &random_window(seed), 8).unwrap();
            let sum: f64 = h.probabilities().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ablated_bundle_ignores_the_flow_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let model = MixtureModel::new(MixtureConfig::long(8), &mut rng);
        let bundle = ModelBundle {
            model,
            standardizer: test_standardizer(),
            residual_scale: 1.0,
            nef_ablated: true,
        };
        let mut w1 = random_window(16);
        let mut w2 = w1;
        for t in 0..WINDOW_LEN {
            w1[t][F_NEF] = 0.9;
            w2[t][F_NEF] = -0.4;
        }
        let h1 = predict_histogram(&bundle, &w1, 8).unwrap();
        let h2 = predict_histogram(&bundle, &w2, 8).unwrap();
        assert_eq!(h1, h2);
    }
}
