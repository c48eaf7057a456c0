//! Self-contained differentiable building blocks: a small row-major matrix
//! type, dense and LSTM layers with exact backward passes, softmax, MSE and
//! KL losses, the Adam optimizer, and a central-difference gradient checker.
//!
//! Everything is 64-bit. Shape mismatches are programming errors and panic;
//! data-driven failures (non-finite values) surface as [`NnError`].

mod adam;
mod dense;
mod gradcheck;
mod loss;
mod lstm;
mod matrix;

pub use adam::{clip_global_norm, global_norm, AdamConfig, AdamState};
pub use dense::{Dense, DenseGrads};
pub use gradcheck::{grad_check, BlockResult, GradCheckReport};
pub use loss::{kl_divergence, kl_loss, kl_smoothed, mse_loss, softmax, softmax_backward, KL_EPSILON};
pub use lstm::{LstmCache, LstmCell, LstmCellGrads, StackCache, StackedLstm};
pub use matrix::Matrix;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
}

/// Fail if any value in `values` is NaN or infinite.
pub fn ensure_finite(values: &[f64], context: &str) -> Result<(), NnError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NnError::NonFinite(context.to_string()))
    }
}
