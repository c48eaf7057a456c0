//! Hourly PM2.5 forecasting for a multi-station deployment.
//!
//! The pipeline: ingest per-station hourly CSVs, engineer a wind-advection
//! flow feature from pairwise station bearings, build windowed datasets for
//! short-term residual regression and long-term histogram prediction, train a
//! three-component LSTM mixture with attention by alternating optimization,
//! and benchmark it against KNN and linear baselines with MAE and KL metrics.

pub mod binio;
pub mod baselines;
pub mod data;
pub mod dataset;
pub mod evaluate;
pub mod forecast;
pub mod geo;
pub mod ingest;
pub mod model;
pub mod train;
pub mod nn;
pub mod synth;
