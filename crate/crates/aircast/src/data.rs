//! Core domain types shared across the pipeline: station metadata, hourly
//! observations, feature windows, the regulatory bin scheme and histogram
//! targets, and forecast horizons.
//!
//! All types here are immutable values and safe to share between workers.

use thiserror::Error;

/// Number of hourly timesteps in one input window.
pub const WINDOW_LEN: usize = 6;

/// Number of features per timestep (8 observed + net external flow).
pub const NUM_FEATURES: usize = 9;

/// Fixed feature order for every flattened window. Changing this breaks
/// saved models and cached feature files.
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "pm1",
    "pm10",
    "pm25",
    "temperature",
    "humidity",
    "visibility",
    "wind_speed",
    "wind_bearing",
    "nef",
];

pub const F_PM1: usize = 0;
pub const F_PM10: usize = 1;
pub const F_PM25: usize = 2;
pub const F_TEMPERATURE: usize = 3;
pub const F_HUMIDITY: usize = 4;
pub const F_VISIBILITY: usize = 5;
pub const F_WIND_SPEED: usize = 6;
pub const F_WIND_BEARING: usize = 7;
pub const F_NEF: usize = 8;

/// One input window: `WINDOW_LEN` consecutive hourly rows of `NUM_FEATURES`
/// standardized values, ending at `end_timestamp`.
pub type WindowValues = [[f64; NUM_FEATURES]; WINDOW_LEN];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("pm2.5 value {0} is outside the domain (must be finite and >= 0)")]
    InvalidPm25(f64),
    #[error("station {id}: latitude {lat} outside [-90, 90] or longitude {lon} outside [-180, 180]")]
    InvalidCoordinates { id: String, lat: f64, lon: f64 },
    #[error("histogram entries must be non-negative and sum to 1 (sum was {0})")]
    InvalidHistogram(f64),
    #[error("probabilistic horizons must be even, got {0}")]
    OddProbabilisticHorizon(u32),
    #[error("horizon must be >= 1")]
    ZeroHorizon,
}

/// A monitoring station: opaque id plus WGS84 coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct StationMeta {
    pub station_id: String,
    pub latitude: f64,
    pub longitude: f64,
}

impl StationMeta {
    pub fn new(station_id: impl Into<String>, latitude: f64, longitude: f64) -> Result<Self, DataError> {
        let station_id = station_id.into();
        if !(-90.0..=90.0).contains(&latitude)
            || !(-180.0..=180.0).contains(&longitude)
            || !latitude.is_finite()
            || !longitude.is_finite()
        {
            return Err(DataError::InvalidCoordinates { id: station_id, lat: latitude, lon: longitude });
        }
        Ok(Self { station_id, latitude, longitude })
    }
}

/// One hourly observation at one station. Timestamps are integer hours since
/// an arbitrary epoch; per-station series must be strictly increasing in time.
///
/// Elevated pm2.5 values are kept as-is; spikes are part of the signal, not
/// outliers.
#[derive(Debug, Clone, PartialEq)]
pub struct StationRecord {
    pub station_id: String,
    /// Hours since epoch.
    pub timestamp: i64,
    /// µg/m³, >= 0.
    pub pm1: f64,
    /// µg/m³, >= 0.
    pub pm10: f64,
    /// µg/m³, >= 0.
    pub pm25: f64,
    /// °C.
    pub temperature: f64,
    /// Percent, in [0, 100].
    pub humidity: f64,
    /// km, >= 0.
    pub visibility: f64,
    /// m/s, >= 0.
    pub wind_speed: f64,
    /// Degrees, in [0, 360).
    pub wind_bearing: f64,
}

impl StationRecord {
    /// The 8 observed features in canonical order (everything except NEF).
    pub fn raw_features(&self) -> [f64; 8] {
        [
            self.pm1,
            self.pm10,
            self.pm25,
            self.temperature,
            self.humidity,
            self.visibility,
            self.wind_speed,
            self.wind_bearing,
        ]
    }
}

/// Regulatory pm2.5 categories. Bins are left-closed right-open with the
/// last bin unbounded above.
pub const BIN_COUNT: usize = 6;

/// Lower edges of the six bins in µg/m³; bin `k` covers `[EDGES[k], EDGES[k+1])`
/// and the last bin covers `[250, ∞)`.
pub const BIN_EDGES: [f64; BIN_COUNT] = [0.0, 30.0, 60.0, 90.0, 120.0, 250.0];

pub const BIN_LABELS: [&str; BIN_COUNT] = [
    "Good",
    "Satisfactory",
    "Moderately polluted",
    "Poor",
    "Very poor",
    "Severe",
];

/// Map a pm2.5 concentration to its bin index in `[0, 5]`.
///
/// 250.0 itself is Severe (left-closed convention). Negative or non-finite
/// input is a domain error.
pub fn bin_index(pm25: f64) -> Result<usize, DataError> {
    if !pm25.is_finite() || pm25 < 0.0 {
        return Err(DataError::InvalidPm25(pm25));
    }
    let mut k = 0;
    for (i, &edge) in BIN_EDGES.iter().enumerate().skip(1) {
        if pm25 >= edge {
            k = i;
        } else {
            break;
        }
    }
    Ok(k)
}

/// A normalized distribution over the six regulatory bins.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramTarget {
    probabilities: [f64; BIN_COUNT],
}

impl HistogramTarget {
    const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(probabilities: [f64; BIN_COUNT]) -> Result<Self, DataError> {
        let sum: f64 = probabilities.iter().sum();
        if probabilities.iter().any(|&p| !(0.0..=1.0 + Self::SUM_TOLERANCE).contains(&p) || !p.is_finite())
            || (sum - 1.0).abs() > Self::SUM_TOLERANCE
        {
            return Err(DataError::InvalidHistogram(sum));
        }
        Ok(Self { probabilities })
    }

    /// Build from integer per-bin counts over `total` hourly values.
    pub fn from_counts(counts: [u32; BIN_COUNT], total: u32) -> Result<Self, DataError> {
        debug_assert_eq!(counts.iter().sum::<u32>(), total);
        let mut probabilities = [0.0; BIN_COUNT];
        for (p, &c) in probabilities.iter_mut().zip(counts.iter()) {
            *p = f64::from(c) / f64::from(total);
        }
        Self::new(probabilities)
    }

    pub fn probabilities(&self) -> &[f64; BIN_COUNT] {
        &self.probabilities
    }
}

/// Forecast mode: a single concentration value or a distribution over bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForecastMode {
    Point,
    Probabilistic,
}

/// A forecast horizon: `s` hours ahead, in one of the two modes.
///
/// Probabilistic horizons must be even so the target window
/// `[s/2, 3s/2)` has integer hour offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Horizon {
    pub hours: u32,
    pub mode: ForecastMode,
}

impl Horizon {
    pub fn point(hours: u32) -> Result<Self, DataError> {
        if hours == 0 {
            return Err(DataError::ZeroHorizon);
        }
        Ok(Self { hours, mode: ForecastMode::Point })
    }

    pub fn probabilistic(hours: u32) -> Result<Self, DataError> {
        if hours == 0 {
            return Err(DataError::ZeroHorizon);
        }
        if hours % 2 != 0 {
            return Err(DataError::OddProbabilisticHorizon(hours));
        }
        Ok(Self { hours, mode: ForecastMode::Probabilistic })
    }
}

/// A standardized input window for one station ending at `end_timestamp`.
///
/// Invariant (enforced by the dataset builder): the window covers exactly
/// `WINDOW_LEN` consecutive hours with no gaps, in the fixed feature order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWindow {
    pub station_id: String,
    pub end_timestamp: i64,
    pub values: WindowValues,
}

impl FeatureWindow {
    /// The window flattened row-major to `WINDOW_LEN * NUM_FEATURES` values.
    pub fn flattened(&self) -> [f64; WINDOW_LEN * NUM_FEATURES] {
        let mut out = [0.0; WINDOW_LEN * NUM_FEATURES];
        for (t, row) in self.values.iter().enumerate() {
            out[t * NUM_FEATURES..(t + 1) * NUM_FEATURES].copy_from_slice(row);
        }
        out
    }
}
