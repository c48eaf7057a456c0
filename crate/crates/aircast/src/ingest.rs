//! Raw data ingestion and feature engineering.
//!
//! Reads per-station hourly CSV series, computes the net-external-flow (NEF)
//! feature from pairwise station bearings and wind, and standardizes all nine
//! features with statistics fitted on the training portion only. The output
//! is one [`StationSeries`] per station: standardized feature rows keyed by
//! timestamp, plus the raw pm2.5 value for target construction.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::binio;
use crate::data::{StationMeta, StationRecord, F_NEF, F_PM25, F_WIND_SPEED, NUM_FEATURES};
use crate::geo::{BearingMatrix, GeoError};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed header, missing column(s): {missing}")]
    MalformedHeader { path: PathBuf, missing: String },
    #[error("{path}: duplicate timestamp {timestamp}")]
    DuplicateTimestamp { path: PathBuf, timestamp: i64 },
    #[error("{path}: csv parse failure: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("feature '{0}' is constant on the training split; cannot standardize")]
    ConstantFeature(String),
    #[error("no training rows available to fit feature statistics")]
    NoTrainingRows,
    #[error("station list and record series differ in length ({stations} vs {series})")]
    StationSeriesMismatch { stations: usize, series: usize },
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("{path}: invalid station index row {line}: {reason}")]
    BadStationIndex { path: PathBuf, line: u64, reason: String },
}

/// A row that was dropped during CSV ingestion, with its 1-based line number.
#[derive(Debug, Clone)]
pub struct DroppedRow {
    pub line: u64,
    pub reason: String,
}

/// Result of loading one station CSV: valid records sorted by timestamp plus
/// a report of dropped rows.
#[derive(Debug)]
pub struct LoadOutcome {
    pub records: Vec<StationRecord>,
    pub dropped: Vec<DroppedRow>,
}

const COLUMNS: [&str; 9] = [
    "timestamp",
    "pm1",
    "pm10",
    "pm25",
    "temperature",
    "humidity",
    "visibility",
    "wind_speed",
    "wind_bearing",
];

fn parse_timestamp(s: &str) -> Result<i64, String> {
    let s = s.trim();
    if let Ok(h) = s.parse::<i64>() {
        return Ok(h);
    }
    let naive = chrono::NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .or_else(|_| chrono::NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M"))
        .or_else(|_| chrono::NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .or_else(|_| {
            chrono::DateTime::parse_from_rfc3339(s).map(|dt| dt.naive_utc())
        })
        .map_err(|_| format!("unparseable timestamp '{s}'"))?;
    let secs = naive.and_utc().timestamp();
    if secs % 3600 != 0 {
        return Err(format!("timestamp '{s}' is not hour-aligned"));
    }
    Ok(secs / 3600)
}

fn parse_field(name: &str, s: &str) -> Result<f64, String> {
    let s = s.trim();
    if s.is_empty() {
        return Err(format!("blank {name}"));
    }
    let v: f64 = s.parse().map_err(|_| format!("unparseable {name} '{s}'"))?;
    if !v.is_finite() {
        return Err(format!("non-finite {name}"));
    }
    Ok(v)
}

fn validate_record(r: &StationRecord) -> Result<(), String> {
    if r.pm1 < 0.0 || r.pm10 < 0.0 || r.pm25 < 0.0 {
        return Err("negative particulate concentration".into());
    }
    if !(0.0..=100.0).contains(&r.humidity) {
        return Err(format!("humidity {} outside [0, 100]", r.humidity));
    }
    if r.visibility < 0.0 {
        return Err("negative visibility".into());
    }
    if r.wind_speed < 0.0 {
        return Err("negative wind speed".into());
    }
    if !(0.0..360.0).contains(&r.wind_bearing) {
        return Err(format!("wind bearing {} outside [0, 360)", r.wind_bearing));
    }
    Ok(())
}

/// Load one station's hourly series from CSV.
///
/// The header must name all of `timestamp,pm1,pm10,pm25,temperature,humidity,
/// visibility,wind_speed,wind_bearing` (any column order). Rows with missing
/// or unparseable fields are dropped and reported; duplicate timestamps are a
/// hard error. Records come back sorted by timestamp.
pub fn load_station_csv(path: &Path, station_id: &str) -> Result<LoadOutcome, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Io { path: path.into(), source })?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));

    let headers = reader
        .headers()
        .map_err(|source| IngestError::Csv { path: path.into(), source })?
        .clone();
    let mut col = HashMap::new();
    for (idx, name) in headers.iter().enumerate() {
        col.insert(name.to_string(), idx);
    }
    let missing: Vec<&str> = COLUMNS.iter().copied().filter(|c| !col.contains_key(*c)).collect();
    if !missing.is_empty() {
        return Err(IngestError::MalformedHeader { path: path.into(), missing: missing.join(", ") });
    }
    let idx = |name: &str| col[name];

    let mut records = Vec::new();
    let mut dropped = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i as u64 + 2; // 1-based, after the header
        let row = row.map_err(|source| IngestError::Csv { path: path.into(), source })?;
        let field = |name: &str| row.get(idx(name)).unwrap_or("");
        let parsed = (|| -> Result<StationRecord, String> {
            let record = StationRecord {
                station_id: station_id.to_string(),
                timestamp: parse_timestamp(field("timestamp"))?,
                pm1: parse_field("pm1", field("pm1"))?,
                pm10: parse_field("pm10", field("pm10"))?,
                pm25: parse_field("pm25", field("pm25"))?,
                temperature: parse_field("temperature", field("temperature"))?,
                humidity: parse_field("humidity", field("humidity"))?,
                visibility: parse_field("visibility", field("visibility"))?,
                wind_speed: parse_field("wind_speed", field("wind_speed"))?,
                wind_bearing: parse_field("wind_bearing", field("wind_bearing"))?,
            };
            validate_record(&record)?;
            Ok(record)
        })();
        match parsed {
            Ok(r) => records.push(r),
            Err(reason) => dropped.push(DroppedRow { line, reason }),
        }
    }

    records.sort_by_key(|r| r.timestamp);
    for pair in records.windows(2) {
        if pair[0].timestamp == pair[1].timestamp {
            return Err(IngestError::DuplicateTimestamp {
                path: path.into(),
                timestamp: pair[0].timestamp,
            });
        }
    }
    Ok(LoadOutcome { records, dropped })
}

/// Load the station index CSV (`station_id,latitude,longitude,path`) and then
/// every referenced per-station series. Relative paths resolve against the
/// index file's directory.
pub fn load_deployment(
    index_path: &Path,
) -> Result<(Vec<StationMeta>, Vec<Vec<StationRecord>>), IngestError> {
    let file = File::open(index_path)
        .map_err(|source| IngestError::Io { path: index_path.into(), source })?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let base = index_path.parent().unwrap_or_else(|| Path::new("."));

    let mut metas = Vec::new();
    let mut all_records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|source| IngestError::Csv { path: index_path.into(), source })?;
        let bad = |reason: String| IngestError::BadStationIndex {
            path: index_path.into(),
            line,
            reason,
        };
        if row.len() < 4 {
            return Err(bad(format!("expected 4 columns, found {}", row.len())));
        }
        let id = row[0].to_string();
        let lat: f64 = row[1].parse().map_err(|_| bad(format!("bad latitude '{}'", &row[1])))?;
        let lon: f64 = row[2].parse().map_err(|_| bad(format!("bad longitude '{}'", &row[2])))?;
        let meta = StationMeta::new(id.clone(), lat, lon).map_err(|e| bad(e.to_string()))?;
        let series_path = base.join(&row[3]);
        let outcome = load_station_csv(&series_path, &id)?;
        for d in &outcome.dropped {
            log::warn!("{}: line {}: dropped row ({})", series_path.display(), d.line, d.reason);
        }
        metas.push(meta);
        all_records.push(outcome.records);
    }
    Ok((metas, all_records))
}

/// Per-feature standardization statistics, fitted on the training split only.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: [f64; NUM_FEATURES],
    std: [f64; NUM_FEATURES],
}

impl Standardizer {
    /// Build from precomputed statistics; every std must be positive.
    pub fn from_stats(mean: [f64; NUM_FEATURES], std: [f64; NUM_FEATURES]) -> Result<Self, IngestError> {
        for (k, &s) in std.iter().enumerate() {
            if !(s.is_finite() && s > 1e-12) {
                return Err(IngestError::ConstantFeature(crate::data::FEATURE_NAMES[k].into()));
            }
        }
        Ok(Self { mean, std })
    }

    pub fn mean(&self) -> &[f64; NUM_FEATURES] {
        &self.mean
    }

    pub fn std(&self) -> &[f64; NUM_FEATURES] {
        &self.std
    }

    pub fn standardize_feature(&self, feature: usize, raw: f64) -> f64 {
        (raw - self.mean[feature]) / self.std[feature]
    }

    pub fn inverse_feature(&self, feature: usize, z: f64) -> f64 {
        z * self.std[feature] + self.mean[feature]
    }

    pub fn standardize_row(&self, raw: &[f64; NUM_FEATURES]) -> [f64; NUM_FEATURES] {
        let mut out = [0.0; NUM_FEATURES];
        for k in 0..NUM_FEATURES {
            out[k] = self.standardize_feature(k, raw[k]);
        }
        out
    }
}

/// Wind/pollution state of one station at one timestamp, pre-standardized,
/// as consumed by the flow feature.
#[derive(Debug, Clone, Copy)]
pub struct NefContribution {
    pub pm_std: f64,
    pub wind_speed_std: f64,
    pub wind_bearing_deg: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Net external flow toward station `target` at one timestamp.
///
/// `x = Σ_{i≠target} pm_i · v_i · cos(θ(target,i) − φ_i)` over all other
/// stations, squashed through a sigmoid. Returns `None` when any contributing
/// station has no data at this timestamp; the caller skips such rows so
/// windows containing them never form.
///
/// The result is clamped to the open interval (0, 1) so extreme sums cannot
/// round to exactly 0 or 1.
pub fn compute_nef(
    at_time: &[Option<NefContribution>],
    target: usize,
    bearings: &BearingMatrix,
) -> Option<f64> {
    debug_assert_eq!(at_time.len(), bearings.len());
    let mut x = 0.0;
    for (i, c) in at_time.iter().enumerate() {
        if i == target {
            continue;
        }
        let c = (*c)?;
        let angle = (bearings.theta(target, i) - c.wind_bearing_deg).to_radians();
        x += c.pm_std * c.wind_speed_std * angle.cos();
    }
    Some(sigmoid(x).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
}

/// One standardized feature row plus the raw pm2.5 it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub timestamp: i64,
    pub features: [f64; NUM_FEATURES],
    pub raw_pm25: f64,
}

/// Standardized per-station series. Rows are sorted by timestamp and may
/// contain gaps (missing observations, or timestamps where the flow feature
/// could not be computed).
#[derive(Debug, Clone, PartialEq)]
pub struct StationSeries {
    pub station_id: String,
    pub rows: Vec<FeatureRow>,
    /// Timestamp of the first test-region observation for this station
    /// (`i64::MAX` when every observation is in the training region).
    pub split_boundary: i64,
}

/// Everything downstream stages need: station list, fitted statistics, and
/// standardized per-station series.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub stations: Vec<StationMeta>,
    pub standardizer: Standardizer,
    pub series: Vec<StationSeries>,
    pub train_percent: u32,
}

/// Fit statistics and assemble standardized feature series for a deployment.
///
/// `train_percent` defines the per-station training region (first P% of each
/// station's observations); all statistics are fitted on that region pooled
/// across stations, so nothing from the test region leaks into scaling or
/// into the flow feature's inputs.
pub fn build_feature_set(
    stations: Vec<StationMeta>,
    records: &[Vec<StationRecord>],
    train_percent: u32,
) -> Result<FeatureSet, IngestError> {
    if stations.len() != records.len() {
        return Err(IngestError::StationSeriesMismatch {
            stations: stations.len(),
            series: records.len(),
        });
    }
    let n_stations = stations.len();
    let bearings = BearingMatrix::compute(&stations)?;

    // Per-station training boundary: first `train_percent`% of observations.
    let mut boundaries = Vec::with_capacity(n_stations);
    for recs in records {
        let n = recs.len();
        let n_train = n * train_percent as usize / 100;
        boundaries.push(if n_train < n { recs[n_train].timestamp } else { i64::MAX });
    }

    // Stage 1: fit the 8 observed features on pooled training rows.
    let mut raw_stats = RunningStats::new(8);
    for (recs, &boundary) in records.iter().zip(&boundaries) {
        for r in recs.iter().take_while(|r| r.timestamp < boundary) {
            raw_stats.push(&r.raw_features());
        }
    }
    let (raw_mean, raw_std) = raw_stats.finish()?;

    // Stage 2: the flow feature for every (station, timestamp), from
    // standardized pm2.5 and wind speed of the other stations.
    let index: Vec<HashMap<i64, usize>> = records
        .iter()
        .map(|recs| recs.iter().enumerate().map(|(i, r)| (r.timestamp, i)).collect())
        .collect();
    let contribution = |station: usize, t: i64| -> Option<NefContribution> {
        let recs = &records[station];
        let &i = index[station].get(&t)?;
        let r = &recs[i];
        Some(NefContribution {
            pm_std: (r.pm25 - raw_mean[F_PM25]) / raw_std[F_PM25],
            wind_speed_std: (r.wind_speed - raw_mean[F_WIND_SPEED]) / raw_std[F_WIND_SPEED],
            wind_bearing_deg: r.wind_bearing,
        })
    };

    let mut nef_per_station: Vec<Vec<Option<f64>>> = Vec::with_capacity(n_stations);
    for a in 0..n_stations {
        let mut nefs = Vec::with_capacity(records[a].len());
        for r in &records[a] {
            let at_time: Vec<Option<NefContribution>> =
                (0..n_stations).map(|i| contribution(i, r.timestamp)).collect();
            nefs.push(compute_nef(&at_time, a, &bearings));
        }
        nef_per_station.push(nefs);
    }

    // Stage 3: fit the flow feature's own statistics on training rows.
    let mut nef_stats = RunningStats::new(1);
    for a in 0..n_stations {
        for (r, nef) in records[a].iter().zip(&nef_per_station[a]) {
            if r.timestamp < boundaries[a] {
                if let Some(v) = nef {
                    nef_stats.push(&[*v]);
                }
            }
        }
    }
    let (nef_mean, nef_std) = nef_stats.finish()?;

    let mut mean = [0.0; NUM_FEATURES];
    let mut std = [0.0; NUM_FEATURES];
    mean[..8].copy_from_slice(&raw_mean);
    std[..8].copy_from_slice(&raw_std);
    mean[F_NEF] = nef_mean[0];
    std[F_NEF] = nef_std[0];
    let standardizer = Standardizer::from_stats(mean, std)?;

    // Stage 4: assemble standardized rows, skipping timestamps without NEF.
    let mut series = Vec::with_capacity(n_stations);
    for (a, station) in stations.iter().enumerate() {
        let mut rows = Vec::with_capacity(records[a].len());
        for (r, nef) in records[a].iter().zip(&nef_per_station[a]) {
            let Some(nef) = nef else { continue };
            let raw8 = r.raw_features();
            let mut raw = [0.0; NUM_FEATURES];
            raw[..8].copy_from_slice(&raw8);
            raw[F_NEF] = *nef;
            rows.push(FeatureRow {
                timestamp: r.timestamp,
                features: standardizer.standardize_row(&raw),
                raw_pm25: r.pm25,
            });
        }
        series.push(StationSeries {
            station_id: station.station_id.clone(),
            rows,
            split_boundary: boundaries[a],
        });
    }

    Ok(FeatureSet { stations, standardizer, series, train_percent })
}

struct RunningStats {
    n: u64,
    sums: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl RunningStats {
    fn new(width: usize) -> Self {
        Self { n: 0, sums: vec![0.0; width], values: vec![Vec::new(); width] }
    }

    fn push(&mut self, row: &[f64]) {
        self.n += 1;
        for (k, &v) in row.iter().enumerate() {
            self.sums[k] += v;
            self.values[k].push(v);
        }
    }

    /// Population mean and standard deviation (two-pass).
    fn finish(self) -> Result<(Vec<f64>, Vec<f64>), IngestError> {
        if self.n == 0 {
            return Err(IngestError::NoTrainingRows);
        }
        let n = self.n as f64;
        let means: Vec<f64> = self.sums.iter().map(|s| s / n).collect();
        let mut stds = Vec::with_capacity(means.len());
        for (k, vals) in self.values.iter().enumerate() {
            let var = vals.iter().map(|v| (v - means[k]).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            if !(std.is_finite() && std > 1e-12) {
                return Err(IngestError::ConstantFeature(
                    crate::data::FEATURE_NAMES.get(k).copied().unwrap_or("feature").into(),
                ));
            }
            stds.push(std);
        }
        Ok((means, stds))
    }
}

const FEATURE_CACHE_MAGIC: &[u8] = b"AQFS";
const FEATURE_CACHE_VERSION: u32 = 1;

impl FeatureSet {
    /// A copy with one standardized feature column zeroed in every row;
    /// used for ablation studies (a zeroed column carries no information).
    pub fn with_feature_zeroed(&self, feature: usize) -> FeatureSet {
        assert!(feature < NUM_FEATURES, "feature index out of range");
        let mut out = self.clone();
        for series in &mut out.series {
            for row in &mut series.rows {
                row.features[feature] = 0.0;
            }
        }
        out
    }

    /// Write the set to a versioned binary cache. Rebuilding from the same
    /// inputs produces a byte-identical file.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(FEATURE_CACHE_MAGIC)?;
        binio::write_u32(&mut w, FEATURE_CACHE_VERSION)?;
        binio::write_u32(&mut w, self.train_percent)?;
        binio::write_u32(&mut w, self.stations.len() as u32)?;
        for (meta, series) in self.stations.iter().zip(&self.series) {
            binio::write_str(&mut w, &meta.station_id)?;
            binio::write_f64(&mut w, meta.latitude)?;
            binio::write_f64(&mut w, meta.longitude)?;
            binio::write_i64(&mut w, series.split_boundary)?;
            binio::write_u64(&mut w, series.rows.len() as u64)?;
            for row in &series.rows {
                binio::write_i64(&mut w, row.timestamp)?;
                for &v in &row.features {
                    binio::write_f64(&mut w, v)?;
                }
                binio::write_f64(&mut w, row.raw_pm25)?;
            }
        }
        for k in 0..NUM_FEATURES {
            binio::write_f64(&mut w, self.standardizer.mean[k])?;
            binio::write_f64(&mut w, self.standardizer.std[k])?;
        }
        w.flush()
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        binio::expect_magic(&mut r, FEATURE_CACHE_MAGIC)?;
        let version = binio::read_u32(&mut r)?;
        if version != FEATURE_CACHE_VERSION {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("unsupported feature cache version {version}"),
            ));
        }
        let train_percent = binio::read_u32(&mut r)?;
        let n = binio::read_u32(&mut r)? as usize;
        let mut stations = Vec::with_capacity(n);
        let mut series = Vec::with_capacity(n);
        for _ in 0..n {
            let id = binio::read_str(&mut r)?;
            let lat = binio::read_f64(&mut r)?;
            let lon = binio::read_f64(&mut r)?;
            let split_boundary = binio::read_i64(&mut r)?;
            let n_rows = binio::read_u64(&mut r)? as usize;
            let mut rows = Vec::with_capacity(n_rows);
            for _ in 0..n_rows {
                let timestamp = binio::read_i64(&mut r)?;
                let mut features = [0.0; NUM_FEATURES];
                for f in features.iter_mut() {
                    *f = binio::read_f64(&mut r)?;
                }
                let raw_pm25 = binio::read_f64(&mut r)?;
                rows.push(FeatureRow { timestamp, features, raw_pm25 });
            }
            stations.push(
                StationMeta::new(id.clone(), lat, lon)
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?,
            );
            series.push(StationSeries { station_id: id, rows, split_boundary });
        }
        let mut mean = [0.0; NUM_FEATURES];
        let mut std = [0.0; NUM_FEATURES];
        for k in 0..NUM_FEATURES {
            mean[k] = binio::read_f64(&mut r)?;
            std[k] = binio::read_f64(&mut r)?;
        }
        let standardizer = Standardizer::from_stats(mean, std)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "trailing bytes"));
        }
        Ok(Self { stations, standardizer, series, train_percent })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FEATURE_NAMES;
    use std::io::Write as _;

    fn write_csv(dir: &Path, name: &str, body: &str) -> PathBuf {
        let path = dir.join(name);
        let mut f = File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    const HEADER: &str = "timestamp,pm1,pm10,pm25,temperature,humidity,visibility,wind_speed,wind_bearing";

    fn row(t: i64, pm25: f64) -> String {
        format!("{t},10,80,{pm25},20,50,8,3,120")
    }

    #[test]
    fn well_formed_file_loads_in_timestamp_order() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("{HEADER}\n{}\n{}\n{}\n", row(2, 50.0), row(0, 40.0), row(1, 45.0));
        let path = write_csv(dir.path(), "a.csv", &body);
        let out = load_station_csv(&path, "a").unwrap();
        assert_eq!(out.records.len(), 3);
        assert!(out.dropped.is_empty());
        let ts: Vec<i64> = out.records.iter().map(|r| r.timestamp).collect();
        assert_eq!(ts, vec![0, 1, 2]);
    }

    #[test]
    fn blank_pm25_cell_is_dropped_and_reported() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("{HEADER}\n{}\n0,10,80,,20,50,8,3,120\n{}\n", row(1, 50.0), row(2, 45.0));
        let path = write_csv(dir.path(), "a.csv", &body);
        let out = load_station_csv(&path, "a").unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.dropped.len(), 1);
        assert!(out.dropped[0].reason.contains("pm25"));
    }

    #[test]
    fn duplicate_timestamp_is_an_error_naming_it() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("{HEADER}\n{}\n{}\n", row(5, 50.0), row(5, 51.0));
        let path = write_csv(dir.path(), "a.csv", &body);
        let err = load_station_csv(&path, "a").unwrap_err();
        match err {
            IngestError::DuplicateTimestamp { timestamp, .. } => assert_eq!(timestamp, 5),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn malformed_header_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(dir.path(), "a.csv", "timestamp,pm1,pm10\n1,2,3\n");
        let err = load_station_csv(&path, "a").unwrap_err();
        assert!(matches!(err, IngestError::MalformedHeader { .. }));
    }

    #[test]
    fn iso_hour_timestamps_parse_to_epoch_hours() {
        assert_eq!(parse_timestamp("1970-01-01T01:00:00").unwrap(), 1);
        assert_eq!(parse_timestamp("2018-11-01T00:00:00").unwrap(), 428064);
        assert_eq!(parse_timestamp("428064").unwrap(), 428064);
        assert!(parse_timestamp("2018-11-01T00:30:00").is_err());
    }

    #[test]
    fn out_of_range_fields_are_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("{HEADER}\n0,10,80,50,20,120,8,3,120\n{}\n", row(1, 45.0));
        let path = write_csv(dir.path(), "a.csv", &body);
        let out = load_station_csv(&path, "a").unwrap();
        assert_eq!(out.records.len(), 1);
        assert!(out.dropped[0].reason.contains("humidity"));
    }

    fn simple_bearings() -> (Vec<StationMeta>, BearingMatrix) {
        let stations = vec![
            StationMeta::new("a", 28.50, 77.10).unwrap(),
            StationMeta::new("b", 28.55, 77.20).unwrap(),
            StationMeta::new("c", 28.60, 77.15).unwrap(),
        ];
        let bearings = BearingMatrix::compute(&stations).unwrap();
        (stations, bearings)
    }

    #[test]
    fn nef_is_half_when_all_pm_is_zero() {
        let (_, bearings) = simple_bearings();
        let at = vec![
            None,
            Some(NefContribution { pm_std: 0.0, wind_speed_std: 1.0, wind_bearing_deg: 10.0 }),
            Some(NefContribution { pm_std: 0.0, wind_speed_std: 2.0, wind_bearing_deg: 200.0 }),
        ];
        let nef = compute_nef(&at, 0, &bearings).unwrap();
        assert!((nef - 0.5).abs() < 1e-15);
    }

    #[test]
    fn nef_single_aligned_contributor_is_sigmoid_of_one() {
        let two = vec![
            StationMeta::new("a", 28.50, 77.10).unwrap(),
            StationMeta::new("b", 28.55, 77.20).unwrap(),
        ];
        let bearings = BearingMatrix::compute(&two).unwrap();
        // Wind bearing equal to theta(0, 1): the cosine term is exactly 1,
        // so x = pm * v = 1.
        let phi = bearings.theta(0, 1);
        let at = vec![
            None,
            Some(NefContribution { pm_std: 1.0, wind_speed_std: 1.0, wind_bearing_deg: phi }),
        ];
        let nef = compute_nef(&at, 0, &bearings).unwrap();
        let expect = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((nef - expect).abs() < 1e-12, "nef {nef} vs sigma(1) {expect}");
    }

    #[test]
    fn nef_orthogonal_wind_contributes_nothing() {
        let two = vec![
            StationMeta::new("a", 28.50, 77.10).unwrap(),
            StationMeta::new("b", 28.55, 77.20).unwrap(),
        ];
        let bearings = BearingMatrix::compute(&two).unwrap();
        let phi = (bearings.theta(0, 1) + 90.0).rem_euclid(360.0);
        let at = vec![
            None,
            Some(NefContribution { pm_std: 3.0, wind_speed_std: 2.0, wind_bearing_deg: phi }),
        ];
        let nef = compute_nef(&at, 0, &bearings).unwrap();
        assert!((nef - 0.5).abs() < 1e-12);
    }

    #[test]
    fn nef_missing_contributor_yields_none() {
        let (_, bearings) = simple_bearings();
        let at = vec![None, Some(NefContribution { pm_std: 1.0, wind_speed_std: 1.0, wind_bearing_deg: 0.0 }), None];
        assert_eq!(compute_nef(&at, 0, &bearings), None);
    }

    #[test]
    fn nef_invariant_to_full_turns_of_bearing() {
        let two = vec![
            StationMeta::new("a", 28.50, 77.10).unwrap(),
            StationMeta::new("b", 28.55, 77.20).unwrap(),
        ];
        let bearings = BearingMatrix::compute(&two).unwrap();
        let base = vec![
            None,
            Some(NefContribution { pm_std: 1.3, wind_speed_std: 0.7, wind_bearing_deg: 33.0 }),
        ];
        let turned = vec![
            None,
            Some(NefContribution { pm_std: 1.3, wind_speed_std: 0.7, wind_bearing_deg: 33.0 + 360.0 }),
        ];
        let a = compute_nef(&base, 0, &bearings).unwrap();
        let b = compute_nef(&turned, 0, &bearings).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn nef_stays_in_open_unit_interval_for_extreme_sums() {
        let two = vec![
            StationMeta::new("a", 28.50, 77.10).unwrap(),
            StationMeta::new("b", 28.55, 77.20).unwrap(),
        ];
        let bearings = BearingMatrix::compute(&two).unwrap();
        let phi = bearings.theta(0, 1);
        for pm in [1e6, -1e6] {
            let at = vec![
                None,
                Some(NefContribution { pm_std: pm, wind_speed_std: 100.0, wind_bearing_deg: phi }),
            ];
            let nef = compute_nef(&at, 0, &bearings).unwrap();
            assert!(nef > 0.0 && nef < 1.0, "nef {nef} for pm {pm}");
        }
    }

    #[test]
    fn standardizer_basics_and_round_trip() {
        let mean = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 0.5];
        let std = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 0.1];
        let s = Standardizer::from_stats(mean, std).unwrap();
        assert_eq!(s.standardize_feature(2, 3.0), 0.0);
        assert_eq!(s.standardize_feature(2, 6.0), 1.0);
        for k in 0..NUM_FEATURES {
            let v = 12.345;
            let rt = s.inverse_feature(k, s.standardize_feature(k, v));
            assert!((rt - v).abs() < 1e-12, "feature {}", FEATURE_NAMES[k]);
        }
    }

    #[test]
    fn standardizer_rejects_constant_feature() {
        let mean = [0.0; NUM_FEATURES];
        let mut std = [1.0; NUM_FEATURES];
        std[3] = 0.0;
        assert!(matches!(
            Standardizer::from_stats(mean, std),
            Err(IngestError::ConstantFeature(name)) if name == "temperature"
        ));
    }

    /// Three tiny stations with fully overlapping complete series.
    fn tiny_deployment(n_hours: i64) -> (Vec<StationMeta>, Vec<Vec<StationRecord>>) {
        let stations = vec![
            StationMeta::new("a", 28.50, 77.10).unwrap(),
            StationMeta::new("b", 28.55, 77.20).unwrap(),
            StationMeta::new("c", 28.60, 77.15).unwrap(),
        ];
        let mut all = Vec::new();
        for (si, meta) in stations.iter().enumerate() {
            let mut recs = Vec::new();
            for t in 0..n_hours {
                let x = (t as f64 * 0.7 + si as f64).sin();
                recs.push(StationRecord {
                    station_id: meta.station_id.clone(),
                    timestamp: t,
                    pm1: 10.0 + x,
                    pm10: 80.0 + 2.0 * x,
                    pm25: 50.0 + 20.0 * x + si as f64 * 5.0,
                    temperature: 20.0 + 3.0 * x,
                    humidity: 50.0 + 10.0 * x,
                    visibility: 8.0 - x,
                    wind_speed: 3.0 + 0.5 * x,
                    wind_bearing: (120.0 + 40.0 * x).rem_euclid(360.0),
                });
            }
            all.push(recs);
        }
        (stations, all)
    }

    #[test]
    fn training_rows_standardize_to_zero_mean_unit_std() {
        let (stations, records) = tiny_deployment(200);
        let fs = build_feature_set(stations, &records, 85).unwrap();
        for k in 0..NUM_FEATURES {
            let mut vals = Vec::new();
            for s in &fs.series {
                for row in &s.rows {
                    if row.timestamp < s.split_boundary {
                        vals.push(row.features[k]);
                    }
                }
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9, "feature {} mean {mean}", FEATURE_NAMES[k]);
            assert!((var.sqrt() - 1.0).abs() < 1e-9, "feature {} std {}", FEATURE_NAMES[k], var.sqrt());
        }
    }

    #[test]
    fn split_boundary_is_the_85th_percentile_timestamp() {
        let (stations, records) = tiny_deployment(100);
        let fs = build_feature_set(stations, &records, 85).unwrap();
        // 100 observations: first 85 (indices 0..=84) are training.
        for s in &fs.series {
            assert_eq!(s.split_boundary, 85);
        }
    }

    #[test]
    fn feature_cache_round_trips_bit_exactly() {
        let (stations, records) = tiny_deployment(120);
        let fs = build_feature_set(stations, &records, 85).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.bin");
        fs.save(&path).unwrap();
        let loaded = FeatureSet::load(&path).unwrap();
        assert_eq!(fs.stations, loaded.stations);
        assert_eq!(fs.standardizer, loaded.standardizer);
        assert_eq!(fs.series, loaded.series);
        // Saving the loaded copy reproduces the same bytes.
        let path2 = dir.path().join("features2.bin");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
