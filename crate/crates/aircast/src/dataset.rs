//! Training/test set construction for both prediction modes, plus the
//! residual-variance station grouping used to pre-train mixture components.
//!
//! Point examples pair a six-hour window with the next-hour pm2.5 residual;
//! histogram examples pair it with the distribution of the `s` hourly values
//! centred at `t+s`. Examples are tagged by which side of the per-station
//! split they fall on; examples straddling the boundary are dropped so no
//! test information leaks into training.

use std::collections::{BTreeMap, HashMap};

use crate::data::{
    bin_index, DataError, FeatureWindow, HistogramTarget, BIN_COUNT, WINDOW_LEN,
};
use crate::ingest::StationSeries;

/// Which side of the per-station temporal split an example falls on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    /// Touches both regions; never used for training or evaluation.
    Straddling,
}

/// One short-term training example: window plus the next-hour residual
/// ΔPM = pm25(t+1) − pm25(t), in raw µg/m³.
#[derive(Debug, Clone, PartialEq)]
pub struct PointExample {
    pub window: FeatureWindow,
    pub target: f64,
    pub split: Split,
}

/// One long-term training example: window plus the normalized histogram of
/// the `horizon` hourly pm2.5 values at offsets `[s/2, 3s/2)` after `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramExample {
    pub window: FeatureWindow,
    pub horizon: u32,
    pub target: HistogramTarget,
    pub split: Split,
}

fn classify(first_ts: i64, last_ts: i64, boundary: i64) -> Split {
    if last_ts < boundary {
        Split::Train
    } else if first_ts >= boundary {
        Split::Test
    } else {
        Split::Straddling
    }
}

/// For each row, the length of the run of consecutive hourly rows ending there.
fn contiguity(series: &StationSeries) -> Vec<usize> {
    let mut contig = vec![0usize; series.rows.len()];
    for i in 0..series.rows.len() {
        contig[i] = if i > 0 && series.rows[i].timestamp == series.rows[i - 1].timestamp + 1 {
            contig[i - 1] + 1
        } else {
            1
        };
    }
    contig
}

fn window_at(series: &StationSeries, end_idx: usize) -> FeatureWindow {
    let mut values = [[0.0; crate::data::NUM_FEATURES]; WINDOW_LEN];
    for (k, row) in series.rows[end_idx + 1 - WINDOW_LEN..=end_idx].iter().enumerate() {
        values[k] = row.features;
    }
    FeatureWindow {
        station_id: series.station_id.clone(),
        end_timestamp: series.rows[end_idx].timestamp,
        values,
    }
}

/// Build every valid point example: one per (station, t) with six contiguous
/// hourly rows ending at `t` and an observation at `t+1`. Deterministic:
/// stations in input order, `t` ascending.
pub fn build_point_examples(series: &[StationSeries]) -> Vec<PointExample> {
    let mut out = Vec::new();
    for s in series {
        let contig = contiguity(s);
        for i in 0..s.rows.len() {
            if contig[i] < WINDOW_LEN {
                continue;
            }
            let Some(next) = s.rows.get(i + 1) else { continue };
            if next.timestamp != s.rows[i].timestamp + 1 {
                continue;
            }
            let t = s.rows[i].timestamp;
            out.push(PointExample {
                window: window_at(s, i),
                target: next.raw_pm25 - s.rows[i].raw_pm25,
                split: classify(t - (WINDOW_LEN as i64 - 1), t + 1, s.split_boundary),
            });
        }
    }
    out
}

/// Build every valid histogram example for an even horizon `s`: the target
/// covers the `s` hourly values at offsets `[s/2, 3s/2)` after the window end.
pub fn build_histogram_examples(
    series: &[StationSeries],
    horizon: u32,
) -> Result<Vec<HistogramExample>, DataError> {
    // Validates evenness; the window [s/2, 3s/2) needs integer endpoints.
    let horizon = crate::data::Horizon::probabilistic(horizon)?.hours;
    let s = horizon as i64;
    let mut out = Vec::new();
    for ss in series {
        let contig = contiguity(ss);
        let index: HashMap<i64, usize> =
            ss.rows.iter().enumerate().map(|(i, r)| (r.timestamp, i)).collect();
        for i in 0..ss.rows.len() {
            if contig[i] < WINDOW_LEN {
                continue;
            }
            let t = ss.rows[i].timestamp;
            let last_target_ts = t + 3 * s / 2 - 1;
            let Some(&j) = index.get(&last_target_ts) else { continue };
            if contig[j] < horizon as usize {
                continue;
            }
            let mut counts = [0u32; BIN_COUNT];
            for row in &ss.rows[j + 1 - horizon as usize..=j] {
                let k = bin_index(row.raw_pm25).expect("pm2.5 validated at ingestion");
                counts[k] += 1;
            }
            let target = HistogramTarget::from_counts(counts, horizon)?;
            out.push(HistogramExample {
                window: window_at(ss, i),
                horizon,
                target,
                split: classify(t - (WINDOW_LEN as i64 - 1), last_target_ts, ss.split_boundary),
            });
        }
    }
    Ok(out)
}

/// Partition examples into train and test sets, dropping straddlers.
pub fn split_train_test<E, F>(examples: Vec<E>, split_of: F) -> (Vec<E>, Vec<E>)
where
    F: Fn(&E) -> Split,
{
    let mut train = Vec::new();
    let mut test = Vec::new();
    for e in examples {
        match split_of(&e) {
            Split::Train => train.push(e),
            Split::Test => test.push(e),
            Split::Straddling => {}
        }
    }
    (train, test)
}

pub fn split_point_examples(examples: Vec<PointExample>) -> (Vec<PointExample>, Vec<PointExample>) {
    split_train_test(examples, |e| e.split)
}

pub fn split_histogram_examples(
    examples: Vec<HistogramExample>,
) -> (Vec<HistogramExample>, Vec<HistogramExample>) {
    split_train_test(examples, |e| e.split)
}

/// Scale factor for residual targets: the population standard deviation of
/// training residuals. Targets are divided by this for optimization and
/// multiplied back for reporting; no mean shift is applied, so a model with
/// all-zero output heads predicts exactly zero change.
pub fn fit_residual_scale(train: &[PointExample]) -> f64 {
    if train.is_empty() {
        return 1.0;
    }
    let n = train.len() as f64;
    let mean = train.iter().map(|e| e.target).sum::<f64>() / n;
    let var = train.iter().map(|e| (e.target - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std > 1e-12 {
        std
    } else {
        1.0
    }
}

/// Assignment of stations to the three mixture components.
#[derive(Debug, Clone, PartialEq)]
pub struct StationGrouping {
    assignment: BTreeMap<String, usize>,
    pub warnings: Vec<String>,
}

impl StationGrouping {
    pub fn component(&self, station_id: &str) -> Option<usize> {
        self.assignment.get(station_id).copied()
    }

    pub fn stations_of(&self, component: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &c)| c == component)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }
}

/// Group stations into three variance categories from training residuals.
///
/// Stations are sorted by residual variance (ties broken by station id) and
/// cut into equal-count terciles, ceiling-first: 13 stations split 5/4/4.
/// Low variance maps to component 0, high to component 2. With fewer than
/// three stations everything maps to component 0 and a warning is recorded.
pub fn group_stations_by_residual_variance(train: &[PointExample]) -> StationGrouping {
    let mut sums: BTreeMap<&str, (f64, f64, f64)> = BTreeMap::new();
    for e in train {
        let entry = sums.entry(e.window.station_id.as_str()).or_insert((0.0, 0.0, 0.0));
        entry.0 += 1.0;
        entry.1 += e.target;
        entry.2 += e.target * e.target;
    }
    let mut variances: Vec<(String, f64)> = sums
        .into_iter()
        .map(|(id, (n, s1, s2))| {
            let mean = s1 / n;
            (id.to_string(), (s2 / n - mean * mean).max(0.0))
        })
        .collect();

    let mut warnings = Vec::new();
    let mut assignment = BTreeMap::new();
    if variances.len() < 3 {
        warnings.push(format!(
            "only {} station(s) with training examples; assigning all to component 0",
            variances.len()
        ));
        for (id, _) in variances {
            assignment.insert(id, 0);
        }
        return StationGrouping { assignment, warnings };
    }

    variances.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let n = variances.len();
    let s0 = n.div_ceil(3);
    let s1 = (n - s0).div_ceil(2);
    for (rank, (id, _)) in variances.into_iter().enumerate() {
        let component = if rank < s0 {
            0
        } else if rank < s0 + s1 {
            1
        } else {
            2
        };
        assignment.insert(id, component);
    }
    StationGrouping { assignment, warnings }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureWindow, NUM_FEATURES};
    use crate::ingest::FeatureRow;

    /// A series with the given (timestamp, pm25) pairs; standardized features
    /// are synthetic but deterministic.
    fn series_from(id: &str, points: &[(i64, f64)], boundary: i64) -> StationSeries {
        let rows = points
            .iter()
            .map(|&(t, pm)| {
                let mut features = [0.0; NUM_FEATURES];
                features[crate::data::F_PM25] = pm / 100.0;
                features[0] = t as f64 * 0.01;
                FeatureRow { timestamp: t, features, raw_pm25: pm }
            })
            .collect();
        StationSeries { station_id: id.to_string(), rows, split_boundary: boundary }
    }

    fn hourly(id: &str, pm: &[f64], boundary: i64) -> StationSeries {
        let points: Vec<(i64, f64)> = pm.iter().copied().enumerate().map(|(i, p)| (i as i64, p)).collect();
        series_from(id, &points, boundary)
    }

    #[test]
    fn seven_contiguous_records_make_one_example() {
        let s = hourly("a", &[10.0, 11.0, 12.0, 13.0, 14.0, 15.0, 18.0], i64::MAX);
        let examples = build_point_examples(&[s]);
        assert_eq!(examples.len(), 1);
        assert_eq!(examples[0].window.end_timestamp, 5);
        assert!((examples[0].target - 3.0).abs() < 1e-12);
        assert_eq!(examples[0].split, Split::Train);
    }

    #[test]
    fn a_gap_forbids_windows_spanning_it() {
        let points: Vec<(i64, f64)> =
            vec![(0, 10.0), (1, 10.0), (2, 10.0), (3, 10.0), (5, 10.0), (6, 10.0), (7, 10.0)];
        let s = series_from("a", &points, i64::MAX);
        assert!(build_point_examples(&[s]).is_empty());
    }

    #[test]
    fn constant_series_yields_zero_targets() {
        let s = hourly("a", &[42.0; 24], i64::MAX);
        let examples = build_point_examples(&[s]);
        assert_eq!(examples.len(), 24 - WINDOW_LEN);
        assert!(examples.iter().all(|e| e.target == 0.0));
    }

    #[test]
    fn histogram_single_bin_when_all_values_equal() {
        // Window ends at t=5; targets at offsets [4, 12) are all 45 (bin 1).
        let mut pm = vec![10.0; 20];
        for i in 9..17 {
            pm[i] = 45.0;
        }
        let s = hourly("a", &pm, i64::MAX);
        let examples = build_histogram_examples(&[s], 8).unwrap();
        let e = examples.iter().find(|e| e.window.end_timestamp == 5).unwrap();
        assert_eq!(e.target.probabilities(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn histogram_two_bins_half_each() {
        let mut pm = vec![10.0; 20];
        for i in 9..13 {
            pm[i] = 20.0;
        }
        for i in 13..17 {
            pm[i] = 300.0;
        }
        let s = hourly("a", &pm, i64::MAX);
        let examples = build_histogram_examples(&[s], 8).unwrap();
        let e = examples.iter().find(|e| e.window.end_timestamp == 5).unwrap();
        assert_eq!(e.target.probabilities(), &[0.5, 0.0, 0.0, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn histogram_ramp_matches_brute_force_binner() {
        // Window ends at t=5; offsets [6, 18) carry the ramp 0, 25, .., 275.
        let mut pm = vec![5.0; 30];
        let ramp: Vec<f64> = (0..12).map(|k| 25.0 * k as f64).collect();
        for (k, &v) in ramp.iter().enumerate() {
            pm[11 + k] = v;
        }
        let s = hourly("a", &pm, i64::MAX);
        let examples = build_histogram_examples(&[s], 12).unwrap();
        let e = examples.iter().find(|e| e.window.end_timestamp == 5).unwrap();

        // Independent brute-force binner over the same 12 values.
        let edges = [0.0, 30.0, 60.0, 90.0, 120.0, 250.0, f64::INFINITY];
        let mut expect = [0.0f64; 6];
        for &v in &ramp {
            for k in 0..6 {
                if v >= edges[k] && v < edges[k + 1] {
                    expect[k] += 1.0 / 12.0;
                }
            }
        }
        for k in 0..6 {
            assert!((e.target.probabilities()[k] - expect[k]).abs() < 1e-15, "bin {k}");
        }
    }

    #[test]
    fn odd_horizon_is_rejected() {
        let s = hourly("a", &[10.0; 30], i64::MAX);
        assert!(build_histogram_examples(&[s], 7).is_err());
    }

    #[test]
    fn split_boundary_at_85_of_100() {
        // 100 hourly observations, boundary at timestamp 85 (index 85): the
        // training region is indices 0..=84.
        let pm: Vec<f64> = (0..100).map(|i| 40.0 + (i % 7) as f64).collect();
        let s = hourly("a", &pm, 85);
        let examples = build_point_examples(&[s]);
        // Window ending at index 83 with target at 84 is the last train example.
        let e83 = examples.iter().find(|e| e.window.end_timestamp == 83).unwrap();
        assert_eq!(e83.split, Split::Train);
        // Windows ending at 84..=89 straddle (they touch both regions).
        for t in 84..=89 {
            let e = examples.iter().find(|e| e.window.end_timestamp == t).unwrap();
            assert_eq!(e.split, Split::Straddling, "t={t}");
        }
        let e90 = examples.iter().find(|e| e.window.end_timestamp == 90).unwrap();
        assert_eq!(e90.split, Split::Test);

        let (train, test) = split_point_examples(examples);
        assert!(train.iter().all(|e| e.window.end_timestamp + 1 < 85));
        assert!(test.iter().all(|e| e.window.end_timestamp - 5 >= 85));
        // Disjoint in (station, t).
        for tr in &train {
            assert!(test.iter().all(|te| te.window.end_timestamp != tr.window.end_timestamp));
        }
    }

    #[test]
    fn dataset_construction_is_deterministic() {
        let pm: Vec<f64> = (0..60).map(|i| 40.0 + ((i * 13) % 29) as f64).collect();
        let s1 = hourly("a", &pm, 45);
        let s2 = hourly("a", &pm, 45);
        assert_eq!(build_point_examples(&[s1.clone()]), build_point_examples(&[s2.clone()]));
        assert_eq!(
            build_histogram_examples(&[s1], 8).unwrap(),
            build_histogram_examples(&[s2], 8).unwrap()
        );
    }

    fn example_for(id: &str, target: f64) -> PointExample {
        PointExample {
            window: FeatureWindow {
                station_id: id.to_string(),
                end_timestamp: 0,
                values: [[0.0; NUM_FEATURES]; WINDOW_LEN],
            },
            target,
            split: Split::Train,
        }
    }

    #[test]
    fn grouping_one_station_per_tercile() {
        let mut examples = Vec::new();
        for (id, spread) in [("s1", 1.0), ("s2", 5.0), ("s3", 100.0)] {
            // Alternating +/- spread gives variance spread^2.
            for i in 0..10 {
                examples.push(example_for(id, if i % 2 == 0 { spread } else { -spread }));
            }
        }
        let g = group_stations_by_residual_variance(&examples);
        assert_eq!(g.component("s1"), Some(0));
        assert_eq!(g.component("s2"), Some(1));
        assert_eq!(g.component("s3"), Some(2));
        assert!(g.warnings.is_empty());
    }

    #[test]
    fn grouping_thirteen_stations_splits_5_4_4() {
        let mut examples = Vec::new();
        for i in 0..13 {
            let id = format!("st{i:02}");
            let spread = (i + 1) as f64;
            for j in 0..6 {
                examples.push(example_for(&id, if j % 2 == 0 { spread } else { -spread }));
            }
        }
        let g = group_stations_by_residual_variance(&examples);
        assert_eq!(g.stations_of(0).len(), 5);
        assert_eq!(g.stations_of(1).len(), 4);
        assert_eq!(g.stations_of(2).len(), 4);
    }

    #[test]
    fn grouping_ties_break_by_station_id() {
        let mut examples = Vec::new();
        for id in ["c", "a", "b"] {
            for j in 0..4 {
                examples.push(example_for(id, if j % 2 == 0 { 2.0 } else { -2.0 }));
            }
        }
        let g = group_stations_by_residual_variance(&examples);
        assert_eq!(g.component("a"), Some(0));
        assert_eq!(g.component("b"), Some(1));
        assert_eq!(g.component("c"), Some(2));
    }

    #[test]
    fn grouping_under_three_stations_warns() {
        let examples = vec![example_for("a", 1.0), example_for("b", 2.0)];
        let g = group_stations_by_residual_variance(&examples);
        assert_eq!(g.component("a"), Some(0));
        assert_eq!(g.component("b"), Some(0));
        assert_eq!(g.warnings.len(), 1);
    }

    #[test]
    fn residual_scale_is_population_std() {
        let examples = vec![example_for("a", 2.0), example_for("a", -2.0)];
        assert!((fit_residual_scale(&examples) - 2.0).abs() < 1e-12);
        assert_eq!(fit_residual_scale(&[]), 1.0);
        assert_eq!(fit_residual_scale(&[example_for("a", 3.0)]), 1.0);
    }
}
