//! Training: per-group component pre-training followed by alternating
//! optimization.
//!
//! Pre-training routes each station group's data through its assigned
//! component with forced one-hot attention, so only that component (plus,
//! for the long variant, the histogram head it feeds) receives gradients;
//! the attention layer is untouched.
//!
//! The main loop then alternates per epoch: `n_t` mini-batch Adam steps on
//! the component group with the aggregator group frozen, then `m_t` steps on
//! the aggregator group with the components frozen. One "iteration" is one
//! mini-batch Adam step; batches come from a per-epoch seeded shuffle shared
//! by both phases. Each group keeps its own Adam state for the whole run, so
//! moments persist across phases and epochs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::binio;
use crate::data::{WindowValues, BIN_COUNT};
use crate::dataset::{HistogramExample, PointExample, StationGrouping};
use crate::model::{
    long_batch_loss, short_batch_loss, Attention, GradScope, MixtureConfig, MixtureGrads,
    MixtureModel, Variant, NUM_COMPONENTS,
};
use crate::nn::{clip_global_norm, AdamConfig, AdamState, NnError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("non-finite loss in phase {phase}, epoch {epoch}, iteration {iter} (batch {batch})")]
    NonFiniteLoss { phase: String, epoch: usize, iter: usize, batch: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("checkpoint i/o: {0}")]
    Checkpoint(#[from] std::io::Error),
}

/// Knobs of the training procedure. `n_epochs`, `n_t`, `m_t` and the learning
/// rate follow the alternating schedule; the rest are artifact choices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub n_epochs: usize,
    /// Component-group iterations per epoch.
    pub n_t: usize,
    /// Aggregator-group iterations per epoch.
    pub m_t: usize,
    /// Full passes over each station group during pre-training.
    pub pretrain_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Global-norm gradient clip applied before every Adam step.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_epochs: 10,
            n_t: 10,
            m_t: 10,
            pretrain_epochs: 5,
            lr: 0.005,
            batch_size: 32,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub phase: String,
    pub epoch: usize,
    pub iter: usize,
    pub loss: f64,
}

/// Loss trajectory of a training run; one record per optimizer step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    pub wall_time_s: f64,
}

impl TrainLog {
    pub fn push(&mut self, phase: &str, epoch: usize, iter: usize, loss: f64) {
        self.records.push(LogRecord { phase: phase.to_string(), epoch, iter, loss });
    }

    /// Steps taken in the alternating loop (pre-training excluded).
    pub fn alternating_steps(&self) -> usize {
        self.records.iter().filter(|r| r.phase == "components" || r.phase == "aggregator").count()
    }

    /// Mean loss over all alternating-phase steps of one epoch.
    pub fn epoch_mean_loss(&self, epoch: usize) -> Option<f64> {
        let losses: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.epoch == epoch && (r.phase == "components" || r.phase == "aggregator"))
            .map(|r| r.loss)
            .collect();
        if losses.is_empty() {
            None
        } else {
            Some(losses.iter().sum::<f64>() / losses.len() as f64)
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,epoch,iter,loss\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}\n", r.phase, r.epoch, r.iter, r.loss));
        }
        out
    }
}

/// One training target; which arm applies is fixed by the model variant.
#[derive(Debug, Clone, Copy)]
pub enum Target {
    Residual(f64),
    Histogram([f64; BIN_COUNT]),
}

/// A training example view: borrowed window, owning station and target.
#[derive(Debug, Clone)]
pub struct TrainItem<'a> {
    pub window: &'a WindowValues,
    pub station: &'a str,
    pub target: Target,
}

/// The trainer's dataset view. Targets for the short variant arrive already
/// standardized (divided by the residual scale).
#[derive(Debug, Clone)]
pub struct TrainSet<'a> {
    items: Vec<TrainItem<'a>>,
    variant: Variant,
}

impl<'a> TrainSet<'a> {
    pub fn from_point(examples: &'a [PointExample], residual_scale: f64) -> Self {
        let items = examples
            .iter()
            .map(|e| TrainItem {
                window: &e.window.values,
                station: e.window.station_id.as_str(),
                target: Target::Residual(e.target / residual_scale),
            })
            .collect();
        Self { items, variant: Variant::Short }
    }

    pub fn from_histogram(examples: &'a [HistogramExample]) -> Self {
        let items = examples
            .iter()
            .map(|e| TrainItem {
                window: &e.window.values,
                station: e.window.station_id.as_str(),
                target: Target::Histogram(*e.target.probabilities()),
            })
            .collect();
        Self { items, variant: Variant::Long }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

fn batch_step(
    model: &MixtureModel,
    batch: &[&TrainItem<'_>],
    attention: Attention,
    scope: GradScope,
) -> Result<(f64, MixtureGrads), NnError> {
    match model.variant {
        Variant::Short => {
            let pairs: Vec<(&WindowValues, f64)> = batch
                .iter()
                .map(|item| match item.target {
                    Target::Residual(t) => (item.window, t),
                    Target::Histogram(_) => panic!("histogram target fed to a short model"),
                })
                .collect();
            short_batch_loss(model, &pairs, attention, scope)
        }
        Variant::Long => {
            let pairs: Vec<(&WindowValues, [f64; BIN_COUNT])> = batch
                .iter()
                .map(|item| match item.target {
                    Target::Histogram(t) => (item.window, t),
                    Target::Residual(_) => panic!("residual target fed to a long model"),
                })
                .collect();
            long_batch_loss(model, &pairs, attention, scope)
        }
    }
}

/// Forward-only mean loss of `items` under the given attention mode.
pub fn dataset_loss(
    model: &MixtureModel,
    items: &[&TrainItem<'_>],
    attention: Attention,
) -> Result<f64, NnError> {
    assert!(!items.is_empty(), "empty loss evaluation");
    let mut total = 0.0;
    for item in items {
        match (model.variant, item.target) {
            (Variant::Short, Target::Residual(t)) => {
                let (pred, _) = model.forward_short(item.window, attention)?;
                let d = pred - t;
                total += d * d;
            }
            (Variant::Long, Target::Histogram(t)) => {
                let (probs, _) = model.forward_long(item.window, attention)?;
                total += crate::nn::kl_smoothed(&t, &probs);
            }
            _ => panic!("target kind does not match model variant"),
        }
    }
    Ok(total / items.len() as f64)
}

fn derive_seed(seed: u64, stage: u64, epoch: u64) -> u64 {
    seed ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
}

const STAGE_PRETRAIN: u64 = 1;
const STAGE_ALTERNATE: u64 = 100;

fn check_finite(
    loss: f64,
    phase: &str,
    epoch: usize,
    iter: usize,
    batch: usize,
) -> Result<(), TrainError> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFiniteLoss { phase: phase.to_string(), epoch, iter, batch })
    }
}

/// Parameter blocks trained during pre-training of component `k`: that
/// component plus, for the long variant, the shared histogram head.
fn pretrain_param_blocks<'m>(model: &'m mut MixtureModel, k: usize) -> Vec<&'m mut [f64]> {
    let MixtureModel { components, long_head, .. } = model;
    let mut out = components[k].param_blocks_mut();
    if let Some(h) = long_head {
        out.extend(h.param_blocks_mut());
    }
    out
}

fn pretrain_grad_blocks_mut<'g>(grads: &'g mut MixtureGrads, k: usize) -> Vec<&'g mut [f64]> {
    let MixtureGrads { components, long_head, .. } = grads;
    let mut out = components[k].blocks_mut();
    if let Some(h) = long_head {
        out.push(h.w.data_mut());
        out.push(h.b.as_mut_slice());
    }
    out
}

fn pretrain_grad_blocks<'g>(grads: &'g MixtureGrads, k: usize) -> Vec<&'g [f64]> {
    let mut out = grads.components[k].blocks();
    if let Some(h) = &grads.long_head {
        out.push(h.w.data());
        out.push(h.b.as_slice());
    }
    out
}

/// Pre-train each component on its station group's examples with forced
/// one-hot attention. The attention layer is never touched; empty groups are
/// skipped with a warning.
pub fn pretrain(
    model: &mut MixtureModel,
    grouping: &StationGrouping,
    set: &TrainSet<'_>,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<(), TrainError> {
    assert_eq!(model.variant, set.variant, "train set variant mismatch");
    if set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for k in 0..NUM_COMPONENTS {
        let group: Vec<&TrainItem<'_>> = set
            .items
            .iter()
            .filter(|item| grouping.component(item.station) == Some(k))
            .collect();
        if group.is_empty() {
            log::warn!("pre-training: station group {k} has no examples; skipping");
            continue;
        }
        let phase = format!("pretrain{k}");
        let mut adam = {
            let blocks = pretrain_param_blocks(model, k);
            AdamState::new(&blocks.iter().map(|b| b.len()).collect::<Vec<_>>())
        };
        for epoch in 0..cfg.pretrain_epochs {
            let order = shuffled_indices(
                group.len(),
                derive_seed(cfg.seed, STAGE_PRETRAIN + k as u64, epoch as u64),
            );
            for (iter, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let batch: Vec<&TrainItem<'_>> = chunk.iter().map(|&i| group[i]).collect();
                let (loss, mut grads) =
                    batch_step(model, &batch, Attention::Forced(k), GradScope::pretrain())?;
                check_finite(loss, &phase, epoch, iter, iter)?;
                {
                    let mut gblocks = pretrain_grad_blocks_mut(&mut grads, k);
                    clip_global_norm(&mut gblocks, cfg.clip_norm);
                }
                let gblocks = pretrain_grad_blocks(&grads, k);
                let mut pblocks = pretrain_param_blocks(model, k);
                adam.step(&cfg.adam(), &mut pblocks, &gblocks);
                log.push(&phase, epoch, iter, loss);
            }
        }
    }
    Ok(())
}

/// Which half of the alternating schedule is running.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Components,
    Aggregator,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Components => "components",
            Phase::Aggregator => "aggregator",
        }
    }
}

/// Optimizer state of the alternating loop; separable for exact resume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub component_adam: AdamState,
    pub aggregator_adam: AdamState,
    pub next_epoch: usize,
}

impl TrainerState {
    pub fn new(model: &MixtureModel) -> Self {
        Self {
            component_adam: AdamState::for_blocks(&model.component_group_blocks()),
            aggregator_adam: AdamState::for_blocks(&model.aggregator_group_blocks()),
            next_epoch: 0,
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.component_adam.step_count() + self.aggregator_adam.step_count()
    }
}

/// Run alternating epochs `state.next_epoch .. end_epoch`. The observer fires
/// before and after every phase with a read-only view of the model.
pub fn train_epoch_range<F>(
    model: &mut MixtureModel,
    set: &TrainSet<'_>,
    cfg: &TrainConfig,
    state: &mut TrainerState,
    log: &mut TrainLog,
    end_epoch: usize,
    mut observer: F,
) -> Result<(), TrainError>
where
    F: FnMut(usize, Phase, bool, &MixtureModel),
{
    assert_eq!(model.variant, set.variant, "train set variant mismatch");
    if set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let n = set.len();
    let n_batches = n.div_ceil(cfg.batch_size);

    while state.next_epoch < end_epoch {
        let epoch = state.next_epoch;
        let order =
            shuffled_indices(n, derive_seed(cfg.seed, STAGE_ALTERNATE, epoch as u64));
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let mut cursor = 0usize;

        for (phase, iters) in [(Phase::Components, cfg.n_t), (Phase::Aggregator, cfg.m_t)] {
            observer(epoch, phase, true, model);
            for iter in 0..iters {
                let batch_id = cursor % n_batches;
                cursor += 1;
                let batch: Vec<&TrainItem<'_>> =
                    batches[batch_id].iter().map(|&i| &set.items[i]).collect();
                let (scope, attention) = match phase {
                    Phase::Components => (GradScope::component_group(), Attention::Learned),
                    Phase::Aggregator => (GradScope::aggregator_group(), Attention::Learned),
                };
                let (loss, mut grads) = batch_step(model, &batch, attention, scope)?;
                check_finite(loss, phase.as_str(), epoch, iter, batch_id)?;
                match phase {
                    Phase::Components => {
                        {
                            let mut g = grads.component_group_blocks_mut();
                            clip_global_norm(&mut g, cfg.clip_norm);
                        }
                        let g = grads.component_group_blocks();
                        let mut p = model.component_group_blocks_mut();
                        state.component_adam.step(&cfg.adam(), &mut p, &g);
                    }
                    Phase::Aggregator => {
                        {
                            let mut g = grads.aggregator_group_blocks_mut();
                            clip_global_norm(&mut g, cfg.clip_norm);
                        }
                        let g = grads.aggregator_group_blocks();
                        let mut p = model.aggregator_group_blocks_mut();
                        state.aggregator_adam.step(&cfg.adam(), &mut p, &g);
                    }
                }
                log.push(phase.as_str(), epoch, iter, loss);
            }
            observer(epoch, phase, false, model);
        }
        state.next_epoch += 1;
    }
    Ok(())
}

/// The full alternating loop over `cfg.n_epochs`.
pub fn train_alternating(
    model: &mut MixtureModel,
    set: &TrainSet<'_>,
    cfg: &TrainConfig,
) -> Result<TrainLog, TrainError> {
    let mut log = TrainLog::default();
    let mut state = TrainerState::new(model);
    let start = Instant::now();
    train_epoch_range(model, set, cfg, &mut state, &mut log, cfg.n_epochs, |_, _, _, _| {})?;
    log.wall_time_s = start.elapsed().as_secs_f64();
    Ok(log)
}

/// Pre-training followed by the alternating loop; the usual entry point.
pub fn train_full(
    model: &mut MixtureModel,
    grouping: &StationGrouping,
    set: &TrainSet<'_>,
    cfg: &TrainConfig,
) -> Result<TrainLog, TrainError> {
    let mut log = TrainLog::default();
    let start = Instant::now();
    pretrain(model, grouping, set, cfg, &mut log)?;
    let mut state = TrainerState::new(model);
    train_epoch_range(model, set, cfg, &mut state, &mut log, cfg.n_epochs, |_, _, _, _| {})?;
    log.wall_time_s = start.elapsed().as_secs_f64();
    Ok(log)
}

const CHECKPOINT_MAGIC: &[u8] = b"AQCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Write model parameters, both Adam states, and the epoch counter; enough
/// to resume bit-exactly (batch shuffles are derived from (seed, epoch), not
/// from live RNG state).
pub fn save_checkpoint(
    path: &Path,
    model: &MixtureModel,
    state: &TrainerState,
) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    binio::write_u32(&mut w, CHECKPOINT_VERSION)?;
    binio::write_u8(&mut w, match model.variant {
        Variant::Short => 0,
        Variant::Long => 1,
    })?;
    binio::write_u32(&mut w, model.layers as u32)?;
    binio::write_u32(&mut w, model.hidden as u32)?;
    binio::write_u32(&mut w, model.horizon.unwrap_or(0))?;
    for block in model.all_blocks() {
        binio::write_f64_slice(&mut w, block)?;
    }
    binio::write_u64(&mut w, state.next_epoch as u64)?;
    state.component_adam.save(&mut w)?;
    state.aggregator_adam.save(&mut w)?;
    w.flush()
}

pub fn load_checkpoint(path: &Path) -> std::io::Result<(MixtureModel, TrainerState)> {
    let invalid = |msg: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, msg);
    let mut r = BufReader::new(File::open(path)?);
    binio::expect_magic(&mut r, CHECKPOINT_MAGIC)?;
    if binio::read_u32(&mut r)? != CHECKPOINT_VERSION {
        return Err(invalid("unsupported checkpoint version"));
    }
    let variant = match binio::read_u8(&mut r)? {
        0 => Variant::Short,
        1 => Variant::Long,
        _ => return Err(invalid("unknown variant tag")),
    };
    let layers = binio::read_u32(&mut r)? as usize;
    let hidden = binio::read_u32(&mut r)? as usize;
    let horizon = match binio::read_u32(&mut r)? {
        0 => None,
        s => Some(s),
    };
    let mut model = MixtureModel::with_shape(MixtureConfig { variant, layers, hidden, horizon });
    for block in model.all_blocks_mut() {
        let values = binio::read_f64_vec(&mut r)?;
        if values.len() != block.len() {
            return Err(invalid("checkpoint block length mismatch"));
        }
        block.copy_from_slice(&values);
    }
    let next_epoch = binio::read_u64(&mut r)? as usize;
    let component_adam = AdamState::load(&mut r)?;
    let aggregator_adam = AdamState::load(&mut r)?;
    Ok((model, TrainerState { component_adam, aggregator_adam, next_epoch }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureWindow, NUM_FEATURES, WINDOW_LEN};
    use crate::dataset::{group_stations_by_residual_variance, Split};
    use rand::Rng;

    /// Three stations whose windows identify them (feature 0 carries the
    /// station code) and whose residual targets have variance 0.01 / 0.25 / 1
    /// around means -2 / 0 / +2.
    fn separable_examples(per_station: usize, seed: u64) -> Vec<PointExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        let stations = [("sa", -1.0, -1.0, 0.1), ("sb", 0.0, 0.0, 0.5), ("sc", 1.0, 1.0, 1.0)];
        for (id, code, mean, noise) in stations {
            for i in 0..per_station {
                let mut values = [[0.0; NUM_FEATURES]; WINDOW_LEN];
                for row in &mut values {
                    row[0] = code;
                    for v in row.iter_mut().skip(1) {
                        *v = rng.gen_range(-0.3..0.3);
                    }
                }
                let target = mean + noise * if i % 2 == 0 { 1.0 } else { -1.0 };
                out.push(PointExample {
                    window: FeatureWindow {
                        station_id: id.to_string(),
                        end_timestamp: i as i64,
                        values,
                    },
                    target,
                    split: Split::Train,
                });
            }
        }
        out
    }

    fn small_short_model(seed: u64) -> MixtureModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MixtureModel::new(
            MixtureConfig { variant: Variant::Short, layers: 1, hidden: 8, horizon: None },
            &mut rng,
        )
    }

    fn group_bytes(blocks: &[&[f64]]) -> Vec<u64> {
        blocks.iter().flat_map(|b| b.iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn pretrain_leaves_aggregator_untouched_and_routes_data() {
        let examples = separable_examples(40, 1);
        let grouping = group_stations_by_residual_variance(&examples);
        assert_eq!(grouping.component("sa"), Some(0));
        assert_eq!(grouping.component("sb"), Some(1));
        assert_eq!(grouping.component("sc"), Some(2));

        let mut model = small_short_model(2);
        let agg_before = group_bytes(&[model.aggregator.w.data(), &model.aggregator.b]);
        let comp1_before = group_bytes(&model.components[1].param_blocks());

        // Train only component 0's group: drop the other stations' examples.
        let only_sa: Vec<PointExample> =
            examples.iter().filter(|e| e.window.station_id == "sa").cloned().collect();
        let set = TrainSet::from_point(&only_sa, 1.0);
        let cfg = TrainConfig { pretrain_epochs: 2, seed: 7, ..TrainConfig::default() };
        let mut log = TrainLog::default();
        pretrain(&mut model, &grouping, &set, &cfg, &mut log).unwrap();

        let agg_after = group_bytes(&[model.aggregator.w.data(), &model.aggregator.b]);
        assert_eq!(agg_before, agg_after, "aggregator must be bit-identical");
        // Component 1 saw no data (its group is empty in this set).
        let comp1_after = group_bytes(&model.components[1].param_blocks());
        assert_eq!(comp1_before, comp1_after, "component 1 must be untouched");
        // Component 0 did train.
        let comp0_after = group_bytes(&model.components[0].param_blocks());
        let comp0_init = group_bytes(&small_short_model(2).components[0].param_blocks());
        assert_ne!(comp0_after, comp0_init);
    }

    #[test]
    fn pretrained_components_specialize_to_their_groups() {
        let examples = separable_examples(200, 3);
        let grouping = group_stations_by_residual_variance(&examples);
        let set = TrainSet::from_point(&examples, 1.0);
        let mut model = small_short_model(4);
        let cfg =
            TrainConfig { pretrain_epochs: 10, lr: 0.05, seed: 11, ..TrainConfig::default() };
        let mut log = TrainLog::default();
        pretrain(&mut model, &grouping, &set, &cfg, &mut log).unwrap();

        // Loss of component k on group g, forced attention.
        let loss = |k: usize, station: &str| -> f64 {
            let items: Vec<&TrainItem<'_>> =
                set.items.iter().filter(|i| i.station == station).collect();
            dataset_loss(&model, &items, Attention::Forced(k)).unwrap()
        };
        for (k, station) in ["sa", "sb", "sc"].iter().enumerate() {
            let own = loss(k, station);
            for other in ["sa", "sb", "sc"].iter().filter(|s| *s != station) {
                let cross = loss(k, other);
                assert!(
                    own < cross,
                    "component {k}: own-group loss {own} !< cross-group loss {cross} ({other})"
                );
            }
        }
    }

    #[test]
    fn alternating_freeze_discipline_is_bitwise() {
        let examples = separable_examples(30, 5);
        let set = TrainSet::from_point(&examples, 1.0);
        let mut model = small_short_model(6);
        let cfg = TrainConfig { n_epochs: 2, n_t: 3, m_t: 2, seed: 13, ..TrainConfig::default() };
        let mut state = TrainerState::new(&model);
        let mut log = TrainLog::default();

        let mut snapshots: Vec<(Phase, bool, Vec<u64>, Vec<u64>)> = Vec::new();
        train_epoch_range(&mut model, &set, &cfg, &mut state, &mut log, cfg.n_epochs, {
            let snaps = &mut snapshots;
            move |_, phase, at_start, m: &MixtureModel| {
                snaps.push((
                    phase,
                    at_start,
                    group_bytes(&m.component_group_blocks()),
                    group_bytes(&m.aggregator_group_blocks()),
                ));
            }
        })
        .unwrap();

        for pair in snapshots.chunks(2) {
            let (phase, start, comp_a, agg_a) = &pair[0];
            let (_, _, comp_b, agg_b) = &pair[1];
            assert!(*start);
            match phase {
                Phase::Components => {
                    assert_eq!(agg_a, agg_b, "aggregator group changed during component phase");
                    assert_ne!(comp_a, comp_b, "component group failed to train");
                }
                Phase::Aggregator => {
                    assert_eq!(comp_a, comp_b, "component group changed during aggregator phase");
                    assert_ne!(agg_a, agg_b, "aggregator group failed to train");
                }
            }
        }
    }

    #[test]
    fn step_accounting_matches_the_schedule() {
        let examples = separable_examples(20, 8);
        let set = TrainSet::from_point(&examples, 1.0);
        let mut model = small_short_model(9);
        let cfg = TrainConfig {
            n_epochs: 3,
            n_t: 4,
            m_t: 2,
            batch_size: 16,
            seed: 17,
            ..TrainConfig::default()
        };
        let log = train_alternating(&mut model, &set, &cfg).unwrap();
        assert_eq!(log.alternating_steps(), cfg.n_epochs * (cfg.n_t + cfg.m_t));
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let examples = separable_examples(30, 10);
        let grouping = group_stations_by_residual_variance(&examples);
        let set = TrainSet::from_point(&examples, 1.0);
        let cfg = TrainConfig {
            n_epochs: 2,
            pretrain_epochs: 1,
            seed: 23,
            ..TrainConfig::default()
        };

        let mut run = || -> (Vec<u64>, TrainLog) {
            let mut model = small_short_model(31);
            let mut log = TrainLog::default();
            pretrain(&mut model, &grouping, &set, &cfg, &mut log).unwrap();
            let mut state = TrainerState::new(&model);
            train_epoch_range(&mut model, &set, &cfg, &mut state, &mut log, cfg.n_epochs, |_, _, _, _| {})
                .unwrap();
            (group_bytes(&model.all_blocks()), log)
        };
        let (params_a, log_a) = run();
        let (params_b, log_b) = run();
        assert_eq!(params_a, params_b);
        assert_eq!(log_a.records, log_b.records);
    }

    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let examples = separable_examples(30, 12);
        let set = TrainSet::from_point(&examples, 1.0);
        let cfg = TrainConfig { n_epochs: 4, n_t: 3, m_t: 3, seed: 29, ..TrainConfig::default() };

        // Straight-through run.
        let mut model_a = small_short_model(41);
        let mut state_a = TrainerState::new(&model_a);
        let mut log_a = TrainLog::default();
        train_epoch_range(&mut model_a, &set, &cfg, &mut state_a, &mut log_a, 4, |_, _, _, _| {})
            .unwrap();

        // Two epochs, checkpoint to disk, reload, two more.
        let mut model_b = small_short_model(41);
        let mut state_b = TrainerState::new(&model_b);
        let mut log_b = TrainLog::default();
        train_epoch_range(&mut model_b, &set, &cfg, &mut state_b, &mut log_b, 2, |_, _, _, _| {})
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&path, &model_b, &state_b).unwrap();
        let (mut model_c, mut state_c) = load_checkpoint(&path).unwrap();
        assert_eq!(model_b, model_c);
        train_epoch_range(&mut model_c, &set, &cfg, &mut state_c, &mut log_b, 4, |_, _, _, _| {})
            .unwrap();

        assert_eq!(group_bytes(&model_a.all_blocks()), group_bytes(&model_c.all_blocks()));
        assert_eq!(state_a.total_steps(), state_c.total_steps());
    }

    #[test]
    fn adam_moments_persist_across_phases() {
        let examples = separable_examples(20, 14);
        let set = TrainSet::from_point(&examples, 1.0);
        let mut model = small_short_model(51);
        let cfg = TrainConfig { n_epochs: 2, n_t: 5, m_t: 3, seed: 31, ..TrainConfig::default() };
        let mut state = TrainerState::new(&model);
        let mut log = TrainLog::default();
        train_epoch_range(&mut model, &set, &cfg, &mut state, &mut log, 2, |_, _, _, _| {}).unwrap();
        // Step counters accumulate over the whole run instead of resetting.
        assert_eq!(state.component_adam.step_count(), 10);
        assert_eq!(state.aggregator_adam.step_count(), 6);
    }

    #[test]
    fn alternating_reduces_loss_on_the_separable_set() {
        let examples = separable_examples(60, 16);
        let grouping = group_stations_by_residual_variance(&examples);
        let set = TrainSet::from_point(&examples, 1.0);
        let mut model = small_short_model(61);
        let cfg = TrainConfig { pretrain_epochs: 3, seed: 37, ..TrainConfig::default() };
        let log = train_full(&mut model, &grouping, &set, &cfg).unwrap();
        let first = log.epoch_mean_loss(0).unwrap();
        let last = log.epoch_mean_loss(cfg.n_epochs - 1).unwrap();
        assert!(last < first, "no convergence: first {first}, last {last}");
    }
}
