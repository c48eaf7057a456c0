//! Command-line pipeline: synth -> featurize -> train -> predict/evaluate,
//! plus a gradient self-check.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Every command
//! with an output directory logs its full effective configuration (flags,
//! config-file values, defaults, seed) to `config_used.txt` there.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use aircast::data::F_NEF;
use aircast::dataset::{
    build_histogram_examples, build_point_examples, fit_residual_scale,
    group_stations_by_residual_variance, split_histogram_examples, split_point_examples, Split,
};
use aircast::evaluate::{
    point_eval_cases, run_benchmark, stride_sample, BenchmarkConfig, ModelRegistry, PROB_HORIZONS,
};
use aircast::forecast::{predict_histogram, predict_point, MixtureResidualModel};
use aircast::ingest::{build_feature_set, load_deployment, FeatureSet};
use aircast::model::{grad_check_model, MixtureConfig, MixtureModel, ModelBundle, Variant};
use aircast::synth::{generate, write_dataset, SynthProfile, DEFAULT_HOURS, DEFAULT_STATIONS};
use aircast::train::{train_full, TrainConfig};

#[derive(Parser)]
#[command(name = "aircast", version, about = "Multi-station hourly PM2.5 forecasting pipeline")]
struct Cli {
    /// Optional `key = value` config file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Cap on worker threads for data-parallel evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Short,
    Long,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-station dataset as CSV files.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        stations: Option<usize>,
        #[arg(long)]
        hours: Option<usize>,
        /// Disable wind-driven cross-station advection.
        #[arg(long)]
        no_advection: bool,
    },
    /// Ingest raw CSVs, engineer features, and cache them in binary form.
    Featurize {
        /// Directory containing stations.csv and the per-station series.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-station percentage of observations used for training.
        #[arg(long)]
        train_percent: Option<u32>,
    },
    /// Train a mixture model (pre-training + alternating optimization).
    Train {
        /// Feature cache produced by `featurize`.
        #[arg(long)]
        features: PathBuf,
        #[arg(long, value_enum)]
        variant: VariantArg,
        /// Forecast horizon in hours; required for the long variant.
        #[arg(long)]
        horizon: Option<u32>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        n_epochs: Option<usize>,
        #[arg(long)]
        n_t: Option<usize>,
        #[arg(long)]
        m_t: Option<usize>,
        #[arg(long)]
        pretrain_epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        clip_norm: Option<f64>,
        /// Zero the flow feature in training windows (ablation study).
        #[arg(long)]
        ablate_nef: bool,
    },
    /// Batch predictions over the test split of a feature cache.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Point horizon in hours (short models only; long models use their
        /// trained horizon).
        #[arg(long)]
        horizon: Option<u32>,
        /// Cap on emitted predictions.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Reproduce the benchmark grids from trained models plus baselines.
    Evaluate {
        #[arg(long)]
        features: PathBuf,
        /// Directory holding model_short.bin / model_long_<s>.bin files.
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        max_examples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference check of every parameter block of both variants.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
    },
}

/// A user-input problem: reported on stderr with exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

/// `key = value` file mirroring long flag names (e.g. `n-epochs = 10`).
/// Lines starting with `#` are comments.
struct FileConfig(BTreeMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut map = BTreeMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    usage(format!("{}:{}: expected `key = value`", path.display(), i + 1))
                })?;
                map.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(Self(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| usage(format!("config key `{key}`: bad value `{raw}` ({e})"))),
        }
    }
}

/// Effective settings, resolved as flag > config file > default, and
/// recorded for the run log.
struct Settings<'a> {
    file: &'a FileConfig,
    used: BTreeMap<String, String>,
}

impl<'a> Settings<'a> {
    fn new(file: &'a FileConfig) -> Self {
        Self { file, used: BTreeMap::new() }
    }

    fn resolve<T: FromStr + Display>(&mut self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let value = match flag {
            Some(v) => v,
            None => self.file.get::<T>(key)?.unwrap_or(default),
        };
        self.used.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    fn resolve_flag(&mut self, flag: bool, key: &str) -> Result<bool> {
        let value = if flag { true } else { self.file.get::<bool>(key)?.unwrap_or(false) };
        self.used.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    fn note(&mut self, key: &str, value: impl Display) {
        self.used.insert(key.to_string(), value.to_string());
    }

    fn write_log(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir)?;
        let mut text = String::new();
        for (k, v) in &self.used {
            text.push_str(&format!("{k} = {v}\n"));
        }
        fs::write(out_dir.join("config_used.txt"), text)?;
        Ok(())
    }
}

fn load_features(path: &Path) -> Result<FeatureSet> {
    FeatureSet::load(path).with_context(|| format!("loading feature cache {}", path.display()))
}

fn cmd_synth(
    settings: &mut Settings<'_>,
    out: &Path,
    seed: u64,
    stations: usize,
    hours: usize,
    no_advection: bool,
) -> Result<()> {
    if stations < 3 {
        return Err(usage("--stations must be at least 3"));
    }
    if hours < 200 {
        return Err(usage("--hours must be at least 200"));
    }
    let mut profile = SynthProfile::default();
    if no_advection {
        profile.advection = false;
    }
    let (metas, records) = generate(stations, hours, seed, &profile);
    let index = write_dataset(out, &metas, &records)?;
    settings.write_log(out)?;
    println!("wrote {} stations x {} hours to {}", stations, hours, index.display());
    Ok(())
}

fn cmd_featurize(
    settings: &mut Settings<'_>,
    data: &Path,
    out: &Path,
    train_percent: u32,
) -> Result<()> {
    if !(1..=99).contains(&train_percent) {
        return Err(usage("--train-percent must be in 1..=99"));
    }
    let index = data.join("stations.csv");
    let (stations, records) =
        load_deployment(&index).with_context(|| format!("loading {}", index.display()))?;
    let features = build_feature_set(stations, &records, train_percent)?;
    fs::create_dir_all(out)?;
    let path = out.join("features.bin");
    features.save(&path)?;
    settings.write_log(out)?;
    let rows: usize = features.series.iter().map(|s| s.rows.len()).sum();
    println!(
        "wrote {} ({} stations, {} feature rows)",
        path.display(),
        features.stations.len(),
        rows
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    settings: &mut Settings<'_>,
    features_path: &Path,
    variant: VariantArg,
    horizon: Option<u32>,
    out: &Path,
    cfg: TrainConfig,
    hidden: usize,
    layers: usize,
    ablate_nef: bool,
) -> Result<()> {
    let features = load_features(features_path)?;
    let features = if ablate_nef { features.with_feature_zeroed(F_NEF) } else { features };

    let point_examples = build_point_examples(&features.series);
    let (point_train, _) = split_point_examples(point_examples);
    if point_train.is_empty() {
        bail!("no training examples in the feature cache");
    }
    let grouping = group_stations_by_residual_variance(&point_train);
    for w in &grouping.warnings {
        log::warn!("{w}");
    }

    fs::create_dir_all(out)?;
    let suffix = if ablate_nef { "_ablated" } else { "" };
    let (bundle, log, name) = match variant {
        VariantArg::Short => {
            let residual_scale = fit_residual_scale(&point_train);
            let set = aircast::train::TrainSet::from_point(&point_train, residual_scale);
            let mut rng = rand::SeedableRng::seed_from_u64(cfg.seed);
            let mut model = MixtureModel::new(
                MixtureConfig { variant: Variant::Short, layers, hidden, horizon: None },
                &mut rng,
            );
            let log = train_full(&mut model, &grouping, &set, &cfg)?;
            let bundle = ModelBundle {
                model,
                standardizer: features.standardizer.clone(),
                residual_scale,
                nef_ablated: ablate_nef,
            };
            (bundle, log, format!("model_short{suffix}"))
        }
        VariantArg::Long => {
            let s = horizon.ok_or_else(|| usage("--variant long requires --horizon"))?;
            let examples = build_histogram_examples(&features.series, s)?;
            let (train_h, _) = split_histogram_examples(examples);
            if train_h.is_empty() {
                bail!("no training histograms at horizon {s}");
            }
            let set = aircast::train::TrainSet::from_histogram(&train_h);
            let mut rng = rand::SeedableRng::seed_from_u64(cfg.seed);
            let mut model = MixtureModel::new(
                MixtureConfig { variant: Variant::Long, layers, hidden, horizon: Some(s) },
                &mut rng,
            );
            let log = train_full(&mut model, &grouping, &set, &cfg)?;
            let bundle = ModelBundle {
                model,
                standardizer: features.standardizer.clone(),
                residual_scale: 1.0,
                nef_ablated: ablate_nef,
            };
            (bundle, log, format!("model_long_{s}{suffix}"))
        }
    };

    let model_path = out.join(format!("{name}.bin"));
    bundle.save(&model_path)?;
    fs::write(out.join(format!("train_log_{name}.csv")), log.to_csv())?;
    settings.write_log(out)?;
    let first = log.epoch_mean_loss(0).unwrap_or(f64::NAN);
    let last = log.epoch_mean_loss(cfg.n_epochs.saturating_sub(1)).unwrap_or(f64::NAN);
    println!(
        "wrote {} ({} optimizer steps, epoch mean loss {first:.5} -> {last:.5}, {:.1}s)",
        model_path.display(),
        log.records.len(),
        log.wall_time_s,
    );
    Ok(())
}

fn cmd_predict(
    settings: &mut Settings<'_>,
    model_path: &Path,
    features_path: &Path,
    out: &Path,
    horizon: Option<u32>,
    limit: usize,
) -> Result<()> {
    let bundle = ModelBundle::load(model_path)
        .with_context(|| format!("loading model {}", model_path.display()))?;
    let features = load_features(features_path)?;
    fs::create_dir_all(out)?;
    let mut csv = String::from(
        "station_id,t,horizon,mode,prediction,p_good,p_satisfactory,p_moderately_polluted,p_poor,p_very_poor,p_severe\n",
    );
    let n = match bundle.model.variant {
        Variant::Short => {
            let s = horizon.unwrap_or(1);
            let model = MixtureResidualModel::new(&bundle)?;
            let cases: Vec<_> = stride_sample(
                point_eval_cases(&features.series, s)
                    .into_iter()
                    .filter(|c| c.split == Split::Test)
                    .collect(),
                limit,
            );
            for c in &cases {
                let pred =
                    predict_point(&model, &features.standardizer, &c.window, c.last_pm25, s)?;
                csv.push_str(&format!("{},{},{},point,{},,,,,,\n", c.station_id, c.t, s, pred));
            }
            cases.len()
        }
        Variant::Long => {
            let s = bundle.model.horizon.expect("long bundles carry a horizon");
            if let Some(requested) = horizon {
                if requested != s {
                    return Err(usage(format!(
                        "model was trained for horizon {s}, cannot serve --horizon {requested}"
                    )));
                }
            }
            let examples = build_histogram_examples(&features.series, s)?;
            let (_, test) = split_histogram_examples(examples);
            let test = stride_sample(test, limit);
            for e in &test {
                let h = predict_histogram(&bundle, &e.window.values, s)?;
                let p = h.probabilities();
                csv.push_str(&format!(
                    "{},{},{},probabilistic,,{},{},{},{},{},{}\n",
                    e.window.station_id,
                    e.window.end_timestamp,
                    s,
                    p[0],
                    p[1],
                    p[2],
                    p[3],
                    p[4],
                    p[5]
                ));
            }
            test.len()
        }
    };
    let path = out.join("predictions.csv");
    fs::write(&path, csv)?;
    settings.write_log(out)?;
    println!("wrote {n} predictions to {}", path.display());
    Ok(())
}

fn cmd_evaluate(
    settings: &mut Settings<'_>,
    features_path: &Path,
    models: &Path,
    out: &Path,
    cfg: BenchmarkConfig,
) -> Result<()> {
    let features = load_features(features_path)?;
    let mut registry = ModelRegistry::default();
    let short_path = models.join("model_short.bin");
    if short_path.exists() {
        registry.short = Some(ModelBundle::load(&short_path)?);
    } else {
        log::warn!("{} not found; mixture point cells will be absent", short_path.display());
    }
    for s in PROB_HORIZONS {
        let path = models.join(format!("model_long_{s}.bin"));
        if path.exists() {
            registry.long.insert(s, ModelBundle::load(&path)?);
        } else {
            log::warn!("{} not found; mixture cell at {s}h will be absent", path.display());
        }
    }

    let report = run_benchmark(&features, &registry, &cfg)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("report.csv"), report.to_csv())?;
    settings.write_log(out)?;
    print!("{}", report.render_tables());
    println!("wrote {}", out.join("report.csv").display());
    Ok(())
}

fn cmd_gradcheck(seed: u64, hidden: usize, layers: usize) -> Result<()> {
    let mut all_pass = true;
    for (label, cfg) in [
        (
            "short (MSE path)",
            MixtureConfig { variant: Variant::Short, layers, hidden, horizon: None },
        ),
        (
            "long (KL path)",
            MixtureConfig { variant: Variant::Long, layers, hidden, horizon: Some(8) },
        ),
    ] {
        let report = grad_check_model(cfg, 4, seed, 1e-5);
        println!("{label}: max relative error {:.3e}", report.max_rel_err());
        print!("{}", report.render());
        all_pass &= report.passes(1e-4);
    }
    if all_pass {
        println!("gradcheck: PASS (all blocks < 1e-4)");
        Ok(())
    } else {
        bail!("gradcheck failed: a parameter block exceeded 1e-4 relative error")
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let mut settings = Settings::new(&file);
    if let Some(threads) = cli.threads.or(file.get("threads")?) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the thread pool")?;
        settings.note("threads", threads);
    }

    match cli.command {
        Command::Synth { out, seed, stations, hours, no_advection } => {
            let seed = settings.resolve(seed, "seed", 0)?;
            let stations = settings.resolve(stations, "stations", DEFAULT_STATIONS)?;
            let hours = settings.resolve(hours, "hours", DEFAULT_HOURS)?;
            let no_advection = settings.resolve_flag(no_advection, "no-advection")?;
            settings.note("out", out.display());
            cmd_synth(&mut settings, &out, seed, stations, hours, no_advection)
        }
        Command::Featurize { data, out, train_percent } => {
            let train_percent = settings.resolve(train_percent, "train-percent", 85)?;
            settings.note("data", data.display());
            settings.note("out", out.display());
            cmd_featurize(&mut settings, &data, &out, train_percent)
        }
        Command::Train {
            features,
            variant,
            horizon,
            out,
            seed,
            hidden,
            layers,
            n_epochs,
            n_t,
            m_t,
            pretrain_epochs,
            lr,
            batch_size,
            clip_norm,
            ablate_nef,
        } => {
            let defaults = TrainConfig::default();
            let cfg = TrainConfig {
                n_epochs: settings.resolve(n_epochs, "n-epochs", defaults.n_epochs)?,
                n_t: settings.resolve(n_t, "n-t", defaults.n_t)?,
                m_t: settings.resolve(m_t, "m-t", defaults.m_t)?,
                pretrain_epochs: settings.resolve(
                    pretrain_epochs,
                    "pretrain-epochs",
                    defaults.pretrain_epochs,
                )?,
                lr: settings.resolve(lr, "lr", defaults.lr)?,
                batch_size: settings.resolve(batch_size, "batch-size", defaults.batch_size)?,
                clip_norm: settings.resolve(clip_norm, "clip-norm", defaults.clip_norm)?,
                seed: settings.resolve(seed, "seed", 0)?,
            };
            if cfg.n_epochs == 0 || cfg.n_t == 0 || cfg.m_t == 0 || cfg.pretrain_epochs == 0 {
                return Err(usage("epoch and iteration counts must be >= 1"));
            }
            let hidden = settings.resolve(hidden, "hidden", 32)?;
            let layers = settings.resolve(layers, "layers", 2)?;
            let ablate_nef = settings.resolve_flag(ablate_nef, "ablate-nef")?;
            let horizon = match horizon {
                Some(h) => Some(h),
                None => file.get("horizon")?,
            };
            if let Some(h) = horizon {
                settings.note("horizon", h);
            }
            settings.note(
                "variant",
                match variant {
                    VariantArg::Short => "short",
                    VariantArg::Long => "long",
                },
            );
            settings.note("features", features.display());
            settings.note("out", out.display());
            cmd_train(
                &mut settings,
                &features,
                variant,
                horizon,
                &out,
                cfg,
                hidden,
                layers,
                ablate_nef,
            )
        }
        Command::Predict { model, features, out, horizon, limit } => {
            let limit = settings.resolve(limit, "limit", 1000)?;
            let horizon = match horizon {
                Some(h) => Some(h),
                None => file.get("horizon")?,
            };
            if let Some(h) = horizon {
                settings.note("horizon", h);
            }
            settings.note("model", model.display());
            settings.note("features", features.display());
            settings.note("out", out.display());
            cmd_predict(&mut settings, &model, &features, &out, horizon, limit)
        }
        Command::Evaluate { features, models, out, k, max_examples, seed } => {
            let defaults = BenchmarkConfig::default();
            let cfg = BenchmarkConfig {
                knn_k: settings.resolve(k, "k", defaults.knn_k)?,
                max_examples: settings.resolve(max_examples, "max-examples", defaults.max_examples)?,
                seed: settings.resolve(seed, "seed", 0)?,
            };
            if cfg.knn_k == 0 {
                return Err(usage("--k must be >= 1"));
            }
            settings.note("features", features.display());
            settings.note("models", models.display());
            settings.note("out", out.display());
            cmd_evaluate(&mut settings, &features, &models, &out, cfg)
        }
        Command::Gradcheck { seed, hidden, layers } => {
            let seed = settings.resolve(seed, "seed", 7)?;
            let hidden = settings.resolve(hidden, "hidden", 8)?;
            let layers = settings.resolve(layers, "layers", 2)?;
            cmd_gradcheck(seed, hidden, layers)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if e.downcast_ref::<UsageError>().is_some() {
                eprintln!("usage error: {e}");
                ExitCode::from(2)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        }
    }
}
