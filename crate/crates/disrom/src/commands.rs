//! Implementations of the `synth`, `train`, `sweep`, `analyze` and `modes`
//! subcommands.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use disrom_core::analysis::{
    encode_codes, generate_modes, latent_stats, mode_base, rank_active, Criterion, LatentStats, ModeBase,
};
use disrom_core::data::{synthesize, Dataset, SyntheticFlowParams};
use disrom_core::disentangle::{pearson_matrix, det_r};
use disrom_core::models::Model;
use disrom_core::tensor::Tensor;
use disrom_core::train::{train, EpochMetrics, TrainError};
use serde::Serialize;

use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::format::{self, FormatError};
use crate::pgm::write_pgm;

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const DATASET_FILE: &str = "dataset.disrom";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
    /// NaN or infinite loss.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.0)
    }
}

impl CliError {
    /// 2 for configuration, validation and input errors; 3 for numeric
    /// failure during training.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numeric(_) => 3,
            _ => 2,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

// ---- synth --------------------------------------------------------------

/// Writes the raw synthetic flow to `path` and returns it.
pub fn cmd_synth(params: &SyntheticFlowParams, path: &Path) -> Result<Dataset, CliError> {
    let data = synthesize(params).map_err(config_err)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    format::store(&data, path)?;
    Ok(data)
}

// ---- train --------------------------------------------------------------

/// Loads or synthesizes the dataset, splits it chronologically and
/// normalizes it with training-split statistics.
pub fn prepare_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let raw = match &cfg.data.path {
        Some(p) => format::load(p)?,
        None => synthesize(&cfg.data.synth).map_err(config_err)?,
    };
    let data = raw.split(cfg.data.train_fraction).map_err(config_err)?;
    let data = data.normalize(cfg.data.normalization).map_err(config_err)?;
    check_input(&cfg.model_spec().input, &data)?;
    Ok(data)
}

fn check_input(input: &disrom_core::models::Stage, data: &Dataset) -> Result<(), CliError> {
    if (input.channels, input.height, input.width) != (data.channels(), data.height(), data.width()) {
        return Err(CliError::Config(format!(
            "model expects {}x{}x{} snapshots, dataset has {}x{}x{}",
            input.channels,
            input.height,
            input.width,
            data.channels(),
            data.height(),
            data.width()
        )));
    }
    Ok(())
}

/// A finished training run.
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub metrics: Vec<EpochMetrics>,
    pub dataset: Dataset,
}

/// What a training run writes besides `metrics.csv`.
#[derive(Clone, Copy, Debug)]
pub struct RunOutputs {
    pub dataset: bool,
}

/// Validates `cfg`, trains, and (when `out_dir` is given) writes the
/// config, metrics, timing, checkpoint and optionally the prepared dataset.
pub fn run_training(cfg: &RunConfig, out_dir: Option<&Path>, outputs: RunOutputs) -> Result<TrainOutcome, CliError> {
    for w in cfg.validate()? {
        log::warn!("{w}");
    }
    let dataset = prepare_dataset(cfg)?;
    run_training_on(cfg, dataset, out_dir, outputs)
}

/// [`run_training`] on an already prepared dataset.
pub fn run_training_on(
    cfg: &RunConfig,
    dataset: Dataset,
    out_dir: Option<&Path>,
    outputs: RunOutputs,
) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    check_input(&cfg.model_spec().input, &dataset)?;
    let tcfg = cfg.train_config()?;
    let mut model = Model::<f32>::build(&cfg.model_spec(), cfg.train.seed).map_err(config_err)?;

    let mut sinks = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
            if outputs.dataset {
                format::store(&dataset, &dir.join(DATASET_FILE))?;
            }
            Some((csv::Writer::from_path(dir.join(METRICS_FILE))?, csv::Writer::from_path(dir.join(TIMING_FILE))?))
        }
        None => None,
    };
    let start = Instant::now();
    let mut sink_error: Option<CliError> = None;
    let every = cfg.train.checkpoint_every;
    let result = train(&mut model, &dataset, &tcfg, |m, model| {
        log::debug!("epoch {} loss {:.6} val_mse {:.6} corr {:.4}", m.epoch, m.train_loss, m.val_mse, m.val_correlation);
        if let (Some((metrics, timing)), Some(dir), None) = (sinks.as_mut(), out_dir, sink_error.as_ref()) {
            let r = (|| -> Result<(), CliError> {
                metrics.serialize(m)?;
                metrics.flush()?;
                timing.serialize(TimingRow { epoch: m.epoch, seconds: start.elapsed().as_secs_f64() })?;
                if every > 0 && (m.epoch + 1) % every == 0 {
                    checkpoint::save(model, &dir.join(CHECKPOINT_FILE))?;
                }
                Ok(())
            })();
            if let Err(e) = r {
                sink_error = Some(e);
            }
        }
    });
    let metrics = match result {
        Ok(m) => m,
        Err(e @ TrainError::NonFinite { .. }) => return Err(CliError::Numeric(e.to_string())),
        Err(e) => return Err(CliError::Config(e.to_string())),
    };
    if let Some(e) = sink_error {
        return Err(e);
    }
    if let (Some((mut metrics_w, mut timing_w)), Some(dir)) = (sinks, out_dir) {
        metrics_w.flush()?;
        timing_w.flush()?;
        checkpoint::save(&model, &dir.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainOutcome { model, metrics, dataset })
}

#[derive(Serialize)]
struct TimingRow {
    epoch: usize,
    seconds: f64,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    let out = run_training(cfg, Some(&cfg.output_dir), RunOutputs { dataset: true })?;
    if let Some(last) = out.metrics.last() {
        log::info!(
            "trained {} epochs: validation MSE {:.6}, correlation metric {:.4}",
            last.epoch + 1,
            last.val_mse,
            last.val_correlation
        );
    }
    Ok(out)
}

// ---- sweep --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    /// `run` or `aggregate`.
    pub kind: &'static str,
    pub weight: f64,
    pub repeat: Option<usize>,
    pub seed: Option<u64>,
    /// `abs_r12` for m = 2, `det_r` otherwise.
    pub metric: &'static str,
    /// Final validation MSE; the mean for aggregate rows.
    pub val_mse: f64,
    /// Final correlation metric; the mean for aggregate rows.
    pub correlation: f64,
    pub val_mse_min: Option<f64>,
    pub val_mse_max: Option<f64>,
    pub correlation_min: Option<f64>,
    pub correlation_max: Option<f64>,
}

/// Trains every `(weight, repeat)` pair (seed = base seed + repeat) and
/// writes `sweep.csv` with one row per run plus a min/mean/max row per
/// weight.
pub fn cmd_sweep(cfg: &RunConfig, weights: &[f64], repeats: usize) -> Result<Vec<SweepRow>, CliError> {
    if weights.is_empty() || weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(CliError::Config("sweep weights must be positive".into()));
    }
    if repeats == 0 {
        return Err(CliError::Config("repeats must be positive".into()));
    }
    for w in cfg.validate()? {
        log::warn!("{w}");
    }
    let dataset = prepare_dataset(cfg)?;
    let root = cfg.output_dir.clone();
    fs::create_dir_all(&root)?;
    fs::write(root.join(CONFIG_FILE), cfg.to_toml())?;
    format::store(&dataset, &root.join(DATASET_FILE))?;
    let metric = if cfg.model.latent_dim == 2 { "abs_r12" } else { "det_r" };

    let mut rows = Vec::new();
    for &weight in weights {
        let mut runs = Vec::with_capacity(repeats);
        for repeat in 0..repeats {
            let mut run_cfg = cfg.clone();
            run_cfg.loss.weight = weight;
            run_cfg.train.seed = cfg.train.seed + repeat as u64;
            run_cfg.output_dir = root.join("runs").join(format!("w{weight:e}_r{repeat}"));
            let out_dir = run_cfg.output_dir.clone();
            let out = run_training_on(&run_cfg, dataset.clone(), Some(&out_dir), RunOutputs { dataset: false })?;
            let last = out.metrics.last().expect("at least one epoch");
            log::info!("weight {weight:e} repeat {repeat}: val_mse {:.6} {metric} {:.4}", last.val_mse, last.val_correlation);
            let row = SweepRow {
                kind: "run",
                weight,
                repeat: Some(repeat),
                seed: Some(run_cfg.train.seed),
                metric,
                val_mse: last.val_mse,
                correlation: last.val_correlation,
                val_mse_min: None,
                val_mse_max: None,
                correlation_min: None,
                correlation_max: None,
            };
            runs.push(row);
        }
        let (mse_min, mse_mean, mse_max) = min_mean_max(runs.iter().map(|r| r.val_mse));
        let (c_min, c_mean, c_max) = min_mean_max(runs.iter().map(|r| r.correlation));
        rows.extend(runs);
        rows.push(SweepRow {
            kind: "aggregate",
            weight,
            repeat: None,
            seed: None,
            metric,
            val_mse: mse_mean,
            correlation: c_mean,
            val_mse_min: Some(mse_min),
            val_mse_max: Some(mse_max),
            correlation_min: Some(c_min),
            correlation_max: Some(c_max),
        });
    }
    let mut w = csv::Writer::from_path(root.join("sweep.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

fn min_mean_max(values: impl Iterator<Item = f64>) -> (f64, f64, f64) {
    let v: Vec<f64> = values.collect();
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (min, v.iter().sum::<f64>() / v.len() as f64, max)
}

// ---- analyze ------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum SplitChoice {
    #[default]
    Train,
    Validation,
    All,
}

pub fn select_split(data: &Dataset, split: SplitChoice) -> Tensor<f32> {
    match split {
        SplitChoice::Train => data.train(),
        SplitChoice::Validation => data.validation(),
        SplitChoice::All => data.snapshots.clone(),
    }
}

#[derive(Clone, Debug)]
pub struct AnalyzeReport {
    pub stats: LatentStats,
    pub ranking: Vec<usize>,
    /// `(k, det(R))` over the top-k ranked variables; NaN when a selected
    /// variable is constant.
    pub top_k_det: Vec<(usize, f64)>,
}

/// Per-variable statistics, ranking and top-k `det(R)` of `model` on `data`.
pub fn analyze(
    model: &Model<f32>,
    data: &Dataset,
    criterion: Criterion,
    split: SplitChoice,
) -> Result<AnalyzeReport, CliError> {
    check_input(&model.spec.input, data)?;
    let samples = select_split(data, split);
    let stats = latent_stats(model, &samples).map_err(config_err)?;
    let ranking = rank_active(&stats, criterion).map_err(config_err)?;
    let codes = encode_codes(model, &samples).map_err(config_err)?;
    let m = model.latent_dim();
    let k_samples = codes.len() / m;
    let mut top_k_det = Vec::new();
    for k in 1..=m.min(20) {
        let subset = &ranking[..k];
        let sub: Vec<f64> = codes.chunks_exact(m).flat_map(|row| subset.iter().map(move |&j| row[j])).collect();
        let det = pearson_matrix(&sub, k_samples, k).ok().and_then(|r| det_r(&r, None).ok()).unwrap_or(f64::NAN);
        top_k_det.push((k, det));
    }
    Ok(AnalyzeReport { stats, ranking, top_k_det })
}

#[derive(Serialize)]
struct StatsRow {
    index: usize,
    mean: f64,
    std: f64,
    normalized_std: f64,
    kl: Option<f64>,
    active: bool,
    pruned: bool,
}

/// Writes `stats.csv`, `ranking.txt` and `detr.csv` into `out_dir`.
pub fn cmd_analyze(
    checkpoint_path: &Path,
    dataset_path: &Path,
    criterion: Criterion,
    split: SplitChoice,
    threshold: f64,
    out_dir: &Path,
) -> Result<AnalyzeReport, CliError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(CliError::Config(format!("threshold {threshold} outside (0, 1)")));
    }
    let model = checkpoint::load(checkpoint_path)?;
    let data = format::load(dataset_path)?;
    let report = analyze(&model, &data, criterion, split)?;
    fs::create_dir_all(out_dir)?;

    let s = &report.stats;
    let mut w = csv::Writer::from_path(out_dir.join("stats.csv"))?;
    for i in 0..s.latent_dim() {
        w.serialize(StatsRow {
            index: i,
            mean: s.mean[i],
            std: s.std[i],
            normalized_std: s.normalized_std[i],
            kl: s.kl_per_variable.as_ref().map(|k| k[i]),
            active: s.normalized_std[i] > threshold,
            pruned: model.pruned().contains(&i),
        })?;
    }
    w.flush()?;

    let crit_name = match criterion {
        Criterion::Std => "std",
        Criterion::Kl => "kl",
    };
    let key = match criterion {
        Criterion::Std => &s.std,
        Criterion::Kl => s.kl_per_variable.as_ref().expect("checked by rank_active"),
    };
    let mut text = format!("# ranking by {crit_name}, most active first\n# rank index value\n");
    for (r, &i) in report.ranking.iter().enumerate() {
        text.push_str(&format!("{} {} {}\n", r + 1, i, key[i]));
    }
    text.push_str("# det(R) of the top-k ranked variables\n# k det_r\n");
    for (k, d) in &report.top_k_det {
        text.push_str(&format!("{k} {d}\n"));
    }
    fs::write(out_dir.join("ranking.txt"), text)?;

    let mut w = csv::Writer::from_path(out_dir.join("detr.csv"))?;
    w.write_record(["k", "det_r"])?;
    for (k, d) in &report.top_k_det {
        w.write_record([k.to_string(), d.to_string()])?;
    }
    w.flush()?;
    Ok(report)
}

// ---- modes --------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ModesReport {
    /// `(index, sweep values, variation)` per swept variable; variation is
    /// the largest pointwise difference between decoded fields, in
    /// normalized units.
    pub sweeps: Vec<(usize, Vec<f64>, f64)>,
    pub images: Vec<PathBuf>,
}

pub struct ModesRequest<'a> {
    pub indices: Option<&'a [usize]>,
    pub steps: usize,
    pub base: ModeBase,
    /// Validation snapshot whose code is the base for [`ModeBase::Snapshot`].
    pub snapshot: usize,
}

/// Sweeps each requested variable from its validation minimum to maximum
/// and writes one PGM per step and channel, a `z{i}_scale.txt` sidecar per
/// sweep and `sweep.csv`.
pub fn cmd_modes(
    checkpoint_path: &Path,
    dataset_path: &Path,
    req: &ModesRequest<'_>,
    out_dir: &Path,
) -> Result<ModesReport, CliError> {
    let model = checkpoint::load(checkpoint_path)?;
    let data = format::load(dataset_path)?;
    modes(&model, &data, req, out_dir)
}

pub fn modes(model: &Model<f32>, data: &Dataset, req: &ModesRequest<'_>, out_dir: &Path) -> Result<ModesReport, CliError> {
    check_input(&model.spec.input, data)?;
    if data.validation_len() == 0 {
        return Err(CliError::Config("dataset has no validation split".into()));
    }
    let m = model.latent_dim();
    let val = data.validation();
    let stats = latent_stats(model, &val).map_err(config_err)?;
    let default_indices;
    let indices = match req.indices {
        Some(ix) => ix,
        None => {
            default_indices = rank_active(&stats, Criterion::Std).map_err(config_err)?.into_iter().take(2).collect::<Vec<_>>();
            &default_indices
        }
    };
    if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
        return Err(CliError::Config(format!("latent index {bad} out of range for m = {m}")));
    }
    let reference = match req.base {
        ModeBase::Snapshot => {
            if req.snapshot >= data.validation_len() {
                return Err(CliError::Config(format!("snapshot {} outside the validation split", req.snapshot)));
            }
            let x = val.slice_outer(req.snapshot, req.snapshot + 1).map_err(config_err)?;
            Some(encode_codes(model, &x).map_err(config_err)?)
        }
        ModeBase::Zeros => None,
    };
    let base = mode_base(req.base, reference.as_deref(), m).map_err(config_err)?;

    fs::create_dir_all(out_dir)?;
    let (c, h, w) = (data.channels(), data.height(), data.width());
    let mut report = ModesReport { sweeps: Vec::new(), images: Vec::new() };
    let mut csv_w = csv::Writer::from_path(out_dir.join("sweep.csv"))?;
    csv_w.write_record(["index", "step", "value", "variation"])?;
    for &i in indices {
        let (mut lo, mut hi) = (stats.min[i], stats.max[i]);
        if !(lo < hi) {
            log::warn!("latent variable {i} is constant on the validation split; sweeping [{} , {}]", lo - 1.0, hi + 1.0);
            lo -= 1.0;
            hi += 1.0;
        }
        let sweep = generate_modes(model, &base, i, req.steps, (lo, hi)).map_err(config_err)?;
        let variation = sweep.variation();
        let stacked: Vec<f32> = sweep.fields.iter().flat_map(|f| f.data().iter().copied()).collect();
        let raw = data.denormalize_fields(&Tensor::new(&[req.steps, c, h, w], stacked).map_err(config_err)?);
        let plane = h * w;
        let mut scale_text = String::from("# channel min max (raw units, mapped to 0..255)\n");
        for ch in 0..c {
            let values = (0..req.steps).flat_map(|s| raw.data()[(s * c + ch) * plane..(s * c + ch + 1) * plane].iter());
            let (cmin, cmax) =
                values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v as f64), b.max(v as f64)));
            scale_text.push_str(&format!("{} {cmin} {cmax}\n", data.channel_names[ch]));
            for s in 0..req.steps {
                let field = &raw.data()[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                let path = out_dir.join(format!("z{i}_step{s}_{}.pgm", data.channel_names[ch]));
                write_pgm(&path, field, h, w, cmin, cmax)?;
                report.images.push(path);
            }
        }
        fs::write(out_dir.join(format!("z{i}_scale.txt")), scale_text)?;
        for (s, v) in sweep.values.iter().enumerate() {
            csv_w.write_record([i.to_string(), s.to_string(), v.to_string(), variation.to_string()])?;
        }
        report.sweeps.push((i, sweep.values.clone(), variation));
    }
    csv_w.flush()?;
    Ok(report)
}
