//! Latent-space statistics, activity ranking, mode sweeps and pruning.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::disentangle::kl_per_variable;
use crate::models::{LatentOut, Model, ModelError};
use crate::tensor::{Real, Tensor};

/// Samples encoded per chunk when walking a dataset.
pub const ENCODE_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub enum AnalysisError {
    Model(ModelError),
    EmptyDataset,
    Threshold(f64),
    /// KL ranking requested for a deterministic model.
    MissingKl,
    LatentIndex { index: usize, latent_dim: usize },
    Steps(usize),
    Range { lo: f64, hi: f64 },
    MissingReference,
    Length { expected: usize, actual: usize },
}

impl fmt::Display for AnalysisError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnalysisError::Model(e) => write!(f, "{e}"),
            AnalysisError::EmptyDataset => f.write_str("no samples to analyze"),
            AnalysisError::Threshold(t) => write!(f, "threshold {t} outside (0, 1)"),
            AnalysisError::MissingKl => f.write_str("KL ranking needs a variational model"),
            AnalysisError::LatentIndex { index, latent_dim } => {
                write!(f, "latent index {index} out of range for m = {latent_dim}")
            }
            AnalysisError::Steps(n) => write!(f, "a mode sweep needs at least 2 steps, got {n}"),
            AnalysisError::Range { lo, hi } => write!(f, "sweep range [{lo}, {hi}] is empty"),
            AnalysisError::MissingReference => f.write_str("snapshot base policy needs a reference latent vector"),
            AnalysisError::Length { expected, actual } => write!(f, "expected {expected} values, got {actual}"),
        }
    }
}

impl core::error::Error for AnalysisError {}

impl From<ModelError> for AnalysisError {
    fn from(e: ModelError) -> Self {
        AnalysisError::Model(e)
    }
}

/// Per-variable statistics of encoded samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    /// Population standard deviation.
    pub std: Vec<f64>,
    pub normalized_std: Vec<f64>,
    pub kl_per_variable: Option<Vec<f64>>,
    pub samples: usize,
    /// Per-variable minimum and maximum.
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl LatentStats {
    /// Statistics of a row-major `k × m` code matrix.
    pub fn from_codes(z: &[f64], m: usize, kl_per_variable: Option<Vec<f64>>) -> Result<Self, AnalysisError> {
        if m == 0 || z.is_empty() || z.len() % m != 0 {
            return Err(AnalysisError::EmptyDataset);
        }
        let k = z.len() / m;
        let mut mean = vec![0.0; m];
        let mut min = vec![f64::INFINITY; m];
        let mut max = vec![f64::NEG_INFINITY; m];
        for row in z.chunks_exact(m) {
            for j in 0..m {
                mean[j] += row[j];
                min[j] = min[j].min(row[j]);
                max[j] = max[j].max(row[j]);
            }
        }
        mean.iter_mut().for_each(|v| *v /= k as f64);
        let mut var = vec![0.0; m];
        for row in z.chunks_exact(m) {
            for j in 0..m {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / k as f64).sqrt()).collect();
        let normalized_std = normalize_std(&std);
        Ok(Self { mean, std, normalized_std, kl_per_variable, samples: k, min, max })
    }

    pub fn latent_dim(&self) -> usize {
        self.std.len()
    }
}

/// `std / max(std)`; all zeros when every variable is constant.
pub fn normalize_std(std: &[f64]) -> Vec<f64> {
    let top = std.iter().copied().fold(0.0, f64::max);
    if top > 0.0 {
        std.iter().map(|s| s / top).collect()
    } else {
        vec![0.0; std.len()]
    }
}

/// Encodes `samples` (`[n, c, h, w]`) deterministically and collects
/// statistics; the variational model uses `μ` and also reports KL terms.
pub fn latent_stats<T: Real>(model: &Model<T>, samples: &Tensor<T>) -> Result<LatentStats, AnalysisError> {
    if samples.shape().first().copied().unwrap_or(0) == 0 {
        return Err(AnalysisError::EmptyDataset);
    }
    let m = model.latent_dim();
    match model.encode_chunked(samples, ENCODE_CHUNK)? {
        LatentOut::Point(z) => LatentStats::from_codes(&to_f64(z.data()), m, None),
        LatentOut::Gaussian { mu, log_var } => {
            let mu = to_f64(mu.data());
            let kl = kl_per_variable(&mu, &to_f64(log_var.data()), m).map_err(|_| AnalysisError::EmptyDataset)?;
            LatentStats::from_codes(&mu, m, Some(kl))
        }
    }
}

/// Deterministic codes as a row-major `f64` matrix.
pub fn encode_codes<T: Real>(model: &Model<T>, samples: &Tensor<T>) -> Result<Vec<f64>, AnalysisError> {
    Ok(to_f64(model.encode_mean(samples, ENCODE_CHUNK)?.data()))
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    #[default]
    Std,
    Kl,
}

impl core::str::FromStr for Criterion {
    type Err = alloc::string::String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "std" => Ok(Criterion::Std),
            "kl" => Ok(Criterion::Kl),
            other => Err(alloc::format!("unknown criterion '{other}'")),
        }
    }
}

/// Variable indices, most active first; ties go to the lower index.
pub fn rank_active(stats: &LatentStats, criterion: Criterion) -> Result<Vec<usize>, AnalysisError> {
    let key = match criterion {
        Criterion::Std => &stats.std,
        Criterion::Kl => stats.kl_per_variable.as_ref().ok_or(AnalysisError::MissingKl)?,
    };
    let mut order: Vec<usize> = (0..key.len()).collect();
    order.sort_by(|&a, &b| key[b].total_cmp(&key[a]).then(a.cmp(&b)));
    Ok(order)
}

/// `{ i : normalized_std[i] > threshold }`, ascending.
pub fn identify_active(stats: &LatentStats, threshold: f64) -> Result<Vec<usize>, AnalysisError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(AnalysisError::Threshold(threshold));
    }
    let active: Vec<usize> = (0..stats.latent_dim()).filter(|&i| stats.normalized_std[i] > threshold).collect();
    if active.is_empty() {
        log::warn!("every latent variable is constant; the latent space has collapsed");
    }
    Ok(active)
}

/// Decoded fields for one latent variable swept over a range.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeSweep<T> {
    pub index: usize,
    pub base: Vec<f64>,
    pub values: Vec<f64>,
    /// One `[c, h, w]` field per sweep value.
    pub fields: Vec<Tensor<T>>,
}

impl<T: Real> ModeSweep<T> {
    /// Largest pointwise difference between any two decoded fields.
    pub fn variation(&self) -> f64 {
        let Some(first) = self.fields.first() else { return 0.0 };
        let mut lo: Vec<f64> = first.data().iter().map(|v| v.as_f64()).collect();
        let mut hi = lo.clone();
        for f in &self.fields[1..] {
            for (i, v) in f.data().iter().enumerate() {
                let v = v.as_f64();
                lo[i] = lo[i].min(v);
                hi[i] = hi[i].max(v);
            }
        }
        lo.iter().zip(&hi).map(|(a, b)| b - a).fold(0.0, f64::max)
    }
}

/// Decodes `base` with component `index` replaced by each of `steps`
/// equidistant values in `[lo, hi]`.
pub fn generate_modes<T: Real>(
    model: &Model<T>,
    base: &[f64],
    index: usize,
    steps: usize,
    range: (f64, f64),
) -> Result<ModeSweep<T>, AnalysisError> {
    let m = model.latent_dim();
    if base.len() != m {
        return Err(AnalysisError::Length { expected: m, actual: base.len() });
    }
    if index >= m {
        return Err(AnalysisError::LatentIndex { index, latent_dim: m });
    }
    if steps < 2 {
        return Err(AnalysisError::Steps(steps));
    }
    let (lo, hi) = range;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(AnalysisError::Range { lo, hi });
    }
    let values: Vec<f64> = (0..steps).map(|s| lo + (hi - lo) * s as f64 / (steps - 1) as f64).collect();
    let mut z = Vec::with_capacity(steps * m);
    for &v in &values {
        z.extend(base.iter().enumerate().map(|(j, &b)| T::of(if j == index { v } else { b })));
    }
    let z = Tensor::new(&[steps, m], z).map_err(ModelError::from)?;
    let decoded = model.decode(&z)?;
    let fields = (0..steps)
        .map(|s| {
            let f = decoded.slice_outer(s, s + 1).map_err(ModelError::from)?;
            let shape = f.shape()[1..].to_vec();
            Ok(f.reshaped(&shape).map_err(ModelError::from)?)
        })
        .collect::<Result<Vec<_>, AnalysisError>>()?;
    Ok(ModeSweep { index, base: base.to_vec(), values, fields })
}

/// Values held fixed for the variables not being swept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModeBase {
    /// The code of a chosen snapshot.
    #[default]
    Snapshot,
    Zeros,
}

impl core::str::FromStr for ModeBase {
    type Err = alloc::string::String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "snapshot" => Ok(ModeBase::Snapshot),
            "zeros" => Ok(ModeBase::Zeros),
            other => Err(alloc::format!("unknown base policy '{other}'")),
        }
    }
}

pub fn mode_base(policy: ModeBase, reference: Option<&[f64]>, latent_dim: usize) -> Result<Vec<f64>, AnalysisError> {
    match policy {
        ModeBase::Zeros => Ok(vec![0.0; latent_dim]),
        ModeBase::Snapshot => {
            let r = reference.ok_or(AnalysisError::MissingReference)?;
            if r.len() != latent_dim {
                return Err(AnalysisError::Length { expected: latent_dim, actual: r.len() });
            }
            Ok(r.to_vec())
        }
    }
}

/// Zeroes the encoder output rows of `indices` and freezes them.
pub fn prune<T: Real>(model: &mut Model<T>, indices: &[usize]) -> Result<(), AnalysisError> {
    Ok(model.prune(indices)?)
}

/// When and how aggressively to prune during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub start_epoch: usize,
    pub threshold: f64,
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(AnalysisError::Threshold(self.threshold));
        }
        Ok(())
    }
}

/// Variables to prune after `epoch`: nothing before the start epoch, then
/// every inactive variable not already pruned. `stats` is only evaluated
/// once the hook is live.
pub fn prune_hook<E>(
    epoch: usize,
    schedule: &PruneSchedule,
    already: &BTreeSet<usize>,
    stats: impl FnOnce() -> Result<LatentStats, E>,
) -> Result<Vec<usize>, E>
where
    E: From<AnalysisError>,
{
    if epoch < schedule.start_epoch {
        return Ok(Vec::new());
    }
    let stats = stats()?;
    let active = identify_active(&stats, schedule.threshold)?;
    Ok((0..stats.latent_dim()).filter(|i| !active.contains(i) && !already.contains(i)).collect())
}

/// Replaces inactive latent components by fixed values before decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTransform {
    pub active: Vec<bool>,
    pub fill: Vec<f64>,
}

impl LatentTransform {
    pub fn is_identity(&self) -> bool {
        self.active.iter().all(|&a| a)
    }

    /// Applies the transform to a `[b, m]` code matrix in place.
    pub fn apply<T: Real>(&self, z: &mut Tensor<T>) {
        let m = self.active.len();
        for row in z.data_mut().chunks_exact_mut(m) {
            for j in (0..m).filter(|&j| !self.active[j]) {
                row[j] = T::of(self.fill[j]);
            }
        }
    }
}

/// Keeps `active` variables and sets the others to their dataset means.
pub fn post_hoc_deactivate(active: &[usize], stats: &LatentStats) -> Result<LatentTransform, AnalysisError> {
    let m = stats.latent_dim();
    let mut mask = vec![false; m];
    for &i in active {
        if i >= m {
            return Err(AnalysisError::LatentIndex { index: i, latent_dim: m });
        }
        mask[i] = true;
    }
    Ok(LatentTransform { active: mask, fill: stats.mean.clone() })
}

/// Deterministic reconstruction of `x` through `transform`.
pub fn reconstruct_with<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    transform: &LatentTransform,
) -> Result<Tensor<T>, AnalysisError> {
    let mut z = model.encode_mean(x, ENCODE_CHUNK)?;
    transform.apply(&mut z);
    Ok(model.decode(&z)?)
}
