//! Snapshot datasets: synthesis, normalization and chronological splits.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub enum DataError {
    InvalidParams(String),
    Split(String),
    /// Standardization or min-max scaling of a channel with no spread.
    ZeroSpread { channel: usize },
    Tensor(TensorError),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::InvalidParams(msg) => write!(f, "invalid synthesis parameters: {msg}"),
            DataError::Split(msg) => write!(f, "invalid split: {msg}"),
            DataError::ZeroSpread { channel } => write!(f, "channel {channel} is constant on the training split"),
            DataError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for DataError {}

impl From<TensorError> for DataError {
    fn from(e: TensorError) -> Self {
        DataError::Tensor(e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormPolicy {
    /// Per-channel zero mean and unit population std.
    #[default]
    Standardize,
    /// Per-channel map of `[min, max]` onto `[0, 1]`.
    MinMax,
    None,
}

impl core::str::FromStr for NormPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standardize" => Ok(NormPolicy::Standardize),
            "minmax" | "min_max" => Ok(NormPolicy::MinMax),
            "none" => Ok(NormPolicy::None),
            other => Err(format!("unknown normalization '{other}'")),
        }
    }
}

/// Stored values are `(raw − shift[c]) / scale[c]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub policy: NormPolicy,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl NormalizationRecord {
    pub fn identity(channels: usize) -> Self {
        Self { policy: NormPolicy::None, shift: vec![0.0; channels], scale: vec![1.0; channels] }
    }

    pub fn is_identity(&self) -> bool {
        self.shift.iter().all(|&s| s == 0.0) && self.scale.iter().all(|&s| s == 1.0)
    }
}

/// Ordered snapshots `[T, c, h, w]`; the first `split` are for training.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub snapshots: Tensor<f32>,
    pub channel_names: Vec<String>,
    pub normalization: NormalizationRecord,
    pub split: usize,
}

impl Dataset {
    /// Raw (un-normalized) dataset with every snapshot in the training split.
    pub fn new(snapshots: Tensor<f32>, channel_names: Vec<String>) -> Result<Self, DataError> {
        if snapshots.rank() != 4 {
            return Err(DataError::InvalidParams(format!("snapshots must be [T, c, h, w], got {:?}", snapshots.shape())));
        }
        let c = snapshots.shape()[1];
        if channel_names.len() != c {
            return Err(DataError::InvalidParams(format!("{} channel names for {c} channels", channel_names.len())));
        }
        let split = snapshots.shape()[0];
        Ok(Self { snapshots, channel_names, normalization: NormalizationRecord::identity(c), split })
    }

    pub fn len(&self) -> usize {
        self.snapshots.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.snapshots.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.snapshots.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.snapshots.shape()[3]
    }

    pub fn frame_len(&self) -> usize {
        self.channels() * self.height() * self.width()
    }

    pub fn train(&self) -> Tensor<f32> {
        self.snapshots.slice_outer(0, self.split).expect("split within range")
    }

    pub fn validation(&self) -> Tensor<f32> {
        self.snapshots.slice_outer(self.split, self.len()).expect("split within range")
    }

    pub fn train_len(&self) -> usize {
        self.split
    }

    pub fn validation_len(&self) -> usize {
        self.len() - self.split
    }

    /// Chronological split at `round(fraction·T)`. Both parts must be
    /// non-empty.
    pub fn split(&self, train_fraction: f64) -> Result<Dataset, DataError> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(DataError::Split(format!("fraction {train_fraction} outside (0, 1)")));
        }
        let t = self.len();
        let split = (train_fraction * t as f64).round() as usize;
        if split == 0 {
            return Err(DataError::Split("empty training split".into()));
        }
        if split >= t {
            return Err(DataError::Split("empty validation split".into()));
        }
        Ok(Dataset { split, ..self.clone() })
    }

    /// Re-normalizes from raw values with statistics of the training split.
    pub fn normalize(&self, policy: NormPolicy) -> Result<Dataset, DataError> {
        let raw = self.denormalize();
        let c = raw.channels();
        if policy != NormPolicy::None && raw.split == 0 {
            return Err(DataError::Split("normalization needs a non-empty training split".into()));
        }
        let plane = raw.height() * raw.width();
        let train = &raw.snapshots.data()[..raw.split * c * plane];
        let channel_values = |ch: usize| {
            train.chunks_exact(plane).enumerate().filter(move |(i, _)| i % c == ch).flat_map(|(_, p)| p.iter())
        };
        let mut shift = vec![0.0; c];
        let mut scale = vec![1.0; c];
        for ch in 0..c {
            match policy {
                NormPolicy::None => {}
                NormPolicy::Standardize => {
                    let n = (raw.split * plane) as f64;
                    let mean = channel_values(ch).map(|&v| v as f64).sum::<f64>() / n;
                    let var = channel_values(ch).map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
                    if !(var.sqrt() > 0.0) {
                        return Err(DataError::ZeroSpread { channel: ch });
                    }
                    shift[ch] = mean;
                    scale[ch] = var.sqrt();
                }
                NormPolicy::MinMax => {
                    let (lo, hi) = channel_values(ch)
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
                    if !(hi > lo) {
                        return Err(DataError::ZeroSpread { channel: ch });
                    }
                    shift[ch] = lo;
                    scale[ch] = hi - lo;
                }
            }
        }
        let record = NormalizationRecord { policy, shift, scale };
        let mut out = raw;
        apply_channelwise(&mut out.snapshots, |ch, v| (v - record.shift[ch]) / record.scale[ch]);
        out.normalization = record;
        Ok(out)
    }

    /// The dataset in raw units.
    pub fn denormalize(&self) -> Dataset {
        let mut out = self.clone();
        if !self.normalization.is_identity() {
            out.snapshots = self.denormalize_fields(&self.snapshots);
        }
        out.normalization = NormalizationRecord::identity(self.channels());
        out
    }

    /// Maps normalized `[n, c, h, w]` fields (e.g. decoder output) to raw units.
    pub fn denormalize_fields(&self, fields: &Tensor<f32>) -> Tensor<f32> {
        let mut out = fields.clone();
        let rec = &self.normalization;
        apply_channelwise(&mut out, |ch, v| v * rec.scale[ch] + rec.shift[ch]);
        out
    }
}

fn apply_channelwise(t: &mut Tensor<f32>, f: impl Fn(usize, f64) -> f64) {
    let shape = t.shape().to_vec();
    let (c, plane) = (shape[1], shape[2] * shape[3]);
    for (i, p) in t.data_mut().chunks_exact_mut(plane).enumerate() {
        let ch = i % c;
        p.iter_mut().for_each(|v| *v = f(ch, *v as f64) as f32);
    }
}

/// Travelling-wave stand-in for a periodic wake:
///
/// `u = A(y)·cos(kx − 2πt/P) + U0(y)`, `v = B(y)·sin(kx − 2πt/P)`
///
/// with `x` along the height axis spanning one domain of `2π`, `y` along the
/// width axis in `[0, 1]`, Gaussian amplitude profiles centred at `y = ½` and
/// a wake-deficit mean profile `U0`. Every snapshot is a combination of the
/// same three fields, so the snapshot matrix has rank at most 3.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticFlowParams {
    pub height: usize,
    pub width: usize,
    pub period: usize,
    pub steps: usize,
    /// Wavelengths per domain along `x`.
    pub wavenumber: f64,
    pub u_amplitude: f64,
    pub v_amplitude: f64,
    /// Width of the Gaussian profiles in units of the `y` extent.
    pub profile_width: f64,
    /// Depth of the mean-flow deficit `U0(y) = 1 − d·exp(−((y−½)/δ)²)`.
    pub mean_deficit: f64,
    /// Seeds the initial phase.
    pub seed: u64,
}

impl Default for SyntheticFlowParams {
    fn default() -> Self {
        Self {
            height: 64,
            width: 24,
            period: 100,
            steps: 1000,
            wavenumber: 2.0,
            u_amplitude: 1.0,
            v_amplitude: 0.5,
            profile_width: 0.2,
            mean_deficit: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticFlowParams {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.height == 0 || self.width == 0 {
            return Err(DataError::InvalidParams(format!("grid {}x{} has a zero extent", self.height, self.width)));
        }
        if self.period < 4 {
            return Err(DataError::InvalidParams(format!("period {} is shorter than 4 steps", self.period)));
        }
        if self.steps < self.period {
            return Err(DataError::InvalidParams(format!("{} steps cover less than one period", self.steps)));
        }
        let finite = [self.wavenumber, self.u_amplitude, self.v_amplitude, self.mean_deficit];
        if finite.iter().any(|v| !v.is_finite()) || !(self.profile_width > 0.0) {
            return Err(DataError::InvalidParams("non-finite coefficient or non-positive profile width".into()));
        }
        Ok(())
    }
}

/// Generates `steps` snapshots of the two-channel (`u`, `v`) flow.
pub fn synthesize(params: &SyntheticFlowParams) -> Result<Dataset, DataError> {
    params.validate()?;
    let (h, w) = (params.height, params.width);
    let phase0 = ChaCha8Rng::seed_from_u64(params.seed).random_range(0.0..2.0 * PI);
    let ys: Vec<f64> = (0..w).map(|j| if w == 1 { 0.5 } else { j as f64 / (w - 1) as f64 }).collect();
    let profile: Vec<f64> = ys.iter().map(|y| (-((y - 0.5) / params.profile_width).powi(2)).exp()).collect();
    let a: Vec<f64> = profile.iter().map(|p| params.u_amplitude * p).collect();
    let b: Vec<f64> = profile.iter().map(|p| params.v_amplitude * p).collect();
    let u0: Vec<f64> = profile.iter().map(|p| 1.0 - params.mean_deficit * p).collect();

    let plane = h * w;
    let mut data = Vec::with_capacity(params.steps * 2 * plane);
    let mut frame = vec![0.0f32; 2 * plane];
    for t in 0..params.steps {
        // Reduce t modulo the period so consecutive periods are bit-identical.
        let omega_t = 2.0 * PI * (t % params.period) as f64 / params.period as f64 - phase0;
        for i in 0..h {
            let kx = params.wavenumber * 2.0 * PI * i as f64 / h as f64;
            let (s, c) = (kx - omega_t).sin_cos();
            for j in 0..w {
                frame[i * w + j] = (a[j] * c + u0[j]) as f32;
                frame[plane + i * w + j] = (b[j] * s) as f32;
            }
        }
        data.extend_from_slice(&frame);
    }
    let snapshots = Tensor::new(&[params.steps, 2, h, w], data)?;
    Dataset::new(snapshots, vec!["u".to_string(), "v".to_string()])
}
