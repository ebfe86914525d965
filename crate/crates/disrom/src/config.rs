//! Run configuration (TOML).

use std::path::PathBuf;

use disrom_core::analysis::PruneSchedule;
use disrom_core::data::{NormPolicy, SyntheticFlowParams};
use disrom_core::disentangle::LossWeights;
use disrom_core::models::{ModelSpec, Preset, Variant};
use disrom_core::nn::{LrSchedule, OneCycleSchedule};
use disrom_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn bad<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune: Option<PruneSchedule>,
    #[serde(default)]
    pub data: DataConfig,
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: Preset,
    pub variant: Variant,
    pub latent_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// λ, ν or β; ignored by the plain model.
    #[serde(default)]
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    /// Write `checkpoint.ckpt` every this many epochs (0: only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { epochs: 300, batch_size: 64, seed: 0, schedule: ScheduleConfig::default(), checkpoint_every: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleConfig {
    Constant { lr: f64 },
    /// Peaks at `round(peak_fraction · epochs)`.
    OneCycle { start: f64, peak: f64, end: f64, peak_fraction: f64 },
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig::OneCycle { start: 1e-3, peak: 2e-3, end: 5e-5, peak_fraction: 0.2 }
    }
}

impl ScheduleConfig {
    pub fn resolve(&self, epochs: usize) -> Result<LrSchedule, ConfigError> {
        match *self {
            ScheduleConfig::Constant { lr } => {
                if !(lr > 0.0) {
                    return bad("learning rate must be positive");
                }
                Ok(LrSchedule::Constant(lr))
            }
            ScheduleConfig::OneCycle { start, peak, end, peak_fraction } => {
                if !(0.0..1.0).contains(&peak_fraction) {
                    return bad("peak_fraction must lie in [0, 1)");
                }
                let peak_epoch = ((peak_fraction * epochs as f64).round() as usize).min(epochs.saturating_sub(1));
                OneCycleSchedule::new(start, peak, end, peak_epoch, epochs)
                    .map(LrSchedule::OneCycle)
                    .map_err(|e| ConfigError(e.to_string()))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// A `DISROM1` file; when absent the synthetic flow is generated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synth: SyntheticFlowParams,
    pub train_fraction: f64,
    pub normalization: NormPolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { path: None, synth: SyntheticFlowParams::default(), train_fraction: 0.9, normalization: NormPolicy::default() }
    }
}

impl RunConfig {
    /// Synthetic periodic flow, small periodic preset, UAE with ν = 1e-2.
    pub fn example() -> Self {
        Self {
            model: ModelConfig { preset: Preset::PeriodicSmall, variant: Variant::Uae, latent_dim: 2 },
            loss: LossConfig { weight: 1e-2 },
            train: TrainSection::default(),
            prune: None,
            data: DataConfig::default(),
            output_dir: PathBuf::from("runs/example"),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec::preset(self.model.preset, self.model.variant, self.model.latent_dim)
    }

    pub fn loss_weights(&self) -> LossWeights {
        if self.model.variant == Variant::Plain {
            LossWeights::plain()
        } else {
            LossWeights { kind: self.model.variant, weight: self.loss.weight }
        }
    }

    /// Seed for shuffling and sampling, kept apart from the initialization
    /// stream.
    pub fn train_seed(&self) -> u64 {
        self.train.seed ^ 0x9E37_79B9_7F4A_7C15
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        Ok(TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            schedule: self.train.schedule.resolve(self.train.epochs)?,
            weights: self.loss_weights(),
            seed: self.train_seed(),
            prune: self.prune,
        })
    }

    /// Checks every field; returns warnings for settings that are legal but
    /// have no effect.
    pub fn validate(&self) -> Result<Vec<String>, ConfigError> {
        let mut warnings = Vec::new();
        if self.model.preset == Preset::Custom {
            return bad("the custom preset cannot be selected from a config file");
        }
        self.model_spec().validate().map_err(|e| ConfigError(e.to_string()))?;
        if self.train.epochs == 0 {
            return bad("train.epochs must be positive");
        }
        if self.train.batch_size < 2 {
            return bad("train.batch_size must be at least 2");
        }
        self.train_config()?.validate().map_err(|e| ConfigError(e.to_string()))?;
        if let Some(p) = &self.prune {
            if p.start_epoch >= self.train.epochs {
                warnings.push(format!(
                    "pruning starts at epoch {} but training stops after {} epochs; the hook will never fire",
                    p.start_epoch, self.train.epochs
                ));
            }
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return bad("data.train_fraction must lie in (0, 1)");
        }
        if self.data.path.is_none() {
            self.data.synth.validate().map_err(|e| ConfigError(e.to_string()))?;
            let input = self.model_spec().input;
            let s = &self.data.synth;
            if (input.channels, input.height, input.width) != (2, s.height, s.width) {
                return bad(format!(
                    "preset {} expects {}x{}x{} input, synthetic grid is 2x{}x{}",
                    self.model.preset.name(),
                    input.channels,
                    input.height,
                    input.width,
                    s.height,
                    s.width
                ));
            }
        }
        Ok(warnings)
    }
}
