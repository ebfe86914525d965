use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::nn::Activation;

/// Which latent-space regularization the model is trained with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain convolutional autoencoder, reconstruction loss only.
    Plain,
    /// Orthogonal autoencoder.
    Oae,
    /// Uncorrelated autoencoder.
    Uae,
    /// β-variational autoencoder with a Gaussian latent head.
    BetaVae,
}

impl Variant {
    pub fn is_variational(self) -> bool {
        self == Variant::BetaVae
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::Oae => "oae",
            Variant::Uae => "uae",
            Variant::BetaVae => "beta_vae",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl core::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain" => Ok(Variant::Plain),
            "oae" => Ok(Variant::Oae),
            "uae" => Ok(Variant::Uae),
            "beta_vae" | "vae" => Ok(Variant::BetaVae),
            other => Err(format!("unknown variant '{other}'")),
        }
    }
}

/// Named layer stacks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 300×88×2 periodic-flow stack with six stride-2 convolutions.
    PeriodicFull,
    /// The periodic stack on a 64×24×2 grid with a quarter of the channels.
    PeriodicSmall,
    /// 128×128×1 load-field stack with four convolutions.
    DitchingFull,
    /// The load-field stack on a 32×32×1 grid with a quarter of the channels.
    DitchingSmall,
    /// 8×8×2 input and two convolutions, for end-to-end gradient checks.
    Toy,
    /// Hand-assembled stack.
    Custom,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::PeriodicFull => "periodic_full",
            Preset::PeriodicSmall => "periodic_small",
            Preset::DitchingFull => "ditching_full",
            Preset::DitchingSmall => "ditching_small",
            Preset::Toy => "toy",
            Preset::Custom => "custom",
        }
    }
}

impl core::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "periodic_full" => Ok(Preset::PeriodicFull),
            "periodic_small" => Ok(Preset::PeriodicSmall),
            "ditching_full" => Ok(Preset::DitchingFull),
            "ditching_small" => Ok(Preset::DitchingSmall),
            "toy" => Ok(Preset::Toy),
            other => Err(format!("unknown preset '{other}'")),
        }
    }
}

/// A `channels × height × width` feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Stage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Stage {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Kind of a row in a [`ModelSpec::layer_shapes`] listing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Input,
    Conv2d { out_channels: usize },
    Flatten,
    Linear { outputs: usize },
    Unflatten,
    ConvTranspose2d { out_channels: usize },
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerKind::Input => f.write_str("Input"),
            LayerKind::Conv2d { out_channels } => write!(f, "Conv2d(out_channels={out_channels})"),
            LayerKind::Flatten => f.write_str("Flatten()"),
            LayerKind::Linear { outputs } => write!(f, "Linear({outputs})"),
            LayerKind::Unflatten => f.write_str("Unflatten"),
            LayerKind::ConvTranspose2d { out_channels } => write!(f, "ConvTranspose2d(out_channels={out_channels})"),
        }
    }
}

/// One row of a layer listing. Feature maps are reported as
/// `[height, width, channels]`, flat vectors as `[len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub kind: LayerKind,
    pub output: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpecError(pub String);

impl fmt::Display for SpecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid model spec: {}", self.0)
    }
}

impl core::error::Error for SpecError {}

/// Declarative encoder/decoder stack.
///
/// Only the encoder is listed; the decoder mirrors it. Decoder dense widths
/// are the encoder hidden widths in reverse followed by the flattened size of
/// the last encoder feature map, and its transposed convolutions retrace the
/// encoder stages back to the input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub latent_dim: usize,
    pub input: Stage,
    pub preset: Preset,
    pub activation: Activation,
    /// Output map of each stride-2 convolution.
    pub encoder_convs: Vec<Stage>,
    /// Hidden dense widths between flatten and the latent head.
    pub encoder_hidden: Vec<usize>,
}

impl ModelSpec {
    pub fn preset(preset: Preset, variant: Variant, latent_dim: usize) -> Self {
        let s = Stage::new;
        let (input, activation, encoder_convs, encoder_hidden) = match preset {
            Preset::PeriodicFull => (
                s(2, 300, 88),
                Activation::ELU,
                vec![s(8, 150, 44), s(16, 76, 22), s(32, 38, 12), s(64, 20, 6), s(128, 10, 4), s(256, 5, 2)],
                vec![256],
            ),
            Preset::PeriodicSmall => (
                s(2, 64, 24),
                Activation::ELU,
                vec![s(2, 32, 12), s(4, 16, 6), s(8, 8, 3), s(16, 4, 2), s(32, 2, 1), s(64, 1, 1)],
                vec![64],
            ),
            Preset::DitchingFull => (
                s(1, 128, 128),
                Activation::LEAKY_RELU,
                vec![s(8, 64, 64), s(16, 32, 32), s(32, 16, 16), s(64, 8, 8)],
                vec![],
            ),
            Preset::DitchingSmall => (
                s(1, 32, 32),
                Activation::LEAKY_RELU,
                vec![s(2, 16, 16), s(4, 8, 8), s(8, 4, 4), s(16, 2, 2)],
                vec![],
            ),
            Preset::Toy | Preset::Custom => (s(2, 8, 8), Activation::ELU, vec![s(2, 4, 4), s(4, 2, 2)], vec![]),
        };
        Self { variant, latent_dim, input, preset, activation, encoder_convs, encoder_hidden }
    }

    /// Last encoder feature map, which the decoder unflattens into.
    pub fn bottleneck(&self) -> Stage {
        self.encoder_convs.last().copied().unwrap_or(self.input)
    }

    pub fn flat_len(&self) -> usize {
        self.bottleneck().len()
    }

    pub fn decoder_hidden(&self) -> Vec<usize> {
        let mut widths: Vec<usize> = self.encoder_hidden.iter().rev().copied().collect();
        widths.push(self.flat_len());
        widths
    }

    /// Output map of each transposed convolution.
    pub fn decoder_convs(&self) -> Vec<Stage> {
        let k = self.encoder_convs.len();
        if k == 0 {
            return Vec::new();
        }
        let mut stages: Vec<Stage> = self.encoder_convs[..k - 1].iter().rev().copied().collect();
        stages.push(self.input);
        stages
    }

    /// Width of the encoder's final dense output: `m`, or `2m` split into
    /// mean and log-variance heads for the variational model.
    pub fn head_width(&self) -> usize {
        if self.variant.is_variational() {
            2 * self.latent_dim
        } else {
            self.latent_dim
        }
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.latent_dim == 0 {
            return Err(SpecError("latent dimension must be positive".into()));
        }
        if self.input.is_empty() {
            return Err(SpecError("input shape must be non-empty".into()));
        }
        if self.encoder_convs.iter().any(Stage::is_empty) || self.encoder_hidden.contains(&0) {
            return Err(SpecError("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Layer-by-layer listing of output shapes, encoder first.
    pub fn layer_shapes(&self) -> (Vec<LayerShape>, Vec<LayerShape>) {
        let map = |s: &Stage| vec![s.height, s.width, s.channels];
        let mut enc = vec![LayerShape { kind: LayerKind::Input, output: map(&self.input) }];
        for st in &self.encoder_convs {
            enc.push(LayerShape { kind: LayerKind::Conv2d { out_channels: st.channels }, output: map(st) });
        }
        enc.push(LayerShape { kind: LayerKind::Flatten, output: vec![self.flat_len()] });
        for &w in &self.encoder_hidden {
            enc.push(LayerShape { kind: LayerKind::Linear { outputs: w }, output: vec![w] });
        }
        enc.push(LayerShape { kind: LayerKind::Linear { outputs: self.latent_dim }, output: vec![self.latent_dim] });

        let mut dec = Vec::new();
        for w in self.decoder_hidden() {
            dec.push(LayerShape { kind: LayerKind::Linear { outputs: w }, output: vec![w] });
        }
        if !self.encoder_convs.is_empty() {
            dec.push(LayerShape { kind: LayerKind::Unflatten, output: map(&self.bottleneck()) });
        }
        for st in self.decoder_convs() {
            dec.push(LayerShape { kind: LayerKind::ConvTranspose2d { out_channels: st.channels }, output: map(&st) });
        }
        (enc, dec)
    }
}
