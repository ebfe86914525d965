//! Mini-batch training loop.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analysis::{encode_codes, latent_stats, prune_hook, AnalysisError, PruneSchedule, ENCODE_CHUNK};
use crate::data::Dataset;
use crate::disentangle::{correlation_metric, total_loss, DisentangleError, LossWeights};
use crate::models::{Model, ModelError};
use crate::nn::{Adam, LrSchedule, ScheduleError};
use crate::tensor::{Real, Tape, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub weights: LossWeights,
    /// Seeds shuffling and VAE noise; model initialization has its own seed.
    pub seed: u64,
    pub prune: Option<PruneSchedule>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive"));
        }
        self.schedule.validate(self.epochs)?;
        self.weights.validate()?;
        if let Some(p) = &self.prune {
            p.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainError {
    Config(&'static str),
    Schedule(ScheduleError),
    Loss(DisentangleError),
    Model(ModelError),
    Analysis(AnalysisError),
    /// Loss or validation error became NaN or infinite.
    NonFinite { epoch: usize },
    EmptySplit,
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Config(msg) => write!(f, "invalid training config: {msg}"),
            TrainError::Schedule(e) => write!(f, "{e}"),
            TrainError::Loss(e) => write!(f, "{e}"),
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Analysis(e) => write!(f, "{e}"),
            TrainError::NonFinite { epoch } => write!(f, "non-finite loss at epoch {epoch}"),
            TrainError::EmptySplit => f.write_str("training and validation splits must both be non-empty"),
        }
    }
}

impl core::error::Error for TrainError {}

macro_rules! from_err {
    ($($src:ty => $var:ident),*) => {$(
        impl From<$src> for TrainError {
            fn from(e: $src) -> Self {
                TrainError::$var(e)
            }
        }
    )*};
}

from_err!(ScheduleError => Schedule, DisentangleError => Loss, ModelError => Model, AnalysisError => Analysis);

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

impl TrainError {
    pub fn is_numeric(&self) -> bool {
        matches!(self, TrainError::NonFinite { .. })
    }
}

/// Per-epoch log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean total loss over the epoch's mini batches.
    pub train_loss: f64,
    /// Mean unweighted penalty over the epoch's mini batches.
    pub penalty: f64,
    /// Deterministic reconstruction MSE on the validation split.
    pub val_mse: f64,
    /// `|R₁₂|` (m = 2) or `det(R)` (m > 2) of validation codes; NaN if a
    /// variable is constant.
    pub val_correlation: f64,
    pub lr: f64,
    pub pruned: usize,
}

/// Trains `model` in place on the training split of `data`. `on_epoch` is
/// called after every epoch.
pub fn train<T: Real>(
    model: &mut Model<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &Model<T>),
) -> Result<Vec<EpochMetrics>, TrainError> {
    cfg.validate()?;
    if data.train_len() == 0 || data.validation_len() == 0 {
        return Err(TrainError::EmptySplit);
    }
    if cfg.weights.kind != crate::models::Variant::Plain && cfg.weights.kind != model.spec.variant {
        return Err(TrainError::Config("loss kind differs from the model variant"));
    }
    let train_x: Tensor<T> = data.train().cast();
    let val_x: Tensor<T> = data.validation().cast();
    let n = data.train_len();
    let m = model.latent_dim();
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut adam = Adam::<T>::new(&sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch)?;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut penalty_sum = 0.0;
        let mut batches = 0usize;
        let masks = model.frozen_masks();
        for chunk in order.chunks(cfg.batch_size) {
            // A single sample has no batch statistics.
            if chunk.len() < 2 && n >= 2 {
                continue;
            }
            let x = train_x.gather_outer(chunk)?;
            let mut tape = Tape::new();
            let p = model.bind(&mut tape);
            let xv = tape.constant(x);
            let eps = if model.is_variational() {
                let e: Vec<T> = (0..chunk.len() * m).map(|_| T::of(StandardNormal.sample(&mut rng))).collect();
                Some(tape.constant(Tensor::new(&[chunk.len(), m], e)?))
            } else {
                None
            };
            let out = model.forward_on(&mut tape, &p, xv, eps)?;
            let loss = total_loss(&mut tape, cfg.weights, xv, out.reconstruction, out.latent)?;
            let value = tape.value(loss.total).data()[0].as_f64();
            if !value.is_finite() {
                return Err(TrainError::NonFinite { epoch });
            }
            loss_sum += value;
            penalty_sum += loss.penalty.map_or(0.0, |v| tape.value(v).data()[0].as_f64());
            batches += 1;
            tape.backward(loss.total)?;

            let zeros: Vec<Vec<T>>;
            let grads: Vec<&[T]> = if p.vars.iter().all(|&v| tape.grad(v).is_some()) {
                p.vars.iter().map(|&v| tape.grad(v).expect("checked")).collect()
            } else {
                zeros = sizes.iter().map(|&s| vec![T::zero(); s]).collect();
                p.vars.iter().zip(&zeros).map(|(&v, z)| tape.grad(v).unwrap_or(z)).collect()
            };
            let frozen: Vec<Option<&[bool]>> = masks.iter().map(|mk| mk.as_deref()).collect();
            let mut params = model.params_mut();
            let mut slices: Vec<&mut [T]> = params.iter_mut().map(|t| t.data_mut()).collect();
            adam.step(&mut slices, &grads, &frozen, T::of(lr));
        }

        if let Some(schedule) = &cfg.prune {
            let already = model.pruned().clone();
            let newly = prune_hook::<TrainError>(epoch, schedule, &already, || Ok(latent_stats(model, &train_x)?))?;
            if !newly.is_empty() {
                log::info!("epoch {epoch}: pruning latent variables {newly:?}");
                model.prune(&newly)?;
            }
        }

        let val_mse = validation_mse(model, &val_x)?;
        if !val_mse.is_finite() {
            return Err(TrainError::NonFinite { epoch });
        }
        let codes = encode_codes(model, &val_x)?;
        let k = data.validation_len();
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            penalty: penalty_sum / batches.max(1) as f64,
            val_mse,
            val_correlation: correlation_metric(&codes, k, m).unwrap_or(f64::NAN),
            lr,
            pruned: model.pruned().len(),
        };
        on_epoch(&metrics, model);
        history.push(metrics);
    }
    Ok(history)
}

/// Deterministic reconstruction MSE over `x`.
pub fn validation_mse<T: Real>(model: &Model<T>, x: &Tensor<T>) -> Result<f64, TrainError> {
    let n = x.shape()[0];
    let mut sum = 0.0;
    for start in (0..n).step_by(ENCODE_CHUNK) {
        let xs = x.slice_outer(start, (start + ENCODE_CHUNK).min(n))?;
        let rec = model.reconstruct(&xs)?;
        sum += xs.data().iter().zip(rec.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>();
    }
    Ok(sum / x.len() as f64)
}
