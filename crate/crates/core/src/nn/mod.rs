//! Layers, activations, the Adam optimizer and learning-rate schedules.

mod layers;
mod optim;
mod schedule;

pub use layers::{
    solve_conv_padding, solve_conv_transpose_padding, ConvLayer, ConvTransposeLayer, DenseLayer,
};
pub use optim::Adam;
pub use schedule::{LrSchedule, OneCycleSchedule, ScheduleError};

use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tape, TensorError, Var};

/// Pointwise nonlinearity between hidden layers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation {
    /// `x` for `x > 0`, `alpha·(eˣ−1)` otherwise.
    Elu { alpha: f64 },
    /// `x` for `x > 0`, `alpha·x` otherwise.
    LeakyRelu { alpha: f64 },
    Identity,
}

impl Activation {
    pub const ELU: Activation = Activation::Elu { alpha: 1.0 };
    pub const LEAKY_RELU: Activation = Activation::LeakyRelu { alpha: 0.01 };

    pub fn apply<T: Real>(self, tape: &mut Tape<T>, x: Var) -> Result<Var, TensorError> {
        match self {
            Activation::Elu { alpha } => tape.elu(x, T::of(alpha)),
            Activation::LeakyRelu { alpha } => tape.leaky_relu(x, T::of(alpha)),
            Activation::Identity => Ok(x),
        }
    }

    /// Scalar evaluation, mainly for tests and documentation.
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Elu { alpha } => {
                if x > 0.0 {
                    x
                } else {
                    alpha * num_traits::Float::exp_m1(x)
                }
            }
            Activation::LeakyRelu { alpha } => {
                if x > 0.0 {
                    x
                } else {
                    alpha * x
                }
            }
            Activation::Identity => x,
        }
    }
}
