//! Encoder/decoder stacks and the autoencoder forward passes.

mod model;
mod spec;

pub use model::{
    reparameterize, reparameterize_on, Bound, ForwardVars, LatentHead, LatentOut, LatentVars, Model, ModelError,
    LOG_VAR_CLAMP,
};
pub use spec::{LayerKind, LayerShape, ModelSpec, Preset, SpecError, Stage, Variant};
