//! Convolutional autoencoders with disentangled latent spaces.
//!
//! The crate carries everything needed to train and inspect orthogonal
//! (OAE), uncorrelated (UAE) and β-variational autoencoders on 2-D field
//! snapshots: a small reverse-mode autodiff [`tensor`] engine, the layers and
//! optimizer in [`nn`], the encoder/decoder stacks in [`models`], the loss
//! terms in [`disentangle`], the latent-space tooling in [`analysis`], the
//! synthetic periodic flow in [`data`] and the training loop in [`train`].
//!
//! The crate is `no_std` and only needs `alloc`. File formats and the command
//! line driver live in the `disrom` crate.
#![no_std]
// Whenever std is linked somewhere in the graph (unit tests, or a dependency
// built with its std feature) the inherent float methods shadow
// `num_traits::Float` and the imports look unused.
#![allow(unused_imports)]

extern crate alloc;

pub mod analysis;
pub mod data;
pub mod disentangle;
pub mod linalg;
pub mod models;
pub mod nn;
pub mod tensor;
pub mod train;

pub use tensor::{Real, Tape, Tensor, TensorError, Var};
