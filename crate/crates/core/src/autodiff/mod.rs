//! Reverse-mode automatic differentiation over small dense matrices, plus
//! the MLP and Adam pieces built on top of it.
//!
//! Values on the tape are row-major matrices. A batch of network inputs is
//! one matrix with a row per sample, so a whole minibatch of flow
//! evaluations is a handful of tape nodes instead of one node per scalar.

mod adam;
mod matrix;
mod mlp;
mod params;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use matrix::Matrix;
pub use mlp::{forward, Activation, Init, Mlp};
pub use params::{ParamEntry, ParamSlot, ParamStore};
pub use tape::{logsumexp, Gradients, NodeId, Tape};
