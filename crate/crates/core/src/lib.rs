//! Differentiable cell-based architecture search with single-edge relaxation.
//!
//! The engine is generic over the scalar type (`f32` for speed, `f64` for
//! tight numeric verification); concrete aliases live at the crate root.

pub mod candidates;
pub mod cell;
pub mod data;
pub mod derive;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{BnStats, ConvSpec, PoolKind, Tape, Tensor};

/// 32-bit tensors: the fast mode for desk-scale runs.
pub type Tensor32 = Tensor<f32>;
/// 64-bit tensors: the default for numeric verification.
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
