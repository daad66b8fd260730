//! Omni-scale person re-identification networks on a small reverse-mode
//! autodiff engine.
//!
//! The crate is `no_std` (it needs `alloc`) and carries no IO. It provides
//!
//! * [`tape`]: tensors with reverse-mode differentiation (convolutions,
//!   pooling, batch and instance normalisation, losses),
//! * [`nn`]: the Lite 3x3 layer, the omni-scale residual block with its
//!   unified aggregation gate, the four instance-normalisation block variants,
//!   full-network assembly and analytical cost accounting,
//! * [`nas`]: Gumbel-Softmax architecture search over block variants,
//! * [`train`]: label-smoothed cross-entropy, SGD with momentum, learning-rate
//!   schedules and training loops,
//! * [`data`]: a seeded synthetic multi-camera identity dataset, augmentations
//!   and CMC / mAP retrieval evaluation.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod nas;
pub mod nn;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamGroup, ParamId, ParamStore, RunningStats, StatsId};
pub use tape::{Mode, Tape, Var};
pub use tensor::Tensor;
