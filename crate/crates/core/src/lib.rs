//! Freespace detection primitives: a duplex RGB / surface-normal encoder whose
//! per-stage features are merged by a heterogeneous fusion block, a pruned
//! skip-connection decoder, and a BCE objective reweighted towards semantic
//! transitions and depth-inconsistent pixels.
//!
//! The crate is `no_std` (it needs `alloc`). Everything here is a pure
//! function of its inputs; file formats, the command line and the training
//! driver live in the `roadseg` companion crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
