//! Sparse-to-dense depth completion built from guided dynamic convolutions,
//! repetitive guidance with adaptive fusion, dense repetitive hourglass
//! branches and region-aware spatial propagation.
//!
//! Everything runs on a small reverse-mode tensor engine ([`tensor`]) in
//! 64-bit floats.

pub mod data;
pub mod error;
pub mod experiment;
pub mod guidance;
pub mod hourglass;
pub mod nn;
pub mod spn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Shape, Tensor, Var};
