//! Reparameterizable inference engine for the RepNeXt block family.
//!
//! The crate builds multi-branch training-form blocks, fuses them into
//! single-branch inference forms by structural reparameterization, and
//! verifies the two forms agree numerically at desk scale. Everything runs on
//! a deterministic direct-convolution reference so equivalence claims are
//! about the algebra, not about a kernel library.

pub mod blocks;
pub mod error;
pub mod model;
pub mod ops;
pub mod reparam;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
