//! Graph contrastive learning with model augmentation.
//!
//! Two views of a graph are encoded by the same weights under different
//! interleavings of propagation (`F`) and transformation (`sigma(ZW)`)
//! operators, then contrasted with InfoNCE. The crate also carries the
//! spectral tooling used to check the optimal-filter analysis, and the
//! downstream probe and clustering protocols.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod matrix;
pub mod optim;
pub mod rng;
pub mod spectral;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::{Matrix, Real};
