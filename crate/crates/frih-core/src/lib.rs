//! Fine-grained region-aware image harmonization.
//!
//! A composite image (foreground pasted onto a background) is harmonized in
//! two stages: a coarse encoder-decoder pass over the whole foreground,
//! then a per-region refinement where the foreground is first partitioned
//! into color-coherent submasks by density-peaks clustering and each
//! submask is refined by a shared lightweight cascaded module with a fusion
//! prediction head. Training, metrics, dataset tooling, and a binary
//! checkpoint format round out the toolkit.

pub mod augment;
pub mod check;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod submask;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Mask, Tensor};
