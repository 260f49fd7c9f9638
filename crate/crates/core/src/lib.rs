//! Quality-resilient image classification with a mixture of
//! distortion-specialized experts.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distortions;
pub mod error;
pub mod eval;
pub mod experts;
pub mod mixture;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod tree;
mod training;

pub use error::{CheckpointError, Error, IdxError, Result};
pub use training::{TrainConfig, TrainHistory};
