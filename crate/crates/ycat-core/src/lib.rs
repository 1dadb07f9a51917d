//! Core library for a Y-shaped dual-encoder volumetric segmentation network:
//! a convolutional local branch and a ViT global branch whose feature maps
//! are fused by a cross-feature mixer and decoded to per-voxel class
//! probabilities. Includes the synthetic-phantom data pipeline, training and
//! evaluation engines, metrics with brute-force-verifiable definitions, and
//! the ablation harnesses.

pub mod autodiff;
pub mod data;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod error;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
