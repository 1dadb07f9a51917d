//! The dual-encoder segmentation network and its configuration.

pub mod cfmm;
pub mod config;
pub mod decoder;
pub mod global;
pub mod layers;
pub mod local;
pub mod net;

pub use cfmm::{Mixer, PairMixer};
pub use config::{presets, MixMethod, MixingConfig, ModelConfig, PyramidMode};
pub use decoder::{predict_labels, Decoder};
pub use global::GlobalEncoder;
pub use local::{prepare_local_input, LocalEncoder};
pub use net::{audit_shapes, expected_shapes, NetOutput, Network};
