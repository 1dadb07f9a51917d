//! Crate-wide error type. Variants are deliberately specific so callers
//! (and the CLI exit-code mapping) can tell validation failures apart
//! from runtime failures.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // ---- configuration / validation ----
    #[error("invalid config: field `{field}`: {constraint}")]
    Config { field: String, constraint: String },

    #[error("shape error on {what}: expected {expected}, got {got}")]
    Shape {
        what: String,
        expected: String,
        got: String,
    },

    #[error("mixing pair (local {local_stage}, global {global_stage}) has mismatched spatial shapes {local_shape:?} vs {global_shape:?}")]
    PairShapeMismatch {
        local_stage: usize,
        global_stage: usize,
        local_shape: [usize; 3],
        global_shape: [usize; 3],
    },

    // ---- phantom generation ----
    #[error("phantom grid of {grid} is too small (minimum {min})")]
    GridTooSmall { grid: usize, min: usize },

    #[error("could not place all shapes for class {class} after {attempts} attempts; grid too crowded")]
    PlacementFailed { class: usize, attempts: usize },

    // ---- volume i/o ----
    #[error("malformed volume header {path}: {detail}")]
    MalformedHeader { path: String, detail: String },

    #[error("payload byte length mismatch in {path}: header implies {expected} bytes, file has {got}")]
    ByteLengthMismatch {
        path: String,
        expected: usize,
        got: usize,
    },

    #[error("unsupported dtype `{dtype}` in {path}")]
    UnsupportedDtype { dtype: String, path: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    // ---- windows ----
    #[error("roi {roi:?} exceeds volume shape {volume:?}")]
    RoiTooLarge { roi: [usize; 3], volume: [usize; 3] },

    #[error("overlap {0} outside [0, 1)")]
    BadOverlap(f64),

    // ---- labels / loss ----
    #[error("label value {value} outside [0, {num_classes}) or non-integer")]
    LabelOutOfRange { value: f64, num_classes: usize },

    #[error("probabilities are not voxelwise simplex: max |sum-1| = {max_dev}")]
    NonSimplex { max_dev: f64 },

    // ---- training / checkpoints ----
    #[error("loss became non-finite at step {step} (lr {lr}, grad norm {grad_norm})")]
    NonFiniteLoss { step: usize, lr: f64, grad_norm: f64 },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("json error on {path}: {detail}")]
    Json { path: String, detail: String },
}

impl Error {
    pub fn config(field: &str, constraint: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            constraint: constraint.into(),
        }
    }

    pub fn shape(what: &str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape {
            what: what.to_string(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    /// True for errors that indicate bad user input / configuration rather
    /// than a failure at run time.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::Shape { .. }
                | Error::PairShapeMismatch { .. }
                | Error::GridTooSmall { .. }
                | Error::RoiTooLarge { .. }
                | Error::BadOverlap(_)
                | Error::LabelOutOfRange { .. }
        )
    }
}
