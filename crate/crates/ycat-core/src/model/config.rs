//! Full architectural description plus the pyramid validator.
//!
//! Shape laws (S = input spatial size per axis):
//!   local stage i:  S/2^i voxels per axis, base*2^(i-1) channels, i in {2,3}
//!   global tap j:   S/2^j voxels per axis, base*2^(j-1) channels, j in 1..=4
//!
//! The ViT token grid has S/P voxels per axis, so tap j needs a scale factor
//! of 2^(log2 P - j) to land on the pyramid. With P = 16 that is a pure
//! chain of (4-j) x2 transposed-conv upsamplings ("strict" mode); other
//! power-of-two patch sizes use stride-2 conv downsampling for the negative
//! exponents ("relaxed" mode, the documented desk-scale escape hatch).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMethod {
    Addition,
    Averaging,
    Concatenation,
    Hadamard,
    SelfAttention,
}

impl MixMethod {
    pub const ALL: [MixMethod; 5] = [
        MixMethod::Addition,
        MixMethod::Averaging,
        MixMethod::Concatenation,
        MixMethod::Hadamard,
        MixMethod::SelfAttention,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            MixMethod::Addition => "addition",
            MixMethod::Averaging => "averaging",
            MixMethod::Concatenation => "concatenation",
            MixMethod::Hadamard => "hadamard",
            MixMethod::SelfAttention => "self_attention",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixingConfig {
    pub method: MixMethod,
    /// (local_stage, global_stage) pairs; shapes must match exactly.
    pub pairs: Vec<[usize; 2]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PyramidMode {
    /// Patch size must be 16: the projection to the pyramid is a pure
    /// chain of x2 upsamplings.
    Strict,
    /// Any power-of-two patch size; taps below the grid resolution use
    /// stride-2 convolutions instead.
    Relaxed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub version: u32,
    pub input_size: [usize; 3],
    pub in_channels: usize,
    pub num_classes: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub tap_layers: [usize; 4],
    pub block_counts: [usize; 2],
    pub base_channels: usize,
    pub mixing: MixingConfig,
    pub decoder_channels: [usize; 4],
    pub pyramid_mode: PyramidMode,
    /// Zero the last norm scale of every residual branch at init so blocks
    /// start as identities (used by structural tests).
    #[serde(default)]
    pub zero_init_residual: bool,
}

impl ModelConfig {
    /// Channels of local-encoder stage i (i >= 2).
    pub fn local_channels(&self, stage: usize) -> usize {
        self.base_channels * (1 << (stage - 1))
    }

    /// Channels of global tap j (j in 1..=4).
    pub fn global_channels(&self, tap: usize) -> usize {
        self.base_channels * (1 << (tap - 1))
    }

    /// Spatial shape at pyramid level l (size / 2^l).
    pub fn level_shape(&self, level: usize) -> [usize; 3] {
        [
            self.input_size[0] >> level,
            self.input_size[1] >> level,
            self.input_size[2] >> level,
        ]
    }

    /// ViT token grid (size / P).
    pub fn token_grid(&self) -> [usize; 3] {
        [
            self.input_size[0] / self.patch_size,
            self.input_size[1] / self.patch_size,
            self.input_size[2] / self.patch_size,
        ]
    }

    pub fn seq_len(&self) -> usize {
        let g = self.token_grid();
        g[0] * g[1] * g[2]
    }

    /// Signed number of x2 scalings from the token grid to tap j's level:
    /// positive = upsample, negative = downsample.
    pub fn tap_scale_exp(&self, tap: usize) -> i32 {
        (self.patch_size.trailing_zeros() as i32) - tap as i32
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::config("version", "must be 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be >= 2"));
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels", "must be >= 1"));
        }
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(Error::config("base_channels", "must be even and >= 2"));
        }
        if !self.patch_size.is_power_of_two() || self.patch_size < 2 {
            return Err(Error::config(
                "patch_size",
                "must be a power of two >= 2",
            ));
        }
        if self.pyramid_mode == PyramidMode::Strict && self.patch_size != 16 {
            return Err(Error::config(
                "patch_size",
                format!(
                    "strict pyramid mode requires patch_size 16 (token grid = size/16); got {} — use relaxed mode for other patch sizes",
                    self.patch_size
                ),
            ));
        }
        for (axis, &s) in self.input_size.iter().enumerate() {
            if s % 16 != 0 {
                return Err(Error::config(
                    "input_size",
                    format!("axis {axis} ({s}) must be divisible by 16 for the 4-level pyramid"),
                ));
            }
            if s % self.patch_size != 0 {
                return Err(Error::config(
                    "input_size",
                    format!(
                        "axis {axis} ({s}) must be divisible by patch_size {}",
                        self.patch_size
                    ),
                ));
            }
        }
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config(
                "embed_dim",
                format!("must be divisible by heads ({})", self.heads),
            ));
        }
        if self.depth == 0 {
            return Err(Error::config("depth", "must be >= 1"));
        }
        let mut prev = 0usize;
        for &t in &self.tap_layers {
            if t <= prev {
                return Err(Error::config(
                    "tap_layers",
                    "must be strictly increasing and >= 1",
                ));
            }
            prev = t;
        }
        if self.tap_layers[3] > self.depth {
            return Err(Error::config(
                "tap_layers",
                format!("taps exceed depth {}", self.depth),
            ));
        }
        if self.block_counts.iter().any(|&b| b == 0) {
            return Err(Error::config("block_counts", "entries must be >= 1"));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::config("mlp_ratio", "must be > 0"));
        }
        if self.mixing.pairs.is_empty() {
            return Err(Error::config("mixing.pairs", "must be non-empty"));
        }
        for &[li, gj] in &self.mixing.pairs {
            if !(2..=3).contains(&li) || !(2..=3).contains(&gj) {
                return Err(Error::config(
                    "mixing.pairs",
                    format!("stage pair ({li}, {gj}) outside the decodable range {{2, 3}}"),
                ));
            }
            let ls = self.level_shape(li);
            let gs = self.level_shape(gj);
            if ls != gs {
                return Err(Error::PairShapeMismatch {
                    local_stage: li,
                    global_stage: gj,
                    local_shape: ls,
                    global_shape: gs,
                });
            }
            if self.mixing.method == MixMethod::SelfAttention {
                let vox = ls[0] * ls[1] * ls[2];
                if vox > 32 * 32 * 32 {
                    return Err(Error::config(
                        "mixing.method",
                        format!(
                            "self_attention over {vox} voxels exceeds the 32^3 token guard"
                        ),
                    ));
                }
            }
        }
        let expected = [
            self.base_channels * 4,
            self.base_channels * 2,
            self.base_channels,
            self.base_channels / 2,
        ];
        if self.decoder_channels != expected {
            return Err(Error::config(
                "decoder_channels",
                format!(
                    "must follow the halving plan {expected:?} for base_channels {}",
                    self.base_channels
                ),
            ));
        }
        Ok(())
    }

    /// Prepared-input channel count for the local branch (C -> 3C).
    pub fn local_in_channels(&self) -> usize {
        3 * self.in_channels
    }
}

pub mod presets {
    use super::*;

    /// Published configuration: 96^3 input, P=16, K=768, depth 12,
    /// taps {3,6,9,12}, local blocks [4,16], 9 classes.
    pub fn paper_96() -> ModelConfig {
        ModelConfig {
            version: 1,
            input_size: [96, 96, 96],
            in_channels: 1,
            num_classes: 9,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4.0,
            tap_layers: [3, 6, 9, 12],
            block_counts: [4, 16],
            base_channels: 32,
            mixing: MixingConfig {
                method: MixMethod::Addition,
                pairs: vec![[2, 2], [3, 3]],
            },
            decoder_channels: [128, 64, 32, 16],
            pyramid_mode: PyramidMode::Strict,
            zero_init_residual: false,
        }
    }

    /// Desk-scale preset: trains end-to-end on one CPU core.
    pub fn desk_64() -> ModelConfig {
        ModelConfig {
            version: 1,
            input_size: [64, 64, 64],
            in_channels: 1,
            num_classes: 4,
            patch_size: 8,
            embed_dim: 96,
            depth: 6,
            heads: 3,
            mlp_ratio: 4.0,
            tap_layers: [1, 2, 4, 6],
            block_counts: [2, 4],
            base_channels: 32,
            mixing: MixingConfig {
                method: MixMethod::Addition,
                pairs: vec![[2, 2], [3, 3]],
            },
            decoder_channels: [128, 64, 32, 16],
            pyramid_mode: PyramidMode::Relaxed,
            zero_init_residual: false,
        }
    }

    /// Minimal configuration for double-precision gradient checking.
    /// Concatenation mixing so the mixer owns trainable parameters.
    pub fn tiny_16() -> ModelConfig {
        ModelConfig {
            version: 1,
            input_size: [16, 16, 16],
            in_channels: 1,
            num_classes: 3,
            patch_size: 4,
            embed_dim: 24,
            depth: 4,
            heads: 3,
            mlp_ratio: 2.0,
            tap_layers: [1, 2, 3, 4],
            block_counts: [1, 1],
            base_channels: 8,
            mixing: MixingConfig {
                method: MixMethod::Concatenation,
                pairs: vec![[2, 2], [3, 3]],
            },
            decoder_channels: [32, 16, 8, 4],
            pyramid_mode: PyramidMode::Relaxed,
            zero_init_residual: false,
        }
    }
}
