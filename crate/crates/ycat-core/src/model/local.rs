//! Convolutional local encoder: a pruned 3D ResNet keeping stages 2 and 3.
//! The removed 7x7 first stage is replaced by a stem of two stride-2
//! 3x3x3 conv-norm-ReLU layers so stage 2 still sees a 4x-downsampled grid,
//! matching the published dimension law
//! `stage i -> (S/2^i)^3 voxels, base*2^(i-1) channels`.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::layers::{ConvNormRelu, ResBlock};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{Elem, Tensor};

const GROUP: ParamGroup = ParamGroup::LocalEncoder;

#[derive(Clone, Debug)]
pub struct LocalEncoder {
    stem1: ConvNormRelu,
    stem2: ConvNormRelu,
    /// Stages starting at stage 2; `stages[s]` operates at spatial /2^(s+2).
    stages: Vec<Vec<ResBlock>>,
}

impl LocalEncoder {
    pub fn new<E: Elem>(store: &mut ParamStore<E>, cfg: &ModelConfig) -> Self {
        Self::with_block_counts(store, cfg, &cfg.block_counts)
    }

    /// Build with explicit per-stage block counts (first entry = stage 2).
    /// More than two entries extend the encoder to stages 4, 5, ... — used
    /// by the mixing-position study.
    pub fn with_block_counts<E: Elem>(
        store: &mut ParamStore<E>,
        cfg: &ModelConfig,
        block_counts: &[usize],
    ) -> Self {
        let b = cfg.base_channels;
        let cin = cfg.local_in_channels();
        let stem1 = ConvNormRelu::new(store, "local.stem.down1", GROUP, cin, b, 2, false);
        let stem2 = ConvNormRelu::new(store, "local.stem.down2", GROUP, b, b, 2, false);
        let mut stages = Vec::new();
        let mut prev_ch = b;
        for (s, &count) in block_counts.iter().enumerate() {
            let stage_idx = s + 2;
            let ch = cfg.local_channels(stage_idx);
            // stage 2 keeps the stem's stride-4 grid; deeper stages halve
            let entry_stride = if stage_idx == 2 { 1 } else { 2 };
            let mut blocks = Vec::with_capacity(count);
            for blk in 0..count {
                let (ci, st) = if blk == 0 { (prev_ch, entry_stride) } else { (ch, 1) };
                blocks.push(ResBlock::new(
                    store,
                    &format!("local.stage{stage_idx}.block{blk}"),
                    GROUP,
                    ci,
                    ch,
                    st,
                    cfg.zero_init_residual,
                ));
            }
            stages.push(blocks);
            prev_ch = ch;
        }
        LocalEncoder {
            stem1,
            stem2,
            stages,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Forward pass; returns one feature map per retained stage, starting
    /// at stage 2.
    pub fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        x_l: Var,
    ) -> Vec<Var> {
        let mut h = self.stem1.forward(g, store, x_l);
        h = self.stem2.forward(g, store, h);
        let mut outs = Vec::with_capacity(self.stages.len());
        for blocks in &self.stages {
            for blk in blocks {
                h = blk.forward(g, store, h);
            }
            outs.push(h);
        }
        outs
    }
}

/// Channel preparation for the local branch: replicate C -> 3C, preserving
/// channel order ([a, b] -> [a, b, a, b, a, b]).
pub fn prepare_local_input<E: Elem>(image: &Tensor<E>) -> Tensor<E> {
    let shape = image.shape();
    assert_eq!(shape.len(), 4);
    let mut out = Vec::with_capacity(image.numel() * 3);
    for _ in 0..3 {
        out.extend_from_slice(image.data());
    }
    let mut new_shape = shape.to_vec();
    new_shape[0] *= 3;
    Tensor::from_vec(&new_shape, out)
}

/// Spatial-divisibility precondition for the local branch.
pub fn check_divisible_by_8(spatial: [usize; 3]) -> Result<()> {
    for (axis, &s) in spatial.iter().enumerate() {
        if s % 8 != 0 {
            return Err(Error::shape(
                "local encoder input",
                format!("axis {axis} divisible by 8"),
                format!("{s}"),
            ));
        }
    }
    Ok(())
}
