//! Cross-feature mixer: pairs local and global feature maps of identical
//! spatial shape and mixes them. When channel counts differ the local map
//! is first sent through a learned 1x1x1 projection to the global map's
//! channel count, so the mixed output always carries the global channels
//! and the decoder stays method-agnostic.
//!
//! Five mixing methods are supported for the ablation study: element-wise
//! addition (the default), averaging, channel concatenation followed by a
//! restoring 1x1x1 conv, Hadamard product, and single-head cross-attention
//! over flattened voxels (local queries attending to global keys/values).

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::config::{MixMethod, ModelConfig};
use crate::model::layers::Conv3d;
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Elem;

const GROUP: ParamGroup = ParamGroup::Mixer;

/// Maximum voxel count per pair for the cross-attention method.
pub const SELF_ATTENTION_VOXEL_GUARD: usize = 32 * 32 * 32;

#[derive(Clone, Debug)]
pub struct PairMixer {
    pub local_stage: usize,
    pub global_stage: usize,
    method: MixMethod,
    /// 1x1x1 channel projection for the local map, present when counts differ.
    proj: Option<Conv3d>,
    /// Channel-restoring 1x1x1 conv after concatenation.
    restore: Option<Conv3d>,
}

impl PairMixer {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        method: MixMethod,
        local_stage: usize,
        global_stage: usize,
        local_ch: usize,
        global_ch: usize,
    ) -> Self {
        let name = format!("mixer.pair{local_stage}{global_stage}");
        let proj = (local_ch != global_ch).then(|| {
            Conv3d::new(store, &format!("{name}.proj"), GROUP, local_ch, global_ch, 1, 1)
        });
        let restore = (method == MixMethod::Concatenation).then(|| {
            Conv3d::new(
                store,
                &format!("{name}.restore"),
                GROUP,
                2 * global_ch,
                global_ch,
                1,
                1,
            )
        });
        PairMixer {
            local_stage,
            global_stage,
            method,
            proj,
            restore,
        }
    }

    /// Mix one (local, global) pair. Spatial shapes must already match.
    pub fn mix<E: Elem>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        fl: Var,
        fg: Var,
    ) -> Result<Var> {
        let ls = g.shape_of(fl).to_vec();
        let gs = g.shape_of(fg).to_vec();
        if ls[1..] != gs[1..] {
            return Err(Error::PairShapeMismatch {
                local_stage: self.local_stage,
                global_stage: self.global_stage,
                local_shape: [ls[1], ls[2], ls[3]],
                global_shape: [gs[1], gs[2], gs[3]],
            });
        }
        let fl = match &self.proj {
            Some(p) => p.forward(g, store, fl),
            None => fl,
        };
        let out = match self.method {
            MixMethod::Addition => g.add(fl, fg),
            MixMethod::Averaging => {
                let s = g.add(fl, fg);
                g.scale(s, 0.5)
            }
            MixMethod::Hadamard => g.mul(fl, fg),
            MixMethod::Concatenation => {
                let cat = g.concat_channels(&[fl, fg]);
                self.restore
                    .as_ref()
                    .expect("concatenation mixer has a restore conv")
                    .forward(g, store, cat)
            }
            MixMethod::SelfAttention => {
                let voxels = gs[1] * gs[2] * gs[3];
                if voxels > SELF_ATTENTION_VOXEL_GUARD {
                    return Err(Error::config(
                        "mixing.method",
                        format!("self_attention over {voxels} voxels exceeds the 32^3 guard"),
                    ));
                }
                let q = g.patches_to_tokens(fl, 1);
                let k = g.patches_to_tokens(fg, 1);
                let v = g.patches_to_tokens(fg, 1);
                let o = g.attention(q, k, v, 1);
                g.tokens_to_volume(o, [gs[1], gs[2], gs[3]])
            }
        };
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct Mixer {
    pairs: Vec<PairMixer>,
}

impl Mixer {
    pub fn new<E: Elem>(store: &mut ParamStore<E>, cfg: &ModelConfig) -> Self {
        let pairs = cfg
            .mixing
            .pairs
            .iter()
            .map(|&[li, gj]| {
                PairMixer::new(
                    store,
                    cfg.mixing.method,
                    li,
                    gj,
                    cfg.local_channels(li),
                    cfg.global_channels(gj),
                )
            })
            .collect();
        Mixer { pairs }
    }

    pub fn pairs(&self) -> &[PairMixer] {
        &self.pairs
    }

    /// Restrict configured pairs to those whose feature shapes match, in
    /// configured order; a configured pair with mismatched shapes is an
    /// error naming both shapes.
    pub fn select_pairs<E: Elem>(
        &self,
        g: &Graph<E>,
        local: &BTreeMap<usize, Var>,
        global: &BTreeMap<usize, Var>,
    ) -> Result<Vec<(usize, usize)>> {
        let mut out = Vec::with_capacity(self.pairs.len());
        for p in &self.pairs {
            let fl = local.get(&p.local_stage).ok_or_else(|| {
                Error::config("mixing.pairs", format!("local stage {} not produced", p.local_stage))
            })?;
            let fg = global.get(&p.global_stage).ok_or_else(|| {
                Error::config(
                    "mixing.pairs",
                    format!("global stage {} not produced", p.global_stage),
                )
            })?;
            let ls = g.shape_of(*fl);
            let gs = g.shape_of(*fg);
            if ls[1..] != gs[1..] {
                return Err(Error::PairShapeMismatch {
                    local_stage: p.local_stage,
                    global_stage: p.global_stage,
                    local_shape: [ls[1], ls[2], ls[3]],
                    global_shape: [gs[1], gs[2], gs[3]],
                });
            }
            out.push((p.local_stage, p.global_stage));
        }
        Ok(out)
    }

    /// Mix every configured pair; returns (local_stage, global_stage, F_mix).
    pub fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        local: &BTreeMap<usize, Var>,
        global: &BTreeMap<usize, Var>,
    ) -> Result<Vec<(usize, usize, Var)>> {
        let selected = self.select_pairs(g, local, global)?;
        let mut out = Vec::with_capacity(selected.len());
        for (p, (li, gj)) in self.pairs.iter().zip(selected) {
            let mixed = p.mix(g, store, local[&li], global[&gj])?;
            out.push((li, gj, mixed));
        }
        Ok(out)
    }
}
