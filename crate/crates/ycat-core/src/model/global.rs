//! Attention-based global encoder: 3D patch embedding, a pre-norm ViT
//! trunk with intermediate taps, and per-tap projection back to spatial
//! feature maps on the decoder pyramid.
//!
//! Tap j targets spatial size S/2^j with base*2^(j-1) channels. From the
//! token grid (S/P) that is a signed chain of x2 scalings (see
//! `ModelConfig::tap_scale_exp`): transposed convs going up, stride-2 convs
//! going down, and a single 3x3x3 conv + norm when already at scale.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::layers::{ConvNormRelu, LayerNorm, Linear, UpConv};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::tensor::Elem;

const GROUP: ParamGroup = ParamGroup::GlobalEncoder;
const TOKEN_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
struct VitBlock {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
    dim: usize,
}

impl VitBlock {
    fn new<E: Elem>(store: &mut ParamStore<E>, name: &str, cfg: &ModelConfig) -> Self {
        let k = cfg.embed_dim;
        let hidden = (k as f64 * cfg.mlp_ratio).round() as usize;
        let zero = cfg.zero_init_residual;
        VitBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), GROUP, k),
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), GROUP, k, 3 * k, TOKEN_INIT_STD, false),
            proj: Linear::new(store, &format!("{name}.attn.out"), GROUP, k, k, TOKEN_INIT_STD, zero),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), GROUP, k),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), GROUP, k, hidden, TOKEN_INIT_STD, false),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), GROUP, hidden, k, TOKEN_INIT_STD, zero),
            heads: cfg.heads,
            dim: k,
        }
    }

    fn forward<E: Elem>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var) -> Var {
        let k = self.dim;
        let h = self.ln1.forward(g, store, x);
        let qkv = self.qkv.forward(g, store, h);
        let q = g.slice_cols(qkv, 0, k);
        let kk = g.slice_cols(qkv, k, k);
        let v = g.slice_cols(qkv, 2 * k, k);
        let attn = g.attention(q, kk, v, self.heads);
        let attn = self.proj.forward(g, store, attn);
        let x = g.add(x, attn);
        let h = self.ln2.forward(g, store, x);
        let h = self.fc1.forward(g, store, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, store, h);
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
enum ProjStage {
    Up { up: UpConv, cnr: ConvNormRelu },
    Same { cnr: ConvNormRelu },
    Down { cnr: ConvNormRelu },
}

#[derive(Clone, Debug)]
struct TapProjection {
    stages: Vec<ProjStage>,
}

impl TapProjection {
    fn new<E: Elem>(store: &mut ParamStore<E>, cfg: &ModelConfig, tap: usize) -> Self {
        let name = format!("global.proj.tap{tap}");
        let target = cfg.global_channels(tap);
        let exp = cfg.tap_scale_exp(tap);
        let mut stages = Vec::new();
        let mut cin = cfg.embed_dim;
        match exp.cmp(&0) {
            std::cmp::Ordering::Greater => {
                let total = exp as usize;
                for s in 0..total {
                    let cout = target << (total - 1 - s);
                    stages.push(ProjStage::Up {
                        up: UpConv::new(store, &format!("{name}.up{s}"), GROUP, cin, cout),
                        cnr: ConvNormRelu::new(
                            store,
                            &format!("{name}.refine{s}"),
                            GROUP,
                            cout,
                            cout,
                            1,
                            false,
                        ),
                    });
                    cin = cout;
                }
            }
            std::cmp::Ordering::Equal => {
                stages.push(ProjStage::Same {
                    cnr: ConvNormRelu::new(store, &format!("{name}.same"), GROUP, cin, target, 1, false),
                });
            }
            std::cmp::Ordering::Less => {
                let total = (-exp) as usize;
                for s in 0..total {
                    let cout = target >> (total - 1 - s);
                    stages.push(ProjStage::Down {
                        cnr: ConvNormRelu::new(
                            store,
                            &format!("{name}.down{s}"),
                            GROUP,
                            cin,
                            cout,
                            2,
                            false,
                        ),
                    });
                    cin = cout;
                }
            }
        }
        TapProjection { stages }
    }

    fn forward<E: Elem>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var) -> Var {
        let mut h = x;
        for stage in &self.stages {
            h = match stage {
                ProjStage::Up { up, cnr } => {
                    let u = up.forward(g, store, h);
                    cnr.forward(g, store, u)
                }
                ProjStage::Same { cnr } | ProjStage::Down { cnr } => cnr.forward(g, store, h),
            };
        }
        h
    }
}

#[derive(Clone, Debug)]
pub struct GlobalEncoder {
    patch: Linear,
    pos_emb: ParamId,
    blocks: Vec<VitBlock>,
    taps: [usize; 4],
    projections: Vec<TapProjection>,
    patch_size: usize,
    grid: [usize; 3],
    embed_dim: usize,
}

pub struct GlobalFeatures {
    /// Token tensors at each tap layer, `[N, K]`.
    pub taps: Vec<Var>,
    /// Spatial feature maps F_G1..F_G4.
    pub pyramid: Vec<Var>,
}

impl GlobalEncoder {
    pub fn new<E: Elem>(store: &mut ParamStore<E>, cfg: &ModelConfig) -> Self {
        let grid = cfg.token_grid();
        let n = grid[0] * grid[1] * grid[2];
        let feat = cfg.patch_size.pow(3) * cfg.in_channels;
        let patch = Linear::new(store, "global.patch_embed", GROUP, feat, cfg.embed_dim, TOKEN_INIT_STD, false);
        let pos_emb = store.register(
            "global.pos_emb",
            GROUP,
            &[n, cfg.embed_dim],
            Init::Normal { std: TOKEN_INIT_STD },
        );
        let blocks = (1..=cfg.depth)
            .map(|t| VitBlock::new(store, &format!("global.block{t}"), cfg))
            .collect();
        let projections = (1..=4).map(|j| TapProjection::new(store, cfg, j)).collect();
        GlobalEncoder {
            patch,
            pos_emb,
            blocks,
            taps: cfg.tap_layers,
            projections,
            patch_size: cfg.patch_size,
            grid,
            embed_dim: cfg.embed_dim,
        }
    }

    /// Patch embedding: non-overlapping P^3 patches, linear projection,
    /// plus the learned positional embedding.
    pub fn patch_embed<E: Elem>(&self, g: &mut Graph<E>, store: &ParamStore<E>, x: Var) -> Var {
        let tokens = g.patches_to_tokens(x, self.patch_size);
        let tokens = self.patch.forward(g, store, tokens);
        let pos = g.param(store, self.pos_emb);
        g.add(tokens, pos)
    }

    /// Patch embedding without positional information (equivariance tests).
    pub fn patch_embed_no_pos<E: Elem>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        x: Var,
    ) -> Var {
        let tokens = g.patches_to_tokens(x, self.patch_size);
        self.patch.forward(g, store, tokens)
    }

    /// Transformer trunk; returns token tensors after each tap layer.
    pub fn trunk<E: Elem>(&self, g: &mut Graph<E>, store: &ParamStore<E>, tokens: Var) -> Vec<Var> {
        let mut h = tokens;
        let mut taps = Vec::with_capacity(4);
        for (idx, block) in self.blocks.iter().enumerate() {
            h = block.forward(g, store, h);
            if self.taps.contains(&(idx + 1)) {
                taps.push(h);
            }
        }
        taps
    }

    /// Project tap `j` (1-indexed) from tokens to its spatial feature map.
    pub fn project_to_spatial<E: Elem>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        tap_tokens: Var,
        j: usize,
    ) -> Var {
        let vol = g.tokens_to_volume(tap_tokens, self.grid);
        self.projections[j - 1].forward(g, store, vol)
    }

    pub fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        x: Var,
    ) -> GlobalFeatures {
        let tokens = self.patch_embed(g, store, x);
        let taps = self.trunk(g, store, tokens);
        let pyramid = taps
            .iter()
            .enumerate()
            .map(|(i, &t)| self.project_to_spatial(g, store, t, i + 1))
            .collect();
        GlobalFeatures { taps, pyramid }
    }

    pub fn seq_len(&self) -> usize {
        self.grid[0] * self.grid[1] * self.grid[2]
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }
}

/// Spatial-divisibility precondition for patch embedding.
pub fn check_divisible_by_patch(spatial: [usize; 3], p: usize) -> Result<()> {
    for (axis, &s) in spatial.iter().enumerate() {
        if s % p != 0 {
            return Err(Error::shape(
                "patch embedding input",
                format!("axis {axis} divisible by patch size {p}"),
                format!("{s}"),
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::testutil::rand_tensor;
    use crate::model::config::presets;
    use crate::tensor::Tensor;

    #[test]
    fn patch_embed_grid_and_seq_len() {
        let cfg = presets::tiny_16();
        let mut store = ParamStore::<f32>::with_seed(1);
        let enc = GlobalEncoder::new(&mut store, &cfg);
        assert_eq!(enc.grid, [4, 4, 4]);
        assert_eq!(enc.seq_len(), 64);
        let mut g = Graph::new(false);
        let x = g.constant(Tensor::zeros(&[1, 16, 16, 16]));
        let t = enc.patch_embed(&mut g, &store, x);
        assert_eq!(g.shape_of(t), &[64, 24]);
    }

    #[test]
    fn taps_have_token_shape() {
        let cfg = presets::tiny_16();
        let mut store = ParamStore::<f32>::with_seed(2);
        let enc = GlobalEncoder::new(&mut store, &cfg);
        let mut g = Graph::new(false);
        let x = g.constant(Tensor::zeros(&[1, 16, 16, 16]));
        let tokens = enc.patch_embed(&mut g, &store, x);
        let taps = enc.trunk(&mut g, &store, tokens);
        assert_eq!(taps.len(), 4);
        for &t in &taps {
            assert_eq!(g.shape_of(t), &[64, 24]);
        }
    }

    #[test]
    fn identity_blocks_when_residuals_zeroed() {
        let mut cfg = presets::tiny_16();
        cfg.depth = 2;
        cfg.tap_layers = [1, 2, 3, 4]; // only trunk used here
        cfg.zero_init_residual = true;
        let mut store = ParamStore::<f64>::with_seed(3);
        let enc = GlobalEncoder::new(&mut store, &cfg);
        let mut g = Graph::new(false);
        let tok = rand_tensor(&[64, 24], 9);
        let t0 = g.constant(tok.clone());
        let mut h = t0;
        for blk in &enc.blocks[..2] {
            h = blk.forward(&mut g, &store, h);
        }
        for (a, b) in g.value(h).data().iter().zip(tok.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_equivariance_without_pos() {
        let cfg = presets::tiny_16();
        let mut store = ParamStore::<f64>::with_seed(5);
        let enc = GlobalEncoder::new(&mut store, &cfg);
        let n = 64;
        let tok = rand_tensor(&[n, 24], 10);
        // permutation: reverse
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut permuted = vec![0.0; n * 24];
        for (i, &p) in perm.iter().enumerate() {
            permuted[i * 24..(i + 1) * 24].copy_from_slice(&tok.data()[p * 24..(p + 1) * 24]);
        }
        let run = |t: Tensor<f64>| {
            let mut g = Graph::new(false);
            let tv = g.constant(t);
            let taps = enc.trunk(&mut g, &store, tv);
            g.value(taps[3]).data().to_vec()
        };
        let base = run(tok.clone());
        let shuf = run(Tensor::from_vec(&[n, 24], permuted));
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..24 {
                let a = shuf[i * 24 + c];
                let b = base[p * 24 + c];
                assert!((a - b).abs() < 1e-9, "token {i} ch {c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_input_zero_projection_gives_zero_tokens() {
        let mut cfg = presets::tiny_16();
        cfg.zero_init_residual = false;
        let mut store = ParamStore::<f32>::with_seed(6);
        let enc = GlobalEncoder::new(&mut store, &cfg);
        // zero the projection bias and positional embedding
        for name in ["global.patch_embed.bias", "global.pos_emb"] {
            let id = store.lookup(name).unwrap();
            for v in store.tensor_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        let mut g = Graph::new(false);
        let x = g.constant(Tensor::zeros(&[1, 16, 16, 16]));
        let t = enc.patch_embed(&mut g, &store, x);
        assert!(g.value(t).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pyramid_shapes_tiny() {
        let cfg = presets::tiny_16();
        let mut store = ParamStore::<f32>::with_seed(7);
        let enc = GlobalEncoder::new(&mut store, &cfg);
        let mut g = Graph::new(false);
        let x = g.constant(Tensor::zeros(&[1, 16, 16, 16]));
        let out = enc.forward(&mut g, &store, x);
        let shapes: Vec<Vec<usize>> = out
            .pyramid
            .iter()
            .map(|&v| g.shape_of(v).to_vec())
            .collect();
        assert_eq!(
            shapes,
            vec![
                vec![8, 8, 8, 8],
                vec![16, 4, 4, 4],
                vec![32, 2, 2, 2],
                vec![64, 1, 1, 1],
            ]
        );
    }
}
