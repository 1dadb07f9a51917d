//! Full Y-shaped network: both encoder branches, the cross-feature mixer,
//! and the decoder, assembled per ModelConfig. Forward passes record a
//! named shape trace used by the shape auditor and the CLI.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::cfmm::{Mixer, PairMixer};
use crate::model::config::ModelConfig;
use crate::model::decoder::Decoder;
use crate::model::global::{check_divisible_by_patch, GlobalEncoder};
use crate::model::local::{check_divisible_by_8, prepare_local_input, LocalEncoder};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{Elem, Tensor};

/// Pairing plan: the standard configured pairs, or the mixing-position
/// study where one (possibly deeper) local stage is bridged up to the
/// global stage-2 map by nearest-neighbor upsampling.
#[derive(Clone, Debug)]
enum MixPlan {
    Standard(Mixer),
    PositionStudy { local_stage: usize, pair: PairMixer },
}

pub struct Network<E: Elem> {
    pub cfg: ModelConfig,
    pub store: ParamStore<E>,
    local: LocalEncoder,
    global: GlobalEncoder,
    plan: MixPlan,
    decoder: Decoder,
}

pub struct NetOutput {
    pub logits: Var,
    pub probs: Var,
    pub trace: Vec<(String, Vec<usize>)>,
}

impl<E: Elem> Network<E> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::with_seed(seed);
        let local = LocalEncoder::new(&mut store, &cfg);
        let global = GlobalEncoder::new(&mut store, &cfg);
        let mixer = Mixer::new(&mut store, &cfg);
        let decoder = Decoder::new(&mut store, &cfg);
        Ok(Network {
            cfg,
            store,
            local,
            global,
            plan: MixPlan::Standard(mixer),
            decoder,
        })
    }

    /// Mixing-position variant: pair local stage `local_stage` (2..=5) with
    /// global stage 2. Stages 4 and 5 extend the encoder with one block
    /// each; sub-stage-2 maps are bridged to /4 by nearest-neighbor
    /// upsampling before mixing.
    pub fn new_position_study(cfg: ModelConfig, seed: u64, local_stage: usize) -> Result<Self> {
        cfg.validate()?;
        if !(2..=5).contains(&local_stage) {
            return Err(Error::config("local_stage", "must be in 2..=5"));
        }
        let div = 1usize << local_stage;
        if cfg.input_size.iter().any(|&s| s % div != 0) {
            return Err(Error::config(
                "local_stage",
                format!("input_size must be divisible by 2^{local_stage} to reach stage {local_stage}"),
            ));
        }
        let mut store = ParamStore::with_seed(seed);
        let mut counts: Vec<usize> = cfg.block_counts.to_vec();
        while counts.len() < local_stage - 1 {
            counts.push(1);
        }
        let local = LocalEncoder::with_block_counts(&mut store, &cfg, &counts);
        let global = GlobalEncoder::new(&mut store, &cfg);
        let pair = PairMixer::new(
            &mut store,
            cfg.mixing.method,
            local_stage,
            2,
            cfg.local_channels(local_stage),
            cfg.global_channels(2),
        );
        let decoder = Decoder::new(&mut store, &cfg);
        Ok(Network {
            cfg,
            store,
            local,
            global,
            plan: MixPlan::PositionStudy { local_stage, pair },
            decoder,
        })
    }

    pub fn count_parameters(&self) -> usize {
        self.store.total_scalars()
    }

    pub fn parameters_by_group(&self) -> BTreeMap<&'static str, usize> {
        let mut m = BTreeMap::new();
        for id in self.store.ids() {
            *m.entry(self.store.group(id).label()).or_insert(0) +=
                self.store.tensor(id).numel();
        }
        m
    }

    pub fn group_of(&self, id: crate::params::ParamId) -> ParamGroup {
        self.store.group(id)
    }

    /// Forward pass on a `[C, D, H, W]` image tensor at the configured
    /// input size. Gradients flow if `g` was built with them enabled.
    pub fn forward(&self, g: &mut Graph<E>, image: &Tensor<E>) -> Result<NetOutput> {
        let shape = image.shape();
        if shape.len() != 4 || shape[0] != self.cfg.in_channels {
            return Err(Error::shape(
                "network input",
                format!("[{}; D; H; W]", self.cfg.in_channels),
                format!("{shape:?}"),
            ));
        }
        let spatial = [shape[1], shape[2], shape[3]];
        if spatial != self.cfg.input_size {
            return Err(Error::shape(
                "network input",
                format!("spatial {:?}", self.cfg.input_size),
                format!("{spatial:?}"),
            ));
        }
        check_divisible_by_8(spatial)?;
        check_divisible_by_patch(spatial, self.cfg.patch_size)?;

        let mut trace: Vec<(String, Vec<usize>)> = Vec::new();
        let x_global = g.constant(image.clone());
        let x_local = g.constant(prepare_local_input(image));
        trace.push(("input".into(), image.shape().to_vec()));
        trace.push(("input.local_3c".into(), g.shape_of(x_local).to_vec()));

        let local_feats = self.local.forward(g, &self.store, x_local);
        let mut local_map = BTreeMap::new();
        for (i, &v) in local_feats.iter().enumerate() {
            let stage = i + 2;
            local_map.insert(stage, v);
            trace.push((format!("F_L{stage}"), g.shape_of(v).to_vec()));
        }

        let gf = self.global.forward(g, &self.store, x_global);
        let mut global_map = BTreeMap::new();
        for (i, &v) in gf.pyramid.iter().enumerate() {
            let stage = i + 1;
            global_map.insert(stage, v);
            trace.push((format!("F_G{stage}"), g.shape_of(v).to_vec()));
        }

        // decoder skips default to the unmixed global maps
        let mut skip8 = global_map[&3];
        let mut skip4 = global_map[&2];
        match &self.plan {
            MixPlan::Standard(mixer) => {
                let mixed = mixer.forward(g, &self.store, &local_map, &global_map)?;
                for (li, gj, v) in mixed {
                    trace.push((format!("F_mix{li}{gj}"), g.shape_of(v).to_vec()));
                    match gj {
                        2 => skip4 = v,
                        3 => skip8 = v,
                        _ => {}
                    }
                }
            }
            MixPlan::PositionStudy { local_stage, pair } => {
                let mut fl = local_map[local_stage];
                if *local_stage > 2 {
                    fl = g.upsample_nearest(fl, 1 << (local_stage - 2));
                }
                let mixed = pair.mix(g, &self.store, fl, global_map[&2])?;
                trace.push((format!("F_mix{local_stage}2"), g.shape_of(mixed).to_vec()));
                skip4 = mixed;
            }
        }

        let logits = self.decoder.forward(
            g,
            &self.store,
            global_map[&4],
            skip8,
            skip4,
            global_map[&1],
            x_global,
            &mut trace,
        );
        let probs = g.softmax_channel(logits);
        trace.push(("probabilities".into(), g.shape_of(probs).to_vec()));
        Ok(NetOutput {
            logits,
            probs,
            trace,
        })
    }
}

/// Expected shapes from the config's dimension laws, keyed like the trace.
pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for i in 2..=3 {
        let s = cfg.level_shape(i);
        out.push((
            format!("F_L{i}"),
            vec![cfg.local_channels(i), s[0], s[1], s[2]],
        ));
    }
    for j in 1..=4 {
        let s = cfg.level_shape(j);
        out.push((
            format!("F_G{j}"),
            vec![cfg.global_channels(j), s[0], s[1], s[2]],
        ));
    }
    for &[li, gj] in &cfg.mixing.pairs {
        let s = cfg.level_shape(gj);
        out.push((
            format!("F_mix{li}{gj}"),
            vec![cfg.global_channels(gj), s[0], s[1], s[2]],
        ));
    }
    let s = cfg.input_size;
    out.push((
        "probabilities".into(),
        vec![cfg.num_classes, s[0], s[1], s[2]],
    ));
    out
}

/// Run one forward pass and verify every law-governed entry of the trace.
pub fn audit_shapes<E: Elem>(net: &Network<E>) -> Result<Vec<(String, Vec<usize>)>> {
    let mut g = Graph::new(false);
    let image = Tensor::zeros(&[
        net.cfg.in_channels,
        net.cfg.input_size[0],
        net.cfg.input_size[1],
        net.cfg.input_size[2],
    ]);
    let out = net.forward(&mut g, &image)?;
    for (name, want) in expected_shapes(&net.cfg) {
        let got = out
            .trace
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, s)| s.clone())
            .ok_or_else(|| Error::shape(&name, format!("{want:?}"), "missing".to_string()))?;
        if got != want {
            return Err(Error::shape(&name, format!("{want:?}"), format!("{got:?}")));
        }
    }
    Ok(out.trace)
}
