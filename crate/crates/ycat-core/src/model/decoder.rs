//! Convolutional decoder: residual bottleneck, four x2 upsampling levels
//! with skip concatenation (mixed features at /8 and /4, the first global
//! stage at /2, and a shallow full-resolution embedding of the raw input),
//! then a 1x1x1 classifier and voxel-wise softmax.

use crate::autodiff::{Graph, Var};
use crate::model::config::ModelConfig;
use crate::model::layers::{Conv3d, ConvNormRelu, ResBlock, UpConv};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{Elem, Tensor};

const GROUP: ParamGroup = ParamGroup::Decoder;

#[derive(Clone, Debug)]
struct Level {
    up: UpConv,
    res: ResBlock,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    bottleneck: ResBlock,
    levels: Vec<Level>,
    input_embed: ConvNormRelu,
    classifier: Conv3d,
}

impl Decoder {
    pub fn new<E: Elem>(store: &mut ParamStore<E>, cfg: &ModelConfig) -> Self {
        let b = cfg.base_channels;
        let bottleneck_ch = cfg.global_channels(4); // 8b
        let dec = cfg.decoder_channels;
        // skip channels per level: F_mix33 (4b), F_mix22 (2b), F_G1 (b), input embed (dec[3])
        let skips = [4 * b, 2 * b, b, dec[3]];
        let bottleneck = ResBlock::new(
            store,
            "decoder.bottleneck",
            GROUP,
            bottleneck_ch,
            bottleneck_ch,
            1,
            cfg.zero_init_residual,
        );
        let mut levels = Vec::with_capacity(4);
        let mut prev = bottleneck_ch;
        for (l, (&cout, &skip)) in dec.iter().zip(&skips).enumerate() {
            let up = UpConv::new(store, &format!("decoder.level{l}.up"), GROUP, prev, cout);
            let res = ResBlock::new(
                store,
                &format!("decoder.level{l}.res"),
                GROUP,
                cout + skip,
                cout,
                1,
                cfg.zero_init_residual,
            );
            levels.push(Level { up, res });
            prev = cout;
        }
        let input_embed = ConvNormRelu::new(
            store,
            "decoder.input_embed",
            GROUP,
            cfg.in_channels,
            dec[3],
            1,
            false,
        );
        let classifier = Conv3d::new(store, "decoder.classifier", GROUP, dec[3], cfg.num_classes, 1, 1);
        Decoder {
            bottleneck,
            levels,
            input_embed,
            classifier,
        }
    }

    /// Decode to logits `[J, D, H, W]`. Skips are ordered deepest-first:
    /// `skip8` at /8, `skip4` at /4, `skip2` (F_G1) at /2; `raw_input` is the
    /// original image fed to the shallow residual-feature embedding.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<E: Elem>(
        &self,
        g: &mut Graph<E>,
        store: &ParamStore<E>,
        bottleneck_in: Var,
        skip8: Var,
        skip4: Var,
        skip2: Var,
        raw_input: Var,
        trace: &mut Vec<(String, Vec<usize>)>,
    ) -> Var {
        let mut h = self.bottleneck.forward(g, store, bottleneck_in);
        trace.push(("decoder.bottleneck".into(), g.shape_of(h).to_vec()));
        let skips = [Some(skip8), Some(skip4), Some(skip2), None];
        for (l, (level, skip)) in self.levels.iter().zip(skips).enumerate() {
            let up = level.up.forward(g, store, h);
            let cat = match skip {
                Some(s) => g.concat_channels(&[up, s]),
                None => {
                    let emb = self.input_embed.forward(g, store, raw_input);
                    trace.push(("decoder.input_embed".into(), g.shape_of(emb).to_vec()));
                    g.concat_channels(&[up, emb])
                }
            };
            h = level.res.forward(g, store, cat);
            trace.push((format!("decoder.level{l}"), g.shape_of(h).to_vec()));
        }
        let logits = self.classifier.forward(g, store, h);
        trace.push(("decoder.logits".into(), g.shape_of(logits).to_vec()));
        logits
    }
}

/// Argmax over the class axis; ties break toward the lowest class index.
pub fn predict_labels<E: Elem>(probs: &Tensor<E>) -> Vec<u8> {
    let j = probs.shape()[0];
    let n: usize = probs.shape()[1..].iter().product();
    let d = probs.data();
    let mut out = vec![0u8; n];
    for v in 0..n {
        let mut best = 0usize;
        let mut bestv = d[v];
        for cls in 1..j {
            let x = d[cls * n + v];
            if x > bestv {
                bestv = x;
                best = cls;
            }
        }
        out[v] = best as u8;
    }
    out
}
