//! Sliding-window inference and dataset evaluation.
//!
//! Overlapping windows are blended by uniform averaging: probabilities are
//! accumulated per voxel in f64 together with coverage counts, then divided.
//! The f64 accumulator makes the blend independent of window enumeration
//! order at f32 output precision.

use std::collections::BTreeMap;

use crate::autodiff::Graph;
use crate::data::normalize::normalize_intensity;
use crate::data::volume::Volume;
use crate::data::windows::plan_windows;
use crate::error::Result;
use crate::metrics::{evaluate_labels, ClassMetrics, MetricValue, MetricsReport, ReportContext};
use crate::model::{predict_labels, Network};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

/// Run `predict` over every window of `image` and blend the overlapping
/// probability maps. `predict` maps a `[C, rd, rh, rw]` tensor to
/// `[J, rd, rh, rw]` probabilities.
pub fn sliding_window_probs(
    predict: &mut dyn FnMut(&Tensor<f32>) -> Result<Tensor<f32>>,
    image: &Volume,
    roi: [usize; 3],
    overlap: f64,
    num_classes: usize,
) -> Result<Tensor<f32>> {
    let spatial = image.spatial();
    let plan = plan_windows(spatial, roi, overlap)?;
    let [d, h, w] = spatial;
    let n = d * h * w;
    let mut acc = vec![0.0f64; num_classes * n];
    let mut cov = vec![0u32; n];
    for off in &plan.offsets {
        let window = image.crop(*off, roi);
        let wt = Tensor::<f32>::from_vec(&window.shape, window.data);
        let probs = predict(&wt)?;
        debug_assert_eq!(probs.shape()[0], num_classes);
        let rn = roi[0] * roi[1] * roi[2];
        for cls in 0..num_classes {
            for z in 0..roi[0] {
                for y in 0..roi[1] {
                    let src = (cls * rn) + (z * roi[1] + y) * roi[2];
                    let dst = cls * n + ((off[0] + z) * h + off[1] + y) * w + off[2];
                    for x in 0..roi[2] {
                        acc[dst + x] += probs.data()[src + x] as f64;
                    }
                }
            }
        }
        for z in 0..roi[0] {
            for y in 0..roi[1] {
                let dst = ((off[0] + z) * h + off[1] + y) * w + off[2];
                for c in &mut cov[dst..dst + roi[2]] {
                    *c += 1;
                }
            }
        }
    }
    debug_assert!(cov.iter().all(|&c| c >= 1), "window plan left voxels uncovered");
    let mut out = vec![0.0f32; num_classes * n];
    for cls in 0..num_classes {
        for v in 0..n {
            out[cls * n + v] = (acc[cls * n + v] / cov[v] as f64) as f32;
        }
    }
    Ok(Tensor::from_vec(&[num_classes, d, h, w], out))
}

/// Network-backed window predictor (normalizing per the train config).
pub fn net_window_predictor<'a>(
    net: &'a Network<f32>,
) -> impl FnMut(&Tensor<f32>) -> Result<Tensor<f32>> + 'a {
    move |window: &Tensor<f32>| {
        let mut g = Graph::new(false);
        let out = net.forward(&mut g, window)?;
        Ok(g.value(out.probs).clone())
    }
}

/// Evaluate a model over (image, label) pairs; per-class metrics are
/// averaged across cases.
pub fn evaluate(
    net: &Network<f32>,
    samples: &[(Volume, Volume)],
    tcfg: &TrainConfig,
    context: ReportContext,
) -> Result<MetricsReport> {
    let num_classes = net.cfg.num_classes;
    let roi = net.cfg.input_size;
    let mut sums: BTreeMap<usize, (f64, f64, bool, f64, bool, f64, bool)> = BTreeMap::new();
    for (img, lbl) in samples {
        let (norm, _) = normalize_intensity(img, tcfg.normalize)?;
        let mut predictor = net_window_predictor(net);
        let probs = sliding_window_probs(&mut predictor, &norm, roi, tcfg.overlap, num_classes)?;
        let pred = predict_labels(&probs);
        let gt: Vec<u8> = lbl.data.iter().map(|&v| v as u8).collect();
        let per_class = evaluate_labels(&pred, &gt, lbl.spatial(), lbl.spacing, num_classes);
        for (cls, m) in per_class {
            let e = sums.entry(cls).or_insert((0.0, 0.0, true, 0.0, true, 0.0, true));
            e.0 += m.dice;
            e.1 += m.hd95.value;
            e.2 &= m.hd95.defined;
            e.3 += m.precision.value;
            e.4 &= m.precision.defined;
            e.5 += m.sensitivity.value;
            e.6 &= m.sensitivity.defined;
        }
    }
    let count = samples.len().max(1) as f64;
    let per_class: BTreeMap<usize, ClassMetrics> = sums
        .into_iter()
        .map(|(cls, (d, hv, hd, pv, pd, sv, sd))| {
            (
                cls,
                ClassMetrics {
                    dice: d / count,
                    hd95: MetricValue {
                        value: hv / count,
                        defined: hd,
                    },
                    precision: MetricValue {
                        value: pv / count,
                        defined: pd,
                    },
                    sensitivity: MetricValue {
                        value: sv / count,
                        defined: sd,
                    },
                },
            )
        })
        .collect();
    Ok(MetricsReport::from_class_metrics(per_class, context))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::volume::VolumeKind;

    fn image(side: usize) -> Volume {
        let data: Vec<f32> = crate::params::uniform_vec(3, "swin", side * side * side, 0.0, 1.0)
            .into_iter()
            .map(|x| x as f32)
            .collect();
        Volume {
            data,
            shape: [1, side, side, side],
            spacing: [1.0; 3],
            kind: VolumeKind::Image,
        }
    }

    /// Constant-output stub: class probabilities fixed per class.
    fn stub_probs(roi: [usize; 3]) -> Tensor<f32> {
        let n = roi[0] * roi[1] * roi[2];
        let mut data = vec![0.0f32; 3 * n];
        for v in 0..n {
            data[v] = 0.2;
            data[n + v] = 0.5;
            data[2 * n + v] = 0.3;
        }
        Tensor::from_vec(&[3, roi[0], roi[1], roi[2]], data)
    }

    #[test]
    fn constant_stub_stitching_matches_direct() {
        let img = image(48);
        let roi = [32, 32, 32];
        let mut predict = |w: &Tensor<f32>| Ok(stub_probs([w.shape()[1], w.shape()[2], w.shape()[3]]));
        for overlap in [0.0, 0.25, 0.5] {
            let stitched = sliding_window_probs(&mut predict, &img, roi, overlap, 3).unwrap();
            let direct = stub_probs([48, 48, 48]);
            for (a, b) in stitched.data().iter().zip(direct.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_window_blending_is_identity() {
        let img = image(32);
        let mut calls = 0usize;
        let mut predict = |w: &Tensor<f32>| {
            calls += 1;
            Ok(stub_probs([w.shape()[1], w.shape()[2], w.shape()[3]]))
        };
        let out = sliding_window_probs(&mut predict, &img, [32, 32, 32], 0.5, 3).unwrap();
        assert_eq!(calls, 1);
        assert_eq!(out.shape(), &[3, 32, 32, 32]);
    }

    #[test]
    fn blending_invariant_to_window_order() {
        // predictor output depends on window content, so overlaps blend
        // different values; compare normal vs reversed windower by running
        // the plan manually both ways
        let img = image(40);
        let roi = [32, 32, 32];
        let mut f = |w: &Tensor<f32>| {
            let mean: f32 = w.data().iter().sum::<f32>() / w.numel() as f32;
            let n = 32 * 32 * 32;
            let mut data = vec![0.0f32; 2 * n];
            for v in 0..n {
                let p = (0.3 + 0.4 * (w.data()[v] - mean).tanh()).clamp(0.01, 0.99);
                data[v] = p;
                data[n + v] = 1.0 - p;
            }
            Ok(Tensor::from_vec(&[2, 32, 32, 32], data))
        };
        let a = sliding_window_probs(&mut f, &img, roi, 0.5, 2).unwrap();
        // reversed: emulate by flipping the image, predicting, flipping back
        // is not equivalent; instead re-run and assert determinism plus
        // f64-accumulated symmetry under a shuffled plan
        let plan = plan_windows([40, 40, 40], roi, 0.5).unwrap();
        let mut offsets = plan.offsets.clone();
        offsets.reverse();
        let n = 40 * 40 * 40;
        let mut acc = vec![0.0f64; 2 * n];
        let mut cov = vec![0u32; n];
        for off in &offsets {
            let window = img.crop(*off, roi);
            let wt = Tensor::<f32>::from_vec(&window.shape, window.data);
            let probs = f(&wt).unwrap();
            let rn = 32 * 32 * 32;
            for cls in 0..2 {
                for z in 0..32 {
                    for y in 0..32 {
                        let src = cls * rn + (z * 32 + y) * 32;
                        let dst = cls * n + ((off[0] + z) * 40 + off[1] + y) * 40 + off[2];
                        for x in 0..32 {
                            acc[dst + x] += probs.data()[src + x] as f64;
                        }
                    }
                }
            }
            for z in 0..32 {
                for y in 0..32 {
                    let dst = ((off[0] + z) * 40 + off[1] + y) * 40 + off[2];
                    for c in &mut cov[dst..dst + 32] {
                        *c += 1;
                    }
                }
            }
        }
        for (i, (&s, &c)) in acc.iter().zip(cov.iter().cycle()).enumerate() {
            let blended = (s / c as f64) as f32;
            assert!((blended - a.data()[i]).abs() < 1e-6, "voxel {i}");
        }
    }

    #[test]
    fn coverage_counts_at_least_one_exhaustive() {
        for size in 33..=48usize {
            for overlap in [0.0, 0.25, 0.5] {
                let plan = plan_windows([size, size, size], [32, 32, 32], overlap).unwrap();
                assert!(
                    plan.coverage().iter().all(|&c| c >= 1),
                    "size {size} overlap {overlap}"
                );
            }
        }
    }
}
