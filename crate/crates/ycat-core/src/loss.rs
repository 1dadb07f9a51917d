//! Joint objective: soft Dice plus cross entropy over voxel-wise class
//! probabilities.
//!
//! Two forms are provided. [`dice_ce_loss`] is the public definition on
//! probability tensors (what the metric reports and oracles check);
//! [`graph_dice_ce`] is the training form that takes pre-softmax logits and
//! differentiates through log-sum-exp for stability. The two agree whenever
//! all probabilities exceed the CE clamp.
//!
//! Dice term: `1 - (2/J) * sum_j S_j / (P_j + G_j + eps)` with
//! `S_j = sum_i g*p`, `P_j = sum_i p^2`, `G_j = sum_i g^2`; eps only in the
//! denominator. CE term: `-(1/I) * sum_ij g * ln(max(p, delta))`.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

pub const DICE_EPS: f64 = 1e-5;
pub const CE_CLAMP: f64 = 1e-8;
const SIMPLEX_TOL: f64 = 1e-4;

/// One-hot ground truth, shape `[J, D, H, W]`, values exactly 0 or 1 with
/// per-voxel channel sum 1.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotMask {
    pub data: Vec<f32>,
    pub shape: [usize; 4],
}

/// Encode an integer label field into a one-hot mask.
pub fn one_hot(labels: &[f32], spatial: [usize; 3], num_classes: usize) -> Result<OneHotMask> {
    if num_classes < 2 {
        return Err(Error::config("num_classes", "one_hot requires >= 2 classes"));
    }
    let n = spatial[0] * spatial[1] * spatial[2];
    if labels.len() != n {
        return Err(Error::shape(
            "labels",
            format!("{n} voxels"),
            format!("{}", labels.len()),
        ));
    }
    let mut data = vec![0.0f32; num_classes * n];
    for (v, &raw) in labels.iter().enumerate() {
        if raw < 0.0 || raw.fract() != 0.0 || raw as usize >= num_classes {
            return Err(Error::LabelOutOfRange {
                value: raw as f64,
                num_classes,
            });
        }
        data[(raw as usize) * n + v] = 1.0;
    }
    Ok(OneHotMask {
        data,
        shape: [num_classes, spatial[0], spatial[1], spatial[2]],
    })
}

/// Joint Dice + CE loss on probabilities. Errors on shape mismatch or if
/// any voxel's probabilities deviate from the simplex by more than 1e-4.
pub fn dice_ce_loss<E: Elem>(probs: &Tensor<E>, gt: &OneHotMask) -> Result<E> {
    let shape = probs.shape();
    if shape != gt.shape {
        return Err(Error::shape(
            "dice_ce_loss",
            format!("{:?}", gt.shape),
            format!("{shape:?}"),
        ));
    }
    let j = shape[0];
    let n: usize = shape[1..].iter().product();
    let pd = probs.data();
    let mut max_dev = 0.0f64;
    for v in 0..n {
        let mut s = 0.0f64;
        for cls in 0..j {
            s += pd[cls * n + v].to_f64();
        }
        max_dev = max_dev.max((s - 1.0).abs());
    }
    if max_dev > SIMPLEX_TOL {
        return Err(Error::NonSimplex { max_dev });
    }

    let mut dice_acc = 0.0f64;
    for cls in 0..j {
        let mut inter = 0.0f64;
        let mut psum = 0.0f64;
        let mut gsum = 0.0f64;
        for v in 0..n {
            let p = pd[cls * n + v].to_f64();
            let gval = gt.data[cls * n + v] as f64;
            inter += gval * p;
            psum += p * p;
            gsum += gval * gval;
        }
        dice_acc += inter / (psum + gsum + DICE_EPS);
    }
    let dice = 1.0 - (2.0 / j as f64) * dice_acc;

    let mut ce = 0.0f64;
    for cls in 0..j {
        for v in 0..n {
            let gval = gt.data[cls * n + v] as f64;
            if gval != 0.0 {
                ce -= gval * pd[cls * n + v].to_f64().max(CE_CLAMP).ln();
            }
        }
    }
    ce /= n as f64;
    Ok(E::from_f64(dice + ce))
}

/// Training loss on logits, as graph ops: Dice on softmax(logits) and CE via
/// log-softmax. Returns the scalar Var.
pub fn graph_dice_ce<E: Elem>(g: &mut Graph<E>, logits: Var, gt: &OneHotMask) -> Var {
    let shape = g.shape_of(logits).to_vec();
    assert_eq!(shape, gt.shape.to_vec(), "loss shape mismatch");
    let j = shape[0];
    let n: usize = shape[1..].iter().product();
    let gt_t: Tensor<E> = Tensor::from_vec(
        &gt.shape,
        gt.data.iter().map(|&x| E::from_f64(x as f64)).collect(),
    );
    let gt_c = g.constant(gt_t);

    // Dice on probabilities
    let probs = g.softmax_channel(logits);
    let inter = g.mul(probs, gt_c);
    let inter = g.sum_per_channel(inter); // S_j
    let p2 = g.mul(probs, probs);
    let p2 = g.sum_per_channel(p2); // P_j
    let g2 = g.mul(gt_c, gt_c);
    let g2 = g.sum_per_channel(g2); // G_j
    let denom = g.add(p2, g2);
    let denom = g.add_scalar(denom, DICE_EPS);
    let frac = g.div(inter, denom);
    let fsum = g.sum_all(frac);
    let dice_neg = g.scale(fsum, -2.0 / j as f64);
    let dice = g.add_scalar(dice_neg, 1.0);

    // CE via log-softmax
    let logp = g.log_softmax_channel(logits);
    let picked = g.mul(logp, gt_c);
    let ce_sum = g.sum_all(picked);
    let ce = g.scale(ce_sum, -1.0 / n as f64);

    g.add(dice, ce)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::testutil::rand_tensor;
    use crate::autodiff::Graph;
    use crate::params::{seeded_rng, ParamStore};
    use rand::Rng;

    fn random_case(seed: u64, j: usize, side: usize) -> (Tensor<f64>, OneHotMask) {
        let mut rng = seeded_rng(seed, "loss-case", 0);
        let n = side * side * side;
        // random simplex probabilities
        let mut probs = vec![0.0f64; j * n];
        for v in 0..n {
            let mut tot = 0.0;
            for cls in 0..j {
                let x: f64 = rng.gen_range(0.01..1.0);
                probs[cls * n + v] = x;
                tot += x;
            }
            for cls in 0..j {
                probs[cls * n + v] /= tot;
            }
        }
        let labels: Vec<f32> = (0..n).map(|_| rng.gen_range(0..j) as f32).collect();
        let gt = one_hot(&labels, [side, side, side], j).unwrap();
        (
            Tensor::from_vec(&[j, side, side, side], probs),
            gt,
        )
    }

    /// Fully independent naive-loop re-implementation in f64.
    fn naive_loss(probs: &Tensor<f64>, gt: &OneHotMask) -> f64 {
        let j = probs.shape()[0];
        let n: usize = probs.shape()[1..].iter().product();
        let mut dice_sum = 0.0;
        for cls in 0..j {
            let mut num = 0.0;
            let mut den = 0.0;
            for v in 0..n {
                let p = probs.data()[cls * n + v];
                let gv = gt.data[cls * n + v] as f64;
                num += p * gv;
                den += p * p + gv * gv;
            }
            dice_sum += num / (den + DICE_EPS);
        }
        let mut ce = 0.0;
        for v in 0..n {
            for cls in 0..j {
                let gv = gt.data[cls * n + v] as f64;
                ce -= gv * probs.data()[cls * n + v].max(CE_CLAMP).ln();
            }
        }
        1.0 - 2.0 / (j as f64) * dice_sum + ce / n as f64
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let labels: Vec<f32> = (0..64).map(|i| (i % 3) as f32).collect();
        let gt = one_hot(&labels, [4, 4, 4], 3).unwrap();
        let probs = Tensor::<f64>::from_vec(
            &[3, 4, 4, 4],
            gt.data.iter().map(|&x| x as f64).collect(),
        );
        let l = dice_ce_loss(&probs, &gt).unwrap();
        assert!(l >= 0.0);
        assert!(l <= 1e-6, "perfect-prediction loss {l}");
    }

    #[test]
    fn uniform_prediction_ce_is_ln_j() {
        for j in [2usize, 3, 5] {
            let n = 64;
            let labels: Vec<f32> = (0..n).map(|i| (i % j) as f32).collect();
            let gt = one_hot(&labels, [4, 4, 4], j).unwrap();
            let probs = Tensor::<f64>::full(&[j, 4, 4, 4], 1.0 / j as f64);
            let total = dice_ce_loss(&probs, &gt).unwrap();
            // subtract the dice part computed independently to isolate CE
            let mut dice_sum = 0.0;
            for cls in 0..j {
                let mut num = 0.0;
                let mut den = 0.0;
                for v in 0..n {
                    let p = 1.0 / j as f64;
                    let gv = gt.data[cls * n + v] as f64;
                    num += p * gv;
                    den += p * p + gv * gv;
                }
                dice_sum += num / (den + DICE_EPS);
            }
            let dice = 1.0 - 2.0 / j as f64 * dice_sum;
            let ce = total - dice;
            assert!(
                (ce - (j as f64).ln()).abs() < 1e-9,
                "J={j}: ce {ce} vs ln J {}",
                (j as f64).ln()
            );
        }
    }

    #[test]
    fn matches_naive_oracle_50_cases() {
        for seed in 0..50 {
            let (probs, gt) = random_case(seed, 3, 4);
            let lib = dice_ce_loss(&probs, &gt).unwrap();
            let oracle = naive_loss(&probs, &gt);
            assert!(
                (lib - oracle).abs() < 1e-10,
                "seed {seed}: {lib} vs {oracle}"
            );
        }
    }

    #[test]
    fn non_simplex_rejected() {
        let (mut probs, gt) = random_case(99, 3, 4);
        probs.data_mut()[0] += 0.01;
        assert!(matches!(
            dice_ce_loss(&probs, &gt),
            Err(Error::NonSimplex { .. })
        ));
    }

    #[test]
    fn loss_nonnegative_and_decreases_toward_target() {
        let (_, gt) = random_case(7, 3, 4);
        let n = 64;
        let j = 3;
        let mut prev = f64::INFINITY;
        for step in 0..=10 {
            let t = step as f64 / 10.0;
            // interpolate uniform -> one-hot, stays on the simplex
            let mut probs = vec![0.0f64; j * n];
            for cls in 0..j {
                for v in 0..n {
                    let hot = gt.data[cls * n + v] as f64;
                    probs[cls * n + v] = (1.0 - t) / j as f64 + t * hot;
                }
            }
            let l = dice_ce_loss(&Tensor::from_vec(&[j, 4, 4, 4], probs), &gt).unwrap();
            assert!(l >= 0.0);
            assert!(l < prev, "loss not decreasing at t={t}: {l} vs {prev}");
            prev = l;
        }
    }

    #[test]
    fn graph_loss_agrees_with_public_loss() {
        let logits = rand_tensor(&[3, 4, 4, 4], 21);
        let labels: Vec<f32> = (0..64).map(|i| ((i * 7) % 3) as f32).collect();
        let gt = one_hot(&labels, [4, 4, 4], 3).unwrap();
        let mut g = Graph::<f64>::new(false);
        let lv = g.constant(logits.clone());
        let loss_var = graph_dice_ce(&mut g, lv, &gt);
        let graph_val = g.value(loss_var).item();
        let probs = crate::autodiff::channel_softmax(&logits);
        let public = dice_ce_loss(&probs, &gt).unwrap();
        assert!((graph_val - public).abs() < 1e-12);
    }

    #[test]
    fn graph_loss_gradient_matches_fd() {
        let logits = rand_tensor(&[3, 4, 4, 4], 22);
        let labels: Vec<f32> = (0..64).map(|i| ((i * 5) % 3) as f32).collect();
        let gt = one_hot(&labels, [4, 4, 4], 3).unwrap();
        crate::autodiff::testutil::check_input_grads_with_store(
            &mut ParamStore::new(),
            &[logits],
            |g, v| graph_dice_ce(g, v[0], &gt),
            1e-6,
        );
    }

    #[test]
    fn one_hot_contract() {
        assert!(one_hot(&[0.0], [1, 1, 1], 1).is_err());
        assert!(matches!(
            one_hot(&[3.0], [1, 1, 1], 3),
            Err(Error::LabelOutOfRange { .. })
        ));
        assert!(matches!(
            one_hot(&[0.5], [1, 1, 1], 3),
            Err(Error::LabelOutOfRange { .. })
        ));
        // complementary channel sums for binary labels
        let m = one_hot(&[0.0, 1.0, 1.0, 0.0], [1, 2, 2], 2).unwrap();
        let n = 4;
        for v in 0..n {
            assert_eq!(m.data[v] + m.data[n + v], 1.0);
        }
        // argmax(one_hot) round-trips random labels
        let mut rng = seeded_rng(5, "onehot", 0);
        let labels: Vec<f32> = (0..27).map(|_| rng.gen_range(0..4) as f32).collect();
        let m = one_hot(&labels, [3, 3, 3], 4).unwrap();
        let t = Tensor::<f32>::from_vec(&[4, 3, 3, 3], m.data.clone());
        let back = crate::model::predict_labels(&t);
        for (a, b) in back.iter().zip(&labels) {
            assert_eq!(*a as f32, *b);
        }
    }
}
