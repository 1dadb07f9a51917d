//! Evaluation metrics: per-class Dice, 95th-percentile symmetric surface
//! distance (mm), precision, and sensitivity, plus the serializable report.
//!
//! Conventions, pinned so golden values stay stable:
//! - boundary voxel = foreground voxel with at least one six-connected
//!   background neighbor (volume border counts as background);
//! - the HD95 pool is the union of distances A-boundary -> B-boundary and
//!   B-boundary -> A-boundary, so the metric is symmetric by construction;
//! - percentile by linear interpolation between order statistics;
//! - empty masks: dice 1.0 if both empty else 0.0; hd95 falls back to the
//!   volume diagonal in mm with `defined = false`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    pub defined: bool,
}

impl MetricValue {
    pub fn ok(value: f64) -> Self {
        MetricValue {
            value,
            defined: true,
        }
    }

    pub fn undefined(value: f64) -> Self {
        MetricValue {
            value,
            defined: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub dice: f64,
    pub hd95: MetricValue,
    pub precision: MetricValue,
    pub sensitivity: MetricValue,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportContext {
    pub dataset: String,
    pub split: String,
    pub fold: Option<usize>,
    pub overlap: f64,
    pub checkpoint: String,
}

/// Per-class and mean scores; means exclude the background class 0.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: BTreeMap<usize, ClassMetrics>,
    pub mean_dice: f64,
    pub mean_hd95: MetricValue,
    pub mean_precision: MetricValue,
    pub mean_sensitivity: MetricValue,
    pub context: ReportContext,
}

impl MetricsReport {
    pub fn from_class_metrics(
        per_class: BTreeMap<usize, ClassMetrics>,
        context: ReportContext,
    ) -> Self {
        let fg: Vec<&ClassMetrics> = per_class
            .iter()
            .filter(|(&c, _)| c != 0)
            .map(|(_, m)| m)
            .collect();
        let n = fg.len().max(1) as f64;
        let mean_dice = fg.iter().map(|m| m.dice).sum::<f64>() / n;
        let mean = |f: &dyn Fn(&ClassMetrics) -> MetricValue| -> MetricValue {
            let vals: Vec<MetricValue> = fg.iter().map(|m| f(m)).collect();
            MetricValue {
                value: vals.iter().map(|v| v.value).sum::<f64>() / n,
                defined: vals.iter().all(|v| v.defined),
            }
        };
        MetricsReport {
            mean_dice,
            mean_hd95: mean(&|m| m.hd95),
            mean_precision: mean(&|m| m.precision),
            mean_sensitivity: mean(&|m| m.sensitivity),
            per_class,
            context,
        }
    }

    /// Fixed-width table: one dice column per foreground class, then the
    /// means (dice, hd95, precision, sensitivity).
    pub fn render_table(&self) -> String {
        let mut head = String::from("| ");
        let mut row = String::from("| ");
        for (&c, m) in self.per_class.iter().filter(|(&c, _)| c != 0) {
            head.push_str(&format!("{:>8} | ", format!("cls{c}")));
            row.push_str(&format!("{:>8.4} | ", m.dice));
        }
        for (name, v) in [
            ("mDice", self.mean_dice),
            ("mHD95", self.mean_hd95.value),
            ("mPrec.", self.mean_precision.value),
            ("mSens.", self.mean_sensitivity.value),
        ] {
            head.push_str(&format!("{name:>8} | "));
            row.push_str(&format!("{v:>8.4} | "));
        }
        format!("{head}\n{row}\n")
    }
}

/// Dice overlap between binary masks of one class: `2|A∩B| / (|A|+|B|)`.
/// Both empty -> 1.0; exactly one empty -> 0.0.
pub fn dice_score(pred: &[u8], gt: &[u8], class: u8) -> f64 {
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        let pa = p == class;
        let gb = g == class;
        a += pa as usize;
        b += gb as usize;
        inter += (pa && gb) as usize;
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

/// (precision, sensitivity) = (TP/(TP+FP), TP/(TP+FN)); empty denominators
/// yield value 0 with `defined = false`.
pub fn precision_sensitivity(pred: &[u8], gt: &[u8], class: u8) -> (MetricValue, MetricValue) {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fneg = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        let pa = p == class;
        let gb = g == class;
        tp += (pa && gb) as usize;
        fp += (pa && !gb) as usize;
        fneg += (!pa && gb) as usize;
    }
    let precision = if tp + fp == 0 {
        MetricValue::undefined(0.0)
    } else {
        MetricValue::ok(tp as f64 / (tp + fp) as f64)
    };
    let sensitivity = if tp + fneg == 0 {
        MetricValue::undefined(0.0)
    } else {
        MetricValue::ok(tp as f64 / (tp + fneg) as f64)
    };
    (precision, sensitivity)
}

/// Boundary voxels (z, y, x) of `mask == class` under six-connectivity.
pub fn boundary_voxels(mask: &[u8], shape: [usize; 3], class: u8) -> Vec<[usize; 3]> {
    let [d, h, w] = shape;
    let at = |z: usize, y: usize, x: usize| mask[(z * h + y) * w + x] == class;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !at(z, y, x) {
                    continue;
                }
                let is_boundary = z == 0
                    || z == d - 1
                    || y == 0
                    || y == h - 1
                    || x == 0
                    || x == w - 1
                    || !at(z - 1, y, x)
                    || !at(z + 1, y, x)
                    || !at(z, y - 1, x)
                    || !at(z, y + 1, x)
                    || !at(z, y, x - 1)
                    || !at(z, y, x + 1);
                if is_boundary {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// 95th percentile of the symmetric boundary-distance pool, in mm.
pub fn hd95(
    pred: &[u8],
    gt: &[u8],
    shape: [usize; 3],
    spacing: [f64; 3],
    class: u8,
) -> MetricValue {
    let pa = boundary_voxels(pred, shape, class);
    let pb = boundary_voxels(gt, shape, class);
    if pa.is_empty() || pb.is_empty() {
        let diag = (shape[0] as f64 * spacing[0]).powi(2)
            + (shape[1] as f64 * spacing[1]).powi(2)
            + (shape[2] as f64 * spacing[2]).powi(2);
        return MetricValue::undefined(diag.sqrt());
    }
    let mut pool = Vec::with_capacity(pa.len() + pb.len());
    directed_min_distances(&pa, &pb, spacing, &mut pool);
    directed_min_distances(&pb, &pa, spacing, &mut pool);
    MetricValue::ok(percentile_interp(&mut pool, 0.95))
}

/// For each source voxel, the distance to its nearest target voxel.
/// Targets are scanned outward from the source's z-position so most rows
/// prune early on `dz` alone.
fn directed_min_distances(
    src: &[[usize; 3]],
    dst: &[[usize; 3]],
    spacing: [f64; 3],
    pool: &mut Vec<f64>,
) {
    // dst sorted by z (boundary extraction already yields z-major order)
    debug_assert!(dst.windows(2).all(|p| p[0][0] <= p[1][0]));
    let zs: Vec<f64> = dst.iter().map(|v| v[0] as f64 * spacing[0]).collect();
    for s in src {
        let sz = s[0] as f64 * spacing[0];
        // position of first dst with z >= s.z
        let start = dst.partition_point(|v| v[0] < s[0]);
        let mut best = f64::INFINITY;
        // walk outward: up and down in z simultaneously
        let (mut lo, mut hi) = (start as isize - 1, start);
        loop {
            let mut advanced = false;
            if hi < dst.len() {
                let dz = zs[hi] - sz;
                if dz * dz < best {
                    best = best.min(dist2(s, &dst[hi], spacing));
                    hi += 1;
                    advanced = true;
                } else {
                    // all further hi are even farther in z
                }
            }
            if lo >= 0 {
                let dz = sz - zs[lo as usize];
                if dz * dz < best {
                    best = best.min(dist2(s, &dst[lo as usize], spacing));
                    lo -= 1;
                    advanced = true;
                }
            }
            if !advanced {
                break;
            }
        }
        pool.push(best.sqrt());
    }
}

#[inline]
fn dist2(a: &[usize; 3], b: &[usize; 3], spacing: [f64; 3]) -> f64 {
    let dz = (a[0] as f64 - b[0] as f64) * spacing[0];
    let dy = (a[1] as f64 - b[1] as f64) * spacing[1];
    let dx = (a[2] as f64 - b[2] as f64) * spacing[2];
    dz * dz + dy * dy + dx * dx
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile_interp(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = q * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        values[lo]
    } else {
        let t = rank - lo as f64;
        values[lo] * (1.0 - t) + values[hi] * t
    }
}

/// Compute all per-class metrics for one (pred, gt) label pair.
pub fn evaluate_labels(
    pred: &[u8],
    gt: &[u8],
    shape: [usize; 3],
    spacing: [f64; 3],
    num_classes: usize,
) -> BTreeMap<usize, ClassMetrics> {
    let mut out = BTreeMap::new();
    for class in 0..num_classes {
        let c = class as u8;
        let (precision, sensitivity) = precision_sensitivity(pred, gt, c);
        out.insert(
            class,
            ClassMetrics {
                dice: dice_score(pred, gt, c),
                hd95: hd95(pred, gt, shape, spacing, c),
                precision,
                sensitivity,
            },
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::seeded_rng;
    use rand::Rng;

    /// All-pairs brute-force oracle with the same pinned conventions.
    fn hd95_oracle(
        pred: &[u8],
        gt: &[u8],
        shape: [usize; 3],
        spacing: [f64; 3],
        class: u8,
    ) -> Option<f64> {
        let a = boundary_voxels(pred, shape, class);
        let b = boundary_voxels(gt, shape, class);
        if a.is_empty() || b.is_empty() {
            return None;
        }
        let mut pool = Vec::new();
        for s in &a {
            let m = b.iter().map(|t| dist2(s, t, spacing)).fold(f64::INFINITY, f64::min);
            pool.push(m.sqrt());
        }
        for s in &b {
            let m = a.iter().map(|t| dist2(s, t, spacing)).fold(f64::INFINITY, f64::min);
            pool.push(m.sqrt());
        }
        Some(percentile_interp(&mut pool, 0.95))
    }

    fn random_mask(seed: u64, shape: [usize; 3], fill: f64) -> Vec<u8> {
        let mut rng = seeded_rng(seed, "mask", 0);
        (0..shape[0] * shape[1] * shape[2])
            .map(|_| if rng.gen_bool(fill) { 1u8 } else { 0u8 })
            .collect()
    }

    #[test]
    fn dice_basic_cases() {
        let a = vec![1u8, 1, 0, 0];
        let b = vec![1u8, 1, 0, 0];
        assert_eq!(dice_score(&a, &b, 1), 1.0);
        let c = vec![0u8, 0, 1, 1];
        assert_eq!(dice_score(&a, &c, 1), 0.0);
        assert_eq!(dice_score(&vec![0u8; 8], &vec![0u8; 8], 1), 1.0);
        // |A|=|B|=8, intersection 4 -> 0.5
        let mut p = vec![0u8; 32];
        let mut g = vec![0u8; 32];
        for i in 0..8 {
            p[i] = 1;
            g[i + 4] = 1;
        }
        assert_eq!(dice_score(&p, &g, 1), 0.5);
        assert_eq!(dice_score(&p, &g, 1), dice_score(&g, &p, 1));
    }

    #[test]
    fn precision_sensitivity_cases() {
        let g = vec![1u8, 1, 1, 0, 0, 0];
        let (p, s) = precision_sensitivity(&g, &g, 1);
        assert_eq!((p.value, s.value), (1.0, 1.0));
        // pred strictly inside gt: precision 1, sensitivity < 1
        let pred = vec![1u8, 0, 0, 0, 0, 0];
        let (p, s) = precision_sensitivity(&pred, &g, 1);
        assert_eq!(p.value, 1.0);
        assert!(s.value < 1.0);
        // empty prediction: undefined precision
        let none = vec![0u8; 6];
        let (p, s) = precision_sensitivity(&none, &g, 1);
        assert!(!p.defined);
        assert_eq!(s.value, 0.0);
        // confusion-matrix oracle on random masks
        let a = random_mask(1, [6, 6, 6], 0.3);
        let b = random_mask(2, [6, 6, 6], 0.3);
        let (p, s) = precision_sensitivity(&a, &b, 1);
        let tp = a.iter().zip(&b).filter(|(&x, &y)| x == 1 && y == 1).count() as f64;
        let fp = a.iter().zip(&b).filter(|(&x, &y)| x == 1 && y == 0).count() as f64;
        let fne = a.iter().zip(&b).filter(|(&x, &y)| x == 0 && y == 1).count() as f64;
        assert!((p.value - tp / (tp + fp)).abs() < 1e-12);
        assert!((s.value - tp / (tp + fne)).abs() < 1e-12);
    }

    #[test]
    fn hd95_identical_masks_is_zero() {
        let m = random_mask(3, [8, 8, 8], 0.3);
        let v = hd95(&m, &m, [8, 8, 8], [1.0; 3], 1);
        assert!(v.defined);
        assert_eq!(v.value, 0.0);
    }

    #[test]
    fn hd95_two_points_three_apart() {
        let shape = [9, 9, 9];
        let mut a = vec![0u8; 729];
        let mut b = vec![0u8; 729];
        a[(4 * 9 + 4) * 9 + 1] = 1;
        b[(4 * 9 + 4) * 9 + 4] = 1;
        let v = hd95(&a, &b, shape, [1.0; 3], 1);
        assert!((v.value - 3.0).abs() < 1e-12);
    }

    #[test]
    fn hd95_spacing_scales_distances() {
        let shape = [9, 9, 9];
        let mut a = vec![0u8; 729];
        let mut b = vec![0u8; 729];
        a[(1 * 9 + 4) * 9 + 4] = 1;
        b[(4 * 9 + 4) * 9 + 4] = 1; // 3 voxels apart along z
        let v = hd95(&a, &b, shape, [2.0, 1.0, 1.0], 1);
        assert!((v.value - 6.0).abs() < 1e-12);
    }

    #[test]
    fn hd95_empty_mask_sentinel() {
        let m = random_mask(4, [8, 8, 8], 0.3);
        let empty = vec![0u8; 512];
        let v = hd95(&m, &empty, [8, 8, 8], [1.0; 3], 1);
        assert!(!v.defined);
        let diag = (3.0f64 * 64.0).sqrt() * 8.0 / 8.0; // sqrt(3*8^2)
        assert!((v.value - (192.0f64).sqrt()).abs() < 1e-12, "{} vs {diag}", v.value);
    }

    #[test]
    fn hd95_equal_distances_percentile() {
        // two parallel planes: every boundary distance equals 2mm
        let shape = [4, 4, 4];
        let mut a = vec![0u8; 64];
        let mut b = vec![0u8; 64];
        for y in 0..4 {
            for x in 0..4 {
                a[(0 * 4 + y) * 4 + x] = 1;
                b[(2 * 4 + y) * 4 + x] = 1;
            }
        }
        let v = hd95(&a, &b, shape, [1.0; 3], 1);
        assert_eq!(v.value, 2.0);
    }

    #[test]
    fn hd95_matches_brute_force_on_random_masks() {
        let mut rng = seeded_rng(10, "hd95-shapes", 0);
        for case in 0..100 {
            let shape = [
                rng.gen_range(4..=16usize),
                rng.gen_range(4..=16usize),
                rng.gen_range(4..=16usize),
            ];
            let spacing = [
                rng.gen_range(0.5..2.0),
                rng.gen_range(0.5..2.0),
                rng.gen_range(0.5..2.0),
            ];
            let a = random_mask(100 + case, shape, 0.25);
            let b = random_mask(200 + case, shape, 0.25);
            let got = hd95(&a, &b, shape, spacing, 1);
            match hd95_oracle(&a, &b, shape, spacing, 1) {
                Some(want) => {
                    assert!(got.defined);
                    assert!(
                        (got.value - want).abs() < 1e-9,
                        "case {case}: {} vs {want}",
                        got.value
                    );
                    // symmetry
                    let rev = hd95(&b, &a, shape, spacing, 1);
                    assert!((rev.value - got.value).abs() < 1e-12);
                }
                None => assert!(!got.defined),
            }
        }
    }

    #[test]
    fn report_means_exclude_background() {
        let mut per_class = BTreeMap::new();
        for (c, d) in [(0usize, 0.1), (1, 0.8), (2, 0.6)] {
            per_class.insert(
                c,
                ClassMetrics {
                    dice: d,
                    hd95: MetricValue::ok(1.0),
                    precision: MetricValue::ok(0.5),
                    sensitivity: MetricValue::ok(0.5),
                },
            );
        }
        let r = MetricsReport::from_class_metrics(
            per_class,
            ReportContext {
                dataset: "t".into(),
                split: "val".into(),
                fold: None,
                overlap: 0.5,
                checkpoint: "none".into(),
            },
        );
        assert!((r.mean_dice - 0.7).abs() < 1e-12);
        let json = serde_json::to_string(&r).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert!((back.mean_dice - 0.7).abs() < 1e-12);
        assert!(r.render_table().contains("mDice"));
    }
}
