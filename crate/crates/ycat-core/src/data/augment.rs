//! Training-time augmentation: axis flips, 90-degree rotations about a
//! random axis, and image-only intensity shift/scale. The same geometric
//! transform is applied to image and label; labels stay integer-valued
//! because no resampling is involved.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    /// Per-axis flip probability.
    pub p_flip: f64,
    /// Probability of applying a quarter-turn rotation about a random axis.
    pub p_rot90: f64,
    /// Max magnitude of the additive intensity shift (uniform in [-s, s]).
    pub intensity_shift: f64,
    /// Max magnitude of the multiplicative jitter (factor in [1-s, 1+s]).
    pub intensity_scale: f64,
}

impl AugmentConfig {
    pub const IDENTITY: AugmentConfig = AugmentConfig {
        p_flip: 0.0,
        p_rot90: 0.0,
        intensity_shift: 0.0,
        intensity_scale: 0.0,
    };
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_flip: 0.5,
            p_rot90: 0.5,
            intensity_shift: 0.1,
            intensity_scale: 0.1,
        }
    }
}

pub fn augment(
    img: &Volume,
    lbl: &Volume,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> (Volume, Volume) {
    assert_eq!(img.spatial(), lbl.spatial(), "image/label shape mismatch");
    let mut img = img.clone();
    let mut lbl = lbl.clone();
    for axis in 0..3 {
        if rng.gen_bool(cfg.p_flip) {
            flip_axis(&mut img, axis);
            flip_axis(&mut lbl, axis);
        }
    }
    if rng.gen_bool(cfg.p_rot90) {
        let axis = rng.gen_range(0..3usize);
        let quarters = rng.gen_range(1..4usize);
        for _ in 0..quarters {
            img = rot90(&img, axis);
            lbl = rot90(&lbl, axis);
        }
    }
    if cfg.intensity_shift > 0.0 {
        let delta = rng.gen_range(-cfg.intensity_shift..=cfg.intensity_shift) as f32;
        for v in &mut img.data {
            *v += delta;
        }
    }
    if cfg.intensity_scale > 0.0 {
        let factor = 1.0 + rng.gen_range(-cfg.intensity_scale..=cfg.intensity_scale) as f32;
        for v in &mut img.data {
            *v *= factor;
        }
    }
    (img, lbl)
}

/// Reverse the volume along spatial axis 0..3 (D, H, W).
pub fn flip_axis(v: &mut Volume, axis: usize) {
    let [c, d, h, w] = v.shape;
    let data = &mut v.data;
    match axis {
        0 => {
            for ci in 0..c {
                for z in 0..d / 2 {
                    for y in 0..h {
                        for x in 0..w {
                            let a = ((ci * d + z) * h + y) * w + x;
                            let b = ((ci * d + d - 1 - z) * h + y) * w + x;
                            data.swap(a, b);
                        }
                    }
                }
            }
        }
        1 => {
            for ci in 0..c {
                for z in 0..d {
                    for y in 0..h / 2 {
                        for x in 0..w {
                            let a = ((ci * d + z) * h + y) * w + x;
                            let b = ((ci * d + z) * h + h - 1 - y) * w + x;
                            data.swap(a, b);
                        }
                    }
                }
            }
        }
        2 => {
            for ci in 0..c {
                for z in 0..d {
                    for y in 0..h {
                        for x in 0..w / 2 {
                            let a = ((ci * d + z) * h + y) * w + x;
                            let b = ((ci * d + z) * h + y) * w + w - 1 - x;
                            data.swap(a, b);
                        }
                    }
                }
            }
        }
        _ => panic!("axis out of range"),
    }
}

/// One quarter turn about the given spatial axis. Rotating about D maps
/// (h, w) -> (w, H-1-h); the two other axes are analogous.
pub fn rot90(v: &Volume, axis: usize) -> Volume {
    let [c, d, h, w] = v.shape;
    let (nd, nh, nw) = match axis {
        0 => (d, w, h),
        1 => (w, h, d),
        2 => (h, d, w),
        _ => panic!("axis out of range"),
    };
    let mut out = vec![0.0f32; c * nd * nh * nw];
    for ci in 0..c {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let (nz, ny, nx) = match axis {
                        // (y, x) -> (x, h-1-y)
                        0 => (z, x, h - 1 - y),
                        // (z, x) -> (x, w-1-z) in the (D, W) plane
                        1 => (x, y, d - 1 - z),
                        // (z, y) -> (y, d-1-z)
                        2 => (y, d - 1 - z, x),
                        _ => unreachable!(),
                    };
                    out[((ci * nd + nz) * nh + ny) * nw + nx] =
                        v.data[((ci * d + z) * h + y) * w + x];
                }
            }
        }
    }
    Volume {
        data: out,
        shape: [c, nd, nh, nw],
        spacing: v.spacing,
        kind: v.kind,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::phantom::{generate_phantom, PhantomSpec};
    use crate::params::seeded_rng;

    fn pair() -> (Volume, Volume) {
        generate_phantom(&PhantomSpec {
            grid_size: 16,
            num_classes: 3,
            shapes_per_class: 1,
            noise_sigma: 0.05,
            seed: 42,
        })
        .unwrap()
    }

    #[test]
    fn zero_probability_is_identity() {
        let (img, lbl) = pair();
        let mut rng = seeded_rng(0, "aug", 0);
        let (i2, l2) = augment(&img, &lbl, &AugmentConfig::IDENTITY, &mut rng);
        assert_eq!(img, i2);
        assert_eq!(lbl, l2);
    }

    #[test]
    fn double_flip_is_identity() {
        let (img, _) = pair();
        for axis in 0..3 {
            let mut v = img.clone();
            flip_axis(&mut v, axis);
            flip_axis(&mut v, axis);
            assert_eq!(v, img);
        }
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let (img, _) = pair();
        for axis in 0..3 {
            let mut v = img.clone();
            for _ in 0..4 {
                v = rot90(&v, axis);
            }
            assert_eq!(v, img);
        }
    }

    #[test]
    fn replay_with_same_rng_state() {
        let (img, lbl) = pair();
        let cfg = AugmentConfig::default();
        let a = augment(&img, &lbl, &cfg, &mut seeded_rng(7, "aug", 3));
        let b = augment(&img, &lbl, &cfg, &mut seeded_rng(7, "aug", 3));
        assert_eq!(a, b);
    }

    #[test]
    fn geometry_preserves_label_histogram() {
        let (img, lbl) = pair();
        let cfg = AugmentConfig {
            p_flip: 0.8,
            p_rot90: 0.9,
            intensity_shift: 0.0,
            intensity_scale: 0.0,
        };
        let before = lbl.label_histogram();
        for i in 0..10 {
            let (_, l2) = augment(&img, &lbl, &cfg, &mut seeded_rng(1, "aug-hist", i));
            assert_eq!(l2.label_histogram(), before);
        }
    }
}
