//! Sliding-window geometry: stride = floor(roi * (1 - overlap)) per axis,
//! with the last window clamped to the volume edge so every voxel is
//! covered without padding.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct WindowPlan {
    pub volume_shape: [usize; 3],
    pub roi_shape: [usize; 3],
    pub overlap: f64,
    /// Window origins, sorted lexicographically.
    pub offsets: Vec<[usize; 3]>,
}

pub fn plan_windows(
    volume_shape: [usize; 3],
    roi_shape: [usize; 3],
    overlap: f64,
) -> Result<WindowPlan> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::BadOverlap(overlap));
    }
    if roi_shape
        .iter()
        .zip(&volume_shape)
        .any(|(r, v)| r > v || *r == 0)
    {
        return Err(Error::RoiTooLarge {
            roi: roi_shape,
            volume: volume_shape,
        });
    }
    let axes: Vec<Vec<usize>> = (0..3)
        .map(|a| axis_offsets(volume_shape[a], roi_shape[a], overlap))
        .collect();
    let mut offsets = Vec::with_capacity(axes[0].len() * axes[1].len() * axes[2].len());
    for &z in &axes[0] {
        for &y in &axes[1] {
            for &x in &axes[2] {
                offsets.push([z, y, x]);
            }
        }
    }
    Ok(WindowPlan {
        volume_shape,
        roi_shape,
        overlap,
        offsets,
    })
}

fn axis_offsets(size: usize, roi: usize, overlap: f64) -> Vec<usize> {
    let stride = ((roi as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut out = Vec::new();
    let mut pos = 0usize;
    while pos + roi <= size {
        out.push(pos);
        pos += stride;
    }
    let last = size - roi;
    if *out.last().expect("at least one window") != last {
        out.push(last);
    }
    out
}

impl WindowPlan {
    /// Per-voxel coverage counts (how many windows contain each voxel).
    pub fn coverage(&self) -> Vec<u32> {
        let [d, h, w] = self.volume_shape;
        let [rd, rh, rw] = self.roi_shape;
        let mut cov = vec![0u32; d * h * w];
        for off in &self.offsets {
            for z in off[0]..off[0] + rd {
                for y in off[1]..off[1] + rh {
                    let base = (z * h + y) * w + off[2];
                    for c in &mut cov[base..base + rw] {
                        *c += 1;
                    }
                }
            }
        }
        cov
    }
}
