//! Dense volumes: rank-4 `[C, D, H, W]` scalar fields with physical voxel
//! spacing, either images or integer label masks.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Image,
    Label,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Vec<f32>,
    /// `[C, D, H, W]`
    pub shape: [usize; 4],
    /// Millimeters per voxel along (D, H, W).
    pub spacing: [f64; 3],
    pub kind: VolumeKind,
}

impl Volume {
    pub fn new_image(data: Vec<f32>, shape: [usize; 4], spacing: [f64; 3]) -> Result<Self> {
        Self::validate_dims(&shape, &spacing, data.len())?;
        Ok(Volume {
            data,
            shape,
            spacing,
            kind: VolumeKind::Image,
        })
    }

    /// Label volumes must hold non-negative integer values.
    pub fn new_label(data: Vec<f32>, shape: [usize; 4], spacing: [f64; 3]) -> Result<Self> {
        Self::validate_dims(&shape, &spacing, data.len())?;
        for &v in &data {
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::LabelOutOfRange {
                    value: v as f64,
                    num_classes: usize::MAX,
                });
            }
        }
        Ok(Volume {
            data,
            shape,
            spacing,
            kind: VolumeKind::Label,
        })
    }

    fn validate_dims(shape: &[usize; 4], spacing: &[f64; 3], len: usize) -> Result<()> {
        let n: usize = shape.iter().product();
        if n != len {
            return Err(Error::shape(
                "volume buffer",
                format!("{n} elements for shape {shape:?}"),
                format!("{len}"),
            ));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("spacing", "all components must be > 0"));
        }
        Ok(())
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    /// Maximum label value (labels only).
    pub fn max_label(&self) -> usize {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v)) as usize
    }

    /// Extract the cubic/rectangular region starting at `off` with shape
    /// `roi` (all channels). Caller guarantees bounds.
    pub fn crop(&self, off: [usize; 3], roi: [usize; 3]) -> Volume {
        let [c, _d, h, w] = self.shape;
        let mut out = Vec::with_capacity(c * roi[0] * roi[1] * roi[2]);
        for ci in 0..c {
            for z in 0..roi[0] {
                for y in 0..roi[1] {
                    let src =
                        ((ci * self.shape[1] + off[0] + z) * h + off[1] + y) * w + off[2];
                    out.extend_from_slice(&self.data[src..src + roi[2]]);
                }
            }
        }
        Volume {
            data: out,
            shape: [c, roi[0], roi[1], roi[2]],
            spacing: self.spacing,
            kind: self.kind,
        }
    }

    /// Per-class voxel counts of a label volume (classes `0..=max`).
    pub fn label_histogram(&self) -> Vec<usize> {
        let maxc = self.max_label();
        let mut h = vec![0usize; maxc + 1];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }
}
