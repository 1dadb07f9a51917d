//! Phantom dataset directories: `images/NNN.{json,raw}`, `labels/NNN.{json,raw}`
//! and a `manifest.json` carrying the split.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::io::{read_volume, write_volume};
use crate::data::phantom::{generate_phantom, PhantomSpec};
use crate::data::volume::Volume;
use crate::error::{Error, Result};
use crate::params::{mix_seed, seeded_rng};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub count: usize,
    pub grid_size: usize,
    pub num_classes: usize,
    pub noise_sigma: f64,
    pub shapes_per_class: usize,
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    All,
}

/// Generate `count` phantoms under `root` with a deterministic 80/20 split.
pub fn write_phantom_dataset(
    root: &Path,
    count: usize,
    base: &PhantomSpec,
) -> Result<Manifest> {
    if count == 0 {
        return Err(Error::Dataset("count must be >= 1".into()));
    }
    let ids: Vec<String> = (0..count).map(|i| format!("{i:03}")).collect();
    for (i, id) in ids.iter().enumerate() {
        let spec = PhantomSpec {
            seed: mix_seed(base.seed, &format!("sample-{i}")),
            ..*base
        };
        let (img, lbl) = generate_phantom(&spec)?;
        write_volume(&img, &root.join("images").join(id))?;
        write_volume(&lbl, &root.join("labels").join(id))?;
    }
    let mut shuffled = ids.clone();
    shuffled.shuffle(&mut seeded_rng(base.seed, "split", 0));
    let n_train = ((count as f64) * 0.8).floor() as usize;
    let n_train = n_train.clamp(1.min(count), count);
    let mut train: Vec<String> = shuffled[..n_train].to_vec();
    let mut val: Vec<String> = shuffled[n_train..].to_vec();
    train.sort();
    val.sort();
    let manifest = Manifest {
        version: 1,
        count,
        grid_size: base.grid_size,
        num_classes: base.num_classes,
        noise_sigma: base.noise_sigma,
        shapes_per_class: base.shapes_per_class,
        seed: base.seed,
        train,
        val,
    };
    let path = root.join("manifest.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(manifest)
}

pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn ids(&self, split: Split) -> Vec<String> {
        match split {
            Split::Train => self.manifest.train.clone(),
            Split::Val => self.manifest.val.clone(),
            Split::All => {
                let mut all = self.manifest.train.clone();
                all.extend(self.manifest.val.iter().cloned());
                all.sort();
                all
            }
        }
    }

    pub fn load_pair(&self, id: &str) -> Result<(Volume, Volume)> {
        let img = read_volume(&self.root.join("images").join(id))?;
        let lbl = read_volume(&self.root.join("labels").join(id))?;
        if img.spatial() != lbl.spatial() {
            return Err(Error::Dataset(format!(
                "sample {id}: image/label spatial mismatch"
            )));
        }
        Ok((img, lbl))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip_and_split() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec {
            grid_size: 16,
            num_classes: 3,
            shapes_per_class: 1,
            noise_sigma: 0.02,
            seed: 9,
        };
        let m = write_phantom_dataset(dir.path(), 10, &spec).unwrap();
        assert_eq!(m.train.len(), 8);
        assert_eq!(m.val.len(), 2);
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.ids(Split::All).len(), 10);
        let (img, lbl) = ds.load_pair(&m.train[0]).unwrap();
        assert_eq!(img.spatial(), [16, 16, 16]);
        assert_eq!(lbl.spatial(), [16, 16, 16]);
    }

    #[test]
    fn rerun_same_flags_identical_bytes() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let spec = PhantomSpec {
            grid_size: 16,
            num_classes: 2,
            shapes_per_class: 1,
            noise_sigma: 0.01,
            seed: 4,
        };
        write_phantom_dataset(d1.path(), 3, &spec).unwrap();
        write_phantom_dataset(d2.path(), 3, &spec).unwrap();
        for id in ["000", "001", "002"] {
            for sub in ["images", "labels"] {
                let a = std::fs::read(d1.path().join(sub).join(format!("{id}.raw"))).unwrap();
                let b = std::fs::read(d2.path().join(sub).join(format!("{id}.raw"))).unwrap();
                assert_eq!(a, b);
            }
        }
    }
}
