//! Checkpoints: a directory holding `manifest.json` plus one little-endian
//! raw tensor file per parameter. Loading rebuilds the network from the
//! stored ModelConfig and overwrites every parameter, so forward outputs
//! reproduce bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Network};
use crate::params::mix_seed;
use crate::train::TrainConfig;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    group: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    rng_digest: String,
    tensors: Vec<TensorMeta>,
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

pub fn save(dir: &Path, net: &Network<f32>, tcfg: &TrainConfig, epoch: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut tensors = Vec::new();
    for id in net.store.ids() {
        let name = net.store.name(id).to_string();
        let t = net.store.tensor(id);
        tensors.push(TensorMeta {
            name: name.clone(),
            shape: t.shape().to_vec(),
            group: net.store.group(id).label().to_string(),
        });
        let mut bytes = Vec::with_capacity(t.numel() * 4);
        for &x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        let path = dir.join(format!("{name}.raw"));
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
    }
    let manifest = CheckpointManifest {
        version: 1,
        model: net.cfg.clone(),
        train: tcfg.clone(),
        epoch,
        rng_digest: format!("{:016x}", mix_seed(tcfg.seed, "rng-state")),
        tensors,
    };
    let path = dir.join("manifest.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| io_err(&path, e))?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<(Network<f32>, TrainConfig, usize)> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let mut net = Network::<f32>::new(manifest.model.clone(), manifest.train.seed)?;
    if manifest.tensors.len() != net.store.len() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint has {} tensors, config builds {}",
            manifest.tensors.len(),
            net.store.len()
        )));
    }
    for meta in &manifest.tensors {
        let id = net.store.lookup(&meta.name).ok_or_else(|| {
            Error::CheckpointMismatch(format!("unknown parameter `{}`", meta.name))
        })?;
        let raw_path = dir.join(format!("{}.raw", meta.name));
        let bytes = fs::read(&raw_path).map_err(|e| io_err(&raw_path, e))?;
        let t = net.store.tensor_mut(id);
        if t.shape() != meta.shape.as_slice() {
            return Err(Error::CheckpointMismatch(format!(
                "parameter `{}`: shape {:?} vs {:?}",
                meta.name,
                meta.shape,
                t.shape()
            )));
        }
        if bytes.len() != t.numel() * 4 {
            return Err(Error::CheckpointMismatch(format!(
                "parameter `{}`: payload {} bytes, expected {}",
                meta.name,
                bytes.len(),
                t.numel() * 4
            )));
        }
        for (x, c) in t.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *x = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
    }
    Ok((net, manifest.train, manifest.epoch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::model::presets;
    use crate::tensor::Tensor;

    #[test]
    fn save_load_bitwise_forward() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::<f32>::new(presets::tiny_16(), 77).unwrap();
        let tcfg = TrainConfig::default();
        save(dir.path(), &net, &tcfg, 3).unwrap();
        let (loaded, _, epoch) = load(dir.path()).unwrap();
        assert_eq!(epoch, 3);
        let img = Tensor::from_f64_slice(
            &[1, 16, 16, 16],
            &crate::params::uniform_vec(8, "ckpt", 4096, -1.0, 1.0),
        );
        let mut g1 = Graph::new(false);
        let o1 = net.forward(&mut g1, &img).unwrap();
        let mut g2 = Graph::new(false);
        let o2 = loaded.forward(&mut g2, &img).unwrap();
        assert_eq!(g1.value(o1.probs).data(), g2.value(o2.probs).data());
    }

    #[test]
    fn shape_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::<f32>::new(presets::tiny_16(), 1).unwrap();
        save(dir.path(), &net, &TrainConfig::default(), 0).unwrap();
        // corrupt one payload
        let victim = dir.path().join("decoder.classifier.bias.raw");
        std::fs::write(&victim, vec![0u8; 3]).unwrap();
        assert!(matches!(
            load(dir.path()),
            Err(Error::CheckpointMismatch(_))
        ));
    }
}
