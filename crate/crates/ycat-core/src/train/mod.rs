//! Training loop, sliding-window evaluation, cross-validation, gradient
//! checking, and the ablation harness.

pub mod ablate;
pub mod checkpoint;
pub mod cv;
pub mod eval;
pub mod gradcheck;
pub mod optimizer;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::augment::{augment, AugmentConfig};
use crate::data::normalize::{normalize_intensity, Normalize};
use crate::data::volume::Volume;
use crate::error::{Error, Result};
use crate::loss::{graph_dice_ce, one_hot};
use crate::model::Network;
use crate::params::seeded_rng;
use crate::tensor::Tensor;
use optimizer::{AdamW, AdamWConfig};

pub use eval::{evaluate, sliding_window_probs};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional hard cap on optimizer steps (overrides epochs when smaller).
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub roi_shape: [usize; 3],
    pub overlap: f64,
    pub folds: usize,
    pub augment: AugmentConfig,
    pub normalize: Normalize,
    /// Checkpoint cadence in epochs; 0 = only at the end.
    pub save_every_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 0.0,
            batch_size: 1,
            epochs: 1,
            max_steps: None,
            seed: 0,
            roi_shape: [64, 64, 64],
            overlap: 0.5,
            folds: 5,
            augment: AugmentConfig::default(),
            normalize: Normalize::Zscore,
            save_every_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model_input: [usize; 3]) -> Result<()> {
        if self.lr < 0.0 {
            return Err(Error::config("lr", "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.roi_shape != model_input {
            return Err(Error::config(
                "roi_shape",
                format!(
                    "must equal the model input size {model_input:?} (the network operates on fixed-size windows); got {:?}",
                    self.roi_shape
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::BadOverlap(self.overlap));
        }
        Ok(())
    }
}

pub struct TrainResult {
    /// (step, loss) per optimizer step.
    pub curve: Vec<(usize, f64)>,
    pub epochs_run: usize,
    pub steps_run: usize,
}

/// Prepare one training example: normalize, augment, crop to the roi.
fn prepare_sample(
    img: &Volume,
    lbl: &Volume,
    tcfg: &TrainConfig,
    epoch: usize,
    index: usize,
) -> Result<(Volume, Volume)> {
    let (img, _) = normalize_intensity(img, tcfg.normalize)?;
    let mut rng = seeded_rng(tcfg.seed, "augment", (epoch * 1_000_003 + index) as u64);
    let (img, lbl) = augment(&img, lbl, &tcfg.augment, &mut rng);
    let spatial = img.spatial();
    let roi = tcfg.roi_shape;
    if spatial == roi {
        return Ok((img, lbl));
    }
    if spatial.iter().zip(&roi).any(|(s, r)| s < r) {
        return Err(Error::RoiTooLarge {
            roi,
            volume: spatial,
        });
    }
    let mut crng = seeded_rng(tcfg.seed, "crop", (epoch * 1_000_003 + index) as u64);
    use rand::Rng;
    let off = [
        crng.gen_range(0..=spatial[0] - roi[0]),
        crng.gen_range(0..=spatial[1] - roi[1]),
        crng.gen_range(0..=spatial[2] - roi[2]),
    ];
    Ok((img.crop(off, roi), lbl.crop(off, roi)))
}

/// Train `net` on (image, label) pairs. Deterministic for a given seed.
/// Checkpoints are written under `out_dir/checkpoint` when provided.
pub fn train(
    net: &mut Network<f32>,
    tcfg: &TrainConfig,
    samples: &[(Volume, Volume)],
    out_dir: Option<&Path>,
) -> Result<TrainResult> {
    if samples.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    tcfg.validate(net.cfg.input_size)?;
    let num_classes = net.cfg.num_classes;
    let mut opt = AdamW::new(
        &net.store,
        AdamWConfig {
            lr: tcfg.lr,
            weight_decay: tcfg.weight_decay,
            ..Default::default()
        },
    );
    let mut curve = Vec::new();
    let mut step = 0usize;
    let max_steps = tcfg.max_steps.unwrap_or(usize::MAX);
    let epochs = if tcfg.max_steps.is_some() && tcfg.epochs == 0 {
        usize::MAX
    } else {
        tcfg.epochs
    };
    let mut epochs_run = 0usize;
    'outer: for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut seeded_rng(tcfg.seed, "order", epoch as u64));
        let mut batch_loss = 0.0f64;
        let mut in_batch = 0usize;
        for &idx in &order {
            if step >= max_steps {
                break 'outer;
            }
            let (img, lbl) = prepare_sample(&samples[idx].0, &samples[idx].1, tcfg, epoch, idx)?;
            let gt = one_hot(&lbl.data, lbl.spatial(), num_classes)?;
            let image = Tensor::<f32>::from_vec(&img.shape, img.data.clone());
            let mut g = Graph::new(true);
            let out = net.forward(&mut g, &image)?;
            let loss = graph_dice_ce(&mut g, out.logits, &gt);
            let loss_val = g.value(loss).item() as f64;
            g.backward(loss, &mut net.store, &[]);
            drop(g);
            batch_loss += loss_val;
            in_batch += 1;
            if in_batch == tcfg.batch_size {
                let mean_loss = batch_loss / in_batch as f64;
                if !mean_loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step,
                        lr: tcfg.lr,
                        grad_norm: net.store.grad_norm(),
                    });
                }
                opt.step(&mut net.store);
                curve.push((step, mean_loss));
                step += 1;
                batch_loss = 0.0;
                in_batch = 0;
            }
        }
        if in_batch > 0 {
            let mean_loss = batch_loss / in_batch as f64;
            if !mean_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    lr: tcfg.lr,
                    grad_norm: net.store.grad_norm(),
                });
            }
            opt.step(&mut net.store);
            curve.push((step, mean_loss));
            step += 1;
        }
        epochs_run = epoch + 1;
        if let Some(dir) = out_dir {
            let due = tcfg.save_every_epochs > 0 && (epoch + 1) % tcfg.save_every_epochs == 0;
            if due {
                checkpoint::save(&dir.join("checkpoint"), net, tcfg, epoch + 1)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        checkpoint::save(&dir.join("checkpoint"), net, tcfg, epochs_run)?;
        write_loss_csv(&dir.join("loss.csv"), &curve)?;
    }
    Ok(TrainResult {
        curve,
        epochs_run,
        steps_run: step,
    })
}

pub fn write_loss_csv(path: &Path, curve: &[(usize, f64)]) -> Result<()> {
    let mut text = String::from("step,loss\n");
    for (s, l) in curve {
        text.push_str(&format!("{s},{l:.9}\n"));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Mean foreground Dice of `net` on full volumes via sliding-window
/// inference (convenience wrapper used by tests and the harnesses).
pub fn mean_fg_dice(
    net: &Network<f32>,
    samples: &[(Volume, Volume)],
    tcfg: &TrainConfig,
) -> Result<f64> {
    let report = evaluate(
        net,
        samples,
        tcfg,
        crate::metrics::ReportContext {
            dataset: "in-memory".into(),
            split: "val".into(),
            fold: None,
            overlap: tcfg.overlap,
            checkpoint: "live".into(),
        },
    )?;
    Ok(report.mean_dice)
}
