//! Epoch loop: shuffled mini-batches, per-step cosine annealing, per-epoch
//! validation, and best-IoU checkpointing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{gather_inputs, gather_labels, PatchSet, ScenePair};
use crate::error::{Error, Result};
use crate::infer::confusion_over_patchset;
use crate::loss::{combined_loss_grad, LossValues};
use crate::metrics::metrics;
use crate::model::ProcaNet;
use crate::optim::{adam_step, AdamState, SchedulerConfig, BASE_LR};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch: usize,
    /// Seed for batch shuffling only; parameter init is owned by the model.
    pub seed: u64,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Divisor applied to raw band values when assembling inputs.
    pub scale: f64,
    /// Where `best.pcaw` / `best.pcao` / `train_log.jsonl` go; None skips
    /// writing (in-memory runs).
    pub out_dir: Option<PathBuf>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 25,
            batch: 8,
            seed: 42,
            lr_max: BASE_LR,
            lr_min: 0.0,
            scale: 1.0,
            out_dir: None,
        }
    }
}

pub struct FitData<'a> {
    pub train_scenes: &'a [ScenePair],
    pub train_set: &'a PatchSet,
    pub val_scenes: &'a [ScenePair],
    pub val_set: &'a PatchSet,
    pub bands1: &'a [String],
    pub bands2: Option<&'a [String]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_iou: f64,
    pub val_f1: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_iou: f64,
    pub weights_path: Option<PathBuf>,
    pub optimizer_path: Option<PathBuf>,
}

/// One optimizer step on one batch: forward, combined loss, backward, Adam.
pub fn train_step<F: Scalar>(
    net: &mut ProcaNet<F>,
    state: &mut AdamState<F>,
    lr: f64,
    x1: &Tensor<F>,
    x2: Option<&Tensor<F>>,
    target: &Tensor<F>,
) -> Result<LossValues<F>> {
    let (logits, trace) = net.forward_traced(x1, x2)?;
    let lg = combined_loss_grad(&logits, target)?;
    let total = lg.values.total.as_f64();
    if !total.is_finite() {
        return Err(Error::NonFinite {
            context: format!(
                "loss total {total}, bce {}, dice {}",
                lg.values.bce.as_f64(),
                lg.values.dice.as_f64()
            ),
        });
    }
    let grads = net.backward(&trace, &lg.d_logits)?;
    adam_step(net, &grads, state, lr)?;
    Ok(lg.values)
}

pub fn fit<F: Scalar>(cfg: &FitConfig, net: &mut ProcaNet<F>, data: &FitData) -> Result<FitReport> {
    if cfg.epochs == 0 || cfg.batch == 0 {
        return Err(Error::InvalidConfig(
            "epochs and batch size must be nonzero".into(),
        ));
    }
    if data.train_set.is_empty() || data.val_set.is_empty() {
        return Err(Error::InvalidConfig(
            "training and validation patch sets must be nonempty".into(),
        ));
    }
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let n_train = data.train_set.len();
    let steps_per_epoch = n_train.div_ceil(cfg.batch);
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let sched = SchedulerConfig::for_total_steps(total_steps, cfg.lr_max, cfg.lr_min);
    let mut state = AdamState::new(net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut log_file = match &cfg.out_dir {
        Some(dir) => Some(BufWriter::new(File::create(dir.join("train_log.jsonl"))?)),
        None => None,
    };

    let mut report = FitReport {
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_val_iou: f64::NEG_INFINITY,
        weights_path: cfg.out_dir.as_ref().map(|d| d.join("best.pcaw")),
        optimizer_path: cfg.out_dir.as_ref().map(|d| d.join("best.pcao")),
    };

    let mut global_step = 0u64;
    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut last_lr = sched.lr_at(global_step);
        for (batch_idx, chunk) in order.chunks(cfg.batch).enumerate() {
            let x1 = gather_inputs::<F>(
                data.train_scenes,
                data.train_set,
                chunk,
                data.bands1,
                cfg.scale,
            )?;
            let x2 = match data.bands2 {
                Some(b) => Some(gather_inputs::<F>(
                    data.train_scenes,
                    data.train_set,
                    chunk,
                    b,
                    cfg.scale,
                )?),
                None => None,
            };
            let target = gather_labels::<F>(data.train_scenes, data.train_set, chunk)?;
            let lr = sched.lr_at(global_step);
            let values = train_step(net, &mut state, lr, &x1, x2.as_ref(), &target)
                .map_err(|e| match e {
                    Error::NonFinite { context } => Error::NonFinite {
                        context: format!("epoch {epoch} batch {batch_idx}: {context}"),
                    },
                    other => other,
                })?;
            loss_sum += values.total.as_f64() * chunk.len() as f64;
            last_lr = lr;
            global_step += 1;
        }

        let counts = confusion_over_patchset(
            net,
            data.val_scenes,
            data.val_set,
            data.bands1,
            data.bands2,
            cfg.scale,
            cfg.batch,
        )?;
        let m = metrics(&counts)?;
        let entry = EpochLog {
            epoch,
            lr: last_lr,
            train_loss: loss_sum / n_train as f64,
            val_iou: m.iou,
            val_f1: m.f1,
            val_acc: m.accuracy,
        };
        if let Some(f) = &mut log_file {
            serde_json::to_writer(&mut *f, &entry).map_err(|e| Error::Json(e.to_string()))?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        if entry.val_iou > report.best_val_iou {
            report.best_val_iou = entry.val_iou;
            report.best_epoch = epoch;
            if let (Some(wp), Some(op)) = (&report.weights_path, &report.optimizer_path) {
                crate::weights::save_weights(net, wp)?;
                crate::optim::save_optimizer_state(&state, op)?;
            }
        }
        report.epochs.push(entry);
    }
    Ok(report)
}

/// Splits scene indices 65/35 (train/validation), deterministically
/// shuffled by `seed`. Returns (train indices, validation indices).
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let cut = n * 65 / 100;
    let val = order.split_off(cut);
    (order, val)
}

pub fn load_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Json(e.to_string())))
        .collect()
}
