//! Optimization loop over the joint objective, with per-epoch history,
//! best-checkpoint retention, early stopping, and the λ-grid ablation
//! runner.

mod adam;
mod metrics;

pub use adam::{adam_step, Adam};
pub use metrics::{
    batch_scores, confusion_at, evaluate, evaluate_at_sizes, predict_image, roc_pr_auc,
    score_dataset, write_metrics_json, write_pr_csv, write_roc_csv, ConfusionCounts, Metrics,
    PrPoint, PredictMode, RocPoint, SegMetrics, SizeAccuracy,
};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataio::{CropMode, Dataset};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, Model};
use crate::objective::{
    cls_loss, extract_seg_labels, joint_loss, seg_loss, validate_weights, LossWeights,
};
use crate::tensor::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Write a checkpoint every N epochs (0 disables periodic checkpoints;
    /// the best model is always kept).
    pub checkpoint_every: usize,
    /// Stop after this many epochs without a validation-accuracy
    /// improvement (0 disables early stopping).
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            weights: LossWeights::single_seg(0.5),
            seed: 0,
            checkpoint_every: 0,
            early_stop_patience: 5,
        }
    }
}

/// One line of the training history (serialized as JSON lines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Joint loss L (λ-weighted), mean over training samples.
    pub loss: f64,
    /// Unweighted classification component.
    pub loss_cls: f64,
    /// Unweighted segmentation components, one per head.
    pub loss_seg: Vec<f64>,
    pub val_accuracy: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Model state at the best validation accuracy.
    pub model: Model<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

fn epoch_shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ ((epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Train on `train_ds`, tracking accuracy on `val_ds`. When `out_dir` is
/// given, writes `history.jsonl`, periodic checkpoints, and the best model
/// under `best/`. Bit-deterministic for a fixed config within one build.
pub fn train(
    train_ds: &mut Dataset,
    val_ds: &mut Dataset,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    validate_weights(&cfg.weights)?;
    if cfg.weights.lambda_seg.len() != arch.num_seg_heads {
        return Err(Error::config(format!(
            "{} lambda_seg weights for {} segmentation heads",
            cfg.weights.lambda_seg.len(),
            arch.num_seg_heads
        )));
    }
    for (name, ds) in [("train", &*train_ds), ("val", &*val_ds)] {
        if ds.manifest.k != arch.num_seg_heads {
            return Err(Error::config(format!(
                "{name} manifest has k={} objectives, model has {} segmentation heads",
                ds.manifest.k, arch.num_seg_heads
            )));
        }
    }
    if cfg.epochs == 0 {
        return Err(Error::config("epochs must be positive"));
    }
    train_ds.preload()?;
    val_ds.preload()?;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut history_file = match out_dir {
        Some(dir) => {
            let path = dir.join("history.jsonl");
            Some(std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?)
        }
        None => None,
    };

    let mut model: Model<f32> = Model::build(arch, cfg.seed)?;
    let mut flat = model.flat_params();
    let mut opt = Adam::new(
        flat.len(),
        cfg.learning_rate as f32,
        cfg.beta1 as f32,
        cfg.beta2 as f32,
        cfg.adam_epsilon as f32,
    );

    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Model<f32>)> = None;
    let mut epochs_since_best = 0usize;

    for epoch in 0..cfg.epochs {
        let mut sum_loss = 0.0f64;
        let mut sum_cls = 0.0f64;
        let mut sum_seg = vec![0.0f64; arch.num_seg_heads];
        let mut seen = 0usize;

        let crop = CropMode::Random(arch.input_size);
        for batch in train_ds.batches(
            cfg.batch_size,
            crop,
            Some(epoch_shuffle_seed(cfg.seed, epoch)),
        ) {
            let batch = batch?;
            let n = batch.labels.len();
            let labels: Vec<usize> = batch.labels.iter().map(|&y| y as usize).collect();

            let mut tape = Tape::new();
            let fwd = model.forward_train(&mut tape, &batch.images)?;
            let cls = cls_loss(&mut tape, fwd.image_logits, &labels)?;
            let mut segs = Vec::with_capacity(arch.num_seg_heads);
            for head in 0..arch.num_seg_heads {
                let grids = batch
                    .masks
                    .iter()
                    .map(|sample| extract_seg_labels(&sample[head], &model.rf, fwd.grid))
                    .collect::<Result<Vec<_>>>()?;
                segs.push(seg_loss(&mut tape, fwd.seg_logits[head], &grids)?);
            }
            let loss = joint_loss(&mut tape, &cfg.weights, cls, &segs)?;

            sum_loss += tape.value_scalar(loss)? as f64 * n as f64;
            sum_cls += tape.value_scalar(cls)? as f64 * n as f64;
            for (acc, &seg) in sum_seg.iter_mut().zip(&segs) {
                *acc += tape.value_scalar(seg)? as f64 * n as f64;
            }
            seen += n;

            tape.backward(loss)?;
            model.accumulate_grads(&tape, &fwd.param_nodes)?;
            let grads = model.flat_grads();
            opt.step(&mut flat, &grads)?;
            model.set_flat_params(&flat)?;
            model.zero_grads();
        }

        let val = evaluate(
            &model,
            val_ds,
            PredictMode::Classifier,
            0,
            0.5,
            None,
            cfg.batch_size,
        )?;
        let total = seen.max(1) as f64;
        let record = EpochRecord {
            epoch,
            loss: sum_loss / total,
            loss_cls: sum_cls / total,
            loss_seg: sum_seg.iter().map(|s| s / total).collect(),
            val_accuracy: val.accuracy,
        };
        if let Some(file) = history_file.as_mut() {
            let line = serde_json::to_string(&record)
                .map_err(|e| Error::format(format!("history serialization: {e}")))?;
            writeln!(file, "{line}").map_err(|e| Error::io("history.jsonl", e))?;
        }
        history.push(record);

        let improved = best.as_ref().is_none_or(|(_, acc, _)| val.accuracy > *acc);
        if improved {
            best = Some((epoch, val.accuracy, model.clone()));
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
        }

        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                checkpoint::save_checkpoint(&model, &dir.join(format!("epoch_{epoch:04}")))?;
            }
        }
        if cfg.early_stop_patience > 0 && epochs_since_best >= cfg.early_stop_patience {
            break;
        }
    }

    let (best_epoch, best_val_accuracy, best_model) = best.expect("at least one epoch ran");
    if let Some(dir) = out_dir {
        checkpoint::save_checkpoint(&best_model, &dir.join("best"))?;
    }
    Ok(TrainOutcome {
        model: best_model,
        history,
        best_epoch,
        best_val_accuracy,
    })
}

// ── λ-grid ablation ────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct AblateRow {
    pub lambda_seg: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub auc: f64,
    pub iou: f64,
}

/// Train once per (λ_seg, seed) cell with a single segmentation objective
/// and report test accuracy, AUC, and head-0 IoU per run.
#[allow(clippy::too_many_arguments)]
pub fn ablate(
    train_ds: &mut Dataset,
    val_ds: &mut Dataset,
    test_ds: &mut Dataset,
    arch: &ArchConfig,
    base_cfg: &TrainConfig,
    lambdas: &[f64],
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<Vec<AblateRow>> {
    if arch.num_seg_heads != 1 {
        return Err(Error::config(format!(
            "ablation varies a single segmentation objective; model has {} heads",
            arch.num_seg_heads
        )));
    }
    test_ds.preload()?;
    let mut rows = Vec::new();
    for &lambda in lambdas {
        for &seed in seeds {
            let cfg = TrainConfig {
                weights: LossWeights::single_seg(lambda),
                seed,
                ..base_cfg.clone()
            };
            let run_dir = out_dir.map(|d| d.join(format!("lambda_{lambda:.2}_seed_{seed}")));
            let outcome = train(train_ds, val_ds, arch, &cfg, run_dir.as_deref())?;
            let metrics = evaluate(
                &outcome.model,
                test_ds,
                PredictMode::Classifier,
                0,
                0.5,
                None,
                cfg.batch_size,
            )?;
            rows.push(AblateRow {
                lambda_seg: lambda,
                seed,
                accuracy: metrics.accuracy,
                auc: metrics.auc,
                iou: metrics.seg.first().map(|s| s.iou).unwrap_or(0.0),
            });
        }
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_ablate_csv(&rows, &dir.join("ablation.csv"))?;
    }
    Ok(rows)
}

pub fn write_ablate_csv(rows: &[AblateRow], path: &Path) -> Result<()> {
    let mut out = String::from("lambda,seed,accuracy,auc,iou\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.lambda_seg, r.seed, r.accuracy, r.auc, r.iou
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
