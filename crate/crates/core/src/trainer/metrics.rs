//! Classification metrics: accuracy/confusion at a fixed threshold, PR and
//! ROC curves swept over the observed scores, trapezoidal AUC, and
//! per-head segmentation pixel accuracy and IoU.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::dataio::{CropMode, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objective::extract_seg_labels;
use crate::tensor::Tensor;

/// How an image-level fake score is read off the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    /// Softmax of the image classifier head, probability of class 1.
    Classifier,
    /// Mean over the output grid of the per-location fake probability from
    /// a segmentation head.
    SegMean,
}

impl PredictMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "classifier" => Ok(PredictMode::Classifier),
            "seg-mean" | "seg_mean" => Ok(PredictMode::SegMean),
            other => Err(Error::config(format!(
                "unknown mode `{other}` (expected classifier or seg-mean)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct SegMetrics {
    pub pixel_accuracy: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub n_samples: usize,
    pub accuracy: f64,
    pub confusion: ConfusionCounts,
    pub auc: f64,
    pub pr: Vec<PrPoint>,
    pub roc: Vec<RocPoint>,
    /// One entry per segmentation head.
    pub seg: Vec<SegMetrics>,
}

fn stable_p1(l0: f32, l1: f32) -> f64 {
    let m = l0.max(l1);
    let e0 = (l0 - m).exp() as f64;
    let e1 = (l1 - m).exp() as f64;
    e1 / (e0 + e1)
}

/// Image-level fake probabilities for a whole forward batch.
pub fn batch_scores(
    output: &crate::model::ForwardOutput<f32>,
    mode: PredictMode,
    head: usize,
) -> Result<Vec<f64>> {
    let n = output.image_logits.shape()[0];
    match mode {
        PredictMode::Classifier => {
            let l = output.image_logits.data();
            Ok((0..n).map(|i| stable_p1(l[i * 2], l[i * 2 + 1])).collect())
        }
        PredictMode::SegMean => {
            let logits = output.seg_logits.get(head).ok_or_else(|| {
                Error::config(format!(
                    "segmentation head {head} requested, model has {}",
                    output.seg_logits.len()
                ))
            })?;
            let (gh, gw) = output.grid;
            let g = gh * gw;
            let d = logits.data();
            Ok((0..n)
                .map(|i| {
                    let base = i * 2 * g;
                    let mut sum = 0.0f64;
                    for j in 0..g {
                        sum += stable_p1(d[base + j], d[base + g + j]);
                    }
                    sum / g as f64
                })
                .collect())
        }
    }
}

/// Fake probability of a single `3×H×W` image.
pub fn predict_image(
    model: &Model<f32>,
    image: &Tensor<f32>,
    mode: PredictMode,
    head: usize,
) -> Result<f64> {
    let shape = image.shape().to_vec();
    let (c, h, w) = match shape.as_slice() {
        &[c, h, w] => (c, h, w),
        other => {
            return Err(Error::dim(format!(
                "expected 3-d image, got shape {other:?}"
            )))
        }
    };
    let batch = Tensor::from_vec(vec![1, c, h, w], image.data().to_vec())?;
    let output = model.forward_eval(&batch)?;
    Ok(batch_scores(&output, mode, head)?[0])
}

/// Confusion counts of thresholded scores (positive when score ≥ threshold).
pub fn confusion_at(scores: &[f64], labels: &[u8], threshold: f64) -> ConfusionCounts {
    let mut confusion = ConfusionCounts {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (s, &y) in scores.iter().zip(labels) {
        let pred = u8::from(*s >= threshold);
        match (y, pred) {
            (1, 1) => confusion.tp += 1,
            (0, 1) => confusion.fp += 1,
            (0, 0) => confusion.tn += 1,
            _ => confusion.fn_ += 1,
        }
    }
    confusion
}

/// ROC and PR points at every distinct observed score (descending) plus the
/// trapezoidal AUC. Equal scores share one threshold group, which makes the
/// AUC equal the tie-aware Mann-Whitney statistic.
pub fn roc_pr_auc(scores: &[f64], labels: &[u8]) -> (Vec<RocPoint>, Vec<PrPoint>, f64) {
    let p = labels.iter().filter(|&&y| y == 1).count() as f64;
    let n = labels.iter().filter(|&&y| y == 0).count() as f64;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut roc = Vec::new();
    let mut pr = Vec::new();
    let mut tp = 0.0f64;
    let mut fp = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let tpr = if p > 0.0 { tp / p } else { 0.0 };
        let fpr = if n > 0.0 { fp / n } else { 0.0 };
        roc.push(RocPoint {
            threshold,
            fpr,
            tpr,
        });
        pr.push(PrPoint {
            threshold,
            precision: if tp + fp > 0.0 { tp / (tp + fp) } else { 1.0 },
            recall: tpr,
        });
    }

    let auc = if p == 0.0 || n == 0.0 {
        0.5
    } else {
        let mut area = 0.0;
        let mut prev = (0.0f64, 0.0f64);
        for pt in &roc {
            area += (pt.fpr - prev.0) * (pt.tpr + prev.1) / 2.0;
            prev = (pt.fpr, pt.tpr);
        }
        area
    };
    (roc, pr, auc)
}

/// Score every sample of a dataset. Images are center-cropped to
/// `crop.unwrap_or(manifest.crop_size)`.
pub fn score_dataset(
    model: &Model<f32>,
    dataset: &Dataset,
    mode: PredictMode,
    head: usize,
    crop: Option<usize>,
    batch_size: usize,
) -> Result<(Vec<f64>, Vec<u8>)> {
    let size = crop.unwrap_or(dataset.manifest.crop_size);
    let mut scores = Vec::with_capacity(dataset.len());
    let mut labels = Vec::with_capacity(dataset.len());
    for batch in dataset.batches(batch_size, CropMode::Center(size), None) {
        let batch = batch?;
        let output = model.forward_eval(&batch.images)?;
        scores.extend(batch_scores(&output, mode, head)?);
        labels.extend_from_slice(&batch.labels);
    }
    Ok((scores, labels))
}

/// Full evaluation: accuracy and confusion at `threshold`, PR/ROC/AUC over
/// the observed scores, and segmentation pixel-accuracy/IoU per head
/// against the manifest's masks.
pub fn evaluate(
    model: &Model<f32>,
    dataset: &Dataset,
    mode: PredictMode,
    head: usize,
    threshold: f64,
    crop: Option<usize>,
    batch_size: usize,
) -> Result<Metrics> {
    let size = crop.unwrap_or(dataset.manifest.crop_size);
    let k = dataset.manifest.k;
    let mut scores = Vec::with_capacity(dataset.len());
    let mut labels = Vec::with_capacity(dataset.len());
    // Per head: (correct, total, tp, fp, fn)
    let mut seg_counts = vec![(0u64, 0u64, 0u64, 0u64, 0u64); k];

    for batch in dataset.batches(batch_size, CropMode::Center(size), None) {
        let batch = batch?;
        let output = model.forward_eval(&batch.images)?;
        scores.extend(batch_scores(&output, mode, head)?);
        labels.extend_from_slice(&batch.labels);

        let (gh, gw) = output.grid;
        for (hi, counts) in seg_counts.iter_mut().enumerate() {
            let logits = &output.seg_logits[hi];
            let d = logits.data();
            let g = gh * gw;
            for (bi, sample_masks) in batch.masks.iter().enumerate() {
                let grid = extract_seg_labels(&sample_masks[hi], &model.rf, (gh, gw))?;
                let base = bi * 2 * g;
                for j in 0..g {
                    let pred = u8::from(d[base + g + j] > d[base + j]);
                    let truth = grid.labels[j];
                    counts.1 += 1;
                    if pred == truth {
                        counts.0 += 1;
                    }
                    match (truth, pred) {
                        (1, 1) => counts.2 += 1,
                        (0, 1) => counts.3 += 1,
                        (1, 0) => counts.4 += 1,
                        _ => {}
                    }
                }
            }
        }
    }

    let confusion = confusion_at(&scores, &labels, threshold);
    let total = scores.len().max(1) as f64;
    let accuracy = (confusion.tp + confusion.tn) as f64 / total;
    let (roc, pr, auc) = roc_pr_auc(&scores, &labels);
    let seg = seg_counts
        .iter()
        .map(|&(correct, count, tp, fp, fn_)| SegMetrics {
            pixel_accuracy: correct as f64 / count.max(1) as f64,
            iou: tp as f64 / (tp + fp + fn_).max(1) as f64,
        })
        .collect();

    Ok(Metrics {
        n_samples: scores.len(),
        accuracy,
        confusion,
        auc,
        pr,
        roc,
        seg,
    })
}

/// Accuracy of one (size, mode) evaluation cell.
#[derive(Debug, Clone, Serialize)]
pub struct SizeAccuracy {
    pub size: usize,
    pub mode: String,
    pub accuracy: f64,
}

/// Evaluate at several center-crop sizes in both prediction modes.
pub fn evaluate_at_sizes(
    model: &Model<f32>,
    dataset: &Dataset,
    sizes: &[usize],
    head: usize,
    threshold: f64,
    batch_size: usize,
) -> Result<Vec<SizeAccuracy>> {
    let mut rows = Vec::new();
    for &size in sizes {
        for (mode, name) in [
            (PredictMode::Classifier, "classifier"),
            (PredictMode::SegMean, "seg-mean"),
        ] {
            let (scores, labels) =
                score_dataset(model, dataset, mode, head, Some(size), batch_size)?;
            let correct = scores
                .iter()
                .zip(&labels)
                .filter(|(s, &y)| u8::from(**s >= threshold) == y)
                .count();
            rows.push(SizeAccuracy {
                size,
                mode: name.to_string(),
                accuracy: correct as f64 / scores.len().max(1) as f64,
            });
        }
    }
    Ok(rows)
}

pub fn write_pr_csv(points: &[PrPoint], path: &Path) -> Result<()> {
    let mut out = String::from("threshold,precision,recall\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.precision, p.recall));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_roc_csv(points: &[RocPoint], path: &Path) -> Result<()> {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_metrics_json(metrics: &Metrics, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let text = serde_json::to_string_pretty(metrics)
        .map_err(|e| Error::format(format!("metrics serialization: {e}")))?;
    file.write_all(text.as_bytes())
        .map_err(|e| Error::io(path, e))
}
