//! Joint classification–segmentation objective: label extraction at
//! receptive-field centers, the per-head segmentation loss, the image
//! classification loss, and their convex combination.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskgen::Mask;
use crate::model::ReceptiveFieldInfo;
use crate::tensor::{NodeId, Scalar, Tape};

/// Convex combination weights of the loss terms: one classification weight
/// plus one weight per segmentation head, all in [0, 1] and summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_seg: Vec<f64>,
}

impl LossWeights {
    /// Classification only (k = 0).
    pub fn classification_only() -> Self {
        LossWeights {
            lambda_cls: 1.0,
            lambda_seg: Vec::new(),
        }
    }

    /// Single segmentation objective with weight `lambda_seg`.
    pub fn single_seg(lambda_seg: f64) -> Self {
        LossWeights {
            lambda_cls: 1.0 - lambda_seg,
            lambda_seg: vec![lambda_seg],
        }
    }
}

pub fn validate_weights(weights: &LossWeights) -> Result<()> {
    let all = std::iter::once(weights.lambda_cls).chain(weights.lambda_seg.iter().copied());
    for v in all {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::config(format!("loss weight {v} outside [0, 1]")));
        }
    }
    let sum: f64 = weights.lambda_cls + weights.lambda_seg.iter().sum::<f64>();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "loss weights must sum to 1, got {sum}"
        )));
    }
    Ok(())
}

/// Per-location binary labels on the segmentation output grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegLabelGrid {
    pub gh: usize,
    pub gw: usize,
    pub labels: Vec<u8>,
}

impl SegLabelGrid {
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.labels[i * self.gw + j]
    }
}

/// Sample the mask at the receptive-field center of each output location:
/// `label(i, j) = mask[offset + jump·i][offset + jump·j]`.
pub fn extract_seg_labels(
    mask: &Mask,
    rf: &ReceptiveFieldInfo,
    grid: (usize, usize),
) -> Result<SegLabelGrid> {
    let (gh, gw) = grid;
    let offset = rf.final_center_offset;
    let jump = rf.final_jump;
    let last_row = offset + jump * (gh.saturating_sub(1));
    let last_col = offset + jump * (gw.saturating_sub(1));
    if last_row >= mask.height() || last_col >= mask.width() {
        return Err(Error::dim(format!(
            "mask {}x{} too small to sample a {gh}x{gw} grid \
             (offset {offset}, jump {jump} reaches ({last_row},{last_col}))",
            mask.height(),
            mask.width()
        )));
    }
    let mut labels = Vec::with_capacity(gh * gw);
    for i in 0..gh {
        for j in 0..gw {
            labels.push(mask.get(offset + jump * i, offset + jump * j));
        }
    }
    Ok(SegLabelGrid { gh, gw, labels })
}

/// Mean cross-entropy over every grid location and every sample in the
/// batch. `seg_logits` must be an `n×2×gh×gw` node; one label grid per
/// sample.
pub fn seg_loss<T: Scalar>(
    tape: &mut Tape<T>,
    seg_logits: NodeId,
    labels: &[SegLabelGrid],
) -> Result<NodeId> {
    let shape = tape.shape(seg_logits).to_vec();
    let (n, gh, gw) = match shape.as_slice() {
        &[n, 2, gh, gw] => (n, gh, gw),
        other => {
            return Err(Error::dim(format!(
                "seg_loss expects n×2×gh×gw logits, got {other:?}"
            )))
        }
    };
    if labels.len() != n {
        return Err(Error::dim(format!(
            "{} label grids for batch of {n}",
            labels.len()
        )));
    }
    let mut flat = Vec::with_capacity(n * gh * gw);
    for grid in labels {
        if grid.gh != gh || grid.gw != gw {
            return Err(Error::dim(format!(
                "label grid {}x{} does not match logit grid {gh}x{gw}",
                grid.gh, grid.gw
            )));
        }
        flat.extend_from_slice(&grid.labels);
    }
    tape.cross_entropy_grid(seg_logits, &flat)
}

/// Image-level cross-entropy over `n×2` logits.
pub fn cls_loss<T: Scalar>(
    tape: &mut Tape<T>,
    image_logits: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    tape.cross_entropy(image_logits, labels)
}

/// `L = λ_cls·L_cls + Σ_k λ_seg_k·L_seg_k`; gradient flows through every
/// term.
pub fn joint_loss<T: Scalar>(
    tape: &mut Tape<T>,
    weights: &LossWeights,
    cls: NodeId,
    segs: &[NodeId],
) -> Result<NodeId> {
    validate_weights(weights)?;
    if segs.len() != weights.lambda_seg.len() {
        return Err(Error::dim(format!(
            "{} segmentation losses for {} lambda_seg weights",
            segs.len(),
            weights.lambda_seg.len()
        )));
    }
    let mut terms = vec![(cls, T::from_f64(weights.lambda_cls))];
    for (&seg, &lambda) in segs.iter().zip(&weights.lambda_seg) {
        terms.push((seg, T::from_f64(lambda)));
    }
    tape.weighted_sum(&terms)
}
