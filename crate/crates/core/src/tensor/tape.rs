//! Wengert-style tape: ops append nodes in execution order, backward
//! replays them in reverse exactly once. Values of large intermediates are
//! released as soon as their backward step has consumed them.

use std::mem;

use crate::error::{Error, Result};

use super::kernels::{self, BnSaved, Mode};
use super::{BatchNormState, Scalar, Tensor};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum OpRecord<T: Scalar> {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    MaxPool2d {
        input: NodeId,
        argmax: Vec<u32>,
    },
    Relu {
        input: NodeId,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        saved: BnSaved<T>,
        mode: Mode,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    Affine {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Softmax {
        input: NodeId,
        axis: usize,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
    CrossEntropyGrid {
        logits: NodeId,
        labels: Vec<u8>,
    },
    WeightedSum {
        terms: Vec<(NodeId, T)>,
    },
    SumScaled {
        input: NodeId,
        coeffs: Vec<T>,
    },
    /// Placeholder left behind once backward has consumed the record.
    Consumed,
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    op: OpRecord<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Value of a node. Large intermediate values are dropped during
    /// backward; reading them afterwards panics.
    pub fn value(&self, id: NodeId) -> &[T] {
        let node = &self.nodes[id.0];
        assert!(
            !node.value.is_empty() || node.shape.iter().product::<usize>() == 0,
            "node value was released by backward"
        );
        &node.value
    }

    pub fn value_scalar(&self, id: NodeId) -> Result<T> {
        let node = &self.nodes[id.0];
        if node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "expected scalar node, got shape {:?}",
                node.shape
            )));
        }
        Ok(node.value[0])
    }

    /// Gradient of the last backward pass w.r.t. the node, if it was
    /// reachable and marked as requiring gradients.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        value: Vec<T>,
        op: OpRecord<T>,
        needs_grad: bool,
    ) -> NodeId {
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check_finite(&self, id: NodeId, op: &'static str) -> Result<NodeId> {
        if self.nodes[id.0].value.iter().all(|v| v.is_finite()) {
            Ok(id)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    // ── Leaves ─────────────────────────────────────────────────────

    /// Register a tensor as a leaf; its data is copied onto the tape.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Result<NodeId> {
        if !tensor.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            OpRecord::Leaf,
            tensor.requires_grad(),
        ))
    }

    /// Leaf that never receives gradients (input batches, constants).
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<T>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != value.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                value.len()
            )));
        }
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "constant" });
        }
        Ok(self.push(shape, value, OpRecord::Leaf, false))
    }

    // ── Layer ops ──────────────────────────────────────────────────

    /// Valid cross-correlation, stride 1, no padding:
    /// `n×cin×h×w ⋆ cout×cin×k×k + cout → n×cout×(h−k+1)×(w−k+1)`.
    pub fn conv2d_valid(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, cin, h, w) = dims4(&self.nodes[input.0].shape)?;
        let ws = self.nodes[weight.0].shape.clone();
        let (cout, wcin, kh, kw) = dims4(&ws)?;
        if kh != kw {
            return Err(Error::dim(format!(
                "conv kernel must be square, got {kh}x{kw}"
            )));
        }
        let k = kh;
        if wcin != cin {
            return Err(Error::dim(format!(
                "conv input has {cin} channels but weight expects {wcin}"
            )));
        }
        if k > h || k > w {
            return Err(Error::dim(format!(
                "conv kernel {k} exceeds spatial extent {h}x{w}"
            )));
        }
        if self.nodes[bias.0].shape != [cout] {
            return Err(Error::dim(format!(
                "conv bias shape {:?} does not match {cout} output channels",
                self.nodes[bias.0].shape
            )));
        }
        let out = kernels::conv2d_forward(
            &self.nodes[input.0].value,
            n,
            cin,
            h,
            w,
            &self.nodes[weight.0].value,
            cout,
            k,
            &self.nodes[bias.0].value,
        );
        let needs = self.any_needs(&[input, weight, bias]);
        let id = self.push(
            vec![n, cout, h - k + 1, w - k + 1],
            out,
            OpRecord::Conv2d {
                input,
                weight,
                bias,
            },
            needs,
        );
        self.check_finite(id, "conv2d_valid")
    }

    pub fn maxpool2d(&mut self, input: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let (n, c, h, w) = dims4(&self.nodes[input.0].shape)?;
        if kernel == 0 || stride == 0 {
            return Err(Error::dim("maxpool kernel and stride must be positive"));
        }
        if kernel > h || kernel > w {
            return Err(Error::dim(format!(
                "maxpool kernel {kernel} exceeds spatial extent {h}x{w}"
            )));
        }
        let (out, argmax) =
            kernels::maxpool_forward(&self.nodes[input.0].value, n, c, h, w, kernel, stride);
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let needs = self.nodes[input.0].needs_grad;
        let id = self.push(
            vec![n, c, oh, ow],
            out,
            OpRecord::MaxPool2d { input, argmax },
            needs,
        );
        self.check_finite(id, "maxpool2d")
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let out = kernels::relu_forward(&self.nodes[input.0].value);
        let shape = self.nodes[input.0].shape.clone();
        let needs = self.nodes[input.0].needs_grad;
        let id = self.push(shape, out, OpRecord::Relu { input }, needs);
        self.check_finite(id, "relu")
    }

    /// Batch normalization over an NCHW input. `gamma`/`beta` leaves carry
    /// the learnable scale/shift; `state` supplies epsilon and running
    /// statistics, which train mode updates in place.
    pub fn batchnorm2d(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BatchNormState<T>,
        mode: Mode,
    ) -> Result<NodeId> {
        let (n, c, h, w) = dims4(&self.nodes[input.0].shape)?;
        if n * h * w == 0 {
            return Err(Error::dim("batchnorm on zero-size batch"));
        }
        if state.channels() != c {
            return Err(Error::dim(format!(
                "batchnorm state has {} channels, input has {c}",
                state.channels()
            )));
        }
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[id.0].shape != [c] {
                return Err(Error::dim(format!(
                    "batchnorm {name} shape {:?} does not match {c} channels",
                    self.nodes[id.0].shape
                )));
            }
        }
        let (out, saved) = kernels::batchnorm_forward(
            &self.nodes[input.0].value,
            n,
            c,
            h * w,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
            &state.running_mean,
            &state.running_var,
            state.epsilon,
            mode,
        );
        if mode == Mode::Train {
            let batch_var = kernels::batchnorm_batch_var(&saved, state.epsilon);
            let keep = T::one() - state.momentum;
            for (r, b) in state.running_mean.iter_mut().zip(&saved.mean) {
                *r = keep * *r + state.momentum * *b;
            }
            for (r, b) in state.running_var.iter_mut().zip(&batch_var) {
                *r = keep * *r + state.momentum * *b;
            }
        }
        let shape = self.nodes[input.0].shape.clone();
        let needs = self.any_needs(&[input, gamma, beta]);
        let id = self.push(
            shape,
            out,
            OpRecord::BatchNorm {
                input,
                gamma,
                beta,
                saved,
                mode,
            },
            needs,
        );
        self.check_finite(id, "batchnorm2d")
    }

    /// Spatial mean per channel: `n×c×h×w → n×c`.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = dims4(&self.nodes[input.0].shape)?;
        let out = kernels::global_avg_pool_forward(&self.nodes[input.0].value, n, c, h * w);
        let needs = self.nodes[input.0].needs_grad;
        let id = self.push(vec![n, c], out, OpRecord::GlobalAvgPool { input }, needs);
        self.check_finite(id, "global_avg_pool")
    }

    /// Dense layer `n×c @ (k×c)ᵀ + k → n×k`.
    pub fn affine(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, c) = dims2(&self.nodes[input.0].shape)?;
        let (k, wc) = dims2(&self.nodes[weight.0].shape)?;
        if wc != c {
            return Err(Error::dim(format!(
                "affine input has {c} features but weight expects {wc}"
            )));
        }
        if self.nodes[bias.0].shape != [k] {
            return Err(Error::dim(format!(
                "affine bias shape {:?} does not match {k} outputs",
                self.nodes[bias.0].shape
            )));
        }
        let out = kernels::affine_forward(
            &self.nodes[input.0].value,
            n,
            c,
            &self.nodes[weight.0].value,
            k,
            &self.nodes[bias.0].value,
        );
        let needs = self.any_needs(&[input, weight, bias]);
        let id = self.push(
            vec![n, k],
            out,
            OpRecord::Affine {
                input,
                weight,
                bias,
            },
            needs,
        );
        self.check_finite(id, "affine")
    }

    pub fn softmax(&mut self, input: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.nodes[input.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::dim(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let out = kernels::softmax_forward(&self.nodes[input.0].value, outer, len, inner);
        let needs = self.nodes[input.0].needs_grad;
        let id = self.push(shape, out, OpRecord::Softmax { input, axis }, needs);
        self.check_finite(id, "softmax")
    }

    /// Mean cross-entropy over rows of a `p×2` logit matrix with labels in
    /// {0,1}; log-softmax is fused for stability.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (p, classes) = dims2(&self.nodes[logits.0].shape)?;
        if classes != 2 {
            return Err(Error::dim(format!(
                "cross_entropy expects 2 classes, got {classes}"
            )));
        }
        if labels.len() != p {
            return Err(Error::dim(format!(
                "{} labels for {p} logit rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::Contract(format!("label {bad} outside {{0,1}}")));
        }
        let loss = kernels::cross_entropy_forward(&self.nodes[logits.0].value, labels, p);
        let needs = self.nodes[logits.0].needs_grad;
        let id = self.push(
            vec![1],
            vec![loss],
            OpRecord::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            needs,
        );
        self.check_finite(id, "cross_entropy")
    }

    /// Mean cross-entropy over every grid cell of an `n×2×gh×gw` logit
    /// block; `labels` is row-major `n×gh×gw` with values in {0,1}.
    pub fn cross_entropy_grid(&mut self, logits: NodeId, labels: &[u8]) -> Result<NodeId> {
        let (n, classes, gh, gw) = dims4(&self.nodes[logits.0].shape)?;
        if classes != 2 {
            return Err(Error::dim(format!(
                "cross_entropy_grid expects 2 classes, got {classes}"
            )));
        }
        if labels.len() != n * gh * gw {
            return Err(Error::dim(format!(
                "{} labels for {n}x{gh}x{gw} grid",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::Contract(format!("grid label {bad} outside {{0,1}}")));
        }
        let loss =
            kernels::cross_entropy_grid_forward(&self.nodes[logits.0].value, labels, n, gh * gw);
        let needs = self.nodes[logits.0].needs_grad;
        let id = self.push(
            vec![1],
            vec![loss],
            OpRecord::CrossEntropyGrid {
                logits,
                labels: labels.to_vec(),
            },
            needs,
        );
        self.check_finite(id, "cross_entropy_grid")
    }

    /// `Σ coeff·node` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, T)]) -> Result<NodeId> {
        if terms.is_empty() {
            return Err(Error::Contract("weighted_sum over no terms".into()));
        }
        let mut total = T::zero();
        for &(id, coeff) in terms {
            if self.nodes[id.0].value.len() != 1 {
                return Err(Error::Contract(format!(
                    "weighted_sum term must be scalar, got shape {:?}",
                    self.nodes[id.0].shape
                )));
            }
            total += coeff * self.nodes[id.0].value[0];
        }
        let needs = terms.iter().any(|&(id, _)| self.nodes[id.0].needs_grad);
        let id = self.push(
            vec![1],
            vec![total],
            OpRecord::WeightedSum {
                terms: terms.to_vec(),
            },
            needs,
        );
        self.check_finite(id, "weighted_sum")
    }

    /// `Σ coeffs[i]·x[i]`, reducing a tensor to a scalar. Used to project
    /// multi-output ops to a scalar in gradient checks.
    pub fn sum_scaled(&mut self, input: NodeId, coeffs: Vec<T>) -> Result<NodeId> {
        if coeffs.len() != self.nodes[input.0].value.len() {
            return Err(Error::dim(format!(
                "{} coefficients for {} elements",
                coeffs.len(),
                self.nodes[input.0].value.len()
            )));
        }
        let total = self.nodes[input.0]
            .value
            .iter()
            .zip(&coeffs)
            .fold(T::zero(), |acc, (&v, &c)| acc + v * c);
        let needs = self.nodes[input.0].needs_grad;
        let id = self.push(
            vec![1],
            vec![total],
            OpRecord::SumScaled { input, coeffs },
            needs,
        );
        self.check_finite(id, "sum_scaled")
    }

    // ── Backward ───────────────────────────────────────────────────

    fn any_needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.nodes[id.0].needs_grad)
    }

    fn accum(&mut self, id: NodeId, delta: Vec<T>) {
        let node = &mut self.nodes[id.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&delta) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reverse sweep from a scalar loss node. Gradients accumulate into the
    /// tape; leaf gradients stay readable via [`Tape::grad`]. May run once
    /// per tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward already ran on this tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, OpRecord::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = mem::replace(&mut self.nodes[i].op, OpRecord::Consumed);
            let contribs = self.backward_step(i, &op, &g)?;
            for (target, delta) in contribs {
                self.accum(target, delta);
            }
            // Release buffers this sweep no longer needs.
            if self.nodes[i].value.len() > 16 {
                self.nodes[i].value = Vec::new();
            }
        }
        Ok(())
    }

    fn backward_step(&self, i: usize, op: &OpRecord<T>, g: &[T]) -> Result<Vec<(NodeId, Vec<T>)>> {
        let mut out = Vec::new();
        match op {
            OpRecord::Leaf | OpRecord::Consumed => {}
            OpRecord::Conv2d {
                input,
                weight,
                bias,
            } => {
                let (n, cin, h, w) = dims4(&self.nodes[input.0].shape)?;
                let (cout, _, k, _) = dims4(&self.nodes[weight.0].shape)?;
                let need_dx = self.nodes[input.0].needs_grad;
                let (dx, dw, db) = kernels::conv2d_backward(
                    &self.nodes[input.0].value,
                    n,
                    cin,
                    h,
                    w,
                    &self.nodes[weight.0].value,
                    cout,
                    k,
                    g,
                    need_dx,
                );
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                out.push((*weight, dw));
                out.push((*bias, db));
            }
            OpRecord::MaxPool2d { input, argmax } => {
                let dx = kernels::maxpool_backward(g, argmax, self.nodes[input.0].value.len());
                out.push((*input, dx));
            }
            OpRecord::Relu { input } => {
                let dx = kernels::relu_backward(&self.nodes[input.0].value, g);
                out.push((*input, dx));
            }
            OpRecord::BatchNorm {
                input,
                gamma,
                beta,
                saved,
                mode,
            } => {
                let (n, c, h, w) = dims4(&self.nodes[input.0].shape)?;
                let (dx, dgamma, dbeta) = kernels::batchnorm_backward(
                    &self.nodes[input.0].value,
                    n,
                    c,
                    h * w,
                    &self.nodes[gamma.0].value,
                    saved,
                    g,
                    *mode,
                );
                out.push((*input, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            OpRecord::GlobalAvgPool { input } => {
                let (_, _, h, w) = dims4(&self.nodes[input.0].shape)?;
                out.push((*input, kernels::global_avg_pool_backward(g, h * w)));
            }
            OpRecord::Affine {
                input,
                weight,
                bias,
            } => {
                let (n, c) = dims2(&self.nodes[input.0].shape)?;
                let (k, _) = dims2(&self.nodes[weight.0].shape)?;
                let (dx, dw, db) = kernels::affine_backward(
                    &self.nodes[input.0].value,
                    n,
                    c,
                    &self.nodes[weight.0].value,
                    k,
                    g,
                );
                out.push((*input, dx));
                out.push((*weight, dw));
                out.push((*bias, db));
            }
            OpRecord::Softmax { input, axis } => {
                let (outer, len, inner) = split_axis(&self.nodes[i].shape, *axis);
                let dx = kernels::softmax_backward(&self.nodes[i].value, g, outer, len, inner);
                out.push((*input, dx));
            }
            OpRecord::CrossEntropy { logits, labels } => {
                let (p, _) = dims2(&self.nodes[logits.0].shape)?;
                let dl =
                    kernels::cross_entropy_backward(&self.nodes[logits.0].value, labels, p, g[0]);
                out.push((*logits, dl));
            }
            OpRecord::CrossEntropyGrid { logits, labels } => {
                let (n, _, gh, gw) = dims4(&self.nodes[logits.0].shape)?;
                let dl = kernels::cross_entropy_grid_backward(
                    &self.nodes[logits.0].value,
                    labels,
                    n,
                    gh * gw,
                    g[0],
                );
                out.push((*logits, dl));
            }
            OpRecord::WeightedSum { terms } => {
                for &(id, coeff) in terms {
                    out.push((id, vec![coeff * g[0]]));
                }
            }
            OpRecord::SumScaled { input, coeffs } => {
                out.push((*input, coeffs.iter().map(|&c| c * g[0]).collect()));
            }
        }
        Ok(out)
    }
}

fn dims2(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        &[a, b] => Ok((a, b)),
        other => Err(Error::dim(format!(
            "expected 2-d tensor, got shape {other:?}"
        ))),
    }
}

fn dims4(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape {
        &[a, b, c, d] => Ok((a, b, c, d)),
        other => Err(Error::dim(format!(
            "expected 4-d tensor, got shape {other:?}"
        ))),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::tensor::Tensor;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(&t64(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]))
            .unwrap();
        let w = tape.leaf(&t64(&[1, 1, 1, 1], &[1.0])).unwrap();
        let b = tape.leaf(&t64(&[1], &[0.0])).unwrap();
        let y = tape.conv2d_valid(x, w, b).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        assert_eq!(tape.value(y), &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t64(&[1, 1, 3, 3], &[1.0; 9])).unwrap();
        let w = tape.leaf(&t64(&[1, 1, 3, 3], &[1.0; 9])).unwrap();
        let b = tape.leaf(&t64(&[1], &[0.5])).unwrap();
        let y = tape.conv2d_valid(x, w, b).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert!((tape.value(y)[0] - 9.5).abs() < 1e-12);
    }

    #[test]
    fn conv_channel_mismatch_reports_extents() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::<f64>::zeros(vec![1, 2, 4, 4])).unwrap();
        let w = tape.leaf(&Tensor::<f64>::zeros(vec![1, 3, 3, 3])).unwrap();
        let b = tape.leaf(&Tensor::<f64>::zeros(vec![1])).unwrap();
        let err = tape.conv2d_valid(x, w, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains('3'), "got: {msg}");
    }

    #[test]
    fn conv_kernel_exceeds_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::<f64>::zeros(vec![1, 1, 2, 2])).unwrap();
        let w = tape.leaf(&Tensor::<f64>::zeros(vec![1, 1, 3, 3])).unwrap();
        let b = tape.leaf(&Tensor::<f64>::zeros(vec![1])).unwrap();
        assert!(matches!(tape.conv2d_valid(x, w, b), Err(Error::Dim(_))));
    }

    #[test]
    fn maxpool_two_by_two() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = tape.leaf(&t64(&[1, 1, 4, 4], &data)).unwrap();
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y), &[5., 7., 13., 15.]);
    }

    #[test]
    fn maxpool_constant_input() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(&Tensor::<f64>::full(vec![1, 2, 5, 5], 3.25))
            .unwrap();
        let y = tape.maxpool2d(x, 3, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2, 2]);
        assert!(tape.value(y).iter().all(|&v| v == 3.25));
    }

    #[test]
    fn maxpool_output_size_formula() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(&Tensor::<f64>::zeros(vec![1, 1, 126, 126]))
            .unwrap();
        let y = tape.maxpool2d(x, 3, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 62, 62]);
    }

    #[test]
    fn maxpool_kernel_too_large() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::<f64>::zeros(vec![1, 1, 2, 2])).unwrap();
        assert!(matches!(tape.maxpool2d(x, 3, 2), Err(Error::Dim(_))));
    }

    #[test]
    fn maxpool_tie_routes_to_first() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(&t64(&[1, 1, 2, 2], &[2.0, 2.0, 1.0, 2.0]).with_requires_grad())
            .unwrap();
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        let loss = tape.sum_scaled(y, vec![1.0]).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t64(&[1, 3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
        let neg = tape.leaf(&t64(&[2, 2], &[-1.0, -0.5, -2.0, -3.0])).unwrap();
        let z = tape.relu(neg).unwrap();
        assert!(tape.value(z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_train_normalizes_and_updates_running() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 3 * 16)
            .map(|i| (i as f64 * 0.37).sin() * 2.0 + 0.3)
            .collect();
        let x = tape.leaf(&t64(&[2, 3, 4, 4], &data)).unwrap();
        let mut state = BatchNormState::<f64>::new(3);
        let g = tape.leaf(&state.gamma.clone()).unwrap();
        let b = tape.leaf(&state.beta.clone()).unwrap();
        let y = tape.batchnorm2d(x, g, b, &mut state, Mode::Train).unwrap();
        let out = tape.value(y);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| out[(n * 3 + ch) * 16..(n * 3 + ch + 1) * 16].to_vec())
                .collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {ch} var {var}");
            assert!(state.running_mean[ch] != 0.0, "running mean updated");
            assert!(
                (state.running_var[ch] - 1.0).abs() > 1e-12,
                "running var updated"
            );
        }
    }

    #[test]
    fn batchnorm_eval_identity_stats() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..32).map(|i| i as f64 - 16.0).collect();
        let x = tape.leaf(&t64(&[1, 2, 4, 4], &data)).unwrap();
        let mut state = BatchNormState::<f64>::new(2);
        let g = tape.leaf(&state.gamma.clone()).unwrap();
        let b = tape.leaf(&state.beta.clone()).unwrap();
        let y = tape.batchnorm2d(x, g, b, &mut state, Mode::Eval).unwrap();
        let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (o, i) in tape.value(y).iter().zip(&data) {
            assert!((o - i * scale).abs() < 1e-12);
        }
    }

    #[test]
    fn global_avg_pool_examples() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(&Tensor::<f64>::full(vec![2, 3, 5, 5], 0.75))
            .unwrap();
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.shape(y), &[2, 3]);
        assert!(tape.value(y).iter().all(|&v| (v - 0.75).abs() < 1e-12));

        let one = tape.leaf(&t64(&[1, 2, 1, 1], &[3.0, -4.0])).unwrap();
        let z = tape.global_avg_pool(one).unwrap();
        assert_eq!(tape.value(z), &[3.0, -4.0]);
    }

    #[test]
    fn affine_identity_and_bias_broadcast() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let eye = tape.leaf(&t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let zero_b = tape.leaf(&t64(&[2], &[0.0, 0.0])).unwrap();
        let y = tape.affine(x, eye, zero_b).unwrap();
        assert_eq!(tape.value(y), &[1.0, 2.0, 3.0, 4.0]);

        let zero_w = tape.leaf(&Tensor::<f64>::zeros(vec![3, 2])).unwrap();
        let b = tape.leaf(&t64(&[3], &[0.5, -1.0, 2.0])).unwrap();
        let z = tape.affine(x, zero_w, b).unwrap();
        assert_eq!(tape.value(z), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t64(&[1, 2], &[0.0, 0.0])).unwrap();
        let y = tape.softmax(x, 1).unwrap();
        assert!((tape.value(y)[0] - 0.5).abs() < 1e-12);

        let x2 = tape.leaf(&t64(&[1, 2], &[0.0, 3.0f64.ln()])).unwrap();
        let y2 = tape.softmax(x2, 1).unwrap();
        assert!((tape.value(y2)[0] - 0.25).abs() < 1e-9);
        assert!((tape.value(y2)[1] - 0.75).abs() < 1e-9);

        let big = tape.leaf(&t64(&[1, 2], &[1000.0, 1000.0])).unwrap();
        let y3 = tape.softmax(big, 1).unwrap();
        assert!((tape.value(y3)[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24)
            .map(|i| ((i * 37 % 13) as f64 - 6.0) * 3.1)
            .collect();
        let x = tape.leaf(&t64(&[2, 3, 4], &data)).unwrap();
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y);
        for o in 0..2 {
            for i in 0..4 {
                let sum: f64 = (0..3).map(|j| v[(o * 3 + j) * 4 + i]).sum();
                assert!((sum - 1.0).abs() < 1e-6, "sum {sum}");
            }
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        // softmax([0, ln 3]) = (0.25, 0.75)
        let x = tape.leaf(&t64(&[1, 2], &[0.0, 3.0f64.ln()])).unwrap();
        let l = tape.cross_entropy(x, &[1]).unwrap();
        assert!((tape.value_scalar(l).unwrap() + 0.75f64.ln()).abs() < 1e-9);

        let eq = tape.leaf(&t64(&[1, 2], &[0.7, 0.7])).unwrap();
        let l2 = tape.cross_entropy(eq, &[0]).unwrap();
        assert!((tape.value_scalar(l2).unwrap() - 2.0f64.ln()).abs() < 1e-12);

        let both = tape
            .leaf(&t64(&[2, 2], &[0.0, 3.0f64.ln(), 0.7, 0.7]))
            .unwrap();
        let l3 = tape.cross_entropy(both, &[1, 0]).unwrap();
        let expect = (-(0.75f64.ln()) + 2.0f64.ln()) / 2.0;
        assert!((tape.value_scalar(l3).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(&t64(&[1, 2], &[1.0, 2.0]).with_requires_grad())
            .unwrap();
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_runs_once() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(&t64(&[1, 1], &[2.0]).with_requires_grad())
            .unwrap();
        let loss = tape.sum_scaled(x, vec![3.0]).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0]);
        assert!(tape.backward(loss).is_err());
    }

    #[test]
    fn weighted_sum_arithmetic() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::scalar(1.0)).unwrap();
        let b = tape.leaf(&Tensor::scalar(2.0)).unwrap();
        let s = tape.weighted_sum(&[(a, 0.2f64), (b, 0.8)]).unwrap();
        assert!((tape.value_scalar(s).unwrap() - 1.8).abs() < 1e-12);
    }

    #[test]
    fn non_finite_input_rejected() {
        let mut tape = Tape::<f64>::new();
        let t = Tensor::from_vec(vec![2], vec![1.0, f64::INFINITY]).unwrap();
        assert!(matches!(tape.leaf(&t), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn ops_are_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let data: Vec<f32> = (0..2 * 3 * 36)
                .map(|i| ((i * 131 % 97) as f32 - 48.0) / 17.0)
                .collect();
            let wdat: Vec<f32> = (0..4 * 3 * 9)
                .map(|i| ((i * 29 % 53) as f32 - 26.0) / 31.0)
                .collect();
            let x = tape
                .leaf(&Tensor::from_vec(vec![2, 3, 6, 6], data).unwrap())
                .unwrap();
            let w = tape
                .leaf(&Tensor::from_vec(vec![4, 3, 3, 3], wdat).unwrap())
                .unwrap();
            let b = tape.leaf(&Tensor::<f32>::zeros(vec![4])).unwrap();
            let y = tape.conv2d_valid(x, w, b).unwrap();
            tape.value(y).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn global_avg_pool_matches_naive_mean() {
        let data: Vec<f64> = (0..2 * 3 * 20)
            .map(|i| ((i * 73 % 149) as f64 - 74.0) / 30.0)
            .collect();
        let mut tape = Tape::new();
        let x = tape
            .leaf(&Tensor::from_vec(vec![2, 3, 4, 5], data.clone()).unwrap())
            .unwrap();
        let y = tape.global_avg_pool(x).unwrap();
        for (i, &got) in tape.value(y).iter().enumerate() {
            let mut sum = 0.0;
            for j in 0..20 {
                sum += data[i * 20 + j];
            }
            assert!((got - sum / 20.0).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_matches_naive_loop() {
        let x: Vec<f64> = (0..3 * 5).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let w: Vec<f64> = (0..4 * 5).map(|i| ((i * 13 % 17) as f64 - 8.0) / 9.0).collect();
        let b: Vec<f64> = vec![0.1, -0.2, 0.3, -0.4];
        let mut tape = Tape::new();
        let xi = tape.leaf(&Tensor::from_vec(vec![3, 5], x.clone()).unwrap()).unwrap();
        let wi = tape.leaf(&Tensor::from_vec(vec![4, 5], w.clone()).unwrap()).unwrap();
        let bi = tape.leaf(&Tensor::from_vec(vec![4], b.clone()).unwrap()).unwrap();
        let y = tape.affine(xi, wi, bi).unwrap();
        let got = tape.value(y);
        for n in 0..3 {
            for k in 0..4 {
                let mut acc = b[k];
                for c in 0..5 {
                    acc += x[n * 5 + c] * w[k * 5 + c];
                }
                let rel = (got[n * 4 + k] - acc).abs() / acc.abs().max(1.0);
                assert!(rel < 1e-12, "at ({n},{k})");
            }
        }
    }

    #[test]
    fn fused_cross_entropy_equals_softmax_then_log() {
        // the fused path and explicit softmax-then-−log(p[y]) are the same
        // function; only the arithmetic differs
        let logits = [0.37f64, -1.4, 2.2, 2.3, -0.5, -0.51];
        let labels = [1usize, 0, 1];
        let mut tape = Tape::new();
        let l = tape
            .leaf(&Tensor::from_vec(vec![3, 2], logits.to_vec()).unwrap())
            .unwrap();
        let fused = tape.cross_entropy(l, &labels).unwrap();
        let probs = tape.softmax(l, 1).unwrap();
        let p = tape.value(probs);
        let explicit = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -p[i * 2 + y].ln())
            .sum::<f64>()
            / 3.0;
        assert!((tape.value_scalar(fused).unwrap() - explicit).abs() < 1e-12);
    }
}
