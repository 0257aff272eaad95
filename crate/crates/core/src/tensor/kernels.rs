//! Raw layer kernels shared by the tape (training) and the tape-free
//! evaluation path. Convolution and the dense layer go through GEMM;
//! batches are split across threads sample by sample, and cross-sample
//! reductions run in a fixed order so results do not depend on the
//! thread count.

use rayon::prelude::*;

use super::Scalar;

/// Batch-statistics behaviour of batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

// ── im2col / col2im ────────────────────────────────────────────────

/// Unroll valid 33-style patches of one `cin×h×w` image into a
/// `(cin*k*k) × (oh*ow)` matrix, stride 1, no padding.
pub fn im2col<T: Scalar>(input: &[T], cin: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let oh = h - k + 1;
    let ow = w - k + 1;
    debug_assert_eq!(col.len(), cin * k * k * oh * ow);
    for c in 0..cin {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for dy in 0..k {
            for dx in 0..k {
                let row = (c * k + dy) * k + dx;
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let src = &plane[(y + dy) * w + dx..(y + dy) * w + dx + ow];
                    dst[y * ow..(y + 1) * ow].copy_from_slice(src);
                }
            }
        }
    }
}

/// Scatter-add the column matrix back onto a `cin×h×w` gradient image.
fn col2im_add<T: Scalar>(col: &[T], cin: usize, h: usize, w: usize, k: usize, out: &mut [T]) {
    let oh = h - k + 1;
    let ow = w - k + 1;
    for c in 0..cin {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for dy in 0..k {
            for dx in 0..k {
                let row = (c * k + dy) * k + dx;
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let dst = &mut plane[(y + dy) * w + dx..(y + dy) * w + dx + ow];
                    for (d, s) in dst.iter_mut().zip(&src[y * ow..(y + 1) * ow]) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

// ── Convolution (valid, stride 1) ──────────────────────────────────

/// Cross-correlation of an NCHW batch with an `cout×cin×k×k` kernel plus
/// per-channel bias. Output is `n×cout×(h-k+1)×(w-k+1)`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    k: usize,
    bias: &[T],
) -> Vec<T> {
    let oh = h - k + 1;
    let ow = w - k + 1;
    let spatial = oh * ow;
    let ck2 = cin * k * k;
    let mut out = vec![T::zero(); n * cout * spatial];
    out.par_chunks_mut(cout * spatial)
        .enumerate()
        .for_each(|(i, out_n)| {
            let mut col = vec![T::zero(); ck2 * spatial];
            im2col(
                &input[i * cin * h * w..(i + 1) * cin * h * w],
                cin,
                h,
                w,
                k,
                &mut col,
            );
            T::gemm(cout, ck2, spatial, T::one(), weight, &col, T::zero(), out_n);
            for oc in 0..cout {
                let b = bias[oc];
                for v in &mut out_n[oc * spatial..(oc + 1) * spatial] {
                    *v += b;
                }
            }
        });
    out
}

/// Per-sample conv gradients: optional d-input, d-weight, d-bias.
type ConvPartials<T> = (Option<Vec<T>>, Vec<T>, Vec<T>);

/// Gradients of [`conv2d_forward`] w.r.t. input, weight, and bias.
/// `need_dx` skips the input gradient when the input is not a parameter
/// path (the first layer's image batch).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    k: usize,
    d_out: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let oh = h - k + 1;
    let ow = w - k + 1;
    let spatial = oh * ow;
    let ck2 = cin * k * k;
    let image = cin * h * w;

    // Per-sample partials, reduced afterwards in index order.
    let partials: Vec<ConvPartials<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = &input[i * image..(i + 1) * image];
            let dy = &d_out[i * cout * spatial..(i + 1) * cout * spatial];

            let mut col = vec![T::zero(); ck2 * spatial];
            im2col(x, cin, h, w, k, &mut col);

            // dW_i = dY_i @ colᵀ
            let mut dw = vec![T::zero(); cout * ck2];
            T::gemm_b_t(cout, spatial, ck2, T::one(), dy, &col, T::zero(), &mut dw);

            let mut db = vec![T::zero(); cout];
            for oc in 0..cout {
                let mut acc = T::zero();
                for v in &dy[oc * spatial..(oc + 1) * spatial] {
                    acc += *v;
                }
                db[oc] = acc;
            }

            let dx = if need_dx {
                // dcol = Wᵀ @ dY_i, then scatter back to image layout
                let mut dcol = vec![T::zero(); ck2 * spatial];
                T::gemm_a_t(
                    ck2,
                    cout,
                    spatial,
                    T::one(),
                    weight,
                    dy,
                    T::zero(),
                    &mut dcol,
                );
                let mut dxi = vec![T::zero(); image];
                col2im_add(&dcol, cin, h, w, k, &mut dxi);
                Some(dxi)
            } else {
                None
            };
            (dx, dw, db)
        })
        .collect();

    let mut dx_all = need_dx.then(|| vec![T::zero(); n * image]);
    let mut dw_total = vec![T::zero(); cout * ck2];
    let mut db_total = vec![T::zero(); cout];
    for (i, (dx, dw, db)) in partials.into_iter().enumerate() {
        if let (Some(buf), Some(dxi)) = (dx_all.as_mut(), dx) {
            buf[i * image..(i + 1) * image].copy_from_slice(&dxi);
        }
        for (t, v) in dw_total.iter_mut().zip(&dw) {
            *t += *v;
        }
        for (t, v) in db_total.iter_mut().zip(&db) {
            *t += *v;
        }
    }
    (dx_all, dw_total, db_total)
}

// ── Max pooling ────────────────────────────────────────────────────

/// Valid max pooling. Returns the pooled values and, for the backward
/// pass, the flat input index of each selected element (first occurrence
/// in row-major window order on ties).
pub fn maxpool_forward<T: Scalar>(
    input: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
) -> (Vec<T>, Vec<u32>) {
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut arg = vec![0u32; n * c * oh * ow];
    for i in 0..n * c {
        let plane = &input[i * h * w..(i + 1) * h * w];
        let out_plane = &mut out[i * oh * ow..(i + 1) * oh * ow];
        let arg_plane = &mut arg[i * oh * ow..(i + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let mut best = plane[y * stride * w + x * stride];
                let mut best_idx = (y * stride * w + x * stride) as u32;
                for dy in 0..kernel {
                    for dx in 0..kernel {
                        let idx = (y * stride + dy) * w + x * stride + dx;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx as u32;
                        }
                    }
                }
                out_plane[y * ow + x] = best;
                arg_plane[y * ow + x] = (i * h * w) as u32 + best_idx;
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward<T: Scalar>(d_out: &[T], argmax: &[u32], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (g, &idx) in d_out.iter().zip(argmax) {
        dx[idx as usize] += *g;
    }
    dx
}

// ── Elementwise ────────────────────────────────────────────────────

pub fn relu_forward<T: Scalar>(input: &[T]) -> Vec<T> {
    input
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect()
}

pub fn relu_backward<T: Scalar>(input: &[T], d_out: &[T]) -> Vec<T> {
    input
        .iter()
        .zip(d_out)
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect()
}

// ── Batch normalization ────────────────────────────────────────────

/// Per-channel statistics saved by the forward pass for backward.
pub struct BnSaved<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Normalize per channel over batch×H×W. In train mode uses batch
/// statistics (biased variance) and returns them so the caller can update
/// running stats; in eval mode uses the provided running statistics.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward<T: Scalar>(
    input: &[T],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    epsilon: T,
    mode: Mode,
) -> (Vec<T>, BnSaved<T>) {
    let m = n * hw;
    let mut mean = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    match mode {
        Mode::Train => {
            let count = T::from_f64(m as f64);
            for ch in 0..c {
                let mut sum = T::zero();
                for i in 0..n {
                    let plane = &input[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                    for &v in plane {
                        sum += v;
                    }
                }
                let mu = sum / count;
                let mut var = T::zero();
                for i in 0..n {
                    let plane = &input[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                    for &v in plane {
                        let d = v - mu;
                        var += d * d;
                    }
                }
                mean[ch] = mu;
                inv_std[ch] = T::one() / (var / count + epsilon).sqrt();
            }
        }
        Mode::Eval => {
            for ch in 0..c {
                mean[ch] = running_mean[ch];
                inv_std[ch] = T::one() / (running_var[ch] + epsilon).sqrt();
            }
        }
    }
    let mut out = vec![T::zero(); input.len()];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let (mu, istd, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for j in 0..hw {
                out[off + j] = (input[off + j] - mu) * istd * g + b;
            }
        }
    }
    (out, BnSaved { mean, inv_std })
}

/// Batch statistics of the forward pass in train mode, for the running
/// stats update (`running ← (1-momentum)·running + momentum·batch`).
pub fn batchnorm_batch_var<T: Scalar>(saved: &BnSaved<T>, epsilon: T) -> Vec<T> {
    saved
        .inv_std
        .iter()
        .map(|&istd| T::one() / (istd * istd) - epsilon)
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward<T: Scalar>(
    input: &[T],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[T],
    saved: &BnSaved<T>,
    d_out: &[T],
    mode: Mode,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = n * hw;
    let count = T::from_f64(m as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = vec![T::zero(); input.len()];
    for ch in 0..c {
        let mu = saved.mean[ch];
        let istd = saved.inv_std[ch];
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for i in 0..n {
            let off = (i * c + ch) * hw;
            for j in 0..hw {
                let dy = d_out[off + j];
                sum_dy += dy;
                sum_dy_xhat += dy * (input[off + j] - mu) * istd;
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let g = gamma[ch];
        match mode {
            Mode::Train => {
                // Batch statistics depend on x, so the full Jacobian applies.
                for i in 0..n {
                    let off = (i * c + ch) * hw;
                    for j in 0..hw {
                        let xhat = (input[off + j] - mu) * istd;
                        dx[off + j] = g * istd / count
                            * (count * d_out[off + j] - sum_dy - xhat * sum_dy_xhat);
                    }
                }
            }
            Mode::Eval => {
                // Running statistics are constants.
                for i in 0..n {
                    let off = (i * c + ch) * hw;
                    for j in 0..hw {
                        dx[off + j] = d_out[off + j] * g * istd;
                    }
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ── Global average pooling ─────────────────────────────────────────

pub fn global_avg_pool_forward<T: Scalar>(input: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let count = T::from_f64(hw as f64);
    let mut out = vec![T::zero(); n * c];
    for i in 0..n * c {
        let mut sum = T::zero();
        for &v in &input[i * hw..(i + 1) * hw] {
            sum += v;
        }
        out[i] = sum / count;
    }
    out
}

pub fn global_avg_pool_backward<T: Scalar>(d_out: &[T], hw: usize) -> Vec<T> {
    let count = T::from_f64(hw as f64);
    let mut dx = vec![T::zero(); d_out.len() * hw];
    for (i, &g) in d_out.iter().enumerate() {
        let v = g / count;
        for d in &mut dx[i * hw..(i + 1) * hw] {
            *d = v;
        }
    }
    dx
}

// ── Dense layer ────────────────────────────────────────────────────

/// `out[n,k] = input[n,c] @ weightᵀ[c,k] + bias[k]` with weight stored `k×c`.
pub fn affine_forward<T: Scalar>(
    input: &[T],
    n: usize,
    c: usize,
    weight: &[T],
    k: usize,
    bias: &[T],
) -> Vec<T> {
    let mut out = vec![T::zero(); n * k];
    T::gemm_b_t(n, c, k, T::one(), input, weight, T::zero(), &mut out);
    for row in out.chunks_mut(k) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    out
}

pub fn affine_backward<T: Scalar>(
    input: &[T],
    n: usize,
    c: usize,
    weight: &[T],
    k: usize,
    d_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); n * c];
    T::gemm(n, k, c, T::one(), d_out, weight, T::zero(), &mut dx);
    let mut dw = vec![T::zero(); k * c];
    T::gemm_a_t(k, n, c, T::one(), d_out, input, T::zero(), &mut dw);
    let mut db = vec![T::zero(); k];
    for row in d_out.chunks(k) {
        for (b, &v) in db.iter_mut().zip(row) {
            *b += v;
        }
    }
    (dx, dw, db)
}

// ── Softmax / cross-entropy ────────────────────────────────────────

/// Softmax along `axis` of a tensor viewed as (outer, len, inner),
/// computed with max subtraction.
pub fn softmax_forward<T: Scalar>(input: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); input.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut max = input[at(0)];
            for j in 1..len {
                if input[at(j)] > max {
                    max = input[at(j)];
                }
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (input[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[at(j)] /= sum;
            }
        }
    }
    out
}

/// `dx = y ⊙ (dy − Σ_axis dy⊙y)` for `y = softmax(x)`.
pub fn softmax_backward<T: Scalar>(
    output: &[T],
    d_out: &[T],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); output.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                dot += d_out[at(j)] * output[at(j)];
            }
            for j in 0..len {
                dx[at(j)] = output[at(j)] * (d_out[at(j)] - dot);
            }
        }
    }
    dx
}

/// Mean of `−log softmax(logits)[label]` over `p` rows of two logits each,
/// with a fused, max-shifted log-softmax.
pub fn cross_entropy_forward<T: Scalar>(logits: &[T], labels: &[usize], p: usize) -> T {
    let mut total = T::zero();
    for (row, &y) in (0..p).zip(labels) {
        let l0 = logits[row * 2];
        let l1 = logits[row * 2 + 1];
        let m = if l0 > l1 { l0 } else { l1 };
        let lse = ((l0 - m).exp() + (l1 - m).exp()).ln() + m;
        let ly = if y == 0 { l0 } else { l1 };
        total += lse - ly;
    }
    total / T::from_f64(p as f64)
}

pub fn cross_entropy_backward<T: Scalar>(logits: &[T], labels: &[usize], p: usize, g: T) -> Vec<T> {
    let scale = g / T::from_f64(p as f64);
    let mut dl = vec![T::zero(); p * 2];
    for (row, &y) in (0..p).zip(labels) {
        let l0 = logits[row * 2];
        let l1 = logits[row * 2 + 1];
        let m = if l0 > l1 { l0 } else { l1 };
        let e0 = (l0 - m).exp();
        let e1 = (l1 - m).exp();
        let sum = e0 + e1;
        let p0 = e0 / sum;
        let p1 = e1 / sum;
        dl[row * 2] = (p0 - if y == 0 { T::one() } else { T::zero() }) * scale;
        dl[row * 2 + 1] = (p1 - if y == 1 { T::one() } else { T::zero() }) * scale;
    }
    dl
}

/// Cross-entropy over an `n×2×g` logit block (g grid cells per sample),
/// averaged over all n·g positions. `labels` is length n·g, values 0/1.
pub fn cross_entropy_grid_forward<T: Scalar>(logits: &[T], labels: &[u8], n: usize, g: usize) -> T {
    let mut total = T::zero();
    for i in 0..n {
        let base = i * 2 * g;
        for j in 0..g {
            let l0 = logits[base + j];
            let l1 = logits[base + g + j];
            let m = if l0 > l1 { l0 } else { l1 };
            let lse = ((l0 - m).exp() + (l1 - m).exp()).ln() + m;
            let ly = if labels[i * g + j] == 0 { l0 } else { l1 };
            total += lse - ly;
        }
    }
    total / T::from_f64((n * g) as f64)
}

pub fn cross_entropy_grid_backward<T: Scalar>(
    logits: &[T],
    labels: &[u8],
    n: usize,
    g: usize,
    grad: T,
) -> Vec<T> {
    let scale = grad / T::from_f64((n * g) as f64);
    let mut dl = vec![T::zero(); logits.len()];
    for i in 0..n {
        let base = i * 2 * g;
        for j in 0..g {
            let l0 = logits[base + j];
            let l1 = logits[base + g + j];
            let m = if l0 > l1 { l0 } else { l1 };
            let e0 = (l0 - m).exp();
            let e1 = (l1 - m).exp();
            let sum = e0 + e1;
            let y = labels[i * g + j];
            dl[base + j] = (e0 / sum - if y == 0 { T::one() } else { T::zero() }) * scale;
            dl[base + g + j] = (e1 / sum - if y == 1 { T::one() } else { T::zero() }) * scale;
        }
    }
    dl
}
