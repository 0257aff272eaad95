//! Adam with bias correction over flat parameter/gradient slices.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    /// Completed steps.
    pub t: u64,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n_params: usize, lr: T, beta1: T, beta2: T, eps: T) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![T::zero(); n_params],
            v: vec![T::zero(); n_params],
        }
    }

    /// One update of `params` from `grads`; increments the step counter.
    pub fn step(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim(format!(
                "adam state holds {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        adam_step(
            params,
            grads,
            &mut self.m,
            &mut self.v,
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
            self.t,
        );
        Ok(())
    }
}

/// First/second-moment update with bias correction:
/// `m ← β1·m + (1−β1)·g`, `v ← β2·v + (1−β2)·g²`,
/// `p ← p − lr·m̂ / (√v̂ + ε)` with `m̂ = m/(1−β1ᵗ)`, `v̂ = v/(1−β2ᵗ)`.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    t: u64,
) {
    let bc1 = T::one() - beta1.powi(t as i32);
    let bc2 = T::one() - beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = beta1 * m[i] + (T::one() - beta1) * g;
        v[i] = beta2 * v[i] + (T::one() - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut opt = Adam::<f64>::new(3, 0.1, 0.9, 0.999, 1e-8);
        let mut params = vec![1.0, -2.0, 0.5];
        opt.step(&mut params, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(params, vec![1.0, -2.0, 0.5]);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn two_step_trace_matches_hand_arithmetic() {
        // Constant gradient 0.5 on a scalar, lr 0.1. Bias correction makes
        // m̂ = 0.5 and v̂ = 0.25 at both steps, so each step moves the
        // parameter by lr·0.5/(0.5 + ε) ≈ 0.1.
        let mut opt = Adam::<f64>::new(1, 0.1, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0];
        opt.step(&mut p, &[0.5]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-7, "after step 1: {}", p[0]);
        opt.step(&mut p, &[0.5]).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-7, "after step 2: {}", p[0]);
    }

    #[test]
    fn constant_gradient_step_magnitude_approaches_lr() {
        let mut opt = Adam::<f64>::new(1, 1e-3, 0.9, 0.999, 1e-8);
        let mut p = vec![10.0];
        let mut prev = p[0];
        let mut last_step = 0.0;
        for _ in 0..200 {
            opt.step(&mut p, &[0.37]).unwrap();
            last_step = prev - p[0];
            prev = p[0];
        }
        assert!((last_step - 1e-3).abs() < 1e-5, "step {last_step}");
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut opt = Adam::<f64>::new(2, 0.1, 0.9, 0.999, 1e-8);
        let mut p = vec![0.0, 0.0];
        assert!(opt.step(&mut p, &[1.0]).is_err());
    }
}
