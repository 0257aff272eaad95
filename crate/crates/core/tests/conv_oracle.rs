//! Convolution checked against a direct six-nested-loop oracle. The oracle
//! is deliberately naive: it never touches the im2col/GEMM path it verifies.

use forgenet_core::tensor::{Tape, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[allow(clippy::too_many_arguments)]
fn conv_naive(
    input: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    k: usize,
    bias: &[f64],
) -> Vec<f64> {
    let oh = h - k + 1;
    let ow = w - k + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for i in 0..n {
        for oc in 0..cout {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bias[oc];
                    for ic in 0..cin {
                        for dy in 0..k {
                            for dx in 0..k {
                                let iv = input[((i * cin + ic) * h + y + dy) * w + x + dx];
                                let wv = weight[((oc * cin + ic) * k + dy) * k + dx];
                                acc += iv * wv;
                            }
                        }
                    }
                    out[((i * cout + oc) * oh + y) * ow + x] = acc;
                }
            }
        }
    }
    out
}

fn run_case(rng: &mut ChaCha8Rng, n: usize, cin: usize, h: usize, w: usize, cout: usize, k: usize) {
    let x: Vec<f64> = (0..n * cin * h * w)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let wt: Vec<f64> = (0..cout * cin * k * k)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let b: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();

    let expected = conv_naive(&x, n, cin, h, w, &wt, cout, k, &b);

    let mut tape = Tape::new();
    let xi = tape
        .leaf(&Tensor::from_vec(vec![n, cin, h, w], x).unwrap())
        .unwrap();
    let wi = tape
        .leaf(&Tensor::from_vec(vec![cout, cin, k, k], wt).unwrap())
        .unwrap();
    let bi = tape
        .leaf(&Tensor::from_vec(vec![cout], b).unwrap())
        .unwrap();
    let y = tape.conv2d_valid(xi, wi, bi).unwrap();

    let got = tape.value(y);
    assert_eq!(got.len(), expected.len());
    for (g, e) in got.iter().zip(&expected) {
        let rel = (g - e).abs() / g.abs().max(e.abs()).max(1.0);
        assert!(rel <= 1e-6, "got {g}, oracle {e}, rel {rel}");
    }
}

#[test]
fn conv_matches_naive_loop_on_spec_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    run_case(&mut rng, 2, 3, 8, 8, 4, 3);
}

#[test]
fn conv_matches_naive_loop_on_100_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let n = rng.random_range(1..3);
        let k = [1usize, 2, 3, 5][rng.random_range(0..4)];
        let h = rng.random_range(k..k + 7);
        let w = rng.random_range(k..k + 7);
        let cin = rng.random_range(1..5);
        let cout = rng.random_range(1..5);
        run_case(&mut rng, n, cin, h, w, cout, k);
    }
}

#[test]
fn full_gradcheck_suite_passes() {
    let reports = forgenet_core::tensor::run_gradcheck(42).unwrap();
    for r in &reports {
        assert!(
            r.passed,
            "{} failed with max_rel_err {:.3e}",
            r.name, r.max_rel_err
        );
    }
    assert!(reports.len() >= 10, "suite covers every differentiable op");
}
