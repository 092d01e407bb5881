//! Operator values against naive loop oracles, and gradients against central
//! differences.

use drnet::autodiff::{Graph, Var};
use drnet::gradcheck::{autodiff_gradient, finite_difference_gradcheck, numeric_gradient};
use drnet::{Result, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so ReLU/max kinks are not straddled by ±h.
fn random_off_kink(shape: &[usize], seed: u64) -> Tensor {
    let mut t = random(shape, seed);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
    }
    t
}

fn conv_oracle(x: &Tensor, w: &Tensor, b: Option<&[f64]>, stride: usize, pad: usize) -> Vec<f64> {
    let [n, cin, h, wd] = x.dims4().unwrap();
    let [cout, _, kh, kw] = w.dims4().unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for i in 0..n {
        for o in 0..cout {
            for y in 0..ho {
                for z in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for c in 0..cin {
                        for p in 0..kh {
                            for q in 0..kw {
                                let iy = (y * stride + p) as isize - pad as isize;
                                let iz = (z * stride + q) as isize - pad as isize;
                                if iy < 0 || iz < 0 || iy >= h as isize || iz >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((i * cin + c) * h + iy as usize) * wd + iz as usize]
                                    * w.data()[((o * cin + c) * kh + p) * kw + q];
                            }
                        }
                    }
                    out[((i * cout + o) * ho + y) * wo + z] = acc;
                }
            }
        }
    }
    out
}

fn maxpool_oracle(x: &Tensor, k: usize, stride: usize) -> Vec<f64> {
    let [n, c, h, w] = x.dims4().unwrap();
    let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut out = Vec::new();
    for plane in 0..n * c {
        for y in 0..ho {
            for z in 0..wo {
                let mut m = f64::NEG_INFINITY;
                for p in 0..k {
                    for q in 0..k {
                        m = m.max(x.data()[plane * h * w + (y * stride + p) * w + z * stride + q]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
    }
}

#[test]
fn conv2d_matches_direct_loop_oracle() {
    let x = random(&[1, 2, 5, 5], 1);
    let w = random(&[3, 2, 3, 3], 2);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv2d(xv, wv, None, 2, 1).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 3, 3, 3]);
    assert_close(g.value(y).data(), &conv_oracle(&x, &w, None, 2, 1), 1e-12);
}

#[test]
fn conv2d_zero_input_is_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 3, 6, 6]));
    let w = g.constant(random(&[4, 3, 3, 3], 3));
    let y = g.conv2d(x, w, None, 1, 1).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));
}

#[test]
fn linear_matches_triple_loop() {
    let x = random(&[2, 3], 4);
    let w = random(&[4, 3], 5);
    let b = random(&[4], 6);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.linear(xv, wv, Some(bv)).unwrap();
    let mut want = vec![0.0; 8];
    for n in 0..2 {
        for k in 0..4 {
            want[n * 4 + k] = b.data()[k] + (0..3).map(|d| x.data()[n * 3 + d] * w.data()[k * 3 + d]).sum::<f64>();
        }
    }
    assert_close(g.value(y).data(), &want, 1e-12);
}

#[test]
fn maxpool_matches_loop_oracle() {
    let x = random(&[1, 1, 6, 6], 7);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.max_pool2d(xv, 3, 2, 0).unwrap();
    assert_close(g.value(y).data(), &maxpool_oracle(&x, 3, 2), 0.0);
}

#[test]
fn gap_is_resolution_independent_and_matches_mean() {
    for side in [16, 24] {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 2, side, side], 0.75));
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.75, 0.75]);
    }
    let x = random(&[2, 3, 4, 5], 8);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = g.global_avg_pool(xv).unwrap();
    let want: Vec<f64> = x.data().chunks(20).map(|c| c.iter().sum::<f64>() / 20.0).collect();
    assert_close(g.value(y).data(), &want, 1e-12);
}

#[test]
fn relu_gradient_on_each_side_of_kink() {
    let input = Tensor::new(&[2], vec![-0.5, 0.5]).unwrap();
    let f = |g: &mut Graph, x: Var| {
        let r = g.relu(x);
        Ok(g_sum(g, r))
    };
    let (a, _) = autodiff_gradient(&f, &input).unwrap();
    let n = numeric_gradient(&f, &input, 1e-6).unwrap();
    assert_eq!(a, vec![0.0, 1.0]);
    assert_close(&n, &a, 1e-9);
}

fn g_sum(g: &mut Graph, x: Var) -> Var {
    let n = g.value(x).numel() as f64;
    let m = g.mean(x);
    g.scale(m, n)
}

/// Weighted sum with fixed pseudo-random weights, so every output element
/// carries a distinct gradient.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(random(&shape, seed));
    let prod = g.mul(y, w)?;
    Ok(g_sum(g, prod))
}

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

#[test]
fn gradcheck_conv2d_all_operands() {
    let x = random(&[2, 2, 5, 5], 10);
    let w = random(&[3, 2, 3, 3], 11);
    let b = random(&[3], 12);
    let (wc, bc, xc) = (w.clone(), b.clone(), x.clone());
    let err = finite_difference_gradcheck(
        |g, xv| {
            let (wv, bv) = (g.constant(wc.clone()), g.constant(bc.clone()));
            let y = g.conv2d(xv, wv, Some(bv), 2, 1)?;
            probe(g, y, 99)
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err < TOL, "input grad {err}");
    let err = finite_difference_gradcheck(
        |g, wv| {
            let (xv, bv) = (g.constant(xc.clone()), g.constant(bc.clone()));
            let y = g.conv2d(xv, wv, Some(bv), 2, 1)?;
            probe(g, y, 99)
        },
        &w,
        H,
    )
    .unwrap();
    assert!(err < TOL, "weight grad {err}");
    let err = finite_difference_gradcheck(
        |g, bv| {
            let (xv, wv) = (g.constant(xc.clone()), g.constant(w.clone()));
            let y = g.conv2d(xv, wv, Some(bv), 2, 1)?;
            probe(g, y, 99)
        },
        &b,
        H,
    )
    .unwrap();
    assert!(err < TOL, "bias grad {err}");
}

#[test]
fn gradcheck_pointwise_conv() {
    let x = random(&[2, 3, 4, 4], 13);
    let w = random(&[2, 3, 1, 1], 14);
    let err = finite_difference_gradcheck(
        |g, xv| {
            let wv = g.constant(w.clone());
            let y = g.conv2d(xv, wv, None, 1, 0)?;
            probe(g, y, 5)
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn gradcheck_linear() {
    let x = random(&[3, 4], 15);
    let w = random(&[5, 4], 16);
    let err = finite_difference_gradcheck(
        |g, wv| {
            let xv = g.constant(x.clone());
            let y = g.linear(xv, wv, None)?;
            probe(g, y, 6)
        },
        &w,
        H,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn gradcheck_maxpool_and_relu() {
    let x = random_off_kink(&[1, 2, 6, 6], 17);
    let err = finite_difference_gradcheck(
        |g, xv| {
            let r = g.relu(xv);
            let y = g.max_pool2d(r, 3, 2, 1)?;
            probe(g, y, 7)
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn gradcheck_batch_norm_modes() {
    let x = random(&[3, 2, 3, 3], 18);
    let gamma = Tensor::new(&[2], vec![1.3, -0.7]).unwrap();
    let beta = Tensor::new(&[2], vec![0.1, 0.2]).unwrap();
    let err = finite_difference_gradcheck(
        |g, xv| {
            let (gv, bv) = (g.constant(gamma.clone()), g.constant(beta.clone()));
            let (y, _) = g.batch_norm_train(xv, gv, bv, 1e-5)?;
            probe(g, y, 8)
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err < TOL, "train {err}");
    let err = finite_difference_gradcheck(
        |g, xv| {
            let (gv, bv) = (g.constant(gamma.clone()), g.constant(beta.clone()));
            let y = g.batch_norm_eval(xv, gv, bv, &[0.2, -0.1], &[0.5, 2.0], 1e-5)?;
            probe(g, y, 8)
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err < TOL, "eval {err}");
}

#[test]
fn gradcheck_softmax_cross_entropy() {
    let logits = random(&[4, 6], 19);
    let err = finite_difference_gradcheck(|g, x| g.softmax_cross_entropy(x, &[0, 5, 2, 2]), &logits, H).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn cross_entropy_gradient_rows_sum_to_zero() {
    let logits = random(&[5, 7], 20);
    let (grad, _) = autodiff_gradient(&|g: &mut Graph, x| g.softmax_cross_entropy(x, &[1, 2, 3, 4, 0]), &logits).unwrap();
    for row in grad.chunks(7) {
        assert!(row.iter().sum::<f64>().abs() < 1e-12);
    }
}

#[test]
fn gradcheck_composite_conv_relu_linear_ce() {
    let x = random(&[2, 3, 8, 8], 21);
    let w = random(&[4, 3, 3, 3], 22);
    let fc = random(&[5, 4], 23);
    let err = finite_difference_gradcheck(
        |g, xv| {
            let (wv, fv) = (g.constant(w.clone()), g.constant(fc.clone()));
            let c = g.conv2d(xv, wv, None, 1, 1)?;
            let r = g.relu(c);
            let p = g.global_avg_pool(r)?;
            let y = g.linear(p, fv, None)?;
            g.softmax_cross_entropy(y, &[1, 3])
        },
        &x,
        H,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_matches_oracle_on_random_geometry(
        seed in 0u64..1000,
        cin in 1usize..4,
        cout in 1usize..4,
        side in 3usize..8,
        k in 1usize..4,
        stride in 1usize..3,
        pad in 0usize..2,
    ) {
        prop_assume!(side + 2 * pad >= k);
        let x = random(&[2, cin, side, side], seed);
        let w = random(&[cout, cin, k, k], seed + 1);
        let b = random(&[cout], seed + 2);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let want = conv_oracle(&x, &w, Some(b.data()), stride, pad);
        for (a, o) in g.value(y).data().iter().zip(&want) {
            prop_assert!((a - o).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_is_bit_deterministic(seed in 0u64..1000) {
        let run = || {
            let mut g = Graph::new();
            let x = g.constant(random(&[2, 2, 6, 6], seed));
            let w = g.constant(random(&[3, 2, 3, 3], seed ^ 7));
            let y = g.conv2d(x, w, None, 1, 1).unwrap();
            let r = g.relu(y);
            let p = g.max_pool2d(r, 2, 2, 0).unwrap();
            g.value(p).clone()
        };
        prop_assert_eq!(run(), run());
    }
}
