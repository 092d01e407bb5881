//! Central-difference gradient verification.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::gumbel::{argmax_prefer_last, sample_gumbel};
use crate::nn::{resolution_aware_bn, Binder, BnSite, Mode};
use crate::objective::{expected_flops, flops_regularizer, LossConfig};
use crate::tensor::Tensor;

/// Compares the autodiff gradient of a scalar function against central
/// differences with step `h`.
///
/// `f` receives a fresh graph and the input recorded as a variable, and must
/// return a scalar. It is re-run for every perturbed coordinate, so any
/// randomness inside it has to be frozen.
///
/// Returns the largest `|a − n| / max(|a|, |n|, 1e-8)` over all elements.
pub fn finite_difference_gradcheck<F>(f: F, input: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let (analytic, _) = autodiff_gradient(&f, input)?;
    let numeric = numeric_gradient(&f, input, h)?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Autodiff gradient and function value.
pub fn autodiff_gradient<F>(f: &F, input: &Tensor) -> Result<(Vec<f64>, f64)>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.variable(input.clone());
    let y = f(&mut g, x)?;
    let value = scalar_value(&g, y)?;
    let grads = g.backward(y)?;
    Ok((grads.get_or_zeros(x, input.numel()), value))
}

/// Central-difference gradient, one coordinate at a time.
pub fn numeric_gradient<F>(f: &F, input: &Tensor, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(t);
        let y = f(&mut g, x)?;
        scalar_value(&g, y)
    };
    let mut out = Vec::with_capacity(input.numel());
    let mut probe = input.clone();
    for i in 0..input.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(probe.clone())?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

pub fn max_relative_error(a: &[f64], n: &[f64]) -> f64 {
    a.iter()
        .zip(n)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

fn scalar_value(g: &Graph, y: Var) -> Result<f64> {
    let t = g.value(y);
    if t.numel() != 1 {
        return Err(Error::Dimension(format!(
            "gradcheck function must return a scalar, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Outcome of one case of [`run_suite`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub const SUITE_STEP: f64 = 1e-5;
pub const SUITE_TOLERANCE: f64 = 1e-4;

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("extent")
}

/// Uniform values pushed at least 0.05 away from zero.
fn off_kink(shape: &[usize], seed: u64) -> Tensor {
    let mut t = uniform(shape, seed);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
    }
    t
}

/// Distinct values spaced 0.01 apart in shuffled order, so no pooling
/// window holds a near-tie.
fn tie_free(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.01).collect();
    vals.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Tensor::new(shape, vals).expect("extent")
}

fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let n = shape.iter().product::<usize>() as f64;
    let w = g.constant(uniform(&shape, seed));
    let prod = g.mul(y, w)?;
    let m = g.mean(prod);
    Ok(g.scale(m, n))
}

fn probability_rows(n: usize, m: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * m);
    for _ in 0..n {
        let row: Vec<f64> = (0..m).map(|_| rng.gen_range(0.2..1.0)).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / s));
    }
    Tensor::new(&[n, m], data).expect("extent")
}

/// Finite-difference checks over every differentiable operator the model
/// uses, each at step [`SUITE_STEP`] against [`SUITE_TOLERANCE`].
pub fn run_suite() -> Result<Vec<CheckResult>> {
    let h = SUITE_STEP;
    let mut out = Vec::new();
    let mut push = |name: &'static str, err: f64| {
        out.push(CheckResult {
            name,
            max_rel_error: err,
            passed: err < SUITE_TOLERANCE,
        })
    };

    let x = uniform(&[1, 2, 5, 5], 1);
    let w = uniform(&[3, 2, 3, 3], 2);
    let b = uniform(&[3], 3);
    let (wc, bc) = (w.clone(), b.clone());
    push(
        "conv2d input",
        finite_difference_gradcheck(
            |g, x| {
                let (w, b) = (g.constant(wc.clone()), g.constant(bc.clone()));
                let y = g.conv2d(x, w, Some(b), 2, 1)?;
                probe(g, y, 4)
            },
            &x,
            h,
        )?,
    );
    let xc = x.clone();
    push(
        "conv2d weight",
        finite_difference_gradcheck(
            |g, w| {
                let (x, b) = (g.constant(xc.clone()), g.constant(bc.clone()));
                let y = g.conv2d(x, w, Some(b), 2, 1)?;
                probe(g, y, 4)
            },
            &w,
            h,
        )?,
    );
    push(
        "conv2d bias",
        finite_difference_gradcheck(
            |g, b| {
                let (x, w) = (g.constant(xc.clone()), g.constant(wc.clone()));
                let y = g.conv2d(x, w, Some(b), 2, 1)?;
                probe(g, y, 4)
            },
            &b,
            h,
        )?,
    );

    let lx = uniform(&[3, 4], 5);
    let lw = uniform(&[2, 4], 6);
    let lb = uniform(&[2], 7);
    let (lxc, lwc, lbc) = (lx.clone(), lw.clone(), lb.clone());
    push(
        "linear input",
        finite_difference_gradcheck(
            |g, x| {
                let (w, b) = (g.constant(lwc.clone()), g.constant(lbc.clone()));
                let y = g.linear(x, w, Some(b))?;
                probe(g, y, 8)
            },
            &lx,
            h,
        )?,
    );
    push(
        "linear weight and bias",
        finite_difference_gradcheck(
            |g, w| {
                let (x, b) = (g.constant(lxc.clone()), g.constant(lbc.clone()));
                let y = g.linear(x, w, Some(b))?;
                probe(g, y, 8)
            },
            &lw,
            h,
        )?
        .max(finite_difference_gradcheck(
            |g, b| {
                let (x, w) = (g.constant(lxc.clone()), g.constant(lwc.clone()));
                let y = g.linear(x, w, Some(b))?;
                probe(g, y, 8)
            },
            &lb,
            h,
        )?),
    );

    push(
        "relu",
        finite_difference_gradcheck(
            |g, x| {
                let y = g.relu(x);
                probe(g, y, 9)
            },
            &off_kink(&[2, 3, 4], 10),
            h,
        )?,
    );
    push(
        "max_pool2d",
        finite_difference_gradcheck(
            |g, x| {
                let y = g.max_pool2d(x, 3, 2, 1)?;
                probe(g, y, 11)
            },
            &tie_free(&[1, 2, 6, 6], 12),
            h,
        )?,
    );
    push(
        "global_avg_pool",
        finite_difference_gradcheck(
            |g, x| {
                let y = g.global_avg_pool(x)?;
                probe(g, y, 13)
            },
            &uniform(&[2, 3, 3, 3], 14),
            h,
        )?,
    );

    let mut site = BnSite::new("bn", 3, 2);
    site.banks[1].gamma.tensor = uniform(&[3], 15);
    site.banks[1].beta.tensor = uniform(&[3], 16);
    site.banks[1].running_mean = vec![0.1, -0.2, 0.3];
    site.banks[1].running_var = vec![0.5, 1.5, 2.0];
    let bn_x = uniform(&[4, 3, 2, 2], 17);
    for (name, mode) in [("resolution_aware_bn train", Mode::Train), ("resolution_aware_bn eval", Mode::Eval)] {
        let site = site.clone();
        push(
            name,
            finite_difference_gradcheck(
                |g, x| {
                    let mut s = site.clone();
                    let y = resolution_aware_bn(g, &mut Binder::frozen(), 0, &mut s, x, 1, mode)?;
                    probe(g, y, 18)
                },
                &bn_x,
                h,
            )?,
        );
    }
    let bx = bn_x.clone();
    let beta = uniform(&[3], 19);
    push(
        "batch_norm train gamma",
        finite_difference_gradcheck(
            |g, gamma| {
                let (x, b) = (g.constant(bx.clone()), g.constant(beta.clone()));
                let (y, _) = g.batch_norm_train(x, gamma, b, 1e-5)?;
                probe(g, y, 20)
            },
            &uniform(&[3], 21),
            h,
        )?,
    );

    push(
        "softmax_cross_entropy",
        finite_difference_gradcheck(|g, x| g.softmax_cross_entropy(x, &[2, 0, 1]), &uniform(&[3, 4], 22), h)?,
    );

    let p = probability_rows(3, 3, 23);
    let noise = sample_gumbel(&[3, 3], &mut ChaCha8Rng::seed_from_u64(24));
    let nz = noise.clone();
    push(
        "gumbel_softmax_soft",
        finite_difference_gradcheck(
            |g, p| {
                let y = g.gumbel_softmax(p, &nz, 0.7, 1e-10)?;
                probe(g, y, 25)
            },
            &p,
            h,
        )?,
    );

    // The straight-through gradient equals the gradient of the relaxed
    // surrogate evaluated with the same noise.
    let costs = [4.0, 2.0, 1.0];
    let nz2 = noise.clone();
    let straight = move |g: &mut Graph, p: Var| -> Result<Var> {
        let soft = g.gumbel_softmax(p, &nz2, 0.7, 1e-10)?;
        let scores: Vec<f64> = g
            .value(p)
            .data()
            .iter()
            .zip(nz2.data())
            .map(|(v, n)| (v + 1e-10).ln() + n)
            .collect();
        let mut hard = Tensor::zeros(&[3, 3]);
        for (i, row) in scores.chunks(3).enumerate() {
            hard.data_mut()[i * 3 + argmax_prefer_last(row)] = 1.0;
        }
        let hv = g.straight_through(hard, soft)?;
        let e = g.row_dot(hv, &costs)?;
        Ok(g.mean(e))
    };
    let nz3 = noise.clone();
    let relaxed = move |g: &mut Graph, p: Var| -> Result<Var> {
        let soft = g.gumbel_softmax(p, &nz3, 0.7, 1e-10)?;
        let e = g.row_dot(soft, &costs)?;
        Ok(g.mean(e))
    };
    let (st_grad, _) = autodiff_gradient(&straight, &p)?;
    push(
        "straight_through_select soft path",
        max_relative_error(&st_grad, &numeric_gradient(&relaxed, &p, h)?),
    );

    let ef_costs = [4100.0, 2310.0, 1030.0];
    push(
        "expected_flops",
        finite_difference_gradcheck(|g, hv| expected_flops(g, hv, &ef_costs), &probability_rows(4, 3, 26), h)?,
    );
    let cfg = LossConfig::new(0.2, 2500.0, ef_costs.to_vec())?;
    push(
        "flops_regularizer",
        finite_difference_gradcheck(|g, e| Ok(flops_regularizer(g, e, &cfg)), &Tensor::scalar(3000.0), h)?,
    );

    let cw1 = uniform(&[4, 2, 3, 3], 27);
    let cw2 = uniform(&[4, 4, 3, 3], 28);
    let fw = uniform(&[3, 4], 29);
    let fb = uniform(&[3], 30);
    push(
        "composite conv-bn-relu-pool-conv-gap-linear-ce",
        finite_difference_gradcheck(
            |g, x| {
                let w1 = g.constant(cw1.clone());
                let y = g.conv2d(x, w1, None, 1, 1)?;
                let (gm, bt) = (g.constant(Tensor::full(&[4], 1.0)), g.constant(Tensor::zeros(&[4])));
                let (y, _) = g.batch_norm_train(y, gm, bt, 1e-5)?;
                let y = g.relu(y);
                let y = g.max_pool2d(y, 2, 2, 0)?;
                let w2 = g.constant(cw2.clone());
                let y = g.conv2d(y, w2, None, 1, 1)?;
                let y = g.global_avg_pool(y)?;
                let (w, b) = (g.constant(fw.clone()), g.constant(fb.clone()));
                let y = g.linear(y, w, Some(b))?;
                g.softmax_cross_entropy(y, &[0, 2])
            },
            &uniform(&[2, 2, 6, 6], 31),
            h,
        )?,
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let input = Tensor::new(&[5], vec![0.3, -1.2, 2.0, 0.0, 5.5]).unwrap();
        let err = finite_difference_gradcheck(
            |g, x| {
                let sq = g.mul(x, x)?;
                let m = g.mean(sq);
                Ok(g.scale(m, 5.0))
            },
            &input,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn full_suite_passes() {
        let results = run_suite().unwrap();
        assert!(results.len() >= 15);
        for r in results {
            assert!(r.passed, "{} {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn dead_relu_gives_exact_zero() {
        let input = Tensor::new(&[4], vec![-1.0, -2.0, -0.5, -3.0]).unwrap();
        let f = |g: &mut Graph, x: Var| {
            let r = g.relu(x);
            Ok(g.mean(r))
        };
        let (grad, _) = autodiff_gradient(&f, &input).unwrap();
        assert!(grad.iter().all(|v| *v == 0.0));
        let num = numeric_gradient(&f, &input, 1e-5).unwrap();
        assert!(num.iter().all(|v| *v == 0.0));
    }
}
