//! The training objective: cross-entropy on the mixed prediction plus a hinge
//! penalty on the expected classifier cost.

use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Loss weights and the cost table they refer to. Costs and `alpha` share a
/// unit (MFLOPs).
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub eta: f64,
    pub alpha: f64,
    pub costs: Vec<f64>,
    pub c_max: f64,
    pub c_min: f64,
}

impl LossConfig {
    pub fn new(eta: f64, alpha: f64, costs: Vec<f64>) -> Result<Self> {
        if !(eta >= 0.0) || !alpha.is_finite() {
            return Err(Error::Config(format!("eta must be >= 0 and alpha finite (eta={eta}, alpha={alpha})")));
        }
        let c_max = costs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let c_min = costs.iter().copied().fold(f64::INFINITY, f64::min);
        if !(c_max > c_min) {
            return Err(Error::Config(format!(
                "cost range is empty (max {c_max}, min {c_min}); need at least two distinct costs"
            )));
        }
        Ok(LossConfig {
            eta,
            alpha,
            costs,
            c_max,
            c_min,
        })
    }

    /// `alpha = c_min + fraction·(c_max − c_min)`.
    pub fn with_alpha_fraction(eta: f64, fraction: f64, costs: Vec<f64>) -> Result<Self> {
        let mut cfg = LossConfig::new(eta, 0.0, costs)?;
        cfg.alpha = cfg.c_min + fraction * (cfg.c_max - cfg.c_min);
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub l_ce: f64,
    pub expected_flops: f64,
    pub l_reg: f64,
    pub total: f64,
}

/// Batch mean of `Σ_j C_j·h[n,j]`.
pub fn expected_flops(g: &mut Graph, h: Var, costs: &[f64]) -> Result<Var> {
    let per_sample = g.row_dot(h, costs)?;
    Ok(g.mean(per_sample))
}

/// `max(0, (E − alpha)/(c_max − c_min))`.
pub fn flops_regularizer(g: &mut Graph, expected: Var, cfg: &LossConfig) -> Var {
    g.hinge(expected, cfg.alpha, 1.0 / (cfg.c_max - cfg.c_min))
}

/// `l_ce + eta·l_reg`.
pub fn total_loss(g: &mut Graph, l_ce: Var, l_reg: Var, eta: f64) -> Result<Var> {
    let weighted = g.scale(l_reg, eta);
    g.add(l_ce, weighted)
}

/// Full objective for a mixed prediction and its hard selection.
pub fn objective(g: &mut Graph, mixed: Var, h: Var, labels: &[usize], cfg: &LossConfig) -> Result<(Var, LossReport)> {
    let l_ce = g.softmax_cross_entropy(mixed, labels)?;
    let e = expected_flops(g, h, &cfg.costs)?;
    let l_reg = flops_regularizer(g, e, cfg);
    let total = total_loss(g, l_ce, l_reg, cfg.eta)?;
    let report = LossReport {
        l_ce: g.value(l_ce).item(),
        expected_flops: g.value(e).item(),
        l_reg: g.value(l_reg).item(),
        total: g.value(total).item(),
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    const COSTS: [f64; 3] = [4100.0, 2310.0, 1030.0];

    fn cfg(eta: f64, alpha: f64) -> LossConfig {
        LossConfig::new(eta, alpha, COSTS.to_vec()).unwrap()
    }

    fn e_of(rows: Vec<f64>) -> f64 {
        let n = rows.len() / 3;
        let mut g = Graph::new();
        let h = g.constant(Tensor::new(&[n, 3], rows).unwrap());
        let e = expected_flops(&mut g, h, &COSTS).unwrap();
        g.value(e).item()
    }

    #[test]
    fn expected_flops_is_batch_mean() {
        assert_eq!(e_of(vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]), 1030.0);
        assert_eq!(e_of(vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]), 2565.0);
    }

    #[test]
    fn expected_flops_gradient_is_costs_over_n() {
        let mut g = Graph::new();
        let soft = g.variable(Tensor::full(&[2, 3], 1.0 / 3.0));
        let e = expected_flops(&mut g, soft, &COSTS).unwrap();
        let grads = g.backward(e).unwrap();
        let gs = grads.get(soft).unwrap();
        for (i, v) in gs.iter().enumerate() {
            assert!((v - COSTS[i % 3] / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cost_width_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(expected_flops(&mut g, h, &COSTS), Err(Error::Dimension(_))));
    }

    fn reg(e: f64, c: &LossConfig) -> (f64, f64) {
        let mut g = Graph::new();
        let ev = g.variable(Tensor::scalar(e));
        let r = flops_regularizer(&mut g, ev, c);
        let grads = g.backward(r).unwrap();
        (g.value(r).item(), grads.get(ev).unwrap()[0])
    }

    #[test]
    fn hinge_values_and_slopes() {
        let c = cfg(0.2, 2500.0);
        assert_eq!(reg(2500.0, &c).0, 0.0);
        let (v, d) = reg(3000.0, &c);
        assert!((v - 500.0 / 3070.0).abs() < 1e-12);
        assert!((v - 0.16287).abs() < 1e-5);
        assert!((d - 1.0 / 3070.0).abs() < 1e-15);
        assert_eq!(reg(1000.0, &c), (0.0, 0.0));
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut g = Graph::new();
        let ce = g.constant(Tensor::scalar(2.0));
        let r = g.constant(Tensor::scalar(0.163));
        let t = total_loss(&mut g, ce, r, 0.2).unwrap();
        assert!((g.value(t).item() - 2.0326).abs() < 1e-12);
        let t0 = total_loss(&mut g, ce, r, 0.0).unwrap();
        assert_eq!(g.value(t0).item(), 2.0);
    }

    #[test]
    fn degenerate_cost_range_rejected() {
        assert!(LossConfig::new(0.2, 1.0, vec![5.0, 5.0]).is_err());
        assert!(LossConfig::new(-1.0, 1.0, COSTS.to_vec()).is_err());
        let c = LossConfig::with_alpha_fraction(0.2, 0.5, COSTS.to_vec()).unwrap();
        assert_eq!(c.alpha, 2565.0);
    }

    #[test]
    fn report_total_matches_components() {
        let c = cfg(0.5, 1500.0);
        let mut g = Graph::new();
        let logits = g.constant(Tensor::new(&[2, 2], vec![0.3, -0.1, 1.2, 0.4]).unwrap());
        let h = g.constant(Tensor::new(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        let (_, rep) = objective(&mut g, logits, h, &[0, 1], &c).unwrap();
        assert!((rep.total - (rep.l_ce + 0.5 * rep.l_reg)).abs() < 1e-12);
        assert_eq!(rep.expected_flops, 3205.0);
    }

    #[test]
    fn permuting_candidates_leaves_loss_unchanged() {
        let run = |costs: Vec<f64>, h: Vec<f64>| {
            let c = LossConfig::new(0.3, 2000.0, costs).unwrap();
            let mut g = Graph::new();
            let logits = g.constant(Tensor::new(&[2, 2], vec![0.3, -0.1, 1.2, 0.4]).unwrap());
            let h = g.constant(Tensor::new(&[2, 3], h).unwrap());
            objective(&mut g, logits, h, &[0, 1], &c).unwrap().1.total
        };
        let a = run(COSTS.to_vec(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let b = run(vec![1030.0, 4100.0, 2310.0], vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(a, b);
    }
}
