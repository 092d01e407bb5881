//! Gumbel-softmax relaxation and the straight-through hard selection.
//!
//! Training draws fresh Gumbel noise on every call; with `sample_noise` off the
//! selection is a plain argmax of `p`, which is what evaluation uses.

use rand::distributions::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GumbelConfig {
    /// Softmax temperature, `> 0`.
    pub tau: f64,
    /// Guard added inside `log(p + eps)`.
    pub eps: f64,
    pub sample_noise: bool,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig {
            tau: 1.0,
            eps: 1e-10,
            sample_noise: true,
        }
    }
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "gumbel tau and eps must be positive (tau={}, eps={})",
                self.tau, self.eps
            )));
        }
        Ok(())
    }

    /// Same settings with noise switched off.
    pub fn deterministic(self) -> Self {
        GumbelConfig {
            sample_noise: false,
            ..self
        }
    }
}

/// Relaxed and hard selections for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionVector {
    /// `[N, m]`, rows sum to one.
    pub soft: Tensor,
    /// `[N, m]`, rows one-hot.
    pub hard: Tensor,
    pub chosen_index: Vec<usize>,
}

/// `−log(−log u)` for `u` in the open unit interval.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// Standard Gumbel noise of the given shape.
pub fn sample_gumbel<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| gumbel_from_uniform(rng.sample::<f64, _>(Open01))).collect();
    Tensor::new(shape, data).expect("extent computed from shape")
}

/// Value-only Gumbel-softmax: `softmax((log(p + eps) + g) / tau)` per row.
pub fn gumbel_softmax_soft(p: &Tensor, g: &Tensor, tau: f64, eps: f64) -> Result<Tensor> {
    let mut graph = Graph::new();
    let pv = graph.constant(p.clone());
    let s = graph.gumbel_softmax(pv, g, tau, eps)?;
    Ok(graph.value(s).clone())
}

/// Index of the largest score; exact ties go to the largest index.
pub fn argmax_prefer_last(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v >= row[best] {
            best = j;
        }
    }
    best
}

fn noise_for<R: Rng + ?Sized>(shape: &[usize], cfg: &GumbelConfig, rng: &mut R) -> Tensor {
    if cfg.sample_noise {
        sample_gumbel(shape, rng)
    } else {
        Tensor::zeros(shape)
    }
}

fn hard_from_scores(p: &Tensor, noise: &Tensor, eps: f64) -> (Tensor, Vec<usize>) {
    let m = p.shape()[1];
    let mut hard = Tensor::zeros(p.shape());
    let mut chosen = Vec::with_capacity(p.shape()[0]);
    let scores: Vec<f64> = p.data().iter().zip(noise.data()).map(|(pv, g)| (pv + eps).ln() + g).collect();
    for (i, row) in scores.chunks(m).enumerate() {
        let j = argmax_prefer_last(row);
        hard.data_mut()[i * m + j] = 1.0;
        chosen.push(j);
    }
    (hard, chosen)
}

/// Straight-through selection recorded on `graph`.
///
/// The returned variable carries the one-hot `hard` value forward, while its
/// gradient flows into `p` through the relaxed soft path.
pub fn straight_through_select<R: Rng + ?Sized>(
    graph: &mut Graph,
    p: Var,
    cfg: &GumbelConfig,
    rng: &mut R,
) -> Result<(SelectionVector, Var)> {
    cfg.validate()?;
    let shape = graph.value(p).dims2()?;
    let noise = noise_for(&shape, cfg, rng);
    let soft = graph.gumbel_softmax(p, &noise, cfg.tau, cfg.eps)?;
    let (hard, chosen_index) = hard_from_scores(graph.value(p), &noise, cfg.eps);
    let h = graph.straight_through(hard.clone(), soft)?;
    let sel = SelectionVector {
        soft: graph.value(soft).clone(),
        hard,
        chosen_index,
    };
    Ok((sel, h))
}

/// Selection without recording gradients.
pub fn select<R: Rng + ?Sized>(p: &Tensor, cfg: &GumbelConfig, rng: &mut R) -> Result<SelectionVector> {
    let mut graph = Graph::new();
    let pv = graph.constant(p.clone());
    straight_through_select(&mut graph, pv, cfg, rng).map(|(s, _)| s)
}
