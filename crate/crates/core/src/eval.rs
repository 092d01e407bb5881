//! Validation metrics, the random-resolution baseline and histogram helpers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::model::DRModel;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub top1: f64,
    pub avg_classifier_flops: f64,
    pub predictor_flops: f64,
    pub avg_total_flops: f64,
    pub histogram: Vec<u64>,
    pub per_class: Vec<f64>,
}

/// How each validation sample picks its candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Routing<'a> {
    /// Predictor argmax, charged the predictor cost.
    Dynamic,
    /// Every sample at one candidate, no predictor.
    Static(usize),
    /// Sample `i` at `choices[i]`, no predictor.
    Assigned(&'a [usize]),
}

/// Evaluates `model` on `data` in chunks of `batch_size`. Every sample is
/// processed independently, so the report does not depend on `batch_size`.
pub fn evaluate_routed(model: &mut DRModel, data: &Dataset, batch_size: usize, routing: Routing<'_>) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Argument("evaluation set is empty".into()));
    }
    if let Routing::Assigned(c) = routing {
        if c.len() != data.len() {
            return Err(Error::Argument(format!("{} assignments for {} samples", c.len(), data.len())));
        }
    }
    let m = model.candidate_count();
    let k = model.class_count();
    let mut histogram = vec![0u64; m];
    let mut correct = 0u64;
    let mut class_total = vec![0u64; k];
    let mut class_correct = vec![0u64; k];
    let order: Vec<usize> = (0..data.len()).collect();
    for idx in Dataset::batches(&order, batch_size, false) {
        let batch: ImageBatch = data.batch(&idx);
        let choices = match routing {
            Routing::Dynamic => model.select_resolutions(&batch)?,
            Routing::Static(j) => vec![j; idx.len()],
            Routing::Assigned(c) => idx.iter().map(|&i| c[i]).collect(),
        };
        let preds = model.predict_at(&batch, &choices)?;
        for ((&label, &pred), &j) in batch.labels.iter().zip(&preds).zip(&choices) {
            histogram[j] += 1;
            if label >= k {
                return Err(Error::Index(format!("label {label} outside {k} classes")));
            }
            class_total[label] += 1;
            if pred == label {
                correct += 1;
                class_correct[label] += 1;
            }
        }
    }
    let n = data.len() as f64;
    let avg_classifier_flops = histogram
        .iter()
        .zip(&model.resolutions.costs)
        .map(|(&c, cost)| c as f64 * cost)
        .sum::<f64>()
        / n;
    let predictor_flops = if routing == Routing::Dynamic {
        model.predictor_cost
    } else {
        0.0
    };
    Ok(EvalReport {
        samples: data.len(),
        top1: correct as f64 / n,
        avg_classifier_flops,
        predictor_flops,
        avg_total_flops: avg_classifier_flops + predictor_flops,
        histogram,
        per_class: class_correct
            .iter()
            .zip(&class_total)
            .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
            .collect(),
    })
}

/// Dynamic-resolution evaluation.
pub fn evaluate(model: &mut DRModel, data: &Dataset, batch_size: usize) -> Result<EvalReport> {
    evaluate_routed(model, data, batch_size, Routing::Dynamic)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BaselineReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over trials.
    pub std: f64,
    pub avg_classifier_flops: f64,
}

/// Accuracy when resolutions are assigned by random permutation with exactly
/// the given histogram, repeated `trials` times.
pub fn random_resolution_baseline(
    model: &mut DRModel,
    data: &Dataset,
    histogram: &[u64],
    trials: usize,
    seed: u64,
    batch_size: usize,
) -> Result<BaselineReport> {
    if histogram.len() != model.candidate_count() {
        return Err(Error::Argument(format!(
            "histogram has {} bins for {} candidates",
            histogram.len(),
            model.candidate_count()
        )));
    }
    let total: u64 = histogram.iter().sum();
    if total != data.len() as u64 {
        return Err(Error::Argument(format!(
            "histogram covers {total} samples, dataset has {}",
            data.len()
        )));
    }
    if trials == 0 {
        return Err(Error::Argument("at least one trial is required".into()));
    }
    let mut base: Vec<usize> = Vec::with_capacity(data.len());
    for (j, &c) in histogram.iter().enumerate() {
        base.extend(std::iter::repeat_n(j, c as usize));
    }
    let mut accuracies = Vec::with_capacity(trials);
    let mut flops = 0.0;
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
        let mut assign = base.clone();
        assign.shuffle(&mut rng);
        let rep = evaluate_routed(model, data, batch_size, Routing::Assigned(&assign))?;
        accuracies.push(rep.top1);
        flops = rep.avg_classifier_flops;
    }
    let (mean, std) = mean_std(&accuracies);
    Ok(BaselineReport {
        accuracies,
        mean,
        std,
        avg_classifier_flops: flops,
    })
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Forces the predictor to pick candidate `j` for every input by zeroing its
/// head and biasing logit `j`.
pub fn force_selection(model: &mut DRModel, j: usize) -> Result<()> {
    if j >= model.candidate_count() {
        return Err(Error::Index(format!("candidate {j} outside {}", model.candidate_count())));
    }
    let head_w = format!("layer{}.fc.weight", model.predictor.spec().layers.len() - 1);
    let head_b = format!("layer{}.fc.bias", model.predictor.spec().layers.len() - 1);
    for p in model.predictor.params_mut() {
        if p.name == head_w {
            p.tensor.data_mut().fill(0.0);
        } else if p.name == head_b {
            let b = p.tensor.data_mut();
            b.fill(0.0);
            b[j] = 10.0;
        }
    }
    Ok(())
}

/// Histogram as CSV rows `index,resolution,count,fraction,mflops`.
pub fn histogram_csv(model: &DRModel, histogram: &[u64]) -> String {
    let total: u64 = histogram.iter().sum();
    let mut s = String::from("index,resolution,count,fraction,mflops\n");
    for (j, &c) in histogram.iter().enumerate() {
        let frac = if total == 0 { 0.0 } else { c as f64 / total as f64 };
        s.push_str(&format!(
            "{j},{},{c},{frac:.6},{:.4}\n",
            model.resolutions.resolutions[j], model.resolutions.costs[j]
        ));
    }
    s
}

/// Text bar chart of a selection histogram.
pub fn histogram_text(model: &DRModel, histogram: &[u64]) -> String {
    let total: u64 = histogram.iter().sum::<u64>().max(1);
    let mut s = String::new();
    for (j, &c) in histogram.iter().enumerate() {
        let frac = c as f64 / total as f64;
        let bar = "#".repeat((frac * 40.0).round() as usize);
        s.push_str(&format!(
            "{:>4}px {:>8} {:>6.2}% {bar}\n",
            model.resolutions.resolutions[j],
            c,
            100.0 * frac
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::presets;
    use crate::gumbel::GumbelConfig;
    use crate::model::ModelSpec;
    use crate::synthetic::{stripes, StripeSpec};

    fn model() -> DRModel {
        let spec = ModelSpec {
            classifier: presets::desk_classifier(4, 4, 1),
            predictor: presets::desk_predictor(3, 4),
            resolutions: vec![16, 12, 8],
            predictor_input: 12,
            gumbel: GumbelConfig::default(),
            means: vec![0.5; 3],
            stds: vec![0.25; 3],
        };
        let mut m = DRModel::new(&spec, 3).unwrap();
        for p in m.classifier.params_mut().chain(m.predictor.params_mut()) {
            if p.name.contains("fc") {
                p.tensor.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.3 * ((i * 7) as f64).cos());
            }
        }
        m
    }

    fn data(n: usize) -> Dataset {
        stripes(&StripeSpec {
            count: n,
            side: 16,
            ..Default::default()
        })
        .0
    }

    #[test]
    fn report_invariants_and_batch_size_invariance() {
        let mut m = model();
        let d = data(20);
        let a = evaluate(&mut m, &d, 1).unwrap();
        let b = evaluate(&mut m, &d, 256).unwrap();
        let c = evaluate(&mut m, &d, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a.histogram.iter().sum::<u64>(), 20);
        assert_eq!(a.avg_total_flops, a.avg_classifier_flops + a.predictor_flops);
    }

    #[test]
    fn forced_top_resolution_matches_static() {
        let mut m = model();
        let d = data(12);
        force_selection(&mut m, 0).unwrap();
        let dynamic = evaluate(&mut m, &d, 5).unwrap();
        let stat = evaluate_routed(&mut m, &d, 5, Routing::Static(0)).unwrap();
        assert_eq!(dynamic.top1, stat.top1);
        assert_eq!(dynamic.avg_classifier_flops, m.resolutions.costs[0]);
        assert_eq!(dynamic.avg_total_flops, m.resolutions.costs[0] + m.predictor_cost);
    }

    #[test]
    fn empty_set_is_argument_error() {
        let mut m = model();
        assert!(matches!(evaluate(&mut m, &data(0), 4), Err(Error::Argument(_))));
    }

    #[test]
    fn weighted_average_arithmetic() {
        // 60/27/13 split of 100 samples over the ResNet-50 cost triple.
        let costs = [4100.0, 2310.0, 1030.0];
        let avg = crate::flops::average_inference_flops(&[60, 27, 13], &costs, 290.0).unwrap();
        // 2460 + 623.7 + 133.9 + 290
        assert!((avg - 3507.6).abs() < 1e-9);
    }

    #[test]
    fn baseline_matches_histogram_flops_exactly() {
        let mut m = model();
        let d = data(15);
        let rep = evaluate(&mut m, &d, 8).unwrap();
        let base = random_resolution_baseline(&mut m, &d, &rep.histogram, 3, 0, 8).unwrap();
        assert_eq!(base.accuracies.len(), 3);
        assert!((base.avg_classifier_flops - rep.avg_classifier_flops).abs() < 1e-9);
        let degenerate = random_resolution_baseline(&mut m, &d, &[0, 15, 0], 3, 9, 8).unwrap();
        assert_eq!(degenerate.std, 0.0);
        assert!(random_resolution_baseline(&mut m, &d, &[1, 1, 1], 3, 0, 8).is_err());
    }

    #[test]
    fn mean_std_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn histogram_csv_rows() {
        let m = model();
        let csv = histogram_csv(&m, &[1, 1, 2]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("2,8,2,0.500000,"));
    }
}
