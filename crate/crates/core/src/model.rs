//! The dynamic-resolution model: a small predictor choosing among candidate
//! resolutions for a shared-weight classifier with one BN bank per candidate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::ArchSpec;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::flops::{model_flops, resolution_cost_table};
use crate::gumbel::{argmax_prefer_last, straight_through_select, GumbelConfig, SelectionVector};
use crate::image::{normalize_tensor, resize_tensor, ImageBatch};
use crate::nn::{build_network, Binder, Mode, Network};
use crate::tensor::Tensor;

/// Candidate resolutions, largest first, with the classifier cost of each.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolutionSet {
    pub resolutions: Vec<usize>,
    /// Classifier MFLOPs at each resolution.
    pub costs: Vec<f64>,
    pub predictor_input: usize,
}

impl ResolutionSet {
    pub fn new(resolutions: Vec<usize>, classifier: &ArchSpec, predictor_input: usize) -> Result<Self> {
        if resolutions.is_empty() {
            return Err(Error::Config("at least one candidate resolution is required".into()));
        }
        if resolutions.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Config(format!(
                "candidate resolutions must be strictly decreasing, got {resolutions:?}"
            )));
        }
        if predictor_input == 0 {
            return Err(Error::Config("predictor input side must be positive".into()));
        }
        let costs = resolution_cost_table(classifier, &resolutions)?;
        if costs.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Config(format!("classifier costs {costs:?} are not strictly decreasing")));
        }
        Ok(ResolutionSet {
            resolutions,
            costs,
            predictor_input,
        })
    }

    pub fn len(&self) -> usize {
        self.resolutions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resolutions.is_empty()
    }
}

/// Resized and normalized inputs for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Views {
    /// One tensor per candidate, in candidate order.
    pub classifier: Vec<Tensor>,
    pub predictor: Tensor,
}

/// Graph handles produced by [`DRModel::train_forward`].
pub struct TrainOutput {
    pub logits: Vec<Var>,
    pub probabilities: Var,
    pub selection: SelectionVector,
    /// Straight-through selection: one-hot forward, soft backward.
    pub h: Var,
    pub mixed: Var,
}

/// Result of the single-path inference for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Inference {
    pub class: usize,
    pub resolution_index: usize,
    /// Classifier MFLOPs spent on this sample.
    pub flops: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DRModel {
    pub predictor: Network,
    pub classifier: Network,
    pub resolutions: ResolutionSet,
    pub gumbel: GumbelConfig,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Predictor MFLOPs at its input side.
    pub predictor_cost: f64,
    /// Optimizer steps taken since construction.
    pub steps: u64,
}

/// Parameters needed to construct a [`DRModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub classifier: ArchSpec,
    pub predictor: ArchSpec,
    pub resolutions: Vec<usize>,
    pub predictor_input: usize,
    pub gumbel: GumbelConfig,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

fn eval_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

impl DRModel {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.gumbel.validate()?;
        let resolutions = ResolutionSet::new(spec.resolutions.clone(), &spec.classifier, spec.predictor_input)?;
        let m = resolutions.len();
        if spec.predictor.outputs != m {
            return Err(Error::Build(format!(
                "predictor emits {} scores for {m} candidate resolutions",
                spec.predictor.outputs
            )));
        }
        if spec.classifier.input_channels != spec.predictor.input_channels
            || spec.means.len() != spec.classifier.input_channels
            || spec.stds.len() != spec.classifier.input_channels
        {
            return Err(Error::Build(
                "classifier, predictor and normalization constants disagree on channel count".into(),
            ));
        }
        let predictor_cost = model_flops(&spec.predictor, spec.predictor_input)
            .map_err(|e| Error::Config(format!("predictor at {}: {e}", spec.predictor_input)))?
            .total_mflops();
        Ok(DRModel {
            classifier: build_network(&spec.classifier, m, seed)?,
            predictor: build_network(&spec.predictor, 1, seed ^ 0x5eed_0f9e_d1c7)?,
            resolutions,
            gumbel: spec.gumbel,
            means: spec.means.clone(),
            stds: spec.stds.clone(),
            predictor_cost,
            steps: 0,
        })
    }

    pub fn candidate_count(&self) -> usize {
        self.resolutions.len()
    }

    pub fn class_count(&self) -> usize {
        self.classifier.spec().outputs
    }

    /// Resizes `batch` (pixels in `[0, 1]`) to every candidate and to the
    /// predictor input, then normalizes each view.
    pub fn prepare_views(&self, batch: &ImageBatch) -> Result<Views> {
        let view = |side| normalize_tensor(&resize_tensor(&batch.pixels, side)?, &self.means, &self.stds);
        Ok(Views {
            classifier: self.resolutions.resolutions.iter().map(|&r| view(r)).collect::<Result<_>>()?,
            predictor: view(self.resolutions.predictor_input)?,
        })
    }

    /// Candidate probabilities `[N, m]`.
    pub fn predictor_forward<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph,
        binder: &mut Binder,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let side = g.value(x).dims4()?[2];
        if side != self.resolutions.predictor_input {
            return Err(Error::Dimension(format!(
                "predictor expects side {}, got {side}",
                self.resolutions.predictor_input
            )));
        }
        let logits = self.predictor.forward(g, binder, x, 0, mode, rng)?;
        g.softmax(logits)
    }

    /// Classifier logits `[N, K]` at candidate `j` using BN bank `j`.
    pub fn classifier_forward<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph,
        binder: &mut Binder,
        x: Var,
        j: usize,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let want = *self.resolutions.resolutions.get(j).ok_or_else(|| {
            Error::Index(format!("candidate {j} requested, {} available", self.candidate_count()))
        })?;
        let side = g.value(x).dims4()?[2];
        if side != want {
            return Err(Error::Index(format!("candidate {j} is {want}px, input is {side}px")));
        }
        self.classifier.forward(g, binder, x, j, mode, rng)
    }

    /// All classifier paths, the predictor, straight-through selection and
    /// the mixed prediction `Σ_j h_j·y_j`. `batch` must already be augmented.
    pub fn train_forward<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph,
        classifier_binder: &mut Binder,
        predictor_binder: &mut Binder,
        batch: &ImageBatch,
        rng: &mut R,
    ) -> Result<TrainOutput> {
        let views = self.prepare_views(batch)?;
        let mut logits = Vec::with_capacity(views.classifier.len());
        for (j, v) in views.classifier.into_iter().enumerate() {
            let x = g.constant(v);
            logits.push(self.classifier_forward(g, classifier_binder, x, j, Mode::Train, rng)?);
        }
        let px = g.constant(views.predictor);
        let probabilities = self.predictor_forward(g, predictor_binder, px, Mode::Train, rng)?;
        let (selection, h) = straight_through_select(g, probabilities, &self.gumbel, rng)?;
        let mixed = g.mix(h, &logits)?;
        Ok(TrainOutput {
            logits,
            probabilities,
            selection,
            h,
            mixed,
        })
    }

    /// Noise-free candidate choice for each sample.
    pub fn select_resolutions(&mut self, batch: &ImageBatch) -> Result<Vec<usize>> {
        let side = self.resolutions.predictor_input;
        let x = normalize_tensor(&resize_tensor(&batch.pixels, side)?, &self.means, &self.stds)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let p = self.predictor_forward(&mut g, &mut Binder::frozen(), xv, Mode::Eval, &mut eval_rng())?;
        let eps = self.gumbel.eps;
        Ok(g.value(p)
            .data()
            .chunks(self.candidate_count())
            .map(|row| {
                let scores: Vec<f64> = row.iter().map(|v| (v + eps).ln()).collect();
                argmax_prefer_last(&scores)
            })
            .collect())
    }

    /// Class predictions when sample `i` is run at candidate `choices[i]`.
    /// Each sample passes through the classifier exactly once.
    pub fn predict_at(&mut self, batch: &ImageBatch, choices: &[usize]) -> Result<Vec<usize>> {
        if choices.len() != batch.len() {
            return Err(Error::Argument(format!(
                "{} choices for {} samples",
                choices.len(),
                batch.len()
            )));
        }
        if let Some(&bad) = choices.iter().find(|&&c| c >= self.candidate_count()) {
            return Err(Error::Index(format!("candidate {bad} requested, {} available", self.candidate_count())));
        }
        let mut preds = vec![0; batch.len()];
        for j in 0..self.candidate_count() {
            let idx: Vec<usize> = (0..batch.len()).filter(|&i| choices[i] == j).collect();
            if idx.is_empty() {
                continue;
            }
            let side = self.resolutions.resolutions[j];
            let sub = batch.pixels.select_rows(&idx);
            let x = normalize_tensor(&resize_tensor(&sub, side)?, &self.means, &self.stds)?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let y = self.classifier_forward(&mut g, &mut Binder::frozen(), xv, j, Mode::Eval, &mut eval_rng())?;
            let k = self.class_count();
            for (row, &i) in g.value(y).data().chunks(k).zip(&idx) {
                preds[i] = argmax_first(row);
            }
        }
        Ok(preds)
    }

    /// Predictor choice followed by one classifier pass per sample.
    pub fn infer_dynamic(&mut self, batch: &ImageBatch) -> Result<Vec<Inference>> {
        let choices = self.select_resolutions(batch)?;
        let classes = self.predict_at(batch, &choices)?;
        Ok(choices
            .into_iter()
            .zip(classes)
            .map(|(j, class)| Inference {
                class,
                resolution_index: j,
                flops: self.resolutions.costs[j],
            })
            .collect())
    }

    /// Makes every classifier BN site share bank 0. Only allowed before the
    /// first optimizer step.
    pub fn set_shared_bn(&mut self, enabled: bool) -> Result<()> {
        if self.steps > 0 && enabled != self.classifier.shared_bn() {
            return Err(Error::State(format!(
                "shared BN cannot be toggled after {} training steps",
                self.steps
            )));
        }
        self.classifier.set_shared_bn(enabled);
        Ok(())
    }
}

/// Index of the largest logit; ties go to the smallest index.
pub fn argmax_first(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::presets;

    pub(crate) fn toy_spec(m: usize) -> ModelSpec {
        let resolutions = [16, 12, 8][..m].to_vec();
        ModelSpec {
            classifier: presets::desk_classifier(3, 4, 1),
            predictor: presets::desk_predictor(m, 4),
            predictor_input: 12,
            resolutions,
            gumbel: GumbelConfig::default(),
            means: vec![0.5; 3],
            stds: vec![0.25; 3],
        }
    }

    fn toy_batch(n: usize) -> ImageBatch {
        let data = (0..n * 3 * 16 * 16).map(|i| ((i * 7919) % 101) as f64 / 100.0).collect();
        ImageBatch::new(Tensor::new(&[n, 3, 16, 16], data).unwrap(), (0..n).map(|i| i % 3).collect()).unwrap()
    }

    fn perturb_heads(model: &mut DRModel) {
        for p in model.classifier.params_mut().chain(model.predictor.params_mut()) {
            if p.name.contains("fc") {
                p.tensor.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.4 * ((i * 13) as f64).sin());
            }
        }
    }

    #[test]
    fn resolution_set_validation() {
        let spec = presets::desk_classifier(10, 4, 1);
        assert!(ResolutionSet::new(vec![16, 16], &spec, 12).is_err());
        assert!(ResolutionSet::new(vec![8, 16], &spec, 12).is_err());
        let rs = ResolutionSet::new(vec![32, 24, 16], &spec, 24).unwrap();
        assert!(rs.costs[0] > rs.costs[1] && rs.costs[1] > rs.costs[2]);
    }

    #[test]
    fn predictor_width_must_match_candidates() {
        let mut spec = toy_spec(3);
        spec.predictor = presets::desk_predictor(2, 4);
        assert!(matches!(DRModel::new(&spec, 0), Err(Error::Build(_))));
    }

    #[test]
    fn fresh_predictor_is_uniform() {
        let mut model = DRModel::new(&toy_spec(3), 0).unwrap();
        let views = model.prepare_views(&toy_batch(4)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(views.predictor);
        let p = model.predictor_forward(&mut g, &mut Binder::frozen(), x, Mode::Eval, &mut eval_rng()).unwrap();
        assert_eq!(g.value(p).shape(), &[4, 3]);
        assert!(g.value(p).data().iter().all(|&v| v == 1.0 / 3.0));
    }

    #[test]
    fn predictor_rows_sum_to_one_and_reject_wrong_side() {
        let mut model = DRModel::new(&toy_spec(3), 0).unwrap();
        perturb_heads(&mut model);
        let views = model.prepare_views(&toy_batch(3)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(views.predictor);
        let p = model.predictor_forward(&mut g, &mut Binder::frozen(), x, Mode::Eval, &mut eval_rng()).unwrap();
        for row in g.value(p).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let bad = g.constant(views.classifier[0].clone());
        assert!(matches!(
            model.predictor_forward(&mut g, &mut Binder::frozen(), bad, Mode::Eval, &mut eval_rng()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn classifier_head_shape_is_resolution_independent() {
        let mut model = DRModel::new(&toy_spec(3), 0).unwrap();
        let views = model.prepare_views(&toy_batch(2)).unwrap();
        for (j, v) in views.classifier.iter().enumerate() {
            let mut g = Graph::new();
            let x = g.constant(v.clone());
            let y = model
                .classifier_forward(&mut g, &mut Binder::frozen(), x, j, Mode::Eval, &mut eval_rng())
                .unwrap();
            assert_eq!(g.value(y).shape(), &[2, 3]);
        }
        let mut g = Graph::new();
        let x = g.constant(views.classifier[0].clone());
        let r = model.classifier_forward(&mut g, &mut Binder::frozen(), x, 1, Mode::Eval, &mut eval_rng());
        assert!(matches!(r, Err(Error::Index(_))));
    }

    #[test]
    fn mixed_prediction_equals_chosen_path() {
        let mut model = DRModel::new(&toy_spec(3), 1).unwrap();
        perturb_heads(&mut model);
        let batch = toy_batch(5);
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = model
            .train_forward(&mut g, &mut Binder::trainable(), &mut Binder::trainable(), &batch, &mut rng)
            .unwrap();
        let mixed = g.value(out.mixed).data();
        for (i, &j) in out.selection.chosen_index.iter().enumerate() {
            let y = g.value(out.logits[j]).row(i);
            for (a, b) in mixed[i * 3..i * 3 + 3].iter().zip(y) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn predictor_receives_gradient_through_mixing() {
        let mut model = DRModel::new(&toy_spec(2), 2).unwrap();
        perturb_heads(&mut model);
        let batch = toy_batch(4);
        let mut g = Graph::new();
        let mut pb = Binder::trainable();
        let out = model
            .train_forward(&mut g, &mut Binder::frozen(), &mut pb, &batch, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let loss = g.softmax_cross_entropy(out.mixed, &batch.labels).unwrap();
        let grads = g.backward(loss).unwrap();
        model.predictor.accumulate_grads(&pb, &grads);
        let norm: f64 = model
            .predictor
            .params()
            .map(|p| p.tensor.grad.as_ref().unwrap().iter().map(|v| v * v).sum::<f64>())
            .sum();
        assert!(norm > 0.0);
    }

    #[test]
    fn dynamic_inference_matches_per_sample_and_forced_top() {
        let mut model = DRModel::new(&toy_spec(3), 4).unwrap();
        perturb_heads(&mut model);
        let batch = toy_batch(6);
        let whole = model.infer_dynamic(&batch).unwrap();
        for (i, w) in whole.iter().enumerate() {
            let one = model.infer_dynamic(&batch.select(&[i])).unwrap();
            assert_eq!(&one[0], w);
        }
        // Force candidate 0 by making its predictor bias dominate.
        for p in model.predictor.params_mut() {
            if p.name.ends_with("fc.bias") {
                p.tensor.data_mut().copy_from_slice(&[50.0, 0.0, 0.0]);
            }
        }
        let forced = model.infer_dynamic(&batch).unwrap();
        let top = model.predict_at(&batch, &[0; 6]).unwrap();
        assert!(forced.iter().all(|r| r.resolution_index == 0 && r.flops == model.resolutions.costs[0]));
        assert_eq!(forced.iter().map(|r| r.class).collect::<Vec<_>>(), top);
    }

    #[test]
    fn shared_bn_locked_after_training_starts() {
        let mut model = DRModel::new(&toy_spec(3), 0).unwrap();
        model.set_shared_bn(true).unwrap();
        model.steps = 1;
        assert!(matches!(model.set_shared_bn(false), Err(Error::State(_))));
        assert!(model.set_shared_bn(true).is_ok());
    }
}
