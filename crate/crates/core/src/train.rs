//! Two-stage training: multi-resolution pretraining of the classifier, then
//! joint finetuning with the resolution predictor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::image::{augment_train, normalize_tensor, resize_tensor, ImageBatch};
use crate::model::DRModel;
use crate::nn::{Binder, Mode};
use crate::objective::{objective, LossConfig, LossReport};
use crate::optim::sgd_momentum_step;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// Optimization schedule and loss weights for one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub predictor_lr_scale: f64,
    /// Zero-pad width for the random crop.
    pub augment_pad: usize,
    pub freeze_predictor: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            base_lr: 0.1,
            warmup_epochs: 3,
            decay_every: 10,
            decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            predictor_lr_scale: 0.1,
            augment_pad: 4,
            freeze_predictor: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every == 0 {
            return bad("epochs, batch_size and decay_every must be positive".into());
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return bad(format!("decay_factor {} outside (0, 1)", self.decay_factor));
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.predictor_lr_scale > 0.0) || !(self.base_lr > 0.0) {
            return bad("base_lr and predictor_lr_scale must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must lie in [0, 1) and weight_decay be >= 0".into());
        }
        Ok(())
    }
}

/// Learning rate for `epoch`: a linear ramp reaching `base_lr` at
/// `warmup_epochs`, then step decay.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    if epoch < cfg.warmup_epochs {
        return cfg.base_lr * ((epoch + 1) as f64 / cfg.warmup_epochs as f64);
    }
    let steps = (epoch - cfg.warmup_epochs) / cfg.decay_every;
    cfg.base_lr * cfg.decay_factor.powi(steps as i32)
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub l_ce: f64,
    pub l_reg: f64,
    /// Mean expected classifier MFLOPs over training batches; absent in
    /// pretraining.
    pub e_flops: Option<f64>,
    pub top1: Option<f64>,
    /// Validation selection histogram (training histogram when no
    /// validation ran).
    pub hist: Vec<u64>,
    pub train_hist: Vec<u64>,
}

/// Everything that evolves during a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub stage: Stage,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub model: DRModel,
    pub history: Vec<EpochRecord>,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(stage: Stage, model: DRModel, seed: u64) -> Self {
        TrainState {
            stage,
            epoch: 0,
            global_step: 0,
            model,
            history: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

fn check_finite(what: &str, value: f64, step: u64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("{what} became {value} at step {step}")))
    }
}

fn classifier_view(model: &DRModel, batch: &ImageBatch, j: usize) -> Result<crate::Tensor> {
    let side = model.resolutions.resolutions[j];
    normalize_tensor(&resize_tensor(&batch.pixels, side)?, &model.means, &model.stds)
}

/// One pretraining step on an augmented batch: the cross-entropy of every
/// candidate path is summed and the classifier takes one SGD step. Returns
/// the summed loss.
pub fn pretrain_step(model: &mut DRModel, batch: &ImageBatch, lr: f64, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut g = Graph::new();
    let mut binder = Binder::trainable();
    let mut losses = Vec::with_capacity(model.candidate_count());
    for j in 0..model.candidate_count() {
        let x = g.constant(classifier_view(model, batch, j)?);
        let y = model.classifier_forward(&mut g, &mut binder, x, j, Mode::Train, rng)?;
        losses.push(g.softmax_cross_entropy(y, &batch.labels)?);
    }
    let total = g.sum(&losses)?;
    let value = g.value(total).item();
    check_finite("pretraining loss", value, model.steps)?;
    let grads = g.backward(total)?;
    model.classifier.zero_grads();
    model.classifier.accumulate_grads(&binder, &grads);
    sgd_momentum_step(model.classifier.params_mut(), lr, cfg.momentum, cfg.weight_decay)?;
    model.steps += 1;
    Ok(value)
}

/// One finetuning step: mixed prediction, combined loss, and SGD with the
/// predictor at `predictor_lr_scale·lr`.
pub fn finetune_step(
    model: &mut DRModel,
    batch: &ImageBatch,
    lr: f64,
    cfg: &TrainConfig,
    loss: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(LossReport, Vec<usize>)> {
    let mut g = Graph::new();
    let mut cb = Binder::trainable();
    let mut pb = if cfg.freeze_predictor {
        Binder::frozen()
    } else {
        Binder::trainable()
    };
    let out = model.train_forward(&mut g, &mut cb, &mut pb, batch, rng)?;
    let (total, report) = objective(&mut g, out.mixed, out.h, &batch.labels, loss)?;
    check_finite("finetuning loss", report.total, model.steps)?;
    let grads = g.backward(total)?;
    model.classifier.zero_grads();
    model.classifier.accumulate_grads(&cb, &grads);
    sgd_momentum_step(model.classifier.params_mut(), lr, cfg.momentum, cfg.weight_decay)?;
    if !cfg.freeze_predictor {
        model.predictor.zero_grads();
        model.predictor.accumulate_grads(&pb, &grads);
        sgd_momentum_step(
            model.predictor.params_mut(),
            lr * cfg.predictor_lr_scale,
            cfg.momentum,
            cfg.weight_decay,
        )?;
    }
    model.steps += 1;
    Ok((report, out.selection.chosen_index))
}

/// Runs one epoch of `state.stage` and returns its record (without
/// validation fields filled in).
pub fn train_epoch(state: &mut TrainState, data: &Dataset, cfg: &TrainConfig, loss: Option<&LossConfig>) -> Result<EpochRecord> {
    if data.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let lr = lr_at(cfg, state.epoch);
    let order = data.epoch_order(Some(&mut state.rng));
    let drop_last = data.len() >= cfg.batch_size;
    let m = state.model.candidate_count();
    let mut hist = vec![0u64; m];
    let (mut ce, mut reg, mut flops, mut batches) = (0.0, 0.0, 0.0, 0usize);
    for idx in Dataset::batches(&order, cfg.batch_size, drop_last) {
        let batch = augment_train(&data.batch(&idx), cfg.augment_pad, &mut state.rng);
        match state.stage {
            Stage::Pretrain => {
                ce += pretrain_step(&mut state.model, &batch, lr, cfg, &mut state.rng)?;
            }
            Stage::Finetune => {
                let loss = loss.ok_or_else(|| Error::Config("finetuning needs a loss configuration".into()))?;
                let (rep, chosen) = finetune_step(&mut state.model, &batch, lr, cfg, loss, &mut state.rng)?;
                ce += rep.l_ce;
                reg += rep.l_reg;
                flops += rep.expected_flops;
                for j in chosen {
                    hist[j] += 1;
                }
            }
        }
        batches += 1;
        state.global_step += 1;
    }
    let n = batches.max(1) as f64;
    let record = EpochRecord {
        epoch: state.epoch,
        lr,
        l_ce: ce / n,
        l_reg: reg / n,
        e_flops: (state.stage == Stage::Finetune).then_some(flops / n),
        top1: None,
        hist: hist.clone(),
        train_hist: hist,
    };
    state.epoch += 1;
    Ok(record)
}

/// Runs every remaining epoch of the classifier pretraining stage.
pub fn pretrain(state: &mut TrainState, data: &Dataset, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    state.stage = Stage::Pretrain;
    while state.epoch < cfg.epochs {
        let rec = train_epoch(state, data, cfg, None)?;
        state.history.push(rec);
    }
    Ok(())
}

/// Runs every remaining epoch of joint finetuning.
pub fn finetune(state: &mut TrainState, data: &Dataset, cfg: &TrainConfig, loss: &LossConfig) -> Result<()> {
    cfg.validate()?;
    state.stage = Stage::Finetune;
    while state.epoch < cfg.epochs {
        let rec = train_epoch(state, data, cfg, Some(loss))?;
        state.history.push(rec);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::presets;
    use crate::gumbel::GumbelConfig;
    use crate::model::ModelSpec;
    use crate::synthetic::{stripes, StripeSpec};

    fn sched(base: f64, warmup: usize, every: usize, factor: f64) -> TrainConfig {
        TrainConfig {
            epochs: 100,
            base_lr: base,
            warmup_epochs: warmup,
            decay_every: every,
            decay_factor: factor,
            ..Default::default()
        }
    }

    #[test]
    fn lr_schedule_points() {
        let c = sched(0.1, 3, 20, 0.1);
        assert!((lr_at(&c, 0) - 0.1 / 3.0).abs() < 1e-15);
        assert_eq!(lr_at(&c, 3), 0.1);
        assert_eq!(lr_at(&c, 2), 0.1);
        assert!((lr_at(&c, 45) - 0.001).abs() < 1e-15);
        assert_eq!(lr_at(&c, 22), 0.1);
        assert!((lr_at(&c, 23) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { decay_factor: 1.0, ..Default::default() },
            TrainConfig { warmup_epochs: 30, ..Default::default() },
            TrainConfig { predictor_lr_scale: 0.0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    fn small_model(m: usize, seed: u64) -> DRModel {
        let spec = ModelSpec {
            classifier: presets::desk_classifier(4, 4, 1),
            predictor: presets::desk_predictor(m, 4),
            resolutions: [16, 12, 8][..m].to_vec(),
            predictor_input: 12,
            gumbel: GumbelConfig::default(),
            means: vec![0.5; 3],
            stds: vec![0.25; 3],
        };
        DRModel::new(&spec, seed).unwrap()
    }

    fn small_data(count: usize) -> Dataset {
        stripes(&StripeSpec {
            count,
            side: 16,
            coarse_period: 6.0,
            fine_period: 2.5,
            ..Default::default()
        })
        .0
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            base_lr: 0.05,
            warmup_epochs: 1,
            decay_every: 1,
            decay_factor: 0.5,
            augment_pad: 2,
            ..Default::default()
        }
    }

    #[test]
    fn first_pretrain_loss_is_m_ln_k() {
        let mut model = small_model(3, 0);
        let batch = small_data(8).batch(&(0..8).collect::<Vec<_>>());
        let loss = pretrain_step(&mut model, &batch, 0.1, &quick(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((loss - 3.0 * 4f64.ln()).abs() < 1e-12);
        for site in model.classifier.bn_sites() {
            for bank in &site.banks {
                assert!(bank.running_mean.iter().any(|&v| v != 0.0), "{}", site.name);
            }
        }
    }

    #[test]
    fn single_candidate_is_plain_training() {
        let mut a = small_model(1, 3);
        let batch = small_data(8).batch(&(0..8).collect::<Vec<_>>());
        let cfg = quick();
        pretrain_step(&mut a, &batch, 0.1, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();

        // Hand-rolled single-resolution step on the same network.
        let mut b = small_model(1, 3);
        let mut g = Graph::new();
        let mut binder = Binder::trainable();
        let x = g.constant(normalize_tensor(&batch.pixels, &b.means, &b.stds).unwrap());
        let y = b.classifier.forward(&mut g, &mut binder, x, 0, Mode::Train, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let l = g.softmax_cross_entropy(y, &batch.labels).unwrap();
        let grads = g.backward(l).unwrap();
        b.classifier.accumulate_grads(&binder, &grads);
        sgd_momentum_step(b.classifier.params_mut(), 0.1, cfg.momentum, cfg.weight_decay).unwrap();
        assert_eq!(a.classifier, b.classifier);
    }

    #[test]
    fn eta_zero_step_equals_plain_mixed_ce_step() {
        let cfg = quick();
        let batch = small_data(8).batch(&(0..8).collect::<Vec<_>>());
        let loss = LossConfig::new(0.0, 0.0, small_model(3, 0).resolutions.costs.clone()).unwrap();
        let mut a = small_model(3, 5);
        finetune_step(&mut a, &batch, 0.1, &cfg, &loss, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();

        let mut b = small_model(3, 5);
        let mut g = Graph::new();
        let (mut cb, mut pb) = (Binder::trainable(), Binder::trainable());
        let out = b.train_forward(&mut g, &mut cb, &mut pb, &batch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let l = g.softmax_cross_entropy(out.mixed, &batch.labels).unwrap();
        let grads = g.backward(l).unwrap();
        b.classifier.accumulate_grads(&cb, &grads);
        b.predictor.accumulate_grads(&pb, &grads);
        sgd_momentum_step(b.classifier.params_mut(), 0.1, cfg.momentum, cfg.weight_decay).unwrap();
        sgd_momentum_step(b.predictor.params_mut(), 0.01, cfg.momentum, cfg.weight_decay).unwrap();
        for (pa, pb) in a.classifier.params().chain(a.predictor.params()).zip(b.classifier.params().chain(b.predictor.params())) {
            for (x, y) in pa.tensor.data().iter().zip(pb.tensor.data()) {
                assert!((x - y).abs() < 1e-12, "{}", pa.name);
            }
        }
    }

    #[test]
    fn large_alpha_never_activates_regularizer() {
        let mut state = TrainState::new(Stage::Finetune, small_model(3, 2), 0);
        let c = state.model.resolutions.costs.clone();
        let loss = LossConfig::new(1.0, c[0], c).unwrap();
        finetune(&mut state, &small_data(32), &quick(), &loss).unwrap();
        assert_eq!(state.history.len(), 2);
        assert!(state.history.iter().all(|r| r.l_reg == 0.0));
        assert_eq!(state.history[0].train_hist.iter().sum::<u64>(), 32);
    }

    #[test]
    fn unselected_bank_keeps_statistics_only_in_eval() {
        // Evaluation never touches running statistics.
        let mut model = small_model(3, 1);
        let before = model.classifier.bn_sites().to_vec();
        let batch = small_data(6).batch(&(0..6).collect::<Vec<_>>());
        model.infer_dynamic(&batch).unwrap();
        model.predict_at(&batch, &[0, 1, 2, 0, 1, 2]).unwrap();
        assert_eq!(model.classifier.bn_sites(), &before[..]);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let run = || {
            let mut state = TrainState::new(Stage::Pretrain, small_model(2, 7), 11);
            pretrain(&mut state, &small_data(24), &quick()).unwrap();
            state
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_is_reported() {
        let mut model = small_model(2, 0);
        let mut batch = small_data(4).batch(&[0, 1, 2, 3]);
        batch.pixels.data_mut()[0] = f64::NAN;
        let r = pretrain_step(&mut model, &batch, 0.1, &quick(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Divergence(_))));
    }
}
