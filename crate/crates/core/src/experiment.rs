//! Run configuration files and the end-to-end experiment driver.
//!
//! A run config is TOML:
//!
//! ```toml
//! name = "desk-finetune"
//! stage = "finetune"          # or "pretrain"
//! seed = 0
//! output_dir = "runs/finetune"
//!
//! [data]
//! source = "cifar10-binary"   # "idx" or "synthetic"
//! root = "data/cifar-10-batches-bin"
//! means = [0.4914, 0.4822, 0.4465]
//! stds = [0.2470, 0.2435, 0.2616]
//!
//! [model]
//! resolutions = [32, 24, 16]
//! classifier = "desk"         # "resnet50" or a path to an .arch file
//! predictor = "desk"          # "v1".."v4" or a path
//! init_from = "runs/pretrain/final.ckpt"
//!
//! [train]
//! epochs = 40
//! base_lr = 0.1
//!
//! [loss]
//! eta = 0.2
//! alpha_fraction = 0.5        # or an absolute `alpha` in MFLOPs
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::{presets, ArchSpec};
use crate::checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint};
use crate::dataset::{load_cifar10, load_idx, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate_routed, EvalReport, Routing};
use crate::gumbel::GumbelConfig;
use crate::model::{DRModel, ModelSpec};
use crate::objective::LossConfig;
use crate::synthetic::{stripes, StripeSpec};
use crate::train::{train_epoch, EpochRecord, Stage, TrainConfig, TrainState};

pub const CIFAR_MEANS: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STDS: [f64; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSourceKind {
    Cifar10Binary,
    Idx,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub train_count: usize,
    pub val_count: usize,
    pub side: usize,
    pub classes: usize,
    pub fine_fraction: f64,
    pub coarse_period: f64,
    pub fine_period: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let s = StripeSpec::default();
        SyntheticConfig {
            train_count: 2000,
            val_count: 500,
            side: s.side,
            classes: s.classes,
            fine_fraction: s.fine_fraction,
            coarse_period: s.coarse_period,
            fine_period: s.fine_period,
            noise: s.noise,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    fn spec(&self, count: usize, seed: u64) -> StripeSpec {
        StripeSpec {
            count,
            side: self.side,
            classes: self.classes,
            fine_fraction: self.fine_fraction,
            coarse_period: self.coarse_period,
            fine_period: self.fine_period,
            noise: self.noise,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSourceKind,
    #[serde(default)]
    pub root: Option<PathBuf>,
    #[serde(default = "cifar_means")]
    pub means: Vec<f64>,
    #[serde(default = "cifar_stds")]
    pub stds: Vec<f64>,
    #[serde(default)]
    pub limit_train: Option<usize>,
    #[serde(default)]
    pub limit_val: Option<usize>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    /// Validate after every `eval_every` epochs (and always after the last);
    /// 0 disables per-epoch validation.
    #[serde(default = "one")]
    pub eval_every: usize,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
}

fn cifar_means() -> Vec<f64> {
    CIFAR_MEANS.to_vec()
}

fn cifar_stds() -> Vec<f64> {
    CIFAR_STDS.to_vec()
}

fn default_eval_batch() -> usize {
    256
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub resolutions: Vec<usize>,
    /// Side fed to the predictor; defaults to the middle candidate.
    pub predictor_input: Option<usize>,
    pub classes: usize,
    pub classifier: String,
    pub classifier_width: usize,
    pub classifier_blocks: usize,
    pub predictor: String,
    pub predictor_width: usize,
    pub predictor_dropout: f64,
    pub shared_bn: bool,
    /// Checkpoint whose classifier initializes this run.
    pub init_from: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            resolutions: vec![32, 24, 16],
            predictor_input: None,
            classes: 10,
            classifier: "desk".into(),
            classifier_width: 16,
            classifier_blocks: 1,
            predictor: "desk".into(),
            predictor_width: 16,
            predictor_dropout: 0.0,
            shared_bn: false,
            init_from: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSettings {
    pub eta: f64,
    /// Target classifier MFLOPs.
    pub alpha: Option<f64>,
    /// Target as a fraction of the cost range above the cheapest candidate.
    /// Defaults to 0.5 when neither target is given.
    pub alpha_fraction: Option<f64>,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            eta: 0.2,
            alpha: None,
            alpha_fraction: None,
        }
    }
}

impl LossSettings {
    pub fn resolve(&self, costs: &[f64]) -> Result<LossConfig> {
        match (self.alpha, self.alpha_fraction) {
            (Some(a), None) => LossConfig::new(self.eta, a, costs.to_vec()),
            (None, Some(f)) => LossConfig::with_alpha_fraction(self.eta, f, costs.to_vec()),
            (None, None) => LossConfig::with_alpha_fraction(self.eta, 0.5, costs.to_vec()),
            (Some(_), Some(_)) => Err(Error::Config("set exactly one of loss.alpha and loss.alpha_fraction".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub stage: Stage,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossSettings,
    #[serde(default)]
    pub gumbel: GumbelConfig,
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    /// Reads a config file, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        rebase(base, &mut cfg.output_dir);
        if let Some(r) = cfg.data.root.as_mut() {
            rebase(base, r);
        }
        if let Some(r) = cfg.model.init_from.as_mut() {
            rebase(base, r);
        }
        for arch in [&mut cfg.model.classifier, &mut cfg.model.predictor] {
            if arch.ends_with(".arch") && Path::new(arch.as_str()).is_relative() {
                *arch = base.join(arch.as_str()).to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.gumbel.validate()?;
        if self.model.resolutions.is_empty() {
            return Err(Error::Config("model.resolutions is empty".into()));
        }
        Ok(())
    }

    pub fn predictor_input(&self) -> usize {
        let r = &self.model.resolutions;
        self.model.predictor_input.unwrap_or(r[r.len() / 2])
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let m = self.model.resolutions.len();
        let classifier = match self.model.classifier.as_str() {
            "desk" => presets::desk_classifier(self.model.classes, self.model.classifier_width, self.model.classifier_blocks),
            "resnet50" => presets::resnet50(self.model.classes),
            path => read_arch(Path::new(path))?,
        };
        let mut predictor = match self.model.predictor.as_str() {
            "desk" => presets::desk_predictor(m, self.model.predictor_width),
            v @ ("v1" | "v2" | "v3" | "v4") => presets::predictor(v[1..].parse().expect("digit"), m).expect("known variant"),
            path => read_arch(Path::new(path))?,
        };
        for layer in &mut predictor.layers {
            if let crate::arch::LayerSpec::Dropout { rate } = layer {
                *rate = self.model.predictor_dropout;
            }
        }
        Ok(ModelSpec {
            classifier,
            predictor,
            resolutions: self.model.resolutions.clone(),
            predictor_input: self.predictor_input(),
            gumbel: self.gumbel,
            means: self.data.means.clone(),
            stds: self.data.stds.clone(),
        })
    }

    /// Training and validation sets.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let root = || {
            self.data
                .root
                .clone()
                .ok_or_else(|| Error::Config("data.root is required for file-backed sources".into()))
        };
        let (train, val) = match self.data.source {
            DataSourceKind::Cifar10Binary => (load_cifar10(&root()?, Split::Train)?, load_cifar10(&root()?, Split::Val)?),
            DataSourceKind::Idx => (load_idx(&root()?, Split::Train)?, load_idx(&root()?, Split::Val)?),
            DataSourceKind::Synthetic => {
                let s = &self.data.synthetic;
                (
                    stripes(&s.spec(s.train_count, s.seed)).0,
                    stripes(&s.spec(s.val_count, s.seed.wrapping_add(1))).0,
                )
            }
        };
        let cap = |d: Dataset, n: Option<usize>| match n {
            Some(n) if n < d.len() => d.take(n),
            _ => d,
        };
        Ok((cap(train, self.data.limit_train), cap(val, self.data.limit_val)))
    }
}

/// Parses an `.arch` text file.
pub fn read_arch(path: &Path) -> Result<ArchSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.parse()
        .map_err(|e: Error| Error::Config(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub final_checkpoint: PathBuf,
    pub history: Vec<EpochRecord>,
    pub final_eval: Option<EvalReport>,
}

pub fn epoch_checkpoint(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch-{epoch:03}.ckpt"))
}

fn latest_epoch_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<(usize, PathBuf)> = fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let n = name.strip_prefix("epoch-")?.strip_suffix(".ckpt")?.parse().ok()?;
            Some((n, e.path()))
        })
        .collect();
    found.sort();
    found.pop().map(|(_, p)| p)
}

/// Writes `metrics.jsonl` and `metrics.csv` for `history`.
pub fn write_metrics(dir: &Path, history: &[EpochRecord], m: usize) -> Result<()> {
    let mut jsonl = String::new();
    let mut csv = String::from("epoch,lr,l_ce,l_reg,e_flops,top1");
    for j in 0..m {
        csv.push_str(&format!(",hist_{j}"));
    }
    csv.push('\n');
    for r in history {
        jsonl.push_str(&serde_json::to_string(r).expect("record is serializable"));
        jsonl.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        csv.push_str(&format!("{},{},{},{},{},{}", r.epoch, r.lr, r.l_ce, r.l_reg, opt(r.e_flops), opt(r.top1)));
        for j in 0..m {
            csv.push_str(&format!(",{}", r.hist.get(j).copied().unwrap_or(0)));
        }
        csv.push('\n');
    }
    let write = |name: &str, body: &str| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write("metrics.jsonl", &jsonl)?;
    write("metrics.csv", &csv)
}

/// Builds the initial state for `cfg`, or resumes from the newest epoch
/// checkpoint in the output directory when `resume` is set.
pub fn initial_state(cfg: &RunConfig, resume: bool) -> Result<TrainState> {
    if resume {
        if let Some(path) = latest_epoch_checkpoint(&cfg.output_dir) {
            let state = load_checkpoint(&path)?;
            if state.stage != cfg.stage {
                return Err(Error::Load(format!(
                    "{} holds a {:?} run, config asks for {:?}",
                    path.display(),
                    state.stage,
                    cfg.stage
                )));
            }
            return Ok(state);
        }
    }
    let mut model = DRModel::new(&cfg.model_spec()?, cfg.seed)?;
    if let Some(init) = &cfg.model.init_from {
        read_checkpoint(init)?.load_classifier_into(&mut model)?;
    }
    model.set_shared_bn(cfg.model.shared_bn)?;
    Ok(TrainState::new(cfg.stage, model, cfg.seed))
}

fn validation_routing(stage: Stage) -> Routing<'static> {
    match stage {
        Stage::Pretrain => Routing::Static(0),
        Stage::Finetune => Routing::Dynamic,
    }
}

/// Runs (or resumes) the configured stage, writing a checkpoint per epoch,
/// `final.ckpt`, and the metrics files into `cfg.output_dir`.
pub fn run_experiment(cfg: &RunConfig, resume: bool, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<RunSummary> {
    cfg.validate()?;
    let (train, val) = cfg.load_data()?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let cfg_copy = cfg.output_dir.join("config.toml");
    fs::write(&cfg_copy, cfg.to_toml()).map_err(|e| Error::io(&cfg_copy, e))?;

    let mut state = initial_state(cfg, resume)?;
    let loss = match cfg.stage {
        Stage::Finetune => Some(cfg.loss.resolve(&state.model.resolutions.costs)?),
        Stage::Pretrain => None,
    };
    let m = state.model.candidate_count();
    let mut final_eval = None;
    while state.epoch < cfg.train.epochs {
        let mut rec = train_epoch(&mut state, &train, &cfg.train, loss.as_ref())?;
        let last = state.epoch == cfg.train.epochs;
        let due = cfg.data.eval_every > 0 && state.epoch % cfg.data.eval_every == 0;
        if !val.is_empty() && (due || last) {
            let rep = evaluate_routed(&mut state.model, &val, cfg.data.eval_batch_size, validation_routing(cfg.stage))?;
            rec.top1 = Some(rep.top1);
            rec.hist = rep.histogram.clone();
            final_eval = Some(rep);
        }
        on_epoch(&rec);
        state.history.push(rec);
        save_checkpoint(&epoch_checkpoint(&cfg.output_dir, state.epoch - 1), &mut state)?;
        write_metrics(&cfg.output_dir, &state.history, m)?;
    }
    let final_checkpoint = cfg.output_dir.join("final.ckpt");
    save_checkpoint(&final_checkpoint, &mut state)?;
    write_metrics(&cfg.output_dir, &state.history, m)?;
    Ok(RunSummary {
        final_checkpoint,
        history: state.history,
        final_eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(dir: &Path, stage: &str, epochs: usize) -> RunConfig {
        let text = format!(
            r#"
name = "t"
stage = "{stage}"
seed = 4
output_dir = "{out}"

[data]
source = "synthetic"
means = [0.5, 0.5, 0.5]
stds = [0.25, 0.25, 0.25]
eval_batch_size = 16

[data.synthetic]
train_count = 24
val_count = 12
side = 16
coarse_period = 6.0
fine_period = 2.5

[model]
resolutions = [16, 12, 8]
classes = 4
classifier_width = 4
predictor_width = 4

[train]
epochs = {epochs}
batch_size = 8
warmup_epochs = 1
decay_every = 1
decay_factor = 0.5
augment_pad = 2

[loss]
eta = 0.5
alpha_fraction = 0.2
"#,
            out = dir.display()
        );
        RunConfig::from_toml(&text).unwrap()
    }

    #[test]
    fn config_parses_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let c = config(dir.path(), "finetune", 2);
        assert_eq!(c.predictor_input(), 12);
        assert_eq!(c.train.momentum, 0.9);
        assert_eq!(c.gumbel.tau, 1.0);
        let again = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(again, c);
        assert!(RunConfig::from_toml("name = 1").is_err());
    }

    #[test]
    fn alpha_targets() {
        let text = r#"
name = "a"
stage = "finetune"
output_dir = "x"
[data]
source = "synthetic"
[loss]
alpha = 12.5
"#;
        let c = RunConfig::from_toml(text).unwrap();
        assert_eq!(c.loss.resolve(&[20.0, 10.0]).unwrap().alpha, 12.5);
        assert_eq!(LossSettings::default().resolve(&[20.0, 10.0]).unwrap().alpha, 15.0);
        let both = LossSettings {
            alpha: Some(1.0),
            alpha_fraction: Some(0.1),
            ..Default::default()
        };
        assert!(both.resolve(&[20.0, 10.0]).is_err());
    }

    #[test]
    fn runs_are_reproducible_and_resumable() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run_experiment(&config(a.path(), "finetune", 3), false, |_| {}).unwrap();
        let rb = run_experiment(&config(b.path(), "finetune", 3), false, |_| {}).unwrap();
        assert_eq!(fs::read(&ra.final_checkpoint).unwrap(), fs::read(&rb.final_checkpoint).unwrap());
        let metrics = fs::read_to_string(a.path().join("metrics.jsonl")).unwrap();
        assert_eq!(metrics.lines().count(), 3);
        for key in ["epoch", "lr", "l_ce", "l_reg", "e_flops", "top1", "hist"] {
            assert!(metrics.lines().next().unwrap().contains(&format!("\"{key}\"")), "{key}");
        }

        // Interrupt after epoch 1 and resume.
        let c = tempfile::tempdir().unwrap();
        run_experiment(&config(c.path(), "finetune", 3), false, |_| {}).unwrap();
        fs::remove_file(c.path().join("epoch-002.ckpt")).unwrap();
        fs::remove_file(c.path().join("final.ckpt")).unwrap();
        let rc = run_experiment(&config(c.path(), "finetune", 3), true, |_| {}).unwrap();
        assert_eq!(rc.history, ra.history);
        assert_eq!(fs::read(&rc.final_checkpoint).unwrap(), fs::read(&ra.final_checkpoint).unwrap());
        assert_eq!(fs::read_to_string(c.path().join("metrics.jsonl")).unwrap(), metrics);
    }

    #[test]
    fn finetune_initializes_from_pretrain() {
        let p = tempfile::tempdir().unwrap();
        let pre = run_experiment(&config(p.path(), "pretrain", 2), false, |_| {}).unwrap();
        let f = tempfile::tempdir().unwrap();
        let mut cfg = config(f.path(), "finetune", 2);
        cfg.model.init_from = Some(pre.final_checkpoint.clone());
        let state = initial_state(&cfg, false).unwrap();
        let pre_state = load_checkpoint(&pre.final_checkpoint).unwrap();
        let weights = |s: &TrainState| s.model.classifier.params().map(|p| p.tensor.clone()).collect::<Vec<_>>();
        assert_eq!(weights(&state), weights(&pre_state));

        let mut wrong = cfg.clone();
        wrong.model.classifier_width = 8;
        let err = initial_state(&wrong, false).err().unwrap().to_string();
        assert!(err.contains("classifier.layer0.conv.weight"), "{err}");
    }
}
