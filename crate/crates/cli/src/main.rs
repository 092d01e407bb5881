use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use drnet::arch::{presets, ArchSpec};
use drnet::checkpoint::load_checkpoint;
use drnet::dataset::{load_cifar10, load_idx, Dataset, Split};
use drnet::eval::{evaluate_routed, histogram_csv, histogram_text, random_resolution_baseline, Routing};
use drnet::experiment::{read_arch, run_experiment, RunConfig};
use drnet::flops::model_flops;
use drnet::gradcheck::{run_suite, SUITE_TOLERANCE};
use drnet::model::DRModel;
use drnet::synthetic::{stripes, StripeSpec};
use drnet::train::Stage;

/// Dynamic-resolution image classification: training, evaluation and cost analysis.
#[derive(Parser)]
#[command(name = "drnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the classifier at every candidate resolution.
    Pretrain(TrainArgs),
    /// Jointly train the resolution predictor and classifier.
    Finetune(TrainArgs),
    /// Evaluate a checkpoint with predictor-selected (or fixed) resolutions.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Run every sample at candidate J instead of asking the predictor.
        #[arg(long = "static", value_name = "J")]
        static_index: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Count multiply-accumulates of an architecture at given input sides.
    Flops {
        /// `.arch` file or preset (resnet50, desk-classifier, desk-predictor, predictor-v1..v4).
        arch: String,
        #[arg(long = "resolution", short = 'r', required = true, num_args = 1..)]
        resolutions: Vec<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Compare against randomly assigned resolutions with the same histogram.
    Baseline {
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 3)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Run the finite-difference gradient checks.
    Gradcheck {
        #[arg(long)]
        json: bool,
    },
    /// Print the resolution-selection histogram of a checkpoint.
    Hist {
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Also write the histogram as CSV to this file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write a synthetic stripes dataset as CIFAR-10 binary files.
    Synth {
        dir: PathBuf,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 500)]
        val: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    config: PathBuf,
    /// Continue from the newest epoch checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Override the configured epoch count.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Cifar10Binary,
    Idx,
}

#[derive(Args)]
#[group(required = true, multiple = false, id = "source")]
struct Source {
    /// Use the validation split of a run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding a dataset in `--format`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Generate N synthetic validation samples.
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
}

#[derive(Args)]
struct DataArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long, value_enum, default_value = "cifar10-binary")]
    format: Format,
    /// Evaluate only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
}

impl DataArgs {
    fn load(&self, model: &DRModel) -> Result<Dataset> {
        let s = &self.source;
        let data = if let Some(cfg) = &s.config {
            RunConfig::load(cfg)?.load_data()?.1
        } else if let Some(dir) = &s.data {
            match self.format {
                Format::Cifar10Binary => load_cifar10(dir, Split::Val)?,
                Format::Idx => load_idx(dir, Split::Val)?,
            }
        } else {
            let n = s.synthetic.expect("clap enforces one source");
            stripes(&StripeSpec {
                count: n,
                side: model.resolutions.resolutions[0],
                classes: model.class_count(),
                seed: 1,
                ..Default::default()
            })
            .0
        };
        Ok(match self.limit {
            Some(n) if n < data.len() => data.take(n),
            _ => data,
        })
    }
}

fn arch_from(name: &str) -> Result<ArchSpec> {
    let spec = match name {
        "resnet50" => presets::resnet50(1000),
        "desk-classifier" => presets::desk_classifier(10, 16, 1),
        "desk-predictor" => presets::desk_predictor(3, 16),
        v if v.starts_with("predictor-v") => {
            let n: u8 = v["predictor-v".len()..].parse().context("predictor variant")?;
            presets::predictor(n, 3).with_context(|| format!("unknown predictor variant {n}"))?
        }
        path => read_arch(Path::new(path))?,
    };
    Ok(spec)
}

fn train(args: &TrainArgs, stage: Stage) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if cfg.stage != stage {
        bail!(
            "{} is a {:?} config; use the matching subcommand",
            args.config.display(),
            cfg.stage
        );
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    let summary = run_experiment(&cfg, args.resume, |r| {
        let opt = |v: Option<f64>, p: usize| v.map_or("-".into(), |x| format!("{x:.p$}"));
        println!(
            "epoch {:>3}  lr {:.5}  l_ce {:.4}  l_reg {:.4}  e_flops {}  top1 {}  hist {:?}",
            r.epoch,
            r.lr,
            r.l_ce,
            r.l_reg,
            opt(r.e_flops, 3),
            opt(r.top1, 4),
            r.hist
        );
    })?;
    println!("wrote {}", summary.final_checkpoint.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Pretrain(a) => train(&a, Stage::Pretrain)?,
        Command::Finetune(a) => train(&a, Stage::Finetune)?,
        Command::Eval {
            checkpoint,
            data,
            static_index,
            json,
        } => {
            let mut model = load_checkpoint(&checkpoint)?.model;
            let ds = data.load(&model)?;
            let routing = static_index.map_or(Routing::Dynamic, Routing::Static);
            let rep = evaluate_routed(&mut model, &ds, data.batch_size, routing)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&rep)?);
            } else {
                println!("samples          {}", rep.samples);
                println!("top1             {:.4}", rep.top1);
                println!("classifier MFLOPs {:.4}", rep.avg_classifier_flops);
                println!("predictor MFLOPs  {:.4}", rep.predictor_flops);
                println!("total MFLOPs      {:.4}", rep.avg_total_flops);
                print!("{}", histogram_text(&model, &rep.histogram));
            }
        }
        Command::Flops { arch, resolutions, json } => {
            let spec = arch_from(&arch)?;
            let reports = resolutions
                .iter()
                .map(|&r| model_flops(&spec, r))
                .collect::<drnet::Result<Vec<_>>>()?;
            if json {
                println!("{}", serde_json::to_string_pretty(&reports)?);
            } else {
                for r in &reports {
                    println!("{}", r.to_text(&spec.name));
                }
            }
        }
        Command::Baseline {
            checkpoint,
            data,
            trials,
            seed,
            json,
        } => {
            let mut model = load_checkpoint(&checkpoint)?.model;
            let ds = data.load(&model)?;
            let dynamic = evaluate_routed(&mut model, &ds, data.batch_size, Routing::Dynamic)?;
            let base = random_resolution_baseline(&mut model, &ds, &dynamic.histogram, trials, seed, data.batch_size)?;
            if json {
                let out = serde_json::json!({ "dynamic": dynamic, "random": base });
                println!("{}", serde_json::to_string_pretty(&out)?);
            } else {
                println!(
                    "predictor  top1 {:.4}  classifier MFLOPs {:.4}",
                    dynamic.top1, dynamic.avg_classifier_flops
                );
                println!(
                    "random     top1 {:.4} ± {:.4} over {trials} trials  classifier MFLOPs {:.4}",
                    base.mean, base.std, base.avg_classifier_flops
                );
            }
        }
        Command::Gradcheck { json } => {
            let results = run_suite()?;
            let ok = results.iter().all(|r| r.passed);
            if json {
                println!("{}", serde_json::to_string_pretty(&results)?);
            } else {
                for r in &results {
                    let tag = if r.passed { "ok  " } else { "FAIL" };
                    println!("{tag} {:<48} {:.3e}", r.name, r.max_rel_error);
                }
                println!(
                    "{}/{} checks below {SUITE_TOLERANCE:e}",
                    results.iter().filter(|r| r.passed).count(),
                    results.len()
                );
            }
            return Ok(ok);
        }
        Command::Hist { checkpoint, data, csv } => {
            let mut model = load_checkpoint(&checkpoint)?.model;
            let ds = data.load(&model)?;
            let rep = evaluate_routed(&mut model, &ds, data.batch_size, Routing::Dynamic)?;
            print!("{}", histogram_text(&model, &rep.histogram));
            let table = histogram_csv(&model, &rep.histogram);
            match csv {
                Some(p) => fs::write(&p, table).with_context(|| format!("writing {}", p.display()))?,
                None => print!("\n{table}"),
            }
        }
        Command::Synth {
            dir,
            train,
            val,
            classes,
            seed,
        } => {
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let spec = |count, seed| StripeSpec {
                count,
                side: 32,
                classes,
                seed,
                ..Default::default()
            };
            stripes(&spec(train, seed)).0.write_cifar10(&dir, Split::Train)?;
            stripes(&spec(val, seed.wrapping_add(1))).0.write_cifar10(&dir, Split::Val)?;
            println!("wrote {train} training and {val} validation images to {}", dir.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
