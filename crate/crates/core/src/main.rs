use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use kpt_core::harness::ablate::{ablation_csv, run_ablations};
use kpt_core::harness::eval::{evaluate, trace};
use kpt_core::harness::gradsuite::run_grad_suite;
use kpt_core::harness::train::derive_seed;
use kpt_core::harness::viz::write_all;
use kpt_core::harness::{Checkpoint, TrainConfig, TrainOptions, Trainer};
use kpt_core::metrics::{evaluate_predictions, FramePrediction};
use kpt_core::synthgen::{read_dataset, sample_scene, write_dataset, SceneSample};
use kpt_core::KptError;
use kpt_tensor::gradcheck::GradCheckOptions;

#[derive(Parser)]
#[command(name = "kpt", about = "Keypoint transformer for hand and object pose on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value = "data.kpf")]
        out: PathBuf,
        /// Scene settings come from this training config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model. Any config key can be overridden with `--key value`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint, a prediction file, or the ground truth itself.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSON list of per-sample predictions.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        gt_as_prediction: bool,
        /// Report JSON; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train the baseline and both ablations on one seed and compare.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Evaluation set; the training set when absent.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "ablation.csv")]
        out: PathBuf,
    },
    /// Write SVG overlays for one sample.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value = "viz")]
        out: PathBuf,
        /// Comma-separated query indices; all queries when absent.
        #[arg(long, value_delimiter = ',')]
        queries: Vec<usize>,
    },
    /// Finite-difference check of every differentiable stage.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Config(anyhow::Error),
    Missing(anyhow::Error),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

impl From<KptError> for Failure {
    fn from(e: KptError) -> Self {
        Failure::Other(e.into())
    }
}

fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<TrainConfig, Failure> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p).map_err(|e| Failure::Config(anyhow::Error::new(e).context("cannot read config")))?,
        None => TrainConfig::default(),
    };
    for (k, v) in overrides {
        cfg.set(k, v).map_err(|e| Failure::Config(anyhow::Error::new(e).context(format!("bad override --{k}"))))?;
    }
    cfg.validate().map_err(|e| Failure::Config(e.into()))?;
    Ok(cfg)
}

fn input<T>(r: kpt_core::Result<T>, what: &str) -> Result<T, Failure> {
    r.map_err(|e| match e {
        KptError::Io { .. } => Failure::Missing(anyhow::Error::new(e).context(format!("cannot open {what}"))),
        other => Failure::Other(anyhow::Error::new(other).context(format!("cannot load {what}"))),
    })
}

fn data(path: &Path) -> Result<Vec<SceneSample>, Failure> {
    input(read_dataset(path), "dataset")
}

/// Pulls `--key value` pairs naming config keys out of `args`.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let sub = args.get(1).map(String::as_str);
    if !matches!(sub, Some("train") | Some("ablate")) {
        return (args, Vec::new());
    }
    let keys = TrainConfig::keys();
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let key = a.strip_prefix("--").map(|k| k.split_once('=').map_or((k.to_string(), None), |(k, v)| (k.to_string(), Some(v.to_string()))));
        match key {
            Some((k, inline)) if keys.contains(&k.replace('-', "_")) => {
                let value = inline.or_else(|| it.next()).unwrap_or_default();
                overrides.push((k.replace('-', "_"), value));
            }
            _ => rest.push(a),
        }
    }
    (rest, overrides)
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { seed, count, out, config } => {
            let cfg = load_config(config.as_deref(), overrides)?;
            let samples = (0..count)
                .map(|i| sample_scene(derive_seed(seed, &[0, i as u64]), &cfg.scene))
                .collect::<Result<Vec<_>, _>>()?;
            write_dataset(&out, &samples)?;
            println!("wrote {count} samples to {}", out.display());
        }
        Command::Train { config, data: path, steps, out, resume } => {
            let dataset = data(&path)?;
            let mut trainer = match resume {
                Some(ck) => Trainer::from_checkpoint(&input(Checkpoint::load(&ck), "checkpoint")?)?,
                None => Trainer::new(&load_config(config.as_deref(), overrides)?)?,
            };
            std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
            trainer.config().save(&out.join("config.json"))?;
            let opts = TrainOptions {
                checkpoint: Some(out.join("checkpoint.kpfc")),
                log: Some(out.join("log.csv")),
                max_steps: steps.map(|s| trainer.step + s),
                progress: true,
            };
            let log = trainer.run(&dataset, &opts)?;
            if let Some(last) = log.records.last() {
                println!("finished at step {} with total loss {}", last.step, last.losses.total);
            }
        }
        Command::Eval { data: path, checkpoint, predictions, gt_as_prediction, out, csv } => {
            let dataset = data(&path)?;
            let (report, accuracy) = if gt_as_prediction {
                let preds: Vec<FramePrediction> = dataset.iter().map(FramePrediction::ground_truth).collect();
                (evaluate_predictions(&preds, &dataset)?, None)
            } else if let Some(p) = predictions {
                let text = std::fs::read_to_string(&p).map_err(|e| Failure::Missing(anyhow::Error::new(e).context(format!("cannot open {}", p.display()))))?;
                let preds: Vec<FramePrediction> = serde_json::from_str(&text).context("malformed predictions")?;
                (evaluate_predictions(&preds, &dataset)?, None)
            } else {
                let ck = checkpoint.ok_or_else(|| anyhow::anyhow!("eval needs --checkpoint, --predictions or --gt-as-prediction"))?;
                let ck = input(Checkpoint::load(&ck), "checkpoint")?;
                let trainer = Trainer::from_checkpoint(&ck)?;
                let ev = evaluate(&trainer.model, &dataset)?;
                (ev.report, ev.identity_accuracy)
            };
            let json = report.to_json();
            match out {
                Some(o) => std::fs::write(&o, &json).with_context(|| format!("cannot write {}", o.display()))?,
                None => println!("{json}"),
            }
            if let Some(c) = csv {
                std::fs::write(&c, report.to_csv()).with_context(|| format!("cannot write {}", c.display()))?;
            }
            if let Some(a) = accuracy {
                eprintln!("identity accuracy {a:.4}");
            }
        }
        Command::Ablate { config, data: path, test, steps, out } => {
            let cfg = load_config(config.as_deref(), overrides)?;
            let train = data(&path)?;
            let test = match test {
                Some(t) => data(&t)?,
                None => train.clone(),
            };
            let opts = TrainOptions { max_steps: steps, ..TrainOptions::default() };
            let rows = run_ablations(&cfg, &train, &test, &opts)?;
            let table = ablation_csv(&rows);
            std::fs::write(&out, &table).with_context(|| format!("cannot write {}", out.display()))?;
            print!("{table}");
        }
        Command::Viz { checkpoint, data: path, index, out, queries } => {
            let dataset = data(&path)?;
            let sample = dataset.get(index).ok_or_else(|| anyhow::anyhow!("index {index} outside dataset of {}", dataset.len()))?;
            let trainer = Trainer::from_checkpoint(&input(Checkpoint::load(&checkpoint), "checkpoint")?)?;
            let model = &trainer.model;
            let t = trace(model, std::slice::from_ref(sample))?
                .pop()
                .flatten()
                .ok_or_else(|| anyhow::anyhow!("no keypoints detected in sample {index}"))?;
            let queries = if queries.is_empty() { (0..model.transformer.num_queries()).collect() } else { queries };
            for f in write_all(&out, sample, &t, model.config.heatmap_size, &queries)? {
                println!("{}", f.display());
            }
        }
        Command::GradCheck { trials, seed } => {
            let rows = run_grad_suite(trials, seed, GradCheckOptions::default())?;
            let mut ok = true;
            for r in &rows {
                println!("{:<22} trials {:>3}  max rel err {:.3e}  {}", r.name, r.trials, r.max_rel_error, if r.passed { "ok" } else { "FAIL" });
                ok &= r.passed;
            }
            if !ok {
                return Err(Failure::Other(anyhow::anyhow!("gradient check failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(3)
        }
        Err(Failure::Missing(e)) => {
            eprintln!("missing file: {e:#}");
            ExitCode::from(4)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
