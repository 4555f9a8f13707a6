//! Command-line entry points.
//!
//! Exit codes: 0 success, 1 failed gradient check, 2 configuration or data
//! error, 3 numerical divergence or degenerate partition.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{load_dataset, save_dataset, synth_dataset, Dataset, SynthConfig};
use crate::doublewell::{Activation, DoubleWellParams};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::gradcheck;
use crate::metrics::{format_sig6, write_metrics_csv};
use crate::pnm::{load_image, save_image};
use crate::potts::{
    classical_solve, threshold, ChanVeseParams, ClassicalConfig, EmptyRegionFallback, Model,
    ModelConfig, ModelKind,
};
use crate::train::{evaluate, holdout_split, train_with_progress, AccuracyMode, LossKind, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "dwnet", version, about = "Double-well network image segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Dn1,
    Dn2,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Dn1 => ModelKind::Dn1,
            ModelArg::Dn2 => ModelKind::Dn2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    All,
    Train,
    Holdout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmptyRegionArg {
    GlobalMean,
    Error,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic image/mask dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        /// Background and foreground intensity, `LO,HI`.
        #[arg(long, default_value = "0.25,0.75")]
        contrast: String,
    },
    /// Train a network and write its checkpoint and per-epoch metrics.
    Train {
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Segment one image with a trained network.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write the soft prediction.
        #[arg(long)]
        soft: Option<PathBuf>,
    },
    /// Segment one image with the untrained Chan-Vese double-well solver.
    SegmentClassical {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        tau: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda_eps: f64,
        #[arg(long, default_value_t = 3)]
        gamma: u32,
        #[arg(long, default_value_t = 15.0)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        alpha_cv: f64,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// Steps during which region means are re-estimated.
        #[arg(long, default_value_t = 1000)]
        max_outer: usize,
        #[arg(long, value_enum, default_value_t = EmptyRegionArg::GlobalMean)]
        empty_region: EmptyRegionArg,
        #[arg(long)]
        energy_trace: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Samples to score; `holdout` is the split reported during training.
        #[arg(long, value_enum, default_value_t = Split::Holdout)]
        split: Split,
        #[arg(long, value_enum, default_value_t = LossArg::Bce)]
        loss: LossArg,
        #[arg(long, value_enum, default_value_t = AccuracyArg::Agreement)]
        accuracy: AccuracyArg,
    },
    /// Compare reverse-mode gradients of a tiny model with finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = ModelArg::Dn1)]
        model: ModelArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Central-difference step.
        #[arg(long, default_value_t = gradcheck::DEFAULT_STEP)]
        eps: f64,
        #[arg(long, hide = true)]
        corrupt_adjoint: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Bce,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AccuracyArg {
    Agreement,
    Literal,
}

/// JSON run description. Every key is optional; absent keys take the
/// defaults of the chosen model kind.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<ModelKind>,
    pub blocks: Option<usize>,
    pub channels: Option<Vec<usize>>,
    pub tau: Option<f64>,
    pub lambda_eps: Option<f64>,
    pub alpha: Option<f64>,
    pub gamma: Option<u32>,
    pub activation: Option<Activation>,
    pub io_kernel_size: Option<usize>,
    pub control_kernel_size: Option<usize>,
    pub unet_kernel_size: Option<usize>,
    pub loss: Option<LossKind>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    pub accuracy_mode: Option<AccuracyMode>,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Resolves the model kind from the flag and the file; they must agree.
    pub fn kind(&self, flag: Option<ModelKind>) -> Result<ModelKind> {
        match (flag, self.model) {
            (Some(a), Some(b)) if a != b => Err(Error::Config(format!(
                "--model {a} conflicts with \"model\": \"{b}\" in the config"
            ))),
            (Some(k), _) | (None, Some(k)) => Ok(k),
            (None, None) => Err(Error::Config("no model kind given (use --model or \"model\")".into())),
        }
    }

    pub fn model_config(&self, kind: ModelKind, image_channels: usize) -> Result<ModelConfig> {
        let base = match kind {
            ModelKind::Dn1 => ModelConfig::full_dn1(image_channels),
            ModelKind::Dn2 => ModelConfig::full_dn2(image_channels),
        };
        let d = base.scheme;
        let cfg = ModelConfig {
            kind,
            image_channels,
            blocks: self.blocks.unwrap_or(base.blocks),
            channels: self.channels.clone().unwrap_or(base.channels),
            scheme: DoubleWellParams::new(
                self.tau.unwrap_or(d.tau),
                self.lambda_eps.unwrap_or(d.lambda_eps),
                self.alpha.unwrap_or(d.alpha),
                self.gamma.unwrap_or(d.gamma),
                self.activation.unwrap_or(d.activation),
            )?,
            io_kernel_size: self.io_kernel_size.unwrap_or(base.io_kernel_size),
            control_kernel_size: self.control_kernel_size.unwrap_or(base.control_kernel_size),
            unet_kernel_size: self.unet_kernel_size.unwrap_or(base.unet_kernel_size),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            loss_kind: self.loss.unwrap_or(d.loss_kind),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            epochs: self.epochs.unwrap_or(d.epochs),
            seed: self.seed.unwrap_or(d.seed),
            adam_beta1: self.adam_beta1.unwrap_or(d.adam_beta1),
            adam_beta2: self.adam_beta2.unwrap_or(d.adam_beta2),
            adam_eps: self.adam_eps.unwrap_or(d.adam_eps),
            accuracy_mode: self.accuracy_mode.unwrap_or(d.accuracy_mode),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Divergence(_) | Error::DegeneratePartition(_) => 3,
        _ => 2,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: Command) -> Result<i32> {
    match command {
        Command::Synth {
            out,
            n,
            size,
            seed,
            noise,
            contrast,
        } => {
            let contrast = parse_pair(&contrast)?;
            let ds = synth_dataset(&SynthConfig {
                seed,
                n,
                size,
                noise_sd: noise,
                contrast,
            })?;
            save_dataset(&ds, &out)?;
            println!("wrote {n} samples of {size}x{size} to {}", out.display());
            Ok(0)
        }
        Command::Train {
            model,
            config,
            data,
            out,
            metrics,
        } => cmd_train(model.map(Into::into), config.as_deref(), &data, &out, metrics.as_deref()),
        Command::Infer {
            ckpt,
            input,
            output,
            soft,
        } => {
            let model = load_checkpoint(&ckpt)?;
            let image = load_image(&input)?;
            let pred = model.predict(&image)?;
            save_image(&threshold(&pred), &output)?;
            if let Some(soft) = soft {
                save_image(&pred, &soft)?;
            }
            Ok(0)
        }
        Command::SegmentClassical {
            input,
            output,
            tau,
            lambda_eps,
            gamma,
            alpha,
            alpha_cv,
            steps,
            max_outer,
            empty_region,
            energy_trace,
        } => {
            let image = load_image(&input)?;
            let (lo, hi) = image.min_max();
            if lo == hi {
                eprintln!("warning: {} is constant; the segmentation is a threshold tie", input.display());
            }
            let cfg = ClassicalConfig {
                scheme: DoubleWellParams::new(tau, lambda_eps, alpha, gamma, Activation::QgammaProj)?,
                cv: ChanVeseParams {
                    alpha_cv,
                    max_outer,
                    empty_region_fallback: match empty_region {
                        EmptyRegionArg::GlobalMean => EmptyRegionFallback::GlobalMean,
                        EmptyRegionArg::Error => EmptyRegionFallback::Error,
                    },
                },
                steps,
            };
            let outcome = classical_solve(&image, &cfg)?;
            save_image(&threshold(&outcome.u), &output)?;
            if let Some(path) = energy_trace {
                let mut text = String::from("step,region_term,gl_gradient_term,double_well_term,total\n");
                for (k, e) in outcome.energy_trace.iter().enumerate() {
                    text.push_str(&format!(
                        "{k},{},{},{},{}\n",
                        e.region_term, e.gl_gradient_term, e.double_well_term, e.total
                    ));
                }
                std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
            Ok(0)
        }
        Command::Eval {
            ckpt,
            data,
            metrics,
            split,
            loss,
            accuracy,
        } => {
            let model = load_checkpoint(&ckpt)?;
            let ds = load_dataset(&data)?;
            let ds = select_split(&ds, split);
            let loss = match loss {
                LossArg::Bce => LossKind::Bce,
                LossArg::L2 => LossKind::L2,
            };
            let mode = match accuracy {
                AccuracyArg::Agreement => AccuracyMode::Agreement,
                AccuracyArg::Literal => AccuracyMode::Literal,
            };
            let record = evaluate(&model, &ds, loss, mode)?;
            println!(
                "{} samples: loss {} accuracy {}% dice {}",
                ds.len(),
                format_sig6(record.mean_loss),
                format_sig6(record.accuracy_pct),
                format_sig6(record.dice)
            );
            if let Some(path) = metrics {
                write_metrics_csv(&[record], &path)?;
            }
            Ok(0)
        }
        Command::Gradcheck {
            model,
            seed,
            eps,
            corrupt_adjoint,
        } => {
            if !(eps > 0.0) {
                return Err(Error::Config(format!("--eps must be positive, got {eps}")));
            }
            let r = gradcheck::end_to_end(model.into(), seed, eps, corrupt_adjoint)?;
            println!(
                "max relative error {:e} at {} (analytic {:e}, numeric {:e}) over {} entries",
                r.max_rel_err, r.worst, r.analytic, r.numeric, r.checked
            );
            Ok(if r.max_rel_err <= gradcheck::TOLERANCE { 0 } else { 1 })
        }
    }
}

fn parse_pair(s: &str) -> Result<(f64, f64)> {
    let bad = || Error::Config(format!("expected LO,HI, got {s:?}"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

/// Samples of `split` under the training split rule.
pub fn select_split(ds: &Dataset, split: Split) -> Dataset {
    let (train, held) = holdout_split(ds.len());
    match split {
        Split::All => ds.clone(),
        Split::Train => ds.slice(train),
        Split::Holdout if held.is_empty() => ds.slice(train),
        Split::Holdout => ds.slice(held),
    }
}

fn cmd_train(
    flag: Option<ModelKind>,
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    metrics: Option<&Path>,
) -> Result<i32> {
    let run = match config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    let kind = run.kind(flag)?;
    let train_cfg = run.train_config()?;
    let ds = load_dataset(data)?;
    let channels = ds
        .images
        .first()
        .map(Field::channels)
        .ok_or_else(|| Error::Config(format!("{} holds no samples", data.display())))?;
    let model_cfg = run.model_config(kind, channels)?;
    let model = Model::build(&model_cfg, train_cfg.seed)?;
    let outcome = train_with_progress(model, &ds, &train_cfg, |r| {
        eprintln!(
            "epoch {:>4}  loss {}  accuracy {}%  dice {}  {}s",
            r.epoch,
            format_sig6(r.mean_loss),
            format_sig6(r.accuracy_pct),
            format_sig6(r.dice),
            format_sig6(r.wall_seconds)
        );
    })?;
    save_checkpoint(&outcome.model, out)?;
    if let Some(path) = metrics {
        write_metrics_csv(&outcome.history, path)?;
    }
    match outcome.history.last() {
        Some(r) => println!(
            "final held-out accuracy {}% dice {}",
            format_sig6(r.accuracy_pct),
            format_sig6(r.dice)
        ),
        None => println!("no epochs run; wrote the initial model"),
    }
    Ok(0)
}
