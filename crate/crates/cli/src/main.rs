mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::config::{keys_help, ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "bimac", version, about = "Mask-aware bimodal convolution pansharpening toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Run configuration file (key=value lines).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, ConfigError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        c.apply_overrides(&self.sets)?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a network; writes checkpoint.bmck, loss.csv and config.cfg to out.dir.
    Train(ConfigArgs),
    /// Per-image SAM, ERGAS and Q2n on the validation split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint to evaluate [default: <out.dir>/checkpoint.bmck].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score bicubic upsampling instead of the network.
        #[arg(long)]
        bicubic: bool,
        /// Evaluate the training split instead.
        #[arg(long)]
        train_split: bool,
    },
    /// Write the flat soft mask and hard mask of selected layers as PGM.
    MaskDump {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Validation sample index.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Layer index in execution order; repeatable. Default: all.
        #[arg(long)]
        layer: Vec<usize>,
        /// Keep only layers at this downsampling factor; repeatable.
        #[arg(long)]
        scale: Vec<usize>,
    },
    /// Operation-count report for one layer, optionally for the whole network.
    Flops {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Focused pixel fraction for the analytic model.
        #[arg(long, default_value_t = 0.15)]
        fraction: f64,
        /// Also count a full network pass on a synthetic input.
        #[arg(long)]
        network: bool,
    },
    /// Finite-difference check of every parameter group.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Probes per parameter group.
        #[arg(long, default_value_t = 20)]
        probes: usize,
        /// PAN side length of the probe input [default: smallest valid size].
        #[arg(long)]
        size: Option<usize>,
    },
    /// SVD and radial-spectrum profile of every patch of an image.
    Analyze {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Tensor (.bmt) or PGM image.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 16)]
        patch: usize,
        #[arg(long, default_value_t = bimac::region::DEFAULT_RANK_THRESH)]
        rank_thresh: usize,
        #[arg(long, default_value_t = bimac::region::DEFAULT_HF_THRESH)]
        hf_thresh: f64,
        /// CSV destination [default: stdout].
        #[arg(long)]
        output: Option<PathBuf>,
        /// Optional PGM with complex patches white.
        #[arg(long)]
        class_map: Option<PathBuf>,
    },
    /// Generate a synthetic Wald dataset into data.dir (or <out.dir>/data).
    Synth(ConfigArgs),
}

/// Gradient check finished with failing probes.
#[derive(Debug)]
pub struct GradcheckFailed {
    pub failed: usize,
    pub total: usize,
}

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} of {} gradient probes exceed tolerance", self.failed, self.total)
    }
}

impl std::error::Error for GradcheckFailed {}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if cause.is::<GradcheckFailed>() {
            return 5;
        }
        if let Some(b) = cause.downcast_ref::<bimac::Error>() {
            return match b {
                bimac::Error::Config(_) => 2,
                bimac::Error::NonFinite(_) | bimac::Error::UndefinedMetric(_) => 4,
                _ => 3,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Train(c) => commands::train(&c.load()?),
        Cmd::Eval {
            cfg,
            checkpoint,
            bicubic,
            train_split,
        } => commands::eval(&cfg.load()?, checkpoint, bicubic, train_split),
        Cmd::MaskDump {
            cfg,
            checkpoint,
            sample,
            layer,
            scale,
        } => commands::mask_dump(&cfg.load()?, checkpoint, sample, &layer, &scale),
        Cmd::Flops {
            cfg,
            fraction,
            network,
        } => commands::flops(&cfg.load()?, fraction, network),
        Cmd::Gradcheck { cfg, probes, size } => commands::gradcheck(&cfg.load()?, probes, size),
        Cmd::Analyze {
            cfg,
            input,
            patch,
            rank_thresh,
            hf_thresh,
            output,
            class_map,
        } => {
            cfg.load()?;
            commands::analyze(&input, patch, rank_thresh, hf_thresh, output, class_map)
        }
        Cmd::Synth(c) => commands::synth(&c.load()?),
    }
}

fn main() -> ExitCode {
    let help = keys_help();
    let mut cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for n in names {
        let h = help.clone();
        cmd = cmd.mut_subcommand(n, |s| s.after_help(h));
    }
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
