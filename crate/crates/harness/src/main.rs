use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ttfs_harness::config::{AlphaSetting, ExperimentConfig, Mode, OptimizerChoice};
use ttfs_harness::runner::run_experiment;

#[derive(Parser)]
#[command(
    name = "ttfs",
    version,
    about = "Train, convert and analyse time-to-first-spike networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an SNN from scratch.
    Train(Overrides),
    /// Continue training a checkpoint or an imported ReLU network, optionally
    /// under hardware constraints.
    Finetune(Overrides),
    /// Map a ReLU network to an SNN and check the equivalence.
    Convert(Overrides),
    /// Jacobian spectra, gradient profiles and a lock-step trajectory.
    Diagnose(Overrides),
}

/// Flags override values from the config file.
#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    /// `linear` or `constant:VALUE`.
    #[arg(long)]
    alpha_policy: Option<AlphaSetting>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerChoice>,
    /// Comma-separated hidden widths.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
    #[arg(long)]
    quant_time_steps: Option<usize>,
    #[arg(long)]
    quant_weight_bits: Option<u32>,
    #[arg(long)]
    jitter_sd: Option<f64>,
    #[arg(long)]
    latency_percentile: Option<f64>,
    /// SNN checkpoint to start from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// ReLU checkpoint to import.
    #[arg(long)]
    ann: Option<PathBuf>,
    /// Train a reference ReLU network on the same batches.
    #[arg(long)]
    reference_ann: bool,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Overrides {
    fn apply(self, mode: Mode) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.mode = mode;
        macro_rules! set {
            ($flag:expr => $field:expr) => {
                if let Some(v) = $flag {
                    $field = v;
                }
            };
        }
        set!(self.data_dir => cfg.data.dir);
        set!(self.seed => cfg.training.seed);
        set!(self.epochs => cfg.training.epochs);
        set!(self.lr0 => cfg.training.lr0);
        set!(self.alpha_policy => cfg.network.alpha_policy);
        set!(self.hidden => cfg.network.hidden);
        set!(self.jitter_sd => cfg.constraints.jitter_sd);
        set!(self.trials => cfg.training.trials);
        set!(self.out => cfg.output.dir);
        if self.optimizer.is_some() {
            cfg.training.optimizer = self.optimizer;
        }
        if self.train_limit.is_some() {
            cfg.data.train_limit = self.train_limit;
        }
        if self.test_limit.is_some() {
            cfg.data.test_limit = self.test_limit;
        }
        if self.quant_time_steps.is_some() {
            cfg.constraints.time_steps_per_layer = self.quant_time_steps;
        }
        if self.quant_weight_bits.is_some() {
            cfg.constraints.weight_bits = self.quant_weight_bits;
        }
        if self.latency_percentile.is_some() {
            cfg.constraints.latency_percentile = self.latency_percentile;
        }
        if self.checkpoint.is_some() {
            cfg.load.checkpoint = self.checkpoint;
        }
        if self.ann.is_some() {
            cfg.load.ann = self.ann;
        }
        cfg.training.reference_ann |= self.reference_ann;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (mode, overrides) = match cli.command {
        Command::Train(o) => (Mode::Train, o),
        Command::Finetune(o) => (Mode::Finetune, o),
        Command::Convert(o) => (Mode::Convert, o),
        Command::Diagnose(o) => (Mode::Diagnose, o),
    };
    let cfg = overrides.apply(mode)?;
    let summaries = run_experiment(&cfg).context("experiment failed")?;
    println!("{}", serde_json::to_string_pretty(&summaries)?);
    Ok(())
}
