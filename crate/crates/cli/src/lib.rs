//! Command-line driver: argument parsing, run configuration and the subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dapnet_core::train::DEFAULT_SEEDS;

use crate::commands::{InferenceArgs, SynthArgs, DEFAULT_DELTAS, VARIANTS};
use crate::config::{load_run_config, RunConfig};
use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(
    name = "dapnet",
    version,
    about = "Train, evaluate and inspect mixture-of-experts time-series classifiers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `loss.delta=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace missing or non-finite values with zero instead of rejecting them.
    #[arg(long)]
    pub impute_zero: bool,
}

impl RunArgs {
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = load_run_config(self.config.as_deref(), &self.set)?;
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        cfg.data.impute_zero |= self.impute_zero;
        Ok(cfg)
    }

    /// `--seeds`, else `--seed` alone, else the default five.
    fn seeds(&self, seeds: &Option<Vec<u64>>) -> Vec<u64> {
        match (seeds, self.seed) {
            (Some(s), _) => s.clone(),
            (None, Some(s)) => vec![s],
            (None, None) => DEFAULT_SEEDS.to_vec(),
        }
    }
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory (meta.json + samples.csv).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub impute_zero: bool,
}

impl From<&InspectArgs> for InferenceArgs {
    fn from(a: &InspectArgs) -> Self {
        Self {
            checkpoint: a.checkpoint.clone(),
            data: a.data.clone(),
            out: a.out.clone(),
            impute_zero: a.impute_zero,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write its artifacts.
    Train(RunArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(InspectArgs),
    /// Per-class mean gate weights of a checkpoint on a dataset.
    InspectRouting(InspectArgs),
    /// Train ablation variants across seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_values_t = VARIANTS.map(String::from))]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Concurrent training runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train across balance coefficients and seeds.
    SweepDelta {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_DELTAS)]
        deltas: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write the synthetic three-class dataset.
    Synth {
        #[arg(long, default_value_t = 200)]
        n_per_class: usize,
        #[arg(long, default_value_t = 64)]
        t: usize,
        #[arg(long, default_value_t = 8)]
        c: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Train(args) => commands::cmd_train(&args.resolve()?).map(drop),
        Command::Eval(args) => commands::cmd_eval(&args.into()).map(drop),
        Command::InspectRouting(args) => commands::cmd_inspect_routing(&args.into()).map(drop),
        Command::Ablate {
            run,
            variants,
            seeds,
            jobs,
        } => commands::cmd_ablate(&run.resolve()?, variants, &run.seeds(seeds), *jobs).map(drop),
        Command::SweepDelta {
            run,
            deltas,
            seeds,
            jobs,
        } => commands::cmd_sweep_delta(&run.resolve()?, deltas, &run.seeds(seeds), *jobs).map(drop),
        Command::Synth {
            n_per_class,
            t,
            c,
            seed,
            out,
        } => {
            let args = SynthArgs {
                n_per_class: *n_per_class,
                t: *t,
                c: *c,
                seed: *seed,
            };
            commands::cmd_synth(&args, out).map(drop)
        }
    }
}
