//! Command-line driver for the `tprnn` forecasting toolkit.

pub mod commands;
pub mod config;
mod staging;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use tprnn::data::Split;
use tprnn::interaction::RnnKind;
use tprnn::model::Variant;
use tprnn::Error;

pub use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "tprnn",
    version,
    about = "Train, evaluate and ablate pyramid RNN forecasters"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Print per-epoch progress to stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split, normalize, fit and score one model; writes a checkpoint, log and report.
    Train(CommonArgs),
    /// Score a checkpoint on one split of a dataset.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint stem (the path without .manifest.json / .params.bin).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Forecast the steps after the last input-length rows of a CSV file.
    Forecast {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output CSV; defaults to <out>/forecast.csv.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train every structural variant plus the baselines under one seed and split.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// Period of the seasonal-repeat baseline.
        #[arg(long, default_value_t = 24)]
        season: usize,
    },
    /// Train once per global-information length.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated lengths; defaults to 1..10.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<usize>>,
    },
    /// Write the synthetic series as CSV.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of time steps.
        #[arg(long)]
        n: Option<usize>,
        /// Output CSV; defaults to <out>/synthetic.csv.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Dump every per-scale predictor matrix and its mean-|w| marginal as CSV.
    ExportWeights {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    config::parse_named(s)
}

fn parse_rnn(s: &str) -> Result<RnnKind, String> {
    config::parse_named(s)
}

#[derive(Debug, Default, Args)]
pub struct CommonArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV dataset; the synthetic preset is used when absent.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Train:val:test shares, e.g. 0.7:0.1:0.2.
    #[arg(long)]
    pub ratios: Option<String>,
    /// Noise level of the synthetic preset.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub input_len: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Number of coarser scales above the input.
    #[arg(long)]
    pub scales: Option<usize>,
    #[arg(long)]
    pub global_len: Option<usize>,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// vanilla, lstm or gru.
    #[arg(long, value_parser = parse_rnn)]
    pub rnn: Option<RnnKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

impl CommonArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            dataset: self.dataset.clone(),
            ratios: self.ratios.clone(),
            noise: self.noise,
            input_len: self.input_len,
            horizon: self.horizon,
            scales: self.scales,
            global_len: self.global_len,
            variant: self.variant,
            rnn: self.rnn,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            patience: self.patience,
            threads: self.threads,
            sweep_values: None,
        }
    }

    pub fn resolve(&self) -> tprnn::Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), &self.overrides())
    }
}

/// Process exit code for each error category.
pub fn exit_code(err: &Error) -> i32 {
    match err.category() {
        "config" => 2,
        "io" => 3,
        "data" => 4,
        "checkpoint" => 5,
        "training" => 6,
        _ => 7,
    }
}

/// Runs one command and returns the lines to print on success.
pub fn run(cli: Cli) -> tprnn::Result<Vec<String>> {
    let verbose = cli.verbose;
    let wrote = |paths: Vec<PathBuf>| {
        paths
            .iter()
            .map(|p| format!("wrote {}", p.display()))
            .collect()
    };
    match cli.command {
        Command::Train(common) => Ok(wrote(commands::train(&common.resolve()?, verbose)?)),
        Command::Evaluate {
            common,
            checkpoint,
            split,
        } => {
            let (paths, report) =
                commands::evaluate_checkpoint(&common.resolve()?, &checkpoint, split)?;
            let mut lines = vec![format!(
                "{split}: mse {:.6} mae {:.6} over {} windows",
                report.mse(),
                report.mae(),
                report.windows
            )];
            lines.extend(wrote(paths));
            Ok(lines)
        }
        Command::Forecast {
            common,
            checkpoint,
            input,
            output,
        } => {
            let cfg = common.resolve()?;
            let output = output.unwrap_or_else(|| cfg.out.join("forecast.csv"));
            let out = commands::forecast(&checkpoint, &input, &output)?;
            Ok(vec![format!(
                "wrote {} ({} steps)",
                output.display(),
                out.len()
            )])
        }
        Command::Ablate { common, season } => {
            let cfg = common.resolve()?;
            let ab = commands::ablate(&cfg, season, verbose)?;
            let mut lines: Vec<String> = ab
                .rows
                .iter()
                .map(|r| match (r.mse, r.mae) {
                    (Some(mse), Some(mae)) => {
                        format!("{:<14} mse {mse:.6} mae {mae:.6}", r.variant.name())
                    }
                    _ => format!("{:<14} {}", r.variant.name(), r.status),
                })
                .collect();
            lines.extend(
                ab.baselines
                    .iter()
                    .map(|b| format!("{:<14} mse {:.6} mae {:.6}", b.model, b.mse, b.mae)),
            );
            lines.extend(wrote(ab.artifacts));
            Ok(lines)
        }
        Command::Sweep { common, values } => {
            let mut o = common.overrides();
            o.sweep_values = values;
            let cfg = RunConfig::resolve(common.config.as_deref(), &o)?;
            let sw = commands::sweep(&cfg, verbose)?;
            let mut lines: Vec<String> = sw
                .rows
                .iter()
                .map(|r| {
                    format!(
                        "global_len {:>3}  mse {:.6} mae {:.6}",
                        r.global_len, r.mse, r.mae
                    )
                })
                .collect();
            lines.extend(
                sw.skipped
                    .iter()
                    .map(|s| format!("global_len {:>3}  skipped: {}", s.global_len, s.reason)),
            );
            lines.extend(wrote(sw.artifacts));
            Ok(lines)
        }
        Command::Synth { common, n, output } => {
            let mut cfg = common.resolve()?;
            if let Some(n) = n {
                let mut spec = cfg.synthetic_spec();
                spec.n = n;
                cfg.data.synthetic = Some(spec);
            }
            let output = output.unwrap_or_else(|| cfg.out.join("synthetic.csv"));
            let ds = commands::synth(&cfg, &output)?;
            Ok(vec![format!(
                "wrote {} ({} rows x {} channels)",
                output.display(),
                ds.len(),
                ds.num_channels()
            )])
        }
        Command::ExportWeights { common, checkpoint } => {
            let cfg = common.resolve()?;
            Ok(wrote(commands::export_weights(&checkpoint, &cfg.out)?))
        }
    }
}
