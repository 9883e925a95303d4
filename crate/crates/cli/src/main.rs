use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tpnica_cli::commands::{evaluate, generate, thread_budget, train, DATASET_DIR};
use tpnica_cli::config::{ExperimentConfig, ModelKind, SweepConfig};
use tpnica_cli::{CliError, Result};

#[derive(Parser)]
#[command(name = "tpnica", version, about = "Spatial nonlinear ICA with t-process and Gaussian-process components")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    model: Option<ModelKind>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(model) = self.model {
            cfg.model = model;
        }
        let cfg = cfg.resolved();
        cfg.validate()?;
        let out = cfg.output_dir()?;
        Ok((cfg, out))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample latent fields, mix them and write the dataset.
    Generate(Common),
    /// Fit the model to a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; defaults to <out>/dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score posterior-mean components and the linear ICA baseline.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint directory; defaults to <out>/checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score the ground truth against itself.
        #[arg(long)]
        truth_as_estimate: bool,
    },
    /// Run a grid of experiments and aggregate across seeds.
    Sweep {
        /// JSON sweep config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Rerun cells that already have results.
        #[arg(long)]
        force: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    let threads = thread_budget();
    match cli.command {
        Command::Generate(common) => {
            let (cfg, out) = common.resolve()?;
            generate(&cfg, &out, common.force)?;
        }
        Command::Train { common, data, resume } => {
            let (cfg, out) = common.resolve()?;
            let data = data.unwrap_or_else(|| out.join(DATASET_DIR));
            train(&cfg, &out, &data, resume.as_deref(), common.force, threads)?;
        }
        Command::Evaluate { common, data, checkpoint, truth_as_estimate } => {
            let (cfg, out) = common.resolve()?;
            let data = data.unwrap_or_else(|| out.join(DATASET_DIR));
            let ev = evaluate(&cfg, &out, &data, checkpoint.as_deref(), truth_as_estimate, threads)?;
            for row in &ev.rows {
                println!("{}\t{:.4}", row.model, row.mcc);
            }
        }
        Command::Sweep { config, out, force } => {
            let mut cfg = match &config {
                Some(p) => SweepConfig::load(p)?,
                None => SweepConfig::default(),
            };
            if let Some(out) = out {
                cfg.out = Some(out);
            }
            let out = cfg.out.clone().ok_or_else(|| CliError::Config("no output directory; pass --out".into()))?;
            let res = tpnica_cli::sweep::sweep(&cfg, &out, force, threads)?;
            for r in &res.summary {
                println!(
                    "{}\tL{}\t{}\tn={}\t{:.4} ± {:.4}",
                    r.model, r.layers, r.kernel_regime, r.count, r.mean, r.stderr
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
