//! Pipeline command line: generate data, train, evaluate, sweep, report.
//!
//! Log verbosity follows the `RUST_LOG` environment variable
//! (`error|warn|info|debug|trace`); the default is `info`.

use clap::{Args, Parser, Subcommand};
use mdyn::pipeline::{
    load_config, run_eval, run_generate, run_report, run_seeds, run_sweep, run_train,
    PipelineError,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "mdyn",
    version,
    about = "Learn robot dynamics, discover their implicit constraints, and \
             project predictions onto the learned constraint manifold"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the configuration's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for datasets, checkpoints, and reports.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated subset of gp_full, gp_sparse, gp_sparse_proj,
    /// gp_sparse_proj_true (default: the [eval] section).
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    /// Run this many consecutive seeds under out/seed_<k>/ and aggregate.
    #[arg(long)]
    seeds: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the dataset bundle.
    Generate(CommonArgs),
    /// Run all training stages (resumes from checkpoints when possible).
    Train(CommonArgs),
    /// Train if needed, then score models on the held-out test set.
    Eval(EvalArgs),
    /// One-factor-at-a-time parameter sweep.
    Sweep(CommonArgs),
    /// Aggregate previously written evaluation reports.
    Report {
        /// Directory holding report.json or seed_<k>/report.json.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let configured = |common: &CommonArgs| -> Result<_, PipelineError> {
        let mut cfg = load_config(&common.config)?;
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    };
    match &cli.cmd {
        Cmd::Generate(common) => {
            run_generate(&configured(common)?, &common.out)?;
        }
        Cmd::Train(common) => {
            run_train(&configured(common)?, &common.out)?;
        }
        Cmd::Eval(args) => {
            let cfg = configured(&args.common)?;
            let models = args.models.as_deref();
            match args.seeds {
                Some(count) => {
                    run_seeds(&cfg, &args.common.out, count, models)?;
                }
                None => {
                    run_eval(&cfg, &args.common.out, models)?;
                }
            }
        }
        Cmd::Sweep(common) => {
            run_sweep(&configured(common)?, &common.out)?;
        }
        Cmd::Report { out } => {
            run_report(out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
