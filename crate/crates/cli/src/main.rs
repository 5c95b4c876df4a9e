use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use griddpp::Result;
use griddpp_cli::config::ExperimentConfig;
use griddpp_cli::pipeline::{self, Layout, RunOptions};
use griddpp_cli::report;

#[derive(Parser)]
#[command(name = "griddpp", version, about = "Grid-code embeddings with DPP attention: experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Experiment directory holding every artifact.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test datasets.
    GenTasks(Common),
    /// Build the codebook and the training-region kernel.
    BuildKernel(Common),
    /// Fit the frequency attention on the stored kernel.
    FitDpp(Common),
    /// Train every condition over every seed.
    Train {
        #[command(flatten)]
        common: Common,
        /// Runs trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Only print errors.
        #[arg(long)]
        quiet: bool,
    },
    /// Run every step above, reusing artifacts whose inputs match.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a stored checkpoint on the current datasets.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Aggregate one or more experiment directories into a table and figure.
    Report {
        /// Experiment directories (or any directory containing record.json files).
        #[arg(long = "runs", required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, Layout)> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.root_seed = seed;
    }
    Ok((cfg, Layout::new(&common.out)))
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    Ok(match cli.command {
        Command::GenTasks(c) => {
            let (cfg, layout) = load(&c)?;
            let m = pipeline::cmd_gen(&cfg, &layout)?;
            json!({ "data_hash": m.data_hash, "counts": m.counts, "acceptance_rates": m.acceptance_rates })
        }
        Command::BuildKernel(c) => {
            let (cfg, layout) = load(&c)?;
            let k = pipeline::cmd_kernel(&cfg, &layout)?;
            json!({ "kernel_hash": cfg.kernel_hash(), "order": k.order(), "blocks": k.num_blocks() })
        }
        Command::FitDpp(c) => {
            let (cfg, layout) = load(&c)?;
            let a = pipeline::cmd_fit_dpp(&cfg, &layout)?;
            json!({ "f_max": a.attention.f_max, "per_frequency_objective": a.attention.per_frequency_objective, "steps": a.steps })
        }
        Command::Train { common, jobs, quiet } => {
            let (cfg, layout) = load(&common)?;
            let r = pipeline::cmd_train(&cfg, &layout, RunOptions { jobs, verbose: !quiet })?;
            json!({ "results": layout.results(), "regions": layout.regions(), "conditions": r.conditions.len() })
        }
        Command::Run { common, jobs, quiet } => {
            let (cfg, layout) = load(&common)?;
            let r = pipeline::run_all_cached(&cfg, &layout, RunOptions { jobs, verbose: !quiet })?;
            json!({ "results": layout.results(), "regions": layout.regions(), "conditions": r.conditions.len() })
        }
        Command::Eval { common, checkpoint } => {
            let (cfg, layout) = load(&common)?;
            let regions = pipeline::cmd_eval(&cfg, &layout, &checkpoint)?;
            json!({ "regions": regions })
        }
        Command::Report { runs, out } => {
            let rows = report::cmd_report(&runs, &out)?;
            json!({ "rows": rows.len(), "table": out.join("regions.csv"), "figure": out.join("report.svg") })
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
