use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use guidelab_cli::commands::{run_command, Command};
use guidelab_cli::config::parse_config;

#[derive(Parser)]
#[command(name = "guidelab", version, about = "Guided sampling experiments on Gaussian-mixture worlds")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set guidance.k=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Run directory (overrides output.dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides sampler.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Chain count (overrides sampler.chains).
    #[arg(long, global = true)]
    chains: Option<usize>,
    /// Worker threads (overrides sampler.threads; 0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the guided sampler once.
    Sample,
    /// Cross product of sweep.k and sweep.m.
    SweepKm,
    /// Signed guidance-window ablation over ablate.p.
    Ablate,
    /// Prompt switching over the switch grid.
    Switch,
    /// Write guided-step training records.
    Dump,
    /// Train the step model on a dumped dataset.
    TrainFphi,
    /// Compare the step model with true guidance.
    EvalFphi,
    /// Render SVG plots from samples or metrics CSV files.
    Plot {
        inputs: Vec<PathBuf>,
        #[arg(long)]
        x: Option<String>,
        #[arg(long)]
        y: Option<String>,
        /// Column that splits rows into separate lines.
        #[arg(long)]
        series: Option<String>,
    },
}

fn run(cli: Cli) -> Result<bool> {
    let c = cli.common;
    let mut overrides = c.set;
    if let Some(out) = &c.out {
        overrides.push(format!("output.dir={}", toml_string(&out.to_string_lossy())));
    }
    if let Some(seed) = c.seed {
        overrides.push(format!("sampler.seed={seed}"));
    }
    if let Some(n) = c.chains {
        overrides.push(format!("sampler.chains={n}"));
    }
    if let Some(n) = c.threads {
        overrides.push(format!("sampler.threads={n}"));
    }
    let loaded = parse_config(c.config.as_deref(), &overrides)?;
    let command = match cli.command {
        Cmd::Sample => Command::Sample,
        Cmd::SweepKm => Command::SweepKm,
        Cmd::Ablate => Command::Ablate,
        Cmd::Switch => Command::Switch,
        Cmd::Dump => Command::Dump,
        Cmd::TrainFphi => Command::TrainFphi,
        Cmd::EvalFphi => Command::EvalFphi,
        Cmd::Plot { inputs, x, y, series } => Command::Plot { inputs, x, y, series },
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(loaded.config.sampler.threads)
        .build()
        .context("building the worker pool")?;
    let manifest = pool.install(|| run_command(&command, &loaded))?;
    for f in &manifest.failures {
        log::error!("{}: chain {} at t={}: {}", f.cell, f.chain_id, f.t, f.message);
    }
    println!("{}", loaded.config.output.dir.join(guidelab_cli::output::MANIFEST_FILE).display());
    Ok(manifest.failures.is_empty())
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
