//! Batch experiment runner: loads a JSON config (or a previously written
//! manifest), dispatches the named experiment, and writes results.csv,
//! report.json, and manifest.json for bit-exact reruns.
//!
//! Exit status: 0 on pass, 2 on property failure, 1 on error.

mod config;
mod experiments;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "twonoise", about = "Monte Carlo laboratory for two-noise stochastic evolution equations", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config (or a manifest.json
    /// from a previous run).
    Run {
        config: PathBuf,
        /// Worker threads (default: machine parallelism). Results are
        /// independent of this setting.
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory (overrides the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace seeds.master.
        #[arg(long)]
        seed_override: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            workers,
            out,
            seed_override,
        } => match run(config, workers, out, seed_override) {
            Ok(true) => ExitCode::SUCCESS,
            Ok(false) => {
                eprintln!("property check failed (see report.json)");
                ExitCode::from(2)
            }
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}

fn run(
    config_path: PathBuf,
    workers: Option<usize>,
    out: Option<PathBuf>,
    seed_override: Option<u64>,
) -> Result<bool> {
    if let Some(n) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("worker pool")?;
    }
    let raw = std::fs::read_to_string(&config_path)
        .with_context(|| format!("reading {}", config_path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&raw).context("parsing config JSON")?;
    // a manifest from a previous run carries the config under "config"
    let value = value.get("config").cloned().unwrap_or(value);
    let mut cfg: ExperimentConfig = serde_json::from_value(value).context("config schema")?;
    if let Some(seed) = seed_override {
        cfg.seeds.master = seed;
    }
    if let Some(dir) = out {
        cfg.output_dir = Some(dir);
    }
    cfg.validate()?;

    let out_dir = cfg
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("out-{}", cfg.experiment.name())));
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    let started = Instant::now();
    let outcome = experiments::run_experiment(&cfg)?;
    let wall = started.elapsed().as_secs_f64();

    std::fs::write(out_dir.join("results.csv"), &outcome.results_csv)?;
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&outcome.report)?,
    )?;
    for (name, contents) in &outcome.extra_files {
        std::fs::write(out_dir.join(name), contents)?;
    }
    let manifest = serde_json::json!({
        "config": cfg,
        "git": git_describe(),
        "wall_time_secs": wall,
        "package_version": env!("CARGO_PKG_VERSION"),
    });
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    println!(
        "{}: {} in {:.1}s -> {}",
        cfg.experiment.name(),
        if outcome.pass { "PASS" } else { "FAIL" },
        wall,
        out_dir.display()
    );
    Ok(outcome.pass)
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}
