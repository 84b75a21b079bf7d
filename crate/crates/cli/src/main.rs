//! `vcpo` command-line tool.
//!
//! Exit status is 2 for configuration errors (including bad arguments), 1 for
//! I/O or data failures, and 0 otherwise. Collapsed or skipped-update runs
//! still exit 0.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vcpo_core::config::ExperimentConfig;
use vcpo_core::experiment::{self, Grid};
use vcpo_core::pipeline::{self, PipelineConfig};
use vcpo_core::tasks::Task;
use vcpo_core::{Error, Result};

#[derive(Parser)]
#[command(name = "vcpo", version, about = "Asynchronous policy-gradient lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every seed of a config (or of each config in a preset).
    Run(RunArgs),
    /// Run the cartesian product of a grid file over a base config.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
    },
    /// Estimate the on-policy ESS ratio with synchronous steps.
    EstimateRhoOn {
        config: PathBuf,
        /// Number of synchronous steps (defaults to optimizer.rho_on_steps).
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Recompute and print the summary of a run directory.
    Report { run_dir: PathBuf },
    /// Built-in experiment presets.
    Presets {
        #[command(subcommand)]
        cmd: PresetCmd,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct RunArgs {
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum PresetCmd {
    List,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Run(args) => {
            let configs = match (args.config, args.preset) {
                (Some(path), _) => vec![ExperimentConfig::load(&path)?],
                (None, Some(name)) => {
                    experiment::preset(&name)
                        .ok_or_else(|| Error::config("preset", format!("unknown preset `{name}`")))?
                        .configs
                }
                (None, None) => unreachable!("clap enforces one of config/--preset"),
            };
            for cfg in &configs {
                cfg.validate()?;
            }
            for cfg in &configs {
                let (dir, _) = experiment::run(cfg)?;
                print_report(&dir)?;
            }
            Ok(())
        }
        Cmd::Sweep { config, grid } => {
            let base = ExperimentConfig::load(&config)?;
            let text = std::fs::read_to_string(&grid).map_err(|e| Error::io(&grid, e))?;
            let grid = Grid::from_toml_str(&text)?;
            let (root, runs) = experiment::sweep(&base, &grid)?;
            println!(
                "{} runs; summary in {}",
                runs.len(),
                root.join(experiment::SWEEP_SUMMARY).display()
            );
            Ok(())
        }
        Cmd::EstimateRhoOn { config, steps } => {
            let cfg = ExperimentConfig::load(&config)?;
            cfg.validate()?;
            let task = Task::new(cfg.task.clone())?;
            let spec = cfg.learner_spec()?;
            let n = steps.unwrap_or(cfg.optimizer.rho_on_steps as u64);
            if n == 0 {
                return Err(Error::config("steps", "must be at least 1"));
            }
            let mut sum = 0.0;
            for &seed in &cfg.seeds {
                let init = experiment::initial_params(&cfg, &task, seed)?;
                let p = PipelineConfig {
                    seed,
                    ..cfg.pipeline.clone()
                };
                let rho = pipeline::estimate_rho_on(&task, &p, &spec, init, n)?;
                println!("seed {seed}: rho_on = {rho:.6}");
                sum += rho;
            }
            println!(
                "mean over {} seeds ({n} steps each): {:.6}",
                cfg.seeds.len(),
                sum / cfg.seeds.len() as f64
            );
            Ok(())
        }
        Cmd::Report { run_dir } => print_report(&run_dir),
        Cmd::Presets { cmd: PresetCmd::List } => {
            for p in experiment::presets() {
                println!("{:<12} {}", p.name, p.description);
            }
            Ok(())
        }
    }
}

fn print_report(dir: &Path) -> Result<()> {
    println!("{}", dir.display());
    print!("{}", experiment::report(dir)?);
    Ok(())
}
