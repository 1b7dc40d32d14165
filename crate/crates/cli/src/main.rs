//! `ultradeco` command-line driver.
//!
//! Exit codes: 0 success (warnings go to the manifest), 1 configuration
//! error, 2 numerical failure.

mod config;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ultradeco::KMode;

use crate::config::{RunConfig, DEFAULTS};
use crate::error::CliError;
use crate::run::{Experiment, Flags};

#[derive(Debug, Parser)]
#[command(name = "ultradeco", version, about = "Measurement devices in the ultradecoherence limit")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides run.seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Overrides run.output_dir.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides solver.k_mode.
    #[arg(long, global = true, value_name = "exact|resonant")]
    k_mode: Option<KMode>,
    /// Print a documented default configuration and exit.
    #[arg(long, global = true)]
    print_defaults: bool,
    /// Also write gnuplot-readable .dat files next to the CSVs.
    #[arg(long, global = true)]
    emit_plot_data: bool,
    /// trajectories: follow every click up to run.max_clicks instead of
    /// stopping at the first one.
    #[arg(long, global = true)]
    multi_click: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Check the configuration and the model built from it.
    Validate,
    /// Survival curve of the initial level.
    Survival,
    /// First-step distribution out of the initial level.
    Firststep,
    /// Monte Carlo first-click trajectories.
    Trajectories,
    /// Full joint evolution against the reduced rate model.
    Compare,
    /// Reduction error as the dephasing rate grows.
    GammaSweep,
    /// Arrival-time survival and density.
    Arrival,
}

impl From<Command> for Experiment {
    fn from(c: Command) -> Self {
        match c {
            Command::Validate => Experiment::Validate,
            Command::Survival => Experiment::Survival,
            Command::Firststep => Experiment::FirstStep,
            Command::Trajectories => Experiment::Trajectories,
            Command::Compare => Experiment::Compare,
            Command::GammaSweep => Experiment::GammaSweep,
            Command::Arrival => Experiment::Arrival,
        }
    }
}

fn load(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config: a configuration file is required".into()))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("--config: cannot read {}: {e}", path.display())))?;
    let mut cfg = RunConfig::from_toml(&text)?;
    if let Some(seed) = cli.seed {
        cfg.run.seed = Some(seed);
    }
    if let Some(out) = &cli.out {
        cfg.run.output_dir = out.clone();
    }
    if let Some(mode) = cli.k_mode {
        cfg.solver.k_mode = mode;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage problems are configuration errors
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if cli.print_defaults {
        print!("{DEFAULTS}");
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("config error: no subcommand given (see --help)");
        return ExitCode::from(1);
    };
    let result = load(&cli).and_then(|cfg| {
        run::run(
            command.into(),
            &cfg,
            Flags {
                emit_plot_data: cli.emit_plot_data,
                multi_click: cli.multi_click,
            },
        )
    });
    match result {
        Ok((manifest, lines)) => {
            for line in lines {
                println!("{line}");
            }
            if let Some(m) = manifest {
                println!("wrote {} files to {}", m.outputs.len() + 1, m.config.run.output_dir.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
