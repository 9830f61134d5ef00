//! `kinsphere` batch front end.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on configuration
//! errors, 3 when `--check` is given and a tolerance check fails.

mod config;
mod output;
mod studies;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use config::{Config, ConfigError};
use output::{write_manifest, Artifacts};
use studies::RunError;

const ENV_THREADS: &str = "KINSPHERE_THREADS";
const ENV_OUT: &str = "KINSPHERE_OUT";

#[derive(Parser)]
#[command(name = "kinsphere", version, about = "Diffusion on the energy-momentum sphere and its kinetic limit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Monte Carlo ensembles on the manifold
    Simulate(Common),
    /// Spectrum tables and truncated series marginals
    Spectral(Common),
    /// Kinetic Fokker-Planck propagation, moments and entropy
    Kinetic(Common),
    /// Legendre to Hermite convergence study
    Asymptotics(Common),
    /// Diagnostics over a saved simulate run
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config; omitted sections take their defaults
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set markov.n_traj=500`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Exit with status 3 if any tolerance check fails
    #[arg(long)]
    check: bool,
}

fn configure_threads() -> Result<(), ConfigError> {
    let Ok(raw) = std::env::var(ENV_THREADS) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ConfigError(format!("{ENV_THREADS} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| ConfigError(e.to_string()))
}

fn run(name: &str, common: &Common) -> Result<bool, RunError> {
    let start = Instant::now();
    configure_threads()?;
    let cfg: Config = config::load(common.config.as_deref(), &common.set)?;
    let dir = std::env::var_os(ENV_OUT)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(&cfg.run.out_dir));
    let mut out = Artifacts::new(&dir)?;
    match name {
        "simulate" => studies::simulate(&cfg, &mut out)?,
        "spectral" => studies::spectral(&cfg, &mut out)?,
        "kinetic" => studies::kinetic(&cfg, &mut out)?,
        "asymptotics" => studies::asymptotics(&cfg, &mut out)?,
        "report" => studies::report(&cfg, &mut out)?,
        _ => unreachable!(),
    }
    write_manifest(&mut out, name, &cfg, start.elapsed().as_secs_f64())?;
    for c in &out.checks {
        println!("{}", c.to_json());
    }
    Ok(out.all_pass())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common) = match &cli.cmd {
        Cmd::Simulate(c) => ("simulate", c),
        Cmd::Spectral(c) => ("spectral", c),
        Cmd::Kinetic(c) => ("kinetic", c),
        Cmd::Asymptotics(c) => ("asymptotics", c),
        Cmd::Report(c) => ("report", c),
    };
    match run(name, common) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) if common.check => {
            eprintln!("kinsphere: tolerance check failed");
            ExitCode::from(3)
        }
        Ok(false) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kinsphere: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
