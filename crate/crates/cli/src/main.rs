//! Command-line front end: config validation, single runs, sweeps, and the
//! spectrum/noise report tables.
//!
//! Exit codes: 0 success, 2 config error, 3 simulation failure.

#![deny(unsafe_code)]

mod config;
mod output;
mod runner;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use output::{header_pairs, write_csv};
use runner::{
    noise_table, run_columns, run_row, run_single, run_sweep, spectrum_table, sweep_columns,
    sweep_row,
};

#[derive(Parser)]
#[command(
    name = "mechqubit",
    version,
    about = "Gate simulator for electrostatically tuned nanomechanical qubits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Emit the tuned-beam spectrum table (levels and matrix elements
    /// against softening strength)
    Spectrum(CommonArgs),
    /// Run the configured gate once and report its error
    Run(CommonArgs),
    /// Run the configured sweep, one row per parameter value
    Sweep(CommonArgs),
    /// Report damping and electric-noise rates at both working points
    Noise(CommonArgs),
    /// Parse and cross-check a config without simulating
    Validate(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides output.directory)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores)
    #[arg(long)]
    threads: Option<usize>,
    /// Integrator tolerance (overrides sim.tol)
    #[arg(long)]
    tol: Option<f64>,
}

enum CliError {
    /// Bad or unreadable configuration; exit 2.
    Config(String),
    /// The simulation or emission itself failed; exit 3.
    Run(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Run(m) => m,
        }
    }
}

fn load(args: &CommonArgs) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("reading {}: {e}", args.config.display())))?;
    let mut cfg = RunConfig::parse(&text).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(tol) = args.tol {
        if !(1e-12..=1e-4).contains(&tol) {
            return Err(CliError::Config(format!(
                "--tol must lie in [1e-12, 1e-4], got {tol:e}"
            )));
        }
        cfg.sim.tol = tol;
    }
    if let Some(out) = &args.out {
        cfg.output.directory = out.clone();
    }
    if let Some(threads) = args.threads {
        if threads == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        // Ignore the error from a pool that already exists; thread count is
        // a performance knob, never a correctness one.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    for warning in cfg.roles.warnings() {
        eprintln!("warning: {warning}");
    }
    Ok(cfg)
}

fn cmd_run(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = load(args)?;
    let outcome = run_single(&cfg).map_err(|e| CliError::Run(e.to_string()))?;
    let n = cfg.roles.n_qubits();
    let with_saved = !cfg.roles.saved_qubits().is_empty();
    let path = write_csv(
        &cfg.output.directory,
        "run.csv",
        &header_pairs(&cfg),
        &run_columns(n, with_saved),
        &[run_row(&outcome, n, with_saved)],
    )
    .map_err(|e| CliError::Run(format!("writing run.csv: {e}")))?;
    println!(
        "gate {} on {} qubits: E = {:.6e}  F = {:.9}  T = {:.6e} s",
        cfg.raw.gate.kind, n, outcome.report.error, outcome.report.mean_fidelity, outcome.gate_time_s
    );
    if let Some(saved) = outcome.saved_return {
        println!("saved-qubit return fidelity: {saved:.9}");
    }
    println!(
        "integrator: {} steps ({} rejected); wall {:.1} s",
        outcome.stats.steps_accepted, outcome.stats.steps_rejected, outcome.wall_s
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_sweep(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = load(args)?;
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| CliError::Config("config has no [sweep] section".into()))?;
    let rows = run_sweep(&cfg).map_err(|e| CliError::Run(e.to_string()))?;
    let n = cfg.roles.n_qubits();
    let with_saved = !cfg.roles.saved_qubits().is_empty();
    let cells: Vec<_> = rows
        .iter()
        .map(|row| sweep_row(sweep.parameter, row, n, with_saved))
        .collect();
    let path = write_csv(
        &cfg.output.directory,
        "sweep.csv",
        &header_pairs(&cfg),
        &sweep_columns(n, with_saved),
        &cells,
    )
    .map_err(|e| CliError::Run(format!("writing sweep.csv: {e}")))?;
    for row in &rows {
        match &row.outcome {
            Ok(o) => println!(
                "{} = {:.6e}: E = {:.6e} (wall {:.1} s)",
                sweep.parameter.path(),
                row.value,
                o.report.error,
                o.wall_s
            ),
            Err(m) => println!("{} = {:.6e}: failed: {m}", sweep.parameter.path(), row.value),
        }
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_spectrum(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = load(args)?;
    let (columns, rows) = spectrum_table(&cfg).map_err(|e| CliError::Run(e.to_string()))?;
    let path = write_csv(
        &cfg.output.directory,
        "spectrum.csv",
        &header_pairs(&cfg),
        &columns,
        &rows,
    )
    .map_err(|e| CliError::Run(format!("writing spectrum.csv: {e}")))?;
    println!("wrote {} ({} rows)", path.display(), rows.len());
    Ok(())
}

fn cmd_noise(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = load(args)?;
    let (columns, rows) = noise_table(&cfg);
    let path = write_csv(
        &cfg.output.directory,
        "noise.csv",
        &header_pairs(&cfg),
        &columns,
        &rows,
    )
    .map_err(|e| CliError::Run(format!("writing noise.csv: {e}")))?;
    let rep = mechqubit::device::noise_report(&cfg.device, cfg.device.omega_gate);
    println!(
        "gate point: gamma_m*n_bar = {:.4e} 1/s, Johnson = {:.4e} 1/s, 1/f = {:.4e} 1/s",
        rep.thermal_heating, rep.johnson_nyquist, rep.one_over_f
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_validate(args: &CommonArgs) -> Result<(), CliError> {
    let cfg = load(args)?;
    // A config can pass parsing and still describe an unbuildable system
    // (untunable target, narrow separation, bad pulse guards); validating
    // means assembling and scheduling without evolving.
    let system = mechqubit::gates::GateSystem::assemble(
        cfg.roles.clone(),
        cfg.device,
        &cfg.beam,
        cfg.sim.cavity_truncation,
        cfg.sim.include_quadratic_photon_term,
    )
    .map_err(|e| CliError::Config(format!("assembling system: {e}")))?;
    let schedule = mechqubit::gates::build_schedule(&system, &cfg.gate)
        .map_err(|e| CliError::Config(format!("building schedule: {e}")))?;
    println!(
        "config ok: {} qubits, gate {} over {:.6e} s, Hilbert dim {}",
        cfg.roles.n_qubits(),
        cfg.raw.gate.kind,
        schedule.total_duration(),
        system.layout().total_dim()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Spectrum(args) => cmd_spectrum(args),
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Noise(args) => cmd_noise(args),
        Command::Validate(args) => cmd_validate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
