//! Experiment orchestration: single runs, parameter sweeps, and the
//! spectrum/noise report tables.
//!
//! A run is deterministic for a fixed config: states evolve independently,
//! workers never share mutable state, and results are gathered in input
//! order, so parallel and serial execution produce identical output.

use std::fmt;
use std::time::Instant;

use rayon::prelude::*;

use mechqubit::consts::TWO_PI;
use mechqubit::device::noise_report;
use mechqubit::dynamics::{evolve, EvolveOptions, IntegratorStats};
use mechqubit::fidelity::{benchmark_states, gate_error, uhlmann_fidelity, GateErrorReport};
use mechqubit::gates::{
    apply_frame_correction, build_schedule, coupling_for_duration, frame_correction_diag,
    ideal_gate_unitary, realize_schedule, thermal_dissipators, GateSystem, QubitRoleAssignment,
};
use mechqubit::hilbert::DensityMatrix;
use mechqubit::spectrum::spectrum_of;

use crate::config::{RunConfig, SweepParameter};
use crate::output::Cell;

#[derive(Debug)]
pub struct RunnerError {
    pub stage: &'static str,
    pub message: String,
}

impl fmt::Display for RunnerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage, self.message)
    }
}

impl std::error::Error for RunnerError {}

pub type Result<T> = std::result::Result<T, RunnerError>;

fn at_stage<E: fmt::Display>(stage: &'static str) -> impl Fn(E) -> RunnerError {
    move |e| RunnerError {
        stage,
        message: e.to_string(),
    }
}

/// Everything a single run produces. `wall_s` is reported on stdout only;
/// emitted CSV must not depend on the clock.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub gate_time_s: f64,
    pub report: GateErrorReport,
    /// Mean fidelity of the reduced saved-qubit state against its initial
    /// value; None when no qubits are parked.
    pub saved_return: Option<f64>,
    pub stats: IntegratorStats,
    pub wall_s: f64,
}

/// Evolves every benchmark state under the realized schedule and scores the
/// register against the ideal gate.
pub fn run_single(cfg: &RunConfig) -> Result<RunOutcome> {
    let t0 = Instant::now();
    let system = GateSystem::assemble(
        cfg.roles.clone(),
        cfg.device,
        &cfg.beam,
        cfg.sim.cavity_truncation,
        cfg.sim.include_quadratic_photon_term,
    )
    .map_err(at_stage("assembling system"))?;
    let schedule = build_schedule(&system, &cfg.gate).map_err(at_stage("building schedule"))?;
    let ham = realize_schedule(&system, &schedule).map_err(at_stage("realizing pulses"))?;
    let dissipators = thermal_dissipators(&system).map_err(at_stage("building dissipators"))?;
    let correction =
        frame_correction_diag(&system, &schedule).map_err(at_stage("frame correction"))?;
    let n = system.n_qubits();
    let set = benchmark_states(n).map_err(at_stage("benchmark states"))?;
    let initials = set
        .initial_states_with_cavity(cfg.sim.cavity_truncation)
        .map_err(at_stage("benchmark states"))?;
    let opts = EvolveOptions::with_tol(cfg.sim.tol);
    let keep: Vec<usize> = (0..n).collect();

    let evolved: Vec<(DensityMatrix, IntegratorStats)> = initials
        .par_iter()
        .map(|rho0| {
            let traj = evolve(rho0, &ham, &dissipators, &opts).map_err(at_stage("evolving"))?;
            let register = traj
                .final_state()
                .partial_trace(&keep)
                .map_err(at_stage("tracing out cavity"))?;
            let register =
                apply_frame_correction(&register, &correction).map_err(at_stage("frame correction"))?;
            Ok((register, traj.stats))
        })
        .collect::<Result<Vec<_>>>()?;

    let target =
        ideal_gate_unitary(&cfg.gate, system.roles()).map_err(at_stage("ideal gate"))?;
    let finals: Vec<DensityMatrix> = evolved.iter().map(|(r, _)| r.clone()).collect();
    let report = gate_error(&target, &finals, &set).map_err(at_stage("scoring fidelity"))?;

    let saved_return = if system.roles().saved_qubits().is_empty() {
        None
    } else {
        let saved = system.roles().saved_qubits().to_vec();
        let mut acc = 0.0;
        for (k, (final_reg, _)) in evolved.iter().enumerate() {
            let initial = DensityMatrix::pure(set.ket(k), set.register_layout().clone())
                .and_then(|r| r.partial_trace(&saved))
                .map_err(at_stage("saved-qubit return"))?;
            let final_saved = final_reg
                .partial_trace(&saved)
                .map_err(at_stage("saved-qubit return"))?;
            acc += uhlmann_fidelity(&initial, &final_saved).map_err(at_stage("saved-qubit return"))?;
        }
        Some(acc / evolved.len() as f64)
    };

    let mut stats = IntegratorStats::default();
    for (_, s) in &evolved {
        stats.steps_accepted += s.steps_accepted;
        stats.steps_rejected += s.steps_rejected;
        stats.rhs_evals += s.rhs_evals;
    }

    Ok(RunOutcome {
        gate_time_s: schedule.total_duration(),
        report,
        saved_return,
        stats,
        wall_s: t0.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct SweepRow {
    pub value: f64,
    pub outcome: std::result::Result<RunOutcome, String>,
}

/// Applies one sweep value to a copy of the config. Gate-time sweeps on
/// entangling gates re-solve the coupling so the derived schedule lands on
/// the requested duration; the parked coupling stays a device property.
fn apply_sweep_value(cfg: &RunConfig, parameter: SweepParameter, value: f64) -> Result<RunConfig> {
    let mut point = cfg.clone();
    match parameter {
        SweepParameter::Detuning => point.device.delta = TWO_PI * value,
        SweepParameter::Kappa => point.device.kappa = TWO_PI * value,
        SweepParameter::GammaM => point.device.gamma_m_override = Some(value),
        SweepParameter::GateTime => {
            if cfg.gate.kind.is_single_qubit() {
                point.gate.duration = Some(value);
            } else {
                let base = GateSystem::assemble(
                    cfg.roles.clone(),
                    cfg.device,
                    &cfg.beam,
                    cfg.sim.cavity_truncation,
                    cfg.sim.include_quadratic_photon_term,
                )
                .map_err(at_stage("assembling system"))?;
                let g = coupling_for_duration(&base, value)
                    .map_err(at_stage("solving coupling for gate time"))?;
                let coupling_saved = match cfg.roles.saved_qubits().first() {
                    Some(&q) => cfg.roles.coupling_for(q).map_err(at_stage("assembling system"))?,
                    None => g,
                };
                point.roles = QubitRoleAssignment::new(
                    cfg.roles.gate_qubits(),
                    cfg.roles.saved_qubits().to_vec(),
                    cfg.roles.omega_gate(),
                    cfg.roles.omega_saved(),
                    g,
                    coupling_saved,
                )
                .map_err(at_stage("assembling system"))?;
            }
        }
    }
    Ok(point)
}

/// One run per sweep value, in input order. A failed point becomes a failed
/// row; the sweep continues.
pub fn run_sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| RunnerError {
            stage: "sweep",
            message: "config has no [sweep] section".into(),
        })?
        .clone();
    let rows = sweep
        .values
        .iter()
        .map(|&value| {
            let outcome = apply_sweep_value(cfg, sweep.parameter, value)
                .and_then(|point| run_single(&point))
                .map_err(|e| e.to_string());
            SweepRow { value, outcome }
        })
        .collect();
    Ok(rows)
}

// ---------------------------------------------------------------------------
// CSV row shaping
// ---------------------------------------------------------------------------

/// Per-state column names: f_<bitstring> over the benchmark labels.
pub fn state_columns(n_qubits: usize) -> Vec<String> {
    (0..1usize << n_qubits)
        .map(|label| format!("f_{label:0width$b}", width = n_qubits))
        .collect()
}

pub fn run_columns(n_qubits: usize, with_saved: bool) -> Vec<String> {
    let mut cols = vec![
        "error".to_string(),
        "fidelity".to_string(),
        "gate_time_s".to_string(),
    ];
    cols.extend(state_columns(n_qubits));
    if with_saved {
        cols.push("saved_return".to_string());
    }
    cols.extend([
        "steps_accepted".to_string(),
        "steps_rejected".to_string(),
    ]);
    cols
}

pub fn run_row(outcome: &RunOutcome, n_qubits: usize, with_saved: bool) -> Vec<Cell> {
    let mut row = vec![
        Cell::Float(outcome.report.error),
        Cell::Float(outcome.report.mean_fidelity),
        Cell::Float(outcome.gate_time_s),
    ];
    for &f in &outcome.report.per_state {
        row.push(Cell::Float(f));
    }
    debug_assert_eq!(outcome.report.per_state.len(), 1usize << n_qubits);
    if with_saved {
        row.push(Cell::Float(outcome.saved_return.unwrap_or(f64::NAN)));
    }
    row.push(Cell::Int(outcome.stats.steps_accepted));
    row.push(Cell::Int(outcome.stats.steps_rejected));
    row
}

pub fn sweep_columns(n_qubits: usize, with_saved: bool) -> Vec<String> {
    let mut cols = vec!["parameter".to_string(), "value".to_string()];
    cols.extend(run_columns(n_qubits, with_saved));
    cols.extend(["status".to_string(), "message".to_string()]);
    cols
}

pub fn sweep_row(
    parameter: SweepParameter,
    row: &SweepRow,
    n_qubits: usize,
    with_saved: bool,
) -> Vec<Cell> {
    let mut cells = vec![
        Cell::Text(parameter.path().to_string()),
        Cell::Float(row.value),
    ];
    match &row.outcome {
        Ok(outcome) => {
            cells.extend(run_row(outcome, n_qubits, with_saved));
            cells.push(Cell::Text("ok".to_string()));
            cells.push(Cell::Text(String::new()));
        }
        Err(message) => {
            let n_numeric = run_columns(n_qubits, with_saved).len();
            for i in 0..n_numeric {
                // steps columns are integers; keep them numeric zeros.
                if i >= n_numeric - 2 {
                    cells.push(Cell::Int(0));
                } else {
                    cells.push(Cell::Float(f64::NAN));
                }
            }
            cells.push(Cell::Text("failed".to_string()));
            cells.push(Cell::Text(message.clone()));
        }
    }
    cells
}

// ---------------------------------------------------------------------------
// Spectrum and noise tables
// ---------------------------------------------------------------------------

/// Tuned-beam spectrum table over the softening range: fraction of the
/// buckling threshold |v| = ω_m0/2 from 0 to 0.98.
pub fn spectrum_table(cfg: &RunConfig) -> Result<(Vec<String>, Vec<Vec<Cell>>)> {
    let columns: Vec<String> = [
        "softening_fraction",
        "tuning_hz",
        "delta10_hz",
        "delta21_hz",
        "nonlinearity_hz",
        "x01",
        "x12",
        "x02",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let threshold = cfg.beam.omega_m0 / 2.0;
    let mut rows = Vec::new();
    for k in 0..=49 {
        let fraction = 0.02 * k as f64;
        let v = -fraction * threshold;
        let spec = spectrum_of(&cfg.beam, v, 3).map_err(at_stage("spectrum"))?;
        let d10 = spec.delta10();
        let d21 = spec.delta(2, 1);
        rows.push(vec![
            Cell::Float(fraction),
            Cell::Float(v / TWO_PI),
            Cell::Float(d10 / TWO_PI),
            Cell::Float(d21 / TWO_PI),
            Cell::Float((d21 - d10) / TWO_PI),
            Cell::Float(spec.x_element(0, 1)),
            Cell::Float(spec.x_element(1, 2)),
            Cell::Float(spec.x_element(0, 2)),
        ]);
    }
    Ok((columns, rows))
}

/// Damping and electric-noise rates at the gate and parked frequencies.
pub fn noise_table(cfg: &RunConfig) -> (Vec<String>, Vec<Vec<Cell>>) {
    let columns: Vec<String> = [
        "role",
        "omega_m_hz",
        "gamma_m_per_s",
        "n_bar",
        "thermal_rate_per_s",
        "johnson_rate_per_s",
        "johnson_rate_per_s_per_ohm",
        "one_over_f_rate_per_s",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows = [
        ("gate", cfg.device.omega_gate),
        ("saved", cfg.device.omega_saved),
    ]
    .iter()
    .map(|&(role, omega)| {
        let rep = noise_report(&cfg.device, omega);
        vec![
            Cell::Text(role.to_string()),
            Cell::Float(omega / TWO_PI),
            Cell::Float(rep.gamma_m),
            Cell::Float(rep.n_bar),
            Cell::Float(rep.thermal_heating),
            Cell::Float(rep.johnson_nyquist),
            Cell::Float(rep.johnson_nyquist / cfg.device.electrode.resistance),
            Cell::Float(rep.one_over_f),
        ]
    })
    .collect();
    (columns, rows)
}
