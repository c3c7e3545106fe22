//! Deterministic CSV emission.
//!
//! Every file starts with a comment block recording the resolved config and
//! the code version, so a data file regenerates its figure without the
//! config that produced it. Identical configs must produce identical bytes:
//! floats are always formatted as `{:.12e}`, rows keep input order, and
//! nothing wall-clock-dependent is written.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use crate::config::RunConfig;

/// One CSV cell; `Text` must not contain commas or line breaks.
#[derive(Debug, Clone)]
pub enum Cell {
    Float(f64),
    Int(u64),
    Text(String),
}

pub fn fmt_float(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else {
        format!("{x:.12e}")
    }
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Float(x) => fmt_float(*x),
            Cell::Int(n) => n.to_string(),
            Cell::Text(s) => s.replace([',', '\n', '\r'], ";"),
        }
    }
}

/// Resolved-config echo for file headers: (key path, value) in fixed order.
pub fn header_pairs(cfg: &RunConfig) -> Vec<(String, String)> {
    let raw = &cfg.raw;
    let f = fmt_float;
    let mut out: Vec<(String, String)> = vec![
        ("version".into(), env!("CARGO_PKG_VERSION").into()),
        ("device.omega_gate_hz".into(), f(raw.device.omega_gate_hz)),
        ("device.omega_saved_hz".into(), f(raw.device.omega_saved_hz)),
        ("device.detuning_hz".into(), f(raw.device.detuning_hz)),
        ("device.kappa_hz".into(), f(raw.device.kappa_hz)),
        ("device.q_factor".into(), f(raw.device.q_factor)),
        (
            "device.gamma_m_per_s".into(),
            raw.device.gamma_m_per_s.map_or_else(|| "derived".into(), f),
        ),
        ("device.temperature_k".into(), f(raw.device.temperature_k)),
        (
            "device.cavity_pull_hz_per_m".into(),
            f(raw.device.cavity_pull_hz_per_m),
        ),
        ("device.x_zpm_m".into(), f(raw.device.x_zpm_m)),
        (
            "device.drive_amplitude_hz".into(),
            f(raw.device.drive_amplitude_hz),
        ),
        (
            "device.exciton.resonance_hz".into(),
            f(raw.device.exciton.resonance_hz),
        ),
        (
            "device.exciton.linewidth_per_s".into(),
            f(raw.device.exciton.linewidth_per_s),
        ),
        (
            "device.exciton.oscillator_strength".into(),
            f(raw.device.exciton.oscillator_strength),
        ),
        (
            "device.electrode.distance_m".into(),
            f(raw.device.electrode.distance_m),
        ),
        (
            "device.electrode.resistance_ohm".into(),
            f(raw.device.electrode.resistance_ohm),
        ),
        (
            "device.electrode.field_v_per_m".into(),
            f(raw.device.electrode.field_v_per_m),
        ),
        (
            "device.electrode.noise_density_ref".into(),
            f(raw.device.electrode.noise_density_ref),
        ),
        ("device.electrode.t_ref_k".into(), f(raw.device.electrode.t_ref_k)),
        (
            "device.electrode.omega_ref_hz".into(),
            f(raw.device.electrode.omega_ref_hz),
        ),
        ("beam.basis_dim".into(), raw.beam.basis_dim.to_string()),
        // Resolved beam, not the raw request: calibrated mode materializes
        // (ω_m0, λ) here.
        (
            "beam.resolved_omega_m0_hz".into(),
            f(cfg.beam.omega_m0 / mechqubit::consts::TWO_PI),
        ),
        (
            "beam.resolved_lambda_hz".into(),
            f(cfg.beam.lambda / mechqubit::consts::TWO_PI),
        ),
        (
            "roles.gate".into(),
            format!("{} {}", cfg.roles.gate_qubits()[0], cfg.roles.gate_qubits()[1]),
        ),
        (
            "roles.saved".into(),
            if cfg.roles.saved_qubits().is_empty() {
                "none".into()
            } else {
                cfg.roles
                    .saved_qubits()
                    .iter()
                    .map(|q| q.to_string())
                    .collect::<Vec<_>>()
                    .join(" ")
            },
        ),
        (
            "roles.resolved_coupling_gate_hz".into(),
            f(cfg.roles.coupling_for(cfg.roles.gate_qubits()[0]).unwrap()
                / mechqubit::consts::TWO_PI),
        ),
        ("gate.kind".into(), raw.gate.kind.clone()),
        (
            "gate.angle_rad".into(),
            raw.gate.angle_rad.map_or_else(|| "none".into(), f),
        ),
        (
            "gate.qubit".into(),
            raw.gate.qubit.map_or_else(|| "none".into(), |q| q.to_string()),
        ),
        (
            "gate.duration_s".into(),
            raw.gate.duration_s.map_or_else(|| "derived".into(), f),
        ),
        (
            "sim.cavity_truncation".into(),
            cfg.sim.cavity_truncation.to_string(),
        ),
        ("sim.qubit_levels".into(), raw.sim.qubit_levels.to_string()),
        ("sim.tol".into(), f(cfg.sim.tol)),
        (
            "sim.include_quadratic_photon_term".into(),
            cfg.sim.include_quadratic_photon_term.to_string(),
        ),
    ];
    if let Some(sweep) = &cfg.sweep {
        out.push(("sweep.parameter".into(), sweep.parameter.path().into()));
        out.push((
            "sweep.values".into(),
            sweep.values.iter().map(|&v| fmt_float(v)).collect::<Vec<_>>().join(" "),
        ));
    }
    out
}

/// Renders a complete CSV file: `# key: value` header block, column line,
/// then rows.
pub fn render_csv(
    header: &[(String, String)],
    columns: &[String],
    rows: &[Vec<Cell>],
) -> String {
    let mut s = String::new();
    for (k, v) in header {
        let _ = writeln!(s, "# {k}: {v}");
    }
    let _ = writeln!(s, "{}", columns.join(","));
    for row in rows {
        debug_assert_eq!(row.len(), columns.len());
        let rendered: Vec<String> = row.iter().map(Cell::render).collect();
        let _ = writeln!(s, "{}", rendered.join(","));
    }
    s
}

pub fn write_csv(
    dir: &Path,
    name: &str,
    header: &[(String, String)],
    columns: &[String],
    rows: &[Vec<Cell>],
) -> io::Result<std::path::PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, render_csv(header, columns, rows))?;
    Ok(path)
}
