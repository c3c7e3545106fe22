//! Run configuration: strict TOML schema, resolution to simulator types.
//!
//! Config files use laboratory conventions: every `_hz` field is an ordinary
//! frequency ν and becomes angular ω = 2πν here, in exactly one place;
//! `_per_s` fields are plain rates and pass through unscaled. Unknown keys
//! are rejected so a typo cannot silently fall back to a default.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use mechqubit::consts::TWO_PI;
use mechqubit::device::{DeviceParams, ElectrodeParams, ExcitonParams};
use mechqubit::gates::{GateKind, GateSpec, QubitRoleAssignment, QUBIT_LEVELS};
use mechqubit::spectrum::{calibrate_beam, BeamParams};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub type Result<T> = std::result::Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError(msg.into()))
}

// ---------------------------------------------------------------------------
// Raw schema (exactly what the file contains)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub device: RawDevice,
    pub beam: RawBeam,
    pub roles: RawRoles,
    pub gate: RawGate,
    pub sim: RawSim,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<RawSweep>,
    pub output: RawOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawDevice {
    /// Gate-qubit transition frequency ω_G/2π.
    pub omega_gate_hz: f64,
    /// Saved-qubit parking frequency ω_S/2π.
    pub omega_saved_hz: f64,
    /// Laser detuning Δ/2π from the cavity resonance.
    pub detuning_hz: f64,
    /// Total cavity linewidth κ/2π.
    pub kappa_hz: f64,
    /// Mechanical quality factor; γ_m = ω_m/Q unless overridden.
    pub q_factor: f64,
    /// Explicit mechanical damping rate override (plain 1/s).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_m_per_s: Option<f64>,
    pub temperature_k: f64,
    /// Cavity frequency pull per deflection, G₀/2π (Hz per metre).
    pub cavity_pull_hz_per_m: f64,
    /// Zero-point motion of the gate-tuned beam (metres).
    pub x_zpm_m: f64,
    /// Laser drive amplitude Ω/2π.
    pub drive_amplitude_hz: f64,
    pub exciton: RawExciton,
    pub electrode: RawElectrode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawExciton {
    /// Exciton resonance ω_e/2π.
    pub resonance_hz: f64,
    /// Exciton linewidth Γ_e (plain 1/s; an inverse lifetime, not a /2π value).
    pub linewidth_per_s: f64,
    pub oscillator_strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawElectrode {
    pub distance_m: f64,
    pub resistance_ohm: f64,
    pub field_v_per_m: f64,
    /// 1/f field-noise density at the reference point (V²m⁻²Hz⁻¹).
    pub noise_density_ref: f64,
    pub t_ref_k: f64,
    pub omega_ref_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawBeam {
    /// Fock-basis size for the beam eigenproblem.
    pub basis_dim: usize,
    /// Calibrated mode: solve (ω_m0, λ) so the bare beam sits at the gate
    /// frequency with this nonlinearity (δ₂₁−δ₁₀)/2π.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonlinearity_hz: Option<f64>,
    /// Explicit mode: bare frequency and quartic strength given directly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega_m0_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_hz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRoles {
    /// The interacting pair; both are tuned to ω_G.
    pub gate: [usize; 2],
    /// Spectator qubits parked at ω_S.
    #[serde(default)]
    pub saved: Vec<usize>,
    /// Override for the gate-point optomechanical coupling g_G/2π; when
    /// absent it is derived from the device (g = G₀|α|x_zpm).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling_gate_hz: Option<f64>,
    /// Override for the saved-point coupling; defaults to g_G·√(ω_G/ω_S),
    /// the zero-point-motion scaling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling_saved_hz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawGate {
    /// One of rx, ry, rz, sqrt_iswap_plus, sqrt_iswap_minus, iswap.
    pub kind: String,
    /// Rotation angle for single-qubit kinds; must be absent for entangling
    /// kinds, whose action is fixed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle_rad: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qubit: Option<usize>,
    /// Duration override for single-qubit kinds; entangling kinds derive
    /// theirs from the working point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSim {
    /// Cavity Fock levels kept in the evolution (≥ 2).
    pub cavity_truncation: usize,
    /// Levels kept per qubit site; only 3 is supported.
    pub qubit_levels: usize,
    /// Integrator tolerance (relative and absolute).
    pub tol: f64,
    /// Keep the n̂X photon-number correction in the realized coupling.
    pub include_quadratic_photon_term: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSweep {
    /// Config path of the swept quantity: gate.time_s, device.detuning_hz,
    /// device.kappa_hz, or device.gamma_m_per_s.
    pub parameter: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawOutput {
    pub directory: String,
    /// Emission formats; only "csv" is supported.
    pub formats: Vec<String>,
}

// ---------------------------------------------------------------------------
// Resolved configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParameter {
    /// Gate time; entangling kinds re-solve the coupling so the schedule
    /// lands on the requested duration, single-qubit kinds take it directly.
    GateTime,
    Detuning,
    Kappa,
    GammaM,
}

impl SweepParameter {
    pub fn path(self) -> &'static str {
        match self {
            SweepParameter::GateTime => "gate.time_s",
            SweepParameter::Detuning => "device.detuning_hz",
            SweepParameter::Kappa => "device.kappa_hz",
            SweepParameter::GammaM => "device.gamma_m_per_s",
        }
    }
}

impl FromStr for SweepParameter {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gate.time_s" => Ok(SweepParameter::GateTime),
            "device.detuning_hz" => Ok(SweepParameter::Detuning),
            "device.kappa_hz" => Ok(SweepParameter::Kappa),
            "device.gamma_m_per_s" => Ok(SweepParameter::GammaM),
            other => err(format!(
                "sweep.parameter: unknown path {other:?}; expected one of \
                 gate.time_s, device.detuning_hz, device.kappa_hz, device.gamma_m_per_s"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimSettings {
    pub cavity_truncation: usize,
    pub tol: f64,
    pub include_quadratic_photon_term: bool,
}

#[derive(Debug, Clone)]
pub struct SweepSettings {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OutputSettings {
    pub directory: PathBuf,
}

/// Fully validated run description: the raw file plus every simulator-level
/// object derived from it.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub raw: RawConfig,
    pub device: DeviceParams,
    pub beam: BeamParams,
    pub roles: QubitRoleAssignment,
    pub gate: GateSpec,
    pub sim: SimSettings,
    pub sweep: Option<SweepSettings>,
    pub output: OutputSettings,
}

impl RunConfig {
    /// Parses and fully validates a config file.
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| ConfigError(format!("config parse: {e}")))?;
        Self::resolve(raw)
    }

    /// Normalized serialization of the raw config (defaults materialized,
    /// key order fixed by the schema). Exercised by the round-trip test;
    /// the binary itself never re-emits configs.
    #[allow(dead_code)]
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(&self.raw).expect("raw config serializes")
    }

    fn resolve(raw: RawConfig) -> Result<Self> {
        let device = resolve_device(&raw.device)?;
        let beam = resolve_beam(&raw.beam, &raw.device)?;
        let roles = resolve_roles(&raw.roles, &device)?;
        let gate = resolve_gate(&raw.gate)?;
        let sim = resolve_sim(&raw.sim)?;
        let sweep = match &raw.sweep {
            None => None,
            Some(s) => Some(resolve_sweep(s)?),
        };
        let output = resolve_output(&raw.output)?;
        if let Some(q) = gate.qubit {
            if q >= roles.n_qubits() {
                return err(format!(
                    "gate.qubit: {q} is outside the {}-qubit register",
                    roles.n_qubits()
                ));
            }
        }
        Ok(Self {
            raw,
            device,
            beam,
            roles,
            gate,
            sim,
            sweep,
            output,
        })
    }
}

fn require_positive(name: &str, value: f64) -> Result<()> {
    if !(value > 0.0 && value.is_finite()) {
        return err(format!("{name}: must be positive and finite, got {value}"));
    }
    Ok(())
}

fn require_non_negative(name: &str, value: f64) -> Result<()> {
    if !(value >= 0.0 && value.is_finite()) {
        return err(format!("{name}: must be non-negative and finite, got {value}"));
    }
    Ok(())
}

fn resolve_device(d: &RawDevice) -> Result<DeviceParams> {
    for (name, v) in [
        ("device.omega_gate_hz", d.omega_gate_hz),
        ("device.omega_saved_hz", d.omega_saved_hz),
        ("device.kappa_hz", d.kappa_hz),
        ("device.cavity_pull_hz_per_m", d.cavity_pull_hz_per_m),
        ("device.x_zpm_m", d.x_zpm_m),
        ("device.exciton.resonance_hz", d.exciton.resonance_hz),
        ("device.exciton.linewidth_per_s", d.exciton.linewidth_per_s),
        ("device.exciton.oscillator_strength", d.exciton.oscillator_strength),
        ("device.electrode.distance_m", d.electrode.distance_m),
        ("device.electrode.resistance_ohm", d.electrode.resistance_ohm),
        ("device.electrode.t_ref_k", d.electrode.t_ref_k),
        ("device.electrode.omega_ref_hz", d.electrode.omega_ref_hz),
    ] {
        require_positive(name, v)?;
    }
    for (name, v) in [
        ("device.temperature_k", d.temperature_k),
        ("device.drive_amplitude_hz", d.drive_amplitude_hz),
        ("device.electrode.field_v_per_m", d.electrode.field_v_per_m),
        ("device.electrode.noise_density_ref", d.electrode.noise_density_ref),
    ] {
        require_non_negative(name, v)?;
    }
    if !(d.detuning_hz.is_finite() && d.detuning_hz != 0.0) {
        return err(format!(
            "device.detuning_hz: must be finite and nonzero, got {}",
            d.detuning_hz
        ));
    }
    if !(d.q_factor >= 1.0) {
        return err(format!("device.q_factor: must be at least 1, got {}", d.q_factor));
    }
    if let Some(g) = d.gamma_m_per_s {
        require_non_negative("device.gamma_m_per_s", g)?;
    }
    let params = DeviceParams {
        omega_gate: TWO_PI * d.omega_gate_hz,
        omega_saved: TWO_PI * d.omega_saved_hz,
        delta: TWO_PI * d.detuning_hz,
        kappa: TWO_PI * d.kappa_hz,
        q_factor: d.q_factor,
        gamma_m_override: d.gamma_m_per_s,
        temperature: d.temperature_k,
        g0: TWO_PI * d.cavity_pull_hz_per_m,
        x_zpm: d.x_zpm_m,
        omega_drive: TWO_PI * d.drive_amplitude_hz,
        exciton: ExcitonParams {
            omega_e: TWO_PI * d.exciton.resonance_hz,
            gamma_e: d.exciton.linewidth_per_s,
            f: d.exciton.oscillator_strength,
        },
        electrode: ElectrodeParams {
            distance: d.electrode.distance_m,
            resistance: d.electrode.resistance_ohm,
            field: d.electrode.field_v_per_m,
            s_e_ref: d.electrode.noise_density_ref,
            t_ref: d.electrode.t_ref_k,
            omega_ref: TWO_PI * d.electrode.omega_ref_hz,
        },
    };
    params
        .validate()
        .map_err(|e| ConfigError(format!("device: {e}")))?;
    Ok(params)
}

fn resolve_beam(b: &RawBeam, d: &RawDevice) -> Result<BeamParams> {
    match (b.nonlinearity_hz, b.omega_m0_hz, b.lambda_hz) {
        (Some(nl), None, None) => {
            require_positive("beam.nonlinearity_hz", nl)?;
            calibrate_beam(TWO_PI * d.omega_gate_hz, TWO_PI * nl, b.basis_dim)
                .map_err(|e| ConfigError(format!("beam calibration: {e}")))
        }
        (None, Some(w0), Some(lam)) => {
            require_positive("beam.omega_m0_hz", w0)?;
            require_non_negative("beam.lambda_hz", lam)?;
            let params = BeamParams {
                omega_m0: TWO_PI * w0,
                lambda: TWO_PI * lam,
                basis_dim: b.basis_dim,
            };
            params
                .validate()
                .map_err(|e| ConfigError(format!("beam: {e}")))?;
            Ok(params)
        }
        _ => err(
            "beam: give either nonlinearity_hz (calibrated at the gate frequency) \
             or both omega_m0_hz and lambda_hz, not a mixture",
        ),
    }
}

fn resolve_roles(r: &RawRoles, device: &DeviceParams) -> Result<QubitRoleAssignment> {
    let coupling_gate = match r.coupling_gate_hz {
        Some(g) => {
            require_positive("roles.coupling_gate_hz", g)?;
            TWO_PI * g
        }
        None => device
            .coupling_for(device.x_zpm)
            .map_err(|e| ConfigError(format!("roles: deriving coupling: {e}")))?,
    };
    let coupling_saved = match r.coupling_saved_hz {
        Some(g) => {
            require_non_negative("roles.coupling_saved_hz", g)?;
            TWO_PI * g
        }
        // x_zpm ∝ ω^{-1/2} carries the coupling to the parked frequency.
        None => coupling_gate * (device.omega_gate / device.omega_saved).sqrt(),
    };
    QubitRoleAssignment::new(
        r.gate,
        r.saved.clone(),
        device.omega_gate,
        device.omega_saved,
        coupling_gate,
        coupling_saved,
    )
    .map_err(|e| ConfigError(format!("roles: {e}")))
}

fn resolve_gate(g: &RawGate) -> Result<GateSpec> {
    let kind = GateKind::from_str(&g.kind).map_err(|e| ConfigError(format!("gate.kind: {e}")))?;
    let angle = if kind.is_single_qubit() {
        match g.angle_rad {
            Some(a) => a,
            None => return err(format!("gate.angle_rad: required for kind {}", g.kind)),
        }
    } else {
        if g.angle_rad.is_some() {
            return err(format!(
                "gate.angle_rad: kind {} has a fixed action; remove the angle",
                g.kind
            ));
        }
        0.0
    };
    let spec = GateSpec {
        kind,
        angle,
        qubit: g.qubit,
        duration: g.duration_s,
    };
    spec.validate()
        .map_err(|e| ConfigError(format!("gate: {e}")))?;
    Ok(spec)
}

fn resolve_sim(s: &RawSim) -> Result<SimSettings> {
    if s.qubit_levels != QUBIT_LEVELS {
        return err(format!(
            "sim.qubit_levels: only {QUBIT_LEVELS} is supported, got {}",
            s.qubit_levels
        ));
    }
    if s.cavity_truncation < 2 {
        return err(format!(
            "sim.cavity_truncation: need at least 2 cavity levels, got {}",
            s.cavity_truncation
        ));
    }
    if !(1e-12..=1e-4).contains(&s.tol) {
        return err(format!(
            "sim.tol: must lie in [1e-12, 1e-4], got {:e}",
            s.tol
        ));
    }
    Ok(SimSettings {
        cavity_truncation: s.cavity_truncation,
        tol: s.tol,
        include_quadratic_photon_term: s.include_quadratic_photon_term,
    })
}

fn resolve_sweep(s: &RawSweep) -> Result<SweepSettings> {
    let parameter = SweepParameter::from_str(&s.parameter)?;
    if s.values.is_empty() {
        return err("sweep.values: must not be empty");
    }
    for (i, &v) in s.values.iter().enumerate() {
        require_positive(&format!("sweep.values[{i}]"), v)?;
    }
    Ok(SweepSettings {
        parameter,
        values: s.values.clone(),
    })
}

fn resolve_output(o: &RawOutput) -> Result<OutputSettings> {
    if o.directory.is_empty() {
        return err("output.directory: must not be empty");
    }
    if o.formats.is_empty() {
        return err("output.formats: must not be empty");
    }
    for f in &o.formats {
        if f != "csv" {
            return err(format!("output.formats: only \"csv\" is supported, got {f:?}"));
        }
    }
    Ok(OutputSettings {
        directory: PathBuf::from(&o.directory),
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"
[device]
omega_gate_hz = 26.6e6
omega_saved_hz = 80.0e6
detuning_hz = 0.399e9
kappa_hz = 133.0e3
q_factor = 5.0e6
temperature_k = 0.020
cavity_pull_hz_per_m = 2.494285714285714e14
x_zpm_m = 3.5e-12
drive_amplitude_hz = 3.99e12

[device.exciton]
resonance_hz = 3.385e14
linewidth_per_s = 1.0e9
oscillator_strength = 50.0

[device.electrode]
distance_m = 25.0e-9
resistance_ohm = 100.0
field_v_per_m = 7.6e7
noise_density_ref = 4.0
t_ref_k = 300.0
omega_ref_hz = 3.9e3

[beam]
basis_dim = 60
omega_m0_hz = 24.0e6
lambda_hz = 0.45e6

[roles]
gate = [0, 1]
saved = []

[gate]
kind = "sqrt_iswap_plus"

[sim]
cavity_truncation = 2
qubit_levels = 3
tol = 1.0e-9
include_quadratic_photon_term = false

[output]
directory = "out"
formats = ["csv"]
"#;

    #[test]
    fn minimal_config_parses_and_round_trips() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.roles.n_qubits(), 2);
        assert!((cfg.device.kappa - TWO_PI * 133.0e3).abs() < 1e-6);
        let normalized = cfg.to_toml();
        let cfg2 = RunConfig::parse(&normalized).unwrap();
        assert_eq!(cfg.raw, cfg2.raw);
        assert_eq!(cfg2.to_toml(), normalized);
    }

    #[test]
    fn unknown_key_is_rejected_with_its_name() {
        let text = MINIMAL.replace("q_factor = 5.0e6", "q_factor = 5.0e6\nqq_factor = 1.0");
        let e = RunConfig::parse(&text).unwrap_err();
        assert!(e.0.contains("qq_factor"), "message was: {}", e.0);
    }

    #[test]
    fn negative_kappa_names_the_field() {
        let text = MINIMAL.replace("kappa_hz = 133.0e3", "kappa_hz = -1.0");
        let e = RunConfig::parse(&text).unwrap_err();
        assert!(e.0.contains("device.kappa_hz"), "message was: {}", e.0);
    }

    #[test]
    fn beam_modes_are_exclusive() {
        let text = MINIMAL.replace(
            "omega_m0_hz = 24.0e6",
            "omega_m0_hz = 24.0e6\nnonlinearity_hz = 2.71e6",
        );
        let e = RunConfig::parse(&text).unwrap_err();
        assert!(e.0.contains("beam"), "message was: {}", e.0);
    }

    #[test]
    fn single_qubit_gate_needs_angle_and_target() {
        let text = MINIMAL.replace(
            "kind = \"sqrt_iswap_plus\"",
            "kind = \"rz\"\nangle_rad = 1.5707963267948966\nqubit = 0",
        );
        let cfg = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg.gate.qubit, Some(0));
        let missing = MINIMAL.replace("kind = \"sqrt_iswap_plus\"", "kind = \"rz\"\nqubit = 0");
        assert!(RunConfig::parse(&missing).is_err());
    }

    #[test]
    fn entangling_gate_rejects_angle() {
        let text = MINIMAL.replace("kind = \"sqrt_iswap_plus\"", "kind = \"iswap\"\nangle_rad = 0.5");
        let e = RunConfig::parse(&text).unwrap_err();
        assert!(e.0.contains("angle"), "message was: {}", e.0);
    }

    #[test]
    fn sweep_paths_parse() {
        for (path, want) in [
            ("gate.time_s", SweepParameter::GateTime),
            ("device.detuning_hz", SweepParameter::Detuning),
            ("device.kappa_hz", SweepParameter::Kappa),
            ("device.gamma_m_per_s", SweepParameter::GammaM),
        ] {
            assert_eq!(SweepParameter::from_str(path).unwrap(), want);
            assert_eq!(SweepParameter::from_str(path).unwrap().path(), path);
        }
        assert!(SweepParameter::from_str("device.q_factor").is_err());
        let text = MINIMAL.replace(
            "[output]",
            "[sweep]\nparameter = \"device.kappa_hz\"\nvalues = [1.0e5, 2.0e5]\n\n[output]",
        );
        let cfg = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg.sweep.unwrap().values.len(), 2);
    }

    #[test]
    fn tolerance_range_is_enforced_at_parse() {
        let text = MINIMAL.replace("tol = 1.0e-9", "tol = 1.0e-3");
        let e = RunConfig::parse(&text).unwrap_err();
        assert!(e.0.contains("sim.tol"), "message was: {}", e.0);
    }
}
