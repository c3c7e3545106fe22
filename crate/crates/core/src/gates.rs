//! Gate pulse construction on the mechanical register.
//!
//! Single-qubit z rotations detune one beam's transition with a smooth
//! electrode pulse (a sin² envelope on the X² prefactor) so the 0-1 phase
//! integral hits the requested angle exactly while the 0-2 mixing follows
//! adiabatically and returns. Single-qubit x/y rotations drive one beam at
//! its own transition frequency through the linear X coupling and rely on
//! the rotating-wave limit. The two-qubit entangling gate holds the red or
//! blue side of the cavity drive for a fixed duration so the cavity-mediated
//! flip-flop between the two resonant gate beams accrues a quarter-swap;
//! composing both detuning signs with a pair of π z rotations yields a full
//! iSWAP while every other resonant pair's flip-flop cancels.
//!
//! The module also carries the static effective model behind those pulses
//! (flip-flop rates and per-level dispersive shifts), the deterministic
//! phase-frame corrections used before fidelity scoring, and a fast error
//! predictor that evolves the effective model instead of the full space.

use std::collections::HashMap;
use std::f64::consts::FRAC_PI_3;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::consts::TWO_PI;
use crate::device::{DeviceError, DeviceParams};
use crate::dynamics::{
    evolve, Carrier, Coeff, Direction, Dissipator, DynamicsError, EvolveOptions,
    HamiltonianSchedule, ScheduleSegment, SegmentGenerator, StructuredHamiltonian,
};
use crate::fidelity::{self, FidelityError, GateErrorReport};
use crate::hilbert::{annihilation, number, quadrature_x, DensityMatrix, HilbertError, OperatorMatrix, SpaceLayout};
use crate::spectrum::{spectrum_of, tune_to_frequency, BeamParams, MechSpectrum, SpectrumError};
use crate::C64;

pub type Result<T> = std::result::Result<T, GateError>;

#[derive(Debug, Error)]
pub enum GateError {
    #[error("rotation angle {0} outside (-2π, 2π]")]
    BadAngle(f64),
    #[error("duration must be positive and finite, got {0}")]
    BadDuration(f64),
    #[error("{0}")]
    BadRoles(String),
    #[error("qubit {qubit} out of range for {n_qubits} qubits")]
    QubitOutOfRange { qubit: usize, n_qubits: usize },
    #[error("role frequencies too close: separation {separation:.3e} rad/s is below {required:.3e} (5x the larger coupling)")]
    SeparationTooNarrow { separation: f64, required: f64 },
    #[error("{0}")]
    BadGateSpec(String),
    #[error("shift pulse of {duration:.3e} s cannot hold phase {angle:.3} without pushing the beam toward buckling")]
    BucklingRisk { angle: f64, duration: f64 },
    #[error("shift solve did not converge: residual phase {residual:.3e} rad")]
    ShiftSolveFailed { residual: f64 },
    #[error("shift pulse duration {duration:.3e} s is under {min:.3e} s (two mechanical periods); the ramp would not be adiabatic")]
    ShiftTooFast { duration: f64, min: f64 },
    #[error("drive spans {cycles:.1} carrier cycles, below the {min} needed for the rotating-wave limit")]
    RwaViolation { cycles: f64, min: f64 },
    #[error("gate coupling is zero; the entangling pulse duration diverges")]
    ZeroCoupling,
    #[error("detuning margin {margin:.3e} rad/s to a mechanical transition is below {required:.3e} (10x coupling); the dispersive picture fails")]
    AdiabaticityViolated { margin: f64, required: f64 },
    #[error(transparent)]
    Spectrum(#[from] SpectrumError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Hilbert(#[from] HilbertError),
    #[error(transparent)]
    Fidelity(#[from] FidelityError),
}

/// Levels retained per mechanical site.
pub const QUBIT_LEVELS: usize = 3;
/// Role separation below this multiple of the larger coupling is an error.
pub const SEPARATION_ERROR_FACTOR: f64 = 5.0;
/// Role separation below this multiple of the larger coupling is a warning.
pub const SEPARATION_WARN_FACTOR: f64 = 20.0;
/// Detuning must clear every retained transition by this multiple of g.
pub const ADIABATIC_MIN_RATIO: f64 = 10.0;
/// Minimum carrier cycles for a resonant drive segment.
pub const MIN_DRIVE_CYCLES: f64 = 20.0;

// ---------------------------------------------------------------------------
// Roles
// ---------------------------------------------------------------------------

/// Non-fatal observations recorded while validating a role assignment.
#[derive(Debug, Clone, PartialEq)]
pub enum RoleWarning {
    /// Gate/saved separation sits between 5x and 20x the larger coupling:
    /// usable, but residual cross-talk suppression is modest.
    NarrowSeparation { separation: f64, max_coupling: f64 },
}

impl fmt::Display for RoleWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoleWarning::NarrowSeparation {
                separation,
                max_coupling,
            } => write!(
                f,
                "role separation {:.3e} rad/s is under {:.0}x the larger coupling {:.3e}",
                separation, SEPARATION_WARN_FACTOR, max_coupling
            ),
        }
    }
}

/// Which qubit plays which role, plus the per-role working points.
///
/// Qubit indices must form a contiguous 0..N range split between exactly two
/// gate qubits and any number of saved qubits. Frequencies are the tuned 0-1
/// transition targets (rad/s); couplings are the per-role cavity couplings.
#[derive(Debug, Clone)]
pub struct QubitRoleAssignment {
    gate_qubits: [usize; 2],
    saved_qubits: Vec<usize>,
    omega_gate: f64,
    omega_saved: f64,
    coupling_gate: f64,
    coupling_saved: f64,
    warnings: Vec<RoleWarning>,
}

impl QubitRoleAssignment {
    pub fn new(
        gate_qubits: [usize; 2],
        saved_qubits: Vec<usize>,
        omega_gate: f64,
        omega_saved: f64,
        coupling_gate: f64,
        coupling_saved: f64,
    ) -> Result<Self> {
        if gate_qubits[0] == gate_qubits[1] {
            return Err(GateError::BadRoles(format!(
                "gate qubits must be distinct, got {} twice",
                gate_qubits[0]
            )));
        }
        let mut all: Vec<usize> = gate_qubits.to_vec();
        all.extend_from_slice(&saved_qubits);
        let n = all.len();
        let mut seen = vec![false; n];
        for &q in &all {
            if q >= n {
                return Err(GateError::BadRoles(format!(
                    "qubit indices must cover 0..{n} contiguously, got {q}"
                )));
            }
            if seen[q] {
                return Err(GateError::BadRoles(format!("qubit {q} assigned twice")));
            }
            seen[q] = true;
        }
        for (name, v) in [("omega_gate", omega_gate), ("omega_saved", omega_saved)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GateError::BadRoles(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("coupling_gate", coupling_gate),
            ("coupling_saved", coupling_saved),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(GateError::BadRoles(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        let mut warnings = Vec::new();
        if !saved_qubits.is_empty() {
            let separation = (omega_gate - omega_saved).abs();
            let max_coupling = coupling_gate.max(coupling_saved);
            if separation < SEPARATION_ERROR_FACTOR * max_coupling {
                return Err(GateError::SeparationTooNarrow {
                    separation,
                    required: SEPARATION_ERROR_FACTOR * max_coupling,
                });
            }
            if separation < SEPARATION_WARN_FACTOR * max_coupling {
                warnings.push(RoleWarning::NarrowSeparation {
                    separation,
                    max_coupling,
                });
            }
        }
        Ok(Self {
            gate_qubits,
            saved_qubits,
            omega_gate,
            omega_saved,
            coupling_gate,
            coupling_saved,
            warnings,
        })
    }

    pub fn n_qubits(&self) -> usize {
        2 + self.saved_qubits.len()
    }

    pub fn gate_qubits(&self) -> [usize; 2] {
        self.gate_qubits
    }

    pub fn saved_qubits(&self) -> &[usize] {
        &self.saved_qubits
    }

    pub fn is_gate(&self, qubit: usize) -> bool {
        self.gate_qubits.contains(&qubit)
    }

    pub fn omega_gate(&self) -> f64 {
        self.omega_gate
    }

    pub fn omega_saved(&self) -> f64 {
        self.omega_saved
    }

    /// Tuned transition target for one qubit.
    pub fn omega_for(&self, qubit: usize) -> Result<f64> {
        self.check_qubit(qubit)?;
        Ok(if self.is_gate(qubit) {
            self.omega_gate
        } else {
            self.omega_saved
        })
    }

    /// Cavity coupling for one qubit.
    pub fn coupling_for(&self, qubit: usize) -> Result<f64> {
        self.check_qubit(qubit)?;
        Ok(if self.is_gate(qubit) {
            self.coupling_gate
        } else {
            self.coupling_saved
        })
    }

    pub fn warnings(&self) -> &[RoleWarning] {
        &self.warnings
    }

    fn check_qubit(&self, qubit: usize) -> Result<()> {
        if qubit >= self.n_qubits() {
            return Err(GateError::QubitOutOfRange {
                qubit,
                n_qubits: self.n_qubits(),
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Assembled system
// ---------------------------------------------------------------------------

/// One mechanical site: its beam, tuning offset, retained spectrum, and
/// cavity coupling.
#[derive(Debug, Clone)]
pub struct QubitSite {
    pub beam: BeamParams,
    pub v_tune: f64,
    pub spectrum: MechSpectrum,
    pub coupling: f64,
}

/// The full simulated register: per-qubit sites, the cavity, and the device
/// record. Layout puts qubit j at site j and the cavity last.
#[derive(Debug, Clone)]
pub struct GateSystem {
    roles: QubitRoleAssignment,
    device: DeviceParams,
    sites: Vec<QubitSite>,
    layout: SpaceLayout,
    n_cavity: usize,
    include_photon_quadratic: bool,
}

impl GateSystem {
    /// Tunes every site of `beam` to its role's transition target and builds
    /// the composite layout. `n_cavity` of 2 suffices for electrode-only
    /// schedules (the cavity stays in vacuum); entangling pulses need enough
    /// levels to hold the virtual photon tail, 5 at the reference point.
    pub fn assemble(
        roles: QubitRoleAssignment,
        device: DeviceParams,
        beam: &BeamParams,
        n_cavity: usize,
        include_photon_quadratic: bool,
    ) -> Result<Self> {
        device.validate()?;
        if n_cavity < 2 {
            return Err(GateError::BadRoles("n_cavity must be at least 2".into()));
        }
        let n = roles.n_qubits();
        let mut sites = Vec::with_capacity(n);
        for q in 0..n {
            let target = roles.omega_for(q)?;
            let v_tune = tune_to_frequency(beam, target)?;
            let spectrum = spectrum_of(beam, v_tune, QUBIT_LEVELS)?;
            sites.push(QubitSite {
                beam: beam.clone(),
                v_tune,
                spectrum,
                coupling: roles.coupling_for(q)?,
            });
        }
        let mut dims = vec![QUBIT_LEVELS; n];
        dims.push(n_cavity);
        let layout = SpaceLayout::new(dims)?;
        Ok(Self {
            roles,
            device,
            sites,
            layout,
            n_cavity,
            include_photon_quadratic,
        })
    }

    pub fn roles(&self) -> &QubitRoleAssignment {
        &self.roles
    }

    pub fn device(&self) -> &DeviceParams {
        &self.device
    }

    pub fn n_qubits(&self) -> usize {
        self.sites.len()
    }

    pub fn n_cavity(&self) -> usize {
        self.n_cavity
    }

    pub fn cavity_site(&self) -> usize {
        self.sites.len()
    }

    pub fn layout(&self) -> &SpaceLayout {
        &self.layout
    }

    pub fn site(&self, qubit: usize) -> Result<&QubitSite> {
        self.sites.get(qubit).ok_or(GateError::QubitOutOfRange {
            qubit,
            n_qubits: self.sites.len(),
        })
    }

    pub fn include_photon_quadratic(&self) -> bool {
        self.include_photon_quadratic
    }

    /// Retained level energies of one site, relative to its ground level.
    fn base_energies(&self, qubit: usize) -> Result<[f64; QUBIT_LEVELS]> {
        let spec = &self.site(qubit)?.spectrum;
        let e0 = spec.energy(0);
        Ok([0.0, spec.energy(1) - e0, spec.energy(2) - e0])
    }

    /// Retained X block as a complex matrix.
    fn x_matrix(&self, qubit: usize) -> Result<Array2<C64>> {
        let spec = &self.site(qubit)?.spectrum;
        Ok(Array2::from_shape_fn((QUBIT_LEVELS, QUBIT_LEVELS), |(i, j)| {
            C64::new(spec.x_element(i, j), 0.0)
        }))
    }

    /// Retained X² block as a complex matrix.
    fn x2_matrix(&self, qubit: usize) -> Result<Array2<C64>> {
        let spec = &self.site(qubit)?.spectrum;
        Ok(Array2::from_shape_fn((QUBIT_LEVELS, QUBIT_LEVELS), |(i, j)| {
            C64::new(spec.x2_element(i, j), 0.0)
        }))
    }
}

// ---------------------------------------------------------------------------
// Pulse layer
// ---------------------------------------------------------------------------

/// Physical content of one schedule segment.
#[derive(Debug, Clone, PartialEq)]
pub enum PulseKind {
    /// No controls; free evolution and dissipation only.
    Idle,
    /// Electrode frequency-shift pulse on one qubit: the X² prefactor ramps
    /// as v_peak·sin²(πt/T), accruing `relative_phase` on |1⟩ against |0⟩.
    Shift {
        qubit: usize,
        v_peak: f64,
        relative_phase: f64,
    },
    /// Resonant electrode drive on one qubit:
    /// amplitude·sin²(πt/T)·cos(ωt − θ) on X. The smooth envelope keeps the
    /// off-resonant 1→2 excitation from being frozen in at the segment edge.
    Drive {
        qubit: usize,
        amplitude: f64,
        carrier_omega: f64,
        carrier_phase: f64,
    },
    /// Cavity-mediated coupling with the stated signed detuning (rad/s).
    Laser { detuning: f64 },
}

/// One contiguous interval of the pulse program.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseSegment {
    pub label: String,
    pub duration: f64,
    pub kind: PulseKind,
}

impl PulseSegment {
    pub fn new(label: impl Into<String>, duration: f64, kind: PulseKind) -> Result<Self> {
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(GateError::BadDuration(duration));
        }
        Ok(Self {
            label: label.into(),
            duration,
            kind,
        })
    }
}

/// An ordered pulse program.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PulseSchedule {
    segments: Vec<PulseSegment>,
}

impl PulseSchedule {
    pub fn new(segments: Vec<PulseSegment>) -> Self {
        Self { segments }
    }

    pub fn push(&mut self, segment: PulseSegment) {
        self.segments.push(segment);
    }

    pub fn segments(&self) -> &[PulseSegment] {
        &self.segments
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    /// One line per segment, timing in microseconds, rates in MHz.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for (i, seg) in self.segments.iter().enumerate() {
            let us = seg.duration * 1e6;
            let line = match &seg.kind {
                PulseKind::Idle => format!("{i}: {} idle {us:.4} us", seg.label),
                PulseKind::Shift {
                    qubit,
                    v_peak,
                    relative_phase,
                } => format!(
                    "{i}: {} shift qubit {qubit}, peak {:.4} MHz, phase {:.4} rad, {us:.4} us",
                    seg.label,
                    v_peak / TWO_PI * 1e-6,
                    relative_phase
                ),
                PulseKind::Drive {
                    qubit,
                    amplitude,
                    carrier_omega,
                    carrier_phase,
                } => format!(
                    "{i}: {} drive qubit {qubit}, amp {:.4} MHz at {:.4} MHz, axis {:.4} rad, {us:.4} us",
                    seg.label,
                    amplitude / TWO_PI * 1e-6,
                    carrier_omega / TWO_PI * 1e-6,
                    carrier_phase
                ),
                PulseKind::Laser { detuning } => format!(
                    "{i}: {} laser detuning {:.4} MHz, {us:.4} us",
                    seg.label,
                    detuning / TWO_PI * 1e-6
                ),
            };
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Gate kinds
// ---------------------------------------------------------------------------

/// Detuning branch of the entangling pulse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwapSign {
    Plus,
    Minus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateKind {
    Rx,
    Ry,
    Rz,
    SqrtIswapPlus,
    SqrtIswapMinus,
    Iswap,
}

impl GateKind {
    pub fn is_single_qubit(self) -> bool {
        matches!(self, GateKind::Rx | GateKind::Ry | GateKind::Rz)
    }
}

impl FromStr for GateKind {
    type Err = GateError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rx" => Ok(GateKind::Rx),
            "ry" => Ok(GateKind::Ry),
            "rz" => Ok(GateKind::Rz),
            "sqrt_iswap_plus" => Ok(GateKind::SqrtIswapPlus),
            "sqrt_iswap_minus" => Ok(GateKind::SqrtIswapMinus),
            "iswap" => Ok(GateKind::Iswap),
            other => Err(GateError::BadGateSpec(format!("unknown gate kind {other:?}"))),
        }
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            GateKind::Rx => "rx",
            GateKind::Ry => "ry",
            GateKind::Rz => "rz",
            GateKind::SqrtIswapPlus => "sqrt_iswap_plus",
            GateKind::SqrtIswapMinus => "sqrt_iswap_minus",
            GateKind::Iswap => "iswap",
        };
        f.write_str(s)
    }
}

/// A requested gate. `angle` applies to rotations; `qubit` to single-qubit
/// kinds; `duration` overrides the single-qubit default. Entangling kinds
/// derive their duration from the working point and reject overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct GateSpec {
    pub kind: GateKind,
    pub angle: f64,
    pub qubit: Option<usize>,
    pub duration: Option<f64>,
}

impl GateSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.angle.is_finite() || self.angle <= -TWO_PI || self.angle > TWO_PI {
            return Err(GateError::BadAngle(self.angle));
        }
        if self.kind.is_single_qubit() {
            if self.qubit.is_none() {
                return Err(GateError::BadGateSpec(format!(
                    "gate {} needs a target qubit",
                    self.kind
                )));
            }
        } else {
            if self.qubit.is_some() {
                return Err(GateError::BadGateSpec(format!(
                    "gate {} acts on the gate pair; do not give a qubit",
                    self.kind
                )));
            }
            if self.duration.is_some() {
                return Err(GateError::BadGateSpec(format!(
                    "gate {} derives its duration; do not give one",
                    self.kind
                )));
            }
        }
        if let Some(t) = self.duration {
            if !(t > 0.0 && t.is_finite()) {
                return Err(GateError::BadDuration(t));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// 3x3 symmetric eigenvalues (closed form)
// ---------------------------------------------------------------------------

/// Eigenvalues of a symmetric 3x3, ascending, by the trigonometric method.
/// Used inside the shift root-solve where a LAPACK round-trip per quadrature
/// point would dominate.
fn sym3_eigvals(m: &[[f64; 3]; 3]) -> [f64; 3] {
    let off = m[0][1] * m[0][1] + m[0][2] * m[0][2] + m[1][2] * m[1][2];
    if off == 0.0 {
        let mut e = [m[0][0], m[1][1], m[2][2]];
        e.sort_by(f64::total_cmp);
        return e;
    }
    let q = (m[0][0] + m[1][1] + m[2][2]) / 3.0;
    let p2 = (m[0][0] - q).powi(2) + (m[1][1] - q).powi(2) + (m[2][2] - q).powi(2) + 2.0 * off;
    let p = (p2 / 6.0).sqrt();
    let b = [
        [(m[0][0] - q) / p, m[0][1] / p, m[0][2] / p],
        [m[0][1] / p, (m[1][1] - q) / p, m[1][2] / p],
        [m[0][2] / p, m[1][2] / p, (m[2][2] - q) / p],
    ];
    let det_b = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
        - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let r = (det_b / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let hi = q + 2.0 * p * phi.cos();
    let lo = q + 2.0 * p * (phi + 2.0 * FRAC_PI_3).cos();
    let mid = 3.0 * q - hi - lo;
    [lo, mid, hi]
}

// ---------------------------------------------------------------------------
// Single-qubit pulses
// ---------------------------------------------------------------------------

/// Rotation angle reduced to the accrued relative phase in [0, 2π).
fn reduced_phase(angle: f64) -> f64 {
    angle.rem_euclid(TWO_PI)
}

/// Default shift duration: peak detuning an order below the transition.
fn default_shift_duration(chi: f64, omega: f64) -> f64 {
    (10.0 * chi / omega).max(2.0 * TWO_PI / omega)
}

/// 0-1 splitting of one site under an X² prefactor v, from the retained
/// 3x3 block. Returns NEG_INFINITY once the splitting collapses below 5% of
/// its unshifted value, which the solver treats as out of range.
fn shifted_delta10(base: &[f64; 3], x2: &[[f64; 3]; 3], v: f64, delta10_bare: f64) -> f64 {
    let m = [
        [base[0] + v * x2[0][0], v * x2[0][1], v * x2[0][2]],
        [v * x2[1][0], base[1] + v * x2[1][1], v * x2[1][2]],
        [v * x2[2][0], v * x2[2][1], base[2] + v * x2[2][2]],
    ];
    let e = sym3_eigvals(&m);
    let d = e[1] - e[0];
    if d < 0.05 * delta10_bare {
        f64::NEG_INFINITY
    } else {
        d
    }
}

/// ∫₀ᵀ [δ₁₀(v_peak·sin²(πt/T)) − δ₁₀(0)] dt by composite Simpson.
fn shift_phase_integral(
    base: &[f64; 3],
    x2: &[[f64; 3]; 3],
    v_peak: f64,
    duration: f64,
    delta10_bare: f64,
) -> f64 {
    const INTERVALS: usize = 256;
    let h = duration / INTERVALS as f64;
    let mut acc = 0.0;
    for k in 0..=INTERVALS {
        let t = k as f64 * h;
        let s = (std::f64::consts::PI * t / duration).sin().powi(2);
        let f = shifted_delta10(base, x2, v_peak * s, delta10_bare) - delta10_bare;
        if f == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let w = if k == 0 || k == INTERVALS {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * f;
    }
    acc * h / 3.0
}

/// Builds a z-rotation segment on one qubit.
///
/// The electrode pulse softens the beam with a sin² envelope so the
/// integrated 0-1 detuning equals −χ, with χ = angle mod 2π, leaving the
/// relative phase e^{+iχ} on |1⟩ once the static frame is unwound. The peak
/// prefactor is solved against the retained-block eigenvalues, so the
/// realized segment reproduces the integral exactly within the model.
pub fn rz_pulse(
    system: &GateSystem,
    qubit: usize,
    angle: f64,
    duration: Option<f64>,
) -> Result<PulseSegment> {
    if !angle.is_finite() || angle <= -TWO_PI || angle > TWO_PI {
        return Err(GateError::BadAngle(angle));
    }
    let site = system.site(qubit)?;
    let spec = &site.spectrum;
    let omega = spec.delta10();
    let chi = reduced_phase(angle);
    let t = duration.unwrap_or_else(|| default_shift_duration(chi, omega));
    if !(t > 0.0 && t.is_finite()) {
        return Err(GateError::BadDuration(t));
    }
    let min_t = 2.0 * TWO_PI / omega;
    if t < min_t {
        return Err(GateError::ShiftTooFast {
            duration: t,
            min: min_t,
        });
    }
    let label = format!("rz({angle:.4}) q{qubit}");
    if chi < 1e-12 {
        return PulseSegment::new(
            label,
            t,
            PulseKind::Shift {
                qubit,
                v_peak: 0.0,
                relative_phase: 0.0,
            },
        );
    }
    let base = system.base_energies(qubit)?;
    let mut x2 = [[0.0; 3]; 3];
    for (i, row) in x2.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = spec.x2_element(i, j);
        }
    }
    // Softening floor: the peak total prefactor (tuning offset plus pulse)
    // must stay clear of the static instability at −ω_m0/2.
    let v_floor = 0.999 * (-0.499 * site.beam.omega_m0 - site.v_tune.min(0.0));
    let slope = x2[1][1] - x2[0][0];
    let mut lo = (-(2.0 * chi / t) / slope).max(v_floor);
    let eval = |v: f64| shift_phase_integral(&base, &x2, v, t, omega);
    while eval(lo) > -chi {
        if lo <= v_floor {
            return Err(GateError::BucklingRisk { angle, duration: t });
        }
        lo = (lo * 1.6).max(v_floor);
    }
    let mut hi = 0.0;
    let mut mid = lo;
    for _ in 0..90 {
        mid = 0.5 * (lo + hi);
        if eval(mid) > -chi {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let residual = (eval(mid) + chi).abs() ;
    if !(residual <= 1e-8 * chi.max(1e-3)) {
        return Err(GateError::ShiftSolveFailed { residual });
    }
    PulseSegment::new(
        label,
        t,
        PulseKind::Shift {
            qubit,
            v_peak: mid,
            relative_phase: chi,
        },
    )
}

/// Builds a resonant-drive segment rotating one qubit about the equatorial
/// axis at angle `axis_phase` (0 for x, π/2 for y) by `angle`.
///
/// The drive is amplitude·sin²(πt/T)·cos(δ₁₀·t − θ) on X; the amplitude
/// follows from ∫ amplitude·sin²·X₀₁ dt = angle, so amplitude = 2·angle /
/// (X₀₁·T). The segment must span at least `MIN_DRIVE_CYCLES` carrier
/// cycles for the rotating-wave picture behind that calibration to hold.
pub fn rxy_pulse(
    system: &GateSystem,
    qubit: usize,
    angle: f64,
    axis_phase: f64,
    duration: Option<f64>,
) -> Result<PulseSegment> {
    if !angle.is_finite() || angle <= -TWO_PI || angle > TWO_PI {
        return Err(GateError::BadAngle(angle));
    }
    let spec = &system.site(qubit)?.spectrum;
    let omega = spec.delta10();
    let x01 = spec.x_element(0, 1);
    let t = duration.unwrap_or(2.0 * MIN_DRIVE_CYCLES * TWO_PI / omega);
    if !(t > 0.0 && t.is_finite()) {
        return Err(GateError::BadDuration(t));
    }
    let cycles = t * omega / TWO_PI;
    if cycles < MIN_DRIVE_CYCLES {
        return Err(GateError::RwaViolation {
            cycles,
            min: MIN_DRIVE_CYCLES,
        });
    }
    let amplitude = 2.0 * angle / (x01 * t);
    // While the drive is on, second-order level repulsion (dominantly the
    // off-resonant 1-2 coupling at the anharmonic gap) pulls the 0-1
    // resonance down by (a(t)²/4)·S. Run the carrier at the Rabi-weighted
    // dressed resonance; only the envelope-correlated remainder survives.
    let d21 = spec.delta(2, 1);
    let d20 = spec.delta(2, 0);
    let x12 = spec.x_element(1, 2);
    let x02 = spec.x_element(0, 2);
    let stark = x01 * x01 / omega
        - x12 * x12 * (1.0 / (d21 - omega) + 1.0 / (d21 + omega))
        + x02 * x02 * (1.0 / (d20 - omega) + 1.0 / (d20 + omega));
    let carrier_omega = omega + (5.0 / 32.0) * amplitude * amplitude * stark;
    PulseSegment::new(
        format!("rxy({angle:.4},{axis_phase:.4}) q{qubit}"),
        t,
        PulseKind::Drive {
            qubit,
            amplitude,
            carrier_omega,
            carrier_phase: axis_phase,
        },
    )
}

// ---------------------------------------------------------------------------
// Two-qubit pulses
// ---------------------------------------------------------------------------

/// Flip-flop rate between two resonant sites coupled through the cavity at
/// signed detuning Δ: J = g²·X₀₁²·Δ/(Δ² − ω²).
fn flip_flop_rate(spec: &MechSpectrum, coupling: f64, delta: f64) -> f64 {
    let omega = spec.delta10();
    let x01 = spec.x_element(0, 1);
    coupling * coupling * x01 * x01 * delta / (delta * delta - omega * omega)
}

/// Smallest |Δ| − |transition| margin over every site's retained
/// transitions, which must clear `ADIABATIC_MIN_RATIO` times that site's
/// coupling for the dispersive elimination to hold.
fn check_adiabaticity(system: &GateSystem, delta_abs: f64) -> Result<()> {
    for site in &system.sites {
        let spec = &site.spectrum;
        let required = ADIABATIC_MIN_RATIO * site.coupling;
        for n in 0..QUBIT_LEVELS {
            for m in 0..QUBIT_LEVELS {
                if n == m || spec.x_element(n, m).abs() < 1e-12 {
                    continue;
                }
                let margin = (delta_abs - spec.delta(n, m).abs().max(spec.delta(m, n).abs())).abs();
                if margin < required {
                    return Err(GateError::AdiabaticityViolated { margin, required });
                }
            }
        }
    }
    Ok(())
}

/// Builds one entangling laser segment: a quarter flip-flop between the two
/// gate qubits at the device's detuning magnitude, on the branch selected by
/// `sign`. `Plus` uses the detuning sign that makes the flip-flop rate
/// negative, so the accrued quarter-swap carries phase +i; `Minus` the
/// opposite. The duration T = (π/4)/|J| is identical for both branches.
pub fn sqrt_iswap_pulse(system: &GateSystem, sign: SwapSign) -> Result<PulseSegment> {
    let [qa, _] = system.roles.gate_qubits();
    let site = system.site(qa)?;
    let g = site.coupling;
    if g <= 0.0 {
        return Err(GateError::ZeroCoupling);
    }
    let delta_abs = system.device.delta.abs();
    check_adiabaticity(system, delta_abs)?;
    let j_plus = flip_flop_rate(&site.spectrum, g, delta_abs);
    let detuning = match sign {
        SwapSign::Plus => {
            if j_plus > 0.0 {
                -delta_abs
            } else {
                delta_abs
            }
        }
        SwapSign::Minus => {
            if j_plus > 0.0 {
                delta_abs
            } else {
                -delta_abs
            }
        }
    };
    let j = flip_flop_rate(&site.spectrum, g, detuning);
    let t = (std::f64::consts::FRAC_PI_4) / j.abs();
    let tag = match sign {
        SwapSign::Plus => "sqrt_iswap_plus",
        SwapSign::Minus => "sqrt_iswap_minus",
    };
    PulseSegment::new(tag, t, PulseKind::Laser { detuning })
}

/// The full iSWAP program: quarter-swap on one branch, π z rotation on the
/// first gate qubit, quarter-swap on the other branch, −π z rotation. The
/// two branches accrue opposite swap phases, and the π pair turns the second
/// quarter into a constructive continuation on the gate pair while every
/// spectator pair's two quarters cancel.
pub fn iswap_sequence(system: &GateSystem) -> Result<PulseSchedule> {
    let [qa, _] = system.roles.gate_qubits();
    let mut schedule = PulseSchedule::default();
    schedule.push(sqrt_iswap_pulse(system, SwapSign::Plus)?);
    schedule.push(rz_pulse(system, qa, std::f64::consts::PI, None)?);
    schedule.push(sqrt_iswap_pulse(system, SwapSign::Minus)?);
    schedule.push(rz_pulse(system, qa, -std::f64::consts::PI, None)?);
    Ok(schedule)
}

/// Builds the pulse program for one requested gate.
pub fn build_schedule(system: &GateSystem, spec: &GateSpec) -> Result<PulseSchedule> {
    spec.validate()?;
    let mut schedule = PulseSchedule::default();
    match spec.kind {
        GateKind::Rx => schedule.push(rxy_pulse(
            system,
            spec.qubit.expect("validated"),
            spec.angle,
            0.0,
            spec.duration,
        )?),
        GateKind::Ry => schedule.push(rxy_pulse(
            system,
            spec.qubit.expect("validated"),
            spec.angle,
            std::f64::consts::FRAC_PI_2,
            spec.duration,
        )?),
        GateKind::Rz => schedule.push(rz_pulse(
            system,
            spec.qubit.expect("validated"),
            spec.angle,
            spec.duration,
        )?),
        GateKind::SqrtIswapPlus => schedule.push(sqrt_iswap_pulse(system, SwapSign::Plus)?),
        GateKind::SqrtIswapMinus => schedule.push(sqrt_iswap_pulse(system, SwapSign::Minus)?),
        GateKind::Iswap => return iswap_sequence(system),
    }
    Ok(schedule)
}

/// Coupling needed to realize the quarter-swap in `duration` at the current
/// working point; used by duration sweeps, which rescale the drive rather
/// than stretch a fixed-coupling pulse.
pub fn coupling_for_duration(system: &GateSystem, duration: f64) -> Result<f64> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(GateError::BadDuration(duration));
    }
    let [qa, _] = system.roles.gate_qubits();
    let spec = &system.site(qa)?.spectrum;
    let omega = spec.delta10();
    let x01 = spec.x_element(0, 1);
    let delta = system.device.delta.abs();
    let j_needed = std::f64::consts::FRAC_PI_4 / duration;
    let denom = x01 * x01 * delta / (delta * delta - omega * omega).abs();
    Ok((j_needed / denom).sqrt())
}

// ---------------------------------------------------------------------------
// Ideal unitaries
// ---------------------------------------------------------------------------

fn embed_single_qubit(u: &Array2<C64>, qubit: usize, n_qubits: usize) -> Array2<C64> {
    let dim = 1usize << n_qubits;
    let shift = n_qubits - 1 - qubit;
    let mut out: Array2<C64> = Array2::zeros((dim, dim));
    for row in 0..dim {
        let b = (row >> shift) & 1;
        for bp in 0..2 {
            let col = (row & !(1 << shift)) | (bp << shift);
            out[(row, col)] = u[(b, bp)];
        }
    }
    out
}

fn embed_gate_pair(u: &Array2<C64>, qa: usize, qb: usize, n_qubits: usize) -> Array2<C64> {
    let dim = 1usize << n_qubits;
    let sa = n_qubits - 1 - qa;
    let sb = n_qubits - 1 - qb;
    let mut out: Array2<C64> = Array2::zeros((dim, dim));
    for row in 0..dim {
        let ba = (row >> sa) & 1;
        let bb = (row >> sb) & 1;
        let i2 = 2 * ba + bb;
        for j2 in 0..4 {
            let ca = j2 >> 1;
            let cb = j2 & 1;
            let col = (row & !(1 << sa) & !(1 << sb)) | (ca << sa) | (cb << sb);
            out[(row, col)] = u[(i2, j2)];
        }
    }
    out
}

fn rz_matrix(angle: f64) -> Array2<C64> {
    let half = angle / 2.0;
    let mut u: Array2<C64> = Array2::zeros((2, 2));
    u[(0, 0)] = C64::from_polar(1.0, -half);
    u[(1, 1)] = C64::from_polar(1.0, half);
    u
}

fn rxy_matrix(angle: f64, axis_phase: f64) -> Array2<C64> {
    let c = (angle / 2.0).cos();
    let s = (angle / 2.0).sin();
    let mut u: Array2<C64> = Array2::zeros((2, 2));
    u[(0, 0)] = C64::new(c, 0.0);
    u[(1, 1)] = C64::new(c, 0.0);
    u[(0, 1)] = C64::new(0.0, -s) * C64::from_polar(1.0, -axis_phase);
    u[(1, 0)] = C64::new(0.0, -s) * C64::from_polar(1.0, axis_phase);
    u
}

fn swap_block(sign: f64, full: bool) -> Array2<C64> {
    let mut u: Array2<C64> = Array2::zeros((4, 4));
    u[(0, 0)] = C64::new(1.0, 0.0);
    u[(3, 3)] = C64::new(1.0, 0.0);
    if full {
        u[(1, 2)] = C64::new(0.0, sign);
        u[(2, 1)] = C64::new(0.0, sign);
    } else {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        u[(1, 1)] = C64::new(r, 0.0);
        u[(2, 2)] = C64::new(r, 0.0);
        u[(1, 2)] = C64::new(0.0, sign * r);
        u[(2, 1)] = C64::new(0.0, sign * r);
    }
    u
}

/// The target unitary of a requested gate on the 2^N qubit subspace, with
/// qubit 0 as the most significant bit.
pub fn ideal_gate_unitary(spec: &GateSpec, roles: &QubitRoleAssignment) -> Result<Array2<C64>> {
    spec.validate()?;
    let n = roles.n_qubits();
    let [qa, qb] = roles.gate_qubits();
    if let Some(q) = spec.qubit {
        if q >= n {
            return Err(GateError::QubitOutOfRange {
                qubit: q,
                n_qubits: n,
            });
        }
    }
    let u = match spec.kind {
        GateKind::Rx => embed_single_qubit(&rxy_matrix(spec.angle, 0.0), spec.qubit.expect("validated"), n),
        GateKind::Ry => embed_single_qubit(
            &rxy_matrix(spec.angle, std::f64::consts::FRAC_PI_2),
            spec.qubit.expect("validated"),
            n,
        ),
        GateKind::Rz => embed_single_qubit(&rz_matrix(spec.angle), spec.qubit.expect("validated"), n),
        GateKind::SqrtIswapPlus => embed_gate_pair(&swap_block(1.0, false), qa, qb, n),
        GateKind::SqrtIswapMinus => embed_gate_pair(&swap_block(-1.0, false), qa, qb, n),
        GateKind::Iswap => embed_gate_pair(&swap_block(1.0, true), qa, qb, n),
    };
    Ok(u)
}

// ---------------------------------------------------------------------------
// Realization
// ---------------------------------------------------------------------------

/// Lowers a pulse program onto the composite register-plus-cavity space.
///
/// Every segment carries each site's retained level energies (relative to
/// its own ground level). Laser segments add the cavity detuning ladder and
/// the X_c·X_j coupling on every qubit; shift segments add the sin²-enveloped
/// X² term, expressed exactly as a constant plus one cosine component;
/// drive segments add the modulated X term. The static coherent drive on X_j
/// and its compensation electrode bias cancel identically and are omitted.
pub fn realize_schedule(system: &GateSystem, schedule: &PulseSchedule) -> Result<HamiltonianSchedule> {
    if schedule.segments().is_empty() {
        return Err(GateError::BadGateSpec("empty pulse schedule".into()));
    }
    let n = system.n_qubits();
    let cavity = system.cavity_site();
    let n_c = system.n_cavity();
    let mut segments = Vec::with_capacity(schedule.segments().len());
    for seg in schedule.segments() {
        let mut h = StructuredHamiltonian::new(system.layout().clone());
        for q in 0..n {
            h.add_site_diagonal(q, &system.base_energies(q)?)?;
        }
        match &seg.kind {
            PulseKind::Idle => {}
            PulseKind::Shift { qubit, v_peak, .. } => {
                if *v_peak != 0.0 {
                    let x2 = system.x2_matrix(*qubit)?;
                    h.add_local_term(*qubit, x2.clone(), Coeff::constant(v_peak / 2.0))?;
                    h.add_local_term(
                        *qubit,
                        x2,
                        Coeff::modulated(
                            -v_peak / 2.0,
                            Carrier {
                                omega: TWO_PI / seg.duration,
                                phase: 0.0,
                                t_origin: 0.0,
                            },
                        ),
                    )?;
                }
            }
            PulseKind::Drive {
                qubit,
                amplitude,
                carrier_omega,
                carrier_phase,
            } => {
                // sin²(πt/T)·cos(ωt − θ) expands exactly into the carrier
                // and two envelope sidebands at ω ± 2π/T.
                let x = system.x_matrix(*qubit)?;
                let env = TWO_PI / seg.duration;
                for (scale, omega) in [
                    (0.5, *carrier_omega),
                    (-0.25, *carrier_omega + env),
                    (-0.25, *carrier_omega - env),
                ] {
                    h.add_local_term(
                        *qubit,
                        x.clone(),
                        Coeff::modulated(
                            scale * amplitude,
                            Carrier {
                                omega,
                                phase: *carrier_phase,
                                t_origin: 0.0,
                            },
                        ),
                    )?;
                }
            }
            PulseKind::Laser { detuning } => {
                let cav_diag: Vec<f64> = (0..n_c).map(|k| -detuning * k as f64).collect();
                h.add_site_diagonal(cavity, &cav_diag)?;
                let x_c = quadrature_x(n_c).into_entries();
                for q in 0..n {
                    let g = system.site(q)?.coupling;
                    if g == 0.0 {
                        continue;
                    }
                    h.add_pair_term(cavity, x_c.clone(), q, system.x_matrix(q)?, g)?;
                }
                if system.include_photon_quadratic() {
                    let alpha_mag = system.device.alpha()?.norm();
                    let n_op = number(n_c).into_entries();
                    for q in 0..n {
                        let g = system.site(q)?.coupling;
                        if g == 0.0 {
                            continue;
                        }
                        let amp = g / (2.0_f64.sqrt() * alpha_mag);
                        h.add_pair_term(cavity, n_op.clone(), q, system.x_matrix(q)?, amp)?;
                    }
                }
            }
        }
        segments.push(ScheduleSegment::new(
            seg.duration,
            seg.label.clone(),
            SegmentGenerator::Structured(h),
        )?);
    }
    Ok(HamiltonianSchedule::new(segments)?)
}

/// Thermal contact for every site: phonon emission and absorption on each
/// beam at its own transition frequency, photon loss on the cavity.
pub fn thermal_dissipators(system: &GateSystem) -> Result<Vec<Dissipator>> {
    let mut out = Vec::new();
    let layout = system.layout();
    for q in 0..system.n_qubits() {
        let spec = &system.site(q)?.spectrum;
        let omega = spec.delta10();
        let gamma = system.device.gamma_m(omega);
        let n_bar = system.device.thermal_phonons(omega);
        if gamma == 0.0 {
            continue;
        }
        let b = Array2::from_shape_fn((QUBIT_LEVELS, QUBIT_LEVELS), |(i, j)| {
            C64::new(spec.b_element(i, j), 0.0)
        });
        out.push(Dissipator::site_local(
            layout,
            q,
            b.clone(),
            gamma * (n_bar + 1.0),
            Direction::Down,
        )?);
        if n_bar > 0.0 {
            out.push(Dissipator::site_local(
                layout,
                q,
                b,
                gamma * n_bar,
                Direction::Up,
            )?);
        }
    }
    if system.device.kappa > 0.0 && system.n_cavity() > 1 {
        out.push(Dissipator::site_local(
            layout,
            system.cavity_site(),
            annihilation(system.n_cavity()).into_entries(),
            system.device.kappa,
            Direction::Down,
        )?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Frame corrections
// ---------------------------------------------------------------------------

/// Per-level dispersive shift coefficient of one site at signed detuning Δ:
/// cⁿ = Σ_m X²_nm / (Δ + E_n − E_m), summed over the extended level tail.
pub fn dispersive_shift(spec: &MechSpectrum, delta: f64, level: usize, m_max: usize) -> f64 {
    let mut acc = 0.0;
    for m in 0..m_max {
        if m == level {
            continue;
        }
        let x = spec.x_element(level, m);
        if x == 0.0 {
            continue;
        }
        acc += x * x / (delta + spec.delta(level, m));
    }
    acc
}

/// Deterministic phases each site's levels accrue over a pulse program:
/// the static level energies over the full duration, plus the laser-induced
/// shifts (g²/2)·cⁿ per entangling segment on levels 0 and 1.
fn accumulated_phases(system: &GateSystem, schedule: &PulseSchedule) -> Result<Vec<[f64; 3]>> {
    let n = system.n_qubits();
    let total = schedule.total_duration();
    let mut phases = vec![[0.0; 3]; n];
    for (q, ph) in phases.iter_mut().enumerate() {
        let base = system.base_energies(q)?;
        for (lv, p) in ph.iter_mut().enumerate() {
            *p = base[lv] * total;
        }
    }
    for seg in schedule.segments() {
        if let PulseKind::Laser { detuning } = seg.kind {
            for (q, ph) in phases.iter_mut().enumerate() {
                let site = system.site(q)?;
                let g2_half = site.coupling * site.coupling / 2.0;
                let m_max = site.spectrum.n_extended();
                for lv in 0..2 {
                    ph[lv] += g2_half
                        * dispersive_shift(&site.spectrum, detuning, lv, m_max)
                        * seg.duration;
                }
            }
        }
    }
    Ok(phases)
}

/// Diagonal unitary on the 3^N register space that unwinds the deterministic
/// frame phases of a pulse program; apply it to a cavity-traced state before
/// scoring against an ideal gate.
pub fn frame_correction_diag(system: &GateSystem, schedule: &PulseSchedule) -> Result<Array1<C64>> {
    let n = system.n_qubits();
    let phases = accumulated_phases(system, schedule)?;
    let dim = QUBIT_LEVELS.pow(n as u32);
    let mut diag: Array1<C64> = Array1::zeros(dim);
    for idx in 0..dim {
        let mut rem = idx;
        let mut total = 0.0;
        for q in (0..n).rev() {
            let lv = rem % QUBIT_LEVELS;
            rem /= QUBIT_LEVELS;
            total += phases[q][lv];
        }
        diag[idx] = C64::from_polar(1.0, total);
    }
    Ok(diag)
}

/// ϱ → D ϱ D† for a diagonal unitary D given by its diagonal.
pub fn apply_frame_correction(rho: &DensityMatrix, diag: &Array1<C64>) -> Result<DensityMatrix> {
    if rho.dim() != diag.len() {
        return Err(GateError::Fidelity(FidelityError::DimensionMismatch {
            a: rho.dim(),
            b: diag.len(),
        }));
    }
    let d = rho.dim();
    let mut m = rho.entries().clone();
    for i in 0..d {
        for j in 0..d {
            m[(i, j)] *= diag[i] * diag[j].conj();
        }
    }
    Ok(DensityMatrix::from_trusted(OperatorMatrix::new(
        rho.layout().clone(),
        m,
    )?))
}

// ---------------------------------------------------------------------------
// Effective model
// ---------------------------------------------------------------------------

/// Per-qubit dispersive shift coefficients and whether the retained-level
/// sum already agrees with the extended tail to 0.1%.
#[derive(Debug, Clone, Copy)]
pub struct ShiftCoefficients {
    pub c_ground: f64,
    pub c_excited: f64,
    pub converged: bool,
}

/// Static qubit-subspace model of one laser segment: resonant flip-flops
/// within each role class plus per-level shifts. Lives on the 2^N subspace
/// with qubit 0 most significant.
#[derive(Debug, Clone)]
pub struct EffectiveModel {
    layout: SpaceLayout,
    pub delta_eff: f64,
    pub j_gate: f64,
    pub j_saved: f64,
    pub shifts: Vec<ShiftCoefficients>,
    h: OperatorMatrix,
}

impl EffectiveModel {
    pub fn hamiltonian(&self) -> &OperatorMatrix {
        &self.h
    }

    pub fn layout(&self) -> &SpaceLayout {
        &self.layout
    }
}

/// Builds the effective model of one entangling segment at signed detuning
/// `delta_eff`. Flip-flop terms connect only same-frequency pairs (the gate
/// pair, and every pair of saved qubits); cross-role terms average out and
/// are omitted. Excitation number is conserved by construction.
pub fn build_effective_model(system: &GateSystem, delta_eff: f64) -> Result<EffectiveModel> {
    check_adiabaticity(system, delta_eff.abs())?;
    let n = system.n_qubits();
    let [qa, qb] = system.roles.gate_qubits();
    let gate_site = system.site(qa)?;
    let j_gate = if gate_site.coupling > 0.0 {
        flip_flop_rate(&gate_site.spectrum, gate_site.coupling, delta_eff)
    } else {
        0.0
    };
    let j_saved = if let Some(&qs) = system.roles.saved_qubits().first() {
        let site = system.site(qs)?;
        if site.coupling > 0.0 {
            flip_flop_rate(&site.spectrum, site.coupling, delta_eff)
        } else {
            0.0
        }
    } else {
        0.0
    };
    let mut shifts = Vec::with_capacity(n);
    for q in 0..n {
        let site = system.site(q)?;
        let m_max = site.spectrum.n_extended();
        let c_ground = dispersive_shift(&site.spectrum, delta_eff, 0, m_max);
        let c_excited = dispersive_shift(&site.spectrum, delta_eff, 1, m_max);
        let c0_retained = dispersive_shift(&site.spectrum, delta_eff, 0, QUBIT_LEVELS);
        let c1_retained = dispersive_shift(&site.spectrum, delta_eff, 1, QUBIT_LEVELS);
        let rel = |full: f64, part: f64| (full - part).abs() <= 1e-3 * full.abs().max(1e-30);
        shifts.push(ShiftCoefficients {
            c_ground,
            c_excited,
            converged: rel(c_ground, c0_retained) && rel(c_excited, c1_retained),
        });
    }
    let dim = 1usize << n;
    let layout = SpaceLayout::new(vec![2; n])?;
    let mut m: Array2<C64> = Array2::zeros((dim, dim));
    for idx in 0..dim {
        let mut diag = 0.0;
        for q in 0..n {
            let bit = (idx >> (n - 1 - q)) & 1;
            let site = system.site(q)?;
            let g2_half = site.coupling * site.coupling / 2.0;
            diag += g2_half
                * if bit == 0 {
                    shifts[q].c_ground
                } else {
                    shifts[q].c_excited
                };
        }
        m[(idx, idx)] = C64::new(diag, 0.0);
    }
    let mut pairs: Vec<([usize; 2], f64)> = vec![([qa, qb], j_gate)];
    let saved = system.roles.saved_qubits();
    for (i, &s1) in saved.iter().enumerate() {
        for &s2 in &saved[i + 1..] {
            pairs.push(([s1, s2], j_saved));
        }
    }
    for (pair, j) in pairs {
        if j == 0.0 {
            continue;
        }
        let sa = n - 1 - pair[0];
        let sb = n - 1 - pair[1];
        for idx in 0..dim {
            let ba = (idx >> sa) & 1;
            let bb = (idx >> sb) & 1;
            if ba == 1 && bb == 0 {
                let other = (idx & !(1 << sa)) | (1 << sb);
                m[(idx, other)] += C64::new(j, 0.0);
                m[(other, idx)] += C64::new(j, 0.0);
            }
        }
    }
    let h = OperatorMatrix::new(layout.clone(), m)?;
    Ok(EffectiveModel {
        layout,
        delta_eff,
        j_gate,
        j_saved,
        shifts,
        h,
    })
}

// ---------------------------------------------------------------------------
// Fast error prediction
// ---------------------------------------------------------------------------

/// Predicts the benchmark error of an entangling pulse program by evolving
/// the 2^N effective model instead of the full space. Laser segments evolve
/// under the static model for their branch; shift segments apply their
/// relative phase instantly and then idle; dissipation (when enabled) acts
/// through each qubit's 0-1 phonon jump at its thermal rates.
pub fn predict_gate_error(
    system: &GateSystem,
    schedule: &PulseSchedule,
    target: &Array2<C64>,
    with_dissipation: bool,
) -> Result<GateErrorReport> {
    let n = system.n_qubits();
    let set = fidelity::benchmark_states(n)?;
    let layout = SpaceLayout::new(vec![2; n])?;
    let dissipators = if with_dissipation {
        let mut out = Vec::new();
        for q in 0..n {
            let spec = &system.site(q)?.spectrum;
            let omega = spec.delta10();
            let gamma = system.device.gamma_m(omega);
            let n_bar = system.device.thermal_phonons(omega);
            if gamma == 0.0 {
                continue;
            }
            let b01 = spec.b_element(0, 1);
            let mut m: Array2<C64> = Array2::zeros((2, 2));
            m[(0, 1)] = C64::new(b01, 0.0);
            out.push(Dissipator::site_local(
                &layout,
                q,
                m.clone(),
                gamma * (n_bar + 1.0),
                Direction::Down,
            )?);
            if n_bar > 0.0 {
                out.push(Dissipator::site_local(
                    &layout,
                    q,
                    m,
                    gamma * n_bar,
                    Direction::Up,
                )?);
            }
        }
        out
    } else {
        Vec::new()
    };
    let mut models: HashMap<u64, EffectiveModel> = HashMap::new();
    let opts = EvolveOptions::with_tol(1e-10);
    // Laser-induced level phases to unwind afterwards, per qubit.
    let mut laser_phases = vec![[0.0_f64; 2]; n];
    for seg in schedule.segments() {
        if let PulseKind::Laser { detuning } = seg.kind {
            for (q, ph) in laser_phases.iter_mut().enumerate() {
                let site = system.site(q)?;
                let g2_half = site.coupling * site.coupling / 2.0;
                let m_max = site.spectrum.n_extended();
                ph[0] += g2_half * dispersive_shift(&site.spectrum, detuning, 0, m_max) * seg.duration;
                ph[1] += g2_half * dispersive_shift(&site.spectrum, detuning, 1, m_max) * seg.duration;
            }
        }
    }
    let mut unwind: Array1<C64> = Array1::zeros(1 << n);
    for idx in 0..(1usize << n) {
        let mut total = 0.0;
        for (q, ph) in laser_phases.iter().enumerate() {
            let bit = (idx >> (n - 1 - q)) & 1;
            total += ph[bit];
        }
        unwind[idx] = C64::from_polar(1.0, total);
    }

    let mut evolved = Vec::with_capacity(set.len());
    for k in 0..set.len() {
        let mut rho = DensityMatrix::pure(&set.qubit_ket(k), layout.clone())?;
        for seg in schedule.segments() {
            match &seg.kind {
                PulseKind::Laser { detuning } => {
                    let key = detuning.to_bits();
                    if !models.contains_key(&key) {
                        models.insert(key, build_effective_model(system, *detuning)?);
                    }
                    let model = &models[&key];
                    let hs = HamiltonianSchedule::single(ScheduleSegment::new(
                        seg.duration,
                        seg.label.clone(),
                        SegmentGenerator::Constant(model.hamiltonian().clone()),
                    )?)?;
                    rho = evolve(&rho, &hs, &dissipators, &opts)?.final_state().clone();
                }
                PulseKind::Shift {
                    qubit,
                    relative_phase,
                    ..
                } => {
                    let shift_bit = n - 1 - qubit;
                    let mut diag: Array1<C64> = Array1::zeros(1 << n);
                    for (idx, v) in diag.iter_mut().enumerate() {
                        let bit = (idx >> shift_bit) & 1;
                        *v = if bit == 1 {
                            C64::from_polar(1.0, *relative_phase)
                        } else {
                            C64::new(1.0, 0.0)
                        };
                    }
                    rho = apply_frame_correction(&rho, &diag)?;
                    if with_dissipation {
                        let hs = HamiltonianSchedule::single(ScheduleSegment::new(
                            seg.duration,
                            seg.label.clone(),
                            SegmentGenerator::Constant(OperatorMatrix::zeros(layout.clone())),
                        )?)?;
                        rho = evolve(&rho, &hs, &dissipators, &opts)?.final_state().clone();
                    }
                }
                PulseKind::Idle => {
                    if with_dissipation {
                        let hs = HamiltonianSchedule::single(ScheduleSegment::new(
                            seg.duration,
                            seg.label.clone(),
                            SegmentGenerator::Constant(OperatorMatrix::zeros(layout.clone())),
                        )?)?;
                        rho = evolve(&rho, &hs, &dissipators, &opts)?.final_state().clone();
                    }
                }
                PulseKind::Drive { .. } => {
                    return Err(GateError::BadGateSpec(
                        "error prediction covers entangling programs; drive segments need the full simulation"
                            .into(),
                    ));
                }
            }
        }
        let rho = apply_frame_correction(&rho, &unwind)?;
        // Embed the 2^N state into the 3^N register with zero leakage.
        let dim3 = QUBIT_LEVELS.pow(n as u32);
        let mut m3: Array2<C64> = Array2::zeros((dim3, dim3));
        let map: Vec<usize> = (0..(1usize << n))
            .map(|label| {
                let mut idx = 0;
                for q in 0..n {
                    idx = idx * QUBIT_LEVELS + ((label >> (n - 1 - q)) & 1);
                }
                idx
            })
            .collect();
        for (a, &ra) in map.iter().enumerate() {
            for (b, &rb) in map.iter().enumerate() {
                m3[(ra, rb)] = rho.entries()[(a, b)];
            }
        }
        evolved.push(DensityMatrix::from_trusted(OperatorMatrix::new(
            set.register_layout().clone(),
            m3,
        )?));
    }
    Ok(fidelity::gate_error(target, &evolved, &set)?)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
