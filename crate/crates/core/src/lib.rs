#![deny(unsafe_code)]
//! Simulation library for quantum information processing with nanomechanical
//! qubits: anharmonic beam spectra under electrostatic tuning, open-system
//! (Lindblad) dynamics of several beams coupled to an optical cavity mode,
//! gate pulse schedules, and gate-fidelity benchmarking.
//!
//! Conventions used throughout:
//! - Energies and frequencies are angular (rad/s) with ħ = 1; times are in
//!   seconds, rates in 1/s.
//! - The dimensionless deflection quadrature is X = (b + b†)/√2.
//! - Multi-site operators order sites as qubits first, cavity last; the last
//!   site varies fastest in the composite index.

pub mod consts;
pub mod device;
pub mod dynamics;
pub mod fidelity;
pub mod gates;
pub mod hilbert;
pub mod linalg;
pub mod spectrum;

/// Complex double, the scalar type of every operator in this crate.
pub type C64 = num_complex::Complex64;
