//! Physical constants (SI, CODATA 2018) and unit helpers.

/// Reduced Planck constant ħ [J·s].
pub const HBAR: f64 = 1.054_571_817e-34;

/// Boltzmann constant k_B [J/K] (exact in SI 2019).
pub const K_B: f64 = 1.380_649e-23;

/// Elementary charge e [C] (exact in SI 2019).
pub const E_CHARGE: f64 = 1.602_176_634e-19;

/// Electron mass m_e [kg].
pub const M_ELECTRON: f64 = 9.109_383_7015e-31;

/// 2π, for converting plain frequencies (Hz) to angular ones (rad/s).
pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Converts a plain frequency in Hz to an angular frequency in rad/s.
///
/// Every config-facing frequency is stated in Hz and crosses into angular
/// units exactly once, through this function.
pub fn hz_to_angular(f_hz: f64) -> f64 {
    TWO_PI * f_hz
}

/// Converts an angular frequency in rad/s back to Hz for reporting.
pub fn angular_to_hz(omega: f64) -> f64 {
    omega / TWO_PI
}
