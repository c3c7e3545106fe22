//! Physical parameter layer: cavity steady state, optomechanical coupling,
//! thermal occupation, and electric-noise decoherence estimates.
//!
//! All frequencies and rates are angular (rad/s); temperatures kelvin;
//! lengths meters. Conversions from tabulated Hz values happen once at the
//! configuration boundary, not here.

use num_complex::Complex64;
use thiserror::Error;

use crate::consts::{E_CHARGE, HBAR, K_B, M_ELECTRON};
use crate::C64;

pub type Result<T> = std::result::Result<T, DeviceError>;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("cavity response diverges: Delta and kappa are both zero")]
    SingularDrive,
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("{name} must be non-negative, got {value}")]
    Negative { name: &'static str, value: f64 },
    #[error("quality factor must be at least 1, got {0}")]
    BadQualityFactor(f64),
}

/// Exciton response of the beam material, entering the polarizability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExcitonParams {
    /// Exciton resonance ω_e (rad/s).
    pub omega_e: f64,
    /// Exciton linewidth Γ_e (rad/s).
    pub gamma_e: f64,
    /// Oscillator strength (dimensionless).
    pub f: f64,
}

/// Electrode geometry and electric-noise reference data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElectrodeParams {
    /// Beam-electrode distance a (m).
    pub distance: f64,
    /// Series resistance R (Ω).
    pub resistance: f64,
    /// Static tuning field E (V/m).
    pub field: f64,
    /// 1/f field-noise density S_E at the reference point (V²m⁻²Hz⁻¹).
    pub s_e_ref: f64,
    /// Reference temperature for S_E (K).
    pub t_ref: f64,
    /// Reference angular frequency for S_E (rad/s).
    pub omega_ref: f64,
}

/// Full device parameter record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceParams {
    /// Gate-qubit transition frequency δ₁₀ (rad/s).
    pub omega_gate: f64,
    /// Saved-qubit transition frequency (rad/s).
    pub omega_saved: f64,
    /// Laser detuning Δ (rad/s).
    pub delta: f64,
    /// Total cavity linewidth κ (rad/s).
    pub kappa: f64,
    /// Mechanical quality factor.
    pub q_factor: f64,
    /// Explicit mechanical damping rate; when unset, γ_m = ω_m/Q.
    pub gamma_m_override: Option<f64>,
    /// Environment temperature (K).
    pub temperature: f64,
    /// Cavity frequency shift per deflection G₀ (rad/s per m).
    pub g0: f64,
    /// Zero-point motion of the gate beam (m).
    pub x_zpm: f64,
    /// Laser drive amplitude Ω (rad/s).
    pub omega_drive: f64,
    pub exciton: ExcitonParams,
    pub electrode: ElectrodeParams,
}

impl DeviceParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("omega_gate", self.omega_gate),
            ("omega_saved", self.omega_saved),
            ("kappa", self.kappa),
            ("g0", self.g0),
            ("x_zpm", self.x_zpm),
            ("exciton.omega_e", self.exciton.omega_e),
            ("exciton.gamma_e", self.exciton.gamma_e),
            ("exciton.f", self.exciton.f),
            ("electrode.distance", self.electrode.distance),
            ("electrode.resistance", self.electrode.resistance),
            ("electrode.t_ref", self.electrode.t_ref),
            ("electrode.omega_ref", self.electrode.omega_ref),
        ];
        for (name, value) in positive {
            if !(value > 0.0) {
                return Err(DeviceError::NonPositive { name, value });
            }
        }
        let non_negative = [
            ("temperature", self.temperature),
            ("omega_drive", self.omega_drive),
            ("electrode.field", self.electrode.field),
            ("electrode.s_e_ref", self.electrode.s_e_ref),
        ];
        for (name, value) in non_negative {
            if !(value >= 0.0) {
                return Err(DeviceError::Negative { name, value });
            }
        }
        if !(self.q_factor >= 1.0) {
            return Err(DeviceError::BadQualityFactor(self.q_factor));
        }
        if let Some(g) = self.gamma_m_override {
            if !(g >= 0.0) {
                return Err(DeviceError::Negative {
                    name: "gamma_m_override",
                    value: g,
                });
            }
        }
        Ok(())
    }

    /// Steady-state cavity amplitude α for this drive.
    pub fn alpha(&self) -> Result<C64> {
        cavity_steady_amplitude(self.omega_drive, self.delta, self.kappa)
    }

    /// Optomechanical coupling for a beam with the given zero-point motion.
    pub fn coupling_for(&self, x_zpm: f64) -> Result<f64> {
        Ok(optomech_coupling(self.alpha()?.norm(), x_zpm, self.g0))
    }

    /// Mechanical damping at frequency ω_m: the explicit override when set,
    /// else ω_m/Q.
    pub fn gamma_m(&self, omega_m: f64) -> f64 {
        self.gamma_m_override.unwrap_or(omega_m / self.q_factor)
    }

    /// Thermal phonon number of a mode at ω_m.
    pub fn thermal_phonons(&self, omega_m: f64) -> f64 {
        thermal_occupation(self.temperature, omega_m)
    }

    /// |Δ|/κ, the margin backing the dispersive effective model.
    pub fn delta_to_kappa(&self) -> f64 {
        self.delta.abs() / self.kappa
    }
}

// ---------------------------------------------------------------------------
// Cavity and coupling
// ---------------------------------------------------------------------------

/// Steady-state amplitude α = Ω/(2Δ + iκ) of the driven cavity.
pub fn cavity_steady_amplitude(omega_drive: f64, delta: f64, kappa: f64) -> Result<C64> {
    let den = Complex64::new(2.0 * delta, kappa);
    if den.norm_sqr() == 0.0 {
        return Err(DeviceError::SingularDrive);
    }
    Ok(Complex64::new(omega_drive, 0.0) / den)
}

/// Optomechanical coupling g = 2|α|·x_zpm·G₀.
pub fn optomech_coupling(alpha_mag: f64, x_zpm: f64, g0: f64) -> f64 {
    2.0 * alpha_mag * x_zpm * g0
}

/// Bose-Einstein occupation n̄ = 1/(exp(ħω/k_B T) − 1); zero at T = 0.
pub fn thermal_occupation(temperature: f64, omega: f64) -> f64 {
    if temperature <= 0.0 {
        return 0.0;
    }
    let x = HBAR * omega / (K_B * temperature);
    1.0 / x.exp_m1()
}

// ---------------------------------------------------------------------------
// Electric-noise estimates
// ---------------------------------------------------------------------------

/// Exciton polarizability α(ω) = (e²f/m_e)/(ω_e² − ω² + iωΓ_e).
///
/// Im α ≤ 0 for ω ≥ 0: the response lags the drive, consistent with loss.
pub fn exciton_polarizability(omega: f64, exciton: &ExcitonParams) -> C64 {
    let num = E_CHARGE * E_CHARGE * exciton.f / M_ELECTRON;
    let den = Complex64::new(
        exciton.omega_e * exciton.omega_e - omega * omega,
        omega * exciton.gamma_e,
    );
    num / den
}

/// Zero-frequency polarizability e²f/(m_e ω_e²).
pub fn static_polarizability(exciton: &ExcitonParams) -> f64 {
    E_CHARGE * E_CHARGE * exciton.f / (M_ELECTRON * exciton.omega_e * exciton.omega_e)
}

/// Field-noise density seen by the beam from Johnson-Nyquist voltage noise on
/// the electrode: S_δE = S_δU/a² with S_δU = 4k_B T R.
pub fn johnson_field_noise_density(electrode: &ElectrodeParams, temperature: f64) -> f64 {
    4.0 * K_B * temperature * electrode.resistance / (electrode.distance * electrode.distance)
}

/// 1/f field-noise density scaled from the reference point as S_E ∼ T/ω.
pub fn scaled_field_noise_density(
    electrode: &ElectrodeParams,
    temperature: f64,
    omega_m: f64,
) -> f64 {
    electrode.s_e_ref * (temperature / electrode.t_ref) * (electrode.omega_ref / omega_m)
}

fn field_noise_rate(device: &DeviceParams, omega_m: f64, s_e: f64) -> f64 {
    let pol = exciton_polarizability(omega_m, &device.exciton).norm();
    let lever = device.x_zpm / HBAR;
    4.0 * lever * lever * pol * pol * device.electrode.field * device.electrode.field * s_e
}

/// Qubit decoherence rate from Johnson-Nyquist electrode noise, evaluated at
/// the mechanical frequency.
pub fn johnson_nyquist_rate(device: &DeviceParams, omega_m: f64) -> f64 {
    let s_e = johnson_field_noise_density(&device.electrode, device.temperature);
    field_noise_rate(device, omega_m, s_e)
}

/// Qubit decoherence rate from 1/f electric-field noise, using the scaled
/// density at (T, ω_m).
pub fn one_over_f_rate(device: &DeviceParams, omega_m: f64) -> f64 {
    let s_e = scaled_field_noise_density(&device.electrode, device.temperature, omega_m);
    field_noise_rate(device, omega_m, s_e)
}

/// Summary of damping and noise channels at one mechanical frequency.
#[derive(Debug, Clone, Copy)]
pub struct NoiseReport {
    pub omega_m: f64,
    pub gamma_m: f64,
    pub n_bar: f64,
    /// γ_m·n̄, the thermal heating rate every electric rate is compared to.
    pub thermal_heating: f64,
    pub johnson_nyquist: f64,
    pub one_over_f: f64,
    /// Scaled 1/f field-noise density at (T, ω_m).
    pub field_noise_density: f64,
    pub polarizability_static: f64,
}

pub fn noise_report(device: &DeviceParams, omega_m: f64) -> NoiseReport {
    let gamma_m = device.gamma_m(omega_m);
    let n_bar = device.thermal_phonons(omega_m);
    NoiseReport {
        omega_m,
        gamma_m,
        n_bar,
        thermal_heating: gamma_m * n_bar,
        johnson_nyquist: johnson_nyquist_rate(device, omega_m),
        one_over_f: one_over_f_rate(device, omega_m),
        field_noise_density: scaled_field_noise_density(
            &device.electrode,
            device.temperature,
            omega_m,
        ),
        polarizability_static: static_polarizability(&device.exciton),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::consts::TWO_PI;
    use approx::assert_relative_eq;

    /// Reference device: numbers chosen so the derived quantities (|α|, g,
    /// γ_m·n̄) land on the working point used throughout the crate.
    pub(crate) fn reference_device() -> DeviceParams {
        DeviceParams {
            omega_gate: TWO_PI * 26.6e6,
            omega_saved: TWO_PI * 80.0e6,
            delta: TWO_PI * 0.399e9,
            kappa: TWO_PI * 133.0e3,
            q_factor: 5.0e6,
            gamma_m_override: None,
            temperature: 0.020,
            g0: TWO_PI * 2.494_285_714_285_714e14,
            x_zpm: 3.5e-12,
            omega_drive: TWO_PI * 3.99e12,
            exciton: ExcitonParams {
                omega_e: TWO_PI * 3.385e14,
                gamma_e: 1.0e9,
                f: 50.0,
            },
            electrode: ElectrodeParams {
                distance: 25.0e-9,
                resistance: 100.0,
                field: 7.6e7,
                s_e_ref: 4.0,
                t_ref: 300.0,
                omega_ref: TWO_PI * 3.9e3,
            },
        }
    }

    #[test]
    fn cavity_amplitude_limits() {
        assert_eq!(
            cavity_steady_amplitude(0.0, 1.0e9, 1.0e5).unwrap(),
            C64::new(0.0, 0.0)
        );
        let real = cavity_steady_amplitude(2.0e9, 1.0e9, 0.0).unwrap();
        assert_relative_eq!(real.re, 1.0, max_relative = 1e-14);
        assert_eq!(real.im, 0.0);
        assert!(matches!(
            cavity_steady_amplitude(1.0, 0.0, 0.0),
            Err(DeviceError::SingularDrive)
        ));
    }

    #[test]
    fn cavity_amplitude_phase_ratio() {
        // |Im α / Re α| = κ/(2Δ).
        let (delta, kappa) = (TWO_PI * 0.399e9, TWO_PI * 133.0e3);
        let alpha = cavity_steady_amplitude(1.0e12, delta, kappa).unwrap();
        assert_relative_eq!(
            (alpha.im / alpha.re).abs(),
            kappa / (2.0 * delta),
            max_relative = 1e-9
        );
    }

    #[test]
    fn coupling_is_linear() {
        assert_eq!(optomech_coupling(0.0, 1e-12, 1e15), 0.0);
        let g1 = optomech_coupling(1000.0, 3.5e-12, 1e15);
        let g2 = optomech_coupling(2000.0, 3.5e-12, 1e15);
        assert_relative_eq!(g2, 2.0 * g1, max_relative = 1e-14);
    }

    #[test]
    fn reference_coupling_hits_working_point() {
        let dev = reference_device();
        let alpha = dev.alpha().unwrap().norm();
        assert_relative_eq!(alpha, 5000.0, max_relative = 1e-6);
        let g = dev.coupling_for(dev.x_zpm).unwrap();
        assert_relative_eq!(g, TWO_PI * 8.73e6, max_relative = 1e-6);
    }

    #[test]
    fn thermal_occupation_limits() {
        assert_eq!(thermal_occupation(0.0, TWO_PI * 26.6e6), 0.0);
        // Classical limit n̄ → k_BT/ħω within 1% once the ratio passes 100.
        let omega = TWO_PI * 1.0e6;
        let t = 200.0 * HBAR * omega / K_B;
        let classical = K_B * t / (HBAR * omega);
        assert_relative_eq!(
            thermal_occupation(t, omega),
            classical,
            max_relative = 1e-2
        );
    }

    #[test]
    fn thermal_heating_at_working_point() {
        let dev = reference_device();
        let rep = noise_report(&dev, dev.omega_gate);
        assert_relative_eq!(rep.n_bar, 15.17, max_relative = 1e-2);
        assert_relative_eq!(rep.gamma_m, 33.43, max_relative = 1e-2);
        assert!(
            (rep.thermal_heating - 507.0).abs() < 10.0,
            "γ_m·n̄ = {}",
            rep.thermal_heating
        );
    }

    #[test]
    fn polarizability_limits() {
        let exciton = reference_device().exciton;
        let stat = exciton_polarizability(0.0, &exciton);
        assert_relative_eq!(stat.re, static_polarizability(&exciton), max_relative = 1e-14);
        assert_eq!(stat.im, 0.0);
        // On resonance: purely imaginary, magnitude e²f/(m_e ω_e Γ_e).
        let res = exciton_polarizability(exciton.omega_e, &exciton);
        assert!(res.re.abs() < 1e-12 * res.norm());
        assert!(res.im < 0.0, "loss convention");
        let expected =
            E_CHARGE * E_CHARGE * exciton.f / (M_ELECTRON * exciton.omega_e * exciton.gamma_e);
        assert_relative_eq!(res.norm(), expected, max_relative = 1e-12);
        // Decay at large ω.
        assert!(
            exciton_polarizability(100.0 * exciton.omega_e, &exciton).norm()
                < 1e-3 * static_polarizability(&exciton)
        );
    }

    #[test]
    fn near_resonant_enhancement_order_of_magnitude() {
        // A cavity detuned 10⁻⁴·ω_e below the exciton line sees the static
        // polarizability enhanced by roughly 10⁴ (order of magnitude only:
        // the oscillator strength is itself only known to a range).
        let exciton = reference_device().exciton;
        let omega_c = exciton.omega_e * (1.0 - 1e-4);
        let enhancement =
            exciton_polarizability(omega_c, &exciton).re.abs() / static_polarizability(&exciton);
        let log_ratio = (enhancement / 2.0e4).log10().abs();
        assert!(
            log_ratio < 1.0,
            "enhancement {enhancement:.3e} not within a decade of 2e4"
        );
    }

    #[test]
    fn field_noise_density_scaling() {
        let dev = reference_device();
        let s_e = scaled_field_noise_density(&dev.electrode, dev.temperature, dev.omega_gate);
        // 4·(0.02/300)·(3.9 kHz/26.6 MHz) = 3.909e-8 V²m⁻²Hz⁻¹.
        assert_relative_eq!(s_e, 3.909e-8, max_relative = 1e-2);
    }

    #[test]
    fn electric_noise_rates_are_negligible() {
        let dev = reference_device();
        let rep = noise_report(&dev, dev.omega_gate);
        assert!(
            rep.johnson_nyquist / dev.electrode.resistance < 1e-2,
            "Γ_δU/R = {}",
            rep.johnson_nyquist / dev.electrode.resistance
        );
        assert!(rep.one_over_f < 0.1, "Γ_1/f = {}", rep.one_over_f);
        assert!(rep.johnson_nyquist < 1e-3 * rep.thermal_heating);
        assert!(rep.one_over_f < 1e-3 * rep.thermal_heating);
    }

    #[test]
    fn noise_scaling_laws() {
        let dev = reference_device();
        // Γ ∝ E²: quadrupling the field multiplies the rate by 16.
        let mut dev4 = dev;
        dev4.electrode.field *= 4.0;
        assert_relative_eq!(
            johnson_nyquist_rate(&dev4, dev.omega_gate),
            16.0 * johnson_nyquist_rate(&dev, dev.omega_gate),
            max_relative = 1e-12
        );
        // T = 0 kills both channels.
        let mut cold = dev;
        cold.temperature = 0.0;
        assert_eq!(johnson_nyquist_rate(&cold, dev.omega_gate), 0.0);
        assert_eq!(one_over_f_rate(&cold, dev.omega_gate), 0.0);
    }

    #[test]
    fn validation_catches_bad_records() {
        let mut dev = reference_device();
        assert!(dev.validate().is_ok());
        dev.q_factor = 0.5;
        assert!(matches!(
            dev.validate(),
            Err(DeviceError::BadQualityFactor(_))
        ));
        let mut dev = reference_device();
        dev.kappa = 0.0;
        assert!(dev.validate().is_err());
        let mut dev = reference_device();
        dev.temperature = -1.0;
        assert!(dev.validate().is_err());
    }
}
