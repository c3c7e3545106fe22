//! Anharmonic spectrum of one electrostatically tunable nanobeam.
//!
//! The beam Hamiltonian in units of ħ is
//!
//!   H/ħ = ω_m0 b†b + (λ/2)(b + b†)⁴ + v0z X²,   X = (b + b†)/√2,
//!
//! diagonalized in the bare harmonic basis. Negative v0z softens the mode
//! (lower δ₁₀, larger nonlinearity); 2|v0z| > ω_m0 would buckle the beam and
//! is rejected rather than modeled.

use ndarray::azip;
use ndarray::prelude::*;
use thiserror::Error;

use crate::hilbert::{OperatorMatrix, SpaceLayout};
use crate::linalg;
use crate::C64;

pub type Result<T> = std::result::Result<T, SpectrumError>;

#[derive(Debug, Error)]
pub enum SpectrumError {
    #[error("omega_m0 must be positive, got {0}")]
    BadFrequency(f64),
    #[error("lambda must be non-negative, got {0}")]
    BadLambda(f64),
    #[error("basis_dim must be at least 20, got {0}")]
    BasisDimTooSmall(usize),
    #[error("need n_levels*4 <= basis_dim for truncation safety, got n_levels {n_levels}, basis_dim {basis_dim}")]
    BasisTooSmall { n_levels: usize, basis_dim: usize },
    #[error("need at least {needed} levels, spectrum retains {n_levels}")]
    InsufficientLevels { n_levels: usize, needed: usize },
    #[error("softening v0z = {v0z:.6e} buckles the beam (threshold 2|v0z| > omega_m0 = {omega_m0:.6e})")]
    Buckled { v0z: f64, omega_m0: f64 },
    #[error("eigenvalues not converged: doubling the basis moves E_{level} by {change:.3e} (limit {limit:.3e}); increase basis_dim")]
    NotConverged { level: usize, change: f64, limit: f64 },
    #[error("target delta10 = {target:.6e} rad/s is below the reachable minimum {min:.6e} rad/s")]
    Untunable { target: f64, min: f64 },
    #[error("root bracket failed: f({lo:.6e}) and f({hi:.6e}) have the same sign")]
    BracketFailed { lo: f64, hi: f64 },
    #[error("retained eigenvalues are not strictly increasing at level {0}")]
    DegenerateLevels(usize),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
    #[error(transparent)]
    Hilbert(#[from] crate::hilbert::HilbertError),
}

/// Relative tolerance on δ₁₀ for `tune_to_frequency`.
pub const TUNE_REL_TOL: f64 = 1e-6;
/// Relative eigenvalue change allowed when the basis is doubled.
pub const CONVERGENCE_REL_TOL: f64 = 1e-8;

// ---------------------------------------------------------------------------
// BeamParams
// ---------------------------------------------------------------------------

/// Bare beam parameters: harmonic frequency, quartic coefficient, basis size.
/// All frequencies angular (rad/s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamParams {
    pub omega_m0: f64,
    pub lambda: f64,
    pub basis_dim: usize,
}

impl BeamParams {
    pub fn new(omega_m0: f64, lambda: f64, basis_dim: usize) -> Result<Self> {
        let p = Self {
            omega_m0,
            lambda,
            basis_dim,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega_m0 > 0.0) {
            return Err(SpectrumError::BadFrequency(self.omega_m0));
        }
        if !(self.lambda >= 0.0) {
            return Err(SpectrumError::BadLambda(self.lambda));
        }
        if self.basis_dim < 20 {
            return Err(SpectrumError::BasisDimTooSmall(self.basis_dim));
        }
        Ok(())
    }
}

/// True iff the softening has crossed the buckling threshold 2|v0z| > ω_m0
/// (only reachable for v0z < 0; stiffening never buckles).
pub fn buckling_check(v0z: f64, omega_m0: f64) -> bool {
    v0z < 0.0 && 2.0 * v0z.abs() > omega_m0
}

// ---------------------------------------------------------------------------
// Hamiltonian assembly
// ---------------------------------------------------------------------------

/// Precomputed operator blocks in the bare number basis, so that root-finding
/// loops assemble H(ω, λ, v0z) by scaling instead of repeated matrix powers.
struct BasisCache {
    dim: usize,
    /// b†b diagonal.
    number: Vec<f64>,
    /// (b + b†)⁴.
    q4: Array2<f64>,
    /// X² = (b + b†)²/2.
    x2: Array2<f64>,
}

impl BasisCache {
    fn new(dim: usize) -> Self {
        let mut q = Array2::<f64>::zeros((dim, dim));
        for n in 1..dim {
            let s = (n as f64).sqrt();
            q[(n - 1, n)] = s;
            q[(n, n - 1)] = s;
        }
        let q2 = q.dot(&q);
        let q4 = q2.dot(&q2);
        let x2 = q2.mapv(|v| v * 0.5);
        Self {
            dim,
            number: (0..dim).map(|n| n as f64).collect(),
            q4,
            x2,
        }
    }

    fn assemble(&self, omega_m0: f64, lambda: f64, v0z: f64) -> Array2<f64> {
        let mut h = Array2::<f64>::zeros((self.dim, self.dim));
        azip!((h in &mut h, &q4 in &self.q4, &x2 in &self.x2) {
            *h = 0.5 * lambda * q4 + v0z * x2;
        });
        for (n, &num) in self.number.iter().enumerate() {
            h[(n, n)] += omega_m0 * num;
        }
        h
    }
}

/// H/ħ = ω_m0 b†b + (λ/2)(b+b†)⁴ + v0z X² in the bare number basis.
pub fn build_mech_hamiltonian(p: &BeamParams, v0z: f64) -> Result<OperatorMatrix> {
    p.validate()?;
    let h = BasisCache::new(p.basis_dim).assemble(p.omega_m0, p.lambda, v0z);
    let layout = SpaceLayout::single(p.basis_dim)?;
    Ok(OperatorMatrix::new(
        layout,
        h.mapv(|v| C64::new(v, 0.0)),
    )?)
}

// ---------------------------------------------------------------------------
// MechSpectrum
// ---------------------------------------------------------------------------

/// Eigen-data of one tuned beam.
///
/// The first `n_levels` levels form the working subspace handed to dynamics
/// and gates. A longer tail (`n_extended`) of levels is retained for
/// perturbative sums and basis-adequacy checks. Matrix elements are real:
/// eigenvectors carry a sign convention making every X_{n,n+1} positive, so
/// the harmonic limit reproduces the textbook ladder exactly.
#[derive(Debug, Clone)]
pub struct MechSpectrum {
    energies: Vec<f64>,
    x: Array2<f64>,
    x2: Array2<f64>,
    b: Array2<f64>,
    n_levels: usize,
    v0z: f64,
}

impl MechSpectrum {
    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    /// Number of levels retained beyond the working subspace.
    pub fn n_extended(&self) -> usize {
        self.energies.len()
    }

    /// Softening strength the spectrum was computed at (bookkeeping).
    pub fn v0z(&self) -> f64 {
        self.v0z
    }

    /// E_n in rad/s (raw eigenvalue, zero-point energy included).
    pub fn energy(&self, n: usize) -> f64 {
        self.energies[n]
    }

    /// Retained eigenvalues E_0..E_{n_levels-1}.
    pub fn energies(&self) -> &[f64] {
        &self.energies[..self.n_levels]
    }

    /// Transition frequency E_n − E_m.
    pub fn delta(&self, n: usize, m: usize) -> f64 {
        self.energies[n] - self.energies[m]
    }

    pub fn delta10(&self) -> f64 {
        self.delta(1, 0)
    }

    pub fn delta21(&self) -> f64 {
        self.delta(2, 1)
    }

    /// ⟨n|X|m⟩, valid up to `n_extended`.
    pub fn x_element(&self, n: usize, m: usize) -> f64 {
        self.x[(n, m)]
    }

    /// ⟨n|X²|m⟩ (exact operator, not the square of the truncated X block).
    pub fn x2_element(&self, n: usize, m: usize) -> f64 {
        self.x2[(n, m)]
    }

    /// ⟨n|b|m⟩ with b the bare-basis annihilation operator.
    pub fn b_element(&self, n: usize, m: usize) -> f64 {
        self.b[(n, m)]
    }

    /// Working-subspace block of X.
    pub fn x_retained(&self) -> ArrayView2<'_, f64> {
        self.x.slice(s![..self.n_levels, ..self.n_levels])
    }

    /// Working-subspace block of ⟨n|b|m⟩.
    pub fn b_retained(&self) -> ArrayView2<'_, f64> {
        self.b.slice(s![..self.n_levels, ..self.n_levels])
    }

    /// (E_2 − E_1) − (E_1 − E_0).
    pub fn nonlinearity(&self) -> Result<f64> {
        if self.n_levels < 3 {
            return Err(SpectrumError::InsufficientLevels {
                n_levels: self.n_levels,
                needed: 3,
            });
        }
        Ok(self.delta21() - self.delta10())
    }

    /// Relative defect of Σ_m X_nm X_mn against the exact ⟨n|X²|n⟩, summing
    /// over all extended levels. Small values mean the retained level count
    /// resolves the X coupling out of level n.
    pub fn completeness_defect(&self, n: usize) -> f64 {
        let sum: f64 = (0..self.n_extended()).map(|m| self.x[(n, m)] * self.x[(m, n)]).sum();
        let exact = self.x2[(n, n)];
        ((sum - exact) / exact).abs()
    }
}

/// Lowest `n_levels` eigenpairs of a beam Hamiltonian, plus an extended tail
/// for perturbative sums. `v0z` is recorded in the result for bookkeeping and
/// does not enter the computation.
pub fn diagonalize(h: &OperatorMatrix, n_levels: usize, v0z: f64) -> Result<MechSpectrum> {
    let dim = h.dim();
    if n_levels < 2 || n_levels * 4 > dim {
        return Err(SpectrumError::BasisTooSmall {
            n_levels,
            basis_dim: dim,
        });
    }
    let n_ext = n_levels.max(12.min(dim / 4));
    let h_real = h.entries().mapv(|v| v.re);
    diagonalize_real(&h_real, n_levels, n_ext, v0z)
}

fn diagonalize_real(
    h: &Array2<f64>,
    n_levels: usize,
    n_ext: usize,
    v0z: f64,
) -> Result<MechSpectrum> {
    let dim = h.nrows();
    let (vals, vecs) = linalg::eigh_real(h)?;

    // Sign convention: make every ⟨m−1|X|m⟩ positive by flipping eigenvector
    // signs cumulatively.
    let mut v = vecs.slice(s![.., ..n_ext]).to_owned();
    let x_bare = {
        let mut x = Array2::<f64>::zeros((dim, dim));
        let inv_sqrt2 = 1.0 / 2.0_f64.sqrt();
        for n in 1..dim {
            let s = (n as f64).sqrt() * inv_sqrt2;
            x[(n - 1, n)] = s;
            x[(n, n - 1)] = s;
        }
        x
    };
    let xv = x_bare.dot(&v);
    let x_raw = v.t().dot(&xv);
    // s_0 = 1, s_m chosen so s_{m-1}·s_m·X_{m-1,m} > 0.
    let mut sign = vec![1.0_f64; n_ext];
    for m in 1..n_ext {
        let raw = x_raw[(m - 1, m)];
        sign[m] = if raw == 0.0 {
            sign[m - 1]
        } else if sign[m - 1] * raw > 0.0 {
            1.0
        } else {
            -1.0
        };
    }
    for (m, &s) in sign.iter().enumerate() {
        if s < 0.0 {
            v.column_mut(m).mapv_inplace(|c| -c);
        }
    }

    let xv = x_bare.dot(&v);
    let mut x = v.t().dot(&xv);
    // Exact pentadiagonal ⟨j|X²|k⟩: diagonal j + 1/2, ⟨j|X²|j+2⟩ = √((j+1)(j+2))/2.
    let x2_bare = {
        let mut m = Array2::<f64>::zeros((dim, dim));
        for j in 0..dim {
            m[(j, j)] = j as f64 + 0.5;
            if j + 2 < dim {
                let s = (((j + 1) * (j + 2)) as f64).sqrt() * 0.5;
                m[(j, j + 2)] = s;
                m[(j + 2, j)] = s;
            }
        }
        m
    };
    let mut x2 = v.t().dot(&x2_bare.dot(&v));
    let b_bare = {
        let mut m = Array2::<f64>::zeros((dim, dim));
        for n in 1..dim {
            m[(n - 1, n)] = (n as f64).sqrt();
        }
        m
    };
    let b = v.t().dot(&b_bare.dot(&v));

    // Symmetrize away matmul round-off; X and X² are exactly Hermitian.
    for i in 0..n_ext {
        for j in (i + 1)..n_ext {
            let sx = 0.5 * (x[(i, j)] + x[(j, i)]);
            x[(i, j)] = sx;
            x[(j, i)] = sx;
            let s2 = 0.5 * (x2[(i, j)] + x2[(j, i)]);
            x2[(i, j)] = s2;
            x2[(j, i)] = s2;
        }
    }

    let energies: Vec<f64> = vals.iter().take(n_ext).copied().collect();
    for n in 1..n_levels {
        if energies[n] <= energies[n - 1] {
            return Err(SpectrumError::DegenerateLevels(n));
        }
    }

    Ok(MechSpectrum {
        energies,
        x,
        x2,
        b,
        n_levels,
        v0z,
    })
}

/// Full spectrum computation: buckling guard, diagonalization at `basis_dim`,
/// and a convergence check against a doubled basis.
pub fn spectrum_of(p: &BeamParams, v0z: f64, n_levels: usize) -> Result<MechSpectrum> {
    p.validate()?;
    if buckling_check(v0z, p.omega_m0) {
        return Err(SpectrumError::Buckled {
            v0z,
            omega_m0: p.omega_m0,
        });
    }
    let h = build_mech_hamiltonian(p, v0z)?;
    let spectrum = diagonalize(&h, n_levels, v0z)?;

    let h2 = BasisCache::new(2 * p.basis_dim).assemble(p.omega_m0, p.lambda, v0z);
    let vals2 = linalg::eigvalsh_real(&h2)?;
    for n in 0..n_levels {
        let change = (spectrum.energy(n) - vals2[n]).abs();
        let limit = CONVERGENCE_REL_TOL * (spectrum.energy(n).abs() + p.omega_m0);
        if change > limit {
            return Err(SpectrumError::NotConverged {
                level: n,
                change,
                limit,
            });
        }
    }
    Ok(spectrum)
}

// ---------------------------------------------------------------------------
// Inverse problems
// ---------------------------------------------------------------------------

/// δ₁₀ from an eigenvalues-only solve (root-finding workhorse).
fn delta10_fast(cache: &BasisCache, omega_m0: f64, lambda: f64, v0z: f64) -> Result<f64> {
    let h = cache.assemble(omega_m0, lambda, v0z);
    let vals = linalg::eigvalsh_real(&h)?;
    Ok(vals[1] - vals[0])
}

fn delta21_fast(cache: &BasisCache, omega_m0: f64, lambda: f64, v0z: f64) -> Result<f64> {
    let h = cache.assemble(omega_m0, lambda, v0z);
    let vals = linalg::eigvalsh_real(&h)?;
    Ok(vals[2] - vals[1])
}

/// Electrode prefactor v0z that moves δ₁₀ to `target_delta10`: negative
/// (softening) for targets below the bare transition, positive (stiffening)
/// for targets above. Bisection on the monotone branch; softening is bounded
/// by the buckling threshold. Matches the target to within `TUNE_REL_TOL`
/// relative.
pub fn tune_to_frequency(p: &BeamParams, target_delta10: f64) -> Result<f64> {
    p.validate()?;
    if !(target_delta10 > 0.0 && target_delta10.is_finite()) {
        return Err(SpectrumError::BadFrequency(target_delta10));
    }
    let cache = BasisCache::new(p.basis_dim);
    let bare = delta10_fast(&cache, p.omega_m0, p.lambda, 0.0)?;
    if (target_delta10 - bare).abs() <= TUNE_REL_TOL * bare {
        return Ok(0.0);
    }
    // δ₁₀ is monotone increasing in v0z on both sides of zero; keep
    // δ10(lo) ≤ target ≤ δ10(hi) throughout.
    let mut lo;
    let mut hi;
    if target_delta10 < bare {
        // Just inside the buckling threshold.
        let v_min = -0.5 * p.omega_m0 * (1.0 - 1e-9);
        let delta_min = delta10_fast(&cache, p.omega_m0, p.lambda, v_min)?;
        if target_delta10 < delta_min {
            return Err(SpectrumError::Untunable {
                target: target_delta10,
                min: delta_min,
            });
        }
        lo = v_min;
        hi = 0.0;
    } else {
        lo = 0.0;
        hi = p.omega_m0;
        let mut doublings = 0;
        while delta10_fast(&cache, p.omega_m0, p.lambda, hi)? < target_delta10 {
            lo = hi;
            hi *= 2.0;
            doublings += 1;
            if doublings > 60 {
                return Err(SpectrumError::BracketFailed { lo, hi });
            }
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let d = delta10_fast(&cache, p.omega_m0, p.lambda, mid)?;
        if (d - target_delta10).abs() <= TUNE_REL_TOL * target_delta10 {
            return Ok(mid);
        }
        if d < target_delta10 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(SpectrumError::BracketFailed { lo, hi })
}

/// Calibrated beam parameters reproducing a target transition frequency and
/// nonlinearity at zero softening: finds (ω_m0, λ) such that δ₁₀ =
/// `delta10_target` and δ₂₁ − δ₁₀ = `nonlinearity_target`.
///
/// Nested bisection: the inner loop solves ω_m0 for the frequency at fixed λ
/// (δ₁₀ is monotone in ω_m0), the outer loop walks λ against the
/// nonlinearity (monotone in λ).
pub fn calibrate_beam(
    delta10_target: f64,
    nonlinearity_target: f64,
    basis_dim: usize,
) -> Result<BeamParams> {
    if !(delta10_target > 0.0) {
        return Err(SpectrumError::BadFrequency(delta10_target));
    }
    if !(nonlinearity_target >= 0.0) {
        return Err(SpectrumError::BadLambda(nonlinearity_target));
    }
    if basis_dim < 20 {
        return Err(SpectrumError::BasisDimTooSmall(basis_dim));
    }
    let cache = BasisCache::new(basis_dim);

    // Inner solve: ω_m0 with δ₁₀(ω_m0, λ) = delta10_target.
    let solve_omega = |lambda: f64| -> Result<f64> {
        if lambda == 0.0 {
            return Ok(delta10_target);
        }
        let mut hi = delta10_target; // quartic shift is positive, δ10(hi) > target
        let mut lo = (delta10_target - 40.0 * lambda).max(0.01 * delta10_target);
        let mut f_lo = delta10_fast(&cache, lo, lambda, 0.0)? - delta10_target;
        let mut guard = 0;
        while f_lo > 0.0 {
            lo *= 0.5;
            f_lo = delta10_fast(&cache, lo, lambda, 0.0)? - delta10_target;
            guard += 1;
            if guard > 60 {
                return Err(SpectrumError::BracketFailed { lo, hi });
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let f = delta10_fast(&cache, mid, lambda, 0.0)? - delta10_target;
            if f.abs() <= 1e-11 * delta10_target {
                return Ok(mid);
            }
            if f < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Err(SpectrumError::BracketFailed { lo, hi })
    };

    if nonlinearity_target == 0.0 {
        return BeamParams::new(delta10_target, 0.0, basis_dim);
    }

    let nonlin_at = |lambda: f64| -> Result<f64> {
        let omega = solve_omega(lambda)?;
        let d21 = delta21_fast(&cache, omega, lambda, 0.0)?;
        let d10 = delta10_fast(&cache, omega, lambda, 0.0)?;
        Ok(d21 - d10)
    };

    // Expanding bracket around the first-order guess λ ≈ nonlinearity/6.
    let mut lam_lo = nonlinearity_target / 60.0;
    let mut lam_hi = nonlinearity_target / 3.0;
    let mut guard = 0;
    while nonlin_at(lam_lo)? > nonlinearity_target {
        lam_lo *= 0.5;
        guard += 1;
        if guard > 60 {
            return Err(SpectrumError::BracketFailed {
                lo: lam_lo,
                hi: lam_hi,
            });
        }
    }
    guard = 0;
    while nonlin_at(lam_hi)? < nonlinearity_target {
        lam_hi *= 2.0;
        guard += 1;
        if guard > 60 {
            return Err(SpectrumError::BracketFailed {
                lo: lam_lo,
                hi: lam_hi,
            });
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lam_lo + lam_hi);
        let f = nonlin_at(mid)? - nonlinearity_target;
        if f.abs() <= 1e-8 * nonlinearity_target {
            let omega = solve_omega(mid)?;
            return BeamParams::new(omega, mid, basis_dim);
        }
        if f < 0.0 {
            lam_lo = mid;
        } else {
            lam_hi = mid;
        }
    }
    Err(SpectrumError::BracketFailed {
        lo: lam_lo,
        hi: lam_hi,
    })
}
