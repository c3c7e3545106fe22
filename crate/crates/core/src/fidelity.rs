//! State fidelity and gate benchmarking.
//!
//! The figure of merit throughout is the square-root fidelity
//! f(σ, ϱ) = Tr √(√ϱ σ √ϱ), not its square. Gate quality is the mean of f
//! over a fixed family of superposition states: for an N-qubit register the
//! family holds one state per computational basis label k,
//! |φ_k⟩ = (|k⟩ + |0…0⟩)/√2 for k ≠ 0 and |φ_0⟩ = |0…0⟩. Comparing the
//! evolved register against the ideal image of each member catches both
//! population transfer errors and phase errors, and leakage out of the qubit
//! subspace lowers f directly because evolved states are never renormalized.
//!
//! Register states live on a composite layout of three-level sites (two
//! qubit levels plus one leakage level per site). Helpers embed the family
//! into a larger space with a cavity mode in vacuum, and the comparison step
//! accepts reduced states with the cavity already traced out.

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::hilbert::{DensityMatrix, HilbertError, SpaceLayout};
use crate::linalg::{self, LinalgError};
use crate::C64;

pub type Result<T> = std::result::Result<T, FidelityError>;

#[derive(Debug, Error)]
pub enum FidelityError {
    #[error("state dimensions differ: {a} vs {b}")]
    DimensionMismatch { a: usize, b: usize },
    #[error("qubit count {0} outside supported range 1..=6")]
    BadQubitCount(usize),
    #[error("expected {expected} evolved states, got {got}")]
    StateCountMismatch { expected: usize, got: usize },
    #[error("target unitary is {rows}x{cols}, expected {expected}x{expected}")]
    BadTargetShape {
        rows: usize,
        cols: usize,
        expected: usize,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Hilbert(#[from] HilbertError),
}

/// Levels retained per register site; level 2 is the leakage level.
pub const SITE_LEVELS: usize = 3;

// ---------------------------------------------------------------------------
// Square-root fidelity
// ---------------------------------------------------------------------------

/// f(σ, ϱ) = Tr √(√ϱ σ √ϱ) for two density operators on the same space.
///
/// Eigenvalues below a small multiple of the largest one are clamped to
/// zero before square roots. This does two things: negative round-off
/// (−1e-15 scale) from the eigensolver or an integrator cannot produce NaN,
/// and sub-machine-precision junk eigenvalues of a near-pure state cannot
/// each contribute a spurious √(1e-16) ≈ 1e-8 to the trace. Eigenvalues a
/// state genuinely holds at the clamp scale contribute ≲1e-7 to f anyway.
/// f is symmetric in its arguments and reduces to |⟨ψ|φ⟩| for pure pairs.
pub fn uhlmann_fidelity(a: &DensityMatrix, b: &DensityMatrix) -> Result<f64> {
    const EIG_CLAMP_REL: f64 = 1e-14;
    if a.dim() != b.dim() {
        return Err(FidelityError::DimensionMismatch {
            a: a.dim(),
            b: b.dim(),
        });
    }
    let d = a.dim();
    let (vals, vecs) = linalg::eigh_hermitian(a.entries())?;
    let floor_a = vals[d - 1].max(0.0) * EIG_CLAMP_REL;
    // √a = V diag(√λ⁺) V†
    let mut sqrt_a: Array2<C64> = Array2::zeros((d, d));
    for (k, &lam) in vals.iter().enumerate() {
        if lam <= floor_a {
            continue;
        }
        let s = lam.sqrt();
        let col = vecs.column(k);
        for i in 0..d {
            let vi = col[i] * s;
            for j in 0..d {
                sqrt_a[(i, j)] += vi * col[j].conj();
            }
        }
    }
    let m = sqrt_a.dot(b.entries()).dot(&sqrt_a);
    // m is Hermitian up to round-off; symmetrize before the eigensolve.
    let mut h: Array2<C64> = Array2::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            h[(i, j)] = 0.5 * (m[(i, j)] + m[(j, i)].conj());
        }
    }
    let lam = linalg::eigvalsh(&h)?;
    let floor_m = lam[d - 1].max(0.0) * EIG_CLAMP_REL;
    Ok(lam.iter().filter(|&&l| l > floor_m).map(|&l| l.sqrt()).sum())
}

/// f(σ, ϱ) for a pure σ = |ψ⟩⟨ψ|: reduces to √⟨ψ|ϱ|ψ⟩.
pub fn fidelity_to_pure(psi: &Array1<C64>, rho: &DensityMatrix) -> Result<f64> {
    if psi.len() != rho.dim() {
        return Err(FidelityError::DimensionMismatch {
            a: psi.len(),
            b: rho.dim(),
        });
    }
    let overlap = rho.op().expectation(psi);
    Ok(overlap.re.max(0.0).sqrt())
}

// ---------------------------------------------------------------------------
// Benchmark state family
// ---------------------------------------------------------------------------

/// The 2^N-member benchmark family for an N-qubit register, stored both as
/// bit labels and as kets on the 3^N register space (qubit 0 is the most
/// significant label bit and the slowest-varying site index).
#[derive(Debug, Clone)]
pub struct BenchmarkSet {
    n_qubits: usize,
    register_layout: SpaceLayout,
    labels: Vec<usize>,
    kets: Vec<Array1<C64>>,
}

impl BenchmarkSet {
    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn len(&self) -> usize {
        self.kets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kets.is_empty()
    }

    /// Layout of the register space: N sites of dimension 3.
    pub fn register_layout(&self) -> &SpaceLayout {
        &self.register_layout
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Ket of member k on the 3^N register space.
    pub fn ket(&self, k: usize) -> &Array1<C64> {
        &self.kets[k]
    }

    /// Member k as a ket on the 2^N qubit subspace (bit-indexed).
    pub fn qubit_ket(&self, k: usize) -> Array1<C64> {
        let dim = 1 << self.n_qubits;
        let mut psi: Array1<C64> = Array1::zeros(dim);
        let label = self.labels[k];
        if label == 0 {
            psi[0] = C64::new(1.0, 0.0);
        } else {
            let amp = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
            psi[label] = amp;
            psi[0] += amp;
        }
        psi
    }

    /// Initial states on a register ⊗ cavity layout, cavity in vacuum.
    /// Site order: qubits 0..N−1, then the cavity as the last site.
    pub fn initial_states_with_cavity(&self, n_cavity: usize) -> Result<Vec<DensityMatrix>> {
        let mut dims: Vec<usize> = vec![SITE_LEVELS; self.n_qubits];
        dims.push(n_cavity);
        let layout = SpaceLayout::new(dims)?;
        let mut out = Vec::with_capacity(self.kets.len());
        for ket in &self.kets {
            let mut psi: Array1<C64> = Array1::zeros(layout.total_dim());
            for (i, &a) in ket.iter().enumerate() {
                psi[i * n_cavity] = a;
            }
            out.push(DensityMatrix::pure(&psi, layout.clone())?);
        }
        Ok(out)
    }

    /// Initial states on the bare register layout.
    pub fn initial_states(&self) -> Result<Vec<DensityMatrix>> {
        self.kets
            .iter()
            .map(|ket| DensityMatrix::pure(ket, self.register_layout.clone()).map_err(Into::into))
            .collect()
    }
}

/// Index of a bit label in the 3^N register space.
fn register_index(label: usize, n_qubits: usize) -> usize {
    let mut idx = 0;
    for q in 0..n_qubits {
        let bit = (label >> (n_qubits - 1 - q)) & 1;
        idx = idx * SITE_LEVELS + bit;
    }
    idx
}

/// Builds the benchmark family for `n_qubits` register sites.
pub fn benchmark_states(n_qubits: usize) -> Result<BenchmarkSet> {
    if n_qubits == 0 || n_qubits > 6 {
        return Err(FidelityError::BadQubitCount(n_qubits));
    }
    let register_layout = SpaceLayout::new(vec![SITE_LEVELS; n_qubits])?;
    let dim = register_layout.total_dim();
    let n_states = 1usize << n_qubits;
    let mut labels = Vec::with_capacity(n_states);
    let mut kets = Vec::with_capacity(n_states);
    for label in 0..n_states {
        let mut psi: Array1<C64> = Array1::zeros(dim);
        if label == 0 {
            psi[0] = C64::new(1.0, 0.0);
        } else {
            let amp = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
            psi[register_index(label, n_qubits)] = amp;
            psi[0] += amp;
        }
        labels.push(label);
        kets.push(psi);
    }
    Ok(BenchmarkSet {
        n_qubits,
        register_layout,
        labels,
        kets,
    })
}

// ---------------------------------------------------------------------------
// Gate error
// ---------------------------------------------------------------------------

/// Mean benchmark fidelity and the derived gate error E = 1 − F.
#[derive(Debug, Clone)]
pub struct GateErrorReport {
    pub mean_fidelity: f64,
    pub error: f64,
    pub per_state: Vec<f64>,
}

/// Embeds a 2^N qubit-subspace ket into the 3^N register space with zero
/// amplitude on every leakage level.
pub fn embed_qubit_ket(psi: &Array1<C64>, n_qubits: usize) -> Result<Array1<C64>> {
    let dim2 = 1usize << n_qubits;
    if psi.len() != dim2 {
        return Err(FidelityError::DimensionMismatch {
            a: psi.len(),
            b: dim2,
        });
    }
    let dim3 = SITE_LEVELS.pow(n_qubits as u32);
    let mut out: Array1<C64> = Array1::zeros(dim3);
    for label in 0..dim2 {
        out[register_index(label, n_qubits)] = psi[label];
    }
    Ok(out)
}

/// Benchmarks evolved register states against the ideal images of the
/// family under `target`, a 2^N×2^N unitary on the qubit subspace.
///
/// Each ideal image is embedded into the register space with zero leakage,
/// so any population the evolution leaks to level 2 lowers f; evolved states
/// are compared as-is, never renormalized. The ideal images are pure, so f
/// reduces to √⟨ψ|ϱ|ψ⟩ per state.
pub fn gate_error(
    target: &Array2<C64>,
    evolved: &[DensityMatrix],
    set: &BenchmarkSet,
) -> Result<GateErrorReport> {
    let dim2 = 1usize << set.n_qubits();
    if target.nrows() != dim2 || target.ncols() != dim2 {
        return Err(FidelityError::BadTargetShape {
            rows: target.nrows(),
            cols: target.ncols(),
            expected: dim2,
        });
    }
    if evolved.len() != set.len() {
        return Err(FidelityError::StateCountMismatch {
            expected: set.len(),
            got: evolved.len(),
        });
    }
    let dim3 = set.register_layout().total_dim();
    let mut per_state = Vec::with_capacity(set.len());
    for (k, rho) in evolved.iter().enumerate() {
        if rho.dim() != dim3 {
            return Err(FidelityError::DimensionMismatch {
                a: rho.dim(),
                b: dim3,
            });
        }
        let ideal2 = target.dot(&set.qubit_ket(k));
        let ideal3 = embed_qubit_ket(&ideal2, set.n_qubits())?;
        per_state.push(fidelity_to_pure(&ideal3, rho)?);
    }
    let mean_fidelity = per_state.iter().sum::<f64>() / per_state.len() as f64;
    Ok(GateErrorReport {
        mean_fidelity,
        error: 1.0 - mean_fidelity,
        per_state,
    })
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::hilbert::OperatorMatrix;

    fn random_density(rng: &mut ChaCha8Rng, dim: usize) -> DensityMatrix {
        // ρ = G G† / Tr(G G†) with G a random complex matrix is full rank
        // and positive with probability one.
        let mut g: Array2<C64> = Array2::zeros((dim, dim));
        for v in g.iter_mut() {
            *v = C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
        }
        let mut m = Array2::zeros((dim, dim));
        for i in 0..dim {
            for j in 0..dim {
                let mut acc = C64::new(0.0, 0.0);
                for k in 0..dim {
                    acc += g[(i, k)] * g[(j, k)].conj();
                }
                m[(i, j)] = acc;
            }
        }
        let tr: f64 = (0..dim).map(|i| m[(i, i)].re).sum();
        m.mapv_inplace(|v| v / tr);
        let layout = SpaceLayout::single(dim).unwrap();
        DensityMatrix::new(OperatorMatrix::new(layout, m).unwrap()).unwrap()
    }

    fn random_pure(rng: &mut ChaCha8Rng, dim: usize) -> (Array1<C64>, DensityMatrix) {
        let mut psi: Array1<C64> = Array1::zeros(dim);
        for v in psi.iter_mut() {
            *v = C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
        }
        let norm: f64 = psi.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        psi.mapv_inplace(|v| v / norm);
        let layout = SpaceLayout::single(dim).unwrap();
        let rho = DensityMatrix::pure(&psi, layout).unwrap();
        (psi, rho)
    }

    #[test]
    fn fidelity_of_state_with_itself_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for dim in [2, 3, 5] {
            let rho = random_density(&mut rng, dim);
            let f = uhlmann_fidelity(&rho, &rho).unwrap();
            assert_relative_eq!(f, 1.0, max_relative = 1e-9);
        }
    }

    #[test]
    fn fidelity_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for dim in [2, 4] {
            let a = random_density(&mut rng, dim);
            let b = random_density(&mut rng, dim);
            let fab = uhlmann_fidelity(&a, &b).unwrap();
            let fba = uhlmann_fidelity(&b, &a).unwrap();
            assert_relative_eq!(fab, fba, max_relative = 1e-9);
            assert!(fab > 0.0 && fab < 1.0);
        }
    }

    #[test]
    fn pure_pair_reduces_to_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for dim in [2, 3, 6] {
            let (psi, rho_psi) = random_pure(&mut rng, dim);
            let (phi, rho_phi) = random_pure(&mut rng, dim);
            let overlap = psi
                .iter()
                .zip(phi.iter())
                .map(|(a, b)| a.conj() * b)
                .sum::<C64>()
                .norm();
            let f = uhlmann_fidelity(&rho_psi, &rho_phi).unwrap();
            assert_relative_eq!(f, overlap, epsilon = 1e-10);
            let fp = fidelity_to_pure(&psi, &rho_phi).unwrap();
            assert_relative_eq!(fp, overlap, epsilon = 1e-10);
        }
    }

    #[test]
    fn orthogonal_pure_states_have_zero_fidelity() {
        let layout = SpaceLayout::single(2).unwrap();
        let zero = DensityMatrix::pure(&array![C64::new(1.0, 0.0), C64::new(0.0, 0.0)], layout.clone()).unwrap();
        let one = DensityMatrix::pure(&array![C64::new(0.0, 0.0), C64::new(1.0, 0.0)], layout).unwrap();
        let f = uhlmann_fidelity(&zero, &one).unwrap();
        assert!(f.abs() < 1e-10, "f = {f}");
    }

    #[test]
    fn ground_state_against_maximally_mixed() {
        // f(|0⟩⟨0|, 𝟙/2) = √(1/2).
        let layout = SpaceLayout::single(2).unwrap();
        let zero = DensityMatrix::pure(&array![C64::new(1.0, 0.0), C64::new(0.0, 0.0)], layout.clone()).unwrap();
        let mixed = DensityMatrix::maximally_mixed(layout);
        let f = uhlmann_fidelity(&zero, &mixed).unwrap();
        assert_relative_eq!(f, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-10);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = DensityMatrix::maximally_mixed(SpaceLayout::single(2).unwrap());
        let b = DensityMatrix::maximally_mixed(SpaceLayout::single(3).unwrap());
        assert!(matches!(
            uhlmann_fidelity(&a, &b),
            Err(FidelityError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn benchmark_family_shape_and_norms() {
        for n in 1..=4usize {
            let set = benchmark_states(n).unwrap();
            assert_eq!(set.len(), 1 << n);
            assert_eq!(set.register_layout().total_dim(), SITE_LEVELS.pow(n as u32));
            for k in 0..set.len() {
                let norm: f64 = set.ket(k).iter().map(|v| v.norm_sqr()).sum();
                assert_relative_eq!(norm, 1.0, epsilon = 1e-12);
                let qnorm: f64 = set.qubit_ket(k).iter().map(|v| v.norm_sqr()).sum();
                assert_relative_eq!(qnorm, 1.0, epsilon = 1e-12);
            }
            // Member 0 is the plain ground state, all others overlap it by 1/√2.
            assert_relative_eq!(set.ket(0)[0].re, 1.0, epsilon = 1e-12);
            for k in 1..set.len() {
                let ov = set.ket(k)[0].norm();
                assert_relative_eq!(ov, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
            }
        }
        assert!(matches!(benchmark_states(0), Err(FidelityError::BadQubitCount(0))));
        assert!(matches!(benchmark_states(7), Err(FidelityError::BadQubitCount(7))));
    }

    #[test]
    fn register_indexing_puts_qubit_zero_most_significant() {
        // Label 0b10 on two qubits: site 0 in level 1, site 1 in level 0.
        // With three levels per site that is index 1*3 + 0 = 3.
        assert_eq!(register_index(0b10, 2), 3);
        assert_eq!(register_index(0b01, 2), 1);
        assert_eq!(register_index(0b11, 2), 4);
        let set = benchmark_states(2).unwrap();
        let layout = set.register_layout();
        assert_eq!(layout.ravel(&[1, 0]), 3);
    }

    #[test]
    fn initial_states_embed_cavity_vacuum() {
        let set = benchmark_states(2).unwrap();
        let states = set.initial_states_with_cavity(4).unwrap();
        assert_eq!(states.len(), 4);
        for (k, rho) in states.iter().enumerate() {
            assert_eq!(rho.dim(), 9 * 4);
            assert_relative_eq!(rho.purity(), 1.0, epsilon = 1e-12);
            // Tracing out the cavity recovers the register member exactly.
            let reduced = rho.partial_trace(&[0, 1]).unwrap();
            let f = fidelity_to_pure(set.ket(k), &reduced).unwrap();
            assert_relative_eq!(f, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn identity_target_on_unevolved_states_has_zero_error() {
        let set = benchmark_states(2).unwrap();
        let states = set.initial_states().unwrap();
        let eye: Array2<C64> = Array2::eye(4);
        let report = gate_error(&eye, &states, &set).unwrap();
        assert!(report.error.abs() < 1e-12, "E = {}", report.error);
        for f in &report.per_state {
            assert_relative_eq!(*f, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn depolarized_register_scores_half() {
        // Fully mixed qubit subspace embedded with zero leakage:
        // ⟨ψ|ϱ|ψ⟩ = 1/4 for every pure qubit-subspace target, so f = 1/2.
        let set = benchmark_states(2).unwrap();
        let dim3 = set.register_layout().total_dim();
        let mut m: Array2<C64> = Array2::zeros((dim3, dim3));
        for label in 0..4 {
            let idx = register_index(label, 2);
            m[(idx, idx)] = C64::new(0.25, 0.0);
        }
        let rho = DensityMatrix::new(
            OperatorMatrix::new(set.register_layout().clone(), m).unwrap(),
        )
        .unwrap();
        let states = vec![rho; 4];
        let eye: Array2<C64> = Array2::eye(4);
        let report = gate_error(&eye, &states, &set).unwrap();
        assert_relative_eq!(report.mean_fidelity, 0.5, epsilon = 1e-12);
        assert_relative_eq!(report.error, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn leakage_lowers_fidelity_without_renormalization() {
        // Moving weight ε from the qubit subspace to a leakage level should
        // cost fidelity ≈ ε/2 for the affected member, not be hidden by
        // renormalization.
        let set = benchmark_states(1).unwrap();
        let eps = 1e-2;
        let mut m: Array2<C64> = Array2::zeros((3, 3));
        m[(0, 0)] = C64::new(1.0 - eps, 0.0);
        m[(2, 2)] = C64::new(eps, 0.0);
        let leaked = DensityMatrix::new(
            OperatorMatrix::new(set.register_layout().clone(), m).unwrap(),
        )
        .unwrap();
        let ground = set.initial_states().unwrap()[0].clone();
        let eye: Array2<C64> = Array2::eye(2);
        let report = gate_error(&eye, &[leaked, ground], &set).unwrap();
        let expected_f0 = (1.0 - eps).sqrt();
        assert_relative_eq!(report.per_state[0], expected_f0, epsilon = 1e-12);
        assert!(report.error > eps / 4.0);
    }

    #[test]
    fn state_count_mismatch_is_rejected() {
        let set = benchmark_states(2).unwrap();
        let states = set.initial_states().unwrap();
        let eye: Array2<C64> = Array2::eye(4);
        assert!(matches!(
            gate_error(&eye, &states[..3], &set),
            Err(FidelityError::StateCountMismatch { expected: 4, got: 3 })
        ));
        let bad: Array2<C64> = Array2::eye(3);
        assert!(matches!(
            gate_error(&bad, &states, &set),
            Err(FidelityError::BadTargetShape { .. })
        ));
    }
}
