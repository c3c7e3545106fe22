//! Tensor-product spaces of truncated bosonic sites and dense operators on
//! them.
//!
//! A composite space is an ordered list of site dimensions, qubits first and
//! cavity last. Row/column indices factorize mixed-radix with the *last* site
//! varying fastest, i.e. `embed(a, 0) · embed(b, 1)` equals `a ⊗ b` in the
//! conventional Kronecker order.

use ndarray::prelude::*;
use thiserror::Error;

use crate::linalg;
use crate::C64;

pub type Result<T> = std::result::Result<T, HilbertError>;

#[derive(Debug, Error)]
pub enum HilbertError {
    #[error("every site dimension must be at least 2, got {0:?}")]
    SiteDimTooSmall(Vec<usize>),
    #[error("layout has no sites")]
    EmptyLayout,
    #[error("site index {site} out of range for {n_sites} sites")]
    SiteOutOfRange { site: usize, n_sites: usize },
    #[error("matrix is {rows}x{cols}, expected {expected}x{expected}")]
    DimensionMismatch {
        rows: usize,
        cols: usize,
        expected: usize,
    },
    #[error("operands live on different layouts: {0:?} vs {1:?}")]
    LayoutMismatch(Vec<usize>, Vec<usize>),
    #[error("matrix is not Hermitian: max|A - A†| = {dev:.3e} exceeds {tol:.3e}")]
    NotHermitian { dev: f64, tol: f64 },
    #[error("trace deviates from 1 by {dev:.3e}, tolerance {tol:.1e}")]
    BadTrace { dev: f64, tol: f64 },
    #[error("state has eigenvalue {min_eig:.3e} below the -{tol:.1e} floor")]
    NotPositive { min_eig: f64, tol: f64 },
    #[error("state vector norm is {norm}, expected 1")]
    BadNorm { norm: f64 },
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

/// Trace tolerance for density matrices.
pub const TRACE_TOL: f64 = 1e-9;
/// Relative Hermiticity tolerance for operators required to be Hermitian.
pub const HERMITICITY_TOL: f64 = 1e-12;
/// Eigenvalue floor for freshly constructed density matrices.
pub const POSITIVITY_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// SpaceLayout
// ---------------------------------------------------------------------------

/// Ordered site dimensions of a composite space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpaceLayout {
    site_dims: Vec<usize>,
}

impl SpaceLayout {
    pub fn new(site_dims: Vec<usize>) -> Result<Self> {
        if site_dims.is_empty() {
            return Err(HilbertError::EmptyLayout);
        }
        if site_dims.iter().any(|&d| d < 2) {
            return Err(HilbertError::SiteDimTooSmall(site_dims));
        }
        Ok(Self { site_dims })
    }

    /// Single-site layout, for local operators.
    pub fn single(dim: usize) -> Result<Self> {
        Self::new(vec![dim])
    }

    pub fn site_dims(&self) -> &[usize] {
        &self.site_dims
    }

    pub fn n_sites(&self) -> usize {
        self.site_dims.len()
    }

    pub fn site_dim(&self, site: usize) -> usize {
        self.site_dims[site]
    }

    pub fn total_dim(&self) -> usize {
        self.site_dims.iter().product()
    }

    /// Product of the dimensions of all sites before `site`.
    pub fn dim_before(&self, site: usize) -> usize {
        self.site_dims[..site].iter().product()
    }

    /// Product of the dimensions of all sites after `site`.
    pub fn dim_after(&self, site: usize) -> usize {
        self.site_dims[site + 1..].iter().product()
    }

    fn check_site(&self, site: usize) -> Result<()> {
        if site >= self.n_sites() {
            return Err(HilbertError::SiteOutOfRange {
                site,
                n_sites: self.n_sites(),
            });
        }
        Ok(())
    }

    /// Decomposes a composite index into per-site indices.
    pub fn unravel(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.n_sites()];
        for (k, &d) in self.site_dims.iter().enumerate().rev() {
            out[k] = index % d;
            index /= d;
        }
        out
    }

    /// Composes per-site indices into a composite index.
    pub fn ravel(&self, indices: &[usize]) -> usize {
        let mut idx = 0;
        for (k, &d) in self.site_dims.iter().enumerate() {
            idx = idx * d + indices[k];
        }
        idx
    }
}

// ---------------------------------------------------------------------------
// OperatorMatrix
// ---------------------------------------------------------------------------

/// Dense operator on a composite space.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMatrix {
    layout: SpaceLayout,
    entries: Array2<C64>,
}

impl OperatorMatrix {
    pub fn new(layout: SpaceLayout, entries: Array2<C64>) -> Result<Self> {
        let d = layout.total_dim();
        if entries.nrows() != d || entries.ncols() != d {
            return Err(HilbertError::DimensionMismatch {
                rows: entries.nrows(),
                cols: entries.ncols(),
                expected: d,
            });
        }
        Ok(Self { layout, entries })
    }

    pub fn zeros(layout: SpaceLayout) -> Self {
        let d = layout.total_dim();
        Self {
            layout,
            entries: Array2::zeros((d, d)),
        }
    }

    pub fn identity(layout: SpaceLayout) -> Self {
        let d = layout.total_dim();
        Self {
            layout,
            entries: Array2::eye(d),
        }
    }

    /// Diagonal operator from real entries.
    pub fn from_real_diag(layout: SpaceLayout, diag: &[f64]) -> Result<Self> {
        let d = layout.total_dim();
        if diag.len() != d {
            return Err(HilbertError::DimensionMismatch {
                rows: diag.len(),
                cols: 1,
                expected: d,
            });
        }
        let mut m = Array2::zeros((d, d));
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = C64::new(v, 0.0);
        }
        Ok(Self { layout, entries: m })
    }

    pub fn layout(&self) -> &SpaceLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.total_dim()
    }

    pub fn entries(&self) -> &Array2<C64> {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut Array2<C64> {
        &mut self.entries
    }

    pub fn into_entries(self) -> Array2<C64> {
        self.entries
    }

    pub fn adjoint(&self) -> Self {
        let mut out = Array2::zeros(self.entries.raw_dim());
        for ((i, j), v) in self.entries.indexed_iter() {
            out[(j, i)] = v.conj();
        }
        Self {
            layout: self.layout.clone(),
            entries: out,
        }
    }

    fn check_same_layout(&self, other: &Self) -> Result<()> {
        if self.layout != other.layout {
            return Err(HilbertError::LayoutMismatch(
                self.layout.site_dims.clone(),
                other.layout.site_dims.clone(),
            ));
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.check_same_layout(other)?;
        Ok(Self {
            layout: self.layout.clone(),
            entries: self.entries.dot(&other.entries),
        })
    }

    /// [A, B] = AB − BA.
    pub fn commutator(&self, other: &Self) -> Result<Self> {
        self.check_same_layout(other)?;
        let ab = self.entries.dot(&other.entries);
        let ba = other.entries.dot(&self.entries);
        Ok(Self {
            layout: self.layout.clone(),
            entries: ab - ba,
        })
    }

    pub fn scaled(&self, c: C64) -> Self {
        Self {
            layout: self.layout.clone(),
            entries: self.entries.mapv(|v| v * c),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_layout(other)?;
        Ok(Self {
            layout: self.layout.clone(),
            entries: &self.entries + &other.entries,
        })
    }

    pub fn trace(&self) -> C64 {
        self.entries.diag().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.norm()))
    }

    /// max |A − A†| over all entries.
    pub fn hermiticity_deviation(&self) -> f64 {
        let mut dev = 0.0_f64;
        let n = self.entries.nrows();
        for i in 0..n {
            for j in i..n {
                let d = (self.entries[(i, j)] - self.entries[(j, i)].conj()).norm();
                dev = dev.max(d);
            }
        }
        dev
    }

    /// Errors unless max|A − A†| < tol_rel · max|A|.
    pub fn require_hermitian(&self, tol_rel: f64) -> Result<()> {
        let dev = self.hermiticity_deviation();
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        if dev >= tol_rel * scale {
            return Err(HilbertError::NotHermitian {
                dev,
                tol: tol_rel * scale,
            });
        }
        Ok(())
    }

    /// ⟨ψ|A|ψ⟩ for a state vector.
    pub fn expectation(&self, psi: &Array1<C64>) -> C64 {
        let a_psi = self.entries.dot(psi);
        psi.iter()
            .zip(a_psi.iter())
            .map(|(p, ap)| p.conj() * ap)
            .sum()
    }
}

// ---------------------------------------------------------------------------
// Ladder and quadrature operators
// ---------------------------------------------------------------------------

/// Truncated annihilation operator b with ⟨n−1|b|n⟩ = √n.
pub fn annihilation(dim: usize) -> OperatorMatrix {
    let layout = SpaceLayout::single(dim).expect("dim >= 2");
    let mut m = Array2::zeros((dim, dim));
    for n in 1..dim {
        m[(n - 1, n)] = C64::new((n as f64).sqrt(), 0.0);
    }
    OperatorMatrix { layout, entries: m }
}

/// Truncated creation operator b†.
pub fn creation(dim: usize) -> OperatorMatrix {
    annihilation(dim).adjoint()
}

/// Number operator b†b with exact integer diagonal.
pub fn number(dim: usize) -> OperatorMatrix {
    let layout = SpaceLayout::single(dim).expect("dim >= 2");
    let diag: Vec<f64> = (0..dim).map(|n| n as f64).collect();
    OperatorMatrix::from_real_diag(layout, &diag).expect("sized to layout")
}

/// Deflection quadrature X = (b + b†)/√2.
pub fn quadrature_x(dim: usize) -> OperatorMatrix {
    let b = annihilation(dim);
    let bd = creation(dim);
    b.add(&bd).expect("same layout").scaled(C64::new(1.0 / 2.0_f64.sqrt(), 0.0))
}

// ---------------------------------------------------------------------------
// Embedding and partial trace
// ---------------------------------------------------------------------------

/// Embeds a single-site operator at `site` into the composite space:
/// I ⊗ … ⊗ a ⊗ … ⊗ I.
pub fn embed(local: &OperatorMatrix, site: usize, layout: &SpaceLayout) -> Result<OperatorMatrix> {
    layout.check_site(site)?;
    let m = layout.site_dim(site);
    if local.dim() != m {
        return Err(HilbertError::DimensionMismatch {
            rows: local.dim(),
            cols: local.dim(),
            expected: m,
        });
    }
    let pre = layout.dim_before(site);
    let post = layout.dim_after(site);
    let d = layout.total_dim();
    let mut out = Array2::zeros((d, d));
    let a = local.entries();
    for p in 0..pre {
        for i in 0..m {
            for j in 0..m {
                let v = a[(i, j)];
                if v == C64::new(0.0, 0.0) {
                    continue;
                }
                let row0 = (p * m + i) * post;
                let col0 = (p * m + j) * post;
                for q in 0..post {
                    out[(row0 + q, col0 + q)] = v;
                }
            }
        }
    }
    OperatorMatrix::new(layout.clone(), out)
}

/// Embeds a two-site product a ⊗ b acting on distinct sites.
pub fn embed_pair(
    a: &OperatorMatrix,
    site_a: usize,
    b: &OperatorMatrix,
    site_b: usize,
    layout: &SpaceLayout,
) -> Result<OperatorMatrix> {
    embed(a, site_a, layout)?.matmul(&embed(b, site_b, layout)?)
}

/// Traces out all sites not listed in `keep`, preserving the order of the
/// kept sites. The result lives on the reduced layout.
pub fn partial_trace(op: &OperatorMatrix, keep: &[usize]) -> Result<OperatorMatrix> {
    let layout = op.layout();
    for &s in keep {
        layout.check_site(s)?;
    }
    let mut keep_sorted = keep.to_vec();
    keep_sorted.sort_unstable();
    keep_sorted.dedup();

    let kept_dims: Vec<usize> = keep_sorted.iter().map(|&s| layout.site_dim(s)).collect();
    let reduced = SpaceLayout::new(kept_dims)?;
    let dr = reduced.total_dim();
    let traced: Vec<usize> = (0..layout.n_sites())
        .filter(|s| !keep_sorted.contains(s))
        .collect();
    let dt: usize = traced.iter().map(|&s| layout.site_dim(s)).product();

    let mut out = Array2::<C64>::zeros((dr, dr));
    let n_sites = layout.n_sites();
    let mut full_row = vec![0usize; n_sites];
    let mut full_col = vec![0usize; n_sites];
    for r in 0..dr {
        let kr = reduced.unravel(r);
        for c in 0..dr {
            let kc = reduced.unravel(c);
            let mut acc = C64::new(0.0, 0.0);
            for t in 0..dt {
                // Same traced indices on rows and columns.
                let mut rem = t;
                for &s in traced.iter().rev() {
                    let d = layout.site_dim(s);
                    full_row[s] = rem % d;
                    full_col[s] = rem % d;
                    rem /= d;
                }
                for (k, &s) in keep_sorted.iter().enumerate() {
                    full_row[s] = kr[k];
                    full_col[s] = kc[k];
                }
                acc += op.entries()[(layout.ravel(&full_row), layout.ravel(&full_col))];
            }
            out[(r, c)] = acc;
        }
    }
    OperatorMatrix::new(reduced, out)
}

// ---------------------------------------------------------------------------
// DensityMatrix
// ---------------------------------------------------------------------------

/// Density matrix: Hermitian, unit trace, positive semidefinite.
///
/// Construction checks Hermiticity and trace; the eigenvalue floor is checked
/// by [`DensityMatrix::check_positivity`], which the integrator invokes at
/// segment boundaries rather than every step (a full eigendecomposition per
/// step would dominate the run).
#[derive(Debug, Clone)]
pub struct DensityMatrix {
    op: OperatorMatrix,
}

impl DensityMatrix {
    pub fn new(op: OperatorMatrix) -> Result<Self> {
        op.require_hermitian(1e-10)?;
        let dev = (op.trace() - C64::new(1.0, 0.0)).norm();
        if dev >= TRACE_TOL {
            return Err(HilbertError::BadTrace {
                dev,
                tol: TRACE_TOL,
            });
        }
        Ok(Self { op })
    }

    /// Builds |ψ⟩⟨ψ| from a normalized state vector.
    pub fn pure(psi: &Array1<C64>, layout: SpaceLayout) -> Result<Self> {
        let d = layout.total_dim();
        if psi.len() != d {
            return Err(HilbertError::DimensionMismatch {
                rows: psi.len(),
                cols: 1,
                expected: d,
            });
        }
        let norm: f64 = psi.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        if (norm - 1.0).abs() >= 1e-9 {
            return Err(HilbertError::BadNorm { norm });
        }
        let mut m = Array2::zeros((d, d));
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] = psi[i] * psi[j].conj();
            }
        }
        Ok(Self {
            op: OperatorMatrix::new(layout, m)?,
        })
    }

    /// Ground state |0…0⟩⟨0…0| of the composite space.
    pub fn vacuum(layout: SpaceLayout) -> Self {
        let d = layout.total_dim();
        let mut m = Array2::zeros((d, d));
        m[(0, 0)] = C64::new(1.0, 0.0);
        Self {
            op: OperatorMatrix { layout, entries: m },
        }
    }

    pub fn maximally_mixed(layout: SpaceLayout) -> Self {
        let d = layout.total_dim();
        let diag = vec![1.0 / d as f64; d];
        Self {
            op: OperatorMatrix::from_real_diag(layout, &diag).expect("sized"),
        }
    }

    /// Wraps entries that are trusted to satisfy the invariants already
    /// (integrator internals); callers outside the crate use `new`.
    pub(crate) fn from_trusted(op: OperatorMatrix) -> Self {
        Self { op }
    }

    pub fn op(&self) -> &OperatorMatrix {
        &self.op
    }

    pub fn layout(&self) -> &SpaceLayout {
        self.op.layout()
    }

    pub fn entries(&self) -> &Array2<C64> {
        self.op.entries()
    }

    pub fn dim(&self) -> usize {
        self.op.dim()
    }

    /// Tr ρ² (= squared Frobenius norm for Hermitian ρ).
    pub fn purity(&self) -> f64 {
        self.op.entries.iter().map(|v| v.norm_sqr()).sum()
    }

    /// Real diagonal.
    pub fn populations(&self) -> Array1<f64> {
        self.op.entries.diag().mapv(|v| v.re)
    }

    /// Smallest eigenvalue; errors if below −tol.
    pub fn check_positivity(&self, tol: f64) -> Result<f64> {
        let min_eig = linalg::min_eigenvalue(self.op.entries())?;
        if min_eig < -tol {
            return Err(HilbertError::NotPositive { min_eig, tol });
        }
        Ok(min_eig)
    }

    pub fn partial_trace(&self, keep: &[usize]) -> Result<DensityMatrix> {
        let reduced = partial_trace(&self.op, keep)?;
        Ok(DensityMatrix { op: reduced })
    }

    /// Tr(ρA).
    pub fn expectation(&self, a: &OperatorMatrix) -> Result<C64> {
        self.op.check_same_layout(a)?;
        let mut acc = C64::new(0.0, 0.0);
        for i in 0..self.dim() {
            for j in 0..self.dim() {
                acc += self.op.entries[(i, j)] * a.entries[(j, i)];
            }
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn random_state(rng: &mut ChaCha8Rng, d: usize) -> Array1<C64> {
        let mut v: Array1<C64> = Array1::from_shape_fn(d, |_| {
            c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        });
        let n: f64 = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        v.mapv_inplace(|z| z / n);
        v
    }

    fn random_density(rng: &mut ChaCha8Rng, layout: &SpaceLayout) -> DensityMatrix {
        // Mixture of a few random pure states.
        let d = layout.total_dim();
        let mut m = Array2::<C64>::zeros((d, d));
        let weights = [0.5, 0.3, 0.2];
        for &w in &weights {
            let psi = random_state(rng, d);
            for i in 0..d {
                for j in 0..d {
                    m[(i, j)] += psi[i] * psi[j].conj() * w;
                }
            }
        }
        DensityMatrix::new(OperatorMatrix::new(layout.clone(), m).unwrap()).unwrap()
    }

    #[test]
    fn layout_rejects_trivial_sites() {
        assert!(SpaceLayout::new(vec![3, 1, 5]).is_err());
        assert!(SpaceLayout::new(vec![]).is_err());
        let l = SpaceLayout::new(vec![3, 3, 5]).unwrap();
        assert_eq!(l.total_dim(), 45);
        assert_eq!(l.dim_before(1), 3);
        assert_eq!(l.dim_after(1), 5);
    }

    #[test]
    fn ravel_unravel_roundtrip() {
        let l = SpaceLayout::new(vec![3, 2, 5]).unwrap();
        for idx in 0..l.total_dim() {
            assert_eq!(l.ravel(&l.unravel(idx)), idx);
        }
        // Last site varies fastest.
        assert_eq!(l.unravel(1), vec![0, 0, 1]);
        assert_eq!(l.unravel(5), vec![0, 1, 0]);
    }

    #[test]
    fn ladder_matrix_elements() {
        let b = annihilation(3);
        assert_eq!(b.entries()[(0, 1)], c(1.0, 0.0));
        assert_eq!(b.entries()[(1, 2)], c(2.0_f64.sqrt(), 0.0));
        assert_eq!(b.entries()[(1, 0)], c(0.0, 0.0));
        // b†b reproduces the number operator on the retained space.
        let n = creation(3).matmul(&b).unwrap();
        for k in 0..3 {
            assert_relative_eq!(n.entries()[(k, k)].re, k as f64, max_relative = 4.0 * f64::EPSILON);
        }
    }

    #[test]
    fn commutator_corner_rule() {
        // [b, b†] = I on a truncated space except the corner entry, which is
        // 1 − dim. Entries are products of square roots, so the comparison
        // allows a few ulp of rounding.
        for dim in [2usize, 3, 7, 16] {
            let b = annihilation(dim);
            let comm = b.commutator(&creation(dim)).unwrap();
            for i in 0..dim {
                for j in 0..dim {
                    let expected = if i == j {
                        if i == dim - 1 {
                            1.0 - dim as f64
                        } else {
                            1.0
                        }
                    } else {
                        0.0
                    };
                    let v = comm.entries()[(i, j)];
                    assert!(
                        (v.re - expected).abs() <= 4.0 * f64::EPSILON * dim as f64
                            && v.im == 0.0,
                        "dim {dim} entry ({i},{j}) = {v}, expected {expected}"
                    );
                }
            }
        }
    }

    #[test]
    fn quadrature_harmonic_elements() {
        let x = quadrature_x(4);
        assert_relative_eq!(x.entries()[(0, 1)].re, 1.0 / 2.0_f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(x.entries()[(1, 2)].re, 1.0, epsilon = 1e-15);
        assert_eq!(x.hermiticity_deviation(), 0.0);
    }

    #[test]
    fn embed_identity_is_identity() {
        let l = SpaceLayout::new(vec![3, 5]).unwrap();
        let id3 = OperatorMatrix::identity(SpaceLayout::single(3).unwrap());
        let full = embed(&id3, 0, &l).unwrap();
        assert_eq!(full.entries(), OperatorMatrix::identity(l).entries());
    }

    #[test]
    fn embed_matches_kron_order() {
        // embed(a,0)·embed(b,1) applied to |i,j⟩ must equal (a|i⟩)⊗(b|j⟩).
        let l = SpaceLayout::new(vec![2, 3]).unwrap();
        let mut a = OperatorMatrix::zeros(SpaceLayout::single(2).unwrap());
        a.entries_mut()[(1, 0)] = c(1.0, 0.0); // |1⟩⟨0|
        let mut b = OperatorMatrix::zeros(SpaceLayout::single(3).unwrap());
        b.entries_mut()[(2, 1)] = c(1.0, 0.0); // |2⟩⟨1|
        let ab = embed_pair(&a, 0, &b, 1, &l).unwrap();
        // |0,1⟩ is index 1; |1,2⟩ is index 5.
        assert_eq!(ab.entries()[(5, 1)], c(1.0, 0.0));
        let total: f64 = ab.entries().iter().map(|v| v.norm()).sum();
        assert_eq!(total, 1.0);
    }

    #[test]
    fn embedded_disjoint_sites_commute() {
        let l = SpaceLayout::new(vec![3, 3, 5]).unwrap();
        let x = quadrature_x(3);
        let a = annihilation(5);
        let xa = embed(&x, 0, &l).unwrap();
        let af = embed(&a, 2, &l).unwrap();
        let comm = xa.commutator(&af).unwrap();
        assert_eq!(comm.max_abs(), 0.0);
    }

    #[test]
    fn embed_preserves_hermiticity_and_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let l = SpaceLayout::new(vec![3, 4]).unwrap();
        for site in 0..2 {
            let m = l.site_dim(site);
            // Random Hermitian local operator.
            let mut a = Array2::<C64>::zeros((m, m));
            for i in 0..m {
                for j in 0..m {
                    a[(i, j)] = c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
                }
            }
            let a = {
                let ad = a.t().mapv(|v| v.conj());
                (&a + &ad).mapv(|v| v * 0.5)
            };
            let local = OperatorMatrix::new(SpaceLayout::single(m).unwrap(), a).unwrap();
            let full = embed(&local, site, &l).unwrap();
            assert!(full.hermiticity_deviation() < 1e-14);
            // Spectral norm is preserved by tensoring with identity.
            let ev_local = linalg::eigvalsh(local.entries()).unwrap();
            let ev_full = linalg::eigvalsh(full.entries()).unwrap();
            let norm_local = ev_local.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
            let norm_full = ev_full.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
            assert_relative_eq!(norm_local, norm_full, epsilon = 1e-12);
        }
    }

    #[test]
    fn partial_trace_of_product_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let la = SpaceLayout::single(3).unwrap();
        let lb = SpaceLayout::single(4).unwrap();
        let full_layout = SpaceLayout::new(vec![3, 4]).unwrap();
        let rho_a = random_density(&mut rng, &la);
        let rho_b = random_density(&mut rng, &lb);
        // ρ_A ⊗ ρ_B assembled by explicit Kronecker product.
        let mut m = Array2::<C64>::zeros((12, 12));
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..4 {
                    for l in 0..4 {
                        m[(i * 4 + k, j * 4 + l)] =
                            rho_a.entries()[(i, j)] * rho_b.entries()[(k, l)];
                    }
                }
            }
        }
        let rho = DensityMatrix::new(OperatorMatrix::new(full_layout, m).unwrap()).unwrap();
        let back_a = rho.partial_trace(&[0]).unwrap();
        let back_b = rho.partial_trace(&[1]).unwrap();
        for (x, y) in back_a.entries().iter().zip(rho_a.entries().iter()) {
            assert!((x - y).norm() < 1e-12);
        }
        for (x, y) in back_b.entries().iter().zip(rho_b.entries().iter()) {
            assert!((x - y).norm() < 1e-12);
        }
    }

    #[test]
    fn partial_trace_of_bell_state() {
        let l = SpaceLayout::new(vec![2, 2]).unwrap();
        let mut psi = Array1::zeros(4);
        psi[0] = c(1.0 / 2.0_f64.sqrt(), 0.0); // |00⟩
        psi[3] = c(1.0 / 2.0_f64.sqrt(), 0.0); // |11⟩
        let rho = DensityMatrix::pure(&psi, l).unwrap();
        let red = rho.partial_trace(&[0]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expected = if i == j { 0.5 } else { 0.0 };
                assert_relative_eq!(red.entries()[(i, j)].re, expected, epsilon = 1e-12);
                assert_relative_eq!(red.entries()[(i, j)].im, 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn partial_trace_keep_all_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = SpaceLayout::new(vec![2, 3]).unwrap();
        let rho = random_density(&mut rng, &l);
        let same = rho.partial_trace(&[0, 1]).unwrap();
        for (x, y) in same.entries().iter().zip(rho.entries().iter()) {
            assert!((x - y).norm() < 1e-14);
        }
    }

    #[test]
    fn partial_trace_linear_and_trace_preserving() {
        // Property over 100+ random states on random 2- and 3-site layouts.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let layouts = [
            SpaceLayout::new(vec![2, 3]).unwrap(),
            SpaceLayout::new(vec![3, 2, 2]).unwrap(),
            SpaceLayout::new(vec![2, 2, 4]).unwrap(),
        ];
        let mut checked = 0;
        for layout in &layouts {
            let n = layout.n_sites();
            for trial in 0..35 {
                let keep: Vec<usize> = (0..n).filter(|_| rng.random::<bool>()).collect();
                let keep = if keep.is_empty() || keep.len() == n {
                    vec![trial % n]
                } else {
                    keep
                };
                let r1 = random_density(&mut rng, layout);
                let r2 = random_density(&mut rng, layout);
                let w = rng.random::<f64>();
                // Trace preservation.
                let t1 = partial_trace(r1.op(), &keep).unwrap();
                assert_relative_eq!(t1.trace().re, 1.0, epsilon = 1e-10);
                assert_relative_eq!(t1.trace().im, 0.0, epsilon = 1e-10);
                // Linearity: Tr_k(w·ρ1 + (1−w)·ρ2) = w·Tr_k ρ1 + (1−w)·Tr_k ρ2.
                let mix = r1
                    .op()
                    .scaled(c(w, 0.0))
                    .add(&r2.op().scaled(c(1.0 - w, 0.0)))
                    .unwrap();
                let lhs = partial_trace(&mix, &keep).unwrap();
                let t2 = partial_trace(r2.op(), &keep).unwrap();
                let rhs = t1.scaled(c(w, 0.0)).add(&t2.scaled(c(1.0 - w, 0.0))).unwrap();
                for (x, y) in lhs.entries().iter().zip(rhs.entries().iter()) {
                    assert!((x - y).norm() < 1e-12);
                }
                checked += 1;
            }
        }
        assert!(checked >= 100);
    }

    #[test]
    fn density_matrix_validation() {
        let l = SpaceLayout::single(2).unwrap();
        // Non-unit trace rejected.
        let bad = OperatorMatrix::from_real_diag(l.clone(), &[0.6, 0.6]).unwrap();
        assert!(matches!(
            DensityMatrix::new(bad),
            Err(HilbertError::BadTrace { .. })
        ));
        // Non-Hermitian rejected.
        let mut m = Array2::<C64>::zeros((2, 2));
        m[(0, 0)] = c(1.0, 0.0);
        m[(0, 1)] = c(0.2, 0.0);
        let bad = OperatorMatrix::new(l.clone(), m).unwrap();
        assert!(matches!(
            DensityMatrix::new(bad),
            Err(HilbertError::NotHermitian { .. })
        ));
        // Valid state passes and reports sane purity.
        let rho = DensityMatrix::maximally_mixed(l);
        assert_relative_eq!(rho.purity(), 0.5, epsilon = 1e-14);
        assert!(rho.check_positivity(POSITIVITY_TOL).is_ok());
    }

    #[test]
    fn expectation_values() {
        let l = SpaceLayout::single(3).unwrap();
        let mut psi = Array1::zeros(3);
        psi[1] = c(1.0, 0.0);
        let rho = DensityMatrix::pure(&psi, l.clone()).unwrap();
        let n = number(3);
        assert_relative_eq!(rho.expectation(&n).unwrap().re, 1.0, epsilon = 1e-14);
        assert_relative_eq!(n.expectation(&psi).re, 1.0, epsilon = 1e-14);
    }
}
