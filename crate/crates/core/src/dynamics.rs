//! Lindblad master-equation integration with time-dependent Hamiltonian
//! schedules on the truncated qubits-plus-cavity space.
//!
//! The equation of motion is
//!
//!   ϱ̇ = −i[H(t), ϱ] + Σ_k (rate_k/2)·D_k(ϱ),
//!
//! with D↓(y)ϱ = 2yϱy† − y†yϱ − ϱy†y and D↑(y)ϱ = 2y†ϱy − yy†ϱ − ϱyy†.
//!
//! Two right-hand-side paths exist: a dense reference (`lindblad_rhs`, plain
//! matrix products, used by tests and small systems) and a structured engine
//! that exploits the tensor-product form of H and site-local jump operators.
//! Both are exercised against each other in the test suite; the integrator
//! picks the structured path whenever the segment provides it.
//!
//! Integration uses an embedded Dormand-Prince 5(4) pair with PI step
//! control. Within a segment the Hamiltonian is evaluated at integrator stage
//! times, so carrier oscillations are resolved, not averaged.

use ndarray::prelude::*;
use thiserror::Error;

use crate::hilbert::{DensityMatrix, HilbertError, OperatorMatrix, SpaceLayout};
use crate::C64;

pub type Result<T> = std::result::Result<T, DynamicsError>;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("dissipator rate must be non-negative, got {0}")]
    NegativeRate(f64),
    #[error("tolerance {0:.3e} outside [1e-12, 1e-4]")]
    BadTolerance(f64),
    #[error("schedule has no segments")]
    EmptySchedule,
    #[error("segment duration must be positive and finite, got {0}")]
    BadDuration(f64),
    #[error("operands live on different layouts")]
    LayoutMismatch,
    #[error("site {site} out of range for layout with {n_sites} sites")]
    SiteOutOfRange { site: usize, n_sites: usize },
    #[error("operator for site {site} is {got}x{got}, site dimension is {want}")]
    SiteDimMismatch { site: usize, got: usize, want: usize },
    #[error("Hamiltonian not Hermitian (segment '{label}'): deviation {dev:.3e}")]
    NotHermitian { label: String, dev: f64 },
    #[error("step size underflow at t = {t:.6e} s (h = {h:.3e} s): problem too stiff for this integrator")]
    StepSizeUnderflow { t: f64, h: f64 },
    #[error("exceeded {max_steps} steps at t = {t:.6e} s")]
    MaxStepsExceeded { t: f64, max_steps: u64 },
    #[error("trace drifted to 1{dev:+.3e} at t = {t:.6e} s")]
    TraceDrift { t: f64, dev: f64 },
    #[error("state lost positivity at t = {t:.6e} s: min eigenvalue/population {min_eig:.3e}")]
    PositivityViolation { t: f64, min_eig: f64 },
    #[error(transparent)]
    Hilbert(#[from] HilbertError),
}

// ---------------------------------------------------------------------------
// Dissipators
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// D↓(y) = 2yϱy† − y†yϱ − ϱy†y (decay).
    Down,
    /// D↑(y) = 2y†ϱy − yy†ϱ − ϱyy† (excitation).
    Up,
}

/// Jump operator: dense on the full space, or a single-site block that the
/// fast path applies without ever materializing the embedding.
#[derive(Debug, Clone)]
pub enum JumpOperator {
    Dense(OperatorMatrix),
    SiteLocal {
        layout: SpaceLayout,
        site: usize,
        matrix: Array2<C64>,
    },
}

#[derive(Debug, Clone)]
pub struct Dissipator {
    operator: JumpOperator,
    rate: f64,
    direction: Direction,
}

impl Dissipator {
    pub fn new(operator: JumpOperator, rate: f64, direction: Direction) -> Result<Self> {
        if !(rate >= 0.0) {
            return Err(DynamicsError::NegativeRate(rate));
        }
        if let JumpOperator::SiteLocal {
            layout,
            site,
            matrix,
        } = &operator
        {
            check_site_matrix(layout, *site, matrix)?;
        }
        Ok(Self {
            operator,
            rate,
            direction,
        })
    }

    pub fn down(operator: OperatorMatrix, rate: f64) -> Result<Self> {
        Self::new(JumpOperator::Dense(operator), rate, Direction::Down)
    }

    pub fn up(operator: OperatorMatrix, rate: f64) -> Result<Self> {
        Self::new(JumpOperator::Dense(operator), rate, Direction::Up)
    }

    pub fn site_local(
        layout: &SpaceLayout,
        site: usize,
        matrix: Array2<C64>,
        rate: f64,
        direction: Direction,
    ) -> Result<Self> {
        Self::new(
            JumpOperator::SiteLocal {
                layout: layout.clone(),
                site,
                matrix,
            },
            rate,
            direction,
        )
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn operator(&self) -> &JumpOperator {
        &self.operator
    }

    /// Dense form of the jump operator on the full space.
    pub fn operator_matrix(&self) -> Result<OperatorMatrix> {
        match &self.operator {
            JumpOperator::Dense(op) => Ok(op.clone()),
            JumpOperator::SiteLocal {
                layout,
                site,
                matrix,
            } => {
                let local = OperatorMatrix::new(
                    SpaceLayout::single(matrix.nrows()).map_err(DynamicsError::from)?,
                    matrix.clone(),
                )?;
                Ok(crate::hilbert::embed(&local, *site, layout)?)
            }
        }
    }

    fn layout(&self) -> &SpaceLayout {
        match &self.operator {
            JumpOperator::Dense(op) => op.layout(),
            JumpOperator::SiteLocal { layout, .. } => layout,
        }
    }
}

fn check_site_matrix(layout: &SpaceLayout, site: usize, matrix: &Array2<C64>) -> Result<()> {
    if site >= layout.n_sites() {
        return Err(DynamicsError::SiteOutOfRange {
            site,
            n_sites: layout.n_sites(),
        });
    }
    let want = layout.site_dim(site);
    if matrix.nrows() != want || matrix.ncols() != want {
        return Err(DynamicsError::SiteDimMismatch {
            site,
            got: matrix.nrows(),
            want,
        });
    }
    Ok(())
}

fn require_hermitian_array(m: &Array2<C64>) -> std::result::Result<(), f64> {
    let mut dev = 0.0_f64;
    let mut scale = 0.0_f64;
    for ((i, j), v) in m.indexed_iter() {
        scale = scale.max(v.norm());
        if j >= i {
            dev = dev.max((v - m[(j, i)].conj()).norm());
        }
    }
    if dev > 1e-10 * scale.max(f64::MIN_POSITIVE) {
        Err(dev)
    } else {
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Structured Hamiltonians
// ---------------------------------------------------------------------------

/// Optional carrier factor cos(ω·(t + t_origin) − phase) on a term's
/// amplitude. `t_origin` anchors the phase to schedule-global time even
/// though the integrator hands each segment its local time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Carrier {
    pub omega: f64,
    pub phase: f64,
    pub t_origin: f64,
}

/// Scalar coefficient of a Hamiltonian term: amp, optionally modulated by a
/// carrier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coeff {
    pub amp: f64,
    pub carrier: Option<Carrier>,
}

impl Coeff {
    pub fn constant(amp: f64) -> Self {
        Self { amp, carrier: None }
    }

    pub fn modulated(amp: f64, carrier: Carrier) -> Self {
        Self {
            amp,
            carrier: Some(carrier),
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        match self.carrier {
            None => self.amp,
            Some(c) => self.amp * (c.omega * (t + c.t_origin) - c.phase).cos(),
        }
    }
}

#[derive(Debug, Clone)]
struct LocalTerm {
    site: usize,
    matrix: Array2<C64>,
    coeff: Coeff,
}

#[derive(Debug, Clone)]
struct PairTerm {
    site_a: usize,
    op_a: Array2<C64>,
    site_b: usize,
    op_b: Array2<C64>,
    amp: f64,
}

/// Hamiltonian in tensor-product form: a real composite diagonal, site-local
/// terms with scalar time dependence, and static two-site product terms.
/// This is the fast-path representation; `to_operator` materializes the dense
/// matrix for cross-checks.
#[derive(Debug, Clone)]
pub struct StructuredHamiltonian {
    layout: SpaceLayout,
    diag: Vec<f64>,
    local_terms: Vec<LocalTerm>,
    pair_terms: Vec<PairTerm>,
}

impl StructuredHamiltonian {
    pub fn new(layout: SpaceLayout) -> Self {
        let d = layout.total_dim();
        Self {
            layout,
            diag: vec![0.0; d],
            local_terms: Vec::new(),
            pair_terms: Vec::new(),
        }
    }

    pub fn layout(&self) -> &SpaceLayout {
        &self.layout
    }

    /// Adds a per-site diagonal (e.g. eigenenergies E_n or −Δ·n_cav),
    /// broadcast over the other sites.
    pub fn add_site_diagonal(&mut self, site: usize, site_diag: &[f64]) -> Result<()> {
        if site >= self.layout.n_sites() {
            return Err(DynamicsError::SiteOutOfRange {
                site,
                n_sites: self.layout.n_sites(),
            });
        }
        let m = self.layout.site_dim(site);
        if site_diag.len() != m {
            return Err(DynamicsError::SiteDimMismatch {
                site,
                got: site_diag.len(),
                want: m,
            });
        }
        let post = self.layout.dim_after(site);
        for (idx, v) in self.diag.iter_mut().enumerate() {
            *v += site_diag[(idx / post) % m];
        }
        Ok(())
    }

    /// Adds coeff(t)·(A at site), A Hermitian.
    pub fn add_local_term(&mut self, site: usize, matrix: Array2<C64>, coeff: Coeff) -> Result<()> {
        check_site_matrix(&self.layout, site, &matrix)?;
        require_hermitian_array(&matrix).map_err(|dev| DynamicsError::NotHermitian {
            label: format!("local term at site {site}"),
            dev,
        })?;
        self.local_terms.push(LocalTerm {
            site,
            matrix,
            coeff,
        });
        Ok(())
    }

    /// Adds amp·(A at site_a)(B at site_b), A and B Hermitian, sites
    /// distinct.
    pub fn add_pair_term(
        &mut self,
        site_a: usize,
        op_a: Array2<C64>,
        site_b: usize,
        op_b: Array2<C64>,
        amp: f64,
    ) -> Result<()> {
        if site_a == site_b {
            return Err(DynamicsError::SiteOutOfRange {
                site: site_b,
                n_sites: self.layout.n_sites(),
            });
        }
        check_site_matrix(&self.layout, site_a, &op_a)?;
        check_site_matrix(&self.layout, site_b, &op_b)?;
        for (label, op) in [("pair op_a", &op_a), ("pair op_b", &op_b)] {
            require_hermitian_array(op).map_err(|dev| DynamicsError::NotHermitian {
                label: label.to_string(),
                dev,
            })?;
        }
        self.pair_terms.push(PairTerm {
            site_a,
            op_a,
            site_b,
            op_b,
            amp,
        });
        Ok(())
    }

    /// Dense H(t).
    pub fn to_operator(&self, t: f64) -> OperatorMatrix {
        let d = self.layout.total_dim();
        let mut m = Array2::<C64>::zeros((d, d));
        for (i, &v) in self.diag.iter().enumerate() {
            m[(i, i)] = C64::new(v, 0.0);
        }
        let mut out = OperatorMatrix::new(self.layout.clone(), m).expect("sized");
        for term in &self.local_terms {
            let local = OperatorMatrix::new(
                SpaceLayout::single(term.matrix.nrows()).expect("site dim >= 2"),
                term.matrix.clone(),
            )
            .expect("square");
            let embedded = crate::hilbert::embed(&local, term.site, &self.layout).expect("valid");
            out = out
                .add(&embedded.scaled(C64::new(term.coeff.value(t), 0.0)))
                .expect("same layout");
        }
        for term in &self.pair_terms {
            let a = OperatorMatrix::new(
                SpaceLayout::single(term.op_a.nrows()).expect("dim"),
                term.op_a.clone(),
            )
            .expect("square");
            let b = OperatorMatrix::new(
                SpaceLayout::single(term.op_b.nrows()).expect("dim"),
                term.op_b.clone(),
            )
            .expect("square");
            let prod = crate::hilbert::embed_pair(&a, term.site_a, &b, term.site_b, &self.layout)
                .expect("valid");
            out = out
                .add(&prod.scaled(C64::new(term.amp, 0.0)))
                .expect("same layout");
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

pub enum SegmentGenerator {
    Constant(OperatorMatrix),
    Evaluator {
        layout: SpaceLayout,
        eval: Box<dyn Fn(f64) -> OperatorMatrix + Send + Sync>,
    },
    Structured(StructuredHamiltonian),
}

impl std::fmt::Debug for SegmentGenerator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Constant(_) => f.write_str("Constant"),
            Self::Evaluator { .. } => f.write_str("Evaluator"),
            Self::Structured(_) => f.write_str("Structured"),
        }
    }
}

impl SegmentGenerator {
    pub fn layout(&self) -> &SpaceLayout {
        match self {
            Self::Constant(op) => op.layout(),
            Self::Evaluator { layout, .. } => layout,
            Self::Structured(h) => h.layout(),
        }
    }

    /// Dense H(t), any variant.
    pub fn evaluate(&self, t: f64) -> OperatorMatrix {
        match self {
            Self::Constant(op) => op.clone(),
            Self::Evaluator { eval, .. } => eval(t),
            Self::Structured(h) => h.to_operator(t),
        }
    }
}

#[derive(Debug)]
pub struct ScheduleSegment {
    pub duration: f64,
    pub label: String,
    pub generator: SegmentGenerator,
}

impl ScheduleSegment {
    pub fn new(duration: f64, label: impl Into<String>, generator: SegmentGenerator) -> Result<Self> {
        if !(duration > 0.0) || !duration.is_finite() {
            return Err(DynamicsError::BadDuration(duration));
        }
        Ok(Self {
            duration,
            label: label.into(),
            generator,
        })
    }
}

#[derive(Debug)]
pub struct HamiltonianSchedule {
    segments: Vec<ScheduleSegment>,
}

impl HamiltonianSchedule {
    pub fn new(segments: Vec<ScheduleSegment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(DynamicsError::EmptySchedule);
        }
        let layout = segments[0].generator.layout().clone();
        for seg in &segments {
            if *seg.generator.layout() != layout {
                return Err(DynamicsError::LayoutMismatch);
            }
            // Constant segments are validated here; Evaluator outputs are
            // checked at segment entry during integration.
            if let SegmentGenerator::Constant(op) = &seg.generator {
                let dev = op.hermiticity_deviation();
                if dev > 1e-10 * op.max_abs().max(f64::MIN_POSITIVE) {
                    return Err(DynamicsError::NotHermitian {
                        label: seg.label.clone(),
                        dev,
                    });
                }
            }
        }
        Ok(Self { segments })
    }

    pub fn single(segment: ScheduleSegment) -> Result<Self> {
        Self::new(vec![segment])
    }

    pub fn segments(&self) -> &[ScheduleSegment] {
        &self.segments
    }

    pub fn layout(&self) -> &SpaceLayout {
        self.segments[0].generator.layout()
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }
}

// ---------------------------------------------------------------------------
// Dense reference right-hand side
// ---------------------------------------------------------------------------

/// ϱ̇ = −i[H,ϱ] + Σ (rate/2)·D(ϱ), computed with dense products. Reference
/// implementation; the structured engine is tested against it.
pub fn lindblad_rhs(
    rho: &DensityMatrix,
    h: &OperatorMatrix,
    dissipators: &[Dissipator],
) -> Result<OperatorMatrix> {
    if rho.layout() != h.layout() {
        return Err(DynamicsError::LayoutMismatch);
    }
    let r = rho.entries();
    let hr = h.entries().dot(r);
    // −i(Hρ − (Hρ)†) for Hermitian ρ, H.
    let mut out = Array2::<C64>::zeros(r.raw_dim());
    let d = r.nrows();
    let mi = C64::new(0.0, -1.0);
    for i in 0..d {
        for j in 0..d {
            out[(i, j)] = mi * (hr[(i, j)] - hr[(j, i)].conj());
        }
    }
    for dis in dissipators {
        if dis.layout() != rho.layout() {
            return Err(DynamicsError::LayoutMismatch);
        }
        let y = dis.operator_matrix()?;
        let l = match dis.direction {
            Direction::Down => y.entries().clone(),
            Direction::Up => y.adjoint().into_entries(),
        };
        let ld = l.t().mapv(|v| v.conj());
        let lr = l.dot(r);
        let jump = lr.dot(&ld);
        let g = ld.dot(&l);
        let gr = g.dot(r);
        let rate = dis.rate;
        for i in 0..d {
            for j in 0..d {
                out[(i, j)] += rate * jump[(i, j)]
                    - 0.5 * rate * (gr[(i, j)] + gr[(j, i)].conj());
            }
        }
    }
    Ok(OperatorMatrix::new(rho.layout().clone(), out)?)
}

// ---------------------------------------------------------------------------
// Structured right-hand-side engine
// ---------------------------------------------------------------------------

mod kernels {
    use super::C64;
    use ndarray::Array2;

    #[inline]
    pub fn axpy(out: &mut [C64], x: &[C64], a: C64) {
        if a.im == 0.0 {
            let ar = a.re;
            for (o, &v) in out.iter_mut().zip(x) {
                o.re += ar * v.re;
                o.im += ar * v.im;
            }
        } else {
            for (o, &v) in out.iter_mut().zip(x) {
                *o += a * v;
            }
        }
    }

    /// out += scale·(A ⊗_site I)·rho: mixes row blocks of the site.
    pub fn left_apply_acc(
        out: &mut [C64],
        rho: &[C64],
        d: usize,
        pre: usize,
        m: usize,
        post: usize,
        a: &Array2<C64>,
        scale: C64,
    ) {
        for p in 0..pre {
            for i in 0..m {
                let out_base = ((p * m + i) * post) * d;
                for k in 0..m {
                    let c = scale * a[(i, k)];
                    if c.re == 0.0 && c.im == 0.0 {
                        continue;
                    }
                    let in_base = ((p * m + k) * post) * d;
                    for q in 0..post {
                        let ro = out_base + q * d;
                        let ri = in_base + q * d;
                        axpy(&mut out[ro..ro + d], &rho[ri..ri + d], c);
                    }
                }
            }
        }
    }

    /// out += scale·rho·(B ⊗_site I): mixes column blocks, row by row.
    pub fn right_apply_acc(
        out: &mut [C64],
        rho: &[C64],
        d: usize,
        pre: usize,
        m: usize,
        post: usize,
        b: &Array2<C64>,
        scale: C64,
    ) {
        for r in 0..d {
            let row_in = &rho[r * d..(r + 1) * d];
            let row_out = &mut out[r * d..(r + 1) * d];
            for p in 0..pre {
                for j in 0..m {
                    let ob = (p * m + j) * post;
                    for k in 0..m {
                        let c = scale * b[(k, j)];
                        if c.re == 0.0 && c.im == 0.0 {
                            continue;
                        }
                        let ib = (p * m + k) * post;
                        axpy(&mut row_out[ob..ob + post], &row_in[ib..ib + post], c);
                    }
                }
            }
        }
    }

    /// out += scale·diag·rho (row scaling by a real composite diagonal).
    pub fn diag_apply_acc(out: &mut [C64], rho: &[C64], d: usize, diag: &[f64], scale: f64) {
        for r in 0..d {
            let c = scale * diag[r];
            if c == 0.0 {
                continue;
            }
            let row_in = &rho[r * d..(r + 1) * d];
            let row_out = &mut out[r * d..(r + 1) * d];
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                o.re += c * v.re;
                o.im += c * v.im;
            }
        }
    }

    /// out += −i·(w − w†): the commutator fold for w = Hρ with ρ, H
    /// Hermitian. Produces an exactly Hermitian increment.
    pub fn commutator_fold(out: &mut [C64], w: &[C64], d: usize) {
        for i in 0..d {
            for j in 0..d {
                let wij = w[i * d + j];
                let wji = w[j * d + i];
                // −i·(wij − conj(wji))
                let re = wij.im + wji.im;
                let im = wji.re - wij.re;
                let o = &mut out[i * d + j];
                o.re += re;
                o.im += im;
            }
        }
    }

    /// out −= (k + k†): anticommutator fold for k = Σ (rate/2)·G·ρ.
    pub fn anticommutator_fold_sub(out: &mut [C64], k: &[C64], d: usize) {
        for i in 0..d {
            for j in 0..d {
                let kij = k[i * d + j];
                let kji = k[j * d + i];
                let o = &mut out[i * d + j];
                o.re -= kij.re + kji.re;
                o.im -= kij.im - kji.im;
            }
        }
    }

    /// out += scale·a·b (dense, row-axpy ordering).
    pub fn dense_mul_acc(out: &mut [C64], a: &[C64], b: &[C64], d: usize, scale: C64) {
        for i in 0..d {
            let row_out = &mut out[i * d..(i + 1) * d];
            for k in 0..d {
                let c = scale * a[i * d + k];
                if c.re == 0.0 && c.im == 0.0 {
                    continue;
                }
                axpy(row_out, &b[k * d..(k + 1) * d], c);
            }
        }
    }

    /// out = w + w† (writes, does not accumulate). Tiled so the transposed
    /// reads stay cache-resident.
    pub fn hermitian_fold_write(out: &mut [C64], w: &[C64], d: usize) {
        const TILE: usize = 64;
        for ib in (0..d).step_by(TILE) {
            let imax = (ib + TILE).min(d);
            for jb in (0..d).step_by(TILE) {
                let jmax = (jb + TILE).min(d);
                for i in ib..imax {
                    for j in jb..jmax {
                        let wij = w[i * d + j];
                        let wji = w[j * d + i];
                        out[i * d + j] = C64::new(wij.re + wji.re, wij.im - wji.im);
                    }
                }
            }
        }
    }

    /// out += rate·L·rho·L† for a uniform-shift L: every output element reads
    /// a single rho element at flat offset delta in both indices, scaled by a
    /// per-row and a per-column coefficient.
    #[allow(clippy::too_many_arguments)]
    pub fn uniform_shift_jump_apply(
        out: &mut [C64],
        rho: &[C64],
        d: usize,
        delta: isize,
        rowpat: &[C64],
        col_idx: &[u32],
        col_val: &[C64],
        col_runs: &[(usize, usize, C64)],
        use_runs: bool,
    ) {
        for r in 0..d {
            let a = rowpat[r];
            if a.re == 0.0 && a.im == 0.0 {
                continue;
            }
            let src = (r as isize + delta) as usize;
            let in_row = &rho[src * d..(src + 1) * d];
            let out_row = &mut out[r * d..(r + 1) * d];
            if use_runs {
                for &(start, len, cv) in col_runs {
                    let c = a * cv;
                    let ib = (start as isize + delta) as usize;
                    axpy(&mut out_row[start..start + len], &in_row[ib..ib + len], c);
                }
            } else {
                for (&ci, &cv) in col_idx.iter().zip(col_val) {
                    let c = ci as usize;
                    let v = in_row[(c as isize + delta) as usize];
                    let w = a * cv;
                    let o = &mut out_row[c];
                    o.re += w.re * v.re - w.im * v.im;
                    o.im += w.re * v.im + w.im * v.re;
                }
            }
        }
    }

    /// out += rate·L·rho·L† in one pass for a site-local L with at most one
    /// nonzero per row (`map[i] = (k, L[i,k])`). Row r of the output reads the
    /// digit-shifted row of rho; columns shift blockwise the same way.
    #[allow(clippy::too_many_arguments)]
    pub fn shift_jump_apply(
        out: &mut [C64],
        rho: &[C64],
        d: usize,
        pre: usize,
        m: usize,
        post: usize,
        map: &[Option<(usize, C64)>],
        rate: f64,
    ) {
        for p in 0..pre {
            for i in 0..m {
                let Some((ki, vi)) = map[i] else { continue };
                let vi_rate = vi * rate;
                for q in 0..post {
                    let r = (p * m + i) * post + q;
                    let r2 = (p * m + ki) * post + q;
                    let out_row = &mut out[r * d..(r + 1) * d];
                    let in_row = &rho[r2 * d..(r2 + 1) * d];
                    for p2 in 0..pre {
                        for j in 0..m {
                            let Some((kj, vj)) = map[j] else { continue };
                            let c = vi_rate * vj.conj();
                            let ob = (p2 * m + j) * post;
                            let ib = (p2 * m + kj) * post;
                            axpy(&mut out_row[ob..ob + post], &in_row[ib..ib + post], c);
                        }
                    }
                }
            }
        }
    }
}

struct SiteGeometry {
    pre: usize,
    m: usize,
    post: usize,
}

fn geometry(layout: &SpaceLayout, site: usize) -> SiteGeometry {
    SiteGeometry {
        pre: layout.dim_before(site),
        m: layout.site_dim(site),
        post: layout.dim_after(site),
    }
}

enum PreparedJump {
    /// Site-local L whose nonzeros all sit on one digit offset (lowering,
    /// raising, or diagonal): rate·LρL† reads ρ at a fixed flat offset with
    /// precomputed per-row and per-column coefficient patterns.
    UniformShift {
        /// Flat index offset (k − i)·post shared by rows and columns.
        delta: isize,
        /// rate·L[digit(r), digit(r)+s]; zero marks an inactive row.
        rowpat: Vec<C64>,
        /// conj(L[digit(c), digit(c)+s]) as (index, value) pairs over the
        /// active columns only.
        col_idx: Vec<u32>,
        col_val: Vec<C64>,
        /// Active-column runs (start, len, value) for long-run geometries.
        col_runs: Vec<(usize, usize, C64)>,
        /// Run lengths below this use the index list, otherwise the runs.
        use_runs: bool,
    },
    /// Site-local L with at most one nonzero per row but varying offsets.
    Shift {
        geo: SiteGeometry,
        map: Vec<Option<(usize, C64)>>,
        rate: f64,
    },
    SiteLocal {
        geo: SiteGeometry,
        l: Array2<C64>,
        l_dag: Array2<C64>,
        rate: f64,
    },
    Dense {
        l: Array2<C64>,
        l_dag: Array2<C64>,
        rate: f64,
    },
}

/// Builds the uniform-shift form when every nonzero of `map` shares one digit
/// offset. `rowpat`/column patterns live on the full flat index range.
fn uniform_shift_jump(
    geo: &SiteGeometry,
    map: &[Option<(usize, C64)>],
    rate: f64,
    d: usize,
) -> Option<PreparedJump> {
    let mut shift: Option<isize> = None;
    for (i, entry) in map.iter().enumerate() {
        if let Some((k, _)) = entry {
            let s = *k as isize - i as isize;
            match shift {
                Some(prev) if prev != s => return None,
                Some(_) => {}
                None => shift = Some(s),
            }
        }
    }
    let s = shift?;
    let delta = s * geo.post as isize;
    let mut rowpat = vec![C64::new(0.0, 0.0); d];
    let mut col_idx = Vec::new();
    let mut col_val = Vec::new();
    let mut col_runs = Vec::new();
    for p in 0..geo.pre {
        for i in 0..geo.m {
            let Some((_, v)) = map[i] else { continue };
            let base = (p * geo.m + i) * geo.post;
            for q in 0..geo.post {
                rowpat[base + q] = v * rate;
                col_idx.push((base + q) as u32);
                col_val.push(v.conj());
            }
            col_runs.push((base, geo.post, v.conj()));
        }
    }
    Some(PreparedJump::UniformShift {
        delta,
        rowpat,
        col_idx,
        col_val,
        col_runs,
        use_runs: geo.post >= 8,
    })
}

/// `map[i] = Some((k, L[i,k]))` when row i of L has exactly one nonzero,
/// `None` when the row is empty; `None` overall if any row has two or more.
fn row_shift_map(l: &Array2<C64>) -> Option<Vec<Option<(usize, C64)>>> {
    let m = l.nrows();
    let mut map = Vec::with_capacity(m);
    for i in 0..m {
        let mut hit: Option<(usize, C64)> = None;
        for k in 0..m {
            let v = l[(i, k)];
            if v.re != 0.0 || v.im != 0.0 {
                if hit.is_some() {
                    return None;
                }
                hit = Some((k, v));
            }
        }
        map.push(hit);
    }
    Some(map)
}

/// Real diagonal of a site generator, or `None` if any off-diagonal entry or
/// imaginary diagonal part is nonzero.
fn exact_diagonal(g: &Array2<C64>) -> Option<Vec<f64>> {
    let m = g.nrows();
    let mut diag = Vec::with_capacity(m);
    for i in 0..m {
        for k in 0..m {
            let v = g[(i, k)];
            if i != k && (v.re != 0.0 || v.im != 0.0) {
                return None;
            }
            if i == k {
                if v.im != 0.0 {
                    return None;
                }
                diag.push(v.re);
            }
        }
    }
    Some(diag)
}

/// Dissipator data reorganized for the fast path: per-site merged
/// anticommutator generators Σ(rate/2)·L†L and the individual jump channels.
/// When every generator is diagonal, `k_diag` holds the full-space real
/// diagonal of K = Σ(rate/2)·L†L so the drift can run as (−iH − K)ρ + h.c.
struct PreparedDissipators {
    site_g: Vec<Option<(SiteGeometry, Array2<C64>)>>,
    dense_g: Option<Array2<C64>>,
    k_diag: Option<Vec<f64>>,
    jumps: Vec<PreparedJump>,
}

fn prepare_dissipators(
    layout: &SpaceLayout,
    dissipators: &[Dissipator],
) -> Result<PreparedDissipators> {
    let mut site_acc: Vec<Option<Array2<C64>>> = vec![None; layout.n_sites()];
    let mut dense_g: Option<Array2<C64>> = None;
    let mut jumps = Vec::new();
    for dis in dissipators {
        if dis.layout() != layout {
            return Err(DynamicsError::LayoutMismatch);
        }
        match &dis.operator {
            JumpOperator::SiteLocal { site, matrix, .. } => {
                let l = match dis.direction {
                    Direction::Down => matrix.clone(),
                    Direction::Up => matrix.t().mapv(|v| v.conj()),
                };
                let l_dag = l.t().mapv(|v| v.conj());
                let g = l_dag.dot(&l).mapv(|v| v * 0.5 * dis.rate);
                match &mut site_acc[*site] {
                    Some(acc) => *acc = &*acc + &g,
                    slot @ None => *slot = Some(g),
                }
                let geo = geometry(layout, *site);
                let d = layout.total_dim();
                match row_shift_map(&l) {
                    Some(map) => match uniform_shift_jump(&geo, &map, dis.rate, d) {
                        Some(jump) => jumps.push(jump),
                        None => jumps.push(PreparedJump::Shift {
                            geo,
                            map,
                            rate: dis.rate,
                        }),
                    },
                    None => jumps.push(PreparedJump::SiteLocal {
                        geo,
                        l,
                        l_dag,
                        rate: dis.rate,
                    }),
                }
            }
            JumpOperator::Dense(op) => {
                let l = match dis.direction {
                    Direction::Down => op.entries().clone(),
                    Direction::Up => op.adjoint().into_entries(),
                };
                let l_dag = l.t().mapv(|v| v.conj());
                let g = l_dag.dot(&l).mapv(|v| v * 0.5 * dis.rate);
                match &mut dense_g {
                    Some(acc) => *acc = &*acc + &g,
                    slot @ None => *slot = Some(g),
                }
                jumps.push(PreparedJump::Dense {
                    l,
                    l_dag,
                    rate: dis.rate,
                });
            }
        }
    }
    let site_g: Vec<Option<(SiteGeometry, Array2<C64>)>> = site_acc
        .into_iter()
        .enumerate()
        .map(|(site, acc)| acc.map(|g| (geometry(layout, site), g)))
        .collect();

    // Fold every diagonal site generator into one full-space diagonal; any
    // off-diagonal generator (or a dense one) disables the fused drift.
    let k_diag = if dense_g.is_some() {
        None
    } else {
        let d = layout.total_dim();
        let mut acc = vec![0.0_f64; d];
        let mut ok = true;
        for entry in site_g.iter().flatten() {
            let (geo, g) = entry;
            match exact_diagonal(g) {
                Some(diag) => {
                    for p in 0..geo.pre {
                        for i in 0..geo.m {
                            let base = (p * geo.m + i) * geo.post;
                            for q in 0..geo.post {
                                acc[base + q] += diag[i];
                            }
                        }
                    }
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        ok.then_some(acc)
    };

    Ok(PreparedDissipators {
        site_g,
        dense_g,
        k_diag,
        jumps,
    })
}

/// Hamiltonian applier for one segment.
enum HApplier<'a> {
    Structured {
        h: &'a StructuredHamiltonian,
        /// Site-local terms grouped by site for per-stage merging.
        grouped: Vec<(SiteGeometry, Vec<usize>)>,
        site_scratch: Vec<Array2<C64>>,
    },
    Dense {
        generator: &'a SegmentGenerator,
        /// Constant segments cache their matrix.
        cached: Option<Array2<C64>>,
    },
}

impl<'a> HApplier<'a> {
    fn new(generator: &'a SegmentGenerator) -> Self {
        match generator {
            SegmentGenerator::Structured(h) => {
                let mut by_site: Vec<Vec<usize>> = vec![Vec::new(); h.layout.n_sites()];
                for (i, term) in h.local_terms.iter().enumerate() {
                    by_site[term.site].push(i);
                }
                let mut grouped = Vec::new();
                let mut site_scratch = Vec::new();
                for (site, idxs) in by_site.into_iter().enumerate() {
                    if !idxs.is_empty() {
                        let m = h.layout.site_dim(site);
                        grouped.push((geometry(&h.layout, site), idxs));
                        site_scratch.push(Array2::zeros((m, m)));
                    }
                }
                Self::Structured {
                    h,
                    grouped,
                    site_scratch,
                }
            }
            SegmentGenerator::Constant(op) => Self::Dense {
                generator,
                cached: Some(op.entries().clone()),
            },
            SegmentGenerator::Evaluator { .. } => Self::Dense {
                generator,
                cached: None,
            },
        }
    }

    /// w = H(t)·ρ, using tmp as scratch.
    fn apply(&mut self, t: f64, rho: &[C64], w: &mut [C64], tmp: &mut [C64], d: usize) {
        w.fill(C64::new(0.0, 0.0));
        match self {
            Self::Structured {
                h,
                grouped,
                site_scratch,
            } => {
                kernels::diag_apply_acc(w, rho, d, &h.diag, 1.0);
                for ((geo, idxs), acc) in grouped.iter().zip(site_scratch.iter_mut()) {
                    acc.fill(C64::new(0.0, 0.0));
                    let mut any = false;
                    for &i in idxs {
                        let term = &h.local_terms[i];
                        let c = term.coeff.value(t);
                        if c != 0.0 {
                            any = true;
                            acc.scaled_add(C64::new(c, 0.0), &term.matrix);
                        }
                    }
                    if any {
                        kernels::left_apply_acc(
                            w,
                            rho,
                            d,
                            geo.pre,
                            geo.m,
                            geo.post,
                            acc,
                            C64::new(1.0, 0.0),
                        );
                    }
                }
                for term in &h.pair_terms {
                    if term.amp == 0.0 {
                        continue;
                    }
                    tmp.fill(C64::new(0.0, 0.0));
                    let gb = geometry(&h.layout, term.site_b);
                    kernels::left_apply_acc(
                        tmp,
                        rho,
                        d,
                        gb.pre,
                        gb.m,
                        gb.post,
                        &term.op_b,
                        C64::new(term.amp, 0.0),
                    );
                    let ga = geometry(&h.layout, term.site_a);
                    kernels::left_apply_acc(
                        w,
                        tmp,
                        d,
                        ga.pre,
                        ga.m,
                        ga.post,
                        &term.op_a,
                        C64::new(1.0, 0.0),
                    );
                }
            }
            Self::Dense { generator, cached } => {
                let one = C64::new(1.0, 0.0);
                match cached {
                    Some(hm) => {
                        kernels::dense_mul_acc(w, hm.as_slice().expect("std layout"), rho, d, one)
                    }
                    None => {
                        let hm = generator.evaluate(t).into_entries();
                        kernels::dense_mul_acc(w, hm.as_slice().expect("std layout"), rho, d, one);
                    }
                }
            }
        }
    }
}

/// One time-dependent site-local term in row-gather form: the same row
/// layout as the static part, applied with the live coefficient.
struct DynTerm {
    /// Index into `StructuredHamiltonian::local_terms` for the coefficient.
    term: usize,
    offsets: Vec<u32>,
    /// (source row, −i·matrix entry); scaled by coeff(t) at apply time.
    entries: Vec<(u32, C64)>,
}

/// Fused drift applier: w = (−iH − K)ρ in one accumulation, so the caller
/// recovers −i[H,ρ] − {K,ρ} as w + w†. Valid only for diagonal K.
///
/// The structured form treats M = −iH − K as a sparse row-gather: each output
/// row is a short combination of input rows (diagonal, pair couplings, and
/// site-local terms all shift a single flat index), so one pass over the rows
/// applies the whole drift with the accumulator row staying cache-resident.
enum DriftApplier<'a> {
    Structured {
        h: &'a StructuredHamiltonian,
        /// Static rows of M (diagonal + pair terms), CSR layout.
        offsets: Vec<u32>,
        entries: Vec<(u32, C64)>,
        dyn_terms: Vec<DynTerm>,
        /// Per-eval coefficient scratch, one slot per dyn term.
        dyn_scale: Vec<f64>,
    },
    Dense {
        generator: &'a SegmentGenerator,
        k_diag: &'a [f64],
        /// Constant segments cache −iH − K.
        cached: Option<Array2<C64>>,
    },
}

/// Nonzeros of row `i` of a small site operator.
fn row_nonzeros(op: &Array2<C64>, i: usize) -> Vec<(usize, C64)> {
    (0..op.ncols())
        .filter_map(|k| {
            let v = op[(i, k)];
            (v.re != 0.0 || v.im != 0.0).then_some((k, v))
        })
        .collect()
}

fn dense_drift_matrix(h: &OperatorMatrix, k_diag: &[f64]) -> Array2<C64> {
    let mut m = h.entries().mapv(|v| v * C64::new(0.0, -1.0));
    for (r, &k) in k_diag.iter().enumerate() {
        m[(r, r)] -= C64::new(k, 0.0);
    }
    m
}

impl<'a> DriftApplier<'a> {
    fn new(generator: &'a SegmentGenerator, k_diag: &'a [f64]) -> Self {
        match generator {
            SegmentGenerator::Structured(h) => {
                let layout = &h.layout;
                let d = layout.total_dim();
                let minus_i = C64::new(0.0, -1.0);

                // Pair terms with per-digit nonzero lists, so each row's
                // sources enumerate as a product of two short lists.
                struct PairRows {
                    post_a: usize,
                    m_a: usize,
                    post_b: usize,
                    m_b: usize,
                    rows_a: Vec<Vec<(usize, C64)>>,
                    rows_b: Vec<Vec<(usize, C64)>>,
                    amp: f64,
                }
                let pairs: Vec<PairRows> = h
                    .pair_terms
                    .iter()
                    .filter(|term| term.amp != 0.0)
                    .map(|term| {
                        let ga = geometry(layout, term.site_a);
                        let gb = geometry(layout, term.site_b);
                        PairRows {
                            post_a: ga.post,
                            m_a: ga.m,
                            post_b: gb.post,
                            m_b: gb.m,
                            rows_a: (0..ga.m).map(|i| row_nonzeros(&term.op_a, i)).collect(),
                            rows_b: (0..gb.m).map(|i| row_nonzeros(&term.op_b, i)).collect(),
                            amp: term.amp,
                        }
                    })
                    .collect();

                let mut offsets = Vec::with_capacity(d + 1);
                let mut entries = Vec::new();
                offsets.push(0u32);
                for r in 0..d {
                    entries.push((r as u32, C64::new(-k_diag[r], -h.diag[r])));
                    for pair in &pairs {
                        let ia = (r / pair.post_a) % pair.m_a;
                        let ib = (r / pair.post_b) % pair.m_b;
                        for &(ka, va) in &pair.rows_a[ia] {
                            for &(kb, vb) in &pair.rows_b[ib] {
                                let src = (r as isize
                                    + (ka as isize - ia as isize) * pair.post_a as isize
                                    + (kb as isize - ib as isize) * pair.post_b as isize)
                                    as usize;
                                entries.push((src as u32, minus_i * pair.amp * va * vb));
                            }
                        }
                    }
                    offsets.push(entries.len() as u32);
                }

                let dyn_terms: Vec<DynTerm> = h
                    .local_terms
                    .iter()
                    .enumerate()
                    .map(|(ti, term)| {
                        let geo = geometry(layout, term.site);
                        let rows: Vec<Vec<(usize, C64)>> =
                            (0..geo.m).map(|i| row_nonzeros(&term.matrix, i)).collect();
                        let mut toff = Vec::with_capacity(d + 1);
                        let mut tent = Vec::new();
                        toff.push(0u32);
                        for r in 0..d {
                            let i = (r / geo.post) % geo.m;
                            for &(k, v) in &rows[i] {
                                let src = (r as isize
                                    + (k as isize - i as isize) * geo.post as isize)
                                    as usize;
                                tent.push((src as u32, minus_i * v));
                            }
                            toff.push(tent.len() as u32);
                        }
                        DynTerm {
                            term: ti,
                            offsets: toff,
                            entries: tent,
                        }
                    })
                    .collect();

                let n_dyn = dyn_terms.len();
                Self::Structured {
                    h,
                    offsets,
                    entries,
                    dyn_terms,
                    dyn_scale: vec![0.0; n_dyn],
                }
            }
            SegmentGenerator::Constant(op) => Self::Dense {
                generator,
                k_diag,
                cached: Some(dense_drift_matrix(op, k_diag)),
            },
            SegmentGenerator::Evaluator { .. } => Self::Dense {
                generator,
                k_diag,
                cached: None,
            },
        }
    }

    /// w = (−iH(t) − K)·ρ, one row-gather pass in the structured case.
    fn apply(&mut self, t: f64, rho: &[C64], w: &mut [C64], d: usize) {
        let one = C64::new(1.0, 0.0);
        match self {
            Self::Structured {
                h,
                offsets,
                entries,
                dyn_terms,
                dyn_scale,
            } => {
                for (slot, dt) in dyn_scale.iter_mut().zip(dyn_terms.iter()) {
                    *slot = h.local_terms[dt.term].coeff.value(t);
                }
                for r in 0..d {
                    let row = &mut w[r * d..(r + 1) * d];
                    row.fill(C64::new(0.0, 0.0));
                    let lo = offsets[r] as usize;
                    let hi = offsets[r + 1] as usize;
                    for &(src, v) in &entries[lo..hi] {
                        let s = src as usize;
                        kernels::axpy(row, &rho[s * d..(s + 1) * d], v);
                    }
                    for (dt, &c) in dyn_terms.iter().zip(dyn_scale.iter()) {
                        if c == 0.0 {
                            continue;
                        }
                        let lo = dt.offsets[r] as usize;
                        let hi = dt.offsets[r + 1] as usize;
                        for &(src, v) in &dt.entries[lo..hi] {
                            let s = src as usize;
                            kernels::axpy(row, &rho[s * d..(s + 1) * d], v * c);
                        }
                    }
                }
            }
            Self::Dense {
                generator,
                k_diag,
                cached,
            } => {
                w.fill(C64::new(0.0, 0.0));
                match cached {
                    Some(m) => {
                        kernels::dense_mul_acc(w, m.as_slice().expect("std layout"), rho, d, one)
                    }
                    None => {
                        let m = dense_drift_matrix(&generator.evaluate(t), k_diag);
                        kernels::dense_mul_acc(w, m.as_slice().expect("std layout"), rho, d, one);
                    }
                }
            }
        }
    }
}

enum EnginePath<'a> {
    /// Diagonal K: out = w + w† + jump terms, w = (−iH − K)ρ.
    Fused(DriftApplier<'a>),
    /// General dissipators: separate commutator and anticommutator folds.
    Compat(HApplier<'a>),
}

/// Full RHS engine for one segment.
struct RhsEngine<'a> {
    d: usize,
    path: EnginePath<'a>,
    diss: &'a PreparedDissipators,
    w: Vec<C64>,
    tmp: Vec<C64>,
}

impl<'a> RhsEngine<'a> {
    fn new(generator: &'a SegmentGenerator, diss: &'a PreparedDissipators) -> Self {
        let d = generator.layout().total_dim();
        let path = match &diss.k_diag {
            Some(k_diag) => EnginePath::Fused(DriftApplier::new(generator, k_diag)),
            None => EnginePath::Compat(HApplier::new(generator)),
        };
        Self {
            d,
            path,
            diss,
            w: vec![C64::new(0.0, 0.0); d * d],
            tmp: vec![C64::new(0.0, 0.0); d * d],
        }
    }

    fn rhs(&mut self, t: f64, rho: &[C64], out: &mut [C64]) {
        let d = self.d;
        match &mut self.path {
            EnginePath::Fused(drift) => {
                drift.apply(t, rho, &mut self.w, d);
                kernels::hermitian_fold_write(out, &self.w, d);
                for jump in &self.diss.jumps {
                    match jump {
                        PreparedJump::UniformShift {
                            delta,
                            rowpat,
                            col_idx,
                            col_val,
                            col_runs,
                            use_runs,
                        } => {
                            kernels::uniform_shift_jump_apply(
                                out, rho, d, *delta, rowpat, col_idx, col_val, col_runs,
                                *use_runs,
                            );
                        }
                        PreparedJump::Shift { geo, map, rate } => {
                            kernels::shift_jump_apply(
                                out, rho, d, geo.pre, geo.m, geo.post, map, *rate,
                            );
                        }
                        PreparedJump::SiteLocal {
                            geo,
                            l,
                            l_dag,
                            rate,
                        } => {
                            self.tmp.fill(C64::new(0.0, 0.0));
                            kernels::left_apply_acc(
                                &mut self.tmp,
                                rho,
                                d,
                                geo.pre,
                                geo.m,
                                geo.post,
                                l,
                                C64::new(1.0, 0.0),
                            );
                            kernels::right_apply_acc(
                                out,
                                &self.tmp,
                                d,
                                geo.pre,
                                geo.m,
                                geo.post,
                                l_dag,
                                C64::new(*rate, 0.0),
                            );
                        }
                        PreparedJump::Dense { l, l_dag, rate } => {
                            self.tmp.fill(C64::new(0.0, 0.0));
                            kernels::dense_mul_acc(
                                &mut self.tmp,
                                l.as_slice().expect("std layout"),
                                rho,
                                d,
                                C64::new(1.0, 0.0),
                            );
                            let mut prod = vec![C64::new(0.0, 0.0); d * d];
                            kernels::dense_mul_acc(
                                &mut prod,
                                &self.tmp,
                                l_dag.as_slice().expect("std layout"),
                                d,
                                C64::new(1.0, 0.0),
                            );
                            kernels::axpy(out, &prod, C64::new(*rate, 0.0));
                        }
                    }
                }
            }
            EnginePath::Compat(h) => {
                out.fill(C64::new(0.0, 0.0));
                // −i[H, ρ].
                h.apply(t, rho, &mut self.w, &mut self.tmp, d);
                kernels::commutator_fold(out, &self.w, d);
                // Jump terms rate·LρL†.
                for jump in &self.diss.jumps {
                    self.tmp.fill(C64::new(0.0, 0.0));
                    match jump {
                        PreparedJump::UniformShift {
                            delta,
                            rowpat,
                            col_idx,
                            col_val,
                            col_runs,
                            use_runs,
                        } => {
                            kernels::uniform_shift_jump_apply(
                                out, rho, d, *delta, rowpat, col_idx, col_val, col_runs,
                                *use_runs,
                            );
                        }
                        PreparedJump::Shift { geo, map, rate } => {
                            kernels::shift_jump_apply(
                                out, rho, d, geo.pre, geo.m, geo.post, map, *rate,
                            );
                        }
                        PreparedJump::SiteLocal {
                            geo,
                            l,
                            l_dag,
                            rate,
                        } => {
                            kernels::left_apply_acc(
                                &mut self.tmp,
                                rho,
                                d,
                                geo.pre,
                                geo.m,
                                geo.post,
                                l,
                                C64::new(1.0, 0.0),
                            );
                            kernels::right_apply_acc(
                                out,
                                &self.tmp,
                                d,
                                geo.pre,
                                geo.m,
                                geo.post,
                                l_dag,
                                C64::new(*rate, 0.0),
                            );
                        }
                        PreparedJump::Dense { l, l_dag, rate } => {
                            kernels::dense_mul_acc(
                                &mut self.tmp,
                                l.as_slice().expect("std layout"),
                                rho,
                                d,
                                C64::new(1.0, 0.0),
                            );
                            // (Lρ)·L† accumulated densely.
                            let mut prod = vec![C64::new(0.0, 0.0); d * d];
                            kernels::dense_mul_acc(
                                &mut prod,
                                &self.tmp,
                                l_dag.as_slice().expect("std layout"),
                                d,
                                C64::new(1.0, 0.0),
                            );
                            kernels::axpy(out, &prod, C64::new(*rate, 0.0));
                        }
                    }
                }
                // −Σ (rate/2){L†L, ρ} via K = Σ (rate/2)·L†L·ρ, out −= K + K†.
                self.w.fill(C64::new(0.0, 0.0));
                let mut any = false;
                for entry in &self.diss.site_g {
                    if let Some((geo, g)) = entry {
                        any = true;
                        kernels::left_apply_acc(
                            &mut self.w,
                            rho,
                            d,
                            geo.pre,
                            geo.m,
                            geo.post,
                            g,
                            C64::new(1.0, 0.0),
                        );
                    }
                }
                if let Some(g) = &self.diss.dense_g {
                    any = true;
                    kernels::dense_mul_acc(
                        &mut self.w,
                        g.as_slice().expect("std layout"),
                        rho,
                        d,
                        C64::new(1.0, 0.0),
                    );
                }
                if any {
                    kernels::anticommutator_fold_sub(out, &self.w, d);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Integrator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PositivityCheck {
    /// No eigenvalue checks (diagonal proxy still applies every step).
    Off,
    /// Full eigenvalue check at segment boundaries.
    #[default]
    Boundaries,
}

#[derive(Debug, Clone, Copy)]
pub struct EvolveOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: u64,
    /// Intermediate (t, populations, purity) records per segment; 0 records
    /// segment boundaries only.
    pub samples_per_segment: usize,
    pub positivity: PositivityCheck,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-9,
            atol: 1e-9,
            max_steps: 50_000_000,
            samples_per_segment: 0,
            positivity: PositivityCheck::Boundaries,
        }
    }
}

impl EvolveOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            rtol: tol,
            atol: tol,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        for tol in [self.rtol, self.atol] {
            if !(1e-12..=1e-4).contains(&tol) {
                return Err(DynamicsError::BadTolerance(tol));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IntegratorStats {
    pub steps_accepted: u64,
    pub steps_rejected: u64,
    pub rhs_evals: u64,
    pub min_step: f64,
    pub max_step: f64,
    pub rhs_seconds: f64,
    pub stage_seconds: f64,
}

/// Light per-sample record for trajectory dumps.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub t: f64,
    pub populations: Vec<f64>,
    pub purity: f64,
}

#[derive(Debug)]
pub struct Trajectory {
    /// Segment boundary times, 0 and every segment end.
    pub times: Vec<f64>,
    /// States at those times.
    pub states: Vec<DensityMatrix>,
    /// Dense records: boundaries plus any requested intermediate samples.
    pub samples: Vec<SampleRecord>,
    pub stats: IntegratorStats,
}

impl Trajectory {
    pub fn final_state(&self) -> &DensityMatrix {
        self.states.last().expect("at least the initial state")
    }
}

fn sample_of(t: f64, y: &Array2<C64>) -> SampleRecord {
    let populations: Vec<f64> = y.diag().iter().map(|v| v.re).collect();
    let purity = y.iter().map(|v| v.norm_sqr()).sum();
    SampleRecord {
        t,
        populations,
        purity,
    }
}

/// Butcher tableau of the Dormand-Prince 5(4) pair.
mod dp5 {
    pub const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
    pub const A2: [f64; 1] = [0.2];
    pub const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
    pub const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
    pub const A5: [f64; 4] = [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
    ];
    pub const A6: [f64; 5] = [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
    ];
    /// Fifth-order weights (also the a₇ row: FSAL).
    pub const B: [f64; 6] = [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ];
    /// B − B̂ (error weights, including the k₇ term).
    pub const E: [f64; 7] = [
        35.0 / 384.0 - 5179.0 / 57600.0,
        0.0,
        500.0 / 1113.0 - 7571.0 / 16695.0,
        125.0 / 192.0 - 393.0 / 640.0,
        -2187.0 / 6784.0 + 92097.0 / 339200.0,
        11.0 / 84.0 - 187.0 / 2100.0,
        -1.0 / 40.0,
    ];
}

struct StepWorkspace {
    k: Vec<Vec<C64>>,
    y_stage: Vec<C64>,
    y_new: Vec<C64>,
}

impl StepWorkspace {
    fn new(n: usize) -> Self {
        Self {
            k: (0..7).map(|_| vec![C64::new(0.0, 0.0); n]).collect(),
            y_stage: vec![C64::new(0.0, 0.0); n],
            y_new: vec![C64::new(0.0, 0.0); n],
        }
    }
}

/// dst = y0 + h·Σ w_s·k_s in a single pass over the arrays.
fn weighted_sum(dst: &mut [C64], y0: &[C64], h: f64, ks: &[&[C64]], weights: &[f64]) {
    let n = dst.len();
    let active: Vec<(&[C64], f64)> = ks
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w != 0.0)
        .map(|(k, &w)| (&k[..n], h * w))
        .collect();
    for i in 0..n {
        let mut acc = y0[i];
        for &(k, c) in &active {
            let v = k[i];
            acc.re += c * v.re;
            acc.im += c * v.im;
        }
        dst[i] = acc;
    }
}

/// Weighted RMS error norm with sc_i = atol + rtol·max(|y0_i|, |y1_i|).
fn error_norm(y0: &[C64], y1: &[C64], ks: &[&[C64]], h: f64, rtol: f64, atol: f64) -> f64 {
    let n = y0.len();
    let active: Vec<(&[C64], f64)> = ks
        .iter()
        .zip(&dp5::E)
        .filter(|(_, &w)| w != 0.0)
        .map(|(k, &w)| (&k[..n], h * w))
        .collect();
    let mut acc = 0.0_f64;
    for i in 0..n {
        let mut er = 0.0_f64;
        let mut ei = 0.0_f64;
        for &(k, c) in &active {
            let v = k[i];
            er += c * v.re;
            ei += c * v.im;
        }
        let mag = y0[i].norm_sqr().max(y1[i].norm_sqr()).sqrt();
        let sc = atol + rtol * mag;
        let q2 = (er * er + ei * ei) / (sc * sc);
        acc += q2;
    }
    (acc / n as f64).sqrt()
}

fn hermitize(y: &mut [C64], d: usize) {
    for i in 0..d {
        for j in (i + 1)..d {
            let a = y[i * d + j];
            let b = y[j * d + i];
            let re = 0.5 * (a.re + b.re);
            let dim = 0.5 * (a.im - b.im);
            y[i * d + j] = C64::new(re, dim);
            y[j * d + i] = C64::new(re, -dim);
        }
        y[i * d + i] = C64::new(y[i * d + i].re, 0.0);
    }
}

/// Magnitude floor for state entries: anything smaller is truncation dust.
/// Zeroing it keeps the stage arithmetic out of subnormal range, where this
/// hardware runs orders of magnitude slower; the floor sits ~200 decades
/// below the solver tolerance and ~200 above the subnormal threshold, so
/// within-step products and sums of surviving entries stay normal.
const FLUSH_FLOOR: f64 = 1e-100;

fn flush_tiny(y: &mut [C64]) {
    for v in y.iter_mut() {
        if v.re.abs() < FLUSH_FLOOR {
            v.re = 0.0;
        }
        if v.im.abs() < FLUSH_FLOOR {
            v.im = 0.0;
        }
    }
}

fn trace_of(y: &[C64], d: usize) -> C64 {
    (0..d).map(|i| y[i * d + i]).sum()
}

fn min_diag(y: &[C64], d: usize) -> f64 {
    (0..d)
        .map(|i| y[i * d + i].re)
        .fold(f64::INFINITY, f64::min)
}

/// Trace-deviation bound enforced at every accepted step.
const TRACE_DRIFT_TOL: f64 = 1e-8;

/// Eigenvalue (and diagonal-proxy) floor enforced during integration.
///
/// Truncation noise accumulates in the near-null eigenspace roughly as
/// atol·dim·√steps, so the floor scales with the requested tolerance; a
/// genuine positivity failure (wrong jump direction, sign error in a rate)
/// grows with the physical rates and clears this floor quickly.
fn positivity_floor(atol: f64) -> f64 {
    (3.0e4 * atol).max(1e-7)
}

/// Integrates ϱ̇ over the schedule with the given dissipators.
///
/// Returns boundary states for every segment plus optional intermediate
/// samples. The integrator is deterministic: identical inputs produce
/// identical output bits on one platform.
pub fn evolve(
    rho0: &DensityMatrix,
    schedule: &HamiltonianSchedule,
    dissipators: &[Dissipator],
    opts: &EvolveOptions,
) -> Result<Trajectory> {
    opts.validate()?;
    let layout = schedule.layout();
    if rho0.layout() != layout {
        return Err(DynamicsError::LayoutMismatch);
    }
    let d = layout.total_dim();
    let n = d * d;
    let prepared = prepare_dissipators(layout, dissipators)?;

    let mut y: Vec<C64> = rho0.entries().iter().copied().collect();
    flush_tiny(&mut y);
    let mut t_global = 0.0_f64;
    let total = schedule.total_duration();

    let mut stats = IntegratorStats {
        min_step: f64::INFINITY,
        ..Default::default()
    };
    let mut times = vec![0.0];
    let mut states = vec![rho0.clone()];
    let mut samples = vec![sample_of(0.0, rho0.entries())];

    let mut ws = StepWorkspace::new(n);

    for segment in schedule.segments() {
        if let SegmentGenerator::Evaluator { .. } = segment.generator {
            let h0 = segment.generator.evaluate(0.0);
            let dev = h0.hermiticity_deviation();
            if dev > 1e-10 * h0.max_abs().max(f64::MIN_POSITIVE) {
                return Err(DynamicsError::NotHermitian {
                    label: segment.label.clone(),
                    dev,
                });
            }
        }
        let mut engine = RhsEngine::new(&segment.generator, &prepared);
        integrate_segment(
            &mut y,
            &mut engine,
            &mut ws,
            segment.duration,
            t_global,
            opts,
            &mut stats,
            &mut samples,
            total,
        )?;
        t_global += segment.duration;

        let arr = Array2::from_shape_vec((d, d), y.clone()).expect("sized");
        let state = DensityMatrix::from_trusted(OperatorMatrix::new(layout.clone(), arr)?);
        if opts.positivity == PositivityCheck::Boundaries
            && state.check_positivity(positivity_floor(opts.atol)).is_err()
        {
            let min_eig = crate::linalg::min_eigenvalue(state.entries()).unwrap_or(f64::NAN);
            return Err(DynamicsError::PositivityViolation {
                t: t_global,
                min_eig,
            });
        }
        samples.push(sample_of(t_global, state.entries()));
        times.push(t_global);
        states.push(state);
    }

    Ok(Trajectory {
        times,
        states,
        samples,
        stats,
    })
}

/// Spec-shaped convenience wrapper: single tolerance, default options.
pub fn evolve_with_tol(
    rho0: &DensityMatrix,
    schedule: &HamiltonianSchedule,
    dissipators: &[Dissipator],
    tol: f64,
) -> Result<Trajectory> {
    evolve(rho0, schedule, dissipators, &EvolveOptions::with_tol(tol))
}

#[allow(clippy::too_many_arguments)]
fn integrate_segment(
    y: &mut Vec<C64>,
    engine: &mut RhsEngine<'_>,
    ws: &mut StepWorkspace,
    duration: f64,
    t_offset: f64,
    opts: &EvolveOptions,
    stats: &mut IntegratorStats,
    samples: &mut Vec<SampleRecord>,
    total_duration: f64,
) -> Result<()> {
    let d = engine.d;
    let (rtol, atol) = (opts.rtol, opts.atol);

    // Interior sample targets (exclusive of the boundary, which the caller
    // records).
    let n_samples = opts.samples_per_segment;
    let mut next_sample_idx = 1usize;
    let sample_time = |idx: usize| duration * idx as f64 / (n_samples + 1) as f64;

    let mut t = 0.0_f64;
    engine.rhs(t, y, &mut ws.k[0]);
    flush_tiny(&mut ws.k[0]);
    stats.rhs_evals += 1;

    // Initial step size: curvature probe scaled by the solution norm.
    let mut h = initial_step(y, &ws.k[0], engine, t, rtol, atol, duration, stats);

    let h_floor = total_duration * 1e-13;
    let mut errold = 1e-4_f64;
    let mut just_rejected = false;

    loop {
        let remaining = duration - t;
        if remaining <= duration * 1e-14 {
            break;
        }
        // Clamp to the next sample target or the segment end.
        let mut t_target = duration;
        if n_samples > 0 && next_sample_idx <= n_samples {
            t_target = sample_time(next_sample_idx).min(duration);
        }
        let mut hitting_target = false;
        if t + h >= t_target - duration * 1e-14 {
            h = t_target - t;
            hitting_target = true;
        }
        if h < h_floor {
            return Err(DynamicsError::StepSizeUnderflow {
                t: t_offset + t,
                h,
            });
        }
        if stats.steps_accepted + stats.steps_rejected >= opts.max_steps {
            return Err(DynamicsError::MaxStepsExceeded {
                t: t_offset + t,
                max_steps: opts.max_steps,
            });
        }

        // Stages 2..6.
        let a_rows: [&[f64]; 5] = [&dp5::A2, &dp5::A3, &dp5::A4, &dp5::A5, &dp5::A6];
        for (stage, a_row) in a_rows.iter().enumerate() {
            let s0 = std::time::Instant::now();
            let ks: Vec<&[C64]> = (0..=stage).map(|i| ws.k[i].as_slice()).collect();
            weighted_sum(&mut ws.y_stage, y, h, &ks, a_row);
            stats.stage_seconds += s0.elapsed().as_secs_f64();
            let (head, tail) = ws.k.split_at_mut(stage + 1);
            let _ = head;
            let s1 = std::time::Instant::now();
            engine.rhs(t + dp5::C[stage + 1] * h, &ws.y_stage, &mut tail[0]);
            stats.rhs_seconds += s1.elapsed().as_secs_f64();
            stats.rhs_evals += 1;
        }
        // 5th-order solution (a₇ = b row), hermitized before the FSAL stage.
        let s0 = std::time::Instant::now();
        {
            let ks: Vec<&[C64]> = (0..6).map(|i| ws.k[i].as_slice()).collect();
            weighted_sum(&mut ws.y_new, y, h, &ks, &dp5::B);
        }
        hermitize(&mut ws.y_new, d);
        stats.stage_seconds += s0.elapsed().as_secs_f64();
        {
            let (head, tail) = ws.k.split_at_mut(6);
            let _ = head;
            let s1 = std::time::Instant::now();
            engine.rhs(t + h, &ws.y_new, &mut tail[0]);
            stats.rhs_seconds += s1.elapsed().as_secs_f64();
            stats.rhs_evals += 1;
        }
        let s0 = std::time::Instant::now();
        let ks_all: Vec<&[C64]> = (0..7).map(|i| ws.k[i].as_slice()).collect();
        let err = error_norm(y, &ws.y_new, &ks_all, h, rtol, atol);
        stats.stage_seconds += s0.elapsed().as_secs_f64();

        if err <= 1.0 {
            // Accept.
            t += h;
            std::mem::swap(y, &mut ws.y_new);
            ws.k.swap(0, 6); // FSAL
            flush_tiny(y);
            flush_tiny(&mut ws.k[0]);
            stats.steps_accepted += 1;
            stats.min_step = stats.min_step.min(h);
            stats.max_step = stats.max_step.max(h);

            let tr = trace_of(y, d);
            let dev = (tr - C64::new(1.0, 0.0)).norm();
            if dev > TRACE_DRIFT_TOL {
                return Err(DynamicsError::TraceDrift {
                    t: t_offset + t,
                    dev,
                });
            }
            let md = min_diag(y, d);
            if md < -positivity_floor(opts.atol) {
                return Err(DynamicsError::PositivityViolation {
                    t: t_offset + t,
                    min_eig: md,
                });
            }
            if hitting_target && n_samples > 0 && next_sample_idx <= n_samples {
                if (t - sample_time(next_sample_idx)).abs() <= duration * 1e-13 {
                    let arr = ndarray::ArrayView2::from_shape((d, d), y).expect("sized");
                    samples.push(sample_of(t_offset + t, &arr.to_owned()));
                    next_sample_idx += 1;
                }
            }

            let fac = (0.9 * err.max(1e-12).powf(-0.17) * errold.powf(0.04))
                .clamp(0.2, if just_rejected { 1.0 } else { 5.0 });
            h *= fac;
            errold = err.max(1e-4);
            just_rejected = false;
        } else {
            stats.steps_rejected += 1;
            let fac = (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
            h *= fac;
            just_rejected = true;
        }
        h = h.min(duration);
    }
    Ok(())
}

/// Hairer-style initial step heuristic, capped by the segment length.
#[allow(clippy::too_many_arguments)]
fn initial_step(
    y: &[C64],
    f0: &[C64],
    engine: &mut RhsEngine<'_>,
    t: f64,
    rtol: f64,
    atol: f64,
    duration: f64,
    stats: &mut IntegratorStats,
) -> f64 {
    let n = y.len();
    let sc = |yi: C64| atol + rtol * yi.norm();
    let mut d0 = 0.0_f64;
    let mut d1 = 0.0_f64;
    for i in 0..n {
        let s = sc(y[i]);
        let a = y[i].norm() / s;
        let b = f0[i].norm() / s;
        d0 += a * a;
        d1 += b * b;
    }
    d0 = (d0 / n as f64).sqrt();
    d1 = (d1 / n as f64).sqrt();
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6 * duration
    } else {
        0.01 * d0 / d1
    }
    .min(duration);

    let mut y1 = vec![C64::new(0.0, 0.0); n];
    for i in 0..n {
        y1[i] = y[i] + C64::new(h0, 0.0) * f0[i];
    }
    let mut f1 = vec![C64::new(0.0, 0.0); n];
    engine.rhs(t + h0, &y1, &mut f1);
    stats.rhs_evals += 1;
    let mut d2 = 0.0_f64;
    for i in 0..n {
        let s = sc(y[i]);
        let q = (f1[i] - f0[i]).norm() / s;
        d2 += q * q;
    }
    d2 = (d2 / n as f64).sqrt() / h0;

    let dm = d1.max(d2);
    let h1 = if dm <= 1e-15 {
        (h0 * 1e-3).max(1e-6 * duration)
    } else {
        (0.01 / dm).powf(0.2)
    };
    (100.0 * h0).min(h1).min(duration)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{annihilation, SpaceLayout};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn cavity_rho(dim: usize, level: usize) -> DensityMatrix {
        let layout = SpaceLayout::single(dim).unwrap();
        let mut psi = Array1::zeros(dim);
        psi[level] = c(1.0, 0.0);
        DensityMatrix::pure(&psi, layout).unwrap()
    }

    fn zero_h(layout: &SpaceLayout) -> OperatorMatrix {
        OperatorMatrix::zeros(layout.clone())
    }

    fn random_density(rng: &mut ChaCha8Rng, layout: &SpaceLayout) -> DensityMatrix {
        let d = layout.total_dim();
        let mut m = Array2::<C64>::zeros((d, d));
        for &w in &[0.5, 0.3, 0.2] {
            let mut psi: Array1<C64> = Array1::from_shape_fn(d, |_| {
                c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
            });
            let norm: f64 = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            psi.mapv_inplace(|z| z / norm);
            for i in 0..d {
                for j in 0..d {
                    m[(i, j)] += psi[i] * psi[j].conj() * w;
                }
            }
        }
        DensityMatrix::new(OperatorMatrix::new(layout.clone(), m).unwrap()).unwrap()
    }

    fn random_hermitian(rng: &mut ChaCha8Rng, dim: usize) -> Array2<C64> {
        let mut a = Array2::<C64>::zeros((dim, dim));
        for i in 0..dim {
            for j in 0..dim {
                a[(i, j)] = c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
            }
        }
        let ad = a.t().mapv(|v| v.conj());
        (&a + &ad).mapv(|v| v * 0.5)
    }

    #[test]
    fn rhs_single_photon_decay() {
        let kappa = 2.0;
        let layout = SpaceLayout::single(3).unwrap();
        let a = annihilation(3);
        let dis = Dissipator::down(a, kappa).unwrap();
        let rho = cavity_rho(3, 1);
        let dot = lindblad_rhs(&rho, &zero_h(&layout), &[dis]).unwrap();
        assert_relative_eq!(dot.entries()[(1, 1)].re, -kappa, max_relative = 1e-12);
        assert_relative_eq!(dot.entries()[(0, 0)].re, kappa, max_relative = 1e-12);
    }

    #[test]
    fn rhs_is_traceless_and_hermitian() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layout = SpaceLayout::new(vec![3, 4]).unwrap();
        for _ in 0..25 {
            let rho = random_density(&mut rng, &layout);
            let h = OperatorMatrix::new(layout.clone(), random_hermitian(&mut rng, 12)).unwrap();
            let d1 = Dissipator::site_local(
                &layout,
                0,
                annihilation(3).into_entries(),
                0.7,
                Direction::Down,
            )
            .unwrap();
            let d2 = Dissipator::site_local(
                &layout,
                1,
                annihilation(4).into_entries(),
                0.3,
                Direction::Up,
            )
            .unwrap();
            let dot = lindblad_rhs(&rho, &h, &[d1, d2]).unwrap();
            assert!(dot.trace().norm() < 1e-12 * dot.max_abs().max(1.0));
            assert!(dot.hermiticity_deviation() < 1e-10 * dot.max_abs());
        }
    }

    #[test]
    fn structured_engine_matches_dense_rhs() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let layout = SpaceLayout::new(vec![3, 3, 4]).unwrap();
        let d = layout.total_dim();

        let mut h = StructuredHamiltonian::new(layout.clone());
        h.add_site_diagonal(0, &[0.0, 1.1, 2.5]).unwrap();
        h.add_site_diagonal(2, &[0.0, -2.0, -4.0, -6.0]).unwrap();
        h.add_local_term(
            1,
            random_hermitian(&mut rng, 3),
            Coeff::modulated(
                0.8,
                Carrier {
                    omega: 3.0,
                    phase: 0.4,
                    t_origin: 0.15,
                },
            ),
        )
        .unwrap();
        h.add_local_term(0, random_hermitian(&mut rng, 3), Coeff::constant(0.35))
            .unwrap();
        h.add_pair_term(
            2,
            random_hermitian(&mut rng, 4),
            0,
            random_hermitian(&mut rng, 3),
            0.6,
        )
        .unwrap();
        h.add_pair_term(
            2,
            random_hermitian(&mut rng, 4),
            1,
            random_hermitian(&mut rng, 3),
            -0.25,
        )
        .unwrap();

        let dissipators = vec![
            Dissipator::site_local(&layout, 0, annihilation(3).into_entries(), 0.4, Direction::Down)
                .unwrap(),
            Dissipator::site_local(&layout, 0, annihilation(3).into_entries(), 0.1, Direction::Up)
                .unwrap(),
            Dissipator::site_local(&layout, 2, annihilation(4).into_entries(), 0.9, Direction::Down)
                .unwrap(),
        ];
        let prepared = prepare_dissipators(&layout, &dissipators).unwrap();
        let generator = SegmentGenerator::Structured(h);
        let mut engine = RhsEngine::new(&generator, &prepared);

        for trial in 0..10 {
            let t = 0.3 * trial as f64;
            let rho = random_density(&mut rng, &layout);
            let dense = lindblad_rhs(&rho, &generator.evaluate(t), &dissipators).unwrap();
            let y: Vec<C64> = rho.entries().iter().copied().collect();
            let mut out = vec![c(0.0, 0.0); d * d];
            engine.rhs(t, &y, &mut out);
            let scale = dense.max_abs().max(1.0);
            for (i, v) in dense.entries().iter().enumerate() {
                assert!(
                    (out[i] - v).norm() < 1e-12 * scale,
                    "entry {i}: engine {} vs dense {v}",
                    out[i]
                );
            }
        }
    }

    #[test]
    fn evolve_identity_without_generators() {
        let layout = SpaceLayout::new(vec![2, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rho = random_density(&mut rng, &layout);
        let seg = ScheduleSegment::new(
            1.0,
            "idle",
            SegmentGenerator::Constant(zero_h(&layout)),
        )
        .unwrap();
        let traj = evolve_with_tol(&rho, &HamiltonianSchedule::single(seg).unwrap(), &[], 1e-9)
            .unwrap();
        let out = traj.final_state();
        for (a, b) in out.entries().iter().zip(rho.entries().iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn evolve_rabi_pi_pulse() {
        // H = (Ω_R/2)σx for T = π/Ω_R moves |0⟩ to |1⟩ exactly.
        let layout = SpaceLayout::single(2).unwrap();
        let omega_r = 2.0 * std::f64::consts::PI * 1.3e6;
        let mut sx = Array2::<C64>::zeros((2, 2));
        sx[(0, 1)] = c(1.0, 0.0);
        sx[(1, 0)] = c(1.0, 0.0);
        let h = OperatorMatrix::new(layout.clone(), sx.mapv(|v| v * 0.5 * omega_r)).unwrap();
        let rho = cavity_rho(2, 0);
        let tol = 1e-10;
        let seg = ScheduleSegment::new(
            std::f64::consts::PI / omega_r,
            "rabi",
            SegmentGenerator::Constant(h),
        )
        .unwrap();
        let traj =
            evolve_with_tol(&rho, &HamiltonianSchedule::single(seg).unwrap(), &[], tol).unwrap();
        let p1 = traj.final_state().populations()[1];
        assert!(
            (p1 - 1.0).abs() < 10.0 * tol,
            "π-pulse transfer {p1} misses 1 by {}",
            (p1 - 1.0).abs()
        );
    }

    #[test]
    fn evolve_damped_cavity_decay() {
        let layout = SpaceLayout::single(4).unwrap();
        let kappa = 3.0e5;
        let a = annihilation(4);
        let dis = Dissipator::site_local(&layout, 0, a.entries().clone(), kappa, Direction::Down)
            .unwrap();
        let rho = cavity_rho(4, 1);
        let tol = 1e-9;
        for t_final in [0.3 / kappa, 1.0 / kappa, 3.0 / kappa] {
            let seg = ScheduleSegment::new(
                t_final,
                "decay",
                SegmentGenerator::Constant(zero_h(&layout)),
            )
            .unwrap();
            let traj = evolve_with_tol(
                &rho,
                &HamiltonianSchedule::single(seg).unwrap(),
                std::slice::from_ref(&dis),
                tol,
            )
            .unwrap();
            let p1 = traj.final_state().populations()[1];
            let expect = (-kappa * t_final).exp();
            assert!(
                (p1 - expect).abs() < 10.0 * tol,
                "ρ₁₁({t_final}) = {p1}, closed form {expect}"
            );
        }
    }

    #[test]
    fn evolve_thermal_fixed_point() {
        // Up/down thermal pair drives the mode to the truncated geometric
        // distribution with mean ≈ n̄.
        let n_bar = 0.5;
        let gamma = 1.0e4;
        let dim = 10;
        let layout = SpaceLayout::single(dim).unwrap();
        let a = annihilation(dim);
        let down = Dissipator::site_local(
            &layout,
            0,
            a.entries().clone(),
            gamma * (n_bar + 1.0),
            Direction::Down,
        )
        .unwrap();
        let up = Dissipator::site_local(&layout, 0, a.entries().clone(), gamma * n_bar, Direction::Up)
            .unwrap();
        let rho = cavity_rho(dim, 0);
        let seg = ScheduleSegment::new(
            20.0 / gamma,
            "thermalize",
            SegmentGenerator::Constant(zero_h(&layout)),
        )
        .unwrap();
        let traj = evolve_with_tol(
            &rho,
            &HamiltonianSchedule::single(seg).unwrap(),
            &[down, up],
            1e-9,
        )
        .unwrap();
        let pops = traj.final_state().populations();
        let mean: f64 = pops.iter().enumerate().map(|(n, p)| n as f64 * p).sum();
        assert!(
            (mean - n_bar).abs() < 1e-3,
            "steady occupation {mean} vs n̄ = {n_bar}"
        );
        // Detailed balance of the truncated chain: exact geometric ratios.
        let r = n_bar / (n_bar + 1.0);
        for n in 0..dim - 1 {
            assert_relative_eq!(pops[n + 1] / pops[n], r, max_relative = 1e-4);
        }
    }

    #[test]
    fn unitary_evolution_preserves_purity() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let layout = SpaceLayout::new(vec![3, 3]).unwrap();
        let h = OperatorMatrix::new(
            layout.clone(),
            random_hermitian(&mut rng, 9).mapv(|v| v * 1.0e6),
        )
        .unwrap();
        let rho = random_density(&mut rng, &layout);
        let p0 = rho.purity();
        // Tolerance is set so accumulated dissipative truncation error stays
        // well under the 1e-8 purity budget (global error scales ~ tol·N).
        let seg =
            ScheduleSegment::new(2.0e-5, "unitary", SegmentGenerator::Constant(h)).unwrap();
        let traj =
            evolve_with_tol(&rho, &HamiltonianSchedule::single(seg).unwrap(), &[], 1e-10)
                .unwrap();
        assert!(
            (traj.final_state().purity() - p0).abs() < 1e-8,
            "purity drift {}",
            (traj.final_state().purity() - p0).abs()
        );
    }

    #[test]
    fn tolerance_halving_tightens_result() {
        // Damped driven qubit; deviation from a tol=1e-12 reference must not
        // grow as tol halves.
        let layout = SpaceLayout::single(2).unwrap();
        let omega_r = 1.0e6;
        let mut sx = Array2::<C64>::zeros((2, 2));
        sx[(0, 1)] = c(1.0, 0.0);
        sx[(1, 0)] = c(1.0, 0.0);
        let h = OperatorMatrix::new(layout.clone(), sx.mapv(|v| v * 0.5 * omega_r)).unwrap();
        let dis = Dissipator::site_local(
            &layout,
            0,
            annihilation(2).into_entries(),
            0.05 * omega_r,
            Direction::Down,
        )
        .unwrap();
        let rho = cavity_rho(2, 0);
        let run = |tol: f64| {
            let seg = ScheduleSegment::new(
                8.0 / omega_r,
                "driven",
                SegmentGenerator::Constant(h.clone()),
            )
            .unwrap();
            evolve_with_tol(
                &rho,
                &HamiltonianSchedule::single(seg).unwrap(),
                std::slice::from_ref(&dis),
                tol,
            )
            .unwrap()
        };
        let reference = run(1e-12);
        let devs: Vec<f64> = [4.0e-6, 2.0e-6, 1.0e-6, 5.0e-7, 2.5e-7]
            .iter()
            .map(|&tol| {
                let traj = run(tol);
                traj.final_state()
                    .entries()
                    .iter()
                    .zip(reference.final_state().entries().iter())
                    .map(|(a, b)| (a - b).norm_sqr())
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        for w in devs.windows(2) {
            assert!(
                w[1] <= w[0] * 1.05,
                "halving tol must not worsen the result: {devs:?}"
            );
        }
        assert!(devs.last().unwrap() < &devs[0]);
    }

    #[test]
    fn integration_is_deterministic() {
        let layout = SpaceLayout::new(vec![2, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let h = OperatorMatrix::new(
            layout.clone(),
            random_hermitian(&mut rng, 4).mapv(|v| v * 2.0e5),
        )
        .unwrap();
        let dis = Dissipator::site_local(
            &layout,
            1,
            annihilation(2).into_entries(),
            1.0e4,
            Direction::Down,
        )
        .unwrap();
        let rho = random_density(&mut rng, &layout);
        let run = || {
            let seg = ScheduleSegment::new(
                1.0e-4,
                "det",
                SegmentGenerator::Constant(h.clone()),
            )
            .unwrap();
            evolve_with_tol(
                &rho,
                &HamiltonianSchedule::single(seg).unwrap(),
                std::slice::from_ref(&dis),
                1e-8,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        for (x, y) in a
            .final_state()
            .entries()
            .iter()
            .zip(b.final_state().entries().iter())
        {
            assert_eq!(x, y, "bit-identical repeat runs");
        }
        assert_eq!(a.stats.steps_accepted, b.stats.steps_accepted);
    }

    #[test]
    fn evaluator_segment_matches_constant() {
        let layout = SpaceLayout::single(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let hm = random_hermitian(&mut rng, 3).mapv(|v| v * 1.0e5);
        let h = OperatorMatrix::new(layout.clone(), hm.clone()).unwrap();
        let rho = random_density(&mut rng, &layout);
        let run = |generator: SegmentGenerator| {
            let seg = ScheduleSegment::new(5.0e-5, "x", generator).unwrap();
            evolve_with_tol(&rho, &HamiltonianSchedule::single(seg).unwrap(), &[], 1e-10).unwrap()
        };
        let c1 = run(SegmentGenerator::Constant(h.clone()));
        let layout2 = layout.clone();
        let c2 = run(SegmentGenerator::Evaluator {
            layout,
            eval: Box::new(move |_t| {
                OperatorMatrix::new(layout2.clone(), hm.clone()).unwrap()
            }),
        });
        for (x, y) in c1
            .final_state()
            .entries()
            .iter()
            .zip(c2.final_state().entries().iter())
        {
            assert!((x - y).norm() < 1e-11);
        }
    }

    #[test]
    fn carrier_modulated_structured_segment_runs_exactly() {
        // Structured segment with a carrier vs the generic evaluator path on
        // the same physics: both integrate cos-modulated σx.
        let layout = SpaceLayout::single(2).unwrap();
        let omega = 5.0e6;
        let amp = 1.0e5;
        let mut sx = Array2::<C64>::zeros((2, 2));
        sx[(0, 1)] = c(1.0, 0.0);
        sx[(1, 0)] = c(1.0, 0.0);
        let mut h = StructuredHamiltonian::new(layout.clone());
        h.add_local_term(
            0,
            sx.clone(),
            Coeff::modulated(
                amp,
                Carrier {
                    omega,
                    phase: 0.3,
                    t_origin: 0.0,
                },
            ),
        )
        .unwrap();
        let rho = cavity_rho(2, 0);
        let t_final = 4.0e-6;
        let seg_s = ScheduleSegment::new(t_final, "mod", SegmentGenerator::Structured(h)).unwrap();
        let traj_s =
            evolve_with_tol(&rho, &HamiltonianSchedule::single(seg_s).unwrap(), &[], 1e-10)
                .unwrap();
        let layout2 = layout.clone();
        let seg_e = ScheduleSegment::new(
            t_final,
            "mod",
            SegmentGenerator::Evaluator {
                layout: layout.clone(),
                eval: Box::new(move |t| {
                    OperatorMatrix::new(
                        layout2.clone(),
                        sx.mapv(|v| v * (amp * (omega * t - 0.3).cos())),
                    )
                    .unwrap()
                }),
            },
        )
        .unwrap();
        let traj_e =
            evolve_with_tol(&rho, &HamiltonianSchedule::single(seg_e).unwrap(), &[], 1e-10)
                .unwrap();
        for (x, y) in traj_s
            .final_state()
            .entries()
            .iter()
            .zip(traj_e.final_state().entries().iter())
        {
            assert!((x - y).norm() < 1e-9);
        }
    }

    #[test]
    fn option_validation_and_guards() {
        let layout = SpaceLayout::single(2).unwrap();
        let rho = cavity_rho(2, 0);
        let seg = || {
            ScheduleSegment::new(1.0, "idle", SegmentGenerator::Constant(zero_h(&layout)))
                .unwrap()
        };
        assert!(matches!(
            evolve_with_tol(&rho, &HamiltonianSchedule::single(seg()).unwrap(), &[], 1e-3),
            Err(DynamicsError::BadTolerance(_))
        ));
        assert!(matches!(
            Dissipator::down(zero_h(&layout), -1.0),
            Err(DynamicsError::NegativeRate(_))
        ));
        assert!(matches!(
            ScheduleSegment::new(0.0, "zero", SegmentGenerator::Constant(zero_h(&layout))),
            Err(DynamicsError::BadDuration(_))
        ));
        // Step budget enforcement.
        let mut sx = Array2::<C64>::zeros((2, 2));
        sx[(0, 1)] = c(1.0, 0.0);
        sx[(1, 0)] = c(1.0, 0.0);
        let h = OperatorMatrix::new(layout.clone(), sx.mapv(|v| v * 1.0e6)).unwrap();
        let opts = EvolveOptions {
            max_steps: 3,
            ..EvolveOptions::with_tol(1e-10)
        };
        let seg = ScheduleSegment::new(1.0, "long", SegmentGenerator::Constant(h)).unwrap();
        assert!(matches!(
            evolve(&rho, &HamiltonianSchedule::single(seg).unwrap(), &[], &opts),
            Err(DynamicsError::MaxStepsExceeded { .. })
        ));
    }

    /// Per-phase RHS cost at register scale (four qubits plus cavity). Run
    /// explicitly: `cargo test --release -- --ignored rhs_phases --nocapture`.
    #[test]
    #[ignore]
    fn bench_rhs_phases() {
        use crate::consts::TWO_PI;
        use std::time::Instant;
        let n_q = 4;
        let n_c = 5;
        let mut dims = vec![3usize; n_q];
        dims.push(n_c);
        let layout = SpaceLayout::new(dims).unwrap();
        let d = layout.total_dim();
        let n = d * d;
        let params =
            crate::spectrum::calibrate_beam(TWO_PI * 26.6e6, TWO_PI * 2.71e6, 200).unwrap();
        let spec = crate::spectrum::spectrum_of(&params, 0.0, 3).unwrap();
        let delta = TWO_PI * 0.399e9;
        let g = TWO_PI * 8.73e6;
        let kappa = TWO_PI * 133.0e3;
        let energies: Vec<f64> = (0..3).map(|k| spec.energy(k)).collect();
        let x: Array2<C64> =
            Array2::from_shape_fn((3, 3), |(i, j)| c(spec.x_element(i, j), 0.0));
        let cav_diag: Vec<f64> = (0..n_c).map(|m| -delta * m as f64).collect();
        let a_op = annihilation(n_c);
        let x_c = {
            let ad = a_op.adjoint();
            a_op.add(&ad).unwrap().scaled(c(1.0 / 2.0_f64.sqrt(), 0.0))
        };

        let mut h = StructuredHamiltonian::new(layout.clone());
        for site in 0..n_q {
            h.add_site_diagonal(site, &energies).unwrap();
        }
        h.add_site_diagonal(n_q, &cav_diag).unwrap();
        for site in 0..n_q {
            h.add_pair_term(n_q, x_c.entries().clone(), site, x.clone(), g)
                .unwrap();
        }
        let mut diss = Vec::new();
        let bx = Array2::from_shape_fn((3, 3), |(i, j)| {
            if j == i + 1 {
                c(spec.x_element(i, j), 0.0)
            } else {
                c(0.0, 0.0)
            }
        });
        for site in 0..n_q {
            diss.push(
                Dissipator::site_local(&layout, site, bx.clone(), 760.0, Direction::Down)
                    .unwrap(),
            );
            diss.push(
                Dissipator::site_local(&layout, site, bx.clone(), 507.0, Direction::Up).unwrap(),
            );
        }
        diss.push(
            Dissipator::site_local(&layout, n_q, a_op.entries().clone(), kappa, Direction::Down)
                .unwrap(),
        );

        let prepared = prepare_dissipators(&layout, &diss).unwrap();
        assert!(prepared.k_diag.is_some());
        let generator = SegmentGenerator::Structured(h);
        let mut engine = RhsEngine::new(&generator, &prepared);

        let mut psi = Array1::<C64>::zeros(d);
        psi[layout.ravel(&[1, 0, 0, 0, 0])] = c(0.7, 0.0);
        psi[layout.ravel(&[0, 1, 0, 0, 1])] = c(0.5, 0.3);
        psi[layout.ravel(&[0, 0, 0, 0, 0])] = c(0.4, -0.2);
        let norm: f64 = psi.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        psi.mapv_inplace(|v| v / norm);
        let rho_dm = DensityMatrix::pure(&psi, layout.clone()).unwrap();
        let rho: Vec<C64> = rho_dm.entries().iter().copied().collect();
        let mut out = vec![c(0.0, 0.0); n];

        fn time(label: &str, reps: usize, f: &mut dyn FnMut()) {
            let start = Instant::now();
            for _ in 0..reps {
                f();
            }
            let per = start.elapsed().as_secs_f64() / reps as f64;
            println!("{label:<24} {:8.3} ms", per * 1e3);
        }

        time("full rhs", 20, &mut || engine.rhs(1.0e-9, &rho, &mut out));
        let k_diag = prepared.k_diag.clone().unwrap();
        let mut drift = DriftApplier::new(&generator, &k_diag);
        let mut w = vec![c(0.0, 0.0); n];
        time("drift apply", 20, &mut || drift.apply(1.0e-9, &rho, &mut w, d));
        time("hermitian fold", 50, &mut || {
            kernels::hermitian_fold_write(&mut out, &w, d)
        });
        time("all jumps", 20, &mut || {
            for jump in &prepared.jumps {
                if let PreparedJump::UniformShift {
                    delta,
                    rowpat,
                    col_idx,
                    col_val,
                    col_runs,
                    use_runs,
                } = jump
                {
                    kernels::uniform_shift_jump_apply(
                        &mut out, &rho, d, *delta, rowpat, col_idx, col_val, col_runs, *use_runs,
                    );
                }
            }
        });
        let ks: Vec<Vec<C64>> = (0..7)
            .map(|i| vec![c(0.001 * i as f64, 0.0005); n])
            .collect();
        let mut dst = vec![c(0.0, 0.0); n];
        let kr: Vec<&[C64]> = ks.iter().map(|k| k.as_slice()).collect();
        time("weighted_sum (6 k)", 20, &mut || {
            weighted_sum(&mut dst, &rho, 1e-10, &kr[..6], &dp5::B)
        });
        time("error_norm (7 k)", 20, &mut || {
            let _ = error_norm(&rho, &dst, &kr, 1e-10, 1e-8, 1e-8);
        });
        time("hermitize", 50, &mut || hermitize(&mut dst, d));
        time("memcpy", 50, &mut || dst.copy_from_slice(&rho));
        time("axpy full", 50, &mut || {
            kernels::axpy(&mut dst, &rho, c(1.000001, 0.0))
        });
        // Same RHS with the outer cache flushed between calls, as in a real
        // step where the stage arrays cycle through.
        let mut thrash = vec![0u8; 350 * 1024 * 1024];
        let mut sink = 0u64;
        let mut flush = |sink: &mut u64| {
            for chunk in thrash.chunks_mut(4096) {
                chunk[0] = chunk[0].wrapping_add(1);
                *sink += chunk[0] as u64;
            }
        };
        let mut total = 0.0;
        for _ in 0..10 {
            flush(&mut sink);
            let s = Instant::now();
            engine.rhs(1.0e-9, &rho, &mut out);
            total += s.elapsed().as_secs_f64();
        }
        println!("{:<24} {:8.3} ms (sink {})", "rhs cold", total / 10.0 * 1e3, sink % 2);
        let s = Instant::now();
        let me = crate::linalg::min_eigenvalue(rho_dm.entries()).unwrap();
        println!("{:<24} {:8.3} ms (min {me:.1e})", "eig check", s.elapsed().as_secs_f64() * 1e3);
        // Subnormal-filled state: the integrator's real states carry
        // truncation-level leakage everywhere, never exact zeros.
        let rho_sub: Vec<C64> = rho
            .iter()
            .map(|v| *v + C64::new(1.0e-310, -1.0e-310))
            .collect();
        time("rhs subnormal state", 10, &mut || {
            engine.rhs(1.0e-9, &rho_sub, &mut out)
        });
        let rho_eps: Vec<C64> = rho
            .iter()
            .map(|v| *v + C64::new(1.0e-30, -1.0e-30))
            .collect();
        time("rhs 1e-30 state", 10, &mut || {
            engine.rhs(1.0e-9, &rho_eps, &mut out)
        });
    }

    /// Gate-scale cost and purity probe on the physical two-qubit coupling
    /// Hamiltonian. Run explicitly: `cargo test -- --ignored gate_horizon`.
    #[test]
    #[ignore]
    fn bench_gate_horizon_purity() {
        use crate::consts::TWO_PI;
        let params =
            crate::spectrum::calibrate_beam(TWO_PI * 26.6e6, TWO_PI * 2.71e6, 200).unwrap();
        let spec = crate::spectrum::spectrum_of(&params, 0.0, 3).unwrap();
        let n_c = 5;
        let layout = SpaceLayout::new(vec![3, 3, n_c]).unwrap();
        let delta = TWO_PI * 0.399e9;
        let g = TWO_PI * 8.73e6;

        let energies: Vec<f64> = (0..3).map(|n| spec.energy(n)).collect();
        let x: Array2<C64> =
            Array2::from_shape_fn((3, 3), |(i, j)| c(spec.x_element(i, j), 0.0));
        let cav_diag: Vec<f64> = (0..n_c).map(|n| -delta * n as f64).collect();
        let a = annihilation(n_c);
        let x_c = {
            let ad = a.adjoint();
            a.add(&ad).unwrap().scaled(c(1.0 / 2.0_f64.sqrt(), 0.0))
        };

        let mut h = StructuredHamiltonian::new(layout.clone());
        for site in 0..2 {
            h.add_site_diagonal(site, &energies).unwrap();
        }
        h.add_site_diagonal(2, &cav_diag).unwrap();
        for site in 0..2 {
            h.add_pair_term(2, x_c.entries().clone(), site, x.clone(), g)
                .unwrap();
        }

        let mut psi = Array1::<C64>::zeros(layout.total_dim());
        psi[layout.ravel(&[1, 0, 0])] = c(1.0, 0.0);
        let rho = DensityMatrix::pure(&psi, layout.clone()).unwrap();

        let t_gate = 1.49e-6;
        for tol in [1e-9, 1e-10, 1e-11] {
            let seg =
                ScheduleSegment::new(t_gate, "swap", SegmentGenerator::Structured(h.clone()))
                    .unwrap();
            let opts = EvolveOptions {
                positivity: PositivityCheck::Off,
                ..EvolveOptions::with_tol(tol)
            };
            let start = std::time::Instant::now();
            let traj = evolve(
                &rho,
                &HamiltonianSchedule::single(seg).unwrap(),
                &[],
                &opts,
            )
            .unwrap();
            let wall = start.elapsed();
            let p = traj.final_state().purity();
            let min_eig = crate::linalg::min_eigenvalue(traj.final_state().entries()).unwrap();
            println!(
                "tol {tol:.0e}: wall {:.2?} steps {} (rej {}) rhs {} purity drift {:.3e} min_eig {:.3e} pops {:?}",
                wall,
                traj.stats.steps_accepted,
                traj.stats.steps_rejected,
                traj.stats.rhs_evals,
                (p - 1.0).abs(),
                min_eig,
                traj.final_state()
                    .partial_trace(&[0, 1])
                    .unwrap()
                    .populations()
                    .iter()
                    .map(|v| format!("{v:.4}"))
                    .collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn trajectory_sampling_grid() {
        let layout = SpaceLayout::single(3).unwrap();
        let kappa = 1.0e5;
        let dis = Dissipator::site_local(
            &layout,
            0,
            annihilation(3).into_entries(),
            kappa,
            Direction::Down,
        )
        .unwrap();
        let rho = cavity_rho(3, 1);
        let opts = EvolveOptions {
            samples_per_segment: 4,
            ..EvolveOptions::with_tol(1e-9)
        };
        let t_final = 2.0 / kappa;
        let seg = ScheduleSegment::new(
            t_final,
            "decay",
            SegmentGenerator::Constant(zero_h(&layout)),
        )
        .unwrap();
        let traj = evolve(
            &rho,
            &HamiltonianSchedule::single(seg).unwrap(),
            &[dis],
            &opts,
        )
        .unwrap();
        // Initial + 4 interior + boundary.
        assert_eq!(traj.samples.len(), 6);
        for (k, rec) in traj.samples.iter().enumerate() {
            let expect_t = t_final * k as f64 / 5.0;
            assert_relative_eq!(rec.t, expect_t, max_relative = 1e-10);
            assert_relative_eq!(
                rec.populations[1],
                (-kappa * rec.t).exp(),
                max_relative = 1e-6
            );
        }
    }
}
