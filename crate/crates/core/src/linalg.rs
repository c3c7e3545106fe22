//! Thin wrappers around LAPACK eigendecompositions with a deterministic
//! eigenvector sign convention.

use ndarray::prelude::*;
use ndarray_linalg::{Eigh, EighInto, EigValsh, UPLO};
use thiserror::Error;

use crate::C64;

pub type Result<T> = std::result::Result<T, LinalgError>;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("eigendecomposition failed: {0}")]
    EigFailed(String),
}

/// Eigenvalues and eigenvectors of a real symmetric matrix, eigenvalues
/// ascending, eigenvectors in columns.
///
/// Each eigenvector's sign is fixed so that its largest-magnitude component
/// is positive, making repeated runs bit-identical and independent of LAPACK
/// internals.
pub fn eigh_real(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let (vals, mut vecs) = a
        .eigh(UPLO::Lower)
        .map_err(|e| LinalgError::EigFailed(e.to_string()))?;
    for mut col in vecs.columns_mut() {
        let mut idx = 0;
        let mut best = 0.0_f64;
        for (i, &v) in col.iter().enumerate() {
            if v.abs() > best {
                best = v.abs();
                idx = i;
            }
        }
        if col[idx] < 0.0 {
            col.mapv_inplace(|v| -v);
        }
    }
    Ok((vals, vecs))
}

/// Eigenvalues of a real symmetric matrix, ascending. Eigenvalues-only path
/// for root-finding loops where eigenvectors would be wasted work.
pub fn eigvalsh_real(a: &Array2<f64>) -> Result<Array1<f64>> {
    a.eigvalsh(UPLO::Lower)
        .map_err(|e| LinalgError::EigFailed(e.to_string()))
}

/// Eigenvalues of a Hermitian complex matrix, ascending.
pub fn eigvalsh(a: &Array2<C64>) -> Result<Array1<f64>> {
    let (vals, _) = a
        .clone()
        .eigh_into(UPLO::Lower)
        .map_err(|e| LinalgError::EigFailed(e.to_string()))?;
    Ok(vals)
}

/// Eigenvalues and eigenvectors of a Hermitian complex matrix, ascending,
/// eigenvectors in columns with the largest-magnitude component rotated to
/// the positive real axis.
pub fn eigh_hermitian(a: &Array2<C64>) -> Result<(Array1<f64>, Array2<C64>)> {
    // The complex LAPACK path returns valid eigenvector columns only for
    // column-major input; a row-major matrix silently yields vectors of the
    // conjugated problem. Copy into column-major order first. (Eigenvalues
    // are unaffected either way, and the real-symmetric path is immune
    // because a real symmetric matrix equals its transpose.)
    let af = a.t().as_standard_layout().to_owned().reversed_axes();
    let (vals, mut vecs) = af
        .eigh_into(UPLO::Lower)
        .map_err(|e| LinalgError::EigFailed(e.to_string()))?;
    for mut col in vecs.columns_mut() {
        let mut idx = 0;
        let mut best = 0.0_f64;
        for (i, v) in col.iter().enumerate() {
            if v.norm_sqr() > best {
                best = v.norm_sqr();
                idx = i;
            }
        }
        let z = col[idx];
        let r = z.norm();
        if r > 0.0 {
            let phase = z.conj() / r;
            col.mapv_inplace(|v| v * phase);
        }
    }
    Ok((vals, vecs))
}

/// Smallest eigenvalue of a Hermitian matrix.
pub fn min_eigenvalue(a: &Array2<C64>) -> Result<f64> {
    let vals = eigvalsh(a)?;
    Ok(vals[0])
}
