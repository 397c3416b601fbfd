//! Dense linear-algebra helpers built on nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Singular values in non-increasing order. Empty matrices have none.
pub fn singular_values<T: Real>(m: &DMatrix<T>) -> Vec<T> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<T> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    s
}

/// Spectral norm (largest singular value); zero for empty matrices.
pub fn spectral_norm<T: Real>(m: &DMatrix<T>) -> T {
    singular_values(m).first().copied().unwrap_or_else(T::zero)
}

/// Number of singular values at or above `rel_tol * sigma_max`.
pub fn numerical_rank<T: Real>(m: &DMatrix<T>, rel_tol: T) -> usize {
    let s = singular_values(m);
    rank_from_singular_values(&s, rel_tol)
}

pub(crate) fn rank_from_singular_values<T: Real>(s: &[T], rel_tol: T) -> usize {
    match s.first() {
        Some(&smax) if smax > T::zero() => s.iter().filter(|&&v| v >= rel_tol * smax).count(),
        _ => 0,
    }
}

/// Width (as a multiplicative factor on each side of the tolerance) of the band in which a
/// rank decision is considered ambiguous.
pub const RANK_AMBIGUITY_BAND: f64 = 1e3;

/// Like [`numerical_rank`] but fails when a normalized singular value falls inside
/// `[tol / band, tol * band]`.
pub fn unambiguous_rank<T: Real>(m: &DMatrix<T>, rel_tol: T) -> Result<usize> {
    let s = singular_values(m);
    let Some(&smax) = s.first() else { return Ok(0) };
    if smax <= T::zero() {
        return Ok(0);
    }
    let band = T::lit(RANK_AMBIGUITY_BAND);
    for &v in &s {
        let r = v / smax;
        if r > rel_tol / band && r < rel_tol * band {
            return Err(Error::AmbiguousRank {
                value: r.as_f64(),
                tol: rel_tol.as_f64(),
            });
        }
    }
    Ok(rank_from_singular_values(&s, rel_tol))
}

/// Orthonormal basis for the column space, using the same rank rule as [`unambiguous_rank`].
pub fn range_basis<T: Real>(m: &DMatrix<T>, rel_tol: T) -> Result<DMatrix<T>> {
    let rank = unambiguous_rank(m, rel_tol)?;
    if rank == 0 {
        return Ok(DMatrix::zeros(m.nrows(), 0));
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let order = sorted_indices(&svd.singular_values);
    Ok(DMatrix::from_fn(m.nrows(), rank, |i, j| u[(i, order[j])]))
}

/// Orthonormal basis for the row space (as columns), i.e. the orthogonal complement of the kernel.
pub fn row_space_basis<T: Real>(m: &DMatrix<T>, rel_tol: T) -> Result<DMatrix<T>> {
    let rank = unambiguous_rank(m, rel_tol)?;
    if rank == 0 {
        return Ok(DMatrix::zeros(m.ncols(), 0));
    }
    let svd = m.clone().svd(false, true);
    let vt = svd.v_t.expect("right singular vectors requested");
    let order = sorted_indices(&svd.singular_values);
    Ok(DMatrix::from_fn(m.ncols(), rank, |i, j| vt[(order[j], i)]))
}

fn sorted_indices<T: Real>(s: &DVector<T>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx
}

/// `[B, AB, ..., A^{n-1}B]`.
pub fn controllability_matrix<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    let n = a.nrows();
    let m = b.ncols();
    let mut out = DMatrix::zeros(n, n * m);
    let mut blk = b.clone();
    for k in 0..n {
        out.view_mut((0, k * m), (n, m)).copy_from(&blk);
        blk = a * &blk;
    }
    out
}

/// `[C; CA; ...; CA^{n-1}]`.
pub fn observability_matrix<T: Real>(a: &DMatrix<T>, c: &DMatrix<T>) -> DMatrix<T> {
    let n = a.nrows();
    let p = c.nrows();
    let mut out = DMatrix::zeros(n * p, n);
    let mut blk = c.clone();
    for k in 0..n {
        out.view_mut((k * p, 0), (p, n)).copy_from(&blk);
        blk = &blk * a;
    }
    out
}

/// Minimum-norm least-squares solution of `a x = b` via the SVD pseudo-inverse.
pub fn lstsq<T: Real>(a: &DMatrix<T>, b: &DVector<T>, rel_cutoff: T) -> DVector<T> {
    if a.ncols() == 0 {
        return DVector::zeros(0);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(T::zero(), |acc, &v| acc.max(v));
    let eps = rel_cutoff * smax;
    svd.solve(b, eps).expect("both singular vector sets computed")
}

/// Stacks vertically; all blocks must share the column count.
pub fn vstack<T: Real>(blocks: &[&DMatrix<T>]) -> DMatrix<T> {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        assert_eq!(b.ncols(), cols, "vstack column mismatch");
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(*b);
        r += b.nrows();
    }
    out
}
