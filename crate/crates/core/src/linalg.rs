//! Small dense linear-algebra helpers shared by the i-vector and
//! compensation modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(symmetrize(m)).ok_or_else(|| Error::Numerical("matrix is not positive definite".into()))
}

/// Cholesky factorization, retrying once with a ridge of `1e-8 * tr(m) / dim`
/// added to the diagonal when the matrix is singular.
pub fn cholesky_floored(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if let Ok(c) = cholesky(m) {
        return Ok(c);
    }
    let dim = m.nrows().max(1) as f64;
    let ridge = (1e-8 * m.trace() / dim).max(1e-12);
    log::warn!("{what}: not positive definite, adding ridge {ridge:.3e}");
    let mut floored = symmetrize(m);
    for i in 0..floored.nrows() {
        floored[(i, i)] += ridge;
    }
    cholesky(&floored)
}

/// Inverse of a lower-triangular matrix, transposed: `L^{-T}`.
pub fn inverse_transpose_lower(l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = l.nrows();
    let inv = l
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::Numerical("singular triangular factor".into()))?;
    Ok(inv.transpose())
}

/// Symmetric eigendecomposition with eigenvalues sorted in descending order
/// and each eigenvector signed so that its largest-magnitude entry is positive.
pub fn symmetric_eigen_sorted(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(m));
    sort_eigenpairs(&eig.eigenvalues, &eig.eigenvectors)
}

fn sort_eigenpairs(values: &DVector<f64>, vectors: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let sorted_values = DVector::from_iterator(n, order.iter().map(|&i| values[i]));
    let mut sorted_vectors = DMatrix::zeros(vectors.nrows(), n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = vectors.column(src).into_owned();
        canonical_sign(&mut col);
        sorted_vectors.set_column(dst, &col);
    }
    (sorted_values, sorted_vectors)
}

pub(crate) fn canonical_sign(v: &mut DVector<f64>) {
    let mut best = 0usize;
    for i in 0..v.len() {
        if v[i].abs() > v[best].abs() + 1e-12 {
            best = i;
        }
    }
    if v.len() > 0 && v[best] < 0.0 {
        v.neg_mut();
    }
}

/// Solves the symmetric-definite generalized eigenproblem `A w = λ B w`.
///
/// Returns eigenvalues in descending order and `W` with `Wᵀ B W = I`,
/// `Wᵀ A W = diag(λ)`.
pub fn generalized_eigen(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if a.shape() != b.shape() || a.nrows() != a.ncols() {
        return Err(Error::Shape(format!("generalized eigenproblem {:?} vs {:?}", a.shape(), b.shape())));
    }
    let chol = cholesky_floored(b, "generalized eigenproblem")?;
    let l = chol.l();
    let n = a.nrows();
    let l_inv = l
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::Numerical("singular triangular factor".into()))?;
    let c = symmetrize(&(&l_inv * a * l_inv.transpose()));
    let eig = SymmetricEigen::new(c);
    let (values, v) = sort_eigenpairs(&eig.eigenvalues, &eig.eigenvectors);
    let mut w = l_inv.transpose() * v;
    for j in 0..n {
        let mut col = w.column(j).into_owned();
        canonical_sign(&mut col);
        w.set_column(j, &col);
    }
    Ok((values, w))
}

/// Principal angles (radians, ascending) between the column spans of `a` and `b`.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let m = qa.transpose() * qb;
    let svd = m.svd(false, false);
    let mut angles: Vec<f64> = svd.singular_values.iter().map(|s| s.clamp(-1.0, 1.0).acos()).collect();
    angles.sort_by(|x, y| x.total_cmp(y));
    angles
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn frobenius_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generalized_eigen_whitens_b() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let b = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.5, 0.4, 0.1, 0.4, 1.0]);
        let (vals, w) = generalized_eigen(&a, &b).unwrap();
        let wbw = w.transpose() * &b * &w;
        let waw = w.transpose() * &a * &w;
        assert!(frobenius_distance(&wbw, &DMatrix::identity(3, 3)) < 1e-10);
        for i in 0..3 {
            assert!((waw[(i, i)] - vals[i]).abs() < 1e-10);
        }
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
    }

    #[test]
    fn log_sum_exp_handles_large_magnitudes() {
        let v = [-1000.0, -1000.0];
        assert!((log_sum_exp(&v) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn identical_spans_have_zero_angles() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(3, 2, &[2.0, 1.0, 1.0, -1.0, 0.0, 0.0]);
        let angles = principal_angles(&a, &b);
        assert!(angles.iter().all(|&t| t < 1e-7));
    }
}
