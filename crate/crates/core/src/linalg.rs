//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Relative singular-value cutoff for rank decisions.
pub const RANK_RTOL: f64 = 1e-8;

/// Orthonormal basis (columns) of the null space of `a`.
///
/// Rows are zero-padded so the SVD returns a full right factor.
pub fn null_space(a: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    let (m, n) = a.shape();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    if m == 0 {
        return DMatrix::identity(n, n);
    }
    let rows = m.max(n);
    let mut padded = DMatrix::zeros(rows, n);
    padded.rows_mut(0, m).copy_from(a);
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("requested");
    let smax = svd.singular_values.max();
    let cut = rtol * smax.max(f64::MIN_POSITIVE);
    let keep: Vec<usize> = (0..n).filter(|&i| smax == 0.0 || svd.singular_values[i] <= cut).collect();
    let mut basis = DMatrix::zeros(n, keep.len());
    for (c, &i) in keep.iter().enumerate() {
        basis.column_mut(c).copy_from(&vt.row(i).transpose());
    }
    basis
}

pub fn rank(a: &DMatrix<f64>, rtol: f64) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rtol * smax).count()
}

/// Minimum-norm least-squares solution of `a x = b`.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let (m, n) = a.shape();
    if n == 0 {
        return DVector::zeros(0);
    }
    if m == 0 {
        return DVector::zeros(n);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = 1e-13 * smax.max(f64::MIN_POSITIVE);
    svd.solve(b, eps).expect("both factors computed")
}

/// Smallest eigenvalue and a unit eigenvector of a symmetric matrix.
pub fn min_eigen(a: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut best = 0;
    for i in 1..eig.eigenvalues.len() {
        if eig.eigenvalues[i] < eig.eigenvalues[best] {
            best = i;
        }
    }
    (eig.eigenvalues[best], eig.eigenvectors.column(best).into_owned())
}

pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().svd(false, false).singular_values.max()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_space_of_wide_matrix() {
        let a = DMatrix::from_row_slice(1, 3, &[0.0, -1.0, 1.0]);
        let z = null_space(&a, RANK_RTOL);
        assert_eq!(z.ncols(), 2);
        assert!((&a * &z).amax() < 1e-14);
        assert!((z.transpose() * &z - DMatrix::identity(2, 2)).amax() < 1e-14);
    }

    #[test]
    fn rank_and_lstsq() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, -1.0, 0.0]);
        assert_eq!(rank(&a, RANK_RTOL), 1);
        let x = lstsq(&a.transpose(), &DVector::from_vec(vec![1.0, 0.0]));
        assert!((x - DVector::from_vec(vec![1.0, 1.0, -1.0]) / 3.0).amax() < 1e-14);
    }
}
