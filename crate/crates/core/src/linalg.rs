//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

pub fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    Tensor::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// descending order; eigenvectors are the matching columns.
pub fn sym_eigen_sorted(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Tolerance below which a negative eigenvalue is treated as round-off.
fn psd_tolerance(values: &DVector<f64>) -> f64 {
    let scale = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    1e-10 * scale.max(1.0)
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).abs().max() <= tol * m.abs().max().max(1.0)
}

/// Principal square root of a symmetric positive semidefinite matrix.
/// Returns `None` if an eigenvalue is clearly negative.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let (vals, vecs) = sym_eigen_sorted(m);
    let tol = psd_tolerance(&vals);
    if vals.iter().any(|&v| v < -tol) {
        return None;
    }
    let roots = DVector::from_iterator(vals.len(), vals.iter().map(|v| v.max(0.0).sqrt()));
    Some(&vecs * DMatrix::from_diagonal(&roots) * vecs.transpose())
}

/// Trace of the principal square root of a symmetric PSD matrix.
pub fn trace_sqrtm_psd(m: &DMatrix<f64>) -> Option<f64> {
    let (vals, _) = sym_eigen_sorted(m);
    let tol = psd_tolerance(&vals);
    if vals.iter().any(|&v| v < -tol) {
        return None;
    }
    Some(vals.iter().map(|v| v.max(0.0).sqrt()).sum())
}

/// Haar-distributed orthogonal matrix from the QR factorization of a
/// Gaussian matrix, with column signs fixed by the diagonal of R.
pub fn random_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Largest singular value by power iteration on `WᵀW`.
pub fn spectral_norm(w: &DMatrix<f64>, max_iter: usize, tol: f64) -> f64 {
    let n = w.ncols();
    if n == 0 || w.nrows() == 0 {
        return 0.0;
    }
    let wtw = w.transpose() * w;
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut sigma = 0.0;
    for _ in 0..max_iter {
        let next = &wtw * &v;
        let norm = next.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = next / norm;
        let estimate = norm.sqrt();
        let done = (estimate - sigma).abs() <= tol * estimate.max(1e-300);
        sigma = estimate;
        if done {
            break;
        }
    }
    // Rayleigh quotient of the final iterate.
    (w * &v).norm()
}
