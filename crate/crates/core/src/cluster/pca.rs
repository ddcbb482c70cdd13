use serde::{Deserialize, Serialize};

use super::{ClusterError, Result};
use crate::linalg::to_dmatrix;
use crate::tensor::Tensor;

/// Centered linear projection onto the leading principal axes (no whitening).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `n_components × d`, orthonormal rows.
    pub axes: Tensor,
    /// Sample variance along each axis, non-increasing.
    pub explained_variance: Vec<f64>,
    /// Numerical rank of the centered data.
    pub rank: usize,
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.axes.rows()
    }

    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        let total: f64 = self.explained_variance.iter().sum();
        self.explained_variance
            .iter()
            .map(|v| if total > 0.0 { v / total } else { 0.0 })
            .collect()
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.mean.len() {
            return Err(ClusterError::Usage(format!(
                "PCA fitted on {} columns, got {}",
                self.mean.len(),
                x.cols()
            )));
        }
        let centered = Tensor::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) - self.mean[j]);
        Ok(crate::tensor::kernels::gemm(&centered, false, &self.axes, true)?)
    }

    /// Maps reduced coordinates back to the input space.
    pub fn inverse(&self, z: &Tensor) -> Result<Tensor> {
        let mut x = z.matmul(&self.axes)?;
        for i in 0..x.rows() {
            for (v, m) in x.row_mut(i).iter_mut().zip(&self.mean) {
                *v += m;
            }
        }
        Ok(x)
    }
}

pub fn pca_fit(x: &Tensor, n_components: usize) -> Result<PcaModel> {
    let (n, d) = (x.rows(), x.cols());
    if n == 0 {
        return Err(ClusterError::Usage("PCA on an empty matrix".into()));
    }
    if n_components > d {
        return Err(ClusterError::Usage(format!(
            "cannot keep {n_components} components of {d}-dimensional data"
        )));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64)
        .collect();
    let mut centered = to_dmatrix(x);
    for j in 0..d {
        for i in 0..n {
            centered[(i, j)] -= mean[j];
        }
    }
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let s_max = order.first().map_or(0.0, |&i| svd.singular_values[i]);
    let tol = s_max * (n.max(d) as f64) * f64::EPSILON * 16.0;
    let rank = order.iter().filter(|&&i| svd.singular_values[i] > tol).count();
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };

    let kept = n_components.min(rank);
    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(n_components);
    let mut variance = Vec::with_capacity(n_components);
    for &i in order.iter().take(kept) {
        axes.push(v_t.row(i).iter().copied().collect());
        variance.push(svd.singular_values[i].powi(2) / denom);
    }
    if kept < n_components {
        log::warn!(
            "PCA: requested {n_components} components but data rank is {rank}; padding with zero-variance axes"
        );
        complete_orthonormal(&mut axes, d, n_components);
        variance.resize(n_components, 0.0);
    }
    for axis in &mut axes {
        fix_sign(axis);
    }
    let axes = if axes.is_empty() {
        Tensor::zeros(0, d)
    } else {
        Tensor::from_rows(&axes)?
    };
    Ok(PcaModel {
        mean,
        axes,
        explained_variance: variance,
        rank,
    })
}

pub fn pca_apply(model: &PcaModel, x: &Tensor) -> Result<Tensor> {
    model.apply(x)
}

/// Makes the largest-magnitude loading positive.
fn fix_sign(axis: &mut [f64]) {
    let mut best = 0.0_f64;
    let mut sign = 1.0;
    for &v in axis.iter() {
        if v.abs() > best + 1e-12 {
            best = v.abs();
            sign = v.signum();
        }
    }
    if sign < 0.0 {
        for v in axis.iter_mut() {
            *v = -*v;
        }
    }
}

/// Extends `axes` to `target` orthonormal vectors in `R^d` by Gram-Schmidt
/// over the standard basis.
fn complete_orthonormal(axes: &mut Vec<Vec<f64>>, d: usize, target: usize) {
    let mut e = 0;
    while axes.len() < target && e < d {
        let mut v = vec![0.0; d];
        v[e] = 1.0;
        e += 1;
        for _ in 0..2 {
            for a in axes.iter() {
                let dot: f64 = a.iter().zip(&v).map(|(p, q)| p * q).sum();
                for (vi, ai) in v.iter_mut().zip(a) {
                    *vi -= dot * ai;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            axes.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
}
