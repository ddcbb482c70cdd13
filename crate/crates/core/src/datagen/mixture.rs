use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{DatagenError, PriorConfig, Result};
use crate::linalg::{self, from_dmatrix, to_dmatrix};
use crate::tensor::Tensor;

/// Step cap when shifting a new component away from the existing ones.
pub const MAX_SHIFT_STEPS: usize = 100_000;
/// Shift step as a fraction of the component's separation floor.
pub const SHIFT_STEP_FRACTION: f64 = 0.05;

/// One draw of a separated Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Orthogonal `d×d` matrices whose columns are covariance eigenvectors.
    pub cov_eigvecs: Vec<Tensor>,
    pub cov_eigvals: Vec<Vec<f64>>,
    /// W2 floor drawn for each component. Component `k` was placed at least
    /// `min_sep[k]` away from every earlier component.
    pub min_sep: Vec<f64>,
}

impl MixtureSpec {
    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// `Q diag(λ) Qᵀ` of component `k`.
    pub fn covariance(&self, k: usize) -> Tensor {
        from_dmatrix(&covariance_matrix(
            &to_dmatrix(&self.cov_eigvecs[k]),
            &self.cov_eigvals[k],
        ))
    }

    /// Separation floor that applies to the pair `(a, b)`.
    pub fn pair_floor(&self, a: usize, b: usize) -> f64 {
        self.min_sep[a.max(b)]
    }

    /// Draws `count` points from component `k`.
    pub fn sample_component<R: Rng + ?Sized>(&self, k: usize, count: usize, rng: &mut R) -> Tensor {
        let d = self.dim();
        let q = &self.cov_eigvecs[k];
        let roots: Vec<f64> = self.cov_eigvals[k].iter().map(|v| v.sqrt()).collect();
        let mut out = Tensor::zeros(count, d);
        let mut eps = vec![0.0; d];
        for i in 0..count {
            for (e, r) in eps.iter_mut().zip(&roots) {
                *e = r * rng.sample::<f64, _>(StandardNormal);
            }
            let row = out.row_mut(i);
            for a in 0..d {
                let mut v = self.means[k][a];
                for (b, e) in eps.iter().enumerate() {
                    v += q.get(a, b) * e;
                }
                row[a] = v;
            }
        }
        out
    }
}

fn covariance_matrix(q: &DMatrix<f64>, vals: &[f64]) -> DMatrix<f64> {
    q * DMatrix::from_diagonal(&DVector::from_column_slice(vals)) * q.transpose()
}

/// Covariance part of the squared Bures-Wasserstein distance,
/// `tr(C1 + C2 - 2 (C1^½ C2 C1^½)^½)`.
fn bures_cov_term(c1: &DMatrix<f64>, c2: &DMatrix<f64>) -> Result<f64> {
    let s1 = linalg::sqrtm_psd(c1).ok_or_else(|| DatagenError::Numeric("covariance is not PSD".into()))?;
    let inner = &s1 * c2 * &s1;
    let cross = linalg::trace_sqrtm_psd(&inner)
        .ok_or_else(|| DatagenError::Numeric("covariance is not PSD".into()))?;
    Ok((c1.trace() + c2.trace() - 2.0 * cross).max(0.0))
}

/// Wasserstein-2 distance between `N(m1, c1)` and `N(m2, c2)`.
pub fn gaussian_w2(m1: &[f64], c1: &Tensor, m2: &[f64], c2: &Tensor) -> Result<f64> {
    let d = m1.len();
    if m2.len() != d || c1.shape() != [d, d] || c2.shape() != [d, d] {
        return Err(DatagenError::Numeric(format!(
            "dimension mismatch: means {} and {}, covariances {:?} and {:?}",
            d,
            m2.len(),
            c1.shape(),
            c2.shape()
        )));
    }
    let a = to_dmatrix(c1);
    let b = to_dmatrix(c2);
    for (name, m) in [("first", &a), ("second", &b)] {
        if !linalg::is_symmetric(m, 1e-9) {
            return Err(DatagenError::Numeric(format!("{name} covariance is not symmetric")));
        }
    }
    let mean_sq: f64 = m1.iter().zip(m2).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((mean_sq + bures_cov_term(&a, &b)?).sqrt())
}

/// Eigenvalues for one component under the configured regimes.
fn sample_eigenvalues<R: Rng + ?Sized>(cfg: &PriorConfig, d: usize, rng: &mut R) -> Vec<f64> {
    let [lo, hi] = cfg.eigenvalue_range;
    let u: f64 = rng.random();
    let uniform = |rng: &mut R, a: f64, b: f64| if b > a { rng.random_range(a..=b) } else { a };
    if u < cfg.full_rank_prob {
        let mid = 0.5 * (lo + hi);
        (0..d).map(|_| uniform(rng, mid, hi)).collect()
    } else if u < cfg.full_rank_prob + cfg.degenerate_prob {
        let keep = d.div_ceil(2);
        let small_hi = lo + 0.1 * (hi - lo);
        (0..d)
            .map(|i| if i < keep { uniform(rng, lo, hi) } else { uniform(rng, lo, small_hi) })
            .collect()
    } else {
        (0..d).map(|_| uniform(rng, lo, hi)).collect()
    }
}

fn random_direction<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Builds the mixture incrementally: every new component starts at the
/// origin and is shifted along a random direction until its W2 distance to
/// each earlier component reaches its own floor.
pub fn sample_mixture<R: Rng + ?Sized>(cfg: &PriorConfig, d: usize, k: usize, rng: &mut R) -> Result<MixtureSpec> {
    if d == 0 || k == 0 {
        return Err(DatagenError::Config(format!("need d >= 1 and K >= 1, got d={d}, K={k}")));
    }
    let [sep_lo, sep_hi] = cfg.min_sep_range;
    let mut spec = MixtureSpec {
        weights: vec![1.0 / k as f64; k],
        means: Vec::with_capacity(k),
        cov_eigvecs: Vec::with_capacity(k),
        cov_eigvals: Vec::with_capacity(k),
        min_sep: Vec::with_capacity(k),
    };
    let mut covs: Vec<DMatrix<f64>> = Vec::with_capacity(k);

    for c in 0..k {
        let vals = sample_eigenvalues(cfg, d, rng);
        let q = linalg::random_orthogonal(d, rng);
        let cov = covariance_matrix(&q, &vals);
        let floor = if sep_hi > sep_lo { rng.random_range(sep_lo..=sep_hi) } else { sep_lo };
        let direction = random_direction(d, rng);

        let cov_terms = covs
            .iter()
            .map(|other| bures_cov_term(other, &cov))
            .collect::<Result<Vec<f64>>>()?;
        let step = SHIFT_STEP_FRACTION * floor;
        let mut mean = vec![0.0; d];
        let separated = |mean: &[f64]| {
            spec.means.iter().zip(&cov_terms).all(|(m, term): (&Vec<f64>, &f64)| {
                let mean_sq: f64 = m.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
                (mean_sq + term).sqrt() >= floor
            })
        };
        let mut steps = 0;
        while !separated(&mean) {
            if steps == MAX_SHIFT_STEPS {
                return Err(DatagenError::Separation {
                    component: c,
                    floor,
                    steps,
                });
            }
            steps += 1;
            for (m, u) in mean.iter_mut().zip(&direction) {
                *m = steps as f64 * step * u;
            }
        }

        spec.means.push(mean);
        spec.cov_eigvecs.push(from_dmatrix(&q));
        spec.cov_eigvals.push(vals);
        spec.min_sep.push(floor);
        covs.push(cov);
    }
    Ok(spec)
}
