//! Expectation-maximization for Gaussian mixtures.
//!
//! Two covariance regimes are supported. `Full` estimates one covariance per
//! component. `Identity` keeps every covariance fixed and isotropic and only
//! updates means and weights; with the default variance of one half its
//! log-density is `-‖x - μ‖²` up to a constant, so responsibilities coincide
//! exactly with the encoder's prior-weighted softmax scoring.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans_plus_plus, lloyd};
use super::{ClusterError, Result};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceRegime {
    Full,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmConfig {
    pub k: usize,
    pub covariance: CovarianceRegime,
    pub n_init: usize,
    pub max_iter: usize,
    /// Convergence threshold on the change of mean per-sample log-likelihood.
    pub tol: f64,
    pub reg_covar: f64,
    /// Fixed per-dimension variance of the `Identity` regime.
    pub identity_variance: f64,
    pub seed: u64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            k: 2,
            covariance: CovarianceRegime::Full,
            n_init: 50,
            max_iter: 200,
            tol: 1e-7,
            reg_covar: 1e-6,
            identity_variance: 0.5,
            seed: 0,
        }
    }
}

impl GmmConfig {
    pub fn new(k: usize, covariance: CovarianceRegime, seed: u64) -> Self {
        Self {
            k,
            covariance,
            seed,
            ..Self::default()
        }
    }
}

/// Mixture parameters. `covariances` is empty in the `Identity` regime.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Tensor,
    pub covariances: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmResult {
    pub responsibilities: Tensor,
    pub params: GmmParams,
    /// Total log-likelihood of the data under `params`.
    pub log_likelihood: f64,
    /// Total log-likelihood at every E-step of the winning run.
    pub log_likelihood_trace: Vec<f64>,
    pub n_iter: usize,
    pub converged: bool,
}

impl GmmResult {
    pub fn hard_labels(&self) -> Vec<usize> {
        argmax_rows(&self.responsibilities)
    }
}

pub fn argmax_rows(p: &Tensor) -> Vec<usize> {
    p.iter_rows()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect()
}

/// Best of `n_init` EM runs by final log-likelihood. Each run is initialized
/// from a k-means++-seeded Lloyd clustering.
pub fn gmm_em(x: &Tensor, cfg: &GmmConfig) -> Result<GmmResult> {
    validate(x, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<GmmResult> = None;
    let mut last_err = None;
    for _ in 0..cfg.n_init {
        let seeds = kmeans_plus_plus(x, cfg.k, &mut rng);
        let init = lloyd(x, seeds, 100, 1e-4)?;
        let hard = Tensor::from_fn(x.rows(), cfg.k, |i, j| f64::from(init.labels[i] == j));
        let params = m_step(x, &hard, cfg)?;
        match gmm_em_from(x, cfg, params) {
            Ok(run) => {
                if best.as_ref().is_none_or(|b| run.log_likelihood > b.log_likelihood) {
                    best = Some(run);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or_else(|| ClusterError::Usage("n_init must be at least 1".into())))
}

fn validate(x: &Tensor, cfg: &GmmConfig) -> Result<()> {
    if cfg.k == 0 {
        return Err(ClusterError::Usage("K must be at least 1".into()));
    }
    if x.rows() < cfg.k {
        return Err(ClusterError::Usage(format!(
            "cannot fit {} components to {} points",
            cfg.k,
            x.rows()
        )));
    }
    if cfg.identity_variance <= 0.0 || cfg.reg_covar < 0.0 {
        return Err(ClusterError::Usage("variances must be positive".into()));
    }
    if !x.is_finite() {
        return Err(ClusterError::Numeric("input contains non-finite values".into()));
    }
    Ok(())
}

/// A single EM run from explicit starting parameters.
pub fn gmm_em_from(x: &Tensor, cfg: &GmmConfig, mut params: GmmParams) -> Result<GmmResult> {
    validate(x, cfg)?;
    let n = x.rows() as f64;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iters = 0;
    let (mut resp, mut ll) = e_step(x, &params, cfg)?;
    trace.push(ll);
    for _ in 0..cfg.max_iter {
        iters += 1;
        params = m_step(x, &resp, cfg)?;
        let (r, next) = e_step(x, &params, cfg)?;
        resp = r;
        let change = (next - ll) / n;
        ll = next;
        trace.push(ll);
        if change.abs() < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(GmmResult {
        responsibilities: resp,
        params,
        log_likelihood: ll,
        log_likelihood_trace: trace,
        n_iter: iters,
        converged,
    })
}

/// Per-point, per-component `log π_k + log N(x_i | μ_k, Σ_k)`.
pub fn weighted_log_densities(x: &Tensor, params: &GmmParams, cfg: &GmmConfig) -> Result<Tensor> {
    let (n, d) = (x.rows(), x.cols());
    let k = params.weights.len();
    let mut out = Tensor::zeros(n, k);
    match cfg.covariance {
        CovarianceRegime::Identity => {
            let s = cfg.identity_variance;
            let norm = -0.5 * d as f64 * (LN_2PI + s.ln());
            for c in 0..k {
                let lw = params.weights[c].ln();
                let mu = params.means.row(c);
                for i in 0..n {
                    let d2: f64 = x.row(i).iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                    out.set(i, c, lw + norm - 0.5 * d2 / s);
                }
            }
        }
        CovarianceRegime::Full => {
            for c in 0..k {
                let cov = DMatrix::from_row_slice(d, d, params.covariances[c].data());
                let chol = Cholesky::new(cov).ok_or_else(|| {
                    ClusterError::Numeric(format!("covariance of component {c} is not positive definite"))
                })?;
                let l = chol.l();
                let log_det: f64 = 2.0 * (0..d).map(|j| l[(j, j)].ln()).sum::<f64>();
                let base = params.weights[c].ln() - 0.5 * (d as f64 * LN_2PI + log_det);
                let mu = params.means.row(c);
                for i in 0..n {
                    let diff = DVector::from_iterator(d, x.row(i).iter().zip(mu).map(|(a, b)| a - b));
                    let y = l
                        .solve_lower_triangular(&diff)
                        .ok_or_else(|| ClusterError::Numeric("singular Cholesky factor".into()))?;
                    out.set(i, c, base - 0.5 * y.norm_squared());
                }
            }
        }
    }
    Ok(out)
}

/// Responsibilities and total log-likelihood under `params`.
pub fn e_step(x: &Tensor, params: &GmmParams, cfg: &GmmConfig) -> Result<(Tensor, f64)> {
    let mut w = weighted_log_densities(x, params, cfg)?;
    let mut ll = 0.0;
    for i in 0..w.rows() {
        let row = w.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
        ll += lse;
    }
    if !ll.is_finite() {
        return Err(ClusterError::Numeric("log-likelihood is not finite".into()));
    }
    Ok((w, ll))
}

pub fn m_step(x: &Tensor, resp: &Tensor, cfg: &GmmConfig) -> Result<GmmParams> {
    let (n, d) = (x.rows(), x.cols());
    let k = resp.cols();
    let tiny = 10.0 * f64::EPSILON;
    let nk: Vec<f64> = (0..k)
        .map(|c| (0..n).map(|i| resp.get(i, c)).sum::<f64>() + tiny)
        .collect();
    let total: f64 = nk.iter().sum();
    let weights = nk.iter().map(|v| v / total).collect();
    let mut means = crate::tensor::kernels::gemm(resp, true, x, false)?;
    for c in 0..k {
        for v in means.row_mut(c) {
            *v /= nk[c];
        }
    }
    let covariances = match cfg.covariance {
        CovarianceRegime::Identity => Vec::new(),
        CovarianceRegime::Full => (0..k)
            .map(|c| {
                let mu = means.row(c);
                let mut cov = Tensor::zeros(d, d);
                for i in 0..n {
                    let r = resp.get(i, c);
                    if r == 0.0 {
                        continue;
                    }
                    let xi = x.row(i);
                    for a in 0..d {
                        let da = r * (xi[a] - mu[a]);
                        for b in a..d {
                            let v = cov.get(a, b) + da * (xi[b] - mu[b]);
                            cov.set(a, b, v);
                        }
                    }
                }
                for a in 0..d {
                    for b in a..d {
                        let v = cov.get(a, b) / nk[c] + if a == b { cfg.reg_covar } else { 0.0 };
                        cov.set(a, b, v);
                        cov.set(b, a, v);
                    }
                }
                cov
            })
            .collect(),
    };
    Ok(GmmParams {
        weights,
        means,
        covariances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blobs(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(60, 2, |i, _| {
            let centre = if i < 30 { -2.0 } else { 2.0 };
            centre + rng.random_range(-0.5..0.5)
        })
    }

    #[test]
    fn single_component_is_sample_mean() {
        let x = blobs(1);
        let cfg = GmmConfig { n_init: 2, ..GmmConfig::new(1, CovarianceRegime::Full, 0) };
        let res = gmm_em(&x, &cfg).unwrap();
        for j in 0..2 {
            let mean = (0..60).map(|i| x.get(i, j)).sum::<f64>() / 60.0;
            assert!((res.params.means.get(0, j) - mean).abs() < 1e-12);
        }
        assert!(res.responsibilities.data().iter().all(|&r| r == 1.0));
    }

    #[test]
    fn log_likelihood_never_decreases() {
        for regime in [CovarianceRegime::Full, CovarianceRegime::Identity] {
            let cfg = GmmConfig { n_init: 3, ..GmmConfig::new(3, regime, 4) };
            let res = gmm_em(&blobs(2), &cfg).unwrap();
            for w in res.log_likelihood_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9 * w[0].abs());
            }
        }
    }

    #[test]
    fn separates_two_blobs() {
        let cfg = GmmConfig { n_init: 2, ..GmmConfig::new(2, CovarianceRegime::Identity, 5) };
        let labels = gmm_em(&blobs(3), &cfg).unwrap().hard_labels();
        assert!(labels[..30].iter().all(|&l| l == labels[0]));
        assert!(labels[30..].iter().all(|&l| l != labels[0]));
    }

    #[test]
    fn rejects_too_few_points() {
        let x = Tensor::zeros(1, 2);
        assert!(matches!(
            gmm_em(&x, &GmmConfig::new(2, CovarianceRegime::Full, 0)),
            Err(ClusterError::Usage(_))
        ));
    }
}
