use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClusterError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub k: usize,
    pub n_init: usize,
    pub max_iter: usize,
    /// Stop when the relative decrease of inertia falls below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 2,
            n_init: 100,
            max_iter: 300,
            tol: 1e-6,
            seed: 0,
        }
    }
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centers: Tensor,
    pub inertia: f64,
    pub n_iter: usize,
}

/// One Lloyd run, with the inertia after every assignment step.
#[derive(Debug, Clone, PartialEq)]
pub struct LloydRun {
    pub labels: Vec<usize>,
    pub centers: Tensor,
    pub inertia: f64,
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Best of `n_init` k-means++-seeded Lloyd runs, by inertia.
pub fn kmeans(x: &Tensor, cfg: &KMeansConfig) -> Result<KMeansResult> {
    validate(x, cfg.k)?;
    if cfg.n_init == 0 {
        return Err(ClusterError::Usage("n_init must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<LloydRun> = None;
    for _ in 0..cfg.n_init {
        let init = kmeans_plus_plus(x, cfg.k, &mut rng);
        let run = lloyd(x, init, cfg.max_iter, cfg.tol)?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let best = best.expect("n_init >= 1");
    Ok(KMeansResult {
        n_iter: best.inertia_trace.len().saturating_sub(1),
        labels: best.labels,
        centers: best.centers,
        inertia: best.inertia,
    })
}

fn validate(x: &Tensor, k: usize) -> Result<()> {
    if k == 0 {
        return Err(ClusterError::Usage("K must be at least 1".into()));
    }
    if x.rows() < k {
        return Err(ClusterError::Usage(format!(
            "cannot form {k} clusters from {} points",
            x.rows()
        )));
    }
    if !x.is_finite() {
        return Err(ClusterError::Numeric("input contains non-finite values".into()));
    }
    Ok(())
}

/// k-means++ seeding: each new center is drawn with probability
/// proportional to its squared distance from the nearest chosen center.
pub fn kmeans_plus_plus<R: Rng + ?Sized>(x: &Tensor, k: usize, rng: &mut R) -> Tensor {
    let n = x.rows();
    let mut centers = Tensor::zeros(k, x.cols());
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from_slice(x.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from_slice(x.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(pick)));
        }
    }
    centers
}

/// Assigns every point to its nearest center; returns per-point distances.
fn assign(x: &Tensor, centers: &Tensor, labels: &mut [usize], dist: &mut [f64]) -> f64 {
    let mut inertia = 0.0;
    for i in 0..x.rows() {
        let row = x.row(i);
        let mut best = (0, f64::INFINITY);
        for c in 0..centers.rows() {
            let d = sq_dist(row, centers.row(c));
            if d < best.1 {
                best = (c, d);
            }
        }
        labels[i] = best.0;
        dist[i] = best.1;
        inertia += best.1;
    }
    inertia
}

/// Lloyd iterations from the given centers. An emptied cluster is reseeded
/// at the point farthest from its current center.
pub fn lloyd(x: &Tensor, mut centers: Tensor, max_iter: usize, tol: f64) -> Result<LloydRun> {
    let k = centers.rows();
    validate(x, k)?;
    let (n, d) = (x.rows(), x.cols());
    let mut labels = vec![0; n];
    let mut dist = vec![0.0; n];
    let mut inertia = assign(x, &centers, &mut labels, &mut dist);
    let mut trace = vec![inertia];

    for _ in 0..max_iter {
        let mut sums = Tensor::zeros(k, d);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, v) in sums.row_mut(labels[i]).iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]))
                    .expect("n >= k");
                taken[far] = true;
                centers.row_mut(c).copy_from_slice(x.row(far));
            }
        }
        let previous = inertia;
        let previous_labels = labels.clone();
        inertia = assign(x, &centers, &mut labels, &mut dist);
        trace.push(inertia);
        if labels == previous_labels || previous - inertia <= tol * previous {
            break;
        }
    }
    Ok(LloydRun {
        labels,
        centers,
        inertia,
        inertia_trace: trace,
    })
}
