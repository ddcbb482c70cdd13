//! Pre-training loss: label-estimated centroids and priors, the soft
//! assignment they induce, and the concentration and separation terms.

use serde::{Deserialize, Serialize};

use crate::tensor::{Eager, Graph, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_cp: f64,
    pub lambda_sep: f64,
    /// Cap `T` on each pair's squared centroid distance.
    pub sep_threshold: f64,
    pub use_cp: bool,
    pub use_sep: bool,
    /// Use `-Σ‖z - c‖²` for the concentration term instead of `+Σ‖z - c‖²`.
    pub cp_printed_sign: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_cp: 1.0,
            lambda_sep: 1.0,
            sep_threshold: 10.0,
            use_cp: true,
            use_sep: true,
            cp_printed_sign: false,
        }
    }
}

impl LossConfig {
    /// Only the assignment term.
    pub fn prob_only() -> Self {
        Self {
            use_cp: false,
            use_sep: false,
            ..Self::default()
        }
    }

    /// The four ablation settings: prob, prob+sep, prob+cp, prob+cp+sep.
    pub fn ablations() -> [(&'static str, Self); 4] {
        let base = Self::default();
        [
            ("prob", Self::prob_only()),
            ("prob+sep", Self { use_cp: false, ..base }),
            ("prob+cp", Self { use_sep: false, ..base }),
            ("prob+cp+sep", base),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cp >= 0.0 && self.lambda_sep >= 0.0) {
            return Err(ObjectiveError::Usage("loss weights must be nonnegative".into()));
        }
        if !(self.sep_threshold > 0.0 && self.sep_threshold.is_finite()) {
            return Err(ObjectiveError::Usage("separation threshold must be positive".into()));
        }
        Ok(())
    }

    fn cp_active(&self) -> bool {
        self.use_cp && self.lambda_cp != 0.0
    }

    fn sep_active(&self) -> bool {
        self.use_sep && self.lambda_sep != 0.0
    }
}

/// Centroids (`K×D`) and cluster proportions estimated from labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStats {
    pub centroids: Tensor,
    pub priors: Vec<f64>,
}

/// Per-label counts; errors if a label is out of range or absent.
pub fn label_counts(y: &[usize], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(ObjectiveError::Usage("K must be at least 1".into()));
    }
    let mut counts = vec![0usize; k];
    for &l in y {
        if l >= k {
            return Err(ObjectiveError::Usage(format!("label {l} outside [0, {k})")));
        }
        counts[l] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(ObjectiveError::Usage(format!("cluster {empty} has no points")));
    }
    Ok(counts)
}

/// `K×n` averaging matrix: row `k` holds `1/N_k` at the members of cluster `k`.
pub fn averaging_matrix(y: &[usize], counts: &[usize]) -> Tensor {
    let mut m = Tensor::zeros(counts.len(), y.len());
    for (i, &l) in y.iter().enumerate() {
        m.set(l, i, 1.0 / counts[l] as f64);
    }
    m
}

pub fn estimate_stats(z: &Tensor, y: &[usize], k: usize) -> Result<ClusterStats> {
    check_labels(z.rows(), y)?;
    let counts = label_counts(y, k)?;
    let n = y.len() as f64;
    let mut centroids = Tensor::zeros(k, z.cols());
    for (i, &l) in y.iter().enumerate() {
        for (c, v) in centroids.row_mut(l).iter_mut().zip(z.row(i)) {
            *c += v;
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        centroids.row_mut(c).iter_mut().for_each(|v| *v /= count as f64);
    }
    Ok(ClusterStats {
        centroids,
        priors: counts.iter().map(|&c| c as f64 / n).collect(),
    })
}

fn check_labels(n: usize, y: &[usize]) -> Result<()> {
    if n != y.len() {
        return Err(ObjectiveError::Usage(format!("{} labels for {n} rows", y.len())));
    }
    if n == 0 {
        return Err(ObjectiveError::Usage("empty dataset".into()));
    }
    Ok(())
}

/// Log of the soft assignment, `log π_k - ‖z - c_k‖²` normalized per row.
pub fn log_soft_assign(z: &Tensor, stats: &ClusterStats) -> Result<Tensor> {
    let log_prior = Tensor::new(1, stats.priors.len(), stats.priors.iter().map(|p| p.ln()).collect())?;
    log_assign_with(&Eager, z, &stats.centroids, &log_prior)
}

/// Prior-weighted softmax over negative squared distances to the centroids.
pub fn soft_assign(z: &Tensor, stats: &ClusterStats) -> Result<Tensor> {
    Ok(log_soft_assign(z, stats)?.map(f64::exp))
}

fn log_assign_with<G: Graph>(g: &G, z: &G::Node, centroids: &G::Node, log_prior: &G::Node) -> Result<G::Node> {
    let d2 = g.sq_dist(z, centroids)?;
    let logits = g.add_row(&g.scale(&d2, -1.0)?, log_prior)?;
    Ok(g.log_softmax_rows(&logits)?)
}

/// `-Σ_i log p_{y_i}(z_i)` at fixed stats.
pub fn loss_prob(z: &Tensor, y: &[usize], stats: &ClusterStats) -> Result<f64> {
    check_labels(z.rows(), y)?;
    let logp = log_soft_assign(z, stats)?;
    Ok(-y.iter().enumerate().map(|(i, &l)| logp.get(i, l)).sum::<f64>())
}

/// Within-cluster sum of squared distances to the centroids.
pub fn loss_cp(z: &Tensor, y: &[usize], stats: &ClusterStats) -> Result<f64> {
    check_labels(z.rows(), y)?;
    Ok(y.iter()
        .enumerate()
        .map(|(i, &l)| {
            z.row(i)
                .iter()
                .zip(stats.centroids.row(l))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum())
}

/// `-Σ_{k<j} min(‖c_k - c_j‖², T)`.
pub fn loss_sep(stats: &ClusterStats, threshold: f64) -> f64 {
    let c = &stats.centroids;
    let mut total = 0.0;
    for a in 0..c.rows() {
        for b in a + 1..c.rows() {
            let d2: f64 = c.row(a).iter().zip(c.row(b)).map(|(x, y)| (x - y) * (x - y)).sum();
            total += d2.min(threshold);
        }
    }
    -total
}

/// Loss terms as graph nodes. Inactive terms are `None` and contribute
/// nothing to `total`.
#[derive(Debug, Clone)]
pub struct LossTerms<N> {
    pub prob: N,
    pub cp: Option<N>,
    pub sep: Option<N>,
    pub total: N,
}

/// Scalar values of each term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValues {
    pub prob: f64,
    pub cp: f64,
    pub sep: f64,
    pub total: f64,
}

impl<N> LossTerms<N> {
    pub fn values<G: Graph<Node = N>>(&self, g: &G) -> LossValues {
        let item = |n: &N| g.value(n).item();
        LossValues {
            prob: item(&self.prob),
            cp: self.cp.as_ref().map_or(0.0, item),
            sep: self.sep.as_ref().map_or(0.0, item),
            total: item(&self.total),
        }
    }
}

/// Builds `L_prob + λ_cp L_cp + λ_sep L_sep` on `g`, with centroids computed
/// from `z` so gradients flow through them.
pub fn loss_terms_with<G: Graph>(g: &G, z: &G::Node, y: &[usize], k: usize, cfg: &LossConfig) -> Result<LossTerms<G::Node>> {
    cfg.validate()?;
    check_labels(g.shape(z)[0], y)?;
    let counts = label_counts(y, k)?;
    let n = y.len() as f64;
    let avg = g.constant(averaging_matrix(y, &counts));
    let centroids = g.matmul(&avg, z)?;
    let log_prior = g.constant(Tensor::new(1, k, counts.iter().map(|&c| (c as f64 / n).ln()).collect())?);

    let d2 = g.sq_dist(z, &centroids)?;
    let logits = g.add_row(&g.scale(&d2, -1.0)?, &log_prior)?;
    let logp = g.log_softmax_rows(&logits)?;
    let prob = g.scale(&g.sum(&g.pick(&logp, y)?)?, -1.0)?;
    let mut total = prob.clone();

    let cp = if cfg.cp_active() {
        let wcss = g.sum(&g.pick(&d2, y)?)?;
        let term = if cfg.cp_printed_sign { g.scale(&wcss, -1.0)? } else { wcss };
        total = g.add(&total, &g.scale(&term, cfg.lambda_cp)?)?;
        Some(term)
    } else {
        None
    };

    let sep = if cfg.sep_active() {
        let pair = g.clamp_max(&g.sq_dist(&centroids, &centroids)?, cfg.sep_threshold)?;
        // Each unordered pair appears twice and the diagonal is zero.
        let term = g.scale(&g.sum(&pair)?, -0.5)?;
        total = g.add(&total, &g.scale(&term, cfg.lambda_sep)?)?;
        Some(term)
    } else {
        None
    };

    Ok(LossTerms { prob, cp, sep, total })
}

/// Eager evaluation of every term.
pub fn total_loss(z: &Tensor, y: &[usize], k: usize, cfg: &LossConfig) -> Result<LossValues> {
    Ok(loss_terms_with(&Eager, z, y, k, cfg)?.values(&Eager))
}
