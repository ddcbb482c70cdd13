//! Zero-shot inference: prepare a table, embed every row with a pre-trained
//! encoder, then cluster the embeddings with a classical method.

use serde::{Deserialize, Serialize};

use super::{gmm_em, kmeans, prepare, scale_numeric_columns, standard_scale, ClusterError, CovarianceRegime, GmmConfig, KMeansConfig, Result};
use crate::dataset::RawTable;
use crate::encoder::EncoderParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Hard labels from k-means.
    Kmeans,
    /// Soft responsibilities from an identity-covariance mixture.
    Gmm,
}

impl std::str::FromStr for Method {
    type Err = ClusterError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(Self::Kmeans),
            "gmm" => Ok(Self::Gmm),
            other => Err(ClusterError::Usage(format!("unknown method '{other}', expected kmeans or gmm"))),
        }
    }
}

/// Feature scaling applied before the classical baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineScaling {
    /// Numeric columns standardized only.
    #[default]
    Standard,
    /// Numeric columns standardized, then min-max scaled to `[-1, 1]`.
    UnitRange,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Assignment {
    Hard(Vec<usize>),
    Soft(Tensor),
}

impl Assignment {
    pub fn labels(&self) -> Vec<usize> {
        match self {
            Self::Hard(l) => l.clone(),
            Self::Soft(p) => super::argmax_rows(p),
        }
    }

    /// Row-stochastic matrix; hard labels become one-hot rows.
    pub fn probabilities(&self, k: usize) -> Tensor {
        match self {
            Self::Hard(l) => Tensor::from_fn(l.len(), k, |i, j| if l[i] == j { 1.0 } else { 0.0 }),
            Self::Soft(p) => p.clone(),
        }
    }
}

/// Restarts and seed used by the classical clustering step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterOptions {
    pub kmeans_n_init: usize,
    pub gmm_n_init: usize,
    pub seed: u64,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        Self {
            kmeans_n_init: 100,
            gmm_n_init: 50,
            seed: 0,
        }
    }
}

/// Per-column min-max scaling to `[-1, 1]`; constant columns become zero.
pub fn normalize_embeddings(z: &Tensor) -> Tensor {
    let mut out = z.clone();
    for j in 0..z.cols() {
        let (lo, hi) = (0..z.rows()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
            (lo.min(z.get(i, j)), hi.max(z.get(i, j)))
        });
        for i in 0..z.rows() {
            let v = if hi > lo { 2.0 * (z.get(i, j) - lo) / (hi - lo) - 1.0 } else { 0.0 };
            out.set(i, j, v);
        }
    }
    out
}

/// Raw encoder output for every row of `table`.
pub fn embed(params: &EncoderParams, table: &RawTable) -> Result<Tensor> {
    let x = prepare(table, params.config().input_dim)?;
    Ok(params.forward(&x)?)
}

/// Clusters an arbitrary feature matrix.
pub fn cluster_features(x: &Tensor, k: usize, method: Method, opts: &ClusterOptions) -> Result<Assignment> {
    match method {
        Method::Kmeans => {
            let cfg = KMeansConfig {
                n_init: opts.kmeans_n_init,
                ..KMeansConfig::new(k, opts.seed)
            };
            Ok(Assignment::Hard(kmeans(x, &cfg)?.labels))
        }
        Method::Gmm => {
            let cfg = GmmConfig {
                n_init: opts.gmm_n_init,
                ..GmmConfig::new(k, CovarianceRegime::Identity, opts.seed)
            };
            Ok(Assignment::Soft(gmm_em(x, &cfg)?.responsibilities))
        }
    }
}

/// Embeds, normalizes the embeddings to `[-1, 1]` per dimension, then clusters.
pub fn embed_and_cluster(
    params: &EncoderParams,
    table: &RawTable,
    k: usize,
    method: Method,
    opts: &ClusterOptions,
) -> Result<Assignment> {
    if k == 0 {
        return Err(ClusterError::Usage("K must be at least 1".into()));
    }
    if table.x.rows() < k {
        return Err(ClusterError::Usage(format!(
            "cannot form {k} clusters from {} rows",
            table.x.rows()
        )));
    }
    let z = normalize_embeddings(&embed(params, table)?);
    cluster_features(&z, k, method, opts)
}

/// Features for the classical baselines: scaled numeric columns and
/// one-hot columns, at the table's own width.
pub fn baseline_features(table: &RawTable, scaling: BaselineScaling) -> Result<Tensor> {
    if table.x.rows() == 0 || table.x.cols() == 0 {
        return Err(ClusterError::Usage("empty dataset".into()));
    }
    Ok(match scaling {
        BaselineScaling::Standard => standard_scale(&table.x, &table.column_kinds),
        BaselineScaling::UnitRange => scale_numeric_columns(&table.x, &table.column_kinds),
    })
}

/// Classical method applied directly to the baseline features.
pub fn baseline_cluster(
    table: &RawTable,
    k: usize,
    method: Method,
    scaling: BaselineScaling,
    opts: &ClusterOptions,
) -> Result<Assignment> {
    if table.x.rows() < k {
        return Err(ClusterError::Usage(format!(
            "cannot form {k} clusters from {} rows",
            table.x.rows()
        )));
    }
    let x = baseline_features(table, scaling)?;
    match method {
        Method::Kmeans => cluster_features(&x, k, method, opts),
        // The raw mixture baseline uses full covariances.
        Method::Gmm => {
            let cfg = GmmConfig {
                n_init: opts.gmm_n_init,
                ..GmmConfig::new(k, CovarianceRegime::Full, opts.seed)
            };
            Ok(Assignment::Soft(gmm_em(&x, &cfg)?.responsibilities))
        }
    }
}
