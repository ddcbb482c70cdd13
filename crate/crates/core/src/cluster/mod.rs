//! Classical clustering: k-means, Gaussian-mixture EM, PCA, preprocessing and
//! the embed-then-cluster inference pipeline.

mod gmm;
mod kmeans;
mod pca;
pub mod pipeline;
mod prepare;

pub use gmm::{
    argmax_rows, e_step, gmm_em, gmm_em_from, m_step, weighted_log_densities, CovarianceRegime,
    GmmConfig, GmmParams, GmmResult,
};
pub use kmeans::{kmeans, kmeans_plus_plus, lloyd, KMeansConfig, KMeansResult, LloydRun};
pub use pca::{pca_apply, pca_fit, PcaModel};
pub use pipeline::{
    baseline_cluster, baseline_features, cluster_features, embed, embed_and_cluster, normalize_embeddings, Assignment,
    BaselineScaling, ClusterOptions, Method,
};
pub use prepare::{fit_width, prepare, scale_numeric_columns, standard_scale};

use crate::encoder::EncoderError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

pub type Result<T> = std::result::Result<T, ClusterError>;
