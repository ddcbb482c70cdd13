//! Zero-shot embedding pre-training for tabular clustering.
//!
//! A set-transformer encoder is pre-trained on synthetic labeled mixtures so
//! that, for an unseen table, its per-row embeddings form compact clusters
//! that classical k-means or an isotropic Gaussian mixture can recover.

pub mod checkpoint;
pub mod cluster;
pub mod config;
pub mod datagen;
pub mod dataset;
pub mod encoder;
pub mod linalg;
pub mod metrics;
pub mod objective;
pub mod tensor;
pub mod trainer;
