use rand::Rng;
use rand_distr::{Distribution, Gamma};

use super::PriorConfig;
use crate::dataset::{ColumnKind, LabeledDataset};
use crate::tensor::Tensor;

/// Concentration of the per-cluster Dirichlet over categories.
pub const DIRICHLET_ALPHA: f64 = 0.5;

fn dirichlet<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(DIRICHLET_ALPHA, 1.0).expect("valid gamma parameters");
    loop {
        let draws: Vec<f64> = (0..dim).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

fn draw_category<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let mut u: f64 = rng.random();
    for (c, &p) in probs.iter().enumerate() {
        if u < p {
            return c;
        }
        u -= p;
    }
    probs.len() - 1
}

/// With probability `categorical_chance`, appends one-hot encoded
/// categorical variables whose distribution depends on the row's cluster.
pub fn add_categoricals<R: Rng + ?Sized>(ds: &LabeledDataset, cfg: &PriorConfig, rng: &mut R) -> LabeledDataset {
    if cfg.max_categorical_vars == 0 || rng.random::<f64>() >= cfg.categorical_chance {
        return ds.clone();
    }
    let n_vars = rng.random_range(1..=cfg.max_categorical_vars);
    let mut next_group = ds.one_hot_groups().keys().next_back().map_or(0, |g| g + 1);
    let mut blocks: Vec<Tensor> = Vec::with_capacity(n_vars);
    let mut kinds = ds.column_kinds.clone();

    for _ in 0..n_vars {
        let [lo, hi] = cfg.category_count_range;
        let categories = rng.random_range(lo..=hi);
        let per_cluster: Vec<Vec<f64>> = (0..ds.k).map(|_| dirichlet(categories, rng)).collect();
        let mut block = Tensor::zeros(ds.n(), categories);
        for (i, &label) in ds.y.iter().enumerate() {
            block.set(i, draw_category(&per_cluster[label], rng), 1.0);
        }
        blocks.push(block);
        kinds.extend(std::iter::repeat_n(ColumnKind::OneHot(next_group), categories));
        next_group += 1;
    }

    let width = kinds.len();
    let mut x = Tensor::zeros(ds.n(), width);
    for i in 0..ds.n() {
        let row = x.row_mut(i);
        let mut at = ds.x.cols();
        row[..at].copy_from_slice(ds.x.row(i));
        for block in &blocks {
            row[at..at + block.cols()].copy_from_slice(block.row(i));
            at += block.cols();
        }
    }
    LabeledDataset {
        x,
        column_kinds: kinds,
        ..ds.clone()
    }
}
