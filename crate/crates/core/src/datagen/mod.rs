//! Synthetic labeled clustering datasets drawn from a prior over separated
//! Gaussian mixtures, optionally warped by an invertible residual network and
//! extended with categorical columns.

mod categorical;
mod mixture;
mod transform;

pub use categorical::add_categoricals;
pub use mixture::{gaussian_w2, sample_mixture, MixtureSpec, MAX_SHIFT_STEPS, SHIFT_STEP_FRACTION};
pub use transform::{
    apply_nn_transform, apply_nn_transform_with_depth, ResidualLayer, ResidualTransform, GELU_MAX_SLOPE,
    SPECTRAL_TARGET_RANGE,
};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{scale_numeric_columns, standard_scale, ClusterError};
use crate::dataset::{ColumnKind, LabeledDataset, Provenance};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DatagenError {
    #[error("invalid prior configuration: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("component {component} did not reach W2 separation {floor:.4} within {steps} shift steps")]
    Separation { component: usize, floor: f64, steps: usize },
    #[error("PCA after the transform has rank {rank}, need {target}")]
    DegeneratePca { rank: usize, target: usize },
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

pub type Result<T> = std::result::Result<T, DatagenError>;

/// Parameters of the dataset prior. Intervals are closed and serialize as
/// `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub k_range: [usize; 2],
    pub samples_per_component_range: [usize; 2],
    pub max_numeric_dim: usize,
    pub min_sep_range: [f64; 2],
    pub eigenvalue_range: [f64; 2],
    pub full_rank_prob: f64,
    pub degenerate_prob: f64,
    pub categorical_chance: f64,
    pub max_categorical_vars: usize,
    pub category_count_range: [usize; 2],
    /// `[0, 0]` disables warping layers while keeping the append/PCA step.
    pub transform_depth_range: [usize; 2],
    pub transformed_fraction: f64,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            k_range: [2, 10],
            samples_per_component_range: [50, 800],
            max_numeric_dim: 30,
            min_sep_range: [0.5, 1.0],
            eigenvalue_range: [0.005, 0.05],
            full_rank_prob: 0.25,
            degenerate_prob: 0.2,
            categorical_chance: 0.3,
            max_categorical_vars: 3,
            category_count_range: [2, 5],
            transform_depth_range: [3, 6],
            transformed_fraction: 0.5,
            seed: 0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DatagenError::Config(msg));
        for (name, [lo, hi]) in [
            ("k_range", self.k_range),
            ("samples_per_component_range", self.samples_per_component_range),
            ("category_count_range", self.category_count_range),
            ("transform_depth_range", self.transform_depth_range),
        ] {
            if lo > hi {
                return bad(format!("{name}: lower bound {lo} exceeds upper bound {hi}"));
            }
        }
        for (name, [lo, hi]) in [("min_sep_range", self.min_sep_range), ("eigenvalue_range", self.eigenvalue_range)] {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return bad(format!("{name}: invalid interval [{lo}, {hi}]"));
            }
        }
        for (name, p) in [
            ("full_rank_prob", self.full_rank_prob),
            ("degenerate_prob", self.degenerate_prob),
            ("categorical_chance", self.categorical_chance),
            ("transformed_fraction", self.transformed_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if self.full_rank_prob + self.degenerate_prob > 1.0 {
            return bad("full_rank_prob + degenerate_prob exceeds 1".into());
        }
        if self.k_range[0] == 0 {
            return bad("k_range must start at 1 or more".into());
        }
        if self.samples_per_component_range[0] == 0 {
            return bad("samples_per_component_range must start at 1 or more".into());
        }
        if self.max_numeric_dim < 2 {
            return bad("max_numeric_dim must be at least 2".into());
        }
        if self.eigenvalue_range[0] <= 0.0 {
            return bad("eigenvalues must be positive".into());
        }
        if self.min_sep_range[0] < 0.0 {
            return bad("min_sep_range must be nonnegative".into());
        }
        if self.category_count_range[0] < 2 {
            return bad("categorical variables need at least 2 categories".into());
        }
        if self.categorical_chance > 0.0 && self.max_categorical_vars == 0 {
            return bad("categorical_chance > 0 with max_categorical_vars = 0".into());
        }
        Ok(())
    }
}

/// A dataset together with the latent objects that produced it.
#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub dataset: LabeledDataset,
    pub mixture: MixtureSpec,
    pub transform: Option<ResidualTransform>,
    pub component_counts: Vec<usize>,
    pub categorical_vars: usize,
}

/// Seed of the `index`-th dataset of a corpus rooted at `base`.
pub fn dataset_seed(base: u64, index: u64) -> u64 {
    // SplitMix64 finalizer.
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws one dataset from the prior.
pub fn sample_dataset<R: Rng + ?Sized>(cfg: &PriorConfig, rng: &mut R) -> Result<LabeledDataset> {
    Ok(sample_dataset_traced(cfg, None, rng)?.dataset)
}

/// Draws one dataset with the configured seed and records that seed.
pub fn generate(cfg: &PriorConfig) -> Result<LabeledDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ds = sample_dataset(cfg, &mut rng)?;
    ds.seed = Some(cfg.seed);
    Ok(ds)
}

/// Like [`sample_dataset`], optionally forcing the provenance, and keeping
/// the mixture and transform for inspection.
pub fn sample_dataset_traced<R: Rng + ?Sized>(
    cfg: &PriorConfig,
    force: Option<Provenance>,
    rng: &mut R,
) -> Result<GeneratedDataset> {
    cfg.validate()?;
    if force == Some(Provenance::External) {
        return Err(DatagenError::Config("the prior cannot produce external datasets".into()));
    }
    let k = rng.random_range(cfg.k_range[0]..=cfg.k_range[1]);
    let [c_lo, c_hi] = cfg.samples_per_component_range;
    let counts: Vec<usize> = (0..k).map(|_| rng.random_range(c_lo..=c_hi)).collect();
    let d = rng.random_range(2..=cfg.max_numeric_dim);
    let mixture = sample_mixture(cfg, d, k, rng)?;

    let n: usize = counts.iter().sum();
    let mut x = Tensor::zeros(n, d);
    let mut y = Vec::with_capacity(n);
    let mut row = 0;
    for (c, &count) in counts.iter().enumerate() {
        let pts = mixture.sample_component(c, count, rng);
        for i in 0..count {
            x.row_mut(row).copy_from_slice(pts.row(i));
            y.push(c);
            row += 1;
        }
    }
    let mut ds = LabeledDataset {
        x,
        y,
        column_kinds: vec![ColumnKind::Numeric; d],
        k,
        provenance: Provenance::Gaussian,
        seed: None,
    };

    let transformed = match force {
        Some(p) => p == Provenance::Transformed,
        None => rng.random::<f64>() < cfg.transformed_fraction,
    };
    let transform = if transformed {
        let (out, t) = apply_nn_transform(&ds, cfg, rng)?;
        ds = out;
        Some(t)
    } else {
        None
    };

    ds = add_categoricals(&ds, cfg, rng);
    let categorical_vars = ds.one_hot_groups().len();

    ds = finalize(&ds);
    shuffle_rows(&mut ds, rng);
    Ok(GeneratedDataset {
        dataset: ds,
        mixture,
        transform,
        component_counts: counts,
        categorical_vars,
    })
}

fn shuffle_rows<R: Rng + ?Sized>(ds: &mut LabeledDataset, rng: &mut R) {
    let mut order: Vec<usize> = (0..ds.n()).collect();
    order.shuffle(rng);
    ds.x = ds.x.select_rows(&order);
    ds.y = order.iter().map(|&i| ds.y[i]).collect();
}

/// Standardizes each numeric column, then maps the whole numeric block into
/// `[-1, 1]` with one shared affine map. Constant columns become zero.
pub fn finalize(ds: &LabeledDataset) -> LabeledDataset {
    let numeric = ds.numeric_columns();
    let mut x = standard_scale(&ds.x, &ds.column_kinds);
    let live: Vec<usize> = numeric
        .iter()
        .copied()
        .filter(|&j| (0..x.rows()).any(|i| x.get(i, j) != 0.0))
        .collect();
    let (lo, hi) = live.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |acc, &j| {
        (0..x.rows()).fold(acc, |(lo, hi), i| (lo.min(x.get(i, j)), hi.max(x.get(i, j))))
    });
    if hi > lo {
        for &j in &live {
            for i in 0..x.rows() {
                x.set(i, j, 2.0 * (x.get(i, j) - lo) / (hi - lo) - 1.0);
            }
        }
    }
    LabeledDataset { x, ..ds.clone() }
}

/// Column-by-column min-max variant of [`finalize`].
pub fn finalize_per_column(ds: &LabeledDataset) -> LabeledDataset {
    LabeledDataset {
        x: scale_numeric_columns(&ds.x, &ds.column_kinds),
        ..ds.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_ds(x: Tensor) -> LabeledDataset {
        let n = x.rows();
        LabeledDataset {
            column_kinds: vec![ColumnKind::Numeric; x.cols()],
            x,
            y: vec![0; n],
            k: 1,
            provenance: Provenance::Gaussian,
            seed: None,
        }
    }

    #[test]
    fn default_config_is_valid() {
        PriorConfig::default().validate().unwrap();
    }

    #[test]
    fn config_round_trips_as_json() {
        let cfg = PriorConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"k_range\":[2,10]"));
        let back: PriorConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<PriorConfig>("{\"k_rnge\":[2,3]}").is_err());
    }

    #[test]
    fn inverted_interval_is_rejected() {
        let cfg = PriorConfig {
            k_range: [5, 2],
            ..PriorConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(DatagenError::Config(_))));
    }

    #[test]
    fn per_column_variant_maps_column_to_unit_interval() {
        let ds = numeric_ds(Tensor::from_rows(&[[0.0], [5.0], [10.0]]).unwrap());
        assert_eq!(finalize_per_column(&ds).x.data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn finalize_zeroes_constant_columns_and_spans_unit_interval() {
        let ds = numeric_ds(Tensor::from_rows(&[[2.0, 0.0, 1.0], [2.0, 1.0, 3.0], [2.0, 5.0, 2.0]]).unwrap());
        let out = finalize(&ds);
        for i in 0..3 {
            assert_eq!(out.x.get(i, 0), 0.0);
        }
        let live: Vec<f64> = (0..3).flat_map(|i| [out.x.get(i, 1), out.x.get(i, 2)]).collect();
        let lo = live.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = live.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!((lo + 1.0).abs() < 1e-15 && (hi - 1.0).abs() < 1e-15);
    }

    #[test]
    fn same_seed_same_dataset() {
        let cfg = PriorConfig {
            seed: 42,
            samples_per_component_range: [20, 40],
            ..PriorConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate(&PriorConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.x, c.x);
    }

    #[test]
    fn generated_dataset_is_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = PriorConfig {
            samples_per_component_range: [30, 60],
            categorical_chance: 1.0,
            ..PriorConfig::default()
        };
        for force in [Provenance::Gaussian, Provenance::Transformed] {
            let g = sample_dataset_traced(&cfg, Some(force), &mut rng).unwrap();
            g.dataset.validate().unwrap();
            assert_eq!(g.dataset.provenance, force);
            assert_eq!(g.dataset.counts(), g.component_counts);
            for j in g.dataset.numeric_columns() {
                for i in 0..g.dataset.n() {
                    assert!((-1.0..=1.0).contains(&g.dataset.x.get(i, j)));
                }
            }
        }
    }

    #[test]
    fn corpus_seeds_differ() {
        assert_ne!(dataset_seed(0, 0), dataset_seed(0, 1));
        assert_ne!(dataset_seed(0, 1), dataset_seed(1, 0));
    }
}
