//! WebAssembly bindings for the browser demo. Every exported method returns
//! a JSON string; failures come back as `{"error": "..."}`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use zeus_core::cluster::{argmax_rows, baseline_cluster, pca_fit, BaselineScaling, ClusterOptions, Method};
use zeus_core::datagen::{sample_dataset_traced, PriorConfig};
use zeus_core::dataset::{LabeledDataset, Provenance, RawTable};
use zeus_core::metrics::{ari, match_clusters, matched_brier};
use zeus_core::objective::{estimate_stats, soft_assign};
use zeus_core::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error("{0}")]
    Usage(String),
    #[error("generation failed: {0}")]
    Datagen(#[from] zeus_core::datagen::DatagenError),
    #[error("clustering failed: {0}")]
    Cluster(#[from] zeus_core::cluster::ClusterError),
    #[error("scoring failed: {0}")]
    Metrics(#[from] zeus_core::metrics::MetricsError),
    #[error("{0}")]
    Objective(#[from] zeus_core::objective::ObjectiveError),
}

type Result<T> = std::result::Result<T, DemoError>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetView {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub provenance: String,
    /// First two principal components of the numeric columns.
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterView {
    pub method: String,
    /// Predicted clusters relabeled to their matched ground-truth class.
    pub labels: Vec<usize>,
    pub ari: f64,
    pub brier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldView {
    pub resolution: usize,
    /// `[x_min, x_max, y_min, y_max]` of the grid.
    pub bounds: [f64; 4],
    pub k: usize,
    /// Row-major cells, each the most probable class and its probability.
    pub cells: Vec<(usize, f64)>,
}

fn to_json<T: Serialize>(r: Result<T>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).expect("views serialize"),
        Err(e) => serde_json::json!({ "error": e.to_string() }).to_string(),
    }
}

#[wasm_bindgen]
#[derive(Debug, Default)]
pub struct Demo {
    dataset: Option<LabeledDataset>,
    view: Option<Tensor>,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Demo {
        Demo::default()
    }

    /// Samples a dataset with up to `k_max` components in up to `max_dim`
    /// numeric dimensions.
    pub fn generate(&mut self, seed: u32, k_max: usize, max_dim: usize, transformed: bool) -> String {
        to_json(self.try_generate(u64::from(seed), k_max, max_dim, transformed))
    }

    /// Clusters the current dataset with `kmeans` or `gmm` and scores it.
    pub fn cluster(&self, method: &str, n_init: usize) -> String {
        to_json(self.try_cluster(method, n_init))
    }

    /// Soft assignment to the true-label centroids over a grid covering the
    /// 2-D view; `sharpness` scales coordinates before the distances.
    pub fn soft_field(&self, resolution: usize, sharpness: f64) -> String {
        to_json(self.try_soft_field(resolution, sharpness))
    }
}

impl Demo {
    pub fn try_generate(&mut self, seed: u64, k_max: usize, max_dim: usize, transformed: bool) -> Result<DatasetView> {
        if !(2..=10).contains(&k_max) || !(2..=30).contains(&max_dim) {
            return Err(DemoError::Usage("k_max must be in 2..=10 and max_dim in 2..=30".into()));
        }
        let cfg = PriorConfig {
            k_range: [2, k_max],
            max_numeric_dim: max_dim,
            samples_per_component_range: [40, 160],
            categorical_chance: 0.0,
            ..PriorConfig::default()
        };
        let kind = if transformed { Provenance::Transformed } else { Provenance::Gaussian };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ds = sample_dataset_traced(&cfg, Some(kind), &mut rng)?.dataset;
        ds.seed = Some(seed);
        let pca = pca_fit(&ds.x, 2)?;
        let view = pca.apply(&ds.x)?;
        let out = DatasetView {
            n: ds.n(),
            d: ds.x.cols(),
            k: ds.k,
            provenance: ds.provenance.to_string(),
            points: view.iter_rows().map(|r| [r[0], r[1]]).collect(),
            labels: ds.y.clone(),
        };
        self.dataset = Some(ds);
        self.view = Some(view);
        Ok(out)
    }

    fn current(&self) -> Result<(&LabeledDataset, &Tensor)> {
        match (&self.dataset, &self.view) {
            (Some(d), Some(v)) => Ok((d, v)),
            _ => Err(DemoError::Usage("generate a dataset first".into())),
        }
    }

    pub fn try_cluster(&self, method: &str, n_init: usize) -> Result<ClusterView> {
        let (ds, _) = self.current()?;
        let m: Method = method.parse()?;
        let opts = ClusterOptions {
            kmeans_n_init: n_init.max(1),
            gmm_n_init: n_init.max(1),
            seed: ds.seed.unwrap_or(0),
        };
        let a = baseline_cluster(&RawTable::from(ds), ds.k, m, BaselineScaling::Standard, &opts)?;
        let p = a.probabilities(ds.k);
        Ok(ClusterView {
            method: method.to_string(),
            labels: argmax_rows(&match_clusters(&p, &ds.y)?),
            ari: ari(&ds.y, &a.labels())?,
            brier: matched_brier(&p, &ds.y)?,
        })
    }

    pub fn try_soft_field(&self, resolution: usize, sharpness: f64) -> Result<FieldView> {
        let (ds, view) = self.current()?;
        if !(2..=256).contains(&resolution) || !(sharpness > 0.0 && sharpness.is_finite()) {
            return Err(DemoError::Usage("resolution must be in 2..=256 and sharpness positive".into()));
        }
        let scaled = view.map(|v| v * sharpness);
        let stats = estimate_stats(&scaled, &ds.y, ds.k)?;
        let bound = |c: usize| {
            let (lo, hi) = view
                .iter_rows()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[c]), hi.max(r[c])));
            let pad = 0.05 * (hi - lo).max(1e-9);
            (lo - pad, hi + pad)
        };
        let (x0, x1) = bound(0);
        let (y0, y1) = bound(1);
        let step = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * (i as f64 + 0.5) / resolution as f64;
        let grid = Tensor::from_fn(resolution * resolution, 2, |i, c| {
            let (row, col) = (i / resolution, i % resolution);
            sharpness * if c == 0 { step(x0, x1, col) } else { step(y1, y0, row) }
        });
        let p = soft_assign(&grid, &stats)?;
        let cells = p
            .iter_rows()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
            })
            .collect();
        Ok(FieldView {
            resolution,
            bounds: [x0, x1, y0, y1],
            k: ds.k,
            cells,
        })
    }
}
