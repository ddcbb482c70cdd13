use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{DatagenError, PriorConfig, Result};
use crate::cluster::{pca_fit, PcaModel};
use crate::dataset::{LabeledDataset, Provenance};
use crate::linalg::{spectral_norm, to_dmatrix};
use crate::tensor::kernels::gelu_scalar;
use crate::tensor::Tensor;

/// Largest slope of GeLU, reached at `x = √2`.
pub const GELU_MAX_SLOPE: f64 = 1.128_904_145_185_155;
/// Range of the Lipschitz bound drawn for each residual branch.
pub const SPECTRAL_TARGET_RANGE: [f64; 2] = [0.5, 0.97];
/// Standard deviation of the branch bias.
pub const BIAS_STD: f64 = 0.1;

const POWER_ITERS: usize = 100;
const POWER_TOL: f64 = 1e-6;

/// One residual layer `h ↦ s(h) + gelu(s(h) W + b)`, where `s` standardizes
/// with statistics frozen at generation time.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualLayer {
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Lipschitz bound of the branch, `GELU_MAX_SLOPE · ‖W‖₂`.
    pub branch_lipschitz: f64,
}

impl ResidualLayer {
    pub fn width(&self) -> usize {
        self.bias.len()
    }

    pub fn standardize(&self, h: &Tensor) -> Tensor {
        Tensor::from_fn(h.rows(), h.cols(), |i, j| (h.get(i, j) - self.mean[j]) / self.std[j])
    }

    /// The residual branch on already standardized input.
    pub fn branch(&self, hs: &Tensor) -> Tensor {
        let mut pre = hs.matmul(&self.weight).expect("layer width matches input");
        for i in 0..pre.rows() {
            for (v, b) in pre.row_mut(i).iter_mut().zip(&self.bias) {
                *v = gelu_scalar(*v + b);
            }
        }
        pre
    }

    pub fn forward(&self, h: &Tensor) -> Tensor {
        let hs = self.standardize(h);
        let mut out = self.branch(&hs);
        for (o, s) in out.data_mut().iter_mut().zip(hs.data()) {
            *o += s;
        }
        out
    }

    /// Power-iteration estimate of `‖W‖₂`.
    pub fn spectral_norm_estimate(&self) -> f64 {
        spectral_norm(&to_dmatrix(&self.weight), POWER_ITERS, POWER_TOL)
    }
}

/// A random invertible residual network followed by the PCA that maps its
/// output back to the original numeric width.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTransform {
    pub layers: Vec<ResidualLayer>,
    pub numeric_dim: usize,
    pub k: usize,
    pub pca: PcaModel,
}

impl ResidualTransform {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Replays the transform on a numeric block with its labels.
    pub fn apply(&self, x: &Tensor, y: &[usize]) -> Result<Tensor> {
        let mut h = append_identity(x, y, self.k);
        for layer in &self.layers {
            h = layer.forward(&h);
        }
        Ok(self.pca.apply(&h)?)
    }
}

fn append_identity(x: &Tensor, y: &[usize], k: usize) -> Tensor {
    let d = x.cols();
    Tensor::from_fn(x.rows(), d + k, |i, j| {
        if j < d {
            x.get(i, j)
        } else if y[i] == j - d {
            1.0
        } else {
            0.0
        }
    })
}

fn column_stats(h: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let n = h.rows() as f64;
    let mut mean = vec![0.0; h.cols()];
    for row in h.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; h.cols()];
    for row in h.iter_rows() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

fn random_layer<R: Rng + ?Sized>(h: &Tensor, rng: &mut R) -> ResidualLayer {
    let m = h.cols();
    let (mean, std) = column_stats(h);
    let raw = Tensor::from_fn(m, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let estimate = spectral_norm(&to_dmatrix(&raw), POWER_ITERS, POWER_TOL);
    let [lo, hi] = SPECTRAL_TARGET_RANGE;
    let target = rng.random_range(lo..=hi);
    let scale = target / GELU_MAX_SLOPE / estimate;
    let weight = raw.map(|v| v * scale);
    let normal = Normal::new(0.0, BIAS_STD).expect("valid normal");
    let bias = (0..m).map(|_| normal.sample(rng)).collect();
    ResidualLayer {
        weight,
        bias,
        mean,
        std,
        branch_lipschitz: target,
    }
}

/// Warps the numeric columns with a residual network whose depth is drawn
/// from `transform_depth_range`.
pub fn apply_nn_transform<R: Rng + ?Sized>(
    ds: &LabeledDataset,
    cfg: &PriorConfig,
    rng: &mut R,
) -> Result<(LabeledDataset, ResidualTransform)> {
    let [lo, hi] = cfg.transform_depth_range;
    let depth = rng.random_range(lo..=hi);
    apply_nn_transform_with_depth(ds, depth, rng)
}

/// Appends the one-hot component identity to the numeric block, applies
/// `depth` residual layers, then PCA-projects back to the numeric width.
/// Categorical columns are copied unchanged.
pub fn apply_nn_transform_with_depth<R: Rng + ?Sized>(
    ds: &LabeledDataset,
    depth: usize,
    rng: &mut R,
) -> Result<(LabeledDataset, ResidualTransform)> {
    let numeric = ds.numeric_columns();
    if numeric.is_empty() || ds.n() == 0 {
        return Err(DatagenError::Config("transform needs a nonempty numeric block".into()));
    }
    let d = numeric.len();
    let block = Tensor::from_fn(ds.n(), d, |i, j| ds.x.get(i, numeric[j]));

    let mut h = append_identity(&block, &ds.y, ds.k);
    let mut layers = Vec::with_capacity(depth);
    for _ in 0..depth {
        let layer = random_layer(&h, rng);
        h = layer.forward(&h);
        layers.push(layer);
    }
    let pca = pca_fit(&h, d)?;
    if pca.rank < d {
        return Err(DatagenError::DegeneratePca { rank: pca.rank, target: d });
    }
    let reduced = pca.apply(&h)?;
    if !reduced.is_finite() {
        return Err(DatagenError::Numeric("transform produced non-finite values".into()));
    }

    let mut x = ds.x.clone();
    for i in 0..ds.n() {
        for (j, &col) in numeric.iter().enumerate() {
            x.set(i, col, reduced.get(i, j));
        }
    }
    let out = LabeledDataset {
        x,
        provenance: Provenance::Transformed,
        ..ds.clone()
    };
    let transform = ResidualTransform {
        layers,
        numeric_dim: d,
        k: ds.k,
        pca,
    };
    Ok((out, transform))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ColumnKind;
    use crate::datagen::sample_mixture;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian_ds(seed: u64, d: usize, k: usize) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = sample_mixture(&PriorConfig::default(), d, k, &mut rng).unwrap();
        let per = 40;
        let mut x = Tensor::zeros(per * k, d);
        let mut y = Vec::new();
        for c in 0..k {
            let pts = spec.sample_component(c, per, &mut rng);
            for i in 0..per {
                x.row_mut(c * per + i).copy_from_slice(pts.row(i));
                y.push(c);
            }
        }
        LabeledDataset {
            x,
            y,
            column_kinds: vec![ColumnKind::Numeric; d],
            k,
            provenance: Provenance::Gaussian,
            seed: None,
        }
    }

    #[test]
    fn gelu_slope_constant_is_the_maximum() {
        let slope = |x: f64| (gelu_scalar(x + 1e-6) - gelu_scalar(x - 1e-6)) / 2e-6;
        assert!((slope(2f64.sqrt()) - GELU_MAX_SLOPE).abs() < 1e-8);
        for i in -400..400 {
            assert!(slope(i as f64 * 0.01) <= GELU_MAX_SLOPE + 1e-8);
        }
    }

    #[test]
    fn layer_norms_are_below_one() {
        let ds = gaussian_ds(4, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, t) = apply_nn_transform_with_depth(&ds, 6, &mut rng).unwrap();
        for layer in &t.layers {
            assert!(layer.spectral_norm_estimate() < 1.0 - 1e-6);
            let exact = to_dmatrix(&layer.weight).svd(false, false).singular_values.max();
            assert!(GELU_MAX_SLOPE * exact < 1.0);
        }
    }

    #[test]
    fn transform_preserves_labels_and_width() {
        let ds = gaussian_ds(6, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (out, t) = apply_nn_transform_with_depth(&ds, 4, &mut rng).unwrap();
        assert_eq!(out.y, ds.y);
        assert_eq!(out.x.shape(), ds.x.shape());
        assert_eq!(out.provenance, Provenance::Transformed);
        let replay = t.apply(&ds.x, &ds.y).unwrap();
        assert!(replay.max_abs_diff(&out.x) < 1e-12);
    }

    #[test]
    fn depth_zero_only_appends_and_projects() {
        let ds = gaussian_ds(8, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (out, t) = apply_nn_transform_with_depth(&ds, 0, &mut rng).unwrap();
        assert_eq!(t.depth(), 0);
        assert_eq!(out.y, ds.y);
        let rank = to_dmatrix(&out.x).rank(1e-9);
        assert!(rank <= 3);
    }

    #[test]
    fn transform_is_injective_on_distinct_rows() {
        let ds = gaussian_ds(10, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (_, t) = apply_nn_transform_with_depth(&ds, 5, &mut rng).unwrap();
        let mut h = append_identity(&ds.x, &ds.y, ds.k);
        for layer in &t.layers {
            let next = layer.forward(&h);
            for i in 1..h.rows() {
                let before: f64 = h.row(i).iter().zip(h.row(i - 1)).map(|(a, b)| (a - b).abs()).sum();
                let after: f64 = next.row(i).iter().zip(next.row(i - 1)).map(|(a, b)| (a - b).abs()).sum();
                assert_eq!(before > 0.0, after > 0.0);
            }
            h = next;
        }
    }

    #[test]
    fn categorical_columns_pass_through() {
        let mut ds = gaussian_ds(12, 2, 2);
        let n = ds.n();
        let onehot = Tensor::from_fn(n, 2, |i, j| if i % 2 == j { 1.0 } else { 0.0 });
        ds.x = Tensor::from_fn(n, 4, |i, j| if j < 2 { ds.x.get(i, j) } else { onehot.get(i, j - 2) });
        ds.column_kinds.extend([ColumnKind::OneHot(0), ColumnKind::OneHot(0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (out, _) = apply_nn_transform_with_depth(&ds, 3, &mut rng).unwrap();
        for i in 0..n {
            assert_eq!(&out.x.row(i)[2..], onehot.row(i));
        }
    }
}
