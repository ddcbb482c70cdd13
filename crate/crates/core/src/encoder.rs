//! Permutation-equivariant set-transformer that maps every row of a table to
//! a representation vector, attending over all rows at once.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Eager, Graph, Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("invalid encoder configuration: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub token_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub repr_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 30,
            token_dim: 64,
            n_blocks: 3,
            n_heads: 4,
            mlp_ratio: 4,
            repr_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(EncoderError::Config(m.into()));
        if self.input_dim == 0 || self.repr_dim == 0 || self.token_dim == 0 {
            return fail("input_dim, token_dim and repr_dim must be positive");
        }
        if self.n_heads == 0 || !self.token_dim.is_multiple_of(self.n_heads) {
            return fail("token_dim must be a positive multiple of n_heads");
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.token_dim / self.n_heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.token_dim * self.mlp_ratio
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, [usize; 2])> {
        let (t, h) = (self.token_dim, self.hidden_dim());
        let mut out = vec![
            ("embed.w".to_string(), [self.input_dim, t]),
            ("embed.b".to_string(), [1, t]),
        ];
        for b in 0..self.n_blocks {
            let p = |s: &str| format!("block{b}.{s}");
            out.extend([
                (p("ln1.g"), [1, t]),
                (p("ln1.b"), [1, t]),
                (p("wq"), [t, t]),
                (p("bq"), [1, t]),
                (p("wk"), [t, t]),
                (p("bk"), [1, t]),
                (p("wv"), [t, t]),
                (p("bv"), [1, t]),
                (p("wo"), [t, t]),
                (p("bo"), [1, t]),
                (p("ln2.g"), [1, t]),
                (p("ln2.b"), [1, t]),
                (p("w1"), [t, h]),
                (p("b1"), [1, h]),
                (p("w2"), [h, t]),
                (p("b2"), [1, t]),
            ]);
        }
        out.extend([
            ("final_ln.g".to_string(), [1, t]),
            ("final_ln.b".to_string(), [1, t]),
            ("out.w".to_string(), [t, self.repr_dim]),
            ("out.b".to_string(), [1, self.repr_dim]),
        ]);
        out
    }
}

const PER_BLOCK: usize = 16;

/// Encoder weights stored flat in [`EncoderConfig::layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    tensors: Vec<Tensor>,
}

impl EncoderParams {
    /// Gaussian weights with std `1/√fan_in`, zero biases, unit norm gains.
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, [r, c])| {
                if name.ends_with(".g") {
                    Tensor::filled(r, c, 1.0)
                } else if r == 1 {
                    Tensor::zeros(r, c)
                } else {
                    let normal = Normal::new(0.0, 1.0 / (r as f64).sqrt()).expect("positive std");
                    Tensor::from_fn(r, c, |_, _| normal.sample(rng))
                }
            })
            .collect();
        Ok(Self { config, tensors })
    }

    pub fn from_tensors(config: EncoderConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(EncoderError::Config(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != *shape {
                return Err(EncoderError::Config(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(EncoderError::Config(format!("{name} contains non-finite values")));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Evaluates the encoder eagerly on an `n×input_dim` matrix.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        forward_with(&Eager, &self.config, &self.tensors, x)
    }
}

/// Encoder forward pass over any [`Graph`]. `params` holds one node per
/// layout entry; `x` is the `n×input_dim` token matrix.
pub fn forward_with<G: Graph>(g: &G, cfg: &EncoderConfig, params: &[G::Node], x: &G::Node) -> Result<G::Node> {
    let [n, width] = g.shape(x);
    if n == 0 {
        return Err(EncoderError::Usage("cannot encode an empty dataset".into()));
    }
    if width != cfg.input_dim {
        return Err(EncoderError::Usage(format!(
            "input has {width} columns, encoder expects {}",
            cfg.input_dim
        )));
    }
    if params.len() != 6 + PER_BLOCK * cfg.n_blocks {
        return Err(EncoderError::Usage("parameter count does not match configuration".into()));
    }
    let linear = |h: &G::Node, w: &G::Node, b: &G::Node| -> Result<G::Node> { Ok(g.add_row(&g.matmul(h, w)?, b)?) };

    let mut h = linear(x, &params[0], &params[1])?;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    for blk in params[2..2 + PER_BLOCK * cfg.n_blocks].chunks_exact(PER_BLOCK) {
        let a = g.layer_norm(&h, &blk[0], &blk[1], LAYER_NORM_EPS)?;
        let q = linear(&a, &blk[2], &blk[3])?;
        let k = linear(&a, &blk[4], &blk[5])?;
        let v = linear(&a, &blk[6], &blk[7])?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let qh = g.slice_cols(&q, head * hd, hd)?;
            let kh = g.slice_cols(&k, head * hd, hd)?;
            let vh = g.slice_cols(&v, head * hd, hd)?;
            heads.push(g.attention(&qh, &kh, &vh, scale)?);
        }
        let mixed = if heads.len() == 1 {
            heads.pop().expect("one head")
        } else {
            g.concat_cols(&heads)?
        };
        h = g.add(&h, &linear(&mixed, &blk[8], &blk[9])?)?;

        let m = g.layer_norm(&h, &blk[10], &blk[11], LAYER_NORM_EPS)?;
        let hidden = g.gelu(&linear(&m, &blk[12], &blk[13])?)?;
        h = g.add(&h, &linear(&hidden, &blk[14], &blk[15])?)?;
    }
    let last = params.len() - 4;
    let normed = g.layer_norm(&h, &params[last], &params[last + 1], LAYER_NORM_EPS)?;
    linear(&normed, &params[last + 2], &params[last + 3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            input_dim: 5,
            token_dim: 8,
            n_blocks: 2,
            n_heads: 2,
            mlp_ratio: 2,
            repr_dim: 3,
        }
    }

    fn random_input(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn parameter_count_matches_shapes() {
        let cfg = EncoderConfig::default();
        let p = EncoderParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (i, t, h, d) = (30, 64, 256, 64);
        let per_block = 4 * (t * t + t) + 4 * t + (t * h + h) + (h * t + t);
        let expected = (i * t + t) + 3 * per_block + 2 * t + (t * d + d);
        assert_eq!(p.n_params(), expected);
        assert_eq!(expected, 156_224);
    }

    #[test]
    fn same_seed_same_init() {
        let a = EncoderParams::init(small(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = EncoderParams::init(small(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_input_gives_finite_output() {
        let p = EncoderParams::init(small(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let z = p.forward(&Tensor::zeros(4, 5)).unwrap();
        assert!(z.is_finite());
    }

    #[test]
    fn output_shapes() {
        let p = EncoderParams::init(small(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for n in [1, 5, 100] {
            assert_eq!(p.forward(&random_input(n, 5, n as u64)).unwrap().shape(), [n, 3]);
        }
    }

    #[test]
    fn empty_or_wrong_width_is_usage_error() {
        let p = EncoderParams::init(small(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(matches!(p.forward(&Tensor::zeros(0, 5)), Err(EncoderError::Usage(_))));
        assert!(matches!(p.forward(&Tensor::zeros(3, 4)), Err(EncoderError::Usage(_))));
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = EncoderConfig {
            n_heads: 3,
            ..small()
        };
        assert!(matches!(cfg.validate(), Err(EncoderError::Config(_))));
    }

    #[test]
    fn permuting_rows_permutes_output() {
        let p = EncoderParams::init(small(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let x = random_input(9, 5, 7);
        let perm = [4, 0, 8, 2, 6, 1, 3, 7, 5];
        let z = p.forward(&x).unwrap();
        let zp = p.forward(&x.select_rows(&perm)).unwrap();
        assert!(zp.max_abs_diff(&z.select_rows(&perm)) < 1e-9);
    }

    #[test]
    fn blocked_eager_attention_matches_tape() {
        use crate::tensor::Tape;
        let p = EncoderParams::init(small(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let x = random_input(600, 5, 9);
        let eager = p.forward(&x).unwrap();
        let tape = Tape::new();
        let nodes: Vec<_> = p.tensors().iter().map(|t| tape.leaf(t.clone())).collect();
        let xv = tape.constant(x);
        let out = forward_with(&tape, p.config(), &nodes, &xv).unwrap();
        assert!(tape.value(&out).max_abs_diff(&eager) < 1e-12);
    }

    fn ln(v: &[f64], g: &Tensor, b: &Tensor) -> Vec<f64> {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        v.iter()
            .enumerate()
            .map(|(j, x)| (x - mean) / (var + LAYER_NORM_EPS).sqrt() * g.get(0, j) + b.get(0, j))
            .collect()
    }

    fn affine(v: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
        (0..w.cols())
            .map(|c| b.get(0, c) + v.iter().enumerate().map(|(r, x)| x * w.get(r, c)).sum::<f64>())
            .collect()
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
    }

    #[test]
    fn single_token_reduces_to_value_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = EncoderParams::init(small(), &mut rng).unwrap();
        // Nonzero biases and gains so every parameter matters.
        for t in p.tensors_mut() {
            if t.rows() == 1 {
                *t = Tensor::from_fn(1, t.cols(), |_, _| rng.random_range(0.5..1.5));
            }
        }
        let x = random_input(1, 5, 6);
        let ps = p.tensors();
        let mut h = affine(x.row(0), &ps[0], &ps[1]);
        for blk in ps[2..2 + 2 * PER_BLOCK].chunks_exact(PER_BLOCK) {
            let a = ln(&h, &blk[0], &blk[1]);
            let v = affine(&a, &blk[6], &blk[7]);
            let o = affine(&v, &blk[8], &blk[9]);
            h = h.iter().zip(&o).map(|(x, y)| x + y).collect();
            let m = ln(&h, &blk[10], &blk[11]);
            let hidden: Vec<f64> = affine(&m, &blk[12], &blk[13]).into_iter().map(gelu).collect();
            let f = affine(&hidden, &blk[14], &blk[15]);
            h = h.iter().zip(&f).map(|(x, y)| x + y).collect();
        }
        let k = ps.len() - 4;
        let expected = affine(&ln(&h, &ps[k], &ps[k + 1]), &ps[k + 2], &ps[k + 3]);
        let z = p.forward(&x).unwrap();
        for (a, b) in z.row(0).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}
