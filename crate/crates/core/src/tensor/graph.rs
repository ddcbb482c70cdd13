use super::kernels::{self, check_finite};
use super::{Result, Tensor, TensorError};

/// Differentiable operations over some node type.
///
/// Model code is written against this trait so the same forward pass can be
/// evaluated eagerly or recorded on a [`super::Tape`].
pub trait Graph {
    type Node: Clone;

    /// Wraps a value that never receives a gradient.
    fn constant(&self, t: Tensor) -> Self::Node;
    fn value(&self, n: &Self::Node) -> Tensor;
    fn shape(&self, n: &Self::Node) -> [usize; 2];

    fn matmul(&self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    /// `a · bᵀ`
    fn matmul_nt(&self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    fn add(&self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    /// Adds a `1×m` row to every row of an `n×m` matrix.
    fn add_row(&self, a: &Self::Node, row: &Self::Node) -> Result<Self::Node>;
    /// Elementwise product.
    fn mul(&self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    fn scale(&self, a: &Self::Node, s: f64) -> Result<Self::Node>;
    fn gelu(&self, a: &Self::Node) -> Result<Self::Node>;
    fn softmax_rows(&self, a: &Self::Node) -> Result<Self::Node>;
    fn log_softmax_rows(&self, a: &Self::Node) -> Result<Self::Node>;
    fn layer_norm(
        &self,
        x: &Self::Node,
        gain: &Self::Node,
        bias: &Self::Node,
        eps: f64,
    ) -> Result<Self::Node>;
    fn slice_cols(&self, a: &Self::Node, start: usize, len: usize) -> Result<Self::Node>;
    fn concat_cols(&self, parts: &[Self::Node]) -> Result<Self::Node>;
    /// Pairwise squared distances between rows, `n×d, m×d -> n×m`.
    fn sq_dist(&self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    /// `out[i] = a[i, idx[i]]` as an `n×1` column.
    fn pick(&self, a: &Self::Node, idx: &[usize]) -> Result<Self::Node>;
    /// Sum of all entries as a `1×1` tensor.
    fn sum(&self, a: &Self::Node) -> Result<Self::Node>;
    /// `min(a, cap)` elementwise; the gradient is zero where the cap binds.
    fn clamp_max(&self, a: &Self::Node, cap: f64) -> Result<Self::Node>;

    /// Scaled dot-product attention `softmax(scale · q kᵀ) v`.
    fn attention(&self, q: &Self::Node, k: &Self::Node, v: &Self::Node, scale: f64) -> Result<Self::Node> {
        let scores = self.scale(&self.matmul_nt(q, k)?, scale)?;
        let weights = self.softmax_rows(&scores)?;
        self.matmul(&weights, v)
    }
}

/// Query rows per block in the eager attention.
const ATTENTION_BLOCK: usize = 256;

/// Direct evaluation without recording anything.
#[derive(Debug, Clone, Copy, Default)]
pub struct Eager;

impl Graph for Eager {
    type Node = Tensor;

    fn constant(&self, t: Tensor) -> Tensor {
        t
    }

    fn value(&self, n: &Tensor) -> Tensor {
        n.clone()
    }

    fn shape(&self, n: &Tensor) -> [usize; 2] {
        n.shape()
    }

    fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        check_finite("matmul", kernels::gemm(a, false, b, false)?)
    }

    fn matmul_nt(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        check_finite("matmul_nt", kernels::gemm(a, false, b, true)?)
    }

    fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        check_finite("add", kernels::zip_map("add", a, b, |x, y| x + y)?)
    }

    fn add_row(&self, a: &Tensor, row: &Tensor) -> Result<Tensor> {
        check_finite("add_row", kernels::add_row(a, row)?)
    }

    fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        check_finite("mul", kernels::zip_map("mul", a, b, |x, y| x * y)?)
    }

    fn scale(&self, a: &Tensor, s: f64) -> Result<Tensor> {
        check_finite("scale", a.map(|v| v * s))
    }

    fn gelu(&self, a: &Tensor) -> Result<Tensor> {
        check_finite("gelu", a.map(kernels::gelu_scalar))
    }

    fn softmax_rows(&self, a: &Tensor) -> Result<Tensor> {
        check_finite("softmax_rows", kernels::softmax_rows(a))
    }

    fn log_softmax_rows(&self, a: &Tensor) -> Result<Tensor> {
        check_finite("log_softmax_rows", kernels::log_softmax_rows(a))
    }

    fn layer_norm(&self, x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        check_finite("layer_norm", kernels::layer_norm(x, gain, bias, eps)?.0)
    }

    fn slice_cols(&self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        kernels::slice_cols(a, start, len)
    }

    fn concat_cols(&self, parts: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        kernels::concat_cols(&refs)
    }

    fn sq_dist(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        check_finite("sq_dist", kernels::sq_dist(a, b)?)
    }

    fn pick(&self, a: &Tensor, idx: &[usize]) -> Result<Tensor> {
        kernels::pick(a, idx)
    }

    fn sum(&self, a: &Tensor) -> Result<Tensor> {
        check_finite("sum", Tensor::scalar(a.sum()))
    }

    fn clamp_max(&self, a: &Tensor, cap: f64) -> Result<Tensor> {
        if cap.is_nan() {
            return Err(TensorError::Usage("clamp_max with NaN cap".into()));
        }
        Ok(a.map(|v| v.min(cap)))
    }

    /// Processes queries in row blocks so memory stays `O(block · n)`.
    fn attention(&self, q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Result<Tensor> {
        let n = q.rows();
        if n <= ATTENTION_BLOCK {
            let scores = kernels::gemm(q, false, k, true)?.map(|s| s * scale);
            return check_finite("attention", kernels::matmul(&kernels::softmax_rows(&scores), v)?);
        }
        let mut out = Tensor::zeros(n, v.cols());
        let mut start = 0;
        while start < n {
            let len = ATTENTION_BLOCK.min(n - start);
            let rows: Vec<usize> = (start..start + len).collect();
            let scores = kernels::gemm(&q.select_rows(&rows), false, k, true)?.map(|s| s * scale);
            let part = kernels::matmul(&kernels::softmax_rows(&scores), v)?;
            out.data_mut()[start * v.cols()..(start + len) * v.cols()].copy_from_slice(part.data());
            start += len;
        }
        check_finite("attention", out)
    }
}
