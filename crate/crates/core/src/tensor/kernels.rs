//! Forward and backward numeric kernels shared by the eager and taped graphs.

use super::{Result, Tensor, TensorError};

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2 pi)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

/// `op(a) · op(b)` where `op` optionally transposes.
pub(crate) fn gemm(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let (m, k) = if trans_a {
        (a.cols(), a.rows())
    } else {
        (a.rows(), a.cols())
    };
    let (k2, n) = if trans_b {
        (b.cols(), b.rows())
    } else {
        (b.rows(), b.cols())
    };
    if k != k2 {
        return Err(shape_err("matmul", a, b));
    }
    let mut out = Tensor::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return Ok(out);
    }
    let (rsa, csa) = if trans_a {
        (1, a.cols() as isize)
    } else {
        (a.cols() as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols() as isize)
    } else {
        (b.cols() as isize, 1)
    };
    // SAFETY: strides describe exactly the buffers of `a`, `b` and `out`,
    // whose lengths were checked when the tensors were built.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            0.0,
            out.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(out)
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    gemm(a, false, b, false)
}

pub(crate) fn zip_map(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, a, b));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data)
}

pub(crate) fn add_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    if row.rows() != 1 || row.cols() != a.cols() {
        return Err(shape_err("add_row", a, row));
    }
    let mut out = a.clone();
    let r = row.data();
    for chunk in out.data_mut().chunks_exact_mut(r.len().max(1)) {
        for (o, b) in chunk.iter_mut().zip(r) {
            *o += b;
        }
    }
    Ok(out)
}

pub(crate) fn col_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for row in g.iter_rows() {
        for (o, v) in out.data_mut().iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let cols = x.cols().max(1);
    for row in out.data_mut().chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

pub(crate) fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let cols = x.cols().max(1);
    for row in out.data_mut().chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Backward of row softmax given its output `y`.
pub(crate) fn softmax_rows_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        let yr = y.row(i);
        let gr = g.row(i);
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in out.row_mut(i).iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    out
}

/// Backward of row log-softmax given its output `y = log p`.
pub(crate) fn log_softmax_rows_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        let gsum: f64 = g.row(i).iter().sum();
        for ((o, &yv), &gv) in out.row_mut(i).iter_mut().zip(y.row(i)).zip(g.row(i)) {
            *o = gv - yv.exp() * gsum;
        }
    }
    out
}

/// Cached intermediates of a layer norm, needed for its backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let d = x.cols();
    if gain.shape() != [1, d] {
        return Err(shape_err("layer_norm", x, gain));
    }
    if bias.shape() != [1, d] {
        return Err(shape_err("layer_norm", x, bias));
    }
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    let mut out = Tensor::zeros(x.rows(), d);
    for i in 0..x.rows() {
        let row = xhat.row_mut(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * r;
        }
        inv_std.push(r);
        let xr = xhat.row(i);
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = xr[j] * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((out, LayerNormCache { xhat, inv_std }))
}

/// Returns `(dx, dgain, dbias)`.
pub(crate) fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = g.cols();
    let xhat = &cache.xhat;
    let mut dx = Tensor::zeros(g.rows(), d);
    let mut dgain = Tensor::zeros(1, d);
    let dbias = col_sums(g);
    let mut gx = vec![0.0; d];
    for i in 0..g.rows() {
        let gr = g.row(i);
        let xr = xhat.row(i);
        for j in 0..d {
            dgain.data_mut()[j] += gr[j] * xr[j];
            gx[j] = gr[j] * gain.data()[j];
        }
        let mean_g = gx.iter().sum::<f64>() / d as f64;
        let mean_gx = gx.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let r = cache.inv_std[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = r * (gx[j] - mean_g - xr[j] * mean_gx);
        }
    }
    (dx, dgain, dbias)
}

pub(crate) fn slice_cols(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    if start + len > a.cols() {
        return Err(TensorError::Usage(format!(
            "slice_cols {start}..{} out of range for {} columns",
            start + len,
            a.cols()
        )));
    }
    Ok(Tensor::from_fn(a.rows(), len, |i, j| a.get(i, start + j)))
}

pub(crate) fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return Err(TensorError::Usage("concat_cols of zero tensors".into()));
    };
    let rows = first.rows();
    if let Some(bad) = parts.iter().find(|p| p.rows() != rows) {
        return Err(shape_err("concat_cols", first, bad));
    }
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::new(rows, cols, data)
}

/// Pairwise squared Euclidean distances between the rows of `a` and `b`.
pub(crate) fn sq_dist(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(shape_err("sq_dist", a, b));
    }
    Ok(Tensor::from_fn(a.rows(), b.rows(), |i, j| {
        a.row(i)
            .iter()
            .zip(b.row(j))
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    }))
}

/// Returns `(da, db)` for `sq_dist(a, b)` with upstream gradient `g`.
pub(crate) fn sq_dist_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let d = a.cols();
    let mut da = Tensor::zeros(a.rows(), d);
    let mut db = Tensor::zeros(b.rows(), d);
    for i in 0..a.rows() {
        let ar = a.row(i);
        for j in 0..b.rows() {
            let w = 2.0 * g.get(i, j);
            if w == 0.0 {
                continue;
            }
            let br = b.row(j);
            for k in 0..d {
                let diff = w * (ar[k] - br[k]);
                da.data_mut()[i * d + k] += diff;
                db.data_mut()[j * d + k] -= diff;
            }
        }
    }
    (da, db)
}

pub(crate) fn pick(a: &Tensor, idx: &[usize]) -> Result<Tensor> {
    if idx.len() != a.rows() {
        return Err(TensorError::Usage(format!(
            "pick: {} indices for {} rows",
            idx.len(),
            a.rows()
        )));
    }
    if let Some(&bad) = idx.iter().find(|&&j| j >= a.cols()) {
        return Err(TensorError::Usage(format!(
            "pick: column {bad} out of range for {} columns",
            a.cols()
        )));
    }
    Ok(Tensor::from_fn(a.rows(), 1, |i, _| a.get(i, idx[i])))
}

pub(crate) fn check_finite(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(TensorError::NonFinite { op })
    }
}
