//! Turning a raw table into the fixed-width matrix the encoder consumes.

use super::pca::pca_fit;
use super::{ClusterError, Result};
use crate::dataset::{ColumnKind, RawTable};
use crate::tensor::Tensor;

/// Mean and population standard deviation of column `j`.
fn column_moments(x: &Tensor, j: usize) -> (f64, f64) {
    let n = x.rows() as f64;
    let mean = (0..x.rows()).map(|i| x.get(i, j)).sum::<f64>() / n;
    let var = (0..x.rows()).map(|i| (x.get(i, j) - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Relative spread below which a column counts as constant.
fn is_constant(x: &Tensor, j: usize) -> bool {
    let (lo, hi) = column_range(x, j);
    hi - lo <= 1e-12 * hi.abs().max(lo.abs()).max(1.0)
}

fn column_range(x: &Tensor, j: usize) -> (f64, f64) {
    (0..x.rows()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
        let v = x.get(i, j);
        (lo.min(v), hi.max(v))
    })
}

/// Standardizes numeric columns in place; constant columns become zero.
pub fn standard_scale(x: &Tensor, kinds: &[ColumnKind]) -> Tensor {
    let mut out = x.clone();
    for (j, kind) in kinds.iter().enumerate() {
        if *kind != ColumnKind::Numeric {
            continue;
        }
        let constant = is_constant(x, j);
        let (mean, std) = column_moments(x, j);
        for i in 0..x.rows() {
            let v = if constant { 0.0 } else { (x.get(i, j) - mean) / std };
            out.set(i, j, v);
        }
    }
    out
}

/// Standardizes each numeric column, then min-max scales it to `[-1, 1]`.
pub fn scale_numeric_columns(x: &Tensor, kinds: &[ColumnKind]) -> Tensor {
    let mut out = standard_scale(x, kinds);
    for (j, kind) in kinds.iter().enumerate() {
        if *kind != ColumnKind::Numeric || is_constant(x, j) {
            continue;
        }
        let (lo, hi) = column_range(&out, j);
        for i in 0..out.rows() {
            let v = 2.0 * (out.get(i, j) - lo) / (hi - lo) - 1.0;
            out.set(i, j, v);
        }
    }
    out
}

/// Zero-pads on the right, or PCA-reduces, to exactly `width` columns.
pub fn fit_width(x: &Tensor, width: usize) -> Result<Tensor> {
    use std::cmp::Ordering;
    match x.cols().cmp(&width) {
        Ordering::Equal => Ok(x.clone()),
        Ordering::Less => Ok(Tensor::from_fn(x.rows(), width, |i, j| {
            if j < x.cols() {
                x.get(i, j)
            } else {
                0.0
            }
        })),
        Ordering::Greater => {
            let model = pca_fit(x, width)?;
            model.apply(x)
        }
    }
}

/// Numeric columns standardized and scaled to `[-1, 1]`, one-hot columns
/// passed through, then padded or PCA-reduced to `input_dim` columns.
pub fn prepare(table: &RawTable, input_dim: usize) -> Result<Tensor> {
    if table.x.rows() == 0 || table.x.cols() == 0 {
        return Err(ClusterError::Usage("cannot prepare an empty dataset".into()));
    }
    if table.column_kinds.len() != table.x.cols() {
        return Err(ClusterError::Usage(format!(
            "{} column kinds for {} columns",
            table.column_kinds.len(),
            table.x.cols()
        )));
    }
    if input_dim == 0 {
        return Err(ClusterError::Usage("input_dim must be positive".into()));
    }
    let scaled = scale_numeric_columns(&table.x, &table.column_kinds);
    fit_width(&scaled, input_dim)
}
