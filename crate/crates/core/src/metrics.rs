//! External clustering metrics and benchmark summaries.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Class-by-cluster counts over densely renumbered labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub row_sums: Vec<u64>,
    pub col_sums: Vec<u64>,
    pub n: u64,
}

fn dense(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut ids = BTreeMap::new();
    for &l in labels {
        let next = ids.len();
        ids.entry(l).or_insert(next);
    }
    (labels.iter().map(|l| ids[l]).collect(), ids.len())
}

impl ContingencyTable {
    pub fn new(classes: &[usize], clusters: &[usize]) -> Result<Self> {
        if classes.len() != clusters.len() {
            return Err(MetricsError::Usage(format!(
                "label vectors differ in length: {} vs {}",
                classes.len(),
                clusters.len()
            )));
        }
        let (a, ca) = dense(classes);
        let (b, cb) = dense(clusters);
        let mut counts = vec![vec![0u64; cb]; ca];
        for (&i, &j) in a.iter().zip(&b) {
            counts[i][j] += 1;
        }
        let row_sums = counts.iter().map(|r| r.iter().sum()).collect();
        let col_sums = (0..cb).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
        Ok(Self {
            counts,
            row_sums,
            col_sums,
            n: classes.len() as u64,
        })
    }
}

fn pairs(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Adjusted Rand index under the permutation model. When both partitions
/// are trivial in the same way (expected index equals the maximum), returns 1.
pub fn ari(labels_a: &[usize], labels_b: &[usize]) -> Result<f64> {
    let table = ContingencyTable::new(labels_a, labels_b)?;
    if table.n < 2 {
        return Err(MetricsError::Usage("ARI needs at least two points".into()));
    }
    let index: u64 = table.counts.iter().flatten().map(|&c| pairs(c)).sum();
    let sum_a: u64 = table.row_sums.iter().map(|&c| pairs(c)).sum();
    let sum_b: u64 = table.col_sums.iter().map(|&c| pairs(c)).sum();
    // (index - expected) / (max - expected), scaled by 2·C(n,2) so that both
    // sides are integers and only the final division rounds.
    let (index, sum_a, sum_b, total) = (index as i128, sum_a as i128, sum_b as i128, pairs(table.n) as i128);
    let num = 2 * (index * total - sum_a * sum_b);
    let den = (sum_a + sum_b) * total - 2 * sum_a * sum_b;
    if den == 0 {
        return Ok(1.0);
    }
    Ok(num as f64 / den as f64)
}

/// Assignment maximizing `Σ_j a[j][σ(j)]` over permutations `σ` of a square
/// matrix; `result[j] = σ(j)`.
pub fn hungarian_match(a: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = a.len();
    if a.iter().any(|r| r.len() != n) {
        return Err(MetricsError::Usage("agreement matrix must be square".into()));
    }
    if a.iter().flatten().any(|v| !v.is_finite()) {
        return Err(MetricsError::Usage("agreement matrix must be finite".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // Shortest augmenting paths with row/column potentials on the cost
    // matrix `-a`, 1-based with a virtual column 0.
    let cost = |i: usize, j: usize| -a[i - 1][j - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    Ok(assignment)
}

pub fn one_hot(labels: &[usize], k: usize) -> Tensor {
    Tensor::from_fn(labels.len(), k, |i, j| if labels[i] == j { 1.0 } else { 0.0 })
}

/// `A[j][c] = Σ_i p_ij · [truth_i = c]`.
pub fn agreement_matrix(p: &Tensor, truth: &[usize]) -> Result<Vec<Vec<f64>>> {
    if p.rows() != truth.len() {
        return Err(MetricsError::Usage(format!("{} predictions for {} labels", p.rows(), truth.len())));
    }
    let k = p.cols();
    if let Some(&bad) = truth.iter().find(|&&c| c >= k) {
        return Err(MetricsError::Usage(format!(
            "class {bad} has no matching cluster among {k} columns"
        )));
    }
    let mut a = vec![vec![0.0; k]; k];
    for (i, &c) in truth.iter().enumerate() {
        for (j, row) in a.iter_mut().enumerate() {
            row[c] += p.get(i, j);
        }
    }
    Ok(a)
}

/// Reorders cluster columns so that column `c` holds the cluster matched to
/// class `c`.
pub fn match_clusters(p: &Tensor, truth: &[usize]) -> Result<Tensor> {
    let sigma = hungarian_match(&agreement_matrix(p, truth)?)?;
    let mut out = Tensor::zeros(p.rows(), p.cols());
    for (j, &c) in sigma.iter().enumerate() {
        for i in 0..p.rows() {
            out.set(i, c, p.get(i, j));
        }
    }
    Ok(out)
}

/// Mean over rows of `Σ_c (p_ic - Y_ic)²` for already matched predictions.
pub fn brier(p: &Tensor, truth: &[usize]) -> Result<f64> {
    if p.rows() != truth.len() || p.rows() == 0 {
        return Err(MetricsError::Usage("prediction/label size mismatch".into()));
    }
    let mut total = 0.0;
    for (i, &c) in truth.iter().enumerate() {
        if c >= p.cols() {
            return Err(MetricsError::Usage(format!("class {c} outside prediction columns")));
        }
        let row = p.row(i);
        if (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(MetricsError::Usage(format!("prediction row {i} does not sum to 1")));
        }
        total += row
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let y = if j == c { 1.0 } else { 0.0 };
                (v - y) * (v - y)
            })
            .sum::<f64>();
    }
    Ok(total / truth.len() as f64)
}

/// Hungarian-matches clusters to classes, then scores.
pub fn matched_brier(p: &Tensor, truth: &[usize]) -> Result<f64> {
    brier(&match_clusters(p, truth)?, truth)
}

/// Per-method summary over a datasets × methods score matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: Vec<f64>,
    pub mean_rank: Vec<f64>,
    pub top3: Vec<usize>,
    pub top1: Vec<usize>,
}

/// Means, tie-averaged mean ranks and clear top-k counts. A method is a
/// clear top-k on a dataset when fewer than `k` other methods score at least
/// as well.
pub fn benchmark_aggregate(scores: &[Vec<Option<f64>>], higher_is_better: bool) -> Result<Aggregate> {
    let m = scores.first().map_or(0, Vec::len);
    if scores.is_empty() || m == 0 {
        return Err(MetricsError::Usage("empty score matrix".into()));
    }
    let mut rows = Vec::with_capacity(scores.len());
    for (d, row) in scores.iter().enumerate() {
        if row.len() != m {
            return Err(MetricsError::Usage(format!("dataset {d} has {} scores, expected {m}", row.len())));
        }
        let vals: Option<Vec<f64>> = row.iter().copied().collect();
        let vals = vals.ok_or_else(|| MetricsError::Usage(format!("dataset {d} has missing scores")))?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::Usage(format!("dataset {d} has non-finite scores")));
        }
        rows.push(vals);
    }
    let better_or_equal = |a: f64, b: f64| if higher_is_better { a >= b } else { a <= b };
    let better = |a: f64, b: f64| if higher_is_better { a > b } else { a < b };

    let nd = rows.len() as f64;
    let mut agg = Aggregate {
        mean: vec![0.0; m],
        mean_rank: vec![0.0; m],
        top3: vec![0; m],
        top1: vec![0; m],
    };
    for vals in &rows {
        for j in 0..m {
            let strictly_better = vals.iter().filter(|&&o| better(o, vals[j])).count();
            let ties = vals.iter().filter(|&&o| o == vals[j]).count();
            let at_least = vals
                .iter()
                .enumerate()
                .filter(|&(o, &v)| o != j && better_or_equal(v, vals[j]))
                .count();
            agg.mean[j] += vals[j] / nd;
            agg.mean_rank[j] += (strictly_better as f64 + (ties as f64 + 1.0) / 2.0) / nd;
            if at_least < 3 {
                agg.top3[j] += 1;
            }
            if at_least == 0 {
                agg.top1[j] += 1;
            }
        }
    }
    Ok(agg)
}

/// Scores of one method on one dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    /// ARI scaled by 100.
    pub ari: f64,
    pub brier: f64,
    pub runtime_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub name: String,
    pub scores: Vec<MethodScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub methods: Vec<String>,
    pub datasets: Vec<DatasetRecord>,
    pub ari_summary: Aggregate,
    pub brier_summary: Aggregate,
}

impl EvalReport {
    pub fn new(methods: Vec<String>, datasets: Vec<DatasetRecord>) -> Result<Self> {
        if datasets.iter().any(|d| d.scores.len() != methods.len()) {
            return Err(MetricsError::Usage("every dataset needs one score per method".into()));
        }
        let ari: Vec<Vec<Option<f64>>> = datasets
            .iter()
            .map(|d| d.scores.iter().map(|s| Some(s.ari)).collect())
            .collect();
        let brier: Vec<Vec<Option<f64>>> = datasets
            .iter()
            .map(|d| d.scores.iter().map(|s| Some(s.brier)).collect())
            .collect();
        Ok(Self {
            ari_summary: benchmark_aggregate(&ari, true)?,
            brier_summary: benchmark_aggregate(&brier, false)?,
            methods,
            datasets,
        })
    }

    fn write_table<W: Write>(
        &self,
        w: W,
        value: impl Fn(&MethodScore) -> f64,
        summary: &Aggregate,
    ) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["dataset".to_string()];
        header.extend(self.methods.iter().cloned());
        out.write_record(&header)?;
        for d in &self.datasets {
            let mut rec = vec![d.name.clone()];
            rec.extend(d.scores.iter().map(|s| format!("{:.4}", value(s))));
            out.write_record(&rec)?;
        }
        let rows: [(&str, Vec<String>); 4] = [
            ("Mean", summary.mean.iter().map(|v| format!("{v:.4}")).collect()),
            ("Mean-Rank", summary.mean_rank.iter().map(|v| format!("{v:.4}")).collect()),
            ("Top-3", summary.top3.iter().map(|v| v.to_string()).collect()),
            ("Top-1", summary.top1.iter().map(|v| v.to_string()).collect()),
        ];
        for (label, vals) in rows {
            let mut rec = vec![label.to_string()];
            rec.extend(vals);
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Datasets as rows and methods as columns, followed by summary rows.
    pub fn write_ari_csv<W: Write>(&self, w: W) -> Result<()> {
        self.write_table(w, |s| s.ari, &self.ari_summary)
    }

    pub fn write_brier_csv<W: Write>(&self, w: W) -> Result<()> {
        self.write_table(w, |s| s.brier, &self.brier_summary)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ari_examples() {
        assert_eq!(ari(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(ari(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(ari(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), -0.5);
    }

    #[test]
    fn ari_rejects_bad_input() {
        assert!(ari(&[0, 1], &[0]).is_err());
        assert!(ari(&[0], &[0]).is_err());
    }

    #[test]
    fn hungarian_examples() {
        let m = hungarian_match(&[vec![3.0, 0.0], vec![0.0, 5.0]]).unwrap();
        assert_eq!(m, vec![0, 1]);
        let m = hungarian_match(&[vec![0.0, 4.0], vec![3.0, 1.0]]).unwrap();
        assert_eq!(m, vec![1, 0]);
        assert!(hungarian_match(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn brier_examples() {
        let perfect = one_hot(&[0, 1, 1], 2);
        assert_eq!(brier(&perfect, &[0, 1, 1]).unwrap(), 0.0);
        let uniform = Tensor::filled(4, 2, 0.5);
        assert_eq!(brier(&uniform, &[0, 1, 0, 1]).unwrap(), 0.5);
        let bad = Tensor::filled(1, 2, 0.6);
        assert!(brier(&bad, &[0]).is_err());
    }

    #[test]
    fn matching_undoes_relabeling() {
        let truth = [0, 0, 1, 1, 2];
        let pred = one_hot(&[2, 2, 0, 0, 1], 3);
        assert_eq!(matched_brier(&pred, &truth).unwrap(), 0.0);
    }

    #[test]
    fn aggregate_dominance_and_ties() {
        let scores = vec![
            vec![Some(90.0), Some(50.0), Some(50.0)],
            vec![Some(80.0), Some(70.0), Some(10.0)],
            vec![Some(70.0), Some(60.0), Some(65.0)],
        ];
        let agg = benchmark_aggregate(&scores, true).unwrap();
        assert_eq!(agg.mean_rank[0], 1.0);
        assert_eq!(agg.top1[0], 3);
        assert!((agg.mean[1] - 60.0).abs() < 1e-12);
        // Ranks of method 1: 2.5, 2, 3.
        assert!((agg.mean_rank[1] - 7.5 / 3.0).abs() < 1e-12);
        assert!(benchmark_aggregate(&[vec![Some(1.0), None]], true).is_err());
    }

    #[test]
    fn report_csv_has_summary_rows() {
        let s = |a| MethodScore {
            ari: a,
            brier: 0.1,
            runtime_s: 0.0,
        };
        let report = EvalReport::new(
            vec!["a".into(), "b".into()],
            vec![DatasetRecord {
                name: "d0".into(),
                scores: vec![s(10.0), s(20.0)],
            }],
        )
        .unwrap();
        let mut buf = Vec::new();
        report.write_ari_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "dataset,a,b");
        assert_eq!(lines[2], "Mean,10.0000,20.0000");
        assert_eq!(lines[5], "Top-1,0,1");
        assert!(report.to_json().unwrap().contains("\"ari_summary\""));
    }
}
