//! Labeled tables and their on-disk form: a CSV matrix plus a JSON sidecar.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Kind of a single column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    /// Member of the one-hot block encoding categorical variable `group`.
    OneHot(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Gaussian,
    Transformed,
    /// Loaded from an external table.
    External,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Provenance::Gaussian => "gaussian",
            Provenance::Transformed => "transformed",
            Provenance::External => "external",
        })
    }
}

/// Feature matrix with ground-truth component labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub column_kinds: Vec<ColumnKind>,
    pub k: usize,
    pub provenance: Provenance,
    pub seed: Option<u64>,
}

impl LabeledDataset {
    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn numeric_columns(&self) -> Vec<usize> {
        self.column_kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| matches!(k, ColumnKind::Numeric))
            .map(|(i, _)| i)
            .collect()
    }

    /// Column indices of every one-hot group, keyed by group id.
    pub fn one_hot_groups(&self) -> BTreeMap<usize, Vec<usize>> {
        one_hot_groups(&self.column_kinds)
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for &l in &self.y {
            counts[l] += 1;
        }
        counts
    }

    /// Checks labels, shapes and one-hot consistency.
    pub fn validate(&self) -> Result<()> {
        if self.y.len() != self.x.rows() {
            return Err(DatasetError::Invalid(format!(
                "{} labels for {} rows",
                self.y.len(),
                self.x.rows()
            )));
        }
        if self.column_kinds.len() != self.x.cols() {
            return Err(DatasetError::Invalid(format!(
                "{} column kinds for {} columns",
                self.column_kinds.len(),
                self.x.cols()
            )));
        }
        if let Some(&bad) = self.y.iter().find(|&&l| l >= self.k) {
            return Err(DatasetError::Invalid(format!("label {bad} outside [0, {})", self.k)));
        }
        if let Some(missing) = self.counts().iter().position(|&c| c == 0) {
            return Err(DatasetError::Invalid(format!("label {missing} never occurs")));
        }
        check_one_hot(&self.x, &self.column_kinds)
    }
}

pub(crate) fn one_hot_groups(kinds: &[ColumnKind]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, k) in kinds.iter().enumerate() {
        if let ColumnKind::OneHot(g) = k {
            groups.entry(*g).or_default().push(i);
        }
    }
    groups
}

/// Every row of every one-hot group holds exactly one `1` and zeros elsewhere.
pub fn check_one_hot(x: &Tensor, kinds: &[ColumnKind]) -> Result<()> {
    for (g, cols) in one_hot_groups(kinds) {
        for i in 0..x.rows() {
            let mut ones = 0;
            for &c in &cols {
                match x.get(i, c) {
                    v if v == 1.0 => ones += 1,
                    v if v == 0.0 => {}
                    v => {
                        return Err(DatasetError::Invalid(format!(
                            "one-hot group {g} row {i} holds {v}"
                        )))
                    }
                }
            }
            if ones != 1 {
                return Err(DatasetError::Invalid(format!(
                    "one-hot group {g} row {i} has {ones} active entries"
                )));
            }
        }
    }
    Ok(())
}

/// JSON sidecar stored next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub column_kinds: Vec<ColumnKind>,
    #[serde(rename = "K")]
    pub k: usize,
    pub provenance: Provenance,
    pub seed: Option<u64>,
}

/// Table read from disk; labels are present when the CSV has a `label` column.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub x: Tensor,
    pub labels: Option<Vec<usize>>,
    pub column_kinds: Vec<ColumnKind>,
}

impl RawTable {
    pub fn into_labeled(self, k: usize, provenance: Provenance, seed: Option<u64>) -> Result<LabeledDataset> {
        let y = self
            .labels
            .ok_or_else(|| DatasetError::Invalid("table has no label column".into()))?;
        let ds = LabeledDataset {
            x: self.x,
            y,
            column_kinds: self.column_kinds,
            k,
            provenance,
            seed,
        };
        ds.validate()?;
        Ok(ds)
    }
}

impl From<&LabeledDataset> for RawTable {
    fn from(ds: &LabeledDataset) -> Self {
        RawTable {
            x: ds.x.clone(),
            labels: Some(ds.y.clone()),
            column_kinds: ds.column_kinds.clone(),
        }
    }
}

/// Writes `c0..c{d-1},label` CSV to any writer. Floats use the shortest
/// representation that parses back to the same bits.
pub fn write_csv_to<W: Write>(w: W, x: &Tensor, labels: Option<&[usize]>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (0..x.cols()).map(|j| format!("c{j}")).collect();
    if labels.is_some() {
        header.push("label".into());
    }
    wtr.write_record(&header)?;
    let mut record = Vec::with_capacity(header.len());
    for i in 0..x.rows() {
        record.clear();
        record.extend(x.row(i).iter().map(|v| v.to_string()));
        if let Some(l) = labels {
            record.push(l[i].to_string());
        }
        wtr.write_record(&record)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_csv_from<R: Read>(r: R) -> Result<(Tensor, Option<Vec<usize>>)> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    let label_col = header.iter().position(|h| h == "label");
    let width = header.len() - usize::from(label_col.is_some());
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        for (j, field) in rec.iter().enumerate() {
            if Some(j) == label_col {
                let l = field
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| DatasetError::Invalid(format!("row {rows}: bad label {field:?}: {e}")))?;
                labels.push(l);
            } else {
                let v = field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| DatasetError::Invalid(format!("row {rows}: bad value {field:?}: {e}")))?;
                if !v.is_finite() {
                    return Err(DatasetError::Invalid(format!("row {rows}: non-finite value")));
                }
                data.push(v);
            }
        }
        rows += 1;
    }
    let x = Tensor::new(rows, width, data).map_err(|e| DatasetError::Invalid(e.to_string()))?;
    Ok((x, label_col.map(|_| labels)))
}

impl LabeledDataset {
    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            column_kinds: self.column_kinds.clone(),
            k: self.k,
            provenance: self.provenance,
            seed: self.seed,
        }
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let csv = BufWriter::new(File::create(dir.join(format!("{stem}.csv")))?);
        write_csv_to(csv, &self.x, Some(&self.y))?;
        let mut meta = BufWriter::new(File::create(dir.join(format!("{stem}.json")))?);
        serde_json::to_writer_pretty(&mut meta, &self.sidecar())?;
        meta.write_all(b"\n")?;
        meta.flush()?;
        Ok(())
    }

    pub fn load(csv_path: &Path, meta_path: &Path) -> Result<Self> {
        let (table, meta) = load_table(csv_path, meta_path)?;
        table.into_labeled(meta.k, meta.provenance, meta.seed)
    }
}

/// Reads a CSV and its sidecar, checking that the column kinds match.
pub fn load_table(csv_path: &Path, meta_path: &Path) -> Result<(RawTable, Sidecar)> {
    let (x, labels) = read_csv_from(BufReader::new(File::open(csv_path)?))?;
    let meta: Sidecar = serde_json::from_reader(BufReader::new(File::open(meta_path)?))?;
    if meta.column_kinds.len() != x.cols() {
        return Err(DatasetError::Invalid(format!(
            "sidecar lists {} column kinds but the table has {} feature columns",
            meta.column_kinds.len(),
            x.cols()
        )));
    }
    check_one_hot(&x, &meta.column_kinds)?;
    Ok((
        RawTable {
            x,
            labels,
            column_kinds: meta.column_kinds.clone(),
        },
        meta,
    ))
}
