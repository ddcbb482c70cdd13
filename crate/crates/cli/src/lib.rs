//! The `zeus` command line: synthetic data generation, pre-training,
//! embedding, clustering, evaluation and benchmarking.

mod error;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use zeus_core::checkpoint::Checkpoint;
use zeus_core::cluster::{baseline_cluster, embed, embed_and_cluster, Assignment, BaselineScaling, Method};
use zeus_core::config::RunConfig;
use zeus_core::datagen::{dataset_seed, sample_dataset_traced};
use zeus_core::dataset::{load_table, read_csv_from, Provenance, RawTable, Sidecar};
use zeus_core::metrics::{ari, matched_brier, DatasetRecord, EvalReport, MethodScore};
use zeus_core::tensor::Tensor;
use zeus_core::trainer::{pretrain_from, TrainState};

pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "zeus", version, about = "Zero-shot embeddings for tabular clustering")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProvenanceArg {
    /// Follow the prior's transformed fraction.
    Mixed,
    Gaussian,
    Transformed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Kmeans,
    Gmm,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Kmeans => Method::Kmeans,
            MethodArg::Gmm => Method::Gmm,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample labeled datasets from the synthetic prior.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = ProvenanceArg::Mixed)]
        provenance: ProvenanceArg,
        /// Index of the first dataset, for appending to an existing corpus.
        #[arg(long, default_value_t = 0)]
        offset: u64,
    },
    /// Pre-train an encoder on streamed synthetic datasets.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a saved checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this step; continue later with --resume.
        #[arg(long)]
        until: Option<u64>,
    },
    /// Write per-row embeddings of a table.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster a table through the encoder.
    Cluster {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of clusters; defaults to the sidecar's K.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum, default_value_t = MethodArg::Kmeans)]
        method: MethodArg,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score assignments against ground-truth labels.
    Eval {
        /// Assignment CSV written by `cluster`.
        #[arg(long)]
        pred: PathBuf,
        /// CSV with a `label` column.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare encoder-based and raw clustering over a dataset directory.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            config,
            out,
            count,
            seed,
            provenance,
            offset,
        } => cmd_generate(&load_config(config.as_deref())?, &out, count, seed, provenance, offset).map(|_| ()),
        Command::Pretrain {
            config,
            out,
            resume,
            seed,
            until,
        } => cmd_pretrain(config.as_deref(), &out, resume.as_deref(), seed, until, |line| println!("{line}")).map(|_| ()),
        Command::Embed { model, input, meta, out } => cmd_embed(&model, &input, &meta, &out).map(|_| ()),
        Command::Cluster {
            model,
            input,
            meta,
            out,
            k,
            method,
            seed,
        } => cmd_cluster(&model, &input, &meta, &out, k, method.into(), seed).map(|_| ()),
        Command::Eval { pred, labels, out } => {
            let scores = cmd_eval(&pred, &labels)?;
            let json = serde_json::to_string_pretty(&scores)?;
            println!("{json}");
            if let Some(out) = out {
                fs::write(out, json + "\n")?;
            }
            Ok(())
        }
        Command::Bench { model, data, out, seed } => cmd_bench(&model, &data, &out, seed).map(|_| ()),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

/// One row of a corpus manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub seed: u64,
    pub provenance: Provenance,
    #[serde(rename = "K")]
    pub k: usize,
    pub n: usize,
    pub d: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub base_seed: u64,
    pub datasets: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn cmd_generate(
    cfg: &RunConfig,
    out: &Path,
    count: usize,
    seed: u64,
    provenance: ProvenanceArg,
    offset: u64,
) -> Result<CorpusManifest> {
    fs::create_dir_all(out)?;
    let force = match provenance {
        ProvenanceArg::Mixed => None,
        ProvenanceArg::Gaussian => Some(Provenance::Gaussian),
        ProvenanceArg::Transformed => Some(Provenance::Transformed),
    };
    let prefix = match provenance {
        ProvenanceArg::Mixed => "syn",
        ProvenanceArg::Gaussian => "gauss",
        ProvenanceArg::Transformed => "transf",
    };
    let mut datasets = Vec::with_capacity(count);
    for i in offset..offset + count as u64 {
        let ds_seed = dataset_seed(seed, i);
        let mut rng = ChaCha8Rng::seed_from_u64(ds_seed);
        let mut ds = sample_dataset_traced(&cfg.prior, force, &mut rng)?.dataset;
        ds.seed = Some(ds_seed);
        let name = format!("{prefix}_{i:04}");
        ds.save(out, &name)?;
        datasets.push(ManifestEntry {
            name,
            seed: ds_seed,
            provenance: ds.provenance,
            k: ds.k,
            n: ds.n(),
            d: ds.x.cols(),
        });
    }
    // Entries from earlier runs into the same directory are kept.
    let path = out.join(MANIFEST_FILE);
    if path.exists() {
        let old: CorpusManifest = serde_json::from_reader(BufReader::new(File::open(&path)?))?;
        let mut merged: Vec<ManifestEntry> = old
            .datasets
            .into_iter()
            .filter(|e| datasets.iter().all(|d| d.name != e.name))
            .collect();
        merged.extend(datasets);
        datasets = merged;
    }
    let manifest = CorpusManifest { base_seed: seed, datasets };
    write_json(&path, &manifest)?;
    Ok(manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Path of the best-by-validation checkpoint written next to `out`.
pub fn best_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".best");
    PathBuf::from(s)
}

pub fn cmd_pretrain(
    config: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
    seed: Option<u64>,
    until: Option<u64>,
    mut progress: impl FnMut(&str),
) -> Result<Checkpoint> {
    let (mut cfg, state) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let cfg = match config {
                Some(p) => {
                    let new = RunConfig::load(p)?;
                    if new.encoder != ck.config.encoder {
                        return Err(CliError::usage("the config's encoder differs from the checkpoint being resumed"));
                    }
                    new
                }
                None => ck.config,
            };
            (cfg, Some(ck.state))
        }
        None => (load_config(config)?, None),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let state = match state {
        Some(s) => s,
        None => TrainState::init(cfg.encoder, cfg.train.seed)?,
    };
    if state.step > cfg.train.total_steps {
        return Err(CliError::usage(format!(
            "checkpoint is at step {} but total_steps is {}",
            state.step, cfg.train.total_steps
        )));
    }
    let outcome = pretrain_from(state, &cfg.train, &cfg.prior, &cfg.loss, until, |h| progress(&h.log_line()))?;
    if let Some((step, params)) = outcome.best {
        let mut best = outcome.state.clone();
        best.params = params;
        best.step = step;
        best.history.retain(|h| h.step <= step);
        Checkpoint::new(cfg.clone(), best).save(&best_path(out))?;
        log::info!("best checkpoint from step {step}");
    }
    let ck = Checkpoint::new(cfg, outcome.state);
    ck.save(out)?;
    Ok(ck)
}

fn load_input(input: &Path, meta: &Path) -> Result<(RawTable, Sidecar)> {
    Ok(load_table(input, meta)?)
}

pub fn cmd_embed(model: &Path, input: &Path, meta: &Path, out: &Path) -> Result<Tensor> {
    let ck = Checkpoint::load(model)?;
    let (table, _) = load_input(input, meta)?;
    let z = embed(ck.params(), &table)?;
    let header: Vec<String> = (0..z.cols()).map(|j| format!("z{j}")).collect();
    write_matrix(out, &header, &z, None)?;
    Ok(z)
}

fn write_matrix(path: &Path, header: &[String], m: &Tensor, index: Option<&str>) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut head: Vec<String> = index.map(|s| vec![s.to_string()]).unwrap_or_default();
    head.extend(header.iter().cloned());
    w.write_record(&head)?;
    for (i, row) in m.iter_rows().enumerate() {
        let mut rec: Vec<String> = index.map(|_| vec![i.to_string()]).unwrap_or_default();
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_assignment(path: &Path, a: &Assignment) -> Result<()> {
    match a {
        Assignment::Hard(labels) => {
            let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
            w.write_record(["row_index", "label"])?;
            for (i, l) in labels.iter().enumerate() {
                w.write_record([i.to_string(), l.to_string()])?;
            }
            w.flush()?;
            Ok(())
        }
        Assignment::Soft(p) => {
            let header: Vec<String> = (0..p.cols()).map(|j| format!("p_{j}")).collect();
            write_matrix(path, &header, p, Some("row_index"))
        }
    }
}

pub fn read_assignment(path: &Path) -> Result<Assignment> {
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let header = r.headers()?.clone();
    if header.get(0) != Some("row_index") {
        return Err(CliError::usage("assignment CSV must start with a row_index column"));
    }
    let soft = header.iter().skip(1).all(|h| h.starts_with("p_")) && header.len() > 1;
    if !soft && (header.len() != 2 || &header[1] != "label") {
        return Err(CliError::usage("assignment CSV must be row_index,label or row_index,p_0.."));
    }
    let mut labels = Vec::new();
    let mut probs = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let idx: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("bad row_index on line {}", i + 2)))?;
        if idx != i {
            return Err(CliError::usage(format!("row_index {idx} out of order on line {}", i + 2)));
        }
        if soft {
            for f in rec.iter().skip(1) {
                probs.push(
                    f.trim()
                        .parse::<f64>()
                        .map_err(|_| CliError::usage(format!("bad probability {f:?}")))?,
                );
            }
        } else {
            labels.push(
                rec[1]
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::usage(format!("bad label {:?}", &rec[1])))?,
            );
        }
    }
    if soft {
        let k = header.len() - 1;
        Ok(Assignment::Soft(Tensor::new(probs.len() / k, k, probs)?))
    } else {
        Ok(Assignment::Hard(labels))
    }
}

pub fn cmd_cluster(
    model: &Path,
    input: &Path,
    meta: &Path,
    out: &Path,
    k: Option<usize>,
    method: Method,
    seed: Option<u64>,
) -> Result<Assignment> {
    let ck = Checkpoint::load(model)?;
    let (table, sidecar) = load_input(input, meta)?;
    let k = k.unwrap_or(sidecar.k);
    let mut opts = ck.config.eval;
    if let Some(s) = seed {
        opts.seed = s;
    }
    let a = embed_and_cluster(ck.params(), &table, k, method, &opts)?;
    write_assignment(out, &a)?;
    Ok(a)
}

/// ARI (×100) and Brier of one assignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    pub ari: f64,
    pub brier: f64,
}

fn distinct(labels: &[usize]) -> usize {
    let mut v = labels.to_vec();
    v.sort_unstable();
    v.dedup();
    v.len()
}

pub fn score(truth: &[usize], a: &Assignment, k: usize) -> Result<EvalScores> {
    let n = truth.len();
    let p = a.probabilities(k);
    if p.rows() != n {
        return Err(CliError::usage(format!("{} assignments for {n} labeled rows", p.rows())));
    }
    if truth.iter().any(|&y| y >= k) {
        return Err(CliError::usage(format!("labels must lie in 0..{k}")));
    }
    if let Assignment::Hard(l) = a {
        if l.iter().any(|&c| c >= k) {
            return Err(CliError::usage(format!("predicted cluster ids must lie in 0..{k}")));
        }
    }
    Ok(EvalScores {
        ari: 100.0 * ari(truth, &a.labels())?,
        brier: matched_brier(&p, truth)?,
    })
}

pub fn cmd_eval(pred: &Path, labels: &Path) -> Result<EvalScores> {
    let a = read_assignment(pred)?;
    let (_, truth) = read_csv_from(BufReader::new(File::open(labels)?))?;
    let truth = truth.ok_or_else(|| CliError::usage("labels file has no `label` column"))?;
    let k_true = distinct(&truth);
    let k_pred = match &a {
        Assignment::Soft(p) => p.cols(),
        Assignment::Hard(l) => l.iter().max().map_or(0, |m| m + 1),
    };
    if k_pred > k_true || (matches!(a, Assignment::Soft(_)) && k_pred != k_true) {
        return Err(CliError::usage(format!(
            "assignment uses {k_pred} clusters but the labels have {k_true} classes"
        )));
    }
    score(&truth, &a, k_true)
}

pub const BENCH_METHODS: [&str; 4] = ["kmeans", "gmm", "zeus-kmeans", "zeus-gmm"];

/// Datasets listed by the directory's manifest, or every CSV with a sidecar.
pub fn list_datasets(dir: &Path) -> Result<Vec<String>> {
    let manifest = dir.join(MANIFEST_FILE);
    if manifest.exists() {
        let m: CorpusManifest = serde_json::from_reader(BufReader::new(File::open(manifest)?))?;
        return Ok(m.datasets.into_iter().map(|d| d.name).collect());
    }
    let mut names = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "csv") && path.with_extension("json").exists() {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

fn worker_threads() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("ZEUS_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(cap) if cap > 0 => cap.min(available),
        _ => available,
    }
}

fn bench_one(ck: &Checkpoint, dir: &Path, name: &str, opts: &zeus_core::cluster::ClusterOptions) -> Result<DatasetRecord> {
    let (table, meta) = load_input(&dir.join(format!("{name}.csv")), &dir.join(format!("{name}.json")))?;
    let truth = table
        .labels
        .clone()
        .ok_or_else(|| CliError::usage(format!("{name} has no label column")))?;
    let k = meta.k;
    if distinct(&truth) != k {
        return Err(CliError::usage(format!(
            "{name}: sidecar K={k} but labels have {} classes",
            distinct(&truth)
        )));
    }
    let runs: [(bool, Method); 4] = [
        (false, Method::Kmeans),
        (false, Method::Gmm),
        (true, Method::Kmeans),
        (true, Method::Gmm),
    ];
    let mut scores = Vec::with_capacity(4);
    for (zeus, method) in runs {
        let t = Instant::now();
        let a = if zeus {
            embed_and_cluster(ck.params(), &table, k, method, opts)?
        } else {
            baseline_cluster(&table, k, method, BaselineScaling::Standard, opts)?
        };
        let runtime_s = t.elapsed().as_secs_f64();
        let s = score(&truth, &a, k)?;
        scores.push(MethodScore {
            ari: s.ari,
            brier: s.brier,
            runtime_s,
        });
    }
    Ok(DatasetRecord {
        name: name.to_string(),
        scores,
    })
}

/// Writes `ari.csv`, `brier.csv` and `report.json` into `out`.
pub fn cmd_bench(model: &Path, data: &Path, out: &Path, seed: Option<u64>) -> Result<EvalReport> {
    let ck = Checkpoint::load(model)?;
    let mut opts = ck.config.eval;
    if let Some(s) = seed {
        opts.seed = s;
    }
    let names = list_datasets(data)?;
    if names.is_empty() {
        return Err(CliError::usage(format!("no datasets found in {}", data.display())));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| CliError::Io(e.to_string()))?;
    let records: Vec<DatasetRecord> = pool.install(|| {
        names
            .par_iter()
            .map(|name| bench_one(&ck, data, name, &opts))
            .collect::<Result<_>>()
    })?;
    let report = EvalReport::new(BENCH_METHODS.iter().map(|s| s.to_string()).collect(), records)?;
    fs::create_dir_all(out)?;
    report.write_ari_csv(BufWriter::new(File::create(out.join("ari.csv"))?))?;
    report.write_brier_csv(BufWriter::new(File::create(out.join("brier.csv"))?))?;
    fs::write(out.join("report.json"), report.to_json()? + "\n")?;
    Ok(report)
}
