//! Pre-training on a stream of synthetic datasets with Adam and a
//! warmup-cosine schedule, tracking validation ARI on a held-out pool.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{embed_and_cluster, prepare, ClusterError, ClusterOptions, Method};
use crate::datagen::{dataset_seed, sample_dataset_traced, DatagenError, PriorConfig};
use crate::dataset::{LabeledDataset, Provenance, RawTable};
use crate::encoder::{forward_with, EncoderConfig, EncoderError, EncoderParams};
use crate::metrics::{ari, MetricsError};
use crate::objective::{loss_terms_with, LossConfig, LossValues, ObjectiveError};
use crate::tensor::{Graph, Tape, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {step} (dataset seed {seed:?})")]
    NonFinite { step: u64, seed: Option<u64> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub datasets_per_epoch: u64,
    /// Relative frequency of Gaussian and transformed training datasets.
    pub gauss_to_transformed_ratio: [u32; 2],
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip_norm: Option<f64>,
    /// Steps between validation passes; 0 disables periodic validation.
    pub eval_every: u64,
    pub seed: u64,
    /// Rows kept per training dataset; every label keeps at least one row.
    pub max_train_rows: usize,
    /// Datasets whose gradients are averaged into one update.
    pub accumulation: usize,
    /// Validation datasets per provenance.
    pub val_per_kind: usize,
    pub val_max_rows: usize,
    pub val_kmeans_n_init: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 3e-4,
            warmup_steps: 100,
            total_steps: 2000,
            datasets_per_epoch: 200,
            gauss_to_transformed_ratio: [1, 1],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip_norm: Some(1.0),
            eval_every: 100,
            seed: 0,
            max_train_rows: 512,
            accumulation: 1,
            val_per_kind: 20,
            val_max_rows: 512,
            val_kmeans_n_init: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr_peak >= 0.0 && self.lr_peak.is_finite()) {
            return fail("lr_peak must be a nonnegative finite number");
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return fail("warmup_steps must be smaller than total_steps");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)");
        }
        if self.eps <= 0.0 {
            return fail("eps must be positive");
        }
        if self.grad_clip_norm.is_some_and(|c| c <= 0.0 || !c.is_finite()) {
            return fail("grad_clip_norm must be positive");
        }
        if self.gauss_to_transformed_ratio == [0, 0] {
            return fail("gauss_to_transformed_ratio cannot be 0:0");
        }
        if self.max_train_rows < 2 || self.val_max_rows < 2 {
            return fail("row caps must be at least 2");
        }
        if self.accumulation == 0 || self.datasets_per_epoch == 0 {
            return fail("accumulation and datasets_per_epoch must be positive");
        }
        if self.val_kmeans_n_init == 0 {
            return fail("val_kmeans_n_init must be positive");
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr_peak`, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        return cfg.lr_peak * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup_steps);
    if span == 0 {
        return cfg.lr_peak;
    }
    let progress = (step - cfg.warmup_steps) as f64 / span as f64;
    cfg.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: u64,
    /// Mean per-point training loss since the previous entry.
    pub loss: f64,
    pub val_ari_gauss: f64,
    pub val_ari_transf: f64,
}

impl HistoryEntry {
    /// `step,loss,val_ari_gauss,val_ari_transf`
    pub fn log_line(&self) -> String {
        format!(
            "{},{:.6},{:.4},{:.4}",
            self.step, self.loss, self.val_ari_gauss, self.val_ari_transf
        )
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub params: EncoderParams,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    /// Index of the next dataset in the training stream.
    pub stream_position: u64,
    pub history: Vec<HistoryEntry>,
}

impl TrainState {
    pub fn new(params: EncoderParams) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Self {
            step: 0,
            params,
            adam_m: zeros.clone(),
            adam_v: zeros,
            stream_position: 0,
            history: Vec::new(),
        }
    }

    pub fn init(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::new(EncoderParams::init(cfg, &mut rng)?))
    }
}

/// One prepared training example.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub k: usize,
    pub seed: Option<u64>,
}

impl Batch {
    /// Prepares a dataset for an encoder with the given input width.
    pub fn from_dataset(ds: &LabeledDataset, input_dim: usize) -> Result<Self> {
        let x = prepare(&RawTable::from(ds), input_dim)?;
        Ok(Self {
            x,
            y: ds.y.clone(),
            k: ds.k,
            seed: ds.seed,
        })
    }
}

/// Loss and gradients of `total / n` for one batch.
pub fn loss_and_grads(params: &EncoderParams, batch: &Batch, loss_cfg: &LossConfig) -> Result<(LossValues, Vec<Tensor>)> {
    let tape = Tape::new();
    let leaves: Vec<_> = params.tensors().iter().map(|t| tape.leaf(t.clone())).collect();
    let x = tape.constant(batch.x.clone());
    let z = forward_with(&tape, params.config(), &leaves, &x)?;
    let terms = loss_terms_with(&tape, &z, &batch.y, batch.k, loss_cfg)?;
    let values = terms.values(&tape);
    let objective = tape.scale(&terms.total, 1.0 / batch.y.len() as f64)?;
    let mut grads = tape.backward(objective)?;
    Ok((values, leaves.into_iter().map(|v| grads.take(v)).collect()))
}

/// Gradient averaging over `batches`, optional global-norm clipping and one
/// Adam update at learning rate `lr`. Returns the mean per-point losses.
pub fn train_step(
    state: &mut TrainState,
    batches: &[Batch],
    lr: f64,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<LossValues> {
    if batches.is_empty() {
        return Err(TrainError::Config("train_step needs at least one batch".into()));
    }
    let mut sum: Option<Vec<Tensor>> = None;
    let mut mean = LossValues::default();
    let scale = 1.0 / batches.len() as f64;
    for batch in batches {
        let (values, grads) = loss_and_grads(&state.params, batch, loss_cfg)?;
        let n = batch.y.len() as f64;
        if !values.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite {
                step: state.step,
                seed: batch.seed,
            });
        }
        mean.prob += values.prob / n * scale;
        mean.cp += values.cp / n * scale;
        mean.sep += values.sep / n * scale;
        mean.total += values.total / n * scale;
        match sum.as_mut() {
            None => sum = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    let mut grads = sum.expect("at least one batch");
    let norm_sq: f64 = grads.iter().map(|g| g.norm_sq()).sum::<f64>() * scale * scale;
    let mut factor = scale;
    if let Some(clip) = cfg.grad_clip_norm {
        let norm = norm_sq.sqrt();
        if norm > clip {
            factor *= clip / norm;
        }
    }
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|v| *v *= factor);
    }
    adam_update(state, &grads, lr, cfg);
    state.step += 1;
    Ok(mean)
}

fn adam_update(state: &mut TrainState, grads: &[Tensor], lr: f64, cfg: &TrainConfig) {
    let t = (state.step + 1) as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let params = state.params.tensors_mut();
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.adam_m).zip(&mut state.adam_v) {
        let p = p.data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

/// Keeps at most `max_rows` rows, including at least one row per label.
pub fn subsample_rows<R: Rng + ?Sized>(ds: &LabeledDataset, max_rows: usize, rng: &mut R) -> LabeledDataset {
    if ds.n() <= max_rows {
        return ds.clone();
    }
    let mut order: Vec<usize> = (0..ds.n()).collect();
    order.shuffle(rng);
    let mut seen = vec![false; ds.k];
    let mut keep = Vec::with_capacity(max_rows);
    let mut rest = Vec::with_capacity(ds.n());
    for &i in &order {
        if !seen[ds.y[i]] {
            seen[ds.y[i]] = true;
            keep.push(i);
        } else {
            rest.push(i);
        }
    }
    let fill = max_rows.saturating_sub(keep.len());
    keep.extend(rest.into_iter().take(fill));
    keep.sort_unstable();
    LabeledDataset {
        x: ds.x.select_rows(&keep),
        y: keep.iter().map(|&i| ds.y[i]).collect(),
        ..ds.clone()
    }
}

/// Provenance of the `index`-th training dataset under the configured ratio.
pub fn stream_provenance(index: u64, ratio: [u32; 2]) -> Provenance {
    let period = u64::from(ratio[0]) + u64::from(ratio[1]);
    if index % period < u64::from(ratio[0]) {
        Provenance::Gaussian
    } else {
        Provenance::Transformed
    }
}

const VALIDATION_SALT: u64 = 0x5EED_0F_5A11_DA7E;

/// Draws the `index`-th training dataset.
pub fn training_dataset(index: u64, cfg: &TrainConfig, prior: &PriorConfig) -> Result<LabeledDataset> {
    let seed = dataset_seed(cfg.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = stream_provenance(index, cfg.gauss_to_transformed_ratio);
    let mut ds = sample_dataset_traced(prior, Some(kind), &mut rng)?.dataset;
    ds.seed = Some(seed);
    Ok(subsample_rows(&ds, cfg.max_train_rows, &mut rng))
}

/// Held-out pool: `val_per_kind` Gaussian then `val_per_kind` transformed
/// datasets from a seed stream disjoint from training.
pub fn validation_pool(cfg: &TrainConfig, prior: &PriorConfig) -> Result<Vec<LabeledDataset>> {
    let base = cfg.seed ^ VALIDATION_SALT;
    let mut pool = Vec::with_capacity(2 * cfg.val_per_kind);
    for (offset, kind) in [(0u64, Provenance::Gaussian), (1u64 << 32, Provenance::Transformed)] {
        for i in 0..cfg.val_per_kind as u64 {
            let seed = dataset_seed(base, offset + i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ds = sample_dataset_traced(prior, Some(kind), &mut rng)?.dataset;
            ds.seed = Some(seed);
            pool.push(subsample_rows(&ds, cfg.val_max_rows, &mut rng));
        }
    }
    Ok(pool)
}

/// Mean ARI×100 of embed → k-means on the Gaussian and transformed parts.
pub fn validate(params: &EncoderParams, pool: &[LabeledDataset], cfg: &TrainConfig) -> Result<(f64, f64)> {
    let opts = ClusterOptions {
        kmeans_n_init: cfg.val_kmeans_n_init,
        seed: cfg.seed,
        ..ClusterOptions::default()
    };
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for ds in pool {
        let labels = embed_and_cluster(params, &RawTable::from(ds), ds.k, Method::Kmeans, &opts)?.labels();
        let slot = usize::from(ds.provenance == Provenance::Transformed);
        sums[slot] += 100.0 * ari(&ds.y, &labels)?;
        counts[slot] += 1;
    }
    let mean = |s: usize| if counts[s] == 0 { 0.0 } else { sums[s] / counts[s] as f64 };
    Ok((mean(0), mean(1)))
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub state: TrainState,
    /// Parameters with the highest transformed validation ARI, and their step.
    pub best: Option<(u64, EncoderParams)>,
}

/// Trains from `state` up to step `until` (at most `cfg.total_steps`) under
/// the full schedule, so a run stopped early and resumed matches an
/// uninterrupted one. `on_eval` receives every validation entry.
pub fn pretrain_from(
    mut state: TrainState,
    cfg: &TrainConfig,
    prior: &PriorConfig,
    loss_cfg: &LossConfig,
    until: Option<u64>,
    mut on_eval: impl FnMut(&HistoryEntry),
) -> Result<PretrainOutcome> {
    let until = until.unwrap_or(cfg.total_steps).min(cfg.total_steps);
    cfg.validate()?;
    prior.validate()?;
    loss_cfg.validate()?;
    let input_dim = state.params.config().input_dim;
    let pool = if cfg.eval_every > 0 && cfg.val_per_kind > 0 {
        validation_pool(cfg, prior)?
    } else {
        Vec::new()
    };
    // A resumed run only reports a best model if it beats its own history.
    let mut best_score = state
        .history
        .iter()
        .map(|h| h.val_ari_transf)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut best: Option<(u64, EncoderParams)> = None;
    let mut evaluate = |state: &mut TrainState, loss: f64, best: &mut Option<(u64, EncoderParams)>| -> Result<()> {
        let (g, t) = validate(&state.params, &pool, cfg)?;
        let entry = HistoryEntry {
            step: state.step,
            loss,
            val_ari_gauss: g,
            val_ari_transf: t,
        };
        if state.history.last().is_none_or(|h| h.step < entry.step) {
            state.history.push(entry);
            on_eval(&entry);
        }
        if t > best_score || (best.is_none() && state.history.len() == 1) {
            best_score = best_score.max(t);
            *best = Some((state.step, state.params.clone()));
        }
        Ok(())
    };

    if !pool.is_empty() && state.step == 0 && state.history.is_empty() {
        let ds = training_dataset(state.stream_position, cfg, prior)?;
        let b = Batch::from_dataset(&ds, input_dim)?;
        let z = state.params.forward(&b.x)?;
        let initial = crate::objective::total_loss(&z, &b.y, b.k, loss_cfg)?.total / b.y.len() as f64;
        evaluate(&mut state, initial, &mut best)?;
    }
    let mut running = 0.0;
    let mut running_n = 0usize;
    while state.step < until {
        let mut batches = Vec::with_capacity(cfg.accumulation);
        for _ in 0..cfg.accumulation {
            let ds = training_dataset(state.stream_position, cfg, prior)?;
            state.stream_position += 1;
            batches.push(Batch::from_dataset(&ds, input_dim)?);
        }
        let lr = lr_at(state.step + 1, cfg);
        let values = train_step(&mut state, &batches, lr, cfg, loss_cfg)?;
        running += values.total;
        running_n += 1;
        if state.stream_position.is_multiple_of(cfg.datasets_per_epoch) {
            log::debug!("epoch {} done at step {}", state.stream_position / cfg.datasets_per_epoch, state.step);
        }
        let due = cfg.eval_every > 0 && (state.step.is_multiple_of(cfg.eval_every) || state.step == cfg.total_steps);
        if due && !pool.is_empty() {
            evaluate(&mut state, running / running_n as f64, &mut best)?;
            running = 0.0;
            running_n = 0;
        }
    }
    Ok(PretrainOutcome {
        best,
        state,
    })
}

/// Fresh run from a seeded initialization.
pub fn pretrain(
    enc: EncoderConfig,
    cfg: &TrainConfig,
    prior: &PriorConfig,
    loss_cfg: &LossConfig,
    on_eval: impl FnMut(&HistoryEntry),
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    pretrain_from(TrainState::init(enc, cfg.seed)?, cfg, prior, loss_cfg, None, on_eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ColumnKind;

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            input_dim: 4,
            token_dim: 8,
            n_blocks: 1,
            n_heads: 2,
            mlp_ratio: 2,
            repr_dim: 4,
        }
    }

    #[test]
    fn schedule_landmarks() {
        let cfg = TrainConfig {
            lr_peak: 1.0,
            warmup_steps: 10,
            total_steps: 110,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(10, &cfg), 1.0);
        assert!((lr_at(60, &cfg) - 0.5).abs() < 1e-15);
        assert!(lr_at(110, &cfg).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig::default();
        let p = EncoderParams::init(tiny_encoder(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut state = TrainState::new(p);
        let before = state.params.tensors()[0].get(0, 0);
        let mut g: Vec<Tensor> = state.params.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        g[0].set(0, 0, 0.3);
        adam_update(&mut state, &g, 0.01, &cfg);
        let after = state.params.tensors()[0].get(0, 0);
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
        let expected = before - 0.01 * 0.3 / (0.3 + 1e-8);
        assert!((after - expected).abs() < 1e-15);
        assert_eq!(state.params.tensors()[0].get(0, 1), {
            let p = EncoderParams::init(tiny_encoder(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            p.tensors()[0].get(0, 1)
        });
    }

    fn toy_batch() -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let x = Tensor::from_fn(30, 4, |i, _| y[i] as f64 + rng.random_range(-0.5..0.5));
        Batch { x, y, k: 3, seed: None }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut state = TrainState::init(tiny_encoder(), 1).unwrap();
        let before = state.params.clone();
        train_step(&mut state, &[toy_batch()], 0.0, &TrainConfig::default(), &LossConfig::default()).unwrap();
        assert_eq!(state.params, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn identical_runs_give_identical_losses() {
        let run = || {
            let mut state = TrainState::init(tiny_encoder(), 2).unwrap();
            (0..5)
                .map(|_| {
                    train_step(&mut state, &[toy_batch()], 1e-2, &TrainConfig::default(), &LossConfig::default())
                        .unwrap()
                        .total
                })
                .collect::<Vec<f64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn subsampling_keeps_every_label() {
        let ds = LabeledDataset {
            x: Tensor::from_fn(100, 1, |i, _| i as f64),
            y: (0..100).map(|i| usize::from(i == 99)).collect(),
            column_kinds: vec![ColumnKind::Numeric],
            k: 2,
            provenance: Provenance::Gaussian,
            seed: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = subsample_rows(&ds, 10, &mut rng);
        assert_eq!(out.n(), 10);
        assert!(out.y.contains(&1));
    }

    #[test]
    fn ratio_controls_provenance() {
        assert!((0..10).all(|i| stream_provenance(i, [1, 0]) == Provenance::Gaussian));
        let kinds: Vec<_> = (0..4).map(|i| stream_provenance(i, [1, 1])).collect();
        assert_eq!(
            kinds,
            [Provenance::Gaussian, Provenance::Transformed, Provenance::Gaussian, Provenance::Transformed]
        );
    }

    #[test]
    fn zero_steps_returns_initial_model() {
        let cfg = TrainConfig {
            total_steps: 0,
            warmup_steps: 0,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let init = TrainState::init(tiny_encoder(), cfg.seed).unwrap();
        let out = pretrain(tiny_encoder(), &cfg, &PriorConfig::default(), &LossConfig::default(), |_| {}).unwrap();
        assert_eq!(out.state, init);
    }

    #[test]
    fn invalid_schedule_is_rejected() {
        let cfg = TrainConfig {
            warmup_steps: 10,
            total_steps: 5,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
    }
}
