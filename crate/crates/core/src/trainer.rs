//! Windowing, splits, losses, the optimization loop and evaluation.

use std::collections::HashMap;
use std::time::Instant;

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::{EmbeddingMode, EmbeddingTable, Phase};
use crate::error::{shape_err, Error, Result};
use crate::gpvar::{optimal_predict, GpvarParams, NoiseFloor};
use crate::graph::Graph;
use crate::model::{Batch, Model};
use crate::nn::{clip_global_norm, Adam, AdamConfig, GraphBatch, ParamStore, Real, Tape, Var};
use crate::series::SeriesDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mae,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Regularization {
    #[default]
    None,
    /// KL of the embedding posterior, weighted by `beta`.
    Variational { beta: f64 },
    /// Embedding-to-centroid distance, weighted by `lambda`.
    Clustering { lambda: f64, n_samples: usize },
}

pub const DEFAULT_BETA: f64 = 0.05;
pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const FINETUNE_LAMBDA: f64 = 10.0;

fn default_clip() -> f64 {
    5.0
}

fn default_eval_batch() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Mini-batches per epoch sampled with replacement; 0 means one shuffled
    /// pass over all training windows.
    #[serde(default)]
    pub batches_per_epoch: usize,
    pub lr: f64,
    /// Epochs between learning-rate halvings; 0 disables the schedule.
    pub lr_halving_period: usize,
    pub patience: usize,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub reg: Regularization,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    /// Validation uses at most this many evenly strided windows (0 = all).
    #[serde(default)]
    pub val_max_windows: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    /// Settings used for the synthetic benchmarks: batch 128, learning rate
    /// 0.01 halved every 50 epochs, at most 200 epochs.
    fn default() -> Self {
        Self {
            batch_size: 128,
            max_epochs: 200,
            batches_per_epoch: 0,
            lr: 0.01,
            lr_halving_period: 50,
            patience: 50,
            loss: LossKind::Mae,
            seed: 0,
            reg: Regularization::None,
            grad_clip: default_clip(),
            val_max_windows: 0,
            eval_batch_size: default_eval_batch(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if self.eval_batch_size == 0 {
            problems.push("eval_batch_size must be at least 1".to_string());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            problems.push(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.max_epochs > 0 && self.patience > self.max_epochs {
            problems.push(format!("patience {} exceeds max_epochs {}", self.patience, self.max_epochs));
        }
        if !(self.grad_clip > 0.0) {
            problems.push("grad_clip must be positive".to_string());
        }
        match self.reg {
            Regularization::Variational { beta } if !(beta >= 0.0) => problems.push("beta must be >= 0".into()),
            Regularization::Clustering { lambda, n_samples } => {
                if !(lambda >= 0.0) {
                    problems.push("lambda must be >= 0".into());
                }
                if n_samples == 0 {
                    problems.push("n_samples must be at least 1".into());
                }
            }
            _ => {}
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// `lr * 2^-floor(epoch / period)` for the zero-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_halving_period == 0 {
            return self.lr;
        }
        self.lr * 0.5f64.powi((epoch / self.lr_halving_period) as i32)
    }

    /// Squared error for the variational objective, the configured loss
    /// otherwise.
    pub fn effective_loss(&self) -> LossKind {
        match self.reg {
            Regularization::Variational { .. } => LossKind::Mse,
            _ => self.loss,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Valid forecast anchors `t`: inputs `[t - W, t)` and targets `[t, t + H)`
/// all lie in the same segment of the series.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowIndex {
    pub split: Split,
    pub window: usize,
    pub horizon: usize,
    anchors: Vec<usize>,
}

impl WindowIndex {
    /// All anchors whose windows fit inside `[start, end)`.
    pub fn span(start: usize, end: usize, window: usize, horizon: usize, split: Split) -> Result<Self> {
        if window == 0 || horizon == 0 {
            return Err(Error::InvalidArgument("window and horizon must be at least 1".into()));
        }
        if end < start || end - start < window + horizon {
            return Err(Error::InvalidArgument(format!(
                "{split:?} segment [{start}, {end}) is shorter than one window ({} steps)",
                window + horizon
            )));
        }
        let anchors = (start + window..=end - horizon).collect();
        Ok(Self { split, window, horizon, anchors })
    }

    pub fn from_anchors(anchors: Vec<usize>, window: usize, horizon: usize, split: Split) -> Self {
        Self { split, window, horizon, anchors }
    }

    pub fn anchors(&self) -> &[usize] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// At most `max` anchors, evenly strided over the index (0 = all).
    pub fn capped(&self, max: usize) -> Self {
        if max == 0 || self.anchors.len() <= max {
            return self.clone();
        }
        let n = self.anchors.len();
        let anchors = (0..max).map(|k| self.anchors[k * n / max]).collect();
        Self { anchors, ..self.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: WindowIndex,
    pub val: WindowIndex,
    pub test: WindowIndex,
}

/// Sequential train/validation/test segments of lengths
/// `round(T * f_train)`, `round(T * f_val)` and the remainder.
pub fn split_lengths(n_steps: usize, fractions: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(*f >= 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split fractions {fractions:?} must be >= 0 and sum to 1")));
    }
    let train = (n_steps as f64 * a).round() as usize;
    let val = ((n_steps as f64 * b).round() as usize).min(n_steps - train.min(n_steps));
    let train = train.min(n_steps);
    Ok((train, val, n_steps - train - val))
}

pub fn make_splits(n_steps: usize, window: usize, horizon: usize, fractions: (f64, f64, f64)) -> Result<Splits> {
    let (tr, va, _) = split_lengths(n_steps, fractions)?;
    Ok(Splits {
        train: WindowIndex::span(0, tr, window, horizon, Split::Train)?,
        val: WindowIndex::span(tr, tr + va, window, horizon, Split::Val)?,
        test: WindowIndex::span(tr + va, n_steps, window, horizon, Split::Test)?,
    })
}

fn check_loss_shapes<F: Real>(tape: &Tape<F>, pred: Var, target: &Array2<F>) -> Result<()> {
    let (r, c) = tape.shape(pred);
    if (r, c) != target.dim() {
        return Err(shape_err("loss", target.shape(), &[r, c]));
    }
    Ok(())
}

/// Mean absolute error over every entry.
pub fn loss_mae<F: Real>(tape: &mut Tape<F>, pred: Var, target: &Array2<F>) -> Result<Var> {
    check_loss_shapes(tape, pred, target)?;
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Mean squared error over every entry.
pub fn loss_mse<F: Real>(tape: &mut Tape<F>, pred: Var, target: &Array2<F>) -> Result<Var> {
    check_loss_shapes(tape, pred, target)?;
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t)?;
    let a = tape.square(d);
    Ok(tape.mean(a))
}

/// Anything that maps windows to `anchors x N x (H * d_x)` forecasts.
pub trait Forecaster {
    fn window(&self) -> usize;
    fn horizon(&self) -> usize;
    fn predict(&mut self, data: &SeriesDataset, anchors: &[usize]) -> Result<Array3<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub mse: f64,
    pub per_horizon_mae: Vec<f64>,
    pub n_windows: usize,
}

/// Deterministic pass over `index` in chunks of `batch_size`.
pub fn evaluate<P: Forecaster + ?Sized>(
    forecaster: &mut P,
    data: &SeriesDataset,
    index: &WindowIndex,
    batch_size: usize,
) -> Result<Metrics> {
    if index.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty window index".into()));
    }
    if index.window < forecaster.window() || index.horizon != forecaster.horizon() {
        return Err(shape_err(
            "window index",
            &[forecaster.window(), forecaster.horizon()],
            &[index.window, index.horizon],
        ));
    }
    let d_x = data.n_channels();
    let h = forecaster.horizon();
    let mut abs_h = vec![0.0; h];
    let mut sq = 0.0;
    let mut count = 0usize;
    for chunk in index.anchors().chunks(batch_size.max(1)) {
        let pred = forecaster.predict(data, chunk)?;
        for (k, &t) in chunk.iter().enumerate() {
            for step in 0..h {
                let target = data.frame(t + step);
                let p = pred.index_axis(Axis(0), k);
                for (i, trow) in target.rows().into_iter().enumerate() {
                    for (c, &y) in trow.iter().enumerate() {
                        let e = p[[i, step * d_x + c]] - y;
                        abs_h[step] += e.abs();
                        sq += e * e;
                    }
                }
            }
        }
        count += chunk.len();
    }
    let per_step = (count * data.n_nodes() * d_x) as f64;
    let per_horizon_mae: Vec<f64> = abs_h.iter().map(|a| a / per_step).collect();
    Ok(Metrics {
        mae: per_horizon_mae.iter().sum::<f64>() / h as f64,
        mse: sq / (per_step * h as f64),
        per_horizon_mae,
        n_windows: count,
    })
}

/// A model, its optional embedding table and the graph it runs on.
pub struct StgnnForecaster<'a> {
    pub model: &'a mut Model<f32>,
    pub table: Option<&'a EmbeddingTable<f32>>,
    pub graph: &'a Graph,
    cache: HashMap<usize, GraphBatch<f32>>,
}

impl<'a> StgnnForecaster<'a> {
    pub fn new(model: &'a mut Model<f32>, table: Option<&'a EmbeddingTable<f32>>, graph: &'a Graph) -> Self {
        Self { model, table, graph, cache: HashMap::new() }
    }
}

impl Forecaster for StgnnForecaster<'_> {
    fn window(&self) -> usize {
        self.model.config().window
    }

    fn horizon(&self) -> usize {
        self.model.config().horizon
    }

    fn predict(&mut self, data: &SeriesDataset, anchors: &[usize]) -> Result<Array3<f64>> {
        let c = self.model.config();
        let (w, h, weighted) = (c.window, c.horizon, c.weighted_mean);
        let batch = Batch::<f32>::from_anchors(data, anchors, w, h)?;
        let graph = self.graph;
        let gb = self
            .cache
            .entry(anchors.len())
            .or_insert_with(|| GraphBatch::new(graph, anchors.len(), weighted));
        let emb = self.table.map(|t| t.eval_rows(anchors.len()));
        let pred = self.model.predict(&batch, gb, emb.as_ref())?;
        Ok(pred.mapv(f64::from))
    }
}

/// Conditional mean of a known graph autoregressive process; multi-step
/// forecasts roll the mean forward.
pub struct OptimalOracle<'a> {
    pub params: &'a GpvarParams,
    pub graph: &'a Graph,
    pub horizon: usize,
}

impl Forecaster for OptimalOracle<'_> {
    fn window(&self) -> usize {
        self.params.required_history()
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn predict(&mut self, data: &SeriesDataset, anchors: &[usize]) -> Result<Array3<f64>> {
        if data.n_channels() != 1 {
            return Err(Error::InvalidArgument("the process oracle needs one channel".into()));
        }
        let k = self.window();
        let n = data.n_nodes();
        let mut out = Array3::zeros((anchors.len(), n, self.horizon));
        for (b, &t) in anchors.iter().enumerate() {
            if t < k {
                return Err(Error::InvalidArgument(format!("anchor {t} has fewer than {k} past steps")));
            }
            let mut recent = Array2::zeros((k, n));
            for s in 0..k {
                recent.row_mut(s).assign(&data.frame(t - k + s).column(0));
            }
            for step in 0..self.horizon {
                let next = optimal_predict(self.params, self.graph, recent.view())?;
                out.index_axis_mut(Axis(0), b).column_mut(step).assign(&next);
                for s in 1..k {
                    let row = recent.row(s).to_owned();
                    recent.row_mut(s - 1).assign(&row);
                }
                recent.row_mut(k - 1).assign(&next);
            }
        }
        Ok(out)
    }
}

/// Rejects metrics that beat the best achievable error on data from a known
/// process with noise `sigma`: such a score means targets leaked into the
/// inputs or the split is wrong.
pub fn noise_floor_gate(context: &str, metrics: &Metrics, sigma: f64, n_nodes: usize, d_x: usize) -> Result<()> {
    let per_window = n_nodes * d_x * metrics.per_horizon_mae.len();
    let floor = NoiseFloor::new(sigma, metrics.n_windows * per_window);
    if floor.admits(metrics.mae) {
        Ok(())
    } else {
        Err(Error::BelowNoiseFloor { context: context.into(), mae: metrics.mae, bound: floor.bound() })
    }
}

/// Tracks the best validation score and when to stop.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, since_best: 0 }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> StopDecision {
        if score < self.best {
            self.best = score;
            self.best_epoch = epoch;
            self.since_best = 0;
            return StopDecision::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// One training collection: series, graph, window indices and, for models
/// with embeddings, its own table.
pub struct Source<'a> {
    pub data: &'a SeriesDataset,
    pub graph: &'a Graph,
    pub train: &'a WindowIndex,
    pub val: &'a WindowIndex,
    pub table: Option<&'a mut EmbeddingTable<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the untrained state; training epochs count from 1.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: Option<f64>,
    pub val_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub steps: usize,
    pub source_batches: Vec<usize>,
    pub trainable_params: usize,
    pub wall_time_s: f64,
}

impl TrainReport {
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_mae\n");
        for e in &self.epochs {
            let loss = e.train_loss.map(|l| l.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.lr, loss, e.val_mae));
        }
        out
    }

    pub fn val_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_mae).collect()
    }
}

fn check_sources(model: &Model<f32>, sources: &[Source<'_>], reg: Regularization) -> Result<()> {
    if sources.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one source".into()));
    }
    let c = model.config();
    for (k, s) in sources.iter().enumerate() {
        if s.data.n_channels() != c.input_dim || s.data.n_exogenous() != c.exog_dim {
            return Err(Error::InvalidArgument(format!(
                "source {k} has d_x = {}, d_u = {}; model expects {}, {}",
                s.data.n_channels(),
                s.data.n_exogenous(),
                c.input_dim,
                c.exog_dim
            )));
        }
        if s.graph.n_nodes() != s.data.n_nodes() {
            return Err(shape_err(format!("source {k} graph"), &[s.data.n_nodes()], &[s.graph.n_nodes()]));
        }
        if s.train.is_empty() || s.val.is_empty() {
            return Err(Error::InvalidArgument(format!("source {k} has an empty train or val index")));
        }
        match (&s.table, c.uses_embeddings()) {
            (None, true) => return Err(Error::InvalidArgument(format!("source {k} lacks an embedding table"))),
            (Some(_), false) => return Err(Error::InvalidArgument(format!("source {k} has a table the model ignores"))),
            (Some(t), true) => {
                if t.n_nodes() != s.data.n_nodes() || t.dim() != c.embedding_dim {
                    return Err(shape_err(
                        format!("source {k} embedding table"),
                        &[s.data.n_nodes(), c.embedding_dim],
                        &[t.n_nodes(), t.dim()],
                    ));
                }
                let mode_ok = match reg {
                    Regularization::None => true,
                    Regularization::Variational { .. } => t.mode() == EmbeddingMode::Variational,
                    Regularization::Clustering { .. } => t.mode() == EmbeddingMode::Clustered,
                };
                if !mode_ok {
                    return Err(Error::Config(format!("{reg:?} does not fit a {:?} table", t.mode())));
                }
            }
            (None, false) => {}
        }
    }
    if reg != Regularization::None && !c.uses_embeddings() {
        return Err(Error::Config("embedding regularization needs a model with embeddings".into()));
    }
    Ok(())
}

/// Mean validation MAE across sources, with eval-phase embeddings.
pub fn validation_mae(model: &mut Model<f32>, sources: &[Source<'_>], cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    for s in sources {
        let index = s.val.capped(cfg.val_max_windows);
        let mut f = StgnnForecaster::new(model, s.table.as_deref(), s.graph);
        total += evaluate(&mut f, s.data, &index, cfg.eval_batch_size)?.mae;
    }
    Ok(total / sources.len() as f64)
}

/// Source chosen for each mini-batch, uniformly at random.
pub fn pick_source<R: Rng + ?Sized>(rng: &mut R, n_sources: usize) -> usize {
    if n_sources == 1 {
        0
    } else {
        rng.random_range(0..n_sources)
    }
}

fn epoch_plan(sources: &[Source<'_>], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<(usize, Vec<usize>)> {
    if cfg.batches_per_epoch > 0 {
        return (0..cfg.batches_per_epoch)
            .map(|_| {
                let k = pick_source(rng, sources.len());
                let anchors = sources[k].train.anchors();
                let picks = (0..cfg.batch_size).map(|_| anchors[rng.random_range(0..anchors.len())]).collect();
                (k, picks)
            })
            .collect();
    }
    let mut plan = Vec::new();
    for (k, s) in sources.iter().enumerate() {
        let mut anchors = s.train.anchors().to_vec();
        anchors.shuffle(rng);
        plan.extend(anchors.chunks(cfg.batch_size).map(|c| (k, c.to_vec())));
    }
    plan.shuffle(rng);
    plan
}

/// Trains the shared backbone (and each source's table) with Adam, global
/// gradient clipping, step-wise learning-rate halving and early stopping on
/// the mean validation MAE. The parameters with the best validation score
/// (including the untrained state) are restored at the end.
pub fn train_sources(model: &mut Model<f32>, sources: &mut [Source<'_>], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_sources(model, sources, cfg.reg)?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model_adam = Adam::<f32>::new(cfg.adam);
    let mut table_adams: Vec<Adam<f32>> = sources.iter().map(|_| Adam::new(cfg.adam)).collect();
    let mut graph_cache: HashMap<(usize, usize), GraphBatch<f32>> = HashMap::new();
    let weighted = model.config().weighted_mean;
    let loss_kind = cfg.effective_loss();
    let trainable = model.params.count(true)
        + sources
            .iter()
            .filter_map(|s| s.table.as_ref().map(|t| t.params.count(true)))
            .sum::<usize>();

    let snapshot = |model: &Model<f32>, sources: &[Source<'_>]| {
        (
            model.params.snapshot(),
            sources
                .iter()
                .map(|s| s.table.as_ref().map(|t| t.params.snapshot()))
                .collect::<Vec<_>>(),
        )
    };

    let mut stopper = EarlyStopping::new(cfg.patience.max(1));
    let initial = validation_mae(model, sources, cfg)?;
    stopper.observe(0, initial);
    let mut best = snapshot(model, sources);
    let mut epochs = vec![EpochRecord { epoch: 0, lr: cfg.lr_at(0), train_loss: None, val_mae: initial }];
    let mut steps = 0usize;
    let mut source_batches = vec![0usize; sources.len()];

    for epoch in 0..cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        let plan = epoch_plan(sources, cfg, &mut rng);
        let mut loss_sum = 0.0;
        for (batch_no, (k, anchors)) in plan.iter().enumerate() {
            source_batches[*k] += 1;
            let src = &mut sources[*k];
            let batch = Batch::<f32>::from_anchors(src.data, anchors, model.config().window, model.config().horizon)?;
            let graph = src.graph;
            let gb = graph_cache
                .entry((*k, anchors.len()))
                .or_insert_with(|| GraphBatch::new(graph, anchors.len(), weighted));

            let mut tape = Tape::new();
            let emb = match src.table.as_deref() {
                Some(t) => Some(t.batch_rows(&mut tape, anchors.len(), Phase::Train, &mut rng)?),
                None => None,
            };
            let pred = model.forward(&mut tape, &batch, gb, emb)?;
            let mut loss = match loss_kind {
                LossKind::Mae => loss_mae(&mut tape, pred, &batch.targets)?,
                LossKind::Mse => loss_mse(&mut tape, pred, &batch.targets)?,
            };
            if let Some(t) = src.table.as_deref() {
                match cfg.reg {
                    Regularization::None => {}
                    Regularization::Variational { beta } => {
                        // The forecast term is a per-entry mean; scale the KL
                        // by the entries of one window's target to keep the
                        // sum-of-squares-plus-KL balance of the objective.
                        let entries = (batch.n_nodes * batch.targets.ncols()) as f64;
                        let kl = t.kl_term(&mut tape)?;
                        let kl = tape.scale(kl, (beta / entries) as f32);
                        loss = tape.add(loss, kl)?;
                    }
                    Regularization::Clustering { lambda, n_samples } => {
                        let reg = t.clustering_loss(&mut tape, n_samples, &mut rng)?;
                        let reg = tape.scale(reg, lambda as f32);
                        loss = tape.add(loss, reg)?;
                    }
                }
            }
            let value = f64::from(tape.scalar(loss));
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch: epoch + 1, batch: batch_no, loss: value });
            }
            loss_sum += value;

            model.params.zero_grads();
            let table_adam = &mut table_adams[*k];
            match src.table.as_deref_mut() {
                Some(t) => {
                    t.params.zero_grads();
                    tape.backward(loss, &mut [&mut model.params, &mut t.params])?;
                    let (scale, _) = clip_global_norm(&[&model.params, &t.params], cfg.grad_clip);
                    model_adam.step(&mut model.params, lr, scale);
                    table_adam.step(&mut t.params, lr, scale);
                }
                None => {
                    tape.backward(loss, &mut [&mut model.params])?;
                    let (scale, _) = clip_global_norm(&[&model.params], cfg.grad_clip);
                    model_adam.step(&mut model.params, lr, scale);
                }
            }
            steps += 1;
        }
        let val = validation_mae(model, sources, cfg)?;
        epochs.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: Some(loss_sum / plan.len().max(1) as f64),
            val_mae: val,
        });
        match stopper.observe(epoch + 1, val) {
            StopDecision::Improved => best = snapshot(model, sources),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }

    model.params.restore(&best.0)?;
    for (s, snap) in sources.iter_mut().zip(&best.1) {
        if let (Some(t), Some(v)) = (s.table.as_deref_mut(), snap) {
            t.params.restore(v)?;
        }
    }
    Ok(TrainReport {
        config: cfg.clone(),
        epochs,
        best_epoch: stopper.best_epoch(),
        best_val_mae: stopper.best(),
        steps,
        source_batches,
        trainable_params: trainable,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Single-source training.
pub fn train(
    model: &mut Model<f32>,
    table: Option<&mut EmbeddingTable<f32>>,
    data: &SeriesDataset,
    graph: &Graph,
    train: &WindowIndex,
    val: &WindowIndex,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let mut sources = [Source { data, graph, train, val, table }];
    train_sources(model, &mut sources, cfg)
}

/// Metrics of a trained model on one window index.
pub fn evaluate_model(
    model: &mut Model<f32>,
    table: Option<&EmbeddingTable<f32>>,
    data: &SeriesDataset,
    graph: &Graph,
    index: &WindowIndex,
    batch_size: usize,
) -> Result<Metrics> {
    let mut f = StgnnForecaster::new(model, table, graph);
    evaluate(&mut f, data, index, batch_size)
}

/// Total trainable parameters across stores.
pub fn trainable_count<F: Real>(stores: &[&ParamStore<F>]) -> usize {
    stores.iter().map(|s| s.count(true)).sum()
}
