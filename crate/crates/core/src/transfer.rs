//! Pre-training on several node sets and adaptation of the shared backbone
//! to a new one.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::embeddings::{EmbeddingMode, EmbeddingTable, TableSpec};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Model, ModelConfig};
use crate::seed::derive_seed;
use crate::series::SeriesDataset;
use crate::trainer::{
    evaluate_model, make_splits, train, train_sources, Metrics, Regularization, Source, Split, Splits, TrainConfig,
    TrainReport, WindowIndex, FINETUNE_LAMBDA,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Fresh embeddings, no parameter updates.
    ZeroShot,
    /// Every parameter (backbone and fresh table) is trained.
    FullFinetune,
    /// Backbone frozen; only a fresh table is fitted.
    EmbeddingOnly,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::ZeroShot, Strategy::FullFinetune, Strategy::EmbeddingOnly];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::ZeroShot => "zero_shot",
            Strategy::FullFinetune => "full_finetune",
            Strategy::EmbeddingOnly => "embedding_only",
        }
    }
}

/// Fine-tuning data budget as a fraction of the target series length. The
/// named presets stand for 1-day, 3-day, 1-week and 2-week equivalents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    OneDay,
    ThreeDay,
    OneWeek,
    TwoWeek,
    Fraction(f64),
}

impl Budget {
    pub const PRESETS: [Budget; 4] = [Budget::OneDay, Budget::ThreeDay, Budget::OneWeek, Budget::TwoWeek];

    pub fn fraction(self) -> f64 {
        match self {
            Budget::OneDay => 0.017,
            Budget::ThreeDay => 0.05,
            Budget::OneWeek => 0.1,
            Budget::TwoWeek => 0.2,
            Budget::Fraction(f) => f,
        }
    }

    pub fn name(self) -> String {
        match self {
            Budget::OneDay => "one_day".into(),
            Budget::ThreeDay => "three_day".into(),
            Budget::OneWeek => "one_week".into(),
            Budget::TwoWeek => "two_week".into(),
            Budget::Fraction(f) => format!("fraction_{f}"),
        }
    }
}

pub const TARGET_TEST_FRACTION: f64 = 0.2;

fn default_test_fraction() -> f64 {
    TARGET_TEST_FRACTION
}

/// How to adapt a pre-trained model to a target node set.
///
/// The target series is laid out as a fine-tuning train span at the start,
/// a validation span of the same length right after it, and a test span
/// made of the final `test_fraction` of the steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferPlan {
    pub strategy: Strategy,
    pub budget: Budget,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "TransferPlan::finetune_config")]
    pub train: TrainConfig,
}

impl TransferPlan {
    pub fn new(strategy: Strategy, budget: Budget) -> Self {
        Self { strategy, budget, test_fraction: TARGET_TEST_FRACTION, train: Self::finetune_config() }
    }

    /// Fine-tuning defaults: up to 2000 epochs, lr 0.001, patience 100.
    pub fn finetune_config() -> TrainConfig {
        TrainConfig { max_epochs: 2000, lr: 0.001, patience: 100, ..TrainConfig::default() }
    }

    /// Train and validation span lengths in time steps for a series of
    /// `n_steps`.
    pub fn spans(&self, n_steps: usize) -> (usize, usize) {
        let len = (self.budget.fraction() * n_steps as f64).round() as usize;
        (len, len)
    }

    pub fn splits(&self, n_steps: usize, window: usize, horizon: usize) -> Result<Splits> {
        let f = self.budget.fraction();
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("budget fraction must lie in (0, 1), got {f}")));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction)));
        }
        let (tr, va) = self.spans(n_steps);
        let test_len = (self.test_fraction * n_steps as f64).round() as usize;
        let test_start = n_steps - test_len;
        if tr + va > test_start {
            return Err(Error::Config(format!(
                "fine-tuning spans of {tr} + {va} steps overlap the test span starting at {test_start}"
            )));
        }
        Ok(Splits {
            train: WindowIndex::span(0, tr, window, horizon, Split::Train)?,
            val: WindowIndex::span(tr, tr + va, window, horizon, Split::Val)?,
            test: WindowIndex::span(test_start, n_steps, window, horizon, Split::Test)?,
        })
    }
}

/// One node set: its series and graph.
#[derive(Debug, Clone, Copy)]
pub struct NodeSet<'a> {
    pub data: &'a SeriesDataset,
    pub graph: &'a Graph,
}

/// A backbone trained on one or more source node sets, with one embedding
/// table per source.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: Model<f32>,
    pub table_spec: TableSpec,
    pub tables: Vec<Option<EmbeddingTable<f32>>>,
    pub splits: Vec<Splits>,
    pub report: TrainReport,
}

/// Trains one backbone on several sources. Each mini-batch comes from a
/// single, uniformly chosen source; every source keeps its own table.
pub fn train_multi_source(
    config: &ModelConfig,
    table_spec: TableSpec,
    sources: &[NodeSet<'_>],
    fractions: (f64, f64, f64),
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Pretrained> {
    let first = sources
        .first()
        .ok_or_else(|| Error::InvalidArgument("multi-source training needs at least one source".into()))?;
    for (k, s) in sources.iter().enumerate() {
        if s.data.n_channels() != first.data.n_channels() || s.data.n_exogenous() != first.data.n_exogenous() {
            return Err(Error::InvalidArgument(format!(
                "source {k} has d_x = {}, d_u = {}; source 0 has {}, {}",
                s.data.n_channels(),
                s.data.n_exogenous(),
                first.data.n_channels(),
                first.data.n_exogenous()
            )));
        }
        if config.is_node_specific() && s.data.n_nodes() != first.data.n_nodes() {
            return Err(Error::Config("node-specific models cannot train on node sets of different sizes".into()));
        }
    }
    let mut model = Model::new(config.clone(), first.data.n_nodes(), derive_seed(seed, "init"))?;
    let mut tables = sources
        .iter()
        .enumerate()
        .map(|(k, s)| {
            config
                .uses_embeddings()
                .then(|| table_spec.build(s.data.n_nodes(), config.embedding_dim, derive_seed(seed, &format!("table/{k}"))))
                .transpose()
        })
        .collect::<Result<Vec<_>>>()?;
    let splits = sources
        .iter()
        .map(|s| make_splits(s.data.n_steps(), config.window, config.horizon, fractions))
        .collect::<Result<Vec<_>>>()?;
    let report = {
        let mut train_sources_list: Vec<Source<'_>> = sources
            .iter()
            .zip(&splits)
            .zip(tables.iter_mut())
            .map(|((s, sp), t)| Source { data: s.data, graph: s.graph, train: &sp.train, val: &sp.val, table: t.as_mut() })
            .collect();
        train_sources(&mut model, &mut train_sources_list, cfg)?
    };
    Ok(Pretrained { model, table_spec, tables, splits, report })
}

/// Test MAE of a source before and after adaptation, both with the source's
/// own embedding table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionDelta {
    pub source: usize,
    pub before: f64,
    pub after: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub strategy: Strategy,
    pub budget: Budget,
    pub train_steps: usize,
    pub val_steps: usize,
    pub trained_params: usize,
    pub target: Metrics,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub source_retention: Option<Vec<RetentionDelta>>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct Adapted {
    pub model: Model<f32>,
    pub table: Option<EmbeddingTable<f32>>,
    pub train_report: TrainReport,
    pub report: TransferReport,
}

/// Regularizer used while fine-tuning a fresh table: the KL term is dropped
/// for variational tables, clustered tables keep a frozen centroid table and
/// a raised weight.
pub fn finetune_regularization(mode: Option<EmbeddingMode>, configured: Regularization) -> Regularization {
    match mode {
        Some(EmbeddingMode::Clustered) => {
            let n_samples = match configured {
                Regularization::Clustering { n_samples, .. } => n_samples,
                _ => 1,
            };
            Regularization::Clustering { lambda: FINETUNE_LAMBDA, n_samples }
        }
        _ => Regularization::None,
    }
}

/// Adapts `pre` to `target` following `plan`. The source checkpoint is only
/// read, so several targets may adapt from one checkpoint concurrently.
pub fn adapt(pre: &Pretrained, target: NodeSet<'_>, plan: &TransferPlan, seed: u64) -> Result<Adapted> {
    let start = Instant::now();
    let config = pre.model.config().clone();
    if plan.strategy == Strategy::EmbeddingOnly && !config.uses_embeddings() {
        return Err(Error::Config("embedding_only transfer needs a model with embedding sites".into()));
    }
    if config.is_node_specific() && target.data.n_nodes() != pre.model.n_nodes() {
        return Err(Error::Config(format!(
            "node-specific model is tied to {} nodes, target has {}",
            pre.model.n_nodes(),
            target.data.n_nodes()
        )));
    }
    let splits = plan.splits(target.data.n_steps(), config.window, config.horizon)?;
    let mut model = pre.model.clone();
    let mut table = match pre.tables.iter().flatten().next() {
        Some(src) if config.uses_embeddings() => Some(src.reinit_for(target.data.n_nodes(), derive_seed(seed, "table"))?),
        _ if config.uses_embeddings() => {
            Some(pre.table_spec.build(target.data.n_nodes(), config.embedding_dim, derive_seed(seed, "table"))?)
        }
        _ => None,
    };

    let flags: Vec<(String, bool)> = model.params.entries().iter().map(|e| (e.name.clone(), e.trainable)).collect();
    let mut cfg = plan.train.clone();
    cfg.reg = finetune_regularization(table.as_ref().map(EmbeddingTable::mode), cfg.reg);
    match plan.strategy {
        Strategy::ZeroShot => cfg.max_epochs = 0,
        Strategy::EmbeddingOnly => model.params.set_all_trainable(false),
        Strategy::FullFinetune => {}
    }
    let train_report = train(&mut model, table.as_mut(), target.data, target.graph, &splits.train, &splits.val, &cfg)?;
    for (name, flag) in &flags {
        model.params.set_trainable(name, *flag)?;
    }
    let trained_params = if plan.strategy == Strategy::ZeroShot { 0 } else { train_report.trainable_params };

    let target_metrics = evaluate_model(
        &mut model,
        table.as_ref(),
        target.data,
        target.graph,
        &splits.test,
        cfg.eval_batch_size,
    )?;
    let (train_steps, val_steps) = plan.spans(target.data.n_steps());
    let report = TransferReport {
        strategy: plan.strategy,
        budget: plan.budget,
        train_steps,
        val_steps,
        trained_params,
        target: target_metrics,
        epochs_run: train_report.epochs.len() - 1,
        best_epoch: train_report.best_epoch,
        source_retention: None,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok(Adapted { model, table, train_report, report })
}

/// Re-evaluates the adapted backbone on each source's test windows with the
/// original source tables and reports the change in MAE.
pub fn source_retention_check(
    pre: &Pretrained,
    adapted: &Model<f32>,
    sources: &[NodeSet<'_>],
    batch_size: usize,
) -> Result<Vec<RetentionDelta>> {
    if sources.len() != pre.tables.len() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint has {} sources, {} given",
            pre.tables.len(),
            sources.len()
        )));
    }
    let mut before_model = pre.model.clone();
    let mut after_model = adapted.clone();
    sources
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let test = &pre.splits[k].test;
            let table = pre.tables[k].as_ref();
            let before = evaluate_model(&mut before_model, table, s.data, s.graph, test, batch_size)?.mae;
            let after = evaluate_model(&mut after_model, table, s.data, s.graph, test, batch_size)?.mae;
            Ok(RetentionDelta { source: k, before, after, delta: after - before })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpvar::{default_gpvarl_params, simulate};
    use crate::graph::{build_community_graph, normalize_adjacency, Normalization};
    use crate::model::{MpKind, Site};

    fn node_set(communities: usize, seed: u64, steps: usize) -> (SeriesDataset, Graph) {
        let g = build_community_graph(communities, 3, 1, 0.6, seed).unwrap();
        let g = normalize_adjacency(&g, Normalization::Symmetric).unwrap();
        let p = default_gpvarl_params(&g, seed + 100);
        let data = simulate(&p, &g, steps, 20, seed + 200).unwrap();
        (data, g)
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            max_epochs: 2,
            batches_per_epoch: 4,
            lr: 0.01,
            lr_halving_period: 0,
            patience: 2,
            ..TrainConfig::default()
        }
    }

    fn pretrained(mode: EmbeddingMode) -> (Vec<(SeriesDataset, Graph)>, Pretrained) {
        let sets = vec![node_set(2, 1, 300), node_set(3, 2, 300)];
        let views: Vec<_> = sets.iter().map(|(d, g)| NodeSet { data: d, graph: g }).collect();
        let config = ModelConfig::tts(MpKind::Iso).with_embeddings(4, &[Site::Encoder, Site::Decoder]);
        let mut cfg = quick_cfg();
        cfg.reg = match mode {
            EmbeddingMode::Plain => Regularization::None,
            EmbeddingMode::Variational => Regularization::Variational { beta: 0.05 },
            EmbeddingMode::Clustered => Regularization::Clustering { lambda: 0.5, n_samples: 1 },
        };
        let spec = TableSpec { mode, n_clusters: 3, ..TableSpec::default() };
        let pre = train_multi_source(&config, spec, &views, (0.7, 0.1, 0.2), &cfg, 5).unwrap();
        (sets, pre)
    }

    #[test]
    fn budget_presets() {
        let fr: Vec<f64> = Budget::PRESETS.iter().map(|b| b.fraction()).collect();
        assert_eq!(fr, vec![0.017, 0.05, 0.1, 0.2]);
        let plan = TransferPlan::new(Strategy::EmbeddingOnly, Budget::OneWeek);
        let s = plan.splits(1000, 6, 1).unwrap();
        assert_eq!(s.train.anchors().last(), Some(&99));
        assert_eq!(s.val.anchors().first(), Some(&106));
        assert_eq!(s.test.anchors().first(), Some(&806));
        assert!(TransferPlan::new(Strategy::ZeroShot, Budget::Fraction(0.45)).splits(1000, 6, 1).is_err());
    }

    #[test]
    fn embedding_only_freezes_backbone_and_counts_parameters() {
        for (mode, per_node) in [(EmbeddingMode::Plain, 4), (EmbeddingMode::Variational, 8), (EmbeddingMode::Clustered, 4 + 3)] {
            let (_, pre) = pretrained(mode);
            let (data, g) = node_set(2, 9, 400);
            let mut plan = TransferPlan::new(Strategy::EmbeddingOnly, Budget::OneWeek);
            plan.train = quick_cfg();
            let out = adapt(&pre, NodeSet { data: &data, graph: &g }, &plan, 3).unwrap();
            assert_eq!(out.report.trained_params, data.n_nodes() * per_node, "{mode:?}");
            assert_eq!(out.model.params.snapshot(), pre.model.params.snapshot());
            assert!(out.model.params.entries().iter().all(|e| e.grad.iter().all(|&v| v == 0.0)));
            if mode == EmbeddingMode::Clustered {
                let t = out.table.as_ref().unwrap();
                assert_eq!(t.params.get("C"), pre.tables[0].as_ref().unwrap().params.get("C"));
            }
        }
    }

    #[test]
    fn zero_epochs_matches_zero_shot_and_retention_is_exact() {
        let (sets, pre) = pretrained(EmbeddingMode::Plain);
        let (data, g) = node_set(2, 9, 400);
        let target = NodeSet { data: &data, graph: &g };
        let zero = adapt(&pre, target, &TransferPlan::new(Strategy::ZeroShot, Budget::OneWeek), 3).unwrap();
        let mut plan = TransferPlan::new(Strategy::EmbeddingOnly, Budget::OneWeek);
        plan.train = TrainConfig { max_epochs: 0, ..quick_cfg() };
        let none = adapt(&pre, target, &plan, 3).unwrap();
        assert_eq!(zero.report.target.mae, none.report.target.mae);
        assert_eq!(zero.report.trained_params, 0);

        let views: Vec<_> = sets.iter().map(|(d, g)| NodeSet { data: d, graph: g }).collect();
        for d in source_retention_check(&pre, &zero.model, &views, 64).unwrap() {
            assert_eq!(d.delta, 0.0);
        }
        plan.strategy = Strategy::FullFinetune;
        plan.train = quick_cfg();
        let full = adapt(&pre, target, &plan, 3).unwrap();
        let deltas = source_retention_check(&pre, &full.model, &views, 64).unwrap();
        assert!(deltas.iter().all(|d| d.delta.is_finite()));
    }

    #[test]
    fn adapt_is_deterministic() {
        let (_, pre) = pretrained(EmbeddingMode::Plain);
        let (data, g) = node_set(2, 9, 400);
        let mut plan = TransferPlan::new(Strategy::FullFinetune, Budget::OneWeek);
        plan.train = quick_cfg();
        let a = adapt(&pre, NodeSet { data: &data, graph: &g }, &plan, 3).unwrap();
        let b = adapt(&pre, NodeSet { data: &data, graph: &g }, &plan, 3).unwrap();
        assert_eq!(a.model.params.snapshot(), b.model.params.snapshot());
        assert_eq!(a.report.target, b.report.target);
    }

    #[test]
    fn embedding_only_needs_embeddings() {
        let (data, g) = node_set(2, 1, 300);
        let view = [NodeSet { data: &data, graph: &g }];
        let config = ModelConfig::tts(MpKind::Iso);
        let pre = train_multi_source(&config, TableSpec::default(), &view, (0.7, 0.1, 0.2), &quick_cfg(), 1).unwrap();
        assert!(pre.tables[0].is_none());
        let plan = TransferPlan::new(Strategy::EmbeddingOnly, Budget::OneWeek);
        assert!(matches!(adapt(&pre, view[0], &plan, 0), Err(Error::Config(_))));
    }
}
