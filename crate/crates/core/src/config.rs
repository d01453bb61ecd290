//! Experiment documents (TOML), presets and data construction.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embeddings::{EmbeddingMode, TableSpec};
use crate::error::{Error, Result};
use crate::gpvar::{simulate, GpvarParams, ProcessKind, DEFAULT_BURN_IN, DEFAULT_SIGMA};
use crate::graph::{build_community_graph_from, normalize_adjacency, CommunityGraphSpec, Graph, Normalization};
use crate::io::{load_csv_dataset, read_dataset_dir, CsvMeta, DatasetMeta};
use crate::model::{Family, ModelConfig, MpKind, Site};
use crate::seed::derive_seed;
use crate::series::SeriesDataset;
use crate::trainer::{Regularization, TrainConfig, DEFAULT_BETA, DEFAULT_LAMBDA};
use crate::transfer::{Budget, Strategy, TransferPlan, TARGET_TEST_FRACTION};

/// Community graph generator settings plus the normalization applied before
/// the graph is used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    pub n_communities: usize,
    pub community_size: usize,
    pub bridges_per_community: usize,
    pub intra_density: f64,
    pub normalization: Normalization,
}

impl Default for GraphSection {
    fn default() -> Self {
        let c = CommunityGraphSpec::default();
        Self {
            n_communities: c.n_communities,
            community_size: c.community_size,
            bridges_per_community: c.bridges_per_community,
            intra_density: c.intra_density,
            normalization: Normalization::Symmetric,
        }
    }
}

impl GraphSection {
    pub fn spec(&self) -> CommunityGraphSpec {
        CommunityGraphSpec {
            n_communities: self.n_communities,
            community_size: self.community_size,
            bridges_per_community: self.bridges_per_community,
            intra_density: self.intra_density,
        }
    }

    pub fn build(&self, seed: u64) -> Result<Graph> {
        normalize_adjacency(&build_community_graph_from(&self.spec(), seed)?, self.normalization)
    }
}

fn default_steps() -> usize {
    30_000
}

fn default_burn_in() -> usize {
    DEFAULT_BURN_IN
}

fn default_sigma() -> f64 {
    DEFAULT_SIGMA
}

/// Where the series comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProcessSection {
    /// Synthetic series on the generated community graph.
    Synthetic {
        process: ProcessKind,
        #[serde(default = "default_steps")]
        steps: usize,
        #[serde(default = "default_burn_in")]
        burn_in: usize,
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
    /// User-supplied CSV files.
    Csv { values: PathBuf, edges: PathBuf, meta: PathBuf },
    /// A directory written by `generate`.
    Dataset { path: PathBuf },
}

impl Default for ProcessSection {
    fn default() -> Self {
        ProcessSection::Synthetic {
            process: ProcessKind::GpvarL,
            steps: default_steps(),
            burn_in: default_burn_in(),
            sigma: default_sigma(),
        }
    }
}

fn default_fractions() -> [f64; 3] {
    [0.7, 0.1, 0.2]
}

/// Transfer settings: the source and target node sets plus the plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    pub strategy: Strategy,
    pub budget: Budget,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Synthetic source node sets drawn from the `graph`/`process` sections
    /// (ignored when `source_dirs` is given).
    #[serde(default = "default_n_sources")]
    pub n_sources: usize,
    #[serde(default)]
    pub source_dirs: Vec<PathBuf>,
    #[serde(default)]
    pub target_dir: Option<PathBuf>,
    #[serde(default = "TransferPlan::finetune_config")]
    pub train: TrainConfig,
}

fn default_test_fraction() -> f64 {
    TARGET_TEST_FRACTION
}

fn default_n_sources() -> usize {
    3
}

impl TransferSection {
    pub fn plan(&self) -> TransferPlan {
        TransferPlan {
            strategy: self.strategy,
            budget: self.budget,
            test_fraction: self.test_fraction,
            train: self.train.clone(),
        }
    }
}

/// A full experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Train/validation/test fractions of the series.
    #[serde(default = "default_fractions")]
    pub splits: [f64; 3],
    #[serde(default)]
    pub graph: GraphSection,
    #[serde(default)]
    pub process: ProcessSection,
    pub model: ModelConfig,
    #[serde(default)]
    pub embedding: TableSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub transfer: Option<TransferSection>,
}

/// Model presets for the synthetic benchmark, reference sizes `d_h = 16`,
/// `d_v = 8`, `W = 6`.
pub const MODEL_PRESETS: [&str; 12] = [
    "fcrnn",
    "local_rnn",
    "rnn_global",
    "rnn_emb",
    "tts_iso_global",
    "tts_aniso_global",
    "tts_iso_emb",
    "tts_aniso_emb",
    "tas_iso_global",
    "tas_aniso_global",
    "tas_iso_emb",
    "tas_aniso_emb",
];

pub const EMBEDDING_DIM: usize = 8;

pub fn model_preset(name: &str) -> Result<ModelConfig> {
    let both = [Site::Encoder, Site::Decoder];
    let base = |family, mp_kind| ModelConfig { family, mp_kind, ..ModelConfig::tts(MpKind::Iso) };
    let cfg = match name {
        "fcrnn" => base(Family::Fcrnn, MpKind::None),
        "local_rnn" => base(Family::Localrnn, MpKind::None),
        "rnn_global" => base(Family::Rnn, MpKind::None),
        "rnn_emb" => base(Family::Rnn, MpKind::None).with_embeddings(EMBEDDING_DIM, &[Site::Encoder]),
        "tts_iso_global" => base(Family::Tts, MpKind::Iso),
        "tts_aniso_global" => base(Family::Tts, MpKind::Aniso),
        "tts_iso_emb" => base(Family::Tts, MpKind::Iso).with_embeddings(EMBEDDING_DIM, &both),
        "tts_aniso_emb" => base(Family::Tts, MpKind::Aniso).with_embeddings(EMBEDDING_DIM, &both),
        "tas_iso_global" => base(Family::Tas, MpKind::Iso),
        "tas_aniso_global" => base(Family::Tas, MpKind::Aniso),
        "tas_iso_emb" => base(Family::Tas, MpKind::Iso).with_embeddings(EMBEDDING_DIM, &both),
        "tas_aniso_emb" => base(Family::Tas, MpKind::Aniso).with_embeddings(EMBEDDING_DIM, &both),
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; known: {}",
                MODEL_PRESETS.join(", ")
            )))
        }
    };
    Ok(if matches!(cfg.family, Family::Tts) { cfg } else { ModelConfig { mp_layers: 0, ..cfg } })
}

/// `"[gpvar|gpvar-l:]model"`: a model preset, optionally on a given process.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let (process, model) = match name.split_once(':') {
        Some(("gpvar", m)) => (ProcessKind::Gpvar, m),
        Some(("gpvar-l", m)) => (ProcessKind::GpvarL, m),
        Some((p, _)) => return Err(Error::Config(format!("unknown process {p:?}; use gpvar or gpvar-l"))),
        None => (ProcessKind::GpvarL, name),
    };
    Ok(ExperimentConfig {
        seed: 0,
        output: None,
        splits: default_fractions(),
        graph: GraphSection::default(),
        process: ProcessSection::Synthetic {
            process,
            steps: default_steps(),
            burn_in: default_burn_in(),
            sigma: default_sigma(),
        },
        model: model_preset(model)?,
        embedding: TableSpec::default(),
        train: TrainConfig::default(),
        transfer: None,
    })
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    /// Parses a document, layered over `base` when given. Unknown keys are
    /// rejected.
    pub fn from_toml(text: &str, base: Option<&ExperimentConfig>) -> Result<Self> {
        let overlay: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let merged = match base {
            Some(b) => {
                let mut v = toml::Value::try_from(b).map_err(|e| Error::Config(e.to_string()))?;
                merge(&mut v, overlay);
                v
            }
            None => overlay,
        };
        merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path, base: Option<&ExperimentConfig>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?, base)
    }

    /// The fully resolved document, defaults included.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn fractions(&self) -> (f64, f64, f64) {
        (self.splits[0], self.splits[1], self.splits[2])
    }

    /// Derives every subsystem seed from the root seed: the training stream
    /// and, for transfer runs, the fine-tuning stream.
    pub fn resolve_seeds(&mut self) {
        self.train.seed = derive_seed(self.seed, "batching");
        if let Some(t) = &mut self.transfer {
            t.train.seed = derive_seed(self.seed, "finetune");
        }
    }

    /// Regularizer matching the embedding mode when none is configured.
    pub fn resolve_regularization(&mut self) {
        if self.train.reg == Regularization::None {
            self.train.reg = match self.embedding.mode {
                EmbeddingMode::Plain => Regularization::None,
                EmbeddingMode::Variational => Regularization::Variational { beta: DEFAULT_BETA },
                EmbeddingMode::Clustered => Regularization::Clustering { lambda: DEFAULT_LAMBDA, n_samples: 1 },
            };
        }
    }

    /// Every problem in one error.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut checks = vec![("model", self.model.validate()), ("train", self.train.validate())];
        if let Some(t) = &self.transfer {
            checks.push(("transfer.train", t.train.validate()));
        }
        for (what, r) in checks {
            match r {
                Ok(()) => {}
                Err(Error::Config(m)) => problems.push(format!("{what}: {m}")),
                Err(e) => problems.push(format!("{what}: {e}")),
            }
        }
        if let Some(t) = &self.transfer {
            if t.strategy == Strategy::EmbeddingOnly && !self.model.uses_embeddings() {
                problems.push("transfer: embedding_only needs a model with embeddings".into());
            }
            if t.source_dirs.is_empty() && t.n_sources == 0 {
                problems.push("transfer: need at least one source".into());
            }
        }
        let sum: f64 = self.splits.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.splits.iter().any(|&f| f <= 0.0) {
            problems.push(format!("splits must be positive and sum to 1, got {:?}", self.splits));
        }
        if self.model.uses_embeddings() && self.embedding.mode == EmbeddingMode::Clustered && self.embedding.n_clusters == 0
        {
            problems.push("embedding: clustered mode needs n_clusters >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// A node set with its provenance.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub data: SeriesDataset,
    pub graph: Graph,
    pub meta: DatasetMeta,
}

impl LoadedData {
    pub fn process(&self) -> Option<&GpvarParams> {
        self.meta.process.as_ref()
    }
}

/// Builds or loads the series described by `graph` and `process`; `stream`
/// names the seed stream so several synthetic node sets can be drawn from
/// one root seed.
pub fn build_data(graph: &GraphSection, process: &ProcessSection, root_seed: u64, stream: &str) -> Result<LoadedData> {
    match process {
        ProcessSection::Synthetic { process, steps, burn_in, sigma } => {
            let g = graph.build(derive_seed(root_seed, &format!("{stream}/graph")))?;
            let mut params = GpvarParams::for_kind(*process, &g, derive_seed(root_seed, &format!("{stream}/gains")));
            params.sigma = *sigma;
            let sim_seed = derive_seed(root_seed, &format!("{stream}/process"));
            let data = simulate(&params, &g, *steps, *burn_in, sim_seed)?;
            let mut meta = DatasetMeta::describe(&data, &g);
            meta.seed = Some(root_seed);
            meta.process = Some(params);
            Ok(LoadedData { data, graph: g, meta })
        }
        ProcessSection::Csv { values, edges, meta } => {
            let csv_meta: CsvMeta = serde_json::from_str(&std::fs::read_to_string(meta)?)?;
            let (data, g) = load_csv_dataset(values, edges, &csv_meta)?;
            let meta = DatasetMeta::describe(&data, &g);
            Ok(LoadedData { data, graph: g, meta })
        }
        ProcessSection::Dataset { path } => {
            let (data, graph, meta) = read_dataset_dir(path)?;
            Ok(LoadedData { data, graph, meta })
        }
    }
}
