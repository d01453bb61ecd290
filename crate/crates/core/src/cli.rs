//! Command-line experiment runner.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{build_data, preset, ExperimentConfig, LoadedData, ProcessSection, MODEL_PRESETS};
use crate::embeddings::{EmbeddingTable, TableSpec};
use crate::gpvar::optimal_mae;
use crate::io::{read_dataset_dir, write_dataset_dir, write_embeddings, write_embeddings_csv, write_values_csv, VALUES_CSV};
use crate::model::Model;
use crate::nn::checkpoint;
use crate::seed::derive_seed;
use crate::trainer::{
    evaluate, evaluate_model, make_splits, noise_floor_gate, train, Metrics, OptimalOracle, Split, TrainReport, WindowIndex,
};
use crate::transfer::{adapt, source_retention_check, train_multi_source, Budget, NodeSet, TransferPlan};

pub const OUTPUT_ENV: &str = "GLOCAL_OUT";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const TABLE_CKPT: &str = "embeddings.ckpt";
pub const TABLE_SPEC: &str = "embeddings.json";
pub const REPORT: &str = "report.json";
pub const CURVES: &str = "curves.csv";

#[derive(Debug, Parser)]
#[command(name = "glocal", version, about = "Global and global-local spatiotemporal forecasting on graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment document (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in starting point, e.g. `tts_iso_emb` or `gpvar:tts_iso_global`;
    /// `--config` is layered on top.
    #[arg(long)]
    pub preset: Option<String>,
    /// Root seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write into an existing, non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a synthetic dataset into a directory.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        burn_in: Option<usize>,
        /// Also write a CSV copy of the values.
        #[arg(long)]
        csv: bool,
    },
    /// Train a model and evaluate it on the test split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Re-evaluate a finished run directory.
    Evaluate {
        /// Directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Train a window x hidden-size grid and write a matrix of test MAEs.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "2,6,12,24")]
        windows: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
        hiddens: Vec<usize>,
    },
    /// Pre-train on source node sets and adapt to a target node set.
    Transfer {
        #[command(flatten)]
        common: Common,
        /// One report per preset budget instead of the configured one.
        #[arg(long)]
        budget_sweep: bool,
    },
    /// Dump an embedding table as CSV.
    InspectEmbeddings {
        /// Run directory, or an embeddings checkpoint with its JSON sidecar.
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV destination (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the built-in presets.
    Presets,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

/// Contents of `report.json` for a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub n_nodes: usize,
    pub n_steps: usize,
    pub param_count: usize,
    pub train: TrainReport,
    pub val: Metrics,
    pub test: Metrics,
    /// Test MAE of the process oracle, for synthetic data.
    pub optimal_test_mae: Option<f64>,
}

pub struct RunOutcome {
    pub model: Model<f32>,
    pub table: Option<EmbeddingTable<f32>>,
    pub report: RunReport,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, steps, burn_in, csv } => cmd_generate(&common, steps, burn_in, csv).map(drop),
        Command::Train { common, max_epochs } => cmd_train(&common, max_epochs).map(drop),
        Command::Evaluate { run, split } => {
            let m = cmd_evaluate(&run, split)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
            Ok(())
        }
        Command::Sweep { common, windows, hiddens } => cmd_sweep(&common, &windows, &hiddens).map(drop),
        Command::Transfer { common, budget_sweep } => cmd_transfer(&common, budget_sweep).map(drop),
        Command::InspectEmbeddings { checkpoint, out } => cmd_inspect_embeddings(&checkpoint, out.as_deref()),
        Command::Presets => {
            for p in MODEL_PRESETS {
                println!("{p}");
            }
            Ok(())
        }
    }
}

/// Preset and/or file, then `--seed`, then derived fields.
pub fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let base = common.preset.as_deref().map(preset).transpose()?;
    let mut cfg = match (&common.config, base) {
        (Some(path), base) => {
            ExperimentConfig::load(path, base.as_ref()).with_context(|| format!("reading {}", path.display()))?
        }
        (None, Some(base)) => base,
        (None, None) => bail!("give --config or --preset"),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    finish_config(&mut cfg)?;
    Ok(cfg)
}

fn finish_config(cfg: &mut ExperimentConfig) -> Result<()> {
    cfg.resolve_regularization();
    cfg.resolve_seeds();
    cfg.validate()?;
    Ok(())
}

fn output_dir(common: &Common, cfg: &ExperimentConfig, command: &str) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| {
            let root = std::env::var_os(OUTPUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
            root.join(format!("{command}-{}", cfg.seed))
        })
}

fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && dir.read_dir()?.next().is_some() && !force {
        bail!("{} already exists; pass --force to overwrite", dir.display());
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write_resolved(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let mut cfg = cfg.clone();
    cfg.output = Some(dir.to_path_buf());
    std::fs::write(dir.join(RESOLVED_CONFIG), cfg.to_toml()?)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn cmd_generate(common: &Common, steps: Option<usize>, burn_in: Option<usize>, csv: bool) -> Result<PathBuf> {
    let mut cfg = resolve_config(common)?;
    match &mut cfg.process {
        ProcessSection::Synthetic { steps: s, burn_in: b, .. } => {
            if let Some(v) = steps {
                *s = v;
            }
            if let Some(v) = burn_in {
                *b = v;
            }
        }
        _ => bail!("generate needs a synthetic process section"),
    }
    let dir = output_dir(common, &cfg, "generate");
    prepare_dir(&dir, common.force)?;
    let loaded = build_data(&cfg.graph, &cfg.process, cfg.seed, "main")?;
    write_dataset_dir(&dir, &loaded.data, &loaded.graph, &loaded.meta)?;
    if csv {
        write_values_csv(&dir.join(VALUES_CSV), &loaded.data)?;
    }
    write_resolved(&dir, &cfg)?;
    let params = loaded.process().expect("synthetic data records its process");
    let oracle_mae = if loaded.data.n_steps() > params.required_history() {
        let index = WindowIndex::span(0, loaded.data.n_steps(), params.required_history(), 1, Split::Test)?;
        let mut oracle = OptimalOracle { params, graph: &loaded.graph, horizon: 1 };
        Some(evaluate(&mut oracle, &loaded.data, &index, 256)?.mae)
    } else {
        None
    };
    println!(
        "T = {}, N = {}, analytic optimal MAE = {:.4}, oracle MAE on the data = {}",
        loaded.data.n_steps(),
        loaded.data.n_nodes(),
        optimal_mae(params.sigma),
        oracle_mae.map_or("n/a".into(), |m| format!("{m:.4}"))
    );
    println!("wrote {}", dir.display());
    Ok(dir)
}

/// Builds the model and table, trains, and evaluates on validation and test.
pub fn run_training(cfg: &ExperimentConfig, loaded: &LoadedData) -> Result<RunOutcome> {
    let data = &loaded.data;
    let mut model_cfg = cfg.model.clone();
    model_cfg.input_dim = data.n_channels();
    model_cfg.exog_dim = data.n_exogenous();
    let splits = make_splits(data.n_steps(), model_cfg.window, model_cfg.horizon, cfg.fractions())?;
    let mut model = Model::<f32>::new(model_cfg.clone(), data.n_nodes(), derive_seed(cfg.seed, "init"))?;
    let mut table = model_cfg
        .uses_embeddings()
        .then(|| cfg.embedding.build::<f32>(data.n_nodes(), model_cfg.embedding_dim, derive_seed(cfg.seed, "table")))
        .transpose()?;
    let report = train(&mut model, table.as_mut(), data, &loaded.graph, &splits.train, &splits.val, &cfg.train)?;
    let batch = cfg.train.eval_batch_size;
    let val = evaluate_model(&mut model, table.as_ref(), data, &loaded.graph, &splits.val, batch)?;
    let test = evaluate_model(&mut model, table.as_ref(), data, &loaded.graph, &splits.test, batch)?;
    if let Some(p) = loaded.process() {
        for (name, m) in [("validation", &val), ("test", &test)] {
            noise_floor_gate(name, m, p.sigma, data.n_nodes(), data.n_channels())?;
        }
    }
    let optimal_test_mae = match loaded.process() {
        Some(p) if model_cfg.horizon == 1 && data.n_channels() == 1 => {
            let index = WindowIndex::from_anchors(
                splits.test.anchors().iter().copied().filter(|&t| t >= p.required_history()).collect(),
                p.required_history(),
                1,
                Split::Test,
            );
            let mut oracle = OptimalOracle { params: p, graph: &loaded.graph, horizon: 1 };
            Some(evaluate(&mut oracle, data, &index, batch)?.mae)
        }
        _ => None,
    };
    let param_count = model.params.count(false) + table.as_ref().map_or(0, |t| t.params.count(false));
    let report = RunReport {
        n_nodes: data.n_nodes(),
        n_steps: data.n_steps(),
        param_count,
        train: report,
        val,
        test,
        optimal_test_mae,
    };
    Ok(RunOutcome { model, table, report })
}

fn save_table(dir: &Path, table: &EmbeddingTable<f32>) -> Result<()> {
    checkpoint::save(&table.params, &dir.join(TABLE_CKPT))?;
    let spec = TableSpec { mode: table.mode(), n_clusters: table.n_clusters(), tau: table.tau() };
    write_json(&dir.join(TABLE_SPEC), &spec)
}

fn save_run(dir: &Path, outcome: &RunOutcome) -> Result<()> {
    checkpoint::save(&outcome.model.params, &dir.join(MODEL_CKPT))?;
    if let Some(t) = &outcome.table {
        save_table(dir, t)?;
    }
    write_json(&dir.join(REPORT), &outcome.report)?;
    std::fs::write(dir.join(CURVES), outcome.report.train.curves_csv())?;
    Ok(())
}

pub fn cmd_train(common: &Common, max_epochs: Option<usize>) -> Result<PathBuf> {
    let mut cfg = resolve_config(common)?;
    if let Some(e) = max_epochs {
        cfg.train.max_epochs = e;
        cfg.train.patience = cfg.train.patience.min(e);
        finish_config(&mut cfg)?;
    }
    let dir = output_dir(common, &cfg, "train");
    prepare_dir(&dir, common.force)?;
    write_resolved(&dir, &cfg)?;
    let loaded = build_data(&cfg.graph, &cfg.process, cfg.seed, "main")?;
    let outcome = run_training(&cfg, &loaded)?;
    save_run(&dir, &outcome)?;
    let r = &outcome.report;
    println!(
        "test MAE = {:.4} (best epoch {}, {} steps, {:.1} s){}",
        r.test.mae,
        r.train.best_epoch,
        r.train.steps,
        r.train.wall_time_s,
        r.optimal_test_mae.map_or(String::new(), |m| format!(", oracle {m:.4}"))
    );
    println!("wrote {}", dir.display());
    Ok(dir)
}

fn load_table(ckpt: &Path, spec_path: &Path) -> Result<EmbeddingTable<f32>> {
    let spec: TableSpec = serde_json::from_str(&std::fs::read_to_string(spec_path)?)?;
    let params = checkpoint::load::<f32>(ckpt)?;
    Ok(EmbeddingTable::from_params(spec.mode, spec.tau, params)?)
}

/// Everything `load_run` restores from a run directory.
pub type LoadedRun = (ExperimentConfig, Model<f32>, Option<EmbeddingTable<f32>>, LoadedData);

/// Loads a run directory's configuration, model and table.
pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let cfg = ExperimentConfig::load(&dir.join(RESOLVED_CONFIG), None)?;
    let loaded = build_data(&cfg.graph, &cfg.process, cfg.seed, "main")?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.input_dim = loaded.data.n_channels();
    model_cfg.exog_dim = loaded.data.n_exogenous();
    let params = checkpoint::load::<f32>(&dir.join(MODEL_CKPT))?;
    let model = Model::from_params(model_cfg, loaded.data.n_nodes(), params)?;
    let table = dir
        .join(TABLE_CKPT)
        .exists()
        .then(|| load_table(&dir.join(TABLE_CKPT), &dir.join(TABLE_SPEC)))
        .transpose()?;
    Ok((cfg, model, table, loaded))
}

pub fn cmd_evaluate(run_dir: &Path, split: SplitArg) -> Result<Metrics> {
    let (cfg, mut model, table, loaded) = load_run(run_dir)?;
    let c = model.config().clone();
    let splits = make_splits(loaded.data.n_steps(), c.window, c.horizon, cfg.fractions())?;
    let index = match split {
        SplitArg::Train => splits.train,
        SplitArg::Val => splits.val,
        SplitArg::Test => splits.test,
    };
    let metrics = evaluate_model(&mut model, table.as_ref(), &loaded.data, &loaded.graph, &index, cfg.train.eval_batch_size)?;
    if let Some(p) = loaded.process() {
        noise_floor_gate("evaluation", &metrics, p.sigma, loaded.data.n_nodes(), loaded.data.n_channels())?;
    }
    Ok(metrics)
}

/// One grid cell of a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub window: usize,
    pub hidden: usize,
    pub test_mae: Option<f64>,
    pub error: Option<String>,
}

/// Renders the matrix: one row per window, one column per hidden size.
pub fn sweep_matrix_csv(cells: &[SweepCell], windows: &[usize], hiddens: &[usize]) -> String {
    let mut out = String::from("window");
    for h in hiddens {
        out.push_str(&format!(",d_h={h}"));
    }
    out.push('\n');
    for &w in windows {
        out.push_str(&w.to_string());
        for &h in hiddens {
            let cell = cells.iter().find(|c| c.window == w && c.hidden == h);
            match cell.and_then(|c| c.test_mae) {
                Some(m) => out.push_str(&format!(",{m}")),
                None => out.push_str(",NaN"),
            }
        }
        out.push('\n');
    }
    out
}

pub fn cmd_sweep(common: &Common, windows: &[usize], hiddens: &[usize]) -> Result<Vec<SweepCell>> {
    let cfg = resolve_config(common)?;
    let dir = output_dir(common, &cfg, "sweep");
    prepare_dir(&dir, common.force)?;
    write_resolved(&dir, &cfg)?;
    let loaded = build_data(&cfg.graph, &cfg.process, cfg.seed, "main")?;
    let mut cells = Vec::new();
    for &w in windows {
        for &h in hiddens {
            let mut cell_cfg = cfg.clone();
            cell_cfg.model.window = w;
            cell_cfg.model.hidden = h;
            let cell_dir = dir.join(format!("w{w}_h{h}"));
            let result = cell_cfg
                .validate()
                .map_err(anyhow::Error::from)
                .and_then(|_| {
                    std::fs::create_dir_all(&cell_dir)?;
                    write_resolved(&cell_dir, &cell_cfg)?;
                    run_training(&cell_cfg, &loaded)
                })
                .and_then(|o| {
                    save_run(&cell_dir, &o)?;
                    Ok(o.report.test.mae)
                });
            let cell = match result {
                Ok(m) => {
                    println!("W = {w}, d_h = {h}: test MAE {m:.4}");
                    SweepCell { window: w, hidden: h, test_mae: Some(m), error: None }
                }
                Err(e) => {
                    eprintln!("W = {w}, d_h = {h} failed: {e:#}");
                    SweepCell { window: w, hidden: h, test_mae: None, error: Some(format!("{e:#}")) }
                }
            };
            cells.push(cell);
        }
    }
    std::fs::write(dir.join("sweep.csv"), sweep_matrix_csv(&cells, windows, hiddens))?;
    write_json(&dir.join("sweep_cells.json"), &cells)?;
    println!("wrote {}", dir.display());
    Ok(cells)
}

fn transfer_node_sets(cfg: &ExperimentConfig) -> Result<(Vec<LoadedData>, LoadedData)> {
    let t = cfg.transfer.as_ref().context("the config has no [transfer] section")?;
    let from_dir = |p: &PathBuf| -> Result<LoadedData> {
        let (data, graph, meta) = read_dataset_dir(p).with_context(|| format!("reading {}", p.display()))?;
        Ok(LoadedData { data, graph, meta })
    };
    let sources = if t.source_dirs.is_empty() {
        (0..t.n_sources)
            .map(|k| build_data(&cfg.graph, &cfg.process, cfg.seed, &format!("source/{k}")))
            .collect::<crate::Result<Vec<_>>>()?
    } else {
        t.source_dirs.iter().map(from_dir).collect::<Result<Vec<_>>>()?
    };
    let target = match &t.target_dir {
        Some(p) => from_dir(p)?,
        None => build_data(&cfg.graph, &cfg.process, cfg.seed, "target")?,
    };
    Ok((sources, target))
}

pub fn cmd_transfer(common: &Common, budget_sweep: bool) -> Result<Vec<crate::transfer::TransferReport>> {
    let cfg = resolve_config(common)?;
    let section = cfg.transfer.clone().context("the config has no [transfer] section")?;
    let dir = output_dir(common, &cfg, "transfer");
    prepare_dir(&dir, common.force)?;
    write_resolved(&dir, &cfg)?;
    let (sources, target) = transfer_node_sets(&cfg)?;
    let views: Vec<NodeSet<'_>> = sources.iter().map(|s| NodeSet { data: &s.data, graph: &s.graph }).collect();
    let mut model_cfg = cfg.model.clone();
    model_cfg.input_dim = target.data.n_channels();
    model_cfg.exog_dim = target.data.n_exogenous();
    let pre = train_multi_source(&model_cfg, cfg.embedding, &views, cfg.fractions(), &cfg.train, cfg.seed)?;
    let source_dir = dir.join("source");
    std::fs::create_dir_all(&source_dir)?;
    checkpoint::save(&pre.model.params, &source_dir.join(MODEL_CKPT))?;
    for (k, t) in pre.tables.iter().enumerate() {
        if let Some(t) = t {
            let d = source_dir.join(format!("table_{k}"));
            std::fs::create_dir_all(&d)?;
            save_table(&d, t)?;
        }
    }
    write_json(&source_dir.join(REPORT), &pre.report)?;

    let budgets: Vec<Budget> = if budget_sweep { Budget::PRESETS.to_vec() } else { vec![section.budget] };
    let target_view = NodeSet { data: &target.data, graph: &target.graph };
    let mut reports = Vec::new();
    for budget in budgets {
        let plan = TransferPlan { budget, ..section.plan() };
        let mut adapted = adapt(&pre, target_view, &plan, derive_seed(cfg.seed, "adapt"))?;
        let retention = source_retention_check(&pre, &adapted.model, &views, cfg.train.eval_batch_size)?;
        adapted.report.source_retention = Some(retention);
        if let Some(p) = target.process() {
            noise_floor_gate("target", &adapted.report.target, p.sigma, target.data.n_nodes(), target.data.n_channels())?;
        }
        let out = dir.join(format!("{}_{}", plan.strategy.name(), budget.name()));
        std::fs::create_dir_all(&out)?;
        if plan.strategy != crate::transfer::Strategy::ZeroShot {
            checkpoint::save(&adapted.model.params, &out.join(MODEL_CKPT))?;
            if let Some(t) = &adapted.table {
                save_table(&out, t)?;
            }
            std::fs::write(out.join(CURVES), adapted.train_report.curves_csv())?;
        }
        write_json(&out.join(REPORT), &adapted.report)?;
        println!(
            "{} / {}: target MAE {:.4}, {} trained parameters",
            plan.strategy.name(),
            budget.name(),
            adapted.report.target.mae,
            adapted.report.trained_params
        );
        reports.push(adapted.report);
    }
    println!("wrote {}", dir.display());
    Ok(reports)
}

pub fn cmd_inspect_embeddings(path: &Path, out: Option<&Path>) -> Result<()> {
    let (ckpt, spec) = if path.is_dir() {
        (path.join(TABLE_CKPT), path.join(TABLE_SPEC))
    } else {
        (path.to_path_buf(), path.with_extension("json"))
    };
    if !ckpt.exists() {
        bail!("no embedding table at {}", ckpt.display());
    }
    let table = load_table(&ckpt, &spec)?;
    match out {
        Some(p) => write_embeddings_csv(p, &table)?,
        None => write_embeddings(std::io::stdout().lock(), &table)?,
    }
    Ok(())
}
