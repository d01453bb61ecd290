//! End-to-end checks of the command-line runner.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use glocal::cli::{cmd_sweep, cmd_train, cmd_transfer, Common, RunReport, MODEL_CKPT, REPORT, RESOLVED_CONFIG};
use glocal::io::{read_embeddings_csv, read_f32_file, DatasetMeta, META_FILE, VALUES_FILE};
use glocal::transfer::TransferReport;
use tempfile::TempDir;

const SMALL: &str = r#"
seed = 5

[graph]
n_communities = 3
community_size = 4

[process]
kind = "synthetic"
process = "gpvar-l"
steps = 400
burn_in = 20

[model]
hidden = 8

[train]
batch_size = 8
max_epochs = 2
batches_per_epoch = 3
lr = 0.01
lr_halving_period = 0
patience = 2
val_max_windows = 30
"#;

const GLOBAL: &str = "gpvar-l:tts_iso_global";

const TRANSFER: &str = r#"
[transfer]
strategy = "embedding_only"
budget = "one_week"
n_sources = 2

[transfer.train]
batch_size = 8
max_epochs = 2
batches_per_epoch = 2
lr = 0.001
lr_halving_period = 0
patience = 2
"#;

fn glocal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glocal"))
        .args(args)
        .env_remove("RUST_BACKTRACE")
        .output()
        .expect("the binary runs")
}

fn expect_success(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn common(config: Option<PathBuf>, preset: Option<&str>, out: PathBuf) -> Common {
    Common { config, preset: preset.map(str::to_string), seed: None, out: Some(out), force: false }
}

fn run_report(dir: &Path) -> RunReport {
    serde_json::from_str(&std::fs::read_to_string(dir.join(REPORT)).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_writes_the_reference_sized_dataset() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("gpvar-l");
    expect_success(&glocal(&["generate", "--preset", "gpvar-l:tts_iso_global", "--out", s(&out)]));
    let values = read_f32_file(&out.join(VALUES_FILE), (30_000, 120, 1)).unwrap();
    assert!(values.iter().all(|v| v.is_finite()));
    assert_eq!(std::fs::metadata(out.join(VALUES_FILE)).unwrap().len(), 30_000 * 120 * 4);
    let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(out.join(META_FILE)).unwrap()).unwrap();
    assert_eq!((meta.n_steps, meta.n_nodes, meta.n_channels), (30_000, 120, 1));
    assert!(out.join(RESOLVED_CONFIG).exists());

    // A second run into the same directory needs --force.
    let again = glocal(&["generate", "--preset", "gpvar-l:tts_iso_global", "--out", s(&out)]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
}

#[test]
fn generate_respects_length_flags_and_is_byte_identical_under_seed() {
    let tmp = TempDir::new().unwrap();
    let run = |name: &str, seed: &str| {
        let out = tmp.path().join(name);
        let args = ["generate", "--preset", "gpvar-l:tts_iso_global", "--steps", "100", "--burn-in", "0"];
        expect_success(&glocal(&[&args[..], &["--seed", seed, "--out", s(&out)]].concat()));
        std::fs::read(out.join(VALUES_FILE)).unwrap()
    };
    let a = run("a", "9");
    assert_eq!(a.len(), 100 * 120 * 4);
    assert_eq!(a, run("b", "9"));
    assert_ne!(a, run("c", "10"));
}

#[test]
fn zero_epochs_evaluates_the_initial_model() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let out = tmp.path().join("run");
    expect_success(&glocal(&["train", "--preset", GLOBAL, "--config", s(&cfg), "--max-epochs", "0", "--out", s(&out)]));
    let report = run_report(&out);
    assert_eq!(report.train.steps, 0);
    assert_eq!(report.train.epochs.len(), 1);
    assert_eq!(report.train.best_epoch, 0);
    assert_eq!(report.train.best_val_mae, report.train.epochs[0].val_mae);
    assert!(out.join(MODEL_CKPT).exists());

    // Evaluating the saved run reproduces the recorded test score.
    let eval = glocal(&["evaluate", "--run", s(&out)]);
    expect_success(&eval);
    let metrics: glocal::trainer::Metrics = serde_json::from_slice(&eval.stdout).unwrap();
    assert!((metrics.mae - report.test.mae).abs() <= 1e-12);
}

#[test]
fn non_finite_loss_exits_with_a_diagnostic() {
    let tmp = TempDir::new().unwrap();
    let text = SMALL.replace("lr = 0.01", "lr = 1e30").replace("max_epochs = 2", "max_epochs = 5");
    let cfg = write_config(tmp.path(), "diverge.toml", &text);
    let out = glocal(&["train", "--preset", GLOBAL, "--config", s(&cfg), "--out", s(&tmp.path().join("run"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn validation_errors_are_listed_together() {
    let tmp = TempDir::new().unwrap();
    let text = SMALL.replace("hidden = 8", "hidden = 0\nwindow = 0");
    let cfg = write_config(tmp.path(), "bad.toml", &text);
    let out = glocal(&["train", "--preset", GLOBAL, "--config", s(&cfg), "--out", s(&tmp.path().join("run"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("hidden") && err.contains("window"), "{err}");
}

#[test]
fn resolved_config_alone_reproduces_a_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let first = cmd_train(&common(Some(cfg), Some("gpvar-l:tts_iso_emb"), tmp.path().join("first")), None).unwrap();
    let second = cmd_train(&common(Some(first.join(RESOLVED_CONFIG)), None, tmp.path().join("second")), None).unwrap();
    let (a, b) = (run_report(&first), run_report(&second));
    assert_eq!(a.train.val_curve(), b.train.val_curve());
    assert_eq!(a.test, b.test);
    assert_eq!(std::fs::read(first.join(MODEL_CKPT)).unwrap(), std::fs::read(second.join(MODEL_CKPT)).unwrap());
}

#[test]
fn one_cell_sweep_matches_train() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let train_dir = cmd_train(&common(Some(cfg.clone()), Some(GLOBAL), tmp.path().join("train")), None).unwrap();
    let cells = cmd_sweep(&common(Some(cfg), Some(GLOBAL), tmp.path().join("sweep")), &[6], &[8]).unwrap();
    assert_eq!(cells.len(), 1);
    let swept = cells[0].test_mae.unwrap();
    assert!((swept - run_report(&train_dir).test.mae).abs() <= 1e-9);
    let csv = std::fs::read_to_string(tmp.path().join("sweep/sweep.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "window,d_h=8");
}

#[test]
fn sweep_records_failed_cells_and_continues() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    // W = 0 is invalid; the other cell still trains.
    let cells = cmd_sweep(&common(Some(cfg), Some(GLOBAL), tmp.path().join("sweep")), &[0, 2], &[8]).unwrap();
    assert!(cells[0].test_mae.is_none() && cells[0].error.is_some());
    assert!(cells[1].test_mae.is_some());
    let csv = std::fs::read_to_string(tmp.path().join("sweep/sweep.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().ends_with("NaN"));
}

fn transfer_config(dir: &Path, strategy: &str) -> PathBuf {
    let text = format!("{SMALL}{}", TRANSFER.replace("embedding_only", strategy));
    write_config(dir, &format!("{strategy}.toml"), &text)
}

#[test]
fn zero_shot_transfer_writes_no_parameters() {
    let tmp = TempDir::new().unwrap();
    let cfg = transfer_config(tmp.path(), "zero_shot");
    let out = tmp.path().join("transfer");
    let reports = cmd_transfer(&common(Some(cfg), Some("gpvar-l:tts_iso_emb"), out.clone()), false).unwrap();
    assert_eq!(reports[0].trained_params, 0);
    let cell = out.join("zero_shot_one_week");
    assert!(cell.join(REPORT).exists());
    assert!(!cell.join(MODEL_CKPT).exists());
}

#[test]
fn embedding_only_transfer_counts_table_parameters_and_sweeps_budgets() {
    let tmp = TempDir::new().unwrap();
    let cfg = transfer_config(tmp.path(), "embedding_only");
    let out = tmp.path().join("transfer");
    let reports = cmd_transfer(&common(Some(cfg), Some("gpvar-l:tts_iso_emb"), out.clone()), true).unwrap();
    assert_eq!(reports.len(), 4);
    let n_target = 12;
    for r in &reports {
        assert_eq!(r.trained_params, n_target * 8);
        assert!(r.source_retention.as_ref().unwrap().iter().all(|d| d.delta == 0.0));
    }
    for name in ["one_day", "three_day", "one_week", "two_week"] {
        let text = std::fs::read_to_string(out.join(format!("embedding_only_{name}")).join(REPORT)).unwrap();
        let r: TransferReport = serde_json::from_str(&text).unwrap();
        assert_eq!(r.budget.name(), name);
    }
}

#[test]
fn inspect_dumps_plain_and_clustered_tables() {
    let tmp = TempDir::new().unwrap();
    let reference_graph = "[process]\nkind = \"synthetic\"\nsteps = 200\nburn_in = 0\n";
    let plain = write_config(tmp.path(), "plain.toml", reference_graph);
    let run = tmp.path().join("plain");
    expect_success(&glocal(&[
        "train", "--preset", "gpvar-l:tts_iso_emb", "--config", s(&plain), "--max-epochs", "0", "--out", s(&run),
    ]));
    let csv = tmp.path().join("plain.csv");
    expect_success(&glocal(&["inspect-embeddings", "--checkpoint", s(&run), "--out", s(&csv)]));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 121);
    assert!(lines.iter().all(|l| l.split(',').count() == 9));
    let dump = read_embeddings_csv(&csv).unwrap();
    assert_eq!(dump.values.dim(), (120, 8));
    assert!(dump.clusters.is_none());

    let clustered = write_config(
        tmp.path(),
        "clustered.toml",
        &format!("{reference_graph}[embedding]\nmode = \"clustered\"\nn_clusters = 5\n"),
    );
    let run = tmp.path().join("clustered");
    expect_success(&glocal(&[
        "train", "--preset", "gpvar-l:tts_iso_emb", "--config", s(&clustered), "--max-epochs", "0", "--out", s(&run),
    ]));
    let out = glocal(&["inspect-embeddings", "--checkpoint", s(&run)]);
    expect_success(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.ends_with(",cluster_argmax"));
    for line in text.lines().skip(1) {
        let k: usize = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(k < 5);
    }
}

#[test]
fn presets_are_listed() {
    let out = glocal(&["presets"]);
    expect_success(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    for p in ["fcrnn", "local_rnn", "rnn_global", "tts_iso_emb", "tas_aniso_global"] {
        assert!(text.lines().any(|l| l == p), "{p} missing");
    }
}
