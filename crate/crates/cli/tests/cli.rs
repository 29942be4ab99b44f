//! End-to-end falsification of the `ocr-lab` binary: artifact contracts,
//! determinism, metrics round-trips, and the exit-code surface.
//!
//! Runs use a deliberately tiny task (n=2, m=2) with short fixed-attention
//! training so the whole file finishes in seconds; quantitative claims about
//! convergence live in the core acceptance suite, not here.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ocr_core::model::{load_checkpoint, save_checkpoint, AttentionMode, ModelParams, NonFactorizedParams};
use ocr_core::task::build_task;
use ocr_core::theory::{assemble_block_matrix, frobenius_solution};
use ocr_core::training::parse_metrics_csv;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ocr-lab"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_of(args: &[&str]) -> i32 {
    bin().args(args).output().expect("binary runs").status.code().expect("exit code")
}

/// Small fixed-attention config: every CLI mode finishes in well under a
/// second on it, and its checkpoint is valid input for `compare`.
const TINY: &str = r#"
[task]
n = 2
m = 2
m_train = 1

[train]
learning_rate = 0.2
steps = 1000
eval_every = 250
attention_mode = "fixed_uniform"

[train.init]
kind = "random"
seed = 3
scale = 0.1

[train.parameterization]
kind = "non_factorized"

[train.optimizer]
kind = "gradient_descent"
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

fn read(path: PathBuf) -> String {
    fs::read_to_string(&path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

// ======================================================================
// gen
// ======================================================================

#[test]
fn gen_writes_task_dataset_and_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("a");
    run_ok(&["gen", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);

    let dataset = read(out.join("dataset.csv"));
    assert!(dataset.starts_with("block,subject_id,relation_id,answer_id\n"));
    // |train| = nm + n*m_train = 6 sequences, |test| = n*m_test = 2.
    assert_eq!(dataset.lines().count(), 1 + 8);
    let task = read(out.join("task.txt"));
    assert!(task.contains("n = 2"));
    let sha = read(out.join("dataset.sha256"));
    assert!(sha.starts_with("sha256:") && sha.trim().len() == 7 + 64);

    // Determinism: a second run produces byte-identical artifacts.
    let out2 = tmp.path().join("b");
    run_ok(&["gen", "--config", cfg.to_str().unwrap(), "--out", out2.to_str().unwrap()]);
    assert_eq!(dataset, read(out2.join("dataset.csv")));
    assert_eq!(sha, read(out2.join("dataset.sha256")));
}

// ======================================================================
// train
// ======================================================================

#[test]
fn train_artifacts_parse_and_reproduce() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("run1");
    run_ok(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);

    // Metrics round-trip into the record type, with the predicted schedule.
    let rows = parse_metrics_csv(&read(out.join("metrics.csv"))).unwrap();
    assert_eq!(
        rows.iter().map(|r| r.step).collect::<Vec<_>>(),
        vec![0, 250, 500, 750, 1000]
    );
    assert!(rows.last().unwrap().train_loss < rows[0].train_loss);

    // Manifest carries the dataset hash and the full train config.
    let manifest: toml::Value = read(out.join("manifest.toml")).parse().unwrap();
    let sha = manifest["dataset_sha256"].as_str().unwrap();
    assert!(sha.starts_with("sha256:") && sha.len() == 7 + 64);
    assert_eq!(manifest["config"]["steps"].as_integer(), Some(1000));

    // Checkpoint reloads as the same shape/mode.
    let params = load_checkpoint(&out.join("checkpoint")).unwrap();
    assert_eq!(params.d(), 11);
    assert_eq!(params.attention_mode(), AttentionMode::FixedUniform);

    // Heatmap: text dump is 2n rows x (nm + 2) columns; pixmap header matches.
    let heat = read(out.join("reduced_ov.csv"));
    assert_eq!(heat.lines().count(), 4);
    assert!(heat.lines().all(|l| l.split(',').count() == 6));
    let ppm = fs::read(out.join("reduced_ov.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n6 4\n255\n"));
    assert_eq!(ppm.len(), "P6\n6 4\n255\n".len() + 3 * 6 * 4);

    // Byte-identical reproduction with the same config and seed.
    let out2 = tmp.path().join("run2");
    run_ok(&["train", "--config", cfg.to_str().unwrap(), "--out", out2.to_str().unwrap()]);
    for file in ["metrics.csv", "manifest.toml", "reduced_ov.csv"] {
        assert_eq!(read(out.join(file)), read(out2.join(file)), "{file} differs");
    }
    assert_eq!(
        fs::read(out.join("reduced_ov.ppm")).unwrap(),
        fs::read(out2.join("reduced_ov.ppm")).unwrap()
    );
    assert_eq!(
        fs::read(out.join("checkpoint/w_ov.txt")).unwrap(),
        fs::read(out2.join("checkpoint/w_ov.txt")).unwrap()
    );

    // A different seed changes the trajectory.
    let out3 = tmp.path().join("run3");
    run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out3.to_str().unwrap(),
        "--seed",
        "11",
    ]);
    assert_ne!(read(out.join("metrics.csv")), read(out3.join("metrics.csv")));
}

// ======================================================================
// theory
// ======================================================================

#[test]
fn theory_report_covers_the_configured_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[theory]\nn = [2, 3]\nm_train = [1, 1]\nm_test = [1, 2]\n",
    );
    let out = tmp.path().join("t");
    run_ok(&["theory", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let text = read(out.join("theory_report.toml"));
    assert_eq!(text.matches("[[cell]]").count(), 4);
    let parsed: toml::Value = text.parse().unwrap();
    let cells = parsed["cell"].as_array().unwrap();
    assert_eq!(cells[0]["n"].as_integer(), Some(2));
    assert!(cells[0]["svd_max_deviation"].as_float().unwrap() < 1e-8);
}

// ======================================================================
// sweep-dh
// ======================================================================

#[test]
fn sweep_dh_aggregates_one_row_per_head_dimension() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{TINY}\n[sweep_dh]\nvalues = [2, 3]\n"));
    let out = tmp.path().join("s");
    run_ok(&["sweep-dh", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);

    let agg = read(out.join("sweep_dh.csv"));
    let lines: Vec<&str> = agg.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("d_h,step,"));
    assert!(lines[1].starts_with("2,1000,") && lines[2].starts_with("3,1000,"));

    // Per-cell tables are full metrics files, parseable on their own.
    for d_h in [2, 3] {
        let rows = parse_metrics_csv(&read(out.join(format!("sweep_dh/dh_{d_h}.csv")))).unwrap();
        assert_eq!(rows.len(), 5);
    }
}

// ======================================================================
// sweep-ratio
// ======================================================================

#[test]
fn sweep_ratio_tabulates_margin_against_bound() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &format!("{TINY}\n[sweep_ratio]\ncells = [[1, 1], [1, 2]]\n"),
    );
    let out = tmp.path().join("r");
    run_ok(&["sweep-ratio", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);

    let agg = read(out.join("sweep_ratio.csv"));
    let lines: Vec<&str> = agg.lines().collect();
    assert_eq!(lines[0], "m_train,m_test,min_test_margin,theory_bound");
    assert_eq!(lines.len(), 3);
    let parse_row = |line: &str| -> Vec<f64> {
        line.split(',').map(|f| f.parse::<f64>().unwrap()).collect()
    };
    let row11 = parse_row(lines[1]);
    assert_eq!((row11[0], row11[1]), (1.0, 1.0));
    assert!(row11[2].is_finite());
    assert_eq!(row11[3], 1.0);
    let row12 = parse_row(lines[2]);
    assert_eq!(row12[3], (0.5f64).sqrt());
    assert!(out.join("sweep_ratio/cell_1_2.csv").exists());
}

// ======================================================================
// compare
// ======================================================================

#[test]
fn compare_scores_a_trained_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("c");
    run_ok(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    // No [compare] section: the checkpoint defaults to <out>/checkpoint.
    run_ok(&["compare", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let report: toml::Value = read(out.join("compare.toml")).parse().unwrap();
    assert_eq!(report["target"].as_str(), Some("frobenius"));
    assert_eq!(report["parameterization"].as_str(), Some("non_factorized"));
    let sim = report["direction_similarity"].as_float().unwrap();
    assert!(sim > 0.0 && sim <= 1.0 + 1e-12, "similarity {sim}");
    assert_eq!(report["test_margin_bound"].as_float(), Some(1.0));
}

#[test]
fn compare_on_the_closed_form_itself_scores_one() {
    // Prediction: a checkpoint whose combined matrix IS the Frobenius
    // solution must score direction similarity 1 and the exact margins.
    let tmp = tempfile::tempdir().unwrap();
    let spec = build_task(2, 2, 1).unwrap();
    let w = assemble_block_matrix(&frobenius_solution(2, 1, 1).unwrap(), 2, 1, 1).unwrap();
    let mut params = NonFactorizedParams::zeros(spec.vocab_size(), AttentionMode::FixedUniform);
    let a0 = spec.answer_range().start;
    for row in 0..w.matrix().rows() {
        for col in 0..w.matrix().cols() {
            // Reduced columns coincide with vocab ids for subjects/relations.
            params.w_ov.set(a0 + row, col, w.matrix().get(row, col));
        }
    }
    let ckpt = tmp.path().join("closed_form_checkpoint");
    save_checkpoint(&ModelParams::NonFactorized(params), &ckpt).unwrap();

    let cfg = write_config(
        tmp.path(),
        &format!("{TINY}\n[compare]\ncheckpoint = \"{}\"\n", ckpt.display()),
    );
    let out = tmp.path().join("c2");
    run_ok(&["compare", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let report: toml::Value = read(out.join("compare.toml")).parse().unwrap();
    let sim = report["direction_similarity"].as_float().unwrap();
    assert!((sim - 1.0).abs() < 1e-9, "similarity {sim}");
    // At (2,1,1) the Frobenius solution sits exactly at chance on the
    // held-out implications.
    let margin = report["min_implication_margin"].as_float().unwrap();
    assert!(margin.abs() < 1e-9, "implication margin {margin}");
}

// ======================================================================
// exit codes
// ======================================================================

#[test]
fn exit_codes_obey_the_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let out_s = out.to_str().unwrap();

    // Missing --config is a config error.
    assert_eq!(exit_of(&["train", "--out", out_s]), 1);

    // Unreadable config file.
    assert_eq!(exit_of(&["train", "--config", "/nonexistent.toml", "--out", out_s]), 1);

    // Malformed and unknown-key documents.
    let bad = write_config(tmp.path(), "not toml ===");
    assert_eq!(exit_of(&["train", "--config", bad.to_str().unwrap(), "--out", out_s]), 1);
    let unknown = tmp.path().join("unknown.toml");
    fs::write(&unknown, "banana = 1\n").unwrap();
    assert_eq!(exit_of(&["gen", "--config", unknown.to_str().unwrap(), "--out", out_s]), 1);

    // Missing output directory everywhere (no --out, no output_dir).
    let tiny = write_config(tmp.path(), TINY);
    assert_eq!(exit_of(&["gen", "--config", tiny.to_str().unwrap()]), 1);

    // Divergence: an absurd step size under trainable attention (where the
    // attention-times-value interaction compounds) explodes the loss. Under
    // fixed attention the problem is benign enough that even huge steps can
    // land on a perfect fit, so that is not a reliable trigger.
    let diverge = tmp.path().join("diverge.toml");
    fs::write(
        &diverge,
        TINY.replace("learning_rate = 0.2", "learning_rate = 1e5")
            .replace("attention_mode = \"fixed_uniform\"", "attention_mode = \"trainable\""),
    )
    .unwrap();
    assert_eq!(exit_of(&["train", "--config", diverge.to_str().unwrap(), "--out", out_s]), 2);

    // Compare against a checkpoint that does not exist.
    let no_ckpt = tmp.path().join("no_ckpt.toml");
    fs::write(
        &no_ckpt,
        format!("{TINY}\n[compare]\ncheckpoint = \"{}/absent\"\n", tmp.path().display()),
    )
    .unwrap();
    assert_eq!(exit_of(&["compare", "--config", no_ckpt.to_str().unwrap(), "--out", out_s]), 1);

    // Unknown subcommands and flags are usage = config errors.
    assert_eq!(exit_of(&["frobnicate"]), 1);

    // --help succeeds.
    assert_eq!(exit_of(&["--help"]), 0);
}
