//! Experiment runner behind the `ocr-lab` binary.
//!
//! Everything here is deterministic plumbing around `ocr-core`: a single
//! structured-text configuration document, six operations (dataset export,
//! training, theory grid, two sweeps, checkpoint-vs-theory comparison), and
//! the artifact writers. Re-running any operation with the same
//! configuration and seed reproduces every text artifact byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use ocr_core::error::{Error, Result};
use ocr_core::model::{
    load_checkpoint, reduced_ov, save_checkpoint, AttentionMode, ModelParams,
};
use ocr_core::numerics::DenseMatrix;
use ocr_core::task::{build_dataset, build_task};
use ocr_core::theory::{
    assemble_block_matrix, direction_similarity, frobenius_solution, normalize_to_unit_margin,
    nuclear_solution, test_margins, theory_report,
};
use ocr_core::training::{
    run_manifest, train, Init, Optimizer, Parameterization, TrainConfig, METRICS_HEADER,
};
use serde::{Deserialize, Serialize};

// ======================================================================
// Configuration document.
// ======================================================================

/// Task shape: n partitions, m subjects per partition, of which m_train are
/// in the train split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub n: usize,
    pub m: usize,
    pub m_train: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        // The headline task: 20 partitions x 4 subjects, one train subject.
        Self { n: 20, m: 4, m_train: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepDhConfig {
    pub values: Vec<usize>,
}

impl Default for SweepDhConfig {
    fn default() -> Self {
        Self { values: vec![3, 4, 8, 16, 32, 128] }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepRatioConfig {
    /// (m_train, m_test) grid cells; the task's n is shared across cells.
    pub cells: Vec<[usize; 2]>,
}

impl Default for SweepRatioConfig {
    fn default() -> Self {
        let mut cells = Vec::new();
        for m_train in 1..=3 {
            for m_test in 1..=3 {
                cells.push([m_train, m_test]);
            }
        }
        Self { cells }
    }
}

/// Inclusive [min, max] ranges for the theory grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub n: [usize; 2],
    pub m_train: [usize; 2],
    pub m_test: [usize; 2],
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self { n: [2, 8], m_train: [1, 4], m_test: [1, 4] }
    }
}

impl TheoryConfig {
    pub fn cells(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for n in self.n[0]..=self.n[1] {
            for m_train in self.m_train[0]..=self.m_train[1] {
                for m_test in self.m_test[0]..=self.m_test[1] {
                    out.push((n, m_train, m_test));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    /// Checkpoint directory; defaults to `<out>/checkpoint` from a prior
    /// train run into the same output directory.
    pub checkpoint: Option<PathBuf>,
}

/// The whole experiment document. Every field has a default, and the
/// defaults reproduce the headline run: an empty file is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Overrides the random-init seed in `train.init` when set; the
    /// command-line `--seed` overrides this in turn.
    pub seed: Option<u64>,
    /// Default output directory; the command-line `--out` overrides it.
    pub output_dir: Option<PathBuf>,
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub sweep_dh: SweepDhConfig,
    pub sweep_ratio: SweepRatioConfig,
    pub theory: TheoryConfig,
    pub compare: CompareConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: None,
            output_dir: None,
            task: TaskConfig::default(),
            train: default_train_config(),
            sweep_dh: SweepDhConfig::default(),
            sweep_ratio: SweepRatioConfig::default(),
            theory: TheoryConfig::default(),
            compare: CompareConfig::default(),
        }
    }
}

/// The headline training recipe: factorized d_h = 128, trainable attention,
/// adaptive optimizer at lr 5e-4 for 2e4 full-batch steps.
pub fn default_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 5e-4,
        steps: 20_000,
        init: Init::Random { seed: 0, scale: 1e-3 },
        parameterization: Parameterization::Factorized { d_h: 128 },
        attention_mode: AttentionMode::Trainable,
        optimizer: Optimizer::adamw(),
        eval_every: 500,
    }
}

/// Parses the configuration document, reporting the path on failure.
pub fn parse_config(text: &str, origin: &Path) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| Error::Parse(format!("{}: {e}", origin.display())))
}

/// Applies the seed precedence: `--seed` beats `[config] seed` beats the
/// seed written inside `train.init`. Symmetric init has no seed to set.
pub fn apply_seed(cfg: &mut ExperimentConfig, cli_seed: Option<u64>) {
    if let Some(s) = cli_seed.or(cfg.seed) {
        if let Init::Random { seed, .. } = &mut cfg.train.init {
            *seed = s;
        }
    }
}

/// `--out` beats `output_dir`; having neither is a configuration error.
pub fn resolve_out(cli_out: Option<PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf> {
    cli_out.or_else(|| cfg.output_dir.clone()).ok_or_else(|| {
        Error::InvalidConfig("no output directory: pass --out or set output_dir".into())
    })
}

/// Maps an error to the process exit code: 2 for runtime numerical failures
/// (divergence, infeasibility, non-convergence), 1 for everything else
/// (configuration, parsing, I/O, shape errors).
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. }
        | Error::Infeasible(_)
        | Error::NoConverge(_)
        | Error::NonFinite(_)
        | Error::RankExceedsHead { .. } => 2,
        _ => 1,
    }
}

// ======================================================================
// Heatmap export.
// ======================================================================

/// Symmetric diverging color map centered at 0 with range +/- maxabs:
/// saturated blue at -maxabs through white at 0 to saturated red at +maxabs.
pub fn diverging_rgb(v: f64, maxabs: f64) -> [u8; 3] {
    let t = if maxabs > 0.0 { (v / maxabs).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |x: f64| (255.0 * (1.0 - x.abs())).round() as u8;
    if t < 0.0 {
        [fade(t), fade(t), 255]
    } else {
        [255, fade(t), fade(t)]
    }
}

/// Writes `<stem>.csv` (the bit-exact comma-separated dump — the contract)
/// and `<stem>.ppm` (a best-effort binary portable pixmap, one pixel per
/// entry) into `dir`.
pub fn export_heatmap(matrix: &DenseMatrix, dir: &Path, stem: &str) -> Result<()> {
    if !matrix.all_finite() {
        return Err(Error::NonFinite("heatmap input"));
    }
    let mut csv = String::new();
    for r in 0..matrix.rows() {
        let row: Vec<String> = matrix.row(r).iter().map(|v| format!("{v}")).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    fs::write(dir.join(format!("{stem}.csv")), csv)?;

    let maxabs = matrix.max_abs();
    let mut ppm = format!("P6\n{} {}\n255\n", matrix.cols(), matrix.rows()).into_bytes();
    for r in 0..matrix.rows() {
        for &v in matrix.row(r) {
            ppm.extend_from_slice(&diverging_rgb(v, maxabs));
        }
    }
    fs::write(dir.join(format!("{stem}.ppm")), ppm)?;
    Ok(())
}

// ======================================================================
// Operations.
// ======================================================================

fn format_metrics_row(r: &ocr_core::training::MetricsRow) -> String {
    format!(
        "{},{},{},{},{},{}",
        r.step, r.train_loss, r.test_loss, r.min_test_margin, r.mean_rank_test, r.symmetry_residual
    )
}

fn ratio_bound(m_train: usize, m_test: usize) -> f64 {
    if m_test >= m_train {
        (m_train as f64 / m_test as f64).sqrt()
    } else {
        1.0
    }
}

/// `gen`: materializes the task description and the dataset table.
pub fn run_gen(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let spec = build_task(cfg.task.n, cfg.task.m, cfg.task.m_train)?;
    let data = build_dataset(&spec);
    fs::create_dir_all(out)?;
    fs::write(out.join("task.txt"), spec.to_text())?;
    fs::write(out.join("dataset.csv"), data.to_text())?;
    fs::write(out.join("dataset.sha256"), format!("sha256:{}\n", data.sha256_hex()))?;
    println!(
        "gen: {} records ({} train, {} test) -> {}",
        data.records().len(),
        data.train().len(),
        data.test().len(),
        out.display()
    );
    Ok(())
}

/// `train`: one full training run with metrics table, run manifest, final
/// checkpoint, and the reduced output-value heatmap.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let spec = build_task(cfg.task.n, cfg.task.m, cfg.task.m_train)?;
    let data = build_dataset(&spec);
    let log = train(&cfg.train, &spec, &data)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.csv"), log.metrics_csv())?;
    fs::write(out.join("manifest.toml"), run_manifest(&cfg.train, &data, &spec))?;
    save_checkpoint(&log.final_params, &out.join("checkpoint"))?;
    let reduced = reduced_ov(&log.final_params, &spec)?;
    export_heatmap(reduced.matrix(), out, "reduced_ov")?;
    let last = log.rows.last().expect("training always records a final row");
    println!(
        "train: step {} train_loss {:e} test_loss {:e} mean_rank {} -> {}",
        last.step, last.train_loss, last.test_loss, last.mean_rank_test, out.display()
    );
    Ok(())
}

/// `theory`: the closed-form grid report.
pub fn run_theory(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let cells = cfg.theory.cells();
    let report = theory_report(&cells)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("theory_report.toml"), report)?;
    println!("theory: {} cells -> {}", cells.len(), out.join("theory_report.toml").display());
    Ok(())
}

/// `sweep-dh`: trains one factorized model per head dimension, keeping the
/// per-cell metrics tables and an aggregated one-row-per-cell summary.
pub fn run_sweep_dh(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let spec = build_task(cfg.task.n, cfg.task.m, cfg.task.m_train)?;
    let data = build_dataset(&spec);
    let cell_dir = out.join("sweep_dh");
    fs::create_dir_all(&cell_dir)?;
    let mut aggregate = format!("d_h,{METRICS_HEADER}\n");
    for &d_h in &cfg.sweep_dh.values {
        let mut train_cfg = cfg.train.clone();
        train_cfg.parameterization = Parameterization::Factorized { d_h };
        let log = train(&train_cfg, &spec, &data)?;
        fs::write(cell_dir.join(format!("dh_{d_h}.csv")), log.metrics_csv())?;
        let last = log.rows.last().expect("training always records a final row");
        aggregate.push_str(&format!("{d_h},{}\n", format_metrics_row(last)));
        println!("sweep-dh: d_h {} test_loss {:e}", d_h, last.test_loss);
    }
    fs::write(out.join("sweep_dh.csv"), aggregate)?;
    Ok(())
}

/// `sweep-ratio`: trains one model per (m_train, m_test) cell, normalizes
/// the reduced matrix to unit train margin, and tabulates its minimum test
/// margin next to the min(sqrt(m_train/m_test), 1) prediction.
pub fn run_sweep_ratio(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let cell_dir = out.join("sweep_ratio");
    fs::create_dir_all(&cell_dir)?;
    let mut aggregate = String::from("m_train,m_test,min_test_margin,theory_bound\n");
    for &[m_train, m_test] in &cfg.sweep_ratio.cells {
        let spec = build_task(cfg.task.n, m_train + m_test, m_train)?;
        let data = build_dataset(&spec);
        let log = train(&cfg.train, &spec, &data)?;
        fs::write(
            cell_dir.join(format!("cell_{m_train}_{m_test}.csv")),
            log.metrics_csv(),
        )?;
        let reduced = reduced_ov(&log.final_params, &spec)?;
        let normalized = normalize_to_unit_margin(reduced, &spec)?;
        let measured = test_margins(&normalized, &spec)?.min_over_answers;
        let bound = ratio_bound(m_train, m_test);
        aggregate.push_str(&format!("{m_train},{m_test},{measured},{bound}\n"));
        println!("sweep-ratio: ({m_train},{m_test}) margin {measured:e} bound {bound:e}");
    }
    fs::write(out.join("sweep_ratio.csv"), aggregate)?;
    Ok(())
}

/// Everything `compare` reports, serialized to `compare.toml`.
#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub checkpoint: String,
    pub parameterization: String,
    pub target: String,
    pub direction_similarity: f64,
    pub min_test_margin: f64,
    pub min_implication_margin: f64,
    pub test_margin_bound: f64,
}

/// `compare`: loads a fixed-attention checkpoint, normalizes its reduced
/// matrix to unit train margin, and scores it against the matching
/// closed-form solution (nuclear for factorized, Frobenius otherwise).
pub fn run_compare(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let dir = cfg
        .compare
        .checkpoint
        .clone()
        .unwrap_or_else(|| out.join("checkpoint"));
    let params = load_checkpoint(&dir)?;
    if params.attention_mode() != AttentionMode::FixedUniform {
        return Err(Error::InvalidConfig(
            "compare requires a fixed-attention checkpoint; this one has trainable attention"
                .into(),
        ));
    }
    let spec = build_task(cfg.task.n, cfg.task.m, cfg.task.m_train)?;
    let reduced = reduced_ov(&params, &spec)?;
    let normalized = normalize_to_unit_margin(reduced, &spec)?;
    let (n, m_train, m_test) = (spec.n(), spec.m_train(), spec.m_test());
    let (parameterization, target_name, coeffs) = match &params {
        ModelParams::Factorized(_) => ("factorized", "nuclear", nuclear_solution(n, m_train, m_test)?),
        ModelParams::NonFactorized(_) => {
            ("non_factorized", "frobenius", frobenius_solution(n, m_train, m_test)?)
        }
    };
    let target = assemble_block_matrix(&coeffs, n, m_train, m_test)?;
    let margins = test_margins(&normalized, &spec)?;
    let report = CompareReport {
        checkpoint: dir.display().to_string(),
        parameterization: parameterization.into(),
        target: target_name.into(),
        direction_similarity: direction_similarity(&normalized, &target)?,
        min_test_margin: margins.min_over_answers,
        min_implication_margin: margins.min_over_implications,
        test_margin_bound: ratio_bound(m_train, m_test),
    };
    fs::create_dir_all(out)?;
    let text = toml::to_string(&report)
        .map_err(|e| Error::Parse(format!("serializing compare report: {e}")))?;
    fs::write(out.join("compare.toml"), text)?;
    println!(
        "compare: similarity {:.6} to {} (test margin {:e}, bound {:e})",
        report.direction_similarity, target_name, report.min_test_margin, report.test_margin_bound
    );
    Ok(())
}

// ======================================================================
// Unit tests.
// ======================================================================
