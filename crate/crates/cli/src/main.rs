use std::fs;
use std::path::PathBuf;
use std::process::exit;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use ocr_core::error::{Error, Result};
use ocr_lab::{
    apply_seed, exit_code, parse_config, resolve_out, run_compare, run_gen, run_sweep_dh,
    run_sweep_ratio, run_theory, run_train,
};

#[derive(Parser)]
#[command(
    name = "ocr-lab",
    version,
    about = "Runs out-of-context-reasoning experiments: dataset export, training, \
             closed-form theory grids, sweeps, and checkpoint comparison"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration file (structured text; empty file = headline defaults).
    #[arg(long, global = true, value_name = "file")]
    config: Option<PathBuf>,
    /// Output directory for artifacts; overrides the config's output_dir.
    #[arg(long, global = true, value_name = "dir")]
    out: Option<PathBuf>,
    /// Seed override; beats the config seed and the train init's own seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the task description and dataset table.
    Gen,
    /// Train one model; write metrics, manifest, checkpoint, and heatmap.
    Train,
    /// Write the closed-form theory report over the configured grid.
    Theory,
    /// Train one factorized model per head dimension.
    SweepDh,
    /// Train one model per (m_train, m_test) cell and tabulate test margins.
    SweepRatio,
    /// Score a fixed-attention checkpoint against the closed-form solution.
    Compare,
}

fn run(cli: Cli) -> Result<()> {
    let config_path = cli
        .config
        .ok_or_else(|| Error::InvalidConfig("--config <file> is required".into()))?;
    let text = fs::read_to_string(&config_path)?;
    let mut cfg = parse_config(&text, &config_path)?;
    apply_seed(&mut cfg, cli.seed);
    let out = resolve_out(cli.out, &cfg)?;
    match cli.command {
        Command::Gen => run_gen(&cfg, &out),
        Command::Train => run_train(&cfg, &out),
        Command::Theory => run_theory(&cfg, &out),
        Command::SweepDh => run_sweep_dh(&cfg, &out),
        Command::SweepRatio => run_sweep_ratio(&cfg, &out),
        Command::Compare => run_compare(&cfg, &out),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            exit(0);
        }
        // Usage mistakes are configuration errors under this tool's contract.
        Err(e) => {
            eprint!("{e}");
            exit(1);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        exit(exit_code(&e));
    }
}
