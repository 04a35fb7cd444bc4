use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use deltalab::error::Result;
use deltalab::harness::config::{BoundSpec, PatternSpec};
use deltalab::harness::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "deltalab", version, about = "Sparse-prefill attention with delta correction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Zero all timings.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured method and write the report.
    Run(Common),
    /// Time each method on head 0.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Remainder/bound analysis for each pattern plus an oracle top-k of the
    /// same key budget.
    Bound(Common),
    /// Cartesian product over stride and window lists.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
        gammas: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "32,64,128")]
        windows: Vec<usize>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.deterministic |= common.deterministic;
    Ok(cfg)
}

fn with_matched_top_k(mut cfg: ExperimentConfig) -> ExperimentConfig {
    let budgets: Vec<usize> = cfg
        .patterns
        .iter()
        .filter_map(|p| match p {
            PatternSpec::SinkWindow { sink, window } => Some(sink + window),
            _ => None,
        })
        .collect();
    for k in budgets {
        let top_k = PatternSpec::OracleTopK { k };
        if !cfg.patterns.contains(&top_k) {
            cfg.patterns.push(top_k);
        }
    }
    cfg.methods.clear();
    cfg.bound.get_or_insert_with(BoundSpec::default);
    cfg
}

fn report_written(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(common) => {
            let cfg = load(&common)?;
            let report = harness::run_experiment(&cfg)?;
            report_written(&harness::emit_report(&report, &common.out_dir, &cfg.outputs)?);
        }
        Command::Bench { common, repeats } => {
            let cfg = load(&common)?;
            let table = harness::bench(&cfg, repeats)?;
            for r in &table.rows {
                println!(
                    "{:<40} median {:>10.3} ms  entries {:>12}  ratio {:.3}",
                    r.method, r.median_ms, r.entries, r.entry_ratio_vs_dense
                );
            }
            report_written(&harness::emit_bench(&table, &common.out_dir, &cfg.outputs)?);
        }
        Command::Bound(common) => {
            let cfg = with_matched_top_k(load(&common)?);
            let report = harness::run_experiment(&cfg)?;
            report_written(&harness::emit_report(&report, &common.out_dir, &cfg.outputs)?);
        }
        Command::Sweep {
            common,
            gammas,
            windows,
        } => {
            let cfg = load(&common)?;
            let report = harness::sweep(&cfg, &gammas, &windows)?;
            report_written(&harness::emit_sweep(&report, &common.out_dir, &cfg.outputs)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
