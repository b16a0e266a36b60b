use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use atmil::autodiff::{op_gradcheck_suite, GradCheckOptions};
use atmil::auxweight::Strategy;
use atmil::data::{Dataset, Split};
use atmil::harness::{
    evaluate, export_attention, load_data, run_experiment_ladder, train, write_evaluation,
    LadderConfig, TrainConfig, TrainOptions,
};
use atmil::model::{load_checkpoint, network_gradcheck, EncoderConfig};
use atmil::{Error, Result};
use clap::{Args, Parser, Subcommand};

/// Attention MIL with adaptive auxiliary-task weighting.
#[derive(Parser)]
#[command(name = "atmil", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML training config; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed: weight init and bag order (`gen-data`: the data seed).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Number of training bags to generate.
    #[arg(long)]
    train_bags: Option<usize>,
    /// Read bags from a `gen-data` directory instead of generating them.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a bag dataset and write it with its manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train one model; writes checkpoints, CSV logs and test metrics.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: PathBuf,
        /// Use the full-size encoder instead of the desk preset.
        #[arg(long)]
        full: bool,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on one split; writes metrics.json and confusion.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Write per-instance attention weights of a checkpoint as CSV.
    AttnExport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Writes `attention.csv` here; stdout otherwise.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Finite-difference check of every op and of the full network.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        instances: usize,
        /// Entries sampled per large parameter tensor.
        #[arg(long, default_value_t = 30)]
        samples: usize,
        #[arg(long, default_value_t = 20)]
        op_cases: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Check the desk encoder instead of the full-size one.
        #[arg(long)]
        desk: bool,
    },
    /// Strategy x training-size grid with repeated seeds.
    Ladder {
        /// TOML ladder config (`strategies`, `train_sizes`, `seeds`, `[base]`).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Restrict to these strategies (repeatable).
        #[arg(long)]
        strategy: Vec<Strategy>,
        /// Restrict to these training sizes (repeatable).
        #[arg(long)]
        train_bags: Vec<usize>,
        /// Use these repetition seeds (repeatable).
        #[arg(long)]
        seed: Vec<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, short)]
        quiet: bool,
    },
}

fn train_config(
    common: &Common,
    fallback: Option<&Path>,
    base: TrainConfig,
) -> Result<TrainConfig> {
    let mut cfg = match common.config.as_deref().or(fallback) {
        Some(path) => TrainConfig::load(path)?,
        None => base,
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(s) = common.strategy {
        cfg.strategy.strategy = s;
    }
    if let Some(n) = common.train_bags {
        cfg.data.counts.train = n;
    }
    if let Some(d) = &common.data_dir {
        cfg.data.dir = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Config saved next to a checkpoint by `train`, if any.
fn sibling_config(checkpoint: &Path) -> Option<PathBuf> {
    let p = checkpoint.parent()?.join("config.toml");
    p.exists().then_some(p)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    writeln!(io::stdout(), "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { common, out_dir } => {
            let mut cfg = train_config(&common, None, TrainConfig::desk())?;
            if let Some(s) = common.seed {
                cfg.data.seed = s;
            }
            let ds = Dataset::generate(cfg.data.manifest())?;
            ds.save(&out_dir)?;
            print_json(&ds.manifest)?;
        }
        Command::Train {
            common,
            out_dir,
            full,
            quiet,
        } => {
            let base = if full {
                TrainConfig::default()
            } else {
                TrainConfig::desk()
            };
            let cfg = train_config(&common, None, base)?;
            let data = load_data(&cfg)?;
            let outcome = train(
                &cfg,
                &data.train,
                &data.val,
                &TrainOptions {
                    out_dir: Some(out_dir.clone()),
                    verbose: !quiet,
                },
            )?;
            let ev = evaluate(&outcome.best, &data.test)?;
            write_evaluation(&out_dir, &ev)?;
            eprintln!(
                "best epoch {}, test accuracy {:.4}, {} skipped steps",
                outcome.best_epoch, ev.metrics.accuracy, outcome.skipped_steps
            );
        }
        Command::Eval {
            common,
            checkpoint,
            split,
            out_dir,
        } => {
            let (model, _) = load_checkpoint(&checkpoint)?;
            let cfg = train_config(
                &common,
                sibling_config(&checkpoint).as_deref(),
                TrainConfig::desk(),
            )?;
            let data = load_data(&cfg)?;
            let ev = evaluate(&model, data.split(split))?;
            if let Some(dir) = out_dir {
                write_evaluation(&dir, &ev)?;
            }
            print_json(&ev.metrics)?;
        }
        Command::AttnExport {
            common,
            checkpoint,
            split,
            out_dir,
        } => {
            let (model, _) = load_checkpoint(&checkpoint)?;
            let cfg = train_config(
                &common,
                sibling_config(&checkpoint).as_deref(),
                TrainConfig::desk(),
            )?;
            let data = load_data(&cfg)?;
            match out_dir {
                Some(dir) => {
                    fs::create_dir_all(&dir)?;
                    let f = BufWriter::new(File::create(dir.join("attention.csv"))?);
                    export_attention(&model, data.split(split), f)?;
                }
                None => {
                    export_attention(&model, data.split(split), io::stdout().lock())?;
                }
            }
        }
        Command::Gradcheck {
            seed,
            instances,
            samples,
            op_cases,
            tolerance,
            desk,
        } => {
            let mut ok = true;
            let started = std::time::Instant::now();
            for check in op_gradcheck_suite(op_cases, seed, tolerance)? {
                if !check.report.passed() {
                    ok = false;
                    println!(
                        "FAIL op {} case {}: max rel error {:.3e}",
                        check.op,
                        check.case,
                        check.report.max_rel_error()
                    );
                }
            }
            println!(
                "ops: {op_cases} cases each, {}",
                if ok { "ok" } else { "failed" }
            );
            let encoder = if desk {
                EncoderConfig::desk()
            } else {
                EncoderConfig::default()
            };
            let opts = GradCheckOptions {
                max_entries_per_param: samples,
                seed,
                ..GradCheckOptions::default()
            };
            let report = network_gradcheck(encoder, instances, seed, tolerance, &opts)?;
            for p in &report.params {
                println!(
                    "{:<14} {:>4} entries  max rel error {:.3e}  kinks {}",
                    p.name, p.checked, p.max_rel_error, p.kinks
                );
            }
            ok &= report.passed();
            println!(
                "network: {} ({:.1}s total)",
                if report.passed() { "ok" } else { "failed" },
                started.elapsed().as_secs_f64()
            );
            return Ok(ok);
        }
        Command::Ladder {
            config,
            strategy,
            train_bags,
            seed,
            out_dir,
            quiet,
        } => {
            let mut cfg = match config {
                Some(p) => LadderConfig::load(&p)?,
                None => LadderConfig::default(),
            };
            if !strategy.is_empty() {
                cfg.strategies = strategy;
            }
            if !train_bags.is_empty() {
                cfg.train_sizes = train_bags;
            }
            if !seed.is_empty() {
                cfg.seeds = seed;
            }
            let results = run_experiment_ladder(&cfg, out_dir.as_deref(), !quiet)?;
            print!("{}", results.to_text());
            io::stdout().flush()?;
            return Ok(results.cells.iter().all(|c| c.failures.is_empty()));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Config(_) | Error::Toml(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
