//! Strategy x training-set-size grids with repeated seeds.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::metrics::{evaluate, mean_sem};
use super::train::{load_data, train, TrainOptions};
use crate::auxweight::Strategy;
use crate::error::{Error, Result};

/// Published accuracies of the binary digit-bag experiment, by training-set size.
pub const REFERENCE_TRAIN_SIZES: [usize; 5] = [100, 150, 200, 300, 500];
pub const REFERENCE_ACCURACY: [(Strategy, [f64; 5]); 8] = [
    (Strategy::None, [0.805, 0.786, 0.857, 0.975, 0.981]),
    (Strategy::Uniform, [0.863, 0.923, 0.936, 0.985, 0.983]),
    (Strategy::Wl, [0.817, 0.940, 0.943, 0.978, 0.974]),
    (Strategy::GradNorm, [0.844, 0.916, 0.968, 0.969, 0.985]),
    (Strategy::CosSim, [0.824, 0.939, 0.964, 0.983, 0.985]),
    (Strategy::AdaLoss, [0.973, 0.923, 0.981, 0.975, 0.986]),
    (Strategy::OlAux, [0.931, 0.953, 0.963, 0.982, 0.987]),
    (Strategy::Atmil, [0.975, 0.960, 0.951, 0.976, 0.989]),
];

pub fn reference_accuracy(strategy: Strategy, train_bags: usize) -> Option<f64> {
    let col = REFERENCE_TRAIN_SIZES
        .iter()
        .position(|&n| n == train_bags)?;
    REFERENCE_ACCURACY
        .iter()
        .find(|(s, _)| *s == strategy)
        .map(|(_, row)| row[col])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LadderConfig {
    pub strategies: Vec<Strategy>,
    pub train_sizes: Vec<usize>,
    /// Each repetition seeds both the model and the generated data.
    pub seeds: Vec<u64>,
    pub base: TrainConfig,
}

impl Default for LadderConfig {
    fn default() -> Self {
        Self {
            strategies: Strategy::ALL.to_vec(),
            train_sizes: REFERENCE_TRAIN_SIZES.to_vec(),
            seeds: vec![0, 1, 2],
            base: TrainConfig::desk(),
        }
    }
}

impl LadderConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(&fs::read_to_string(path)?)?;
        cfg.base.validate()?;
        Ok(cfg)
    }

    /// The training config of one grid cell and repetition.
    pub fn cell_config(&self, strategy: Strategy, train_bags: usize, seed: u64) -> TrainConfig {
        let mut cfg = self.base.clone();
        cfg.strategy.strategy = strategy;
        cfg.seed = seed;
        cfg.data.seed = self.base.data.seed.wrapping_add(seed);
        cfg.data.counts.train = train_bags;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_sensitivity: f64,
    pub macro_specificity: f64,
    pub best_epoch: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderCell {
    pub strategy: Strategy,
    pub train_bags: usize,
    pub runs: Vec<RunResult>,
    /// Repetitions that failed, with the error text.
    pub failures: Vec<(u64, String)>,
}

impl LadderCell {
    pub fn accuracies(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.accuracy).collect()
    }

    pub fn accuracy(&self) -> (f64, f64) {
        mean_sem(&self.accuracies())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LadderResults {
    pub cells: Vec<LadderCell>,
}

impl LadderResults {
    pub fn cell(&self, strategy: Strategy, train_bags: usize) -> Option<&LadderCell> {
        self.cells
            .iter()
            .find(|c| c.strategy == strategy && c.train_bags == train_bags)
    }

    /// One row per cell: mean and SEM of each metric, plus the reference accuracy.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "strategy",
            "train_bags",
            "runs",
            "failures",
            "accuracy_mean",
            "accuracy_sem",
            "macro_f1_mean",
            "macro_f1_sem",
            "macro_sensitivity_mean",
            "macro_sensitivity_sem",
            "macro_specificity_mean",
            "macro_specificity_sem",
            "reference_accuracy",
        ])?;
        for c in &self.cells {
            let stat =
                |f: fn(&RunResult) -> f64| mean_sem(&c.runs.iter().map(f).collect::<Vec<_>>());
            let mut rec = vec![
                c.strategy.to_string(),
                c.train_bags.to_string(),
                c.runs.len().to_string(),
                c.failures.len().to_string(),
            ];
            for f in [
                (|r: &RunResult| r.accuracy) as fn(&RunResult) -> f64,
                |r| r.macro_f1,
                |r| r.macro_sensitivity,
                |r| r.macro_specificity,
            ] {
                let (m, s) = stat(f);
                rec.push(format!("{m:.6}"));
                rec.push(format!("{s:.6}"));
            }
            rec.push(
                reference_accuracy(c.strategy, c.train_bags)
                    .map_or(String::new(), |v| format!("{v:.3}")),
            );
            w.write_record(&rec)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Internal(e.to_string()))?)
            .map_err(|e| Error::Internal(e.to_string()))
    }

    /// Accuracy table laid out strategies x training sizes, `mean ± sem (reference)`.
    pub fn to_text(&self) -> String {
        let mut sizes: Vec<usize> = self.cells.iter().map(|c| c.train_bags).collect();
        sizes.sort_unstable();
        sizes.dedup();
        let mut strategies: Vec<Strategy> = Vec::new();
        for c in &self.cells {
            if !strategies.contains(&c.strategy) {
                strategies.push(c.strategy);
            }
        }
        let mut out = String::new();
        let _ = write!(out, "{:<10}", "bags");
        for n in &sizes {
            let _ = write!(out, " | {n:^24}");
        }
        out.push('\n');
        for s in strategies {
            let _ = write!(out, "{:<10}", s.as_str());
            for &n in &sizes {
                let text = match self.cell(s, n) {
                    Some(c) if !c.runs.is_empty() => {
                        let (m, e) = c.accuracy();
                        let r = reference_accuracy(s, n)
                            .map_or(String::new(), |v| format!(" ({v:.3})"));
                        format!("{m:.3} ± {e:.3}{r}")
                    }
                    Some(_) => "failed".to_string(),
                    None => String::new(),
                };
                let _ = write!(out, " | {text:^24}");
            }
            out.push('\n');
        }
        out.push_str("Values in parentheses: reference accuracy for the same cell.\n");
        out
    }
}

/// Runs every cell. Failed repetitions are recorded and the grid continues.
pub fn run_experiment_ladder(
    cfg: &LadderConfig,
    out_dir: Option<&Path>,
    verbose: bool,
) -> Result<LadderResults> {
    cfg.base.validate()?;
    let mut results = LadderResults::default();
    for &n in &cfg.train_sizes {
        for &strategy in &cfg.strategies {
            let mut cell = LadderCell {
                strategy,
                train_bags: n,
                runs: Vec::new(),
                failures: Vec::new(),
            };
            for &seed in &cfg.seeds {
                let run_cfg = cfg.cell_config(strategy, n, seed);
                let dir: Option<PathBuf> =
                    out_dir.map(|d| d.join(format!("{strategy}-{n}-seed{seed}")));
                let started = std::time::Instant::now();
                let outcome = (|| {
                    let data = load_data(&run_cfg)?;
                    let trained = train(
                        &run_cfg,
                        &data.train,
                        &data.val,
                        &TrainOptions {
                            out_dir: dir.clone(),
                            verbose: false,
                        },
                    )?;
                    let ev = evaluate(&trained.best, &data.test)?;
                    if let Some(d) = &dir {
                        super::train::write_evaluation(d, &ev)?;
                    }
                    Ok::<_, Error>((ev, trained.best_epoch))
                })();
                match outcome {
                    Ok((ev, best_epoch)) => {
                        let seconds = started.elapsed().as_secs_f64();
                        if verbose {
                            eprintln!(
                                "{strategy:>8} {n:>4} bags seed {seed}: accuracy {:.3} (best epoch {best_epoch}, {seconds:.0}s)",
                                ev.metrics.accuracy
                            );
                        }
                        cell.runs.push(RunResult {
                            seed,
                            accuracy: ev.metrics.accuracy,
                            macro_f1: ev.metrics.macro_f1,
                            macro_sensitivity: ev.metrics.macro_sensitivity,
                            macro_specificity: ev.metrics.macro_specificity,
                            best_epoch,
                            seconds,
                        });
                    }
                    Err(e) => {
                        if verbose {
                            eprintln!("{strategy:>8} {n:>4} bags seed {seed}: failed: {e}");
                        }
                        cell.failures.push((seed, e.to_string()));
                    }
                }
            }
            results.cells.push(cell);
        }
    }
    if let Some(d) = out_dir {
        fs::create_dir_all(d)?;
        fs::write(d.join("ladder.csv"), results.to_csv()?)?;
        fs::write(d.join("ladder.txt"), results.to_text())?;
        fs::write(
            d.join("ladder.json"),
            serde_json::to_string_pretty(&results)?,
        )?;
    }
    Ok(results)
}
