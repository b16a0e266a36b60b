use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::config::{lr_schedule, TrainConfig};
use super::metrics::evaluate;
use crate::autodiff::{flatten_grads, Graph, ParamGrads, Partition};
use crate::auxweight::{
    combine, CombineInput, DiagnosticsRecord, DiagnosticsWriter, TaskWeightState,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax, aux_loss, main_loss, save_checkpoint, Bag, MilModel};

/// Per-epoch summary; field order is the column order of `epochs.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub lr: f64,
    pub loss_main: f64,
    pub loss_aux: f64,
    pub w_mean: f64,
    pub w_last: f64,
    /// Accuracy of the predictions made during the epoch, before each update.
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub skipped_steps: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model with the best validation accuracy (ties go to lower validation loss).
    pub best: MilModel,
    pub last: MilModel,
    pub best_epoch: u64,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<DiagnosticsRecord>,
    pub skipped_steps: u64,
    pub weight_state: TaskWeightState,
}

/// Result of one optimizer step on one bag.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub record: DiagnosticsRecord,
    pub predicted: usize,
}

/// Forward, two backward passes, weighting, Adam. On error nothing is updated.
pub fn train_step(
    model: &mut MilModel,
    adam: &mut AdamState,
    weights: &mut TaskWeightState,
    cfg: &TrainConfig,
    bag: &Bag,
    completed_epochs: u64,
    lr: f64,
) -> Result<StepReport> {
    let mut g = Graph::new();
    let p = model.bind(&mut g);
    let nodes = model.forward(&mut g, &p, bag)?;
    let predicted = argmax(g.value(nodes.main_logits).data());
    let lm = main_loss(&mut g, nodes.main_logits, bag.label)?;
    let la = aux_loss(&mut g, nodes.aux_logits, &bag.aux_labels)?;
    let params = model.params();
    let grads_main = g.backward(lm, params)?;
    let grads_aux = g.backward(la, params)?;

    let g_main = flatten_grads(params, &grads_main, Partition::Shared)?;
    let g_aux = flatten_grads(params, &grads_aux, Partition::Shared)?;
    let input = CombineInput {
        g_main: &g_main,
        g_aux: &g_aux,
        loss_main: g.value(lm).item(),
        loss_aux: g.value(la).item(),
        epoch: completed_epochs,
    };
    let (out, next) = combine(&input, weights, &cfg.strategy)?;

    let mut grads = ParamGrads::empty(params.len());
    for (id, t) in out.g_combined.unflatten()? {
        grads.set(id, t);
    }
    for (source, part) in [
        (&grads_main, Partition::MainHead),
        (&grads_aux, Partition::AuxHead),
    ] {
        for id in params.ids_in(part).collect::<Vec<_>>() {
            let t = source
                .get(id)
                .ok_or_else(|| Error::Internal(format!("missing head gradient {}", id.0)))?;
            grads.set(id, t.clone());
        }
    }
    adam_step(model.params_mut(), &grads, adam, lr)?;
    let record = DiagnosticsRecord::new(&input, &out, next.step, cfg.strategy.strategy);
    *weights = next;
    Ok(StepReport { record, predicted })
}

/// Output locations for [`train`]; all optional.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out_dir: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

fn meta(cfg: &TrainConfig, epoch: u64) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("strategy".to_string(), cfg.strategy.strategy.to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("epoch".to_string(), epoch.to_string()),
    ])
}

pub fn train(
    cfg: &TrainConfig,
    train_bags: &[Bag],
    val_bags: &[Bag],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_bags.is_empty() {
        return Err(Error::usage("no training bags"));
    }
    for bag in train_bags.iter().chain(val_bags) {
        bag.validate()?;
        if bag.label >= cfg.encoder.main_classes
            || bag.aux_labels.iter().any(|&a| a >= cfg.encoder.aux_classes)
        {
            return Err(Error::data(format!(
                "bag {} has labels outside the configured classes",
                bag.id
            )));
        }
    }
    let mut step_log = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(DiagnosticsWriter::create(&dir.join("steps.csv"))?)
        }
        None => None,
    };

    let mut model = MilModel::new(cfg.encoder.clone(), cfg.seed)?;
    let mut adam = AdamState::new(model.params());
    let mut weights = TaskWeightState::new(&cfg.strategy);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_bags.len()).collect();

    let mut best = (model.clone(), 0u64, f64::NEG_INFINITY, f64::INFINITY);
    let mut epochs = Vec::with_capacity(cfg.epochs as usize);
    let mut steps = Vec::with_capacity(cfg.epochs as usize * train_bags.len());
    let mut skipped_total = 0;

    for epoch in 1..=cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        order_rng.set_stream(epoch);
        order.shuffle(&mut order_rng);
        let (mut lm, mut la, mut wsum, mut correct, mut done, mut skipped) =
            (0.0, 0.0, 0.0, 0u64, 0u64, 0u64);
        for &i in &order {
            let bag = &train_bags[i];
            match train_step(&mut model, &mut adam, &mut weights, cfg, bag, epoch - 1, lr) {
                Ok(rep) => {
                    lm += rep.record.loss_main;
                    la += rep.record.loss_aux;
                    wsum += rep.record.w_used;
                    correct += u64::from(rep.predicted == bag.label);
                    done += 1;
                    if let Some(w) = step_log.as_mut() {
                        w.write(&rep.record)?;
                    }
                    steps.push(rep.record);
                }
                Err(Error::Numeric(msg)) => {
                    skipped += 1;
                    if opts.verbose {
                        eprintln!("epoch {epoch}: skipped bag {} ({msg})", bag.id);
                    }
                }
                Err(e) => return Err(e),
            }
        }
        skipped_total += skipped;
        let per = |x: f64| if done > 0 { x / done as f64 } else { f64::NAN };
        let (val_accuracy, val_loss) = if val_bags.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let ev = evaluate(&model, val_bags)?;
            (ev.metrics.accuracy, ev.mean_loss)
        };
        let rec = EpochRecord {
            epoch,
            lr,
            loss_main: per(lm),
            loss_aux: per(la),
            w_mean: per(wsum),
            w_last: weights.w,
            train_accuracy: per(correct as f64),
            val_accuracy,
            val_loss,
            skipped_steps: skipped,
        };
        if opts.verbose {
            eprintln!(
                "epoch {epoch:4} lr {lr:.1e} main {:.4} aux {:.4} w {:.3} train {:.3} val {:.3}",
                rec.loss_main, rec.loss_aux, rec.w_mean, rec.train_accuracy, rec.val_accuracy
            );
        }
        // Without a validation split the last epoch wins.
        let better = val_bags.is_empty()
            || val_accuracy > best.2
            || (val_accuracy == best.2 && val_loss < best.3);
        if better {
            best = (model.clone(), epoch, val_accuracy, val_loss);
        }
        if let Some(dir) = &opts.out_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                save_checkpoint(
                    &dir.join(format!("epoch-{epoch}.ckpt")),
                    &model,
                    &meta(cfg, epoch),
                )?;
            }
        }
        epochs.push(rec);
    }

    if let Some(dir) = &opts.out_dir {
        if let Some(w) = step_log.as_mut() {
            w.flush()?;
        }
        let mut w = csv::Writer::from_writer(File::create(dir.join("epochs.csv"))?);
        for rec in &epochs {
            w.serialize(rec)?;
        }
        w.flush()?;
        save_checkpoint(&dir.join("best.ckpt"), &best.0, &meta(cfg, best.1))?;
        save_checkpoint(&dir.join("last.ckpt"), &model, &meta(cfg, cfg.epochs))?;
        fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    }
    Ok(TrainOutcome {
        best: best.0,
        last: model,
        best_epoch: best.1,
        epochs,
        steps,
        skipped_steps: skipped_total,
        weight_state: weights,
    })
}

/// The dataset a config points at: loaded from `data.dir` or generated.
pub fn load_data(cfg: &TrainConfig) -> Result<Dataset> {
    match &cfg.data.dir {
        Some(dir) => {
            let ds = Dataset::load(dir)?;
            if ds.manifest.spec.classes() != cfg.encoder.main_classes {
                return Err(Error::config(format!(
                    "dataset in {} has {} classes, encoder {}",
                    dir.display(),
                    ds.manifest.spec.classes(),
                    cfg.encoder.main_classes
                )));
            }
            Ok(ds)
        }
        None => Dataset::generate(cfg.data.manifest()),
    }
}

/// Writes `metrics.json` and `confusion.csv` for an evaluation.
pub fn write_evaluation(dir: &Path, ev: &super::metrics::Evaluation) -> Result<()> {
    fs::create_dir_all(dir)?;
    #[derive(Serialize)]
    struct Out<'a> {
        accuracy: f64,
        macro_sensitivity: f64,
        macro_specificity: f64,
        macro_f1: f64,
        mean_loss: f64,
        bags: usize,
        per_class: &'a [super::metrics::ClassMetrics],
        undefined: &'a [String],
        confusion: &'a [Vec<u64>],
    }
    let m = &ev.metrics;
    let out = Out {
        accuracy: m.accuracy,
        macro_sensitivity: m.macro_sensitivity,
        macro_specificity: m.macro_specificity,
        macro_f1: m.macro_f1,
        mean_loss: ev.mean_loss,
        bags: ev.predictions.len(),
        per_class: &m.per_class,
        undefined: &m.undefined,
        confusion: &ev.confusion.counts,
    };
    fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(&out)?,
    )?;
    ev.confusion
        .write_csv(File::create(dir.join("confusion.csv"))?)?;
    Ok(())
}
