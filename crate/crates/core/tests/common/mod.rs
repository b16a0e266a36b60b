//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use atmil::autodiff::Graph;
use atmil::data::DigitImage;
use atmil::harness::{adam_step, lr_schedule, AdamState, Metrics, TrainConfig};
use atmil::model::{main_loss, Bag, MilModel};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Recursive flood fill, written independently of the library's labeller.
pub fn flood_components(grid: &[Vec<bool>], diagonal: bool) -> usize {
    fn fill(g: &[Vec<bool>], seen: &mut [Vec<bool>], r: usize, c: usize, diagonal: bool) {
        seen[r][c] = true;
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                if (dr == 0 && dc == 0) || (!diagonal && dr != 0 && dc != 0) {
                    continue;
                }
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr < 0 || nc < 0 || nr >= g.len() as i64 || nc >= g[0].len() as i64 {
                    continue;
                }
                let (nr, nc) = (nr as usize, nc as usize);
                if g[nr][nc] && !seen[nr][nc] {
                    fill(g, seen, nr, nc, diagonal);
                }
            }
        }
    }
    let mut seen = vec![vec![false; grid[0].len()]; grid.len()];
    let mut count = 0;
    for r in 0..grid.len() {
        for c in 0..grid[0].len() {
            if grid[r][c] && !seen[r][c] {
                count += 1;
                fill(grid, &mut seen, r, c, diagonal);
            }
        }
    }
    count
}

pub fn grid_of(img: &DigitImage) -> Vec<Vec<bool>> {
    (0..img.height)
        .map(|r| (0..img.width).map(|c| img.get(r, c) > 0.5).collect())
        .collect()
}

pub fn random_grid(seed: u64, density: f64) -> DigitImage {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let px = (0..256)
        .map(|_| {
            if r.gen_bool(density) {
                r.gen_range(0.51..1.0)
            } else {
                r.gen_range(0.0..0.5)
            }
        })
        .collect();
    DigitImage::new(16, 16, px).unwrap()
}

/// Accuracy and per-class [sensitivity, specificity, precision, f1] by
/// direct counting over (actual, predicted) pairs.
pub fn scalar_metrics(classes: usize, pairs: &[(usize, usize)]) -> (f64, Vec<[f64; 4]>) {
    let n = pairs.len() as f64;
    let correct = pairs.iter().filter(|(a, p)| a == p).count() as f64;
    let per = (0..classes)
        .map(|k| {
            let tp = pairs.iter().filter(|&&(a, p)| a == k && p == k).count() as f64;
            let fn_ = pairs.iter().filter(|&&(a, p)| a == k && p != k).count() as f64;
            let fp = pairs.iter().filter(|&&(a, p)| a != k && p == k).count() as f64;
            let tn = n - tp - fn_ - fp;
            let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
            let sens = div(tp, tp + fn_);
            let prec = div(tp, tp + fp);
            let f1 = div(2.0 * prec * sens, prec + sens);
            [sens, div(tn, tn + fp), prec, f1]
        })
        .collect();
    (correct / n, per)
}

/// Largest absolute difference between `m` and the scalar oracle.
pub fn metrics_error(m: &Metrics, classes: usize, pairs: &[(usize, usize)]) -> f64 {
    let (acc, per) = scalar_metrics(classes, pairs);
    let mut worst = (m.accuracy - acc).abs();
    for (got, want) in m.per_class.iter().zip(&per) {
        let g = [got.sensitivity, got.specificity, got.precision, got.f1];
        for (x, y) in g.iter().zip(want) {
            worst = worst.max((x - y).abs());
        }
    }
    let mean = |j: usize| per.iter().map(|r| r[j]).sum::<f64>() / classes as f64;
    worst
        .max((m.macro_sensitivity - mean(0)).abs())
        .max((m.macro_specificity - mean(1)).abs())
        .max((m.macro_f1 - mean(3)).abs())
}

/// Trains on the main loss alone with the harness's init, bag order and
/// learning-rate schedule, but none of its strategy machinery.
pub fn main_only_run(cfg: &TrainConfig, train: &[Bag]) -> MilModel {
    let mut model = MilModel::new(cfg.encoder.clone(), cfg.seed).unwrap();
    let mut adam = AdamState::new(model.params());
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order_rng.set_stream(epoch);
        order.shuffle(&mut order_rng);
        for &i in &order {
            let bag = &train[i];
            let mut g = Graph::new();
            let p = model.bind(&mut g);
            let nodes = model.forward(&mut g, &p, bag).unwrap();
            let l = main_loss(&mut g, nodes.main_logits, bag.label).unwrap();
            let grads = g.backward(l, model.params()).unwrap();
            adam_step(
                model.params_mut(),
                &grads,
                &mut adam,
                lr_schedule(epoch, cfg),
            )
            .unwrap();
        }
    }
    model
}
