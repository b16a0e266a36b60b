//! Finite-difference checks of every op kind on random inputs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
use super::graph::OpKind;
use super::params::{ParamSet, Partition};
use super::tensor::TensorValue;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: &'static str,
    pub case: usize,
    pub report: GradCheckReport,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> TensorValue {
    let n = shape.iter().product();
    TensorValue::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Magnitudes in `[0.1, 1]` with random sign, so ReLU kinks are far from every input.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> TensorValue {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    TensorValue::new(shape.to_vec(), data).unwrap()
}

/// Distinct values at least 0.1 apart, so no pooling window has a near tie.
fn spread(rng: &mut ChaCha8Rng, shape: &[usize]) -> TensorValue {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n)
        .map(|i| i as f64 * 0.1 + rng.gen_range(0.0..0.02))
        .collect();
    data.shuffle(rng);
    TensorValue::new(shape.to_vec(), data).unwrap()
}

fn case(kind: &str, rng: &mut ChaCha8Rng) -> (OpKind, Vec<TensorValue>) {
    let m = |rng: &mut ChaCha8Rng| uniform(rng, &[3, 4], -1.0, 1.0);
    match kind {
        "add" => (OpKind::Add, vec![m(rng), m(rng)]),
        "add_bias" => (OpKind::AddBias, vec![m(rng), uniform(rng, &[4], -1.0, 1.0)]),
        "mul" => (OpKind::Mul, vec![m(rng), m(rng)]),
        "scale" => (OpKind::Scale(rng.gen_range(-2.0..2.0)), vec![m(rng)]),
        "matmul" => (
            OpKind::MatMul,
            vec![m(rng), uniform(rng, &[4, 2], -1.0, 1.0)],
        ),
        "transpose" => (OpKind::Transpose, vec![m(rng)]),
        "conv2d" => (
            OpKind::Conv2d,
            vec![
                uniform(rng, &[2, 2, 6, 6], -1.0, 1.0),
                uniform(rng, &[3, 2, 3, 3], -1.0, 1.0),
                uniform(rng, &[3], -1.0, 1.0),
            ],
        ),
        "max_pool2" => (OpKind::MaxPool2, vec![spread(rng, &[1, 2, 4, 4])]),
        "tanh" => (OpKind::Tanh, vec![m(rng)]),
        "relu" => (OpKind::Relu, vec![away_from_zero(rng, &[3, 4])]),
        "softmax" => (OpKind::SoftmaxLast, vec![m(rng)]),
        "log" => (OpKind::Log, vec![uniform(rng, &[3, 4], 0.5, 2.0)]),
        "reshape" => (OpKind::Reshape(vec![4, 3]), vec![m(rng)]),
        "sum" => (OpKind::Sum, vec![m(rng)]),
        "mean" => (OpKind::Mean, vec![m(rng)]),
        "cross_entropy" => {
            let labels = (0..3).map(|_| rng.gen_range(0..4)).collect();
            (OpKind::CrossEntropy(labels), vec![m(rng)])
        }
        other => unreachable!("no gradcheck case for {other}"),
    }
}

/// Every op kind the engine implements.
pub const OP_NAMES: [&str; 16] = [
    "add",
    "add_bias",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "conv2d",
    "max_pool2",
    "tanh",
    "relu",
    "softmax",
    "log",
    "reshape",
    "sum",
    "mean",
    "cross_entropy",
];

/// Checks each op on `cases` random inputs. The scalar fed to the check is
/// `sum(op(inputs) * R)` for a fixed random `R`, so every output entry gets
/// a distinct upstream gradient.
pub fn op_gradcheck_suite(cases: usize, seed: u64, tolerance: f64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(OP_NAMES.len() * cases);
    for op in OP_NAMES {
        for c in 0..cases {
            let (kind, inputs) = case(op, &mut rng);
            let mut params = ParamSet::new();
            let ids: Vec<_> = inputs
                .into_iter()
                .enumerate()
                .map(|(i, t)| params.insert(format!("{op}.in{i}"), Partition::Shared, t))
                .collect::<Result<_>>()?;
            let weight_seed: u64 = rng.gen();
            let report = finite_diff_check(
                |g, ps| {
                    let nodes: Vec<_> = ids.iter().map(|&id| g.param(ps, id)).collect();
                    let y = g.apply(kind.clone(), &nodes)?;
                    if g.value(y).is_scalar() {
                        return Ok(y);
                    }
                    let shape = g.value(y).shape().to_vec();
                    let mut wrng = ChaCha8Rng::seed_from_u64(weight_seed);
                    let r = g.input(uniform(&mut wrng, &shape, -1.0, 1.0));
                    let yr = g.mul(y, r)?;
                    g.sum(yr)
                },
                &params,
                tolerance,
                &GradCheckOptions {
                    seed: seed.wrapping_add(c as u64),
                    ..GradCheckOptions::default()
                },
            )?;
            out.push(OpCheck {
                op,
                case: c,
                report,
            });
        }
    }
    Ok(out)
}
