use std::sync::Arc;

use atmil::autodiff::*;
use atmil::model::{network_gradcheck, EncoderConfig};
use proptest::prelude::*;

fn shared(ps: &mut ParamSet, name: &str, t: TensorValue) -> ParamId {
    ps.insert(name, Partition::Shared, t).unwrap()
}

/// Neumaier-compensated sum, the reference for every reduction below.
fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() {
            (s - t) + x
        } else {
            (x - t) + s
        };
        s = t;
    }
    s + c
}

#[test]
fn every_op_matches_central_differences() {
    let checks = op_gradcheck_suite(20, 7, 1e-4).unwrap();
    assert_eq!(checks.len(), OP_NAMES.len() * 20);
    for c in &checks {
        assert!(
            c.report.passed(),
            "{} case {} max rel error {:e}",
            c.op,
            c.case,
            c.report.max_rel_error()
        );
    }
}

#[test]
fn corrupted_tanh_backward_is_detected() {
    let opts = GradCheckOptions {
        max_entries_per_param: 6,
        fault: Some(Fault::TanhBackwardScale(1.5)),
        ..GradCheckOptions::default()
    };
    let r = network_gradcheck(EncoderConfig::desk(), 4, 2, 1e-4, &opts).unwrap();
    assert!(!r.passed());
    assert!(r.max_rel_error() > 1e-2, "{}", r.max_rel_error());
    // Only parameters upstream of the attention tanh can be affected.
    let main_bias = r.params.iter().find(|p| p.name == "main.bias").unwrap();
    assert!(main_bias.max_rel_error < 1e-4);
}

#[test]
fn toy_conv_pool_relu_by_hand() {
    // 3x3 input, one 2x2 kernel, bias -1:
    //  1 2 0      k = 1  0
    //  0 1 3          0 -1
    //  2 0 1
    // conv = [1-1, 2-3; 0-0, 1-1] - 1 = [-1, -2; -1, -1]; pool -> -1; relu -> 0.
    let mut g = Graph::new();
    let x = g.input(
        TensorValue::new(vec![1, 1, 3, 3], vec![1., 2., 0., 0., 1., 3., 2., 0., 1.]).unwrap(),
    );
    let k = g.input(TensorValue::new(vec![1, 1, 2, 2], vec![1., 0., 0., -1.]).unwrap());
    let b = g.input(TensorValue::new(vec![1], vec![-1.0]).unwrap());
    let c = g.conv2d(x, k, Some(b)).unwrap();
    assert_eq!(g.value(c).data(), &[-1.0, -2.0, -1.0, -1.0]);
    let p = g.max_pool2(c).unwrap();
    assert_eq!(g.value(p).data(), &[-1.0]);
    let r = g.relu(p).unwrap();
    assert_eq!(g.value(r).data(), &[0.0]);
}

#[test]
fn toy_linear_attention_gradient_by_hand() {
    // loss = sum(softmax([w, 0]) * [1, 0]) = sigmoid(w); d/dw = s(1 - s).
    let mut ps = ParamSet::new();
    let w = shared(
        &mut ps,
        "w",
        TensorValue::new(vec![1, 2], vec![0.3, 0.0]).unwrap(),
    );
    let mut g = Graph::new();
    let wn = g.param(&ps, w);
    let s = g.softmax(wn).unwrap();
    let mask = g.input(TensorValue::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
    let m = g.mul(s, mask).unwrap();
    let l = g.sum(m).unwrap();
    let grads = g.backward(l, &ps).unwrap();
    let sig = 1.0 / (1.0 + (-0.3f64).exp());
    let gw = grads.get(w).unwrap().data();
    assert!((gw[0] - sig * (1.0 - sig)).abs() < 1e-15);
    assert!((gw[1] + sig * (1.0 - sig)).abs() < 1e-15);
}

#[test]
fn two_losses_on_one_graph_match_separate_graphs() {
    let mut ps = ParamSet::new();
    let w = shared(
        &mut ps,
        "w",
        TensorValue::from_rows(&[&[0.2, -0.4], &[0.7, 0.1]]),
    );
    let x = TensorValue::from_rows(&[&[1.0, -2.0], &[0.5, 0.25], &[-1.0, 1.5]]);
    let build = |g: &mut Graph| {
        let xi = g.input(x.clone());
        let wi = g.param(&ps, w);
        let h = g.matmul(xi, wi).unwrap();
        let h = g.tanh(h).unwrap();
        let a = g.cross_entropy(h, &[0, 1, 1]).unwrap();
        let b = g.mean(h).unwrap();
        (a, b)
    };
    let mut g = Graph::new();
    let (a, b) = build(&mut g);
    let ga = g.backward(a, &ps).unwrap();
    let gb = g.backward(b, &ps).unwrap();

    let mut g1 = Graph::new();
    let (a1, _) = build(&mut g1);
    let mut g2 = Graph::new();
    let (_, b2) = build(&mut g2);
    assert_eq!(ga.get(w), g1.backward(a1, &ps).unwrap().get(w));
    assert_eq!(gb.get(w), g2.backward(b2, &ps).unwrap().get(w));
}

#[test]
fn cross_entropy_rejects_bad_labels() {
    let mut g = Graph::new();
    let x = g.input(TensorValue::from_rows(&[&[0.0, 1.0]]));
    assert!(g.cross_entropy(x, &[2]).is_err());
    assert!(g.cross_entropy(x, &[0, 1]).is_err());
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut g = Graph::new();
    let a = g.input(TensorValue::zeros(&[2, 3]));
    let b = g.input(TensorValue::zeros(&[2, 3]));
    assert!(g.matmul(a, b).is_err());
    let c = g.input(TensorValue::zeros(&[3, 2]));
    assert!(g.add(a, c).is_err());
}

#[test]
fn grad_vector_round_trip() {
    let mut ps = ParamSet::new();
    let a = shared(
        &mut ps,
        "a",
        TensorValue::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]),
    );
    let h = ps
        .insert("h", Partition::MainHead, TensorValue::zeros(&[3]))
        .unwrap();
    let b = shared(
        &mut ps,
        "b",
        TensorValue::new(vec![3], vec![5.0, 6.0, 7.0]).unwrap(),
    );
    let mut grads = ParamGrads::empty(ps.len());
    grads.set(a, TensorValue::from_rows(&[&[0.1, 0.2], &[0.3, 0.4]]));
    grads.set(h, TensorValue::filled(&[3], 9.0));
    grads.set(b, TensorValue::new(vec![3], vec![0.5, 0.6, 0.7]).unwrap());
    let flat = flatten_grads(&ps, &grads, Partition::Shared).unwrap();
    assert_eq!(flat.values(), &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]);
    let back = flat.unflatten().unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[0], (a, grads.get(a).unwrap().clone()));
    assert_eq!(back[1], (b, grads.get(b).unwrap().clone()));
    assert!(!flat.same_layout(&GradVector::from_raw(vec![0.0; 7])));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..5,
        data in prop::collection::vec(-30.0f64..30.0, 1..40),
    ) {
        let cols = data.len().div_ceil(rows);
        let mut v = data.clone();
        v.resize(rows * cols, 0.0);
        let mut g = Graph::new();
        let x = g.input(TensorValue::new(vec![rows, cols], v).unwrap());
        let s = g.softmax(x).unwrap();
        for r in g.value(s).data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn grad_dot_matches_compensated_sum(
        pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..300),
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let layout = GradLayout::flat(a.len());
        let ga = GradVector::new(a.clone(), Arc::clone(&layout)).unwrap();
        let gb = GradVector::new(b.clone(), layout).unwrap();
        let oracle = compensated_sum(a.iter().zip(&b).map(|(x, y)| x * y));
        let scale: f64 = a.iter().zip(&b).map(|(x, y)| (x * y).abs()).sum::<f64>().max(1.0);
        prop_assert!((grad_dot(&ga, &gb).unwrap() - oracle).abs() / scale < 1e-12);
        let norm = compensated_sum(a.iter().map(|x| x * x)).sqrt();
        prop_assert!((grad_norm(&ga) - norm).abs() / norm.max(1.0) < 1e-12);
    }

    #[test]
    fn matmul_matches_compensated_sum(
        m in 1usize..6, k in 1usize..9, n in 1usize..6, seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut g = Graph::new();
        let ai = g.input(TensorValue::new(vec![m, k], a.clone()).unwrap());
        let bi = g.input(TensorValue::new(vec![k, n], b.clone()).unwrap());
        let c = g.matmul(ai, bi).unwrap();
        for i in 0..m {
            for j in 0..n {
                let terms = (0..k).map(|t| a[i * k + t] * b[t * n + j]);
                let scale: f64 = (0..k).map(|t| (a[i * k + t] * b[t * n + j]).abs()).sum::<f64>().max(1.0);
                let oracle = compensated_sum(terms);
                prop_assert!((g.value(c).data()[i * n + j] - oracle).abs() / scale < 1e-12);
            }
        }
    }

    #[test]
    fn forward_and_backward_are_deterministic(seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let w = shared(&mut ps, "w", TensorValue::new(vec![2, 1, 3, 3], (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
        let x = TensorValue::new(vec![2, 1, 6, 6], (0..72).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let run = || {
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let wi = g.param(&ps, w);
            let c = g.conv2d(xi, wi, None).unwrap();
            let p = g.max_pool2(c).unwrap();
            let r = g.relu(p).unwrap();
            let l = g.mean(r).unwrap();
            let v = g.value(l).item();
            (v, g.backward(l, &ps).unwrap().get(w).unwrap().clone())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        prop_assert_eq!(v1.to_bits(), v2.to_bits());
        prop_assert_eq!(g1, g2);
    }

    #[test]
    fn add_scaled_is_elementwise(
        a in prop::collection::vec(-10.0f64..10.0, 1..50), s in -3.0f64..3.0,
    ) {
        let b: Vec<f64> = a.iter().map(|x| x * 0.5 - 1.0).collect();
        let layout = GradLayout::flat(a.len());
        let ga = GradVector::new(a.clone(), Arc::clone(&layout)).unwrap();
        let gb = GradVector::new(b.clone(), layout).unwrap();
        let c = ga.add_scaled(s, &gb).unwrap();
        for i in 0..a.len() {
            prop_assert_eq!(c.values()[i], a[i] + s * b[i]);
        }
    }
}
