use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedhtl::autodiff::{fd_check, Graph, Tensor};
use fedhtl::models::{build_model, Activation, Batch, HeadKind, LayerSpec, ModelSpec, ParamSet};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// A random MLP of at most 3 hidden layers and 64 units with a regression
/// head, plus a batch to evaluate it on.
pub fn random_mlp_case(seed: u64) -> (ModelSpec, ParamSet, Batch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = rng.random_range(1..=6);
    let depth = rng.random_range(1..=3);
    let body = (0..depth)
        .map(|_| LayerSpec {
            width: if rng.random_bool(0.2) { rng.random_range(1..=64) } else { rng.random_range(1..=12) },
            activation: if rng.random_bool(0.5) { Activation::Tanh } else { Activation::Sigmoid },
            batch_norm: rng.random_bool(0.3),
        })
        .collect();
    let outputs = rng.random_range(1..=2);
    let spec = ModelSpec {
        input_width: input,
        body,
        head: HeadKind::Regression { outputs },
    };
    let (params, _) = build_model(&spec, seed).unwrap();
    let n = 4;
    let batch = Batch {
        features: random_tensor(&mut rng, &[n, input], 1.0),
        targets: random_tensor(&mut rng, &[n, outputs], 1.0),
    };
    (spec, params, batch)
}

#[test]
fn random_mlps_pass_finite_difference_checks() {
    let start = Instant::now();
    let mut worst = 0.0_f64;
    for seed in 0..100 {
        let (spec, params, batch) = random_mlp_case(seed);
        let (_, model) = build_model(&spec, seed).unwrap();
        let lg = model.loss_graph(&params, &batch).unwrap();
        let err = fd_check(&lg.graph, lg.loss, &lg.bound.bindings, 1e-5).unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
        worst = worst.max(err);
    }
    eprintln!("worst relative error {worst:e} in {:?}", start.elapsed());
}

#[test]
fn second_derivative_of_fourth_power() {
    let mut g = Graph::new();
    let x = g.input("x", &[1]).unwrap();
    let x2 = g.square(x);
    let x4 = g.square(x2);
    let d1 = g.gradient(x4, &["x"]).unwrap()["x"];
    let d2 = g.gradient(d1, &["x"]).unwrap()["x"];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let v: f64 = rng.random_range(-3.0..3.0);
        let b = BTreeMap::from([("x".to_string(), Tensor::scalar(v))]);
        let got = g.evaluate(d2, &b).unwrap().data()[0];
        let want = 12.0 * v * v;
        assert!((got - want).abs() / want.abs().max(f64::MIN_POSITIVE) < 1e-8, "{v}: {got} vs {want}");
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for scale in [1.0, 10.0, 300.0] {
        let mut g = Graph::new();
        let z = g.constant(random_tensor(&mut rng, &[16, 7], scale));
        let p = g.softmax(z);
        let v = g.evaluate(p, &BTreeMap::new()).unwrap();
        for i in 0..16 {
            let s: f64 = v.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut g = Graph::new();
    let z = g.input("z", &[5, 3]).unwrap();
    let labels: Vec<f64> = (0..5).flat_map(|i| (0..3).map(move |j| if j == i % 3 { 1.0 } else { 0.0 })).collect();
    let t = g.constant(Tensor::new(vec![5, 3], labels).unwrap());
    let l = g.softmax_cross_entropy(z, t).unwrap();
    let b = BTreeMap::from([("z".to_string(), random_tensor(&mut rng, &[5, 3], 2.0))]);
    assert!(fd_check(&g, l, &b, 1e-5).unwrap() < 1e-7);
}

fn tanh_layer(x: &[Vec<f64>], w: &Tensor, b: &Tensor, act: bool) -> Vec<Vec<f64>> {
    let (fan_in, width) = (w.rows(), w.cols());
    x.iter()
        .map(|row| {
            (0..width)
                .map(|j| {
                    let mut z = b.data()[j];
                    for k in 0..fan_in {
                        z += row[k] * w.data()[k * width + j];
                    }
                    if act { z.tanh() } else { z }
                })
                .collect()
        })
        .collect()
}

#[test]
fn tanh_mlp_forward_matches_straight_line_recomputation() {
    let spec = ModelSpec {
        input_width: 5,
        body: (0..3)
            .map(|i| LayerSpec { width: 8 - i, activation: Activation::Tanh, batch_norm: false })
            .collect(),
        head: HeadKind::Regression { outputs: 2 },
    };
    let (params, model) = build_model(&spec, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random_tensor(&mut rng, &[9, 5], 2.0);

    let got = model.predict(&params, &x).unwrap();
    let again = model.predict(&params, &x).unwrap();
    assert_eq!(got, again);

    let mut h: Vec<Vec<f64>> = (0..9).map(|i| x.row(i).to_vec()).collect();
    for i in 0..3 {
        let w = params.tensor(&format!("body.{i}.weight")).unwrap();
        let b = params.tensor(&format!("body.{i}.bias")).unwrap();
        h = tanh_layer(&h, w, b, true);
    }
    let out = tanh_layer(&h, params.tensor("head.weight").unwrap(), params.tensor("head.bias").unwrap(), false);
    for i in 0..9 {
        for j in 0..2 {
            assert!((got.row(i)[j] - out[i][j]).abs() < 1e-12);
        }
    }
}

#[test]
fn losses_match_straight_line_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (head, outputs) in [(HeadKind::BinaryClassification, 1), (HeadKind::Regression { outputs: 3 }, 3)] {
        let spec = ModelSpec {
            input_width: 4,
            body: vec![LayerSpec { width: 6, activation: Activation::Relu, batch_norm: false }],
            head,
        };
        let (params, model) = build_model(&spec, 3).unwrap();
        let x = random_tensor(&mut rng, &[11, 4], 1.5);
        let targets: Vec<f64> = (0..11 * outputs)
            .map(|_| match head {
                HeadKind::BinaryClassification => f64::from(rng.random_bool(0.5)),
                HeadKind::Regression { .. } => rng.random_range(-2.0..2.0),
            })
            .collect();
        let batch = Batch {
            features: x.clone(),
            targets: Tensor::new(vec![11, outputs], targets.clone()).unwrap(),
        };
        let lg = model.loss_graph(&params, &batch).unwrap();
        let got = lg.graph.evaluate(lg.loss, &lg.bound.bindings).unwrap().data()[0];

        let mut g = Graph::new();
        let bound = model.bind(&mut g, &params).unwrap();
        let xe = g.constant(x);
        let fwd = model.forward(&mut g, &bound.exprs, xe, fedhtl::models::Mode::Eval).unwrap();
        let z = g.evaluate(fwd.output, &bound.bindings).unwrap();
        let want = match head {
            HeadKind::BinaryClassification => {
                z.data()
                    .iter()
                    .zip(&targets)
                    .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
                    .sum::<f64>()
                    / 11.0
            }
            HeadKind::Regression { .. } => {
                z.data().iter().zip(&targets).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (11 * outputs) as f64
            }
        };
        assert!((got - want).abs() < 1e-12, "{head:?}: {got} vs {want}");
    }
}

#[test]
fn evaluation_is_pure() {
    let (spec, params, batch) = random_mlp_case(17);
    let (_, model) = build_model(&spec, 17).unwrap();
    let lg = model.loss_graph(&params, &batch).unwrap();
    let a = lg.graph.evaluate(lg.loss, &lg.bound.bindings).unwrap();
    let b = lg.graph.evaluate(lg.loss, &lg.bound.bindings).unwrap();
    assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
}
