//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedhtl::autodiff::{fd_check, Tensor};
use fedhtl::evaluation::{improvement_ratio, overall_improvement, MetricKind};
use fedhtl::models::{
    build_model, is_trainable, Activation, Batch, HeadKind, LayerSpec, Model, ModelSpec, ParamRole, ParamSet,
};
use fedhtl::rng::{client_round_stream, tag};
use fedhtl::runtime::{run_experiment, ExperimentConfig, Federation, SERVER_ID};
use fedhtl::strategies::{
    fedavg_aggregate, fedmaml_update, sgd_steps, ClientUpdate, LocalMetrics, StrategyConfig, StrategyKind,
};
use fedhtl::synthdata::{generate_scenario, ClientDataset, ScenarioConfig, ScenarioKind};
use fedhtl_cli::compare::{cmd_compare, CompareArgs};
use fedhtl_cli::run::{cmd_run, RunArgs};

const FD_EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(10);
const MAML_EXACT_TOL: f64 = 1e-8;
const MAML_FD_TOL: f64 = 1e-3;
const AGG_TOL: f64 = 1e-12;
const TABLE_TOL: f64 = 0.01;
const RATIO_TOL: f64 = 0.005;
const EQUIV_TOL: f64 = 1e-12;
const SMOKE_BUDGET: Duration = Duration::from_secs(120);
const SENTINEL: f64 = 1.234_567_890_123_456_7;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn random_mlp(rng: &mut ChaCha8Rng, max_width: usize, seed: u64) -> (ParamSet, Model, usize, usize) {
    let input = rng.random_range(1..=6);
    let depth = rng.random_range(1..=3);
    let body = (0..depth)
        .map(|_| LayerSpec {
            width: rng.random_range(1..=max_width),
            activation: if rng.random_bool(0.5) { Activation::Tanh } else { Activation::Sigmoid },
            batch_norm: rng.random_bool(0.3),
        })
        .collect();
    let outputs = rng.random_range(1..=2);
    let spec = ModelSpec { input_width: input, body, head: HeadKind::Regression { outputs } };
    let (params, model) = build_model(&spec, seed).unwrap();
    (params, model, input, outputs)
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, input: usize, outputs: usize) -> Batch {
    Batch {
        features: random_tensor(rng, &[n, input], 1.0),
        targets: random_tensor(rng, &[n, outputs], 1.0),
    }
}

fn gradient_correctness() -> Result<String, String> {
    let start = Instant::now();
    let mut worst = 0.0_f64;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let max_width = if rng.random_bool(0.2) { 64 } else { 12 };
        let (params, model, input, outputs) = random_mlp(&mut rng, max_width, seed);
        let batch = random_batch(&mut rng, 4, input, outputs);
        let lg = model.loss_graph(&params, &batch).map_err(|e| e.to_string())?;
        let err = fd_check(&lg.graph, lg.loss, &lg.bound.bindings, FD_EPS).map_err(|e| e.to_string())?;
        ensure(err < GRAD_TOL, || format!("MLP {seed}: relative error {err:e}"))?;
        worst = worst.max(err);
    }
    let took = start.elapsed();
    ensure(took < GRAD_BUDGET, || format!("took {took:?}"))?;
    Ok(format!("100 MLPs, worst relative error {worst:.2e}, {:.2} s", took.as_secs_f64()))
}

/// `θ ↦ L_query(θ − α ∇L_support(θ))`, built from first-order gradients.
fn composed_loss(model: &Model, theta: &ParamSet, s: &Batch, q: &Batch, alpha: f64) -> f64 {
    let mut lg = model.loss_graph(theta, s).unwrap();
    let names: Vec<String> = theta.names().filter(|n| is_trainable(n)).map(String::from).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let grads = lg.graph.gradient(lg.loss, &refs).unwrap();
    let roots: Vec<_> = names.iter().map(|n| grads[n]).collect();
    let values = lg.graph.evaluate_many(&roots, &lg.bound.bindings).unwrap();
    let mut adapted = theta.clone();
    for (name, g) in names.iter().zip(values) {
        for (p, d) in adapted.tensor_mut(name).unwrap().data_mut().iter_mut().zip(g.data()) {
            *p -= alpha * d;
        }
    }
    let lq = model.loss_graph(&adapted, q).unwrap();
    lq.graph.evaluate(lq.loss, &lq.bound.bindings).unwrap().data()[0]
}

fn second_order() -> Result<String, String> {
    // two regression outputs at x = 0: the loss in the first bias is ½(θ − c)²
    let spec = ModelSpec { input_width: 1, body: vec![], head: HeadKind::Regression { outputs: 2 } };
    let (mut params, model) = build_model(&spec, 0).unwrap();
    let mut worst_exact = 0.0_f64;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (theta, c, alpha): (f64, f64, f64) =
            (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.0..0.9));
        params.tensor_mut("head.bias").unwrap().data_mut()[0] = theta;
        let b = Batch {
            features: Tensor::new(vec![1, 1], vec![0.0]).unwrap(),
            targets: Tensor::new(vec![1, 2], vec![c, 0.0]).unwrap(),
        };
        let mg = fedmaml_update(&model, &params, &b, &b, alpha).map_err(|e| e.to_string())?;
        let got = mg.grads.tensor("head.bias").unwrap().data()[0];
        let want = (1.0 - alpha).powi(2) * (theta - c);
        worst_exact = worst_exact.max((got - want).abs());
    }
    ensure(worst_exact < MAML_EXACT_TOL, || format!("scalar quadratic off by {worst_exact:e}"))?;

    let h = 1e-5;
    let mut worst_fd = 0.0_f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (params, model, input, outputs) = random_mlp(&mut rng, 6, seed);
        let s = random_batch(&mut rng, 5, input, outputs);
        let q = random_batch(&mut rng, 5, input, outputs);
        let alpha = rng.random_range(0.05..0.5);
        let mg = fedmaml_update(&model, &params, &s, &q, alpha).map_err(|e| e.to_string())?;
        for (name, g) in mg.grads.iter() {
            for k in 0..g.tensor.numel() {
                let mut plus = params.clone();
                plus.tensor_mut(name).unwrap().data_mut()[k] += h;
                let mut minus = params.clone();
                minus.tensor_mut(name).unwrap().data_mut()[k] -= h;
                let fd = (composed_loss(&model, &plus, &s, &q, alpha) - composed_loss(&model, &minus, &s, &q, alpha))
                    / (2.0 * h);
                let a = g.tensor.data()[k];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                ensure(rel < MAML_FD_TOL, || format!("MLP {seed} {name}[{k}]: {a} vs {fd}"))?;
                worst_fd = worst_fd.max(rel);
            }
        }
    }
    Ok(format!(
        "quadratic worst abs error {worst_exact:.1e}; 20 MLPs worst relative error {worst_fd:.2e}"
    ))
}

fn aggregation_oracle() -> Result<String, String> {
    let mut worst = 0.0_f64;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clients = rng.random_range(1..=13);
        let shape = [rng.random_range(1..=4), rng.random_range(1..=5)];
        let rows: Vec<(Tensor, usize)> = (0..clients)
            .map(|_| (random_tensor(&mut rng, &shape, 10.0), rng.random_range(1..5000)))
            .collect();
        let updates: Vec<ClientUpdate> = rows
            .iter()
            .enumerate()
            .map(|(i, (t, n))| {
                let mut p = ParamSet::new();
                p.insert("body.0.weight", t.clone(), ParamRole::SharedBody).unwrap();
                ClientUpdate {
                    client_id: i as u32 + 1,
                    shared: p,
                    samples: *n,
                    metrics: LocalMetrics::default(),
                }
            })
            .collect();
        let out = fedavg_aggregate(&updates).map_err(|e| e.to_string())?;
        let got = out.tensor("body.0.weight").unwrap().data();
        let total: f64 = rows.iter().map(|(_, n)| *n as f64).sum();
        for (k, g) in got.iter().enumerate() {
            let brute = rows.iter().map(|(t, n)| t.data()[k] * *n as f64).sum::<f64>() / total;
            worst = worst.max((g - brute).abs());
        }
    }
    ensure(worst <= AGG_TOL, || format!("worst deviation {worst:e}"))?;
    Ok(format!("100 update sets, worst deviation {worst:.1e}"))
}

fn evaluation_arithmetic() -> Result<String, String> {
    let rows: [(&str, f64, [f64; 3]); 7] = [
        ("FedAvg", 2.22, [1.03, 3.31, 2.32]),
        ("FedAvg+FT", 2.47, [1.05, 3.29, 3.08]),
        ("FedProx", 2.32, [0.95, 3.38, 2.62]),
        ("FedBN", 2.41, [0.99, 3.32, 2.92]),
        ("FedBN+FT", 2.51, [1.00, 3.31, 3.21]),
        ("Ditto", 3.53, [0.73, 3.21, 6.66]),
        ("FedMAML", 3.57, [1.07, 2.40, 7.24]),
    ];
    let mut worst = 0.0_f64;
    for (name, overall, clients) in rows {
        let got = overall_improvement(&clients).map_err(|e| e.to_string())?;
        let dev = (got - overall).abs();
        ensure(dev <= TABLE_TOL + 1e-12, || format!("{name}: {got:.4} vs {overall}"))?;
        worst = worst.max(dev);
    }
    let r = improvement_ratio(0.724, 0.675, MetricKind::Accuracy.indicator()).map_err(|e| e.to_string())?;
    ensure((r - 7.26).abs() < RATIO_TOL, || format!("client 3 ratio {r}"))?;
    Ok(format!("7 rows, worst deviation {worst:.4} pp; 0.724 vs 0.675 gives {r:.4}%"))
}

fn sentinel_hex() -> String {
    hex::encode(SENTINEL.to_le_bytes())
}

fn protocol_enforcement() -> Result<String, String> {
    let data = std::fs::read_to_string(fixtures().join("data/client1.csv")).unwrap();
    ensure(data.contains("1.2345678901234567"), || "fixture data lacks the sentinel".into())?;
    let needle = sentinel_hex();
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = 0;
    for fixture in ["rogue-kind", "rogue-oversized"] {
        for seed in 0..5 {
            let out = tmp.path().join(format!("{fixture}-{seed}"));
            let status = Command::new(env!("CARGO_BIN_EXE_fedhtl"))
                .arg("run")
                .arg(fixtures().join(format!("{fixture}.toml")))
                .args(["--seed", &seed.to_string(), "--out"])
                .arg(&out)
                .output()
                .unwrap();
            ensure(status.status.code() == Some(2), || {
                format!("{fixture} seed {seed}: exit {:?}", status.status.code())
            })?;
            let dir = out.join(format!("seed-{seed}"));
            let log = std::fs::read_to_string(dir.join("comm.log")).unwrap();
            ensure(log.contains("violation:"), || format!("{fixture} seed {seed}: no logged violation"))?;
            for f in ["comm.log", "payloads.log", "history.tsv", "error.json"] {
                let text = std::fs::read_to_string(dir.join(f)).unwrap();
                ensure(!text.contains(&needle) && !text.contains("1.2345678901234567"), || {
                    format!("{fixture} seed {seed}: sentinel in {f}")
                })?;
            }
            let audit = Command::new(env!("CARGO_BIN_EXE_fedhtl"))
                .arg("protocol-audit")
                .arg(dir.join("comm.log"))
                .output()
                .unwrap();
            ensure(audit.status.code() == Some(2), || format!("{fixture} seed {seed}: audit passed"))?;
            runs += 1;
        }
    }
    Ok(format!("{runs}/{runs} rogue runs stopped with exit 2, no sentinel in any log"))
}

fn small_scenario(seed: u64) -> Vec<ClientDataset> {
    generate_scenario(&ScenarioConfig {
        kind: ScenarioKind::DistinctTasks,
        clients: 4,
        sizes: vec![40, 60, 80, 100],
        feature_dim: 4,
        regression_fraction: 0.25,
        heterogeneity: 1.0,
        noise: 0.1,
        feature_shift: 0.5,
        regression_outputs: 1,
        regression_metric: MetricKind::Mse,
        seed,
    })
    .unwrap()
}

fn experiment(kind: StrategyKind, rounds: u32) -> ExperimentConfig {
    let mut s = StrategyConfig::new(kind);
    s.learning_rate = 0.05;
    s.batch_size = 8;
    s.local_steps = 2;
    let body = vec![LayerSpec { width: 6, activation: Activation::Tanh, batch_norm: true }];
    let mut cfg = ExperimentConfig::new(rounds, body, s);
    cfg.seed = 11;
    cfg
}

fn max_diff(a: &ParamSet, b: &ParamSet) -> f64 {
    a.iter()
        .zip(b.iter())
        .flat_map(|((na, pa), (nb, pb))| {
            assert_eq!(na, nb);
            pa.tensor.data().iter().zip(pb.tensor.data()).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

fn degenerate_equivalences() -> Result<String, String> {
    let rounds = 20;
    let avg = run_experiment(&experiment(StrategyKind::FedAvg, rounds), small_scenario(7)).map_err(|e| e.to_string())?;
    let mut cfg = experiment(StrategyKind::FedProx, rounds);
    cfg.strategy.mu = 0.0;
    let prox = run_experiment(&cfg, small_scenario(7)).map_err(|e| e.to_string())?;
    let prox_diff = max_diff(&avg.global, &prox.global).max(
        avg.clients.iter().zip(&prox.clients).map(|(a, p)| max_diff(&a.params, &p.params)).fold(0.0, f64::max),
    );
    ensure(prox_diff <= EQUIV_TOL, || format!("FedProx(0) vs FedAvg: {prox_diff:e}"))?;

    let iso = run_experiment(&experiment(StrategyKind::Isolated, rounds), small_scenario(9)).map_err(|e| e.to_string())?;
    let mut cfg = experiment(StrategyKind::Ditto, rounds);
    cfg.strategy.lambda = 0.0;
    let ditto = run_experiment(&cfg, small_scenario(9)).map_err(|e| e.to_string())?;
    let ditto_diff = iso
        .clients
        .iter()
        .zip(&ditto.clients)
        .map(|(i, d)| max_diff(&i.params, d.personal.as_ref().unwrap()))
        .fold(0.0, f64::max);
    ensure(ditto_diff <= EQUIV_TOL, || format!("Ditto(0) vs Isolated: {ditto_diff:e}"))?;

    let mut cfg = experiment(StrategyKind::FedBN, rounds);
    cfg.record_payloads = true;
    let data = small_scenario(10);
    let fed = Federation::new(&cfg, data.clone()).map_err(|e| e.to_string())?;
    let initial: Vec<ParamSet> = fed.clients.iter().map(|c| c.params.clone()).collect();
    let out = fed.run(rounds).map_err(|e| e.to_string())?;
    let mut bn_diff = 0.0_f64;
    let mut compared = 0;
    for (k, ds) in data.iter().enumerate() {
        let mut replay = initial[k].clone();
        for round in 0..rounds {
            let down = out
                .history
                .transfers
                .iter()
                .find(|t| t.round == round && t.sender == SERVER_ID && t.receiver == ds.id)
                .unwrap();
            replay.update_from(&ParamSet::from_bytes(&down.payload).unwrap()).unwrap();
            let mut rng = client_round_stream(cfg.seed, tag::LOCAL_TRAIN, ds.id, round);
            sgd_steps(&out.clients[k].model, &mut replay, ds, cfg.strategy.base().sgd(), &mut rng, None)
                .map_err(|e| e.to_string())?;
        }
        for (name, p) in out.clients[k].params.iter().filter(|(_, p)| p.role == ParamRole::BatchNorm) {
            let r = replay.tensor(name).unwrap();
            for (a, b) in p.tensor.data().iter().zip(r.data()) {
                bn_diff = bn_diff.max((a - b).abs());
            }
            compared += 1;
        }
    }
    ensure(compared > 0 && bn_diff <= EQUIV_TOL, || format!("FedBN BN vs replay: {bn_diff:e}"))?;
    Ok(format!(
        "{rounds} rounds: FedProx {prox_diff:.1e}, Ditto {ditto_diff:.1e}, FedBN {bn_diff:.1e} over {compared} BN tensors"
    ))
}

fn determinism() -> Result<String, String> {
    for kind in StrategyKind::ALL {
        let cfg = experiment(kind, 3);
        let a = run_experiment(&cfg, small_scenario(3)).map_err(|e| e.to_string())?;
        let b = run_experiment(&cfg, small_scenario(3)).map_err(|e| e.to_string())?;
        let mut seq_cfg = cfg.clone();
        seq_cfg.parallel = false;
        let c = run_experiment(&seq_cfg, small_scenario(3)).map_err(|e| e.to_string())?;
        ensure(a.history == b.history && a.results == b.results, || format!("{kind:?} differs between runs"))?;
        ensure(a.history == c.history && a.results == c.results, || {
            format!("{kind:?} differs from sequential execution")
        })?;
    }
    let tmp = tempfile::tempdir().unwrap();
    let config = repo_root().join("configs/quickstart.toml");
    let mut manifests = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_fedhtl"))
            .arg("run")
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        ensure(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())?;
        manifests.push(std::fs::read(out.join("manifest.json")).unwrap());
    }
    ensure(manifests[0] == manifests[1], || "manifests differ".into())?;
    Ok(format!(
        "{} strategies bitwise stable (parallel = sequential); CLI manifests identical",
        StrategyKind::ALL.len()
    ))
}

fn directional_smoke() -> Result<String, String> {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let dir = repo_root().join("configs/directional");
    for name in ["isolated", "fedbn", "fedavg-shared"] {
        cmd_run(&RunArgs {
            config: dir.join(format!("{name}.toml")),
            seed: None,
            out: Some(tmp.path().join(name)),
        })
        .map_err(|e| format!("{name}: {e}"))?;
    }
    let overall = |method: &str| {
        cmd_compare(&CompareArgs {
            baseline: tmp.path().join("isolated"),
            method: tmp.path().join(method),
            out: Some(tmp.path().join(format!("{method}-vs-isolated"))),
        })
        .map(|(_, o)| o.overall_improvement_pct)
        .map_err(|e| e.to_string())
    };
    let fedbn = overall("fedbn")?;
    let fedavg = overall("fedavg-shared")?;
    let took = start.elapsed();
    ensure(fedbn > 0.0, || format!("FedBN overall {fedbn:+.2}%"))?;
    ensure(fedavg < fedbn, || format!("full-sharing FedAvg {fedavg:+.2}% ≥ FedBN {fedbn:+.2}%"))?;
    ensure(took < SMOKE_BUDGET, || format!("took {took:?}"))?;
    Ok(format!(
        "FedBN {fedbn:+.2}% > full-sharing FedAvg {fedavg:+.2}% over Isolated, {:.1} s",
        took.as_secs_f64()
    ))
}

fn main() -> std::process::ExitCode {
    let criteria: [(u32, &str, Check); 8] = [
        (1, "gradient correctness", gradient_correctness),
        (2, "second-order correctness", second_order),
        (3, "aggregation oracle", aggregation_oracle),
        (4, "evaluation arithmetic", evaluation_arithmetic),
        (5, "protocol enforcement", protocol_enforcement),
        (6, "degenerate equivalences", degenerate_equivalences),
        (7, "determinism", determinism),
        (8, "directional smoke test", directional_smoke),
    ];
    let mut failed = Vec::new();
    for (id, name, check) in criteria {
        let result = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        match result {
            Ok(detail) => println!("PASS  criterion {id}: {name}: {detail}"),
            Err(detail) => {
                println!("FAIL  criterion {id}: {name}: {detail}");
                failed.push(id);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: {} of {} criteria passed", criteria.len(), criteria.len());
        std::process::ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::ExitCode::FAILURE
    }
}
