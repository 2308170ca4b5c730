//! Workloads shared by the criterion benchmarks in `benches/`.

use fedhtl::autodiff::Tensor;
use fedhtl::models::{build_model, Activation, Batch, HeadKind, LayerSpec, Model, ModelSpec, ParamRole, ParamSet};
use fedhtl::runtime::{ExperimentConfig, Federation};
use fedhtl::strategies::{ClientUpdate, LocalMetrics, StrategyConfig, StrategyKind};
use fedhtl::synthdata::{generate_scenario, ScenarioConfig, ScenarioKind};

fn ramp(shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| scale * ((i * 7919 % 1009) as f64 / 1009.0 - 0.5)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// A regression MLP of `depth` tanh layers of `width` units and a batch.
pub fn mlp_workload(input: usize, width: usize, depth: usize, rows: usize) -> (ParamSet, Model, Batch) {
    let spec = ModelSpec {
        input_width: input,
        body: (0..depth)
            .map(|_| LayerSpec { width, activation: Activation::Tanh, batch_norm: true })
            .collect(),
        head: HeadKind::Regression { outputs: 1 },
    };
    let (params, model) = build_model(&spec, 0).expect("valid spec");
    let batch = Batch { features: ramp(&[rows, input], 2.0), targets: ramp(&[rows, 1], 1.0) };
    (params, model, batch)
}

/// `clients` uploads of one `[rows, cols]` tensor each.
pub fn updates(clients: u32, rows: usize, cols: usize) -> Vec<ClientUpdate> {
    (1..=clients)
        .map(|id| {
            let mut p = ParamSet::new();
            p.insert("body.0.weight", ramp(&[rows, cols], id as f64), ParamRole::SharedBody)
                .expect("fresh name");
            ClientUpdate { client_id: id, shared: p, samples: 100 * id as usize, metrics: LocalMetrics::default() }
        })
        .collect()
}

/// A registered federation of eight 200-row clients.
pub fn federation(kind: StrategyKind, parallel: bool) -> Federation {
    let data = generate_scenario(&ScenarioConfig {
        kind: ScenarioKind::DistinctTasks,
        clients: 8,
        sizes: vec![200; 8],
        feature_dim: 32,
        regression_fraction: 0.5,
        heterogeneity: std::f64::consts::FRAC_PI_4,
        noise: 0.1,
        feature_shift: 0.5,
        regression_outputs: 1,
        regression_metric: fedhtl::MetricKind::Mse,
        seed: 0,
    })
    .expect("valid scenario");
    let mut strategy = StrategyConfig::new(kind);
    strategy.batch_size = 16;
    strategy.local_steps = 5;
    let mut cfg = ExperimentConfig::new(1, vec![LayerSpec { width: 16, activation: Activation::Relu, batch_norm: true }], strategy);
    cfg.parallel = parallel;
    Federation::new(&cfg, data).expect("valid experiment")
}
