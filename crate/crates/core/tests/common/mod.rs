#![allow(dead_code)]

use fedhtl::models::{Activation, LayerSpec};
use fedhtl::runtime::ExperimentConfig;
use fedhtl::strategies::{StrategyConfig, StrategyKind};
use fedhtl::synthdata::{generate_scenario, ClientDataset, ScenarioConfig, ScenarioKind};

pub fn scenario(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        kind: ScenarioKind::DistinctTasks,
        clients: 4,
        sizes: vec![40, 60, 80, 100],
        feature_dim: 4,
        regression_fraction: 0.25,
        heterogeneity: 1.0,
        noise: 0.1,
        feature_shift: 0.5,
        regression_outputs: 1,
        regression_metric: fedhtl::MetricKind::Mse,
        seed,
    }
}

pub fn datasets(seed: u64) -> Vec<ClientDataset> {
    generate_scenario(&scenario(seed)).unwrap()
}

pub fn body(batch_norm: bool) -> Vec<LayerSpec> {
    vec![LayerSpec {
        width: 6,
        activation: Activation::Tanh,
        batch_norm,
    }]
}

pub fn strategy(kind: StrategyKind) -> StrategyConfig {
    let mut s = StrategyConfig::new(kind);
    s.learning_rate = 0.05;
    s.batch_size = 8;
    s.local_steps = 2;
    s.finetune_steps = 3;
    s
}

pub fn experiment(kind: StrategyKind, rounds: u32) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(rounds, body(true), strategy(kind));
    cfg.seed = 11;
    cfg
}
