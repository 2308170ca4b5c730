//! Deterministic simulator for federated learning across clients whose
//! learning tasks differ (different label rules, classification mixed with
//! regression).

pub mod autodiff;
pub mod evaluation;
pub mod models;
pub mod rng;
pub mod runtime;
pub mod strategies;
pub mod synthdata;

pub use autodiff::{Expr, Graph, Tensor};
pub use evaluation::{AggregationMode, ClientResult, EvalReport, MetricKind};
pub use models::{LayerSpec, Model, ModelSpec, ParamRole, ParamSet};
pub use runtime::{
    run_experiment, ExperimentConfig, Federation, History, Message, MessageKind, Outcome,
    ProtocolMonitor, RunError, RunErrorKind, Violation,
};
pub use strategies::{ClientUpdate, StrategyConfig, StrategyKind};
pub use synthdata::{ClientDataset, ScenarioConfig, ScenarioKind};
