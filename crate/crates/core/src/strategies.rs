//! The federated method families as pluggable strategies.
//!
//! A strategy decides which parameters are shared, how a client trains
//! locally, what it uploads, how the server aggregates and what happens
//! after the last round. The runtime owns message transport and ordering.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Expr, Graph, Tensor};
use crate::models::{is_trainable, Batch, Model, ModelError, Mode, ParamRole, ParamSet};
use crate::rng::{client_round_stream, tag, Stream};
use crate::runtime::protocol::{scalar_payload, Message, MessageKind, SERVER_ID};
use crate::synthdata::ClientDataset;

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("invalid strategy config: {0}")]
    InvalidConfig(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("parameter mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(ModelError),
}

impl StrategyError {
    pub fn is_numeric(&self) -> bool {
        matches!(self, StrategyError::NonFinite(_))
    }
}

impl From<ModelError> for StrategyError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Autodiff(a @ AutodiffError::NonFinite { .. }) => {
                StrategyError::NonFinite(a.to_string())
            }
            other => StrategyError::Model(other),
        }
    }
}

impl From<AutodiffError> for StrategyError {
    fn from(e: AutodiffError) -> Self {
        ModelError::from(e).into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "isolated")]
    Isolated,
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedavg-ft")]
    FedAvgFT,
    #[serde(rename = "fedprox")]
    FedProx,
    #[serde(rename = "fedbn")]
    FedBN,
    #[serde(rename = "fedbn-ft")]
    FedBNFT,
    #[serde(rename = "ditto")]
    Ditto,
    #[serde(rename = "fedmaml")]
    FedMAML,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 8] = [
        StrategyKind::Isolated,
        StrategyKind::FedAvg,
        StrategyKind::FedAvgFT,
        StrategyKind::FedProx,
        StrategyKind::FedBN,
        StrategyKind::FedBNFT,
        StrategyKind::Ditto,
        StrategyKind::FedMAML,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Isolated => "isolated",
            StrategyKind::FedAvg => "fedavg",
            StrategyKind::FedAvgFT => "fedavg-ft",
            StrategyKind::FedProx => "fedprox",
            StrategyKind::FedBN => "fedbn",
            StrategyKind::FedBNFT => "fedbn-ft",
            StrategyKind::Ditto => "ditto",
            StrategyKind::FedMAML => "fedmaml",
        }
    }

    pub fn fine_tunes(self) -> bool {
        matches!(self, StrategyKind::FedAvgFT | StrategyKind::FedBNFT)
    }
}

/// Scalar hyper-parameters as resolved for one client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Hyper {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_steps: usize,
    pub mu: f64,
    pub lambda: f64,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub eval_adaptation_steps: usize,
}

impl Hyper {
    pub fn sgd(&self) -> SgdParams {
        SgdParams {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            steps: self.local_steps,
        }
    }

    fn validate(&self, who: &str) -> Result<(), StrategyError> {
        let err = |m: String| Err(StrategyError::InvalidConfig(format!("{who}: {m}")));
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("inner_lr", self.inner_lr),
            ("outer_lr", self.outer_lr),
            ("finetune_lr", self.finetune_lr),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return err(format!("{name} must be a positive number, got {v}"));
            }
        }
        for (name, v) in [("mu", self.mu), ("lambda", self.lambda)] {
            if !(v.is_finite() && v >= 0.0) {
                return err(format!("{name} must be ≥ 0, got {v}"));
            }
        }
        if self.batch_size == 0 {
            return err("batch_size must be ≥ 1".into());
        }
        if self.local_steps == 0 {
            return err("local_steps must be ≥ 1".into());
        }
        Ok(())
    }
}

/// Per-client replacement of any scalar.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientOverride {
    pub client: u32,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub local_steps: Option<usize>,
    pub mu: Option<f64>,
    pub lambda: Option<f64>,
    pub inner_lr: Option<f64>,
    pub outer_lr: Option<f64>,
    pub finetune_steps: Option<usize>,
    pub finetune_lr: Option<f64>,
    pub eval_adaptation_steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RogueMode {
    /// Sends raw training rows under an unlisted kind tag.
    NonWhitelistedKind,
    /// Appends raw training rows to the parameter upload.
    OversizedParameters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::local_steps")]
    pub local_steps: usize,
    #[serde(default = "defaults::mu")]
    pub mu: f64,
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    #[serde(default = "defaults::meta_lr")]
    pub inner_lr: f64,
    #[serde(default = "defaults::meta_lr")]
    pub outer_lr: f64,
    #[serde(default = "defaults::finetune_steps")]
    pub finetune_steps: usize,
    /// Defaults to `learning_rate`.
    #[serde(default)]
    pub finetune_lr: Option<f64>,
    #[serde(default = "defaults::eval_adaptation_steps")]
    pub eval_adaptation_steps: usize,
    /// Also share the head (ablation); requires equal head shapes.
    #[serde(default)]
    pub share_heads: bool,
    #[serde(default)]
    pub rogue: Option<RogueMode>,
    #[serde(default)]
    pub overrides: Vec<ClientOverride>,
}

mod defaults {
    pub fn learning_rate() -> f64 {
        0.1
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn local_steps() -> usize {
        1
    }
    pub fn mu() -> f64 {
        0.01
    }
    pub fn lambda() -> f64 {
        0.1
    }
    pub fn meta_lr() -> f64 {
        0.01
    }
    pub fn finetune_steps() -> usize {
        5
    }
    pub fn eval_adaptation_steps() -> usize {
        1
    }
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            learning_rate: defaults::learning_rate(),
            batch_size: defaults::batch_size(),
            local_steps: defaults::local_steps(),
            mu: defaults::mu(),
            lambda: defaults::lambda(),
            inner_lr: defaults::meta_lr(),
            outer_lr: defaults::meta_lr(),
            finetune_steps: defaults::finetune_steps(),
            finetune_lr: None,
            eval_adaptation_steps: defaults::eval_adaptation_steps(),
            share_heads: false,
            rogue: None,
            overrides: Vec::new(),
        }
    }

    pub fn base(&self) -> Hyper {
        Hyper {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            local_steps: self.local_steps,
            mu: self.mu,
            lambda: self.lambda,
            inner_lr: self.inner_lr,
            outer_lr: self.outer_lr,
            finetune_steps: self.finetune_steps,
            finetune_lr: self.finetune_lr.unwrap_or(self.learning_rate),
            eval_adaptation_steps: self.eval_adaptation_steps,
        }
    }

    pub fn for_client(&self, client: u32) -> Hyper {
        let mut h = self.base();
        for o in self.overrides.iter().filter(|o| o.client == client) {
            if let Some(v) = o.learning_rate {
                h.learning_rate = v;
                if self.finetune_lr.is_none() && o.finetune_lr.is_none() {
                    h.finetune_lr = v;
                }
            }
            h.batch_size = o.batch_size.unwrap_or(h.batch_size);
            h.local_steps = o.local_steps.unwrap_or(h.local_steps);
            h.mu = o.mu.unwrap_or(h.mu);
            h.lambda = o.lambda.unwrap_or(h.lambda);
            h.inner_lr = o.inner_lr.unwrap_or(h.inner_lr);
            h.outer_lr = o.outer_lr.unwrap_or(h.outer_lr);
            h.finetune_steps = o.finetune_steps.unwrap_or(h.finetune_steps);
            h.finetune_lr = o.finetune_lr.unwrap_or(h.finetune_lr);
            h.eval_adaptation_steps = o.eval_adaptation_steps.unwrap_or(h.eval_adaptation_steps);
        }
        h
    }

    pub fn validate(&self) -> Result<(), StrategyError> {
        self.base().validate("strategy")?;
        for o in &self.overrides {
            if o.client == 0 {
                return Err(StrategyError::InvalidConfig(
                    "override client ids are 1-based".into(),
                ));
            }
            self.for_client(o.client)
                .validate(&format!("override for client {}", o.client))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdParams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LocalMetrics {
    /// Mean minibatch loss over the round's local steps.
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u32,
    /// Post-update values, or outer gradients for FedMAML.
    pub shared: ParamSet,
    pub samples: usize,
    pub metrics: LocalMetrics,
}

/// Cycles through a shuffled copy of the train rows, reshuffling when
/// exhausted. The final batch of a pass may be short.
pub struct MinibatchSampler {
    rows: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl MinibatchSampler {
    pub fn new(rows: &[usize], batch: usize, rng: &mut Stream) -> Self {
        assert!(batch > 0 && !rows.is_empty(), "sampler needs rows and a batch size");
        let mut rows = rows.to_vec();
        rows.shuffle(rng);
        Self { rows, pos: 0, batch }
    }

    pub fn next_batch(&mut self, rng: &mut Stream) -> Vec<usize> {
        if self.pos >= self.rows.len() {
            self.rows.shuffle(rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.rows.len());
        let out = self.rows[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

/// A quadratic pull toward `reference` with weight `weight`, as in the
/// proximal and personalization objectives.
#[derive(Debug, Clone, Copy)]
pub struct Penalty<'a> {
    pub reference: &'a ParamSet,
    pub weight: f64,
}

/// `task_loss + (μ/2) Σ ‖w − w_global‖²` over the trainable names in
/// `global`.
pub fn fedprox_loss(
    graph: &mut Graph,
    task_loss: Expr,
    params: &BTreeMap<String, Expr>,
    global: &ParamSet,
    mu: f64,
) -> Result<Expr, StrategyError> {
    let mut total: Option<Expr> = None;
    for (name, g) in global.iter().filter(|(n, _)| is_trainable(n)) {
        let w = *params
            .get(name)
            .ok_or_else(|| StrategyError::Mismatch(format!("`{name}` missing from local params")))?;
        if graph.shape(w) != g.tensor.shape() {
            return Err(StrategyError::Mismatch(format!(
                "`{name}`: local {:?} vs global {:?}",
                graph.shape(w),
                g.tensor.shape()
            )));
        }
        let c = graph.constant(g.tensor.clone());
        let d = graph.sub(w, c)?;
        let sq = graph.square(d);
        let s = graph.sum_all(sq);
        total = Some(match total {
            Some(t) => graph.add(t, s)?,
            None => s,
        });
    }
    match total {
        Some(t) => {
            let term = graph.scale(t, mu / 2.0);
            Ok(graph.add(task_loss, term)?)
        }
        None => Ok(task_loss),
    }
}

fn trainable_names(params: &ParamSet) -> Vec<String> {
    params
        .names()
        .filter(|n| is_trainable(n))
        .map(str::to_string)
        .collect()
}

fn axpy(target: &mut Tensor, a: f64, x: &Tensor) {
    for (t, v) in target.data_mut().iter_mut().zip(x.data()) {
        *t += a * v;
    }
}

/// One gradient evaluation: loss value, gradient per trainable name, and
/// the train-mode batch statistics.
struct Evaluated {
    loss: f64,
    grads: Vec<(String, Tensor)>,
    bn_stats: Vec<(usize, Tensor, Tensor)>,
}

fn loss_and_gradients(
    model: &Model,
    params: &ParamSet,
    batch: &Batch,
    penalty: Option<Penalty<'_>>,
) -> Result<Evaluated, StrategyError> {
    let mut lg = model.loss_graph(params, batch)?;
    let mut loss = lg.loss;
    if let Some(p) = penalty {
        loss = fedprox_loss(&mut lg.graph, loss, &lg.bound.exprs, p.reference, p.weight)?;
    }
    let names = trainable_names(params);
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let grads = lg.graph.gradient(loss, &refs)?;
    let mut roots = vec![loss];
    roots.extend(names.iter().map(|n| grads[n]));
    for (_, m, v) in &lg.bn_stats {
        roots.push(*m);
        roots.push(*v);
    }
    let mut values = lg.graph.evaluate_many(&roots, &lg.bound.bindings)?.into_iter();
    let loss = values.next().expect("loss").item().expect("scalar loss");
    let grads = names
        .into_iter()
        .map(|n| (n, values.next().expect("gradient")))
        .collect();
    let bn_stats = lg
        .bn_stats
        .iter()
        .map(|(layer, _, _)| {
            let m = values.next().expect("bn mean");
            let v = values.next().expect("bn var");
            (*layer, m, v)
        })
        .collect();
    Ok(Evaluated {
        loss,
        grads,
        bn_stats,
    })
}

/// Minibatch SGD on all trainable parameters of `params`, with an optional
/// quadratic penalty. Running statistics follow the batches. Returns the
/// mean loss over the steps.
pub fn sgd_steps(
    model: &Model,
    params: &mut ParamSet,
    dataset: &ClientDataset,
    sgd: SgdParams,
    rng: &mut Stream,
    penalty: Option<Penalty<'_>>,
) -> Result<f64, StrategyError> {
    if sgd.steps == 0 {
        return Ok(0.0);
    }
    if dataset.splits.train.is_empty() {
        return Err(StrategyError::Mismatch(format!(
            "client {} has an empty train split",
            dataset.id
        )));
    }
    let mut sampler = MinibatchSampler::new(&dataset.splits.train, sgd.batch_size, rng);
    let mut total = 0.0;
    for _ in 0..sgd.steps {
        let rows = sampler.next_batch(rng);
        let batch = dataset.batch(&rows);
        let ev = loss_and_gradients(model, params, &batch, penalty)?;
        if !ev.loss.is_finite() {
            return Err(StrategyError::NonFinite(format!("loss {}", ev.loss)));
        }
        for (name, g) in &ev.grads {
            axpy(params.tensor_mut(name).expect("named"), -sgd.learning_rate, g);
        }
        model.update_running_stats(params, &ev.bn_stats, rows.len())?;
        total += ev.loss;
    }
    Ok(total / sgd.steps as f64)
}

/// Local SGD from the client's current params, returning the updated shared
/// subset chosen by `select`.
pub fn local_sgd(
    model: &Model,
    params: &mut ParamSet,
    dataset: &ClientDataset,
    sgd: SgdParams,
    rng: &mut Stream,
    select: impl Fn(&ParamSet) -> ParamSet,
) -> Result<ClientUpdate, StrategyError> {
    let loss = sgd_steps(model, params, dataset, sgd, rng, None)?;
    Ok(ClientUpdate {
        client_id: dataset.id,
        shared: select(params),
        samples: dataset.train_count(),
        metrics: LocalMetrics { train_loss: loss },
    })
}

/// Weighted mean of aligned parameter sets. Inputs are combined in
/// ascending client id, so the result does not depend on input order.
pub fn weighted_average(entries: &[(u32, &ParamSet, f64)]) -> Result<ParamSet, StrategyError> {
    let mut sorted: Vec<&(u32, &ParamSet, f64)> = entries.iter().collect();
    sorted.sort_by_key(|e| e.0);
    let (_, first, _) = **sorted
        .first()
        .ok_or_else(|| StrategyError::Mismatch("nothing to aggregate".into()))?;
    let total: f64 = sorted.iter().map(|e| e.2).sum();
    if !(total.is_finite() && total > 0.0) || sorted.iter().any(|e| !(e.2 >= 0.0)) {
        return Err(StrategyError::Mismatch("aggregation weights must be ≥ 0 with a positive sum".into()));
    }
    let mut out = first.clone();
    for (name, _) in first.iter() {
        let shape = first.tensor(name).expect("named").shape().to_vec();
        let mut acc = Tensor::zeros(&shape);
        for (id, p, w) in &sorted {
            let t = p.tensor(name).ok_or_else(|| {
                StrategyError::Mismatch(format!("client {id} update lacks `{name}`"))
            })?;
            if t.shape() != shape.as_slice() {
                return Err(StrategyError::Mismatch(format!(
                    "client {id} `{name}`: shape {:?} vs {shape:?}",
                    t.shape()
                )));
            }
            axpy(&mut acc, w / total, t);
        }
        *out.tensor_mut(name).expect("named") = acc;
    }
    for (id, p, _) in &sorted {
        if p.len() != first.len() {
            return Err(StrategyError::Mismatch(format!(
                "client {id} update has {} entries, expected {}",
                p.len(),
                first.len()
            )));
        }
    }
    Ok(out)
}

/// Sample-weighted mean with weights `nᵢ / Σn`.
pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<ParamSet, StrategyError> {
    if let Some(u) = updates.iter().find(|u| u.samples == 0) {
        return Err(StrategyError::Mismatch(format!("client {} reported 0 samples", u.client_id)));
    }
    let entries: Vec<(u32, &ParamSet, f64)> = updates
        .iter()
        .map(|u| (u.client_id, &u.shared, u.samples as f64))
        .collect();
    weighted_average(&entries)
}

/// Shared body only: batch-norm parameters and heads stay local.
pub fn fedbn_shared_subset(params: &ParamSet) -> ParamSet {
    params.partition(|r| r == ParamRole::SharedBody).0
}

/// Advances the personal model on `f(v) + (λ/2)‖v − w_global‖²`.
pub fn ditto_step(
    model: &Model,
    personal: &mut ParamSet,
    global_shared: &ParamSet,
    dataset: &ClientDataset,
    lambda: f64,
    sgd: SgdParams,
    rng: &mut Stream,
) -> Result<f64, StrategyError> {
    let penalty = Penalty {
        reference: global_shared,
        weight: lambda,
    };
    sgd_steps(model, personal, dataset, sgd, rng, Some(penalty))
}

/// Outer gradient of one meta step.
#[derive(Debug, Clone)]
pub struct MetaGradient {
    /// `∇θ L_query(θ − α ∇L_support(θ))` for every trainable parameter.
    pub grads: ParamSet,
    pub query_loss: f64,
    /// Batch statistics of the support pass.
    pub support_stats: Vec<(usize, Tensor, Tensor)>,
}

/// Second-order meta-gradient: the inner step is part of the graph, so the
/// outer gradient flows through it exactly.
pub fn fedmaml_update(
    model: &Model,
    theta: &ParamSet,
    support: &Batch,
    query: &Batch,
    inner_lr: f64,
) -> Result<MetaGradient, StrategyError> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, theta)?;
    let names = trainable_names(theta);
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();

    let xs = g.constant(support.features.clone());
    let fs = model.forward(&mut g, &bound.exprs, xs, Mode::Train)?;
    let ls = model.loss(&mut g, fs.output, &support.targets)?;
    let inner = g.gradient(ls, &refs)?;

    let mut adapted = bound.exprs.clone();
    for name in &names {
        let step = g.scale(inner[name], inner_lr);
        let p = g.sub(bound.exprs[name], step)?;
        adapted.insert(name.clone(), p);
    }
    let xq = g.constant(query.features.clone());
    let fq = model.forward(&mut g, &adapted, xq, Mode::Train)?;
    let lq = model.loss(&mut g, fq.output, &query.targets)?;
    let outer = g.gradient(lq, &refs)?;

    let mut roots = vec![lq];
    roots.extend(names.iter().map(|n| outer[n]));
    for (_, m, v) in &fs.bn_stats {
        roots.push(*m);
        roots.push(*v);
    }
    let mut values = g.evaluate_many(&roots, &bound.bindings)?.into_iter();
    let query_loss = values.next().expect("loss").item().expect("scalar loss");
    let (mut grads, _) = theta.partition_by(|n, _| is_trainable(n));
    for name in &names {
        *grads.tensor_mut(name).expect("named") = values.next().expect("gradient");
    }
    let support_stats = fs
        .bn_stats
        .iter()
        .map(|(layer, _, _)| {
            let m = values.next().expect("bn mean");
            let v = values.next().expect("bn var");
            (*layer, m, v)
        })
        .collect();
    Ok(MetaGradient {
        grads,
        query_loss,
        support_stats,
    })
}

/// Two disjoint minibatches of the train split; halves of it when it holds
/// fewer than two batches.
pub fn support_query_rows(train: &[usize], batch: usize, rng: &mut Stream) -> (Vec<usize>, Vec<usize>) {
    let mut rows = train.to_vec();
    rows.shuffle(rng);
    let b = batch.min(rows.len() / 2).max(1);
    let query_end = (2 * b).min(rows.len());
    (rows[..b].to_vec(), rows[b..query_end].to_vec())
}

/// Local SGD on all parameters after federated training.
pub fn fine_tune(
    model: &Model,
    params: &mut ParamSet,
    dataset: &ClientDataset,
    sgd: SgdParams,
    rng: &mut Stream,
) -> Result<f64, StrategyError> {
    sgd_steps(model, params, dataset, sgd, rng, None)
}

/// Inner-loop adaptation before evaluation: `steps` gradient steps of size
/// `inner_lr` on train minibatches. Running statistics are left unchanged.
pub fn maml_adapt(
    model: &Model,
    params: &ParamSet,
    dataset: &ClientDataset,
    inner_lr: f64,
    steps: usize,
    batch_size: usize,
    rng: &mut Stream,
) -> Result<ParamSet, StrategyError> {
    let mut adapted = params.clone();
    if steps == 0 {
        return Ok(adapted);
    }
    let mut sampler = MinibatchSampler::new(&dataset.splits.train, batch_size, rng);
    for _ in 0..steps {
        let rows = sampler.next_batch(rng);
        let ev = loss_and_gradients(model, &adapted, &dataset.batch(&rows), None)?;
        for (name, g) in &ev.grads {
            axpy(adapted.tensor_mut(name).expect("named"), -inner_lr, g);
        }
    }
    Ok(adapted)
}

/// A client's data, model and local parameter copies.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub dataset: ClientDataset,
    pub model: Model,
    /// The local model; for Ditto, the global-track copy.
    pub params: ParamSet,
    /// Ditto's personal model.
    pub personal: Option<ParamSet>,
    pub hyper: Hyper,
}

impl ClientState {
    pub fn id(&self) -> u32 {
        self.dataset.id
    }
}

/// Where a client is in the experiment when a hook runs.
#[derive(Debug, Clone, Copy)]
pub struct Context {
    pub seed: u64,
    pub round: u32,
}

/// Parameters used to evaluate a client.
pub struct EvalParams {
    pub primary: ParamSet,
    /// FedMAML's pre-adaptation parameters, reported separately.
    pub unadapted: Option<ParamSet>,
}

/// Hooks the runtime calls. Implementations hold no per-round state.
pub trait Strategy: Send + Sync {
    fn kind(&self) -> StrategyKind;

    fn communicates(&self) -> bool {
        self.kind() != StrategyKind::Isolated
    }

    fn shared_subset(&self, params: &ParamSet) -> ParamSet;

    fn upload_kind(&self) -> MessageKind {
        MessageKind::Parameters
    }

    fn init_client(&self, _client: &mut ClientState) {}

    /// Trains locally after `broadcast` has been applied to `client.params`.
    fn local_update(
        &self,
        ctx: Context,
        client: &mut ClientState,
        broadcast: &ParamSet,
    ) -> Result<ClientUpdate, StrategyError>;

    /// The messages carrying `update` to the server.
    fn outgoing(
        &self,
        _client: &ClientState,
        update: &ClientUpdate,
        round: u32,
        send_weight: bool,
    ) -> Vec<Message> {
        honest_messages(self.upload_kind(), update, round, send_weight)
    }

    /// New global shared parameters from updates in ascending client id and
    /// their normalized weights.
    fn aggregate(
        &self,
        global: &ParamSet,
        updates: &[ClientUpdate],
        weights: &[f64],
    ) -> Result<ParamSet, StrategyError>;

    /// Post-training phase, after the final broadcast.
    fn finish(&self, _ctx: Context, _client: &mut ClientState) -> Result<(), StrategyError> {
        Ok(())
    }

    /// Parameters the per-round validation metric is computed with.
    fn current_params<'a>(&self, client: &'a ClientState) -> &'a ParamSet {
        &client.params
    }

    fn eval_params(&self, _ctx: Context, client: &ClientState) -> Result<EvalParams, StrategyError> {
        Ok(EvalParams {
            primary: self.current_params(client).clone(),
            unadapted: None,
        })
    }
}

/// Statistics, the update itself and optionally an aggregation weight.
pub fn honest_messages(kind: MessageKind, update: &ClientUpdate, round: u32, send_weight: bool) -> Vec<Message> {
    let id = update.client_id;
    let mut out = vec![
        Message::new(
            MessageKind::Statistics,
            id,
            SERVER_ID,
            round,
            &scalar_payload(&[("count", update.samples as f64)]),
        ),
        Message::new(kind, id, SERVER_ID, round, &update.shared),
    ];
    if send_weight {
        out.push(Message::new(
            MessageKind::AggregationWeight,
            id,
            SERVER_ID,
            round,
            &scalar_payload(&[("weight", update.samples as f64)]),
        ));
    }
    out
}

/// The built-in method families.
#[derive(Debug, Clone)]
pub struct Builtin {
    config: StrategyConfig,
}

impl Builtin {
    pub fn new(config: StrategyConfig) -> Result<Self, StrategyError> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &StrategyConfig {
        &self.config
    }
}

impl Strategy for Builtin {
    fn kind(&self) -> StrategyKind {
        self.config.kind
    }

    fn shared_subset(&self, params: &ParamSet) -> ParamSet {
        let heads = self.config.share_heads;
        let (shared, _) = match self.config.kind {
            StrategyKind::Isolated => return ParamSet::new(),
            StrategyKind::FedBN | StrategyKind::FedBNFT => params
                .partition(|r| r == ParamRole::SharedBody || (heads && r == ParamRole::PersonalHead)),
            StrategyKind::FedMAML => params.partition_by(|n, p| {
                is_trainable(n) && (p.role != ParamRole::PersonalHead || heads)
            }),
            _ => params.partition(|r| r != ParamRole::PersonalHead || heads),
        };
        shared
    }

    fn upload_kind(&self) -> MessageKind {
        match self.config.kind {
            StrategyKind::FedMAML => MessageKind::Gradients,
            _ => MessageKind::Parameters,
        }
    }

    fn init_client(&self, client: &mut ClientState) {
        if self.config.kind == StrategyKind::Ditto {
            client.personal = Some(client.params.clone());
        }
    }

    fn local_update(
        &self,
        ctx: Context,
        client: &mut ClientState,
        broadcast: &ParamSet,
    ) -> Result<ClientUpdate, StrategyError> {
        let id = client.id();
        let hp = client.hyper;
        let ClientState {
            dataset,
            model,
            params,
            personal,
            ..
        } = client;
        let samples = dataset.train_count();
        let update = |shared: ParamSet, loss: f64| ClientUpdate {
            client_id: id,
            shared,
            samples,
            metrics: LocalMetrics { train_loss: loss },
        };
        let mut local = client_round_stream(ctx.seed, tag::LOCAL_TRAIN, id, ctx.round);
        match self.config.kind {
            StrategyKind::Isolated => {
                let loss = sgd_steps(model, params, dataset, hp.sgd(), &mut local, None)?;
                Ok(update(ParamSet::new(), loss))
            }
            StrategyKind::FedProx => {
                let penalty = Penalty {
                    reference: broadcast,
                    weight: hp.mu,
                };
                let loss = sgd_steps(model, params, dataset, hp.sgd(), &mut local, Some(penalty))?;
                Ok(update(self.shared_subset(params), loss))
            }
            StrategyKind::Ditto => {
                let mut global = client_round_stream(ctx.seed, tag::GLOBAL_TRACK, id, ctx.round);
                sgd_steps(model, params, dataset, hp.sgd(), &mut global, None)?;
                let personal = personal
                    .as_mut()
                    .ok_or_else(|| StrategyError::Mismatch("Ditto personal model missing".into()))?;
                let loss = ditto_step(model, personal, broadcast, dataset, hp.lambda, hp.sgd(), &mut local)?;
                Ok(update(self.shared_subset(params), loss))
            }
            StrategyKind::FedMAML => {
                let mut meta = client_round_stream(ctx.seed, tag::META, id, ctx.round);
                let mut acc: Option<ParamSet> = None;
                let mut total = 0.0;
                for _ in 0..hp.local_steps {
                    let (s, q) = support_query_rows(&dataset.splits.train, hp.batch_size, &mut meta);
                    let mg = fedmaml_update(model, params, &dataset.batch(&s), &dataset.batch(&q), hp.inner_lr)?;
                    if !mg.query_loss.is_finite() {
                        return Err(StrategyError::NonFinite(format!("query loss {}", mg.query_loss)));
                    }
                    for (name, g) in mg.grads.iter() {
                        axpy(params.tensor_mut(name).expect("named"), -hp.outer_lr, &g.tensor);
                    }
                    model.update_running_stats(params, &mg.support_stats, s.len())?;
                    let shared = self.shared_subset(&mg.grads);
                    match acc.as_mut() {
                        None => acc = Some(shared),
                        Some(a) => {
                            for (name, g) in shared.iter() {
                                axpy(a.tensor_mut(name).expect("named"), 1.0, &g.tensor);
                            }
                        }
                    }
                    total += mg.query_loss;
                }
                let grads = acc.expect("at least one local step");
                Ok(update(grads, total / hp.local_steps as f64))
            }
            StrategyKind::FedAvg
            | StrategyKind::FedAvgFT
            | StrategyKind::FedBN
            | StrategyKind::FedBNFT => {
                let loss = sgd_steps(model, params, dataset, hp.sgd(), &mut local, None)?;
                Ok(update(self.shared_subset(params), loss))
            }
        }
    }

    fn aggregate(
        &self,
        global: &ParamSet,
        updates: &[ClientUpdate],
        weights: &[f64],
    ) -> Result<ParamSet, StrategyError> {
        if updates.is_empty() {
            return Ok(global.clone());
        }
        let entries: Vec<(u32, &ParamSet, f64)> = updates
            .iter()
            .zip(weights)
            .map(|(u, w)| (u.client_id, &u.shared, *w))
            .collect();
        let mean = weighted_average(&entries)?;
        if self.config.kind != StrategyKind::FedMAML {
            return Ok(mean);
        }
        let mut next = global.clone();
        for (name, g) in mean.iter() {
            let t = next
                .tensor_mut(name)
                .ok_or_else(|| StrategyError::Mismatch(format!("unknown gradient `{name}`")))?;
            axpy(t, -self.config.outer_lr, &g.tensor);
        }
        Ok(next)
    }

    fn finish(&self, ctx: Context, client: &mut ClientState) -> Result<(), StrategyError> {
        if !self.config.kind.fine_tunes() {
            return Ok(());
        }
        let hp = client.hyper;
        let sgd = SgdParams {
            learning_rate: hp.finetune_lr,
            batch_size: hp.batch_size,
            steps: hp.finetune_steps,
        };
        let mut rng = client_round_stream(ctx.seed, tag::FINE_TUNE, client.id(), ctx.round);
        fine_tune(&client.model, &mut client.params, &client.dataset, sgd, &mut rng)?;
        Ok(())
    }

    fn current_params<'a>(&self, client: &'a ClientState) -> &'a ParamSet {
        client.personal.as_ref().unwrap_or(&client.params)
    }

    fn eval_params(&self, ctx: Context, client: &ClientState) -> Result<EvalParams, StrategyError> {
        let current = self.current_params(client).clone();
        let hp = client.hyper;
        if self.config.kind != StrategyKind::FedMAML || hp.eval_adaptation_steps == 0 {
            return Ok(EvalParams {
                primary: current,
                unadapted: None,
            });
        }
        let mut rng = client_round_stream(ctx.seed, tag::EVAL_ADAPT, client.id(), ctx.round);
        let adapted = maml_adapt(
            &client.model,
            &current,
            &client.dataset,
            hp.inner_lr,
            hp.eval_adaptation_steps,
            hp.batch_size,
            &mut rng,
        )?;
        Ok(EvalParams {
            primary: adapted,
            unadapted: Some(current),
        })
    }
}

/// Tag used by the non-whitelisted rogue fixture.
pub const ROGUE_KIND_TAG: u8 = 0xEE;

/// A strategy that behaves like its inner strategy but tries to move raw
/// training rows to the server. It exists to exercise the monitor.
#[derive(Debug, Clone)]
pub struct Rogue {
    inner: Builtin,
    mode: RogueMode,
}

impl Rogue {
    pub fn new(inner: Builtin, mode: RogueMode) -> Self {
        Self { inner, mode }
    }

    fn leaked_rows(client: &ClientState) -> ParamSet {
        let ds = &client.dataset;
        let rows = ds.features.select_rows(&ds.splits.train);
        let mut p = ParamSet::new();
        p.insert("rows", rows, ParamRole::SharedBody).expect("fresh set");
        p
    }
}

impl Strategy for Rogue {
    fn kind(&self) -> StrategyKind {
        self.inner.kind()
    }

    fn communicates(&self) -> bool {
        true
    }

    fn shared_subset(&self, params: &ParamSet) -> ParamSet {
        self.inner.shared_subset(params)
    }

    fn upload_kind(&self) -> MessageKind {
        self.inner.upload_kind()
    }

    fn init_client(&self, client: &mut ClientState) {
        self.inner.init_client(client)
    }

    fn local_update(
        &self,
        ctx: Context,
        client: &mut ClientState,
        broadcast: &ParamSet,
    ) -> Result<ClientUpdate, StrategyError> {
        self.inner.local_update(ctx, client, broadcast)
    }

    fn outgoing(
        &self,
        client: &ClientState,
        update: &ClientUpdate,
        round: u32,
        send_weight: bool,
    ) -> Vec<Message> {
        let mut out = honest_messages(self.upload_kind(), update, round, send_weight);
        let leaked = Self::leaked_rows(client);
        match self.mode {
            RogueMode::NonWhitelistedKind => {
                let mut m = Message::new(MessageKind::Control, update.client_id, SERVER_ID, round, &leaked);
                m.kind_tag = ROGUE_KIND_TAG;
                out.push(m);
            }
            RogueMode::OversizedParameters => {
                let mut stuffed = update.shared.clone();
                for (name, p) in leaked.iter() {
                    let _ = stuffed.insert(name, p.tensor.clone(), p.role);
                }
                out[1] = Message::new(self.upload_kind(), update.client_id, SERVER_ID, round, &stuffed);
            }
        }
        out
    }

    fn aggregate(
        &self,
        global: &ParamSet,
        updates: &[ClientUpdate],
        weights: &[f64],
    ) -> Result<ParamSet, StrategyError> {
        self.inner.aggregate(global, updates, weights)
    }

    fn finish(&self, ctx: Context, client: &mut ClientState) -> Result<(), StrategyError> {
        self.inner.finish(ctx, client)
    }

    fn current_params<'a>(&self, client: &'a ClientState) -> &'a ParamSet {
        self.inner.current_params(client)
    }

    fn eval_params(&self, ctx: Context, client: &ClientState) -> Result<EvalParams, StrategyError> {
        self.inner.eval_params(ctx, client)
    }
}

/// The configured strategy, wrapped in its rogue fixture if requested.
pub fn from_config(config: &StrategyConfig) -> Result<Box<dyn Strategy>, StrategyError> {
    let builtin = Builtin::new(config.clone())?;
    Ok(match config.rogue {
        Some(mode) => Box::new(Rogue::new(builtin, mode)),
        None => Box::new(builtin),
    })
}
