//! The server/client round protocol and the experiment loop.
//!
//! Each round the server broadcasts the strategy's shared subset, sampled
//! clients train locally (concurrently when enabled), and every upload is
//! validated by the [`ProtocolMonitor`] before the server decodes it. Updates
//! are aggregated in ascending client id, so results do not depend on
//! scheduling.

pub mod protocol;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{compute_metric, format_float, ClientResult};
use crate::models::{build_model, HeadKind, LayerSpec, ModelSpec, ParamSet, TaskKind};
use crate::rng::{derive_seed, stream, tag};
use crate::strategies::{
    from_config, ClientState, ClientUpdate, Context, LocalMetrics, Strategy, StrategyConfig,
    StrategyError,
};
use crate::synthdata::ClientDataset;

pub use protocol::{
    communication_summary, parse_log, write_log, Budgets, CommSummary, LogEntry, Message,
    MessageKind, ProtocolMonitor, Verdict, Violation, SERVER_ID,
};

/// Who supplies aggregation weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightSource {
    /// The server derives weights from reported sample counts.
    #[default]
    Server,
    /// Clients send an AggregationWeight message.
    Client,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub rounds: u32,
    #[serde(default)]
    pub seed: u64,
    /// Hidden layers shared by every client's model.
    pub body: Vec<LayerSpec>,
    pub strategy: StrategyConfig,
    #[serde(default = "full_participation")]
    pub sample_fraction: f64,
    #[serde(default)]
    pub weight_source: WeightSource,
    #[serde(default = "enabled")]
    pub parallel: bool,
    /// Keep every delivered payload in the history.
    #[serde(default)]
    pub record_payloads: bool,
}

fn full_participation() -> f64 {
    1.0
}

fn enabled() -> bool {
    true
}

impl ExperimentConfig {
    pub fn new(rounds: u32, body: Vec<LayerSpec>, strategy: StrategyConfig) -> Self {
        Self {
            rounds,
            seed: 0,
            body,
            strategy,
            sample_fraction: 1.0,
            weight_source: WeightSource::Server,
            parallel: true,
            record_payloads: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub enum RunErrorKind {
    Config(String),
    Violation {
        round: u32,
        sender: u32,
        violation: Violation,
    },
    Numeric {
        round: u32,
        client: u32,
        detail: String,
    },
    Strategy {
        round: u32,
        client: Option<u32>,
        detail: String,
    },
}

impl std::fmt::Display for RunErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunErrorKind::Config(m) => write!(f, "invalid experiment: {m}"),
            RunErrorKind::Violation {
                round,
                sender,
                violation,
            } => write!(f, "protocol violation in round {round} from {sender}: {violation}"),
            RunErrorKind::Numeric {
                round,
                client,
                detail,
            } => write!(f, "numeric failure in round {round} on client {client}: {detail}"),
            RunErrorKind::Strategy {
                round,
                client,
                detail,
            } => match client {
                Some(c) => write!(f, "round {round}, client {c}: {detail}"),
                None => write!(f, "round {round}, server: {detail}"),
            },
        }
    }
}

/// A failed run with everything recorded up to the failure.
#[derive(Debug, Error)]
#[error("{kind}")]
pub struct RunError {
    pub kind: RunErrorKind,
    pub history: Box<History>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: u32,
    pub client: u32,
    pub train_loss: f64,
    /// `None` when the metric is undefined, e.g. constant predictions.
    pub valid_metric: Option<f64>,
}

/// A delivered message.
#[derive(Debug, Clone, PartialEq)]
pub struct Transfer {
    pub round: u32,
    pub sender: u32,
    pub receiver: u32,
    pub kind: MessageKind,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub rounds_completed: u32,
    pub records: Vec<RoundRecord>,
    pub log: Vec<LogEntry>,
    /// Populated when payload recording is enabled.
    pub transfers: Vec<Transfer>,
    pub failed_round: Option<u32>,
}

impl History {
    /// Tab-separated per-round records with a header line.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "round\tclient\ttrain_loss\tvalid_metric")?;
        for r in &self.records {
            let valid = r.valid_metric.map(format_float).unwrap_or_else(|| "NA".into());
            writeln!(w, "{}\t{}\t{}\t{}", r.round, r.client, format_float(r.train_loss), valid)?;
        }
        Ok(())
    }

    pub fn write_log<W: Write>(&self, w: W) -> std::io::Result<()> {
        write_log(&self.log, w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    pub round: u32,
    pub global: ParamSet,
    pub sample_counts: BTreeMap<u32, usize>,
    /// Updates of the last completed round, keyed by client id.
    pub updates: BTreeMap<u32, ClientUpdate>,
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub seed: u64,
    pub sample_fraction: f64,
    pub weight_source: WeightSource,
    pub parallel: bool,
    pub record_payloads: bool,
}

impl From<&ExperimentConfig> for RunOptions {
    fn from(cfg: &ExperimentConfig) -> Self {
        Self {
            seed: cfg.seed,
            sample_fraction: cfg.sample_fraction,
            weight_source: cfg.weight_source,
            parallel: cfg.parallel,
            record_payloads: cfg.record_payloads,
        }
    }
}

/// Ids taking part in `round`, ascending.
pub fn sampled_clients(ids: &[u32], fraction: f64, seed: u64, round: u32) -> Vec<u32> {
    let mut ids = ids.to_vec();
    ids.sort_unstable();
    if fraction >= 1.0 {
        return ids;
    }
    let k = ((fraction * ids.len() as f64).ceil() as usize).clamp(1, ids.len());
    let mut rng = stream(seed, &[tag::SAMPLE, round as u64]);
    ids.shuffle(&mut rng);
    let mut chosen = ids[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Metric of `params` on the given rows.
pub fn evaluate_rows(
    client: &ClientState,
    params: &ParamSet,
    rows: &[usize],
) -> Result<f64, String> {
    let ds = &client.dataset;
    let features = ds.features.select_rows(rows);
    let targets = ds.targets.select_rows(rows);
    let preds = client
        .model
        .predict(params, &features)
        .map_err(|e| e.to_string())?;
    compute_metric(preds.data(), targets.data(), ds.metric).map_err(|e| e.to_string())
}

fn deliver(
    monitor: &mut ProtocolMonitor,
    history: &mut History,
    msg: Message,
    record: bool,
) -> Result<(MessageKind, ParamSet), RunErrorKind> {
    let kind = monitor.validate(&msg).map_err(|violation| RunErrorKind::Violation {
        round: msg.round,
        sender: msg.sender,
        violation,
    })?;
    let payload = ParamSet::from_bytes(&msg.payload).map_err(|e| RunErrorKind::Strategy {
        round: msg.round,
        client: Some(msg.sender),
        detail: e.to_string(),
    })?;
    if record {
        history.transfers.push(Transfer {
            round: msg.round,
            sender: msg.sender,
            receiver: msg.receiver,
            kind,
            payload: msg.payload,
        });
    }
    Ok((kind, payload))
}

fn scalar_entry(p: &ParamSet, name: &str) -> Option<f64> {
    p.tensor(name).and_then(|t| t.item())
}

fn strategy_error(round: u32, client: Option<u32>, e: StrategyError) -> RunErrorKind {
    match (e.is_numeric(), client) {
        (true, Some(c)) => RunErrorKind::Numeric {
            round,
            client: c,
            detail: e.to_string(),
        },
        _ => RunErrorKind::Strategy {
            round,
            client,
            detail: e.to_string(),
        },
    }
}

/// Sends the global shared subset to `targets` and applies it locally.
/// Returns what each client received.
fn broadcast(
    state: &RoundState,
    clients: &mut [ClientState],
    targets: &[u32],
    monitor: &mut ProtocolMonitor,
    history: &mut History,
    record: bool,
) -> Result<BTreeMap<u32, ParamSet>, RunErrorKind> {
    let mut received = BTreeMap::new();
    for client in clients.iter_mut().filter(|c| targets.contains(&c.id())) {
        let msg = Message::new(MessageKind::Parameters, SERVER_ID, client.id(), state.round, &state.global);
        let (_, payload) = deliver(monitor, history, msg, record)?;
        client.params.update_from(&payload).map_err(|e| RunErrorKind::Strategy {
            round: state.round,
            client: Some(client.id()),
            detail: e.to_string(),
        })?;
        received.insert(client.id(), payload);
    }
    Ok(received)
}

/// One round: broadcast, local updates, validated uploads, aggregation.
pub fn run_round(
    state: &mut RoundState,
    clients: &mut [ClientState],
    strategy: &dyn Strategy,
    monitor: &mut ProtocolMonitor,
    opts: &RunOptions,
    history: &mut History,
) -> Result<(), RunErrorKind> {
    let round = state.round;
    let ids: Vec<u32> = clients.iter().map(ClientState::id).collect();
    let communicates = strategy.communicates();
    let sampled: BTreeSet<u32> = if communicates {
        sampled_clients(&ids, opts.sample_fraction, opts.seed, round)
            .into_iter()
            .collect()
    } else {
        ids.iter().copied().collect()
    };
    let received = if communicates {
        let targets: Vec<u32> = sampled.iter().copied().collect();
        broadcast(state, clients, &targets, monitor, history, opts.record_payloads)?
    } else {
        BTreeMap::new()
    };

    let ctx = Context {
        seed: opts.seed,
        round,
    };
    let empty = ParamSet::new();
    let work = |client: &mut ClientState| {
        let id = client.id();
        let got = received.get(&id).unwrap_or(&empty);
        let update = strategy
            .local_update(ctx, client, got)
            .map_err(|e| strategy_error(round, Some(id), e))?;
        let valid = evaluate_rows(client, strategy.current_params(client), &client.dataset.splits.valid).ok();
        let record = RoundRecord {
            round,
            client: id,
            train_loss: update.metrics.train_loss,
            valid_metric: valid,
        };
        Ok::<_, RunErrorKind>((update, record))
    };
    let mut outcomes: Vec<Result<(ClientUpdate, RoundRecord), RunErrorKind>> = if opts.parallel {
        clients
            .par_iter_mut()
            .filter(|c| sampled.contains(&c.id()))
            .map(work)
            .collect()
    } else {
        clients
            .iter_mut()
            .filter(|c| sampled.contains(&c.id()))
            .map(work)
            .collect()
    };
    outcomes.sort_by_key(|r| match r {
        Ok((u, _)) => u.client_id,
        Err(_) => 0,
    });
    let mut updates = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        let (update, record) = outcome?;
        history.records.push(record);
        updates.push(update);
    }
    updates.sort_by_key(|u| u.client_id);

    if communicates {
        let send_weight = opts.weight_source == WeightSource::Client;
        let mut decoded = Vec::with_capacity(updates.len());
        let mut weights = Vec::with_capacity(updates.len());
        for update in &updates {
            let client = clients
                .iter()
                .find(|c| c.id() == update.client_id)
                .expect("update from a registered client");
            let mut count = None;
            let mut weight = None;
            let mut shared = None;
            for msg in strategy.outgoing(client, update, round, send_weight) {
                let (kind, payload) = deliver(monitor, history, msg, opts.record_payloads)?;
                match kind {
                    MessageKind::Statistics => count = scalar_entry(&payload, "count"),
                    MessageKind::AggregationWeight => weight = scalar_entry(&payload, "weight"),
                    MessageKind::Parameters | MessageKind::Gradients => shared = Some(payload),
                    MessageKind::Control => {}
                }
            }
            let missing = |what: &str| RunErrorKind::Strategy {
                round,
                client: Some(update.client_id),
                detail: format!("no {what} received"),
            };
            let count = count.ok_or_else(|| missing("sample count"))?;
            let samples = count as usize;
            if samples == 0 || count != samples as f64 {
                return Err(RunErrorKind::Strategy {
                    round,
                    client: Some(update.client_id),
                    detail: format!("invalid sample count {count}"),
                });
            }
            state.sample_counts.insert(update.client_id, samples);
            weights.push(match opts.weight_source {
                WeightSource::Server => count,
                WeightSource::Client => weight.ok_or_else(|| missing("aggregation weight"))?,
            });
            decoded.push(ClientUpdate {
                client_id: update.client_id,
                shared: shared.ok_or_else(|| missing("update payload"))?,
                samples,
                metrics: LocalMetrics::default(),
            });
        }
        let total: f64 = weights.iter().sum();
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        state.global = strategy
            .aggregate(&state.global, &decoded, &weights)
            .map_err(|e| strategy_error(round, None, e))?;
        state.updates = decoded.into_iter().map(|u| (u.client_id, u)).collect();
    } else {
        state.updates = updates.into_iter().map(|u| (u.client_id, u)).collect();
    }
    state.round += 1;
    history.rounds_completed = state.round;
    Ok(())
}

/// Final results of a completed run.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub history: History,
    pub global: ParamSet,
    pub clients: Vec<ClientState>,
    /// Test-split results per client, ascending id.
    pub results: Vec<ClientResult>,
    /// FedMAML results without evaluation-time adaptation.
    pub unadapted: Option<Vec<ClientResult>>,
    pub budgets: Budgets,
}

/// A registered federation: clients, server state, monitor and strategy.
pub struct Federation {
    pub clients: Vec<ClientState>,
    pub state: RoundState,
    pub monitor: ProtocolMonitor,
    pub history: History,
    pub options: RunOptions,
    strategy: Box<dyn Strategy>,
}

fn head_for(ds: &ClientDataset) -> HeadKind {
    match ds.task {
        TaskKind::BinaryClassification => HeadKind::BinaryClassification,
        TaskKind::Regression => HeadKind::Regression {
            outputs: ds.outputs(),
        },
    }
}

impl Federation {
    pub fn new(cfg: &ExperimentConfig, datasets: Vec<ClientDataset>) -> Result<Self, RunError> {
        let strategy = from_config(&cfg.strategy).map_err(|e| config_error(e.to_string()))?;
        Self::with_strategy(cfg, datasets, strategy)
    }

    /// Registers clients with an arbitrary strategy implementation.
    pub fn with_strategy(
        cfg: &ExperimentConfig,
        mut datasets: Vec<ClientDataset>,
        strategy: Box<dyn Strategy>,
    ) -> Result<Self, RunError> {
        if datasets.is_empty() {
            return Err(config_error("no clients".into()));
        }
        if !(cfg.sample_fraction > 0.0 && cfg.sample_fraction <= 1.0) {
            return Err(config_error(format!(
                "sample_fraction must be in (0, 1], got {}",
                cfg.sample_fraction
            )));
        }
        datasets.sort_by_key(|d| d.id);
        let d = datasets[0].feature_dim();
        for (i, ds) in datasets.iter().enumerate() {
            if ds.id == 0 || (i > 0 && datasets[i - 1].id == ds.id) {
                return Err(config_error(format!("client ids must be unique and ≥ 1, got {}", ds.id)));
            }
            if ds.feature_dim() != d {
                return Err(config_error(format!(
                    "client {} has {} features, client {} has {d}",
                    ds.id,
                    ds.feature_dim(),
                    datasets[0].id
                )));
            }
            if ds.splits.train.is_empty() || ds.splits.test.is_empty() {
                return Err(config_error(format!("client {} has an empty train or test split", ds.id)));
            }
        }

        let init_seed = derive_seed(cfg.seed, &[tag::MODEL_INIT]);
        let mut clients = Vec::with_capacity(datasets.len());
        for ds in datasets {
            let spec = ModelSpec {
                input_width: d,
                body: cfg.body.clone(),
                head: head_for(&ds),
            };
            let (params, model) = build_model(&spec, init_seed).map_err(|e| config_error(e.to_string()))?;
            let mut client = ClientState {
                hyper: cfg.strategy.for_client(ds.id),
                dataset: ds,
                model,
                params,
                personal: None,
            };
            strategy.init_client(&mut client);
            clients.push(client);
        }

        let global = strategy.shared_subset(&clients[0].params);
        for c in &clients[1..] {
            let mine = strategy.shared_subset(&c.params);
            let same = mine.len() == global.len()
                && mine
                    .iter()
                    .zip(global.iter())
                    .all(|((a, pa), (b, pb))| a == b && pa.tensor.shape() == pb.tensor.shape());
            if !same {
                return Err(config_error(format!(
                    "client {} shares a differently shaped subset than client {}",
                    c.id(),
                    clients[0].id()
                )));
            }
        }
        let budgets = Budgets::for_signature(global.element_count(), d);
        Ok(Self {
            clients,
            state: RoundState {
                round: 0,
                global,
                sample_counts: BTreeMap::new(),
                updates: BTreeMap::new(),
            },
            monitor: ProtocolMonitor::register(budgets),
            history: History::default(),
            options: RunOptions::from(cfg),
            strategy,
        })
    }

    pub fn strategy(&self) -> &dyn Strategy {
        self.strategy.as_ref()
    }

    pub fn run_round(&mut self) -> Result<(), RunErrorKind> {
        let result = run_round(
            &mut self.state,
            &mut self.clients,
            self.strategy.as_ref(),
            &mut self.monitor,
            &self.options,
            &mut self.history,
        );
        self.history.log = self.monitor.log().to_vec();
        if result.is_err() {
            self.history.failed_round = Some(self.state.round);
        }
        result
    }

    fn fail(mut self, kind: RunErrorKind) -> RunError {
        self.history.log = self.monitor.log().to_vec();
        RunError {
            kind,
            history: Box::new(self.history),
        }
    }

    /// Final broadcast, post-training phase and test-split evaluation.
    pub fn finish(mut self) -> Result<Outcome, RunError> {
        let round = self.state.round;
        if self.strategy.communicates() {
            let ids: Vec<u32> = self.clients.iter().map(ClientState::id).collect();
            if let Err(e) = broadcast(
                &self.state,
                &mut self.clients,
                &ids,
                &mut self.monitor,
                &mut self.history,
                self.options.record_payloads,
            ) {
                return Err(self.fail(e));
            }
        }
        let ctx = Context {
            seed: self.options.seed,
            round,
        };
        let strategy = self.strategy.as_ref();
        let evaluate = |client: &mut ClientState| -> Result<(ClientResult, Option<ClientResult>), RunErrorKind> {
            let id = client.id();
            strategy
                .finish(ctx, client)
                .map_err(|e| strategy_error(round, Some(id), e))?;
            let params = strategy
                .eval_params(ctx, client)
                .map_err(|e| strategy_error(round, Some(id), e))?;
            let test = &client.dataset.splits.test;
            let result = |p: &ParamSet| {
                evaluate_rows(client, p, test)
                    .map(|value| ClientResult {
                        client_id: id,
                        metric: client.dataset.metric,
                        value,
                        baseline: None,
                        samples: client.dataset.len(),
                    })
                    .map_err(|detail| RunErrorKind::Numeric {
                        round,
                        client: id,
                        detail: format!("test evaluation: {detail}"),
                    })
            };
            let primary = result(&params.primary)?;
            let unadapted = params.unadapted.as_ref().map(result).transpose()?;
            Ok((primary, unadapted))
        };
        let outcomes: Vec<_> = if self.options.parallel {
            self.clients.par_iter_mut().map(evaluate).collect()
        } else {
            self.clients.iter_mut().map(evaluate).collect()
        };
        let mut results = Vec::with_capacity(outcomes.len());
        let mut unadapted = Vec::new();
        for o in outcomes {
            match o {
                Ok((p, u)) => {
                    results.push(p);
                    unadapted.extend(u);
                }
                Err(e) => return Err(self.fail(e)),
            }
        }
        self.history.log = self.monitor.log().to_vec();
        Ok(Outcome {
            history: self.history,
            global: self.state.global,
            clients: self.clients,
            results,
            unadapted: (!unadapted.is_empty()).then_some(unadapted),
            budgets: *self.monitor.budgets(),
        })
    }

    /// Runs the configured number of rounds, then finishes.
    pub fn run(mut self, rounds: u32) -> Result<Outcome, RunError> {
        for _ in 0..rounds {
            if let Err(e) = self.run_round() {
                return Err(self.fail(e));
            }
        }
        self.finish()
    }
}

fn config_error(m: String) -> RunError {
    RunError {
        kind: RunErrorKind::Config(m),
        history: Box::default(),
    }
}

/// Deterministic given `cfg.seed` and the datasets.
pub fn run_experiment(cfg: &ExperimentConfig, datasets: Vec<ClientDataset>) -> Result<Outcome, RunError> {
    Federation::new(cfg, datasets)?.run(cfg.rounds)
}
