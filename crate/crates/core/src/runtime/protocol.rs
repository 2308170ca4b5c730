//! Message envelopes, the sharing whitelist and the communication-cost
//! monitor.
//!
//! Every transfer between participants is a [`Message`] whose payload is a
//! canonical parameter serialization. The monitor checks each message
//! against the whitelist and against per-kind element budgets fixed when the
//! experiment's model signature is registered, and logs every verdict.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::models::{payload_element_count, ParamRole, ParamSet};

/// The whitelisted information kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum MessageKind {
    Statistics,
    Parameters,
    AggregationWeight,
    Gradients,
    Control,
}

impl MessageKind {
    pub const ALL: [MessageKind; 5] = [
        MessageKind::Statistics,
        MessageKind::Parameters,
        MessageKind::AggregationWeight,
        MessageKind::Gradients,
        MessageKind::Control,
    ];

    pub fn tag(self) -> u8 {
        match self {
            MessageKind::Statistics => 1,
            MessageKind::Parameters => 2,
            MessageKind::AggregationWeight => 3,
            MessageKind::Gradients => 4,
            MessageKind::Control => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::Statistics => "statistics",
            MessageKind::Parameters => "parameters",
            MessageKind::AggregationWeight => "aggregation-weight",
            MessageKind::Gradients => "gradients",
            MessageKind::Control => "control",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

/// Wire label for a raw kind tag: the kind name, or `unknown-<tag>`.
pub fn kind_label(tag: u8) -> String {
    MessageKind::from_tag(tag)
        .map(|k| k.as_str().to_string())
        .unwrap_or_else(|| format!("unknown-{tag}"))
}

pub const SERVER_ID: u32 = 0;

/// An envelope on the wire. The kind is a raw tag so that malformed or
/// rogue messages can be represented and rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind_tag: u8,
    pub sender: u32,
    pub receiver: u32,
    pub round: u32,
    pub payload: Vec<u8>,
    pub declared: usize,
}

impl Message {
    /// Serializes `payload` and declares its true element count.
    pub fn new(kind: MessageKind, sender: u32, receiver: u32, round: u32, payload: &ParamSet) -> Self {
        Self {
            kind_tag: kind.tag(),
            sender,
            receiver,
            round,
            payload: payload.to_bytes(),
            declared: payload.element_count(),
        }
    }

    pub fn control(sender: u32, receiver: u32, round: u32) -> Self {
        Self::new(MessageKind::Control, sender, receiver, round, &ParamSet::new())
    }

    pub fn kind(&self) -> Option<MessageKind> {
        MessageKind::from_tag(self.kind_tag)
    }
}

/// A payload holding named scalars, e.g. `count`.
pub fn scalar_payload(entries: &[(&str, f64)]) -> ParamSet {
    let mut p = ParamSet::new();
    for (name, v) in entries {
        p.insert(name, Tensor::scalar(*v), ParamRole::SharedBody)
            .expect("distinct names");
    }
    p
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
pub enum Violation {
    #[error("kind tag {tag} is not whitelisted")]
    NonWhitelistedKind { tag: u8 },
    #[error("{kind:?} declares {declared} elements, payload has {actual:?}")]
    SizeMismatch {
        kind: MessageKind,
        declared: usize,
        /// `None` when the payload does not parse.
        actual: Option<usize>,
    },
    #[error("{kind:?} carries {declared} elements, budget is {budget}")]
    BudgetExceeded {
        kind: MessageKind,
        declared: usize,
        budget: usize,
    },
}

impl Violation {
    pub fn code(&self) -> &'static str {
        match self {
            Violation::NonWhitelistedKind { .. } => "non-whitelisted-kind",
            Violation::SizeMismatch { .. } => "size-mismatch",
            Violation::BudgetExceeded { .. } => "budget-exceeded",
        }
    }
}

/// Per-kind element budgets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Budgets {
    pub statistics: usize,
    pub parameters: usize,
    pub aggregation_weight: usize,
    pub gradients: usize,
    pub control: usize,
}

impl Budgets {
    /// Parameters and gradients may carry at most the shared subset; statistics
    /// at most a count plus per-feature mean and median.
    pub fn for_signature(shared_elements: usize, feature_dim: usize) -> Self {
        Self {
            statistics: 2 * feature_dim + 1,
            parameters: shared_elements,
            aggregation_weight: 1,
            gradients: shared_elements,
            control: 0,
        }
    }

    pub fn get(&self, kind: MessageKind) -> usize {
        match kind {
            MessageKind::Statistics => self.statistics,
            MessageKind::Parameters => self.parameters,
            MessageKind::AggregationWeight => self.aggregation_weight,
            MessageKind::Gradients => self.gradients,
            MessageKind::Control => self.control,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Ok,
    Violation(String),
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Ok => f.write_str("ok"),
            Verdict::Violation(code) => write!(f, "violation:{code}"),
        }
    }
}

/// One line of the communication log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub round: u32,
    pub sender: u32,
    pub kind: String,
    pub declared: usize,
    pub bytes: usize,
    pub verdict: Verdict,
}

impl LogEntry {
    pub fn is_violation(&self) -> bool {
        matches!(self.verdict, Verdict::Violation(_))
    }
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.round, self.sender, self.kind, self.declared, self.bytes, self.verdict
        )
    }
}

/// Writes the log, one tab-separated line per message.
pub fn write_log<W: Write>(entries: &[LogEntry], mut w: W) -> std::io::Result<()> {
    for e in entries {
        writeln!(w, "{e}")?;
    }
    Ok(())
}

pub fn parse_log(text: &str) -> Result<Vec<LogEntry>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let err = |m: &str| format!("line {}: {m}", i + 1);
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(err(&format!("expected 6 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|e| err(&e.to_string()));
            let verdict = match f[5] {
                "ok" => Verdict::Ok,
                v => Verdict::Violation(
                    v.strip_prefix("violation:")
                        .ok_or_else(|| err(&format!("bad verdict `{v}`")))?
                        .to_string(),
                ),
            };
            Ok(LogEntry {
                round: num(f[0])? as u32,
                sender: num(f[1])? as u32,
                kind: f[2].to_string(),
                declared: num(f[3])?,
                bytes: num(f[4])?,
                verdict,
            })
        })
        .collect()
}

/// Checks messages against the whitelist and budgets; logs every verdict.
#[derive(Debug, Clone)]
pub struct ProtocolMonitor {
    budgets: Budgets,
    bytes_by_kind: BTreeMap<String, u64>,
    log: Vec<LogEntry>,
    violations: Vec<(LogEntry, Violation)>,
}

impl ProtocolMonitor {
    pub fn register(budgets: Budgets) -> Self {
        Self {
            budgets,
            bytes_by_kind: BTreeMap::new(),
            log: Vec::new(),
            violations: Vec::new(),
        }
    }

    pub fn budgets(&self) -> &Budgets {
        &self.budgets
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn violations(&self) -> &[(LogEntry, Violation)] {
        &self.violations
    }

    pub fn bytes_by_kind(&self) -> &BTreeMap<String, u64> {
        &self.bytes_by_kind
    }

    pub fn into_log(self) -> Vec<LogEntry> {
        self.log
    }

    pub fn validate(&mut self, msg: &Message) -> Result<MessageKind, Violation> {
        let outcome = self.check(msg);
        let entry = LogEntry {
            round: msg.round,
            sender: msg.sender,
            kind: kind_label(msg.kind_tag),
            declared: msg.declared,
            bytes: msg.payload.len(),
            verdict: match &outcome {
                Ok(_) => Verdict::Ok,
                Err(v) => Verdict::Violation(v.code().to_string()),
            },
        };
        *self.bytes_by_kind.entry(entry.kind.clone()).or_default() += msg.payload.len() as u64;
        if let Err(v) = &outcome {
            self.violations.push((entry.clone(), v.clone()));
        }
        self.log.push(entry);
        outcome
    }

    fn check(&self, msg: &Message) -> Result<MessageKind, Violation> {
        let kind = msg
            .kind()
            .ok_or(Violation::NonWhitelistedKind { tag: msg.kind_tag })?;
        let actual = payload_element_count(&msg.payload).ok();
        if actual != Some(msg.declared) {
            return Err(Violation::SizeMismatch {
                kind,
                declared: msg.declared,
                actual,
            });
        }
        let budget = self.budgets.get(kind);
        if msg.declared > budget {
            return Err(Violation::BudgetExceeded {
                kind,
                declared: msg.declared,
                budget,
            });
        }
        Ok(kind)
    }
}

/// Per-round, per-kind byte totals and all flagged messages.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommSummary {
    pub per_round: BTreeMap<u32, BTreeMap<String, u64>>,
    pub messages_per_round: BTreeMap<u32, BTreeMap<String, usize>>,
    pub anomalies: Vec<LogEntry>,
}

pub fn communication_summary(log: &[LogEntry]) -> CommSummary {
    let mut s = CommSummary::default();
    for e in log {
        *s.per_round
            .entry(e.round)
            .or_default()
            .entry(e.kind.clone())
            .or_default() += e.bytes as u64;
        *s.messages_per_round
            .entry(e.round)
            .or_default()
            .entry(e.kind.clone())
            .or_default() += 1;
        if e.is_violation() {
            s.anomalies.push(e.clone());
        }
    }
    s
}
