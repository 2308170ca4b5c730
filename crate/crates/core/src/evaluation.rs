//! Metrics, the three aggregation modes, improvement ratios against a
//! baseline run, and per-client reports.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} values, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("pearson correlation undefined: zero variance")]
    ZeroVariance,
    #[error("baseline value is zero")]
    ZeroBaseline,
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("client sets differ: {0}")]
    ClientMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Accuracy,
    Mse,
    PearsonCorrelation,
}

impl MetricKind {
    /// +1 when higher is better, −1 when lower is better.
    pub fn indicator(self) -> f64 {
        match self {
            MetricKind::Mse => -1.0,
            MetricKind::Accuracy | MetricKind::PearsonCorrelation => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Mse => "mse",
            MetricKind::PearsonCorrelation => "pearson-correlation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "accuracy" => MetricKind::Accuracy,
            "mse" => MetricKind::Mse,
            "pearson-correlation" => MetricKind::PearsonCorrelation,
            _ => return None,
        })
    }
}

/// Accuracy thresholds predicted probabilities at 0.5 (exactly 0.5 counts as
/// class 1). Pearson is the sample correlation over all elements.
pub fn compute_metric(predictions: &[f64], targets: &[f64], kind: MetricKind) -> Result<f64, EvalError> {
    if predictions.len() != targets.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), targets.len()));
    }
    let n = predictions.len();
    let needed = if kind == MetricKind::PearsonCorrelation { 2 } else { 1 };
    if n < needed {
        return Err(EvalError::TooFew { needed, got: n });
    }
    let pairs = predictions.iter().zip(targets);
    Ok(match kind {
        MetricKind::Accuracy => {
            let hits = pairs
                .filter(|(&p, &t)| (p >= 0.5) == (t >= 0.5))
                .count();
            hits as f64 / n as f64
        }
        MetricKind::Mse => pairs.map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n as f64,
        MetricKind::PearsonCorrelation => {
            let mp = predictions.iter().sum::<f64>() / n as f64;
            let mt = targets.iter().sum::<f64>() / n as f64;
            let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
            for (p, t) in pairs {
                let (dx, dy) = (p - mp, t - mt);
                sxy += dx * dy;
                sxx += dx * dx;
                syy += dy * dy;
            }
            if sxx == 0.0 || syy == 0.0 {
                return Err(EvalError::ZeroVariance);
            }
            sxy / (sxx.sqrt() * syy.sqrt())
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum AggregationMode {
    EqualWeight,
    DataSizeWeighted(Vec<f64>),
    /// Nonnegative weights, normalized internally.
    Custom(Vec<f64>),
}

pub fn aggregate(values: &[f64], mode: &AggregationMode) -> Result<f64, EvalError> {
    if values.is_empty() {
        return Err(EvalError::TooFew { needed: 1, got: 0 });
    }
    let weights: Vec<f64> = match mode {
        AggregationMode::EqualWeight => vec![1.0; values.len()],
        AggregationMode::DataSizeWeighted(sizes) => {
            if sizes.iter().any(|&s| !(s > 0.0)) {
                return Err(EvalError::InvalidWeights("sizes must be positive".into()));
            }
            sizes.clone()
        }
        AggregationMode::Custom(w) => {
            if w.iter().any(|&x| !(x >= 0.0)) {
                return Err(EvalError::InvalidWeights("custom weights must be nonnegative".into()));
            }
            if w.iter().sum::<f64>() <= 0.0 {
                return Err(EvalError::InvalidWeights("custom weights sum to zero".into()));
            }
            w.clone()
        }
    };
    if weights.len() != values.len() {
        return Err(EvalError::LengthMismatch(values.len(), weights.len()));
    }
    let total: f64 = weights.iter().sum();
    Ok(values
        .iter()
        .zip(&weights)
        .map(|(v, w)| v * (w / total))
        .sum())
}

/// Signed percentage gain `I·(m − b)/b·100`.
pub fn improvement_ratio(method: f64, baseline: f64, indicator: f64) -> Result<f64, EvalError> {
    if baseline == 0.0 {
        return Err(EvalError::ZeroBaseline);
    }
    // + 0.0 turns a negative zero into zero
    Ok(indicator * (method - baseline) / baseline * 100.0 + 0.0)
}

/// Equal-weight mean of per-client ratios (indicator already applied).
pub fn overall_improvement(ratios: &[f64]) -> Result<f64, EvalError> {
    if ratios.is_empty() {
        return Err(EvalError::TooFew { needed: 1, got: 0 });
    }
    // summed in sorted order so the result does not depend on client order
    let mut sorted = ratios.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted.iter().sum::<f64>() / ratios.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientResult {
    pub client_id: u32,
    pub metric: MetricKind,
    pub value: f64,
    pub baseline: Option<f64>,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub equal: f64,
    pub data_weighted: f64,
    pub custom: Option<f64>,
    pub overall_improvement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Ascending by client id.
    pub results: Vec<ClientResult>,
    pub improvements: Vec<Option<f64>>,
    pub aggregates: AggregateRecord,
    pub baseline_run: Option<String>,
}

/// Per-client table plus aggregate scores. With a baseline run, every
/// client of `run` must appear in it and vice versa.
pub fn build_report(
    run: &[ClientResult],
    baseline: Option<(&str, &[ClientResult])>,
    custom_weights: Option<&[f64]>,
) -> Result<EvalReport, EvalError> {
    let mut results = run.to_vec();
    results.sort_by_key(|r| r.client_id);
    if let Some((_, base)) = baseline {
        let mut ids: Vec<u32> = base.iter().map(|r| r.client_id).collect();
        ids.sort_unstable();
        let mine: Vec<u32> = results.iter().map(|r| r.client_id).collect();
        if ids != mine {
            return Err(EvalError::ClientMismatch(format!("{mine:?} vs baseline {ids:?}")));
        }
        for r in &mut results {
            let b = base.iter().find(|b| b.client_id == r.client_id).expect("ids match");
            if b.metric != r.metric {
                return Err(EvalError::ClientMismatch(format!(
                    "client {} metric {} vs baseline {}",
                    r.client_id,
                    r.metric.as_str(),
                    b.metric.as_str()
                )));
            }
            r.baseline = Some(b.value);
        }
    }
    let improvements = results
        .iter()
        .map(|r| {
            r.baseline
                .map(|b| improvement_ratio(r.value, b, r.metric.indicator()))
                .transpose()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let values: Vec<f64> = results.iter().map(|r| r.value).collect();
    let sizes: Vec<f64> = results.iter().map(|r| r.samples as f64).collect();
    let overall = if !improvements.is_empty() && improvements.iter().all(Option::is_some) {
        let ratios: Vec<f64> = improvements.iter().flatten().copied().collect();
        Some(overall_improvement(&ratios)?)
    } else {
        None
    };
    let aggregates = AggregateRecord {
        equal: aggregate(&values, &AggregationMode::EqualWeight)?,
        data_weighted: aggregate(&values, &AggregationMode::DataSizeWeighted(sizes))?,
        custom: custom_weights
            .map(|w| aggregate(&values, &AggregationMode::Custom(w.to_vec())))
            .transpose()?,
        overall_improvement: overall,
    };
    Ok(EvalReport {
        results,
        improvements,
        aggregates,
        baseline_run: baseline.map(|(id, _)| id.to_string()),
    })
}

impl EvalReport {
    /// `client_id,metric,value,baseline,improvement_pct,samples`. Missing
    /// baselines are empty cells.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["client_id", "metric", "value", "baseline", "improvement_pct", "samples"])?;
        for (r, imp) in self.results.iter().zip(&self.improvements) {
            out.write_record([
                r.client_id.to_string(),
                r.metric.as_str().to_string(),
                format_float(r.value),
                r.baseline.map(format_float).unwrap_or_default(),
                imp.map(format_float).unwrap_or_default(),
                r.samples.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// `client_id,improvement_pct`, one bar per client.
    pub fn write_bar_chart<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["client_id", "improvement_pct"])?;
        for (r, imp) in self.results.iter().zip(&self.improvements) {
            out.write_record([r.client_id.to_string(), imp.map(format_float).unwrap_or_default()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Shortest representation that round-trips to the same `f64`.
pub fn format_float(x: f64) -> String {
    format!("{x:?}")
}

/// Reads a table written by [`EvalReport::write_csv`].
pub fn read_results_csv<R: std::io::Read>(r: R) -> Result<Vec<ClientResult>, String> {
    let mut reader = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| format!("row {}: {e}", i + 2))?;
        let field = |k: usize| rec.get(k).ok_or_else(|| format!("row {}: missing column {k}", i + 2));
        let parse = |s: &str| s.parse::<f64>().map_err(|e| format!("row {}: {e}", i + 2));
        let baseline = field(3)?;
        out.push(ClientResult {
            client_id: field(0)?.parse().map_err(|e| format!("row {}: {e}", i + 2))?,
            metric: MetricKind::parse(field(1)?).ok_or_else(|| format!("row {}: unknown metric", i + 2))?,
            value: parse(field(2)?)?,
            baseline: if baseline.is_empty() { None } else { Some(parse(baseline)?) },
            samples: field(5)?.parse().map_err(|e| format!("row {}: {e}", i + 2))?,
        });
    }
    Ok(out)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
