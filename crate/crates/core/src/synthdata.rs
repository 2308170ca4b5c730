//! Synthetic federated scenarios, a CSV loader and label transforms.
//!
//! Each client draws features from its own Gaussian and labels them with a
//! linear rule whose direction is the scenario's base direction rotated by a
//! client-specific angle in `[0, heterogeneity]`. The rotation stays in one
//! fixed plane, so all clients' tasks share a low-dimensional structure while
//! the angle spread controls how much they disagree.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::evaluation::MetricKind;
use crate::models::{Batch, TaskKind};
use crate::rng::{self, tag, Stream};

/// Graph counts of the 13 distinct-class clients, ascending.
pub const GRAPH_DC_SIZES: [usize; 13] = [
    188, 336, 344, 351, 405, 467, 756, 1000, 1000, 2000, 4110, 4127, 4337,
];

pub const MIN_ROWS: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("transform {transform:?} undefined for target {value} at row {row}, column {column}")]
    Domain {
        transform: LabelTransform,
        row: usize,
        column: usize,
        value: f64,
    },
    #[error("label transforms apply to regression clients only")]
    NotRegression,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("dataset has no training rows")]
    Empty,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    DistinctClasses,
    DistinctTasks,
}

fn default_noise() -> f64 {
    0.1
}

fn default_shift() -> f64 {
    0.5
}

fn default_outputs() -> usize {
    1
}

fn default_regression_metric() -> MetricKind {
    MetricKind::Mse
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub clients: usize,
    /// Rows per client, ascending; client `i` (1-based) gets `sizes[i-1]`.
    pub sizes: Vec<usize>,
    pub feature_dim: usize,
    /// Share of clients (the largest ids) holding regression tasks.
    #[serde(default)]
    pub regression_fraction: f64,
    /// Maximum rotation of a client's task direction, radians in `[0, π]`.
    pub heterogeneity: f64,
    /// Standard deviation of regression target noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Standard deviation of the client feature means around the origin.
    #[serde(default = "default_shift")]
    pub feature_shift: f64,
    #[serde(default = "default_outputs")]
    pub regression_outputs: usize,
    #[serde(default = "default_regression_metric")]
    pub regression_metric: MetricKind,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        if self.clients < 2 {
            return bad(format!("need at least 2 clients, got {}", self.clients));
        }
        if self.sizes.len() != self.clients {
            return bad(format!("{} sizes for {} clients", self.sizes.len(), self.clients));
        }
        if self.sizes.windows(2).any(|w| w[0] > w[1]) {
            return bad("sizes must be ascending".into());
        }
        if let Some(&s) = self.sizes.iter().find(|&&s| s < MIN_ROWS) {
            return bad(format!("client size {s} below minimum {MIN_ROWS}"));
        }
        if self.feature_dim < 2 {
            return bad("feature_dim must be at least 2".into());
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.heterogeneity) {
            return bad(format!("heterogeneity {} outside [0, π]", self.heterogeneity));
        }
        if !(0.0..=1.0).contains(&self.regression_fraction) {
            return bad("regression_fraction outside [0, 1]".into());
        }
        if self.kind == ScenarioKind::DistinctClasses && self.regression_fraction > 0.0 {
            return bad("distinct-classes scenarios have no regression clients".into());
        }
        if !(self.noise >= 0.0) || !(self.feature_shift >= 0.0) {
            return bad("noise and feature_shift must be nonnegative".into());
        }
        if self.regression_outputs == 0 {
            return bad("regression_outputs must be ≥ 1".into());
        }
        if self.regression_metric == MetricKind::Accuracy {
            return bad("regression clients cannot use accuracy".into());
        }
        Ok(())
    }

    pub fn regression_clients(&self) -> usize {
        match self.kind {
            ScenarioKind::DistinctClasses => 0,
            ScenarioKind::DistinctTasks => (self.regression_fraction * self.clients as f64).round() as usize,
        }
    }
}

/// Integer-divides a size schedule, e.g. to shrink published counts.
pub fn scale_sizes(sizes: &[usize], divisor: usize) -> Vec<usize> {
    sizes.iter().map(|s| s / divisor).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelTransform {
    /// `log(5 − y)`
    LogNegPlus5,
    /// `log(−y)`
    LogNeg,
    /// `log(y)`
    Log,
    Identity,
}

impl LabelTransform {
    pub fn apply(self, y: f64) -> Option<f64> {
        let arg = match self {
            LabelTransform::Identity => return Some(y),
            LabelTransform::LogNegPlus5 => 5.0 - y,
            LabelTransform::LogNeg => -y,
            LabelTransform::Log => y,
        };
        (arg > 0.0).then(|| arg.ln())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// One client's private data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    /// 1-based.
    pub id: u32,
    /// `[N, d]`
    pub features: Tensor,
    /// `[N, k]`; binary targets are `[N, 1]` in `{0, 1}`.
    pub targets: Tensor,
    pub task: TaskKind,
    pub metric: MetricKind,
    pub splits: Splits,
    /// Transforms applied to target columns, in application order.
    pub label_transforms: Vec<(usize, LabelTransform)>,
    /// Labeling direction used by the generator, if synthetic.
    pub task_direction: Option<Vec<f64>>,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn outputs(&self) -> usize {
        self.targets.cols()
    }

    pub fn train_count(&self) -> usize {
        self.splits.train.len()
    }

    pub fn batch(&self, rows: &[usize]) -> Batch {
        Batch {
            features: self.features.select_rows(rows),
            targets: self.targets.select_rows(rows),
        }
    }
}

/// 80/10/10 split of a seeded shuffle.
pub fn split_indices(n: usize, rng: &mut Stream) -> Splits {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_train = n * 8 / 10;
    let n_valid = n / 10;
    let test = idx.split_off(n_train + n_valid);
    let valid = idx.split_off(n_train);
    Splits { train: idx, valid, test }
}

fn gaussian_vec(rng: &mut Stream, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(u: &[f64], v: &[f64], angle: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    u.iter().zip(v).map(|(a, b)| c * a + s * b).collect()
}

pub fn generate_scenario(config: &ScenarioConfig) -> Result<Vec<ClientDataset>, DataError> {
    config.validate()?;
    let d = config.feature_dim;
    let mut base = rng::stream(config.seed, &[tag::SCENARIO]);
    let mut u = gaussian_vec(&mut base, d, 1.0);
    normalize(&mut u);
    let mut v = gaussian_vec(&mut base, d, 1.0);
    let proj = dot(&u, &v);
    v.iter_mut().zip(&u).for_each(|(x, a)| *x -= proj * a);
    normalize(&mut v);

    let first_regression = config.clients - config.regression_clients();
    (0..config.clients)
        .map(|i| {
            let id = (i + 1) as u32;
            let n = config.sizes[i];
            let mut rng = rng::stream(config.seed, &[tag::CLIENT_DATA, id as u64]);
            let angle = config.heterogeneity * rng.random::<f64>();
            let direction = rotate(&u, &v, angle);
            let mean = gaussian_vec(&mut rng, d, config.feature_shift);

            let mut features = Vec::with_capacity(n * d);
            for _ in 0..n {
                for m in &mean {
                    features.push(m + rng.sample::<f64, _>(StandardNormal));
                }
            }
            let regression = i >= first_regression;
            let (targets, k) = if regression {
                let k = config.regression_outputs;
                let dirs: Vec<Vec<f64>> = (0..k)
                    .map(|j| rotate(&u, &v, angle + j as f64 * std::f64::consts::FRAC_PI_2 / k as f64))
                    .collect();
                let mut t = Vec::with_capacity(n * k);
                for row in features.chunks_exact(d) {
                    for w in &dirs {
                        t.push(dot(w, row) + config.noise * rng.sample::<f64, _>(StandardNormal));
                    }
                }
                (t, k)
            } else {
                let t = features
                    .chunks_exact(d)
                    .map(|row| if dot(&direction, row) > 0.0 { 1.0 } else { 0.0 })
                    .collect();
                (t, 1)
            };
            let splits = split_indices(n, &mut rng::stream(config.seed, &[tag::SPLIT, id as u64]));
            Ok(ClientDataset {
                id,
                features: Tensor::new(vec![n, d], features).expect("n·d elements"),
                targets: Tensor::new(vec![n, k], targets).expect("n·k elements"),
                task: if regression { TaskKind::Regression } else { TaskKind::BinaryClassification },
                metric: if regression { config.regression_metric } else { MetricKind::Accuracy },
                splits,
                label_transforms: Vec::new(),
                task_direction: Some(direction),
            })
        })
        .collect()
}

/// Applies `transform` to every target column.
pub fn apply_label_transform(ds: &ClientDataset, transform: LabelTransform) -> Result<ClientDataset, DataError> {
    let cols: Vec<usize> = (0..ds.outputs()).collect();
    apply_label_transform_columns(ds, transform, &cols)
}

/// Applies `transform` to the listed target columns only.
pub fn apply_label_transform_columns(
    ds: &ClientDataset,
    transform: LabelTransform,
    columns: &[usize],
) -> Result<ClientDataset, DataError> {
    if ds.task != TaskKind::Regression {
        return Err(DataError::NotRegression);
    }
    let k = ds.outputs();
    if let Some(&c) = columns.iter().find(|&&c| c >= k) {
        return Err(DataError::InvalidConfig(format!("target column {c} out of range (k = {k})")));
    }
    let mut data = ds.targets.data().to_vec();
    for row in 0..ds.len() {
        for &column in columns {
            let y = &mut data[row * k + column];
            *y = transform.apply(*y).ok_or(DataError::Domain {
                transform,
                row,
                column,
                value: *y,
            })?;
        }
    }
    let mut out = ds.clone();
    out.targets = Tensor::new(ds.targets.shape().to_vec(), data).expect("same shape");
    out.label_transforms.extend(columns.iter().map(|&c| (c, transform)));
    Ok(out)
}

/// Column roles for [`load_tabular`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularSchema {
    pub client_id: u32,
    pub features: Vec<String>,
    pub targets: Vec<String>,
    pub task: TaskKind,
    pub metric: MetricKind,
    #[serde(default)]
    pub split_seed: u64,
}

/// Reads a headed CSV file. Rows keep file order; the split is a seeded
/// shuffle like the synthetic generator's.
pub fn load_tabular(path: &Path, schema: &TabularSchema) -> Result<ClientDataset, DataError> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let column = |name: &String| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::MissingColumn(name.clone()))
    };
    let fcols: Vec<usize> = schema.features.iter().map(column).collect::<Result<_, _>>()?;
    let tcols: Vec<usize> = schema.targets.iter().map(column).collect::<Result<_, _>>()?;
    if fcols.is_empty() || tcols.is_empty() {
        return Err(DataError::InvalidConfig("need at least one feature and one target column".into()));
    }
    if schema.task == TaskKind::BinaryClassification && tcols.len() != 1 {
        return Err(DataError::InvalidConfig("binary classification takes one target column".into()));
    }

    let mut features = Vec::new();
    let mut targets = Vec::new();
    let mut rows = 0;
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| DataError::Parse { line, message: e.to_string() })?;
        let num = |c: usize| -> Result<f64, DataError> {
            let s = rec.get(c).ok_or(DataError::Parse { line, message: format!("missing field {c}") })?;
            s.trim().parse::<f64>().map_err(|e| DataError::Parse { line, message: format!("`{s}`: {e}") })
        };
        for &c in &fcols {
            features.push(num(c)?);
        }
        for &c in &tcols {
            let y = num(c)?;
            if schema.task == TaskKind::BinaryClassification && y != 0.0 && y != 1.0 {
                return Err(DataError::Parse { line, message: format!("label {y} is not 0 or 1") });
            }
            targets.push(y);
        }
        rows += 1;
    }
    if rows < MIN_ROWS {
        return Err(DataError::InvalidConfig(format!("{rows} rows, need at least {MIN_ROWS}")));
    }
    let splits = split_indices(rows, &mut rng::stream(schema.split_seed, &[tag::SPLIT, schema.client_id as u64]));
    Ok(ClientDataset {
        id: schema.client_id,
        features: Tensor::new(vec![rows, fcols.len()], features).expect("rows·d"),
        targets: Tensor::new(vec![rows, tcols.len()], targets).expect("rows·k"),
        task: schema.task,
        metric: schema.metric,
        splits,
        label_transforms: Vec::new(),
        task_direction: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataStatistics {
    pub count: usize,
    pub mean: Vec<f64>,
    pub median: Vec<f64>,
}

/// Count, per-feature mean and per-feature median over the training split.
pub fn data_statistics(ds: &ClientDataset) -> Result<DataStatistics, DataError> {
    let rows = &ds.splits.train;
    if rows.is_empty() {
        return Err(DataError::Empty);
    }
    let d = ds.feature_dim();
    let n = rows.len();
    let mut mean = vec![0.0; d];
    let mut median = Vec::with_capacity(d);
    let mut column = Vec::with_capacity(n);
    for (j, m) in mean.iter_mut().enumerate() {
        column.clear();
        column.extend(rows.iter().map(|&r| ds.features.row(r)[j]));
        *m = column.iter().sum::<f64>() / n as f64;
        column.sort_by(f64::total_cmp);
        median.push(if n % 2 == 1 {
            column[n / 2]
        } else {
            (column[n / 2 - 1] + column[n / 2]) / 2.0
        });
    }
    Ok(DataStatistics { count: n, mean, median })
}
