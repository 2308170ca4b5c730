//! The experiment file: a TOML document validated in full before any
//! computation starts.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use fedhtl::evaluation::MetricKind;
use fedhtl::models::{LayerSpec, TaskKind};
use fedhtl::runtime::{ExperimentConfig, WeightSource};
use fedhtl::strategies::StrategyConfig;
use fedhtl::synthdata::{
    apply_label_transform_columns, generate_scenario, load_tabular, ClientDataset, LabelTransform, ScenarioConfig,
    TabularSchema,
};

use crate::CliError;

fn one() -> u32 {
    1
}

fn full() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub rounds: u32,
    #[serde(default = "one")]
    pub repeats: u32,
    /// Master seed. Data generation and splits use it directly; repeat `r`
    /// trains with `seed + r`.
    #[serde(default)]
    pub seed: u64,
    /// Output directory, relative to the working directory.
    pub output: Option<PathBuf>,
    #[serde(default = "full")]
    pub sample_fraction: f64,
    #[serde(default)]
    pub weight_source: WeightSource,
    #[serde(default = "yes")]
    pub parallel: bool,
    /// Also write every delivered payload, hex encoded.
    #[serde(default)]
    pub record_payloads: bool,
    /// Per-client weights for the customized aggregate, ascending id.
    pub custom_weights: Option<Vec<f64>>,
    pub scenario: Option<ScenarioConfig>,
    #[serde(default)]
    pub tabular: Vec<TabularClient>,
    #[serde(default)]
    pub label_transforms: Vec<TransformSpec>,
    pub model: ModelSection,
    pub strategy: StrategyConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub body: Vec<LayerSpec>,
}

/// One client read from a CSV file; the path is relative to the experiment
/// file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularClient {
    pub path: PathBuf,
    pub client_id: u32,
    pub features: Vec<String>,
    pub targets: Vec<String>,
    pub task: TaskKind,
    pub metric: MetricKind,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformSpec {
    pub client: u32,
    pub transform: LabelTransform,
    /// Target columns; all when omitted.
    pub columns: Option<Vec<usize>>,
}

/// A parsed, validated experiment with its data loaded.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub file: ExperimentFile,
    pub seed: u64,
    pub datasets: Vec<ClientDataset>,
    /// Raw bytes of the experiment file.
    pub bytes: Vec<u8>,
}

impl Experiment {
    /// Engine configuration for repeat `r`.
    pub fn repeat_config(&self, r: u32) -> ExperimentConfig {
        let f = &self.file;
        ExperimentConfig {
            rounds: f.rounds,
            seed: self.seed_of(r),
            body: f.model.body.clone(),
            strategy: f.strategy.clone(),
            sample_fraction: f.sample_fraction,
            weight_source: f.weight_source,
            parallel: f.parallel,
            record_payloads: f.record_payloads,
        }
    }

    pub fn seed_of(&self, r: u32) -> u64 {
        self.seed.wrapping_add(r as u64)
    }
}

pub fn parse(text: &str) -> Result<ExperimentFile, CliError> {
    let raw: toml::Table = toml::from_str(text).map_err(|e| CliError::config(format!("experiment file: {e}")))?;
    if raw
        .get("scenario")
        .and_then(|s| s.as_table())
        .is_some_and(|s| s.contains_key("seed"))
    {
        return Err(CliError::config(
            "scenario.seed is not allowed; the top-level seed drives data generation",
        ));
    }
    toml::from_str(text).map_err(|e| CliError::config(format!("experiment file: {e}")))
}

/// Reads, validates and loads everything an experiment needs.
pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Experiment, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let file = parse(text)?;
    let seed = seed_override.unwrap_or(file.seed);
    let base = path.parent().unwrap_or(Path::new("."));

    if file.repeats == 0 {
        return Err(CliError::config("repeats must be ≥ 1"));
    }
    file.strategy.validate().map_err(CliError::config)?;
    let mut datasets = match (&file.scenario, file.tabular.is_empty()) {
        (Some(sc), true) => {
            let sc = ScenarioConfig { seed, ..sc.clone() };
            generate_scenario(&sc).map_err(CliError::config)?
        }
        (None, false) => file
            .tabular
            .iter()
            .map(|t| {
                let schema = TabularSchema {
                    client_id: t.client_id,
                    features: t.features.clone(),
                    targets: t.targets.clone(),
                    task: t.task,
                    metric: t.metric,
                    split_seed: seed,
                };
                let p = base.join(&t.path);
                load_tabular(&p, &schema).map_err(|e| CliError::config(format!("{}: {e}", p.display())))
            })
            .collect::<Result<Vec<_>, _>>()?,
        _ => return Err(CliError::config("give exactly one of [scenario] or [[tabular]]")),
    };
    for t in &file.label_transforms {
        let ds = datasets
            .iter_mut()
            .find(|d| d.id == t.client)
            .ok_or_else(|| CliError::config(format!("label transform for unknown client {}", t.client)))?;
        let columns: Vec<usize> = t.columns.clone().unwrap_or_else(|| (0..ds.outputs()).collect());
        *ds = apply_label_transform_columns(ds, t.transform, &columns)
            .map_err(|e| CliError::config(format!("client {}: {e}", t.client)))?;
    }
    datasets.sort_by_key(|d| d.id);
    if let Some(w) = &file.custom_weights {
        if w.len() != datasets.len() {
            return Err(CliError::config(format!(
                "{} custom weights for {} clients",
                w.len(),
                datasets.len()
            )));
        }
        if w.iter().any(|x| !(*x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(CliError::config("custom weights must be nonnegative with a positive sum"));
        }
    }
    Ok(Experiment {
        file,
        seed,
        datasets,
        bytes,
    })
}
