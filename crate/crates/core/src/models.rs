//! Feed-forward models whose parameters carry a sharing role.
//!
//! Body layers are `dense → [batch-norm] → activation`; the head is a single
//! dense layer. Dense body parameters are [`ParamRole::SharedBody`], all
//! batch-norm parameters and running statistics are [`ParamRole::BatchNorm`],
//! head parameters are [`ParamRole::PersonalHead`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Expr, Graph, Tensor};

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("parameter mismatch: {0}")]
    Mismatch(String),
    #[error("malformed parameter payload: {0}")]
    Malformed(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamRole {
    SharedBody,
    PersonalHead,
    BatchNorm,
}

impl ParamRole {
    fn tag(self) -> u8 {
        match self {
            ParamRole::SharedBody => 0,
            ParamRole::PersonalHead => 1,
            ParamRole::BatchNorm => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ParamRole::SharedBody,
            1 => ParamRole::PersonalHead,
            2 => ParamRole::BatchNorm,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub role: ParamRole,
    ordinal: usize,
}

/// Ordered, uniquely named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter; names must be unique.
    pub fn insert(&mut self, name: &str, tensor: Tensor, role: ParamRole) -> Result<(), ModelError> {
        if self.entries.contains_key(name) {
            return Err(ModelError::Mismatch(format!("duplicate parameter `{name}`")));
        }
        let ordinal = self.entries.len();
        self.entries.insert(
            name.to_string(),
            Param {
                tensor,
                role,
                ordinal,
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| &mut p.tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn roles(&self) -> impl Iterator<Item = ParamRole> + '_ {
        self.entries.values().map(|p| p.role)
    }

    pub fn element_count(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    /// Splits into `(selected, rest)` by role, preserving order.
    pub fn partition(&self, pred: impl Fn(ParamRole) -> bool) -> (ParamSet, ParamSet) {
        self.partition_by(|_, p| pred(p.role))
    }

    pub fn partition_by(&self, pred: impl Fn(&str, &Param) -> bool) -> (ParamSet, ParamSet) {
        let mut selected = ParamSet::new();
        let mut rest = ParamSet::new();
        for (name, p) in &self.entries {
            let target = if pred(name, p) { &mut selected } else { &mut rest };
            target.entries.insert(name.clone(), p.clone());
        }
        (selected, rest)
    }

    /// Inverse of [`ParamSet::partition`]: restores the original order.
    pub fn merge(a: ParamSet, b: ParamSet) -> Result<ParamSet, ModelError> {
        let mut all: Vec<(String, Param)> = a.entries.into_iter().chain(b.entries).collect();
        all.sort_by_key(|(_, p)| p.ordinal);
        let mut out = ParamSet::new();
        for (name, p) in all {
            if out.entries.insert(name.clone(), p).is_some() {
                return Err(ModelError::Mismatch(format!("`{name}` present in both sets")));
            }
        }
        Ok(out)
    }

    /// Overwrites values of the entries named in `other`. Every name must
    /// exist here with the same shape.
    pub fn update_from(&mut self, other: &ParamSet) -> Result<(), ModelError> {
        for (name, p) in &other.entries {
            let mine = self
                .entries
                .get_mut(name)
                .ok_or_else(|| ModelError::Mismatch(format!("unknown parameter `{name}`")))?;
            if mine.tensor.shape() != p.tensor.shape() {
                return Err(ModelError::Mismatch(format!(
                    "`{name}`: shape {:?} vs {:?}",
                    mine.tensor.shape(),
                    p.tensor.shape()
                )));
            }
            mine.tensor = p.tensor.clone();
        }
        Ok(())
    }

    /// Canonical serialization: entry count, then per entry the name, role,
    /// shape and little-endian `f64` elements.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.element_count() * 8);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, p) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.role.tag());
            let shape = p.tensor.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in p.tensor.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamSet, ModelError> {
        let mut r = Reader { bytes, pos: 0 };
        let count = r.u32()? as usize;
        let mut out = ParamSet::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| ModelError::Malformed(e.to_string()))?
                .to_string();
            let role = ParamRole::from_tag(r.take(1)?[0])
                .ok_or_else(|| ModelError::Malformed("unknown role tag".into()))?;
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 2 {
                return Err(ModelError::Malformed(format!("rank {rank}")));
            }
            let shape: Vec<usize> = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<_, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| ModelError::Malformed("overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| ModelError::Malformed(e.to_string()))?;
            out.insert(&name, tensor, role)
                .map_err(|e| ModelError::Malformed(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(ModelError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<ParamSet, ModelError> {
        ParamSet::from_bytes(&fs::read(path)?)
    }
}

/// Number of `f64` elements in a canonical payload.
pub fn payload_element_count(bytes: &[u8]) -> Result<usize, ModelError> {
    ParamSet::from_bytes(bytes).map(|p| p.element_count())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ModelError::Malformed("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
    #[serde(default)]
    pub batch_norm: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    BinaryClassification,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum HeadKind {
    BinaryClassification,
    Regression { outputs: usize },
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::BinaryClassification => 1,
            HeadKind::Regression { outputs } => outputs,
        }
    }

    pub fn task(self) -> TaskKind {
        match self {
            HeadKind::BinaryClassification => TaskKind::BinaryClassification,
            HeadKind::Regression { .. } => TaskKind::Regression,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_width: usize,
    pub body: Vec<LayerSpec>,
    pub head: HeadKind,
}

impl ModelSpec {
    fn validate(&self) -> Result<(), ModelError> {
        if self.input_width == 0 {
            return Err(ModelError::InvalidSpec("input width must be positive".into()));
        }
        if let Some(i) = self.body.iter().position(|l| l.width == 0) {
            return Err(ModelError::InvalidSpec(format!("body layer {i} has width 0")));
        }
        if self.head.outputs() == 0 {
            return Err(ModelError::InvalidSpec("regression output width must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are reported for update.
    Train,
    /// Running statistics.
    Eval,
}

/// A batch of rows: features `[N, d]`, targets `[N, k]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Tensor,
    pub targets: Tensor,
}

/// Result of building a forward pass into a graph.
#[derive(Debug, Clone)]
pub struct Forward {
    pub output: Expr,
    /// `(layer index, batch mean, batch var)` for train-mode batch norms.
    pub bn_stats: Vec<(usize, Expr, Expr)>,
}

/// Parameters placed in a graph: trainable ones as named inputs, buffers as
/// constants.
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    pub exprs: BTreeMap<String, Expr>,
    pub bindings: BTreeMap<String, Tensor>,
}

/// The forward "closure": a model spec plus naming conventions.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
}

pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<(ParamSet, Model), ModelError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let mut fan_in = spec.input_width;
    for (i, layer) in spec.body.iter().enumerate() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        params.insert(
            &format!("body.{i}.weight"),
            uniform(&mut rng, &[fan_in, layer.width], bound),
            ParamRole::SharedBody,
        )?;
        params.insert(
            &format!("body.{i}.bias"),
            uniform(&mut rng, &[1, layer.width], bound),
            ParamRole::SharedBody,
        )?;
        if layer.batch_norm {
            let shape = [1, layer.width];
            params.insert(&bn_name(i, "gamma"), Tensor::filled(&shape, 1.0), ParamRole::BatchNorm)?;
            params.insert(&bn_name(i, "beta"), Tensor::zeros(&shape), ParamRole::BatchNorm)?;
            params.insert(&bn_name(i, "running_mean"), Tensor::zeros(&shape), ParamRole::BatchNorm)?;
            params.insert(&bn_name(i, "running_var"), Tensor::filled(&shape, 1.0), ParamRole::BatchNorm)?;
        }
        fan_in = layer.width;
    }
    let bound = 1.0 / (fan_in as f64).sqrt();
    let k = spec.head.outputs();
    params.insert("head.weight", uniform(&mut rng, &[fan_in, k], bound), ParamRole::PersonalHead)?;
    params.insert("head.bias", uniform(&mut rng, &[1, k], bound), ParamRole::PersonalHead)?;
    Ok((params, Model { spec: spec.clone() }))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches element count")
}

fn bn_name(layer: usize, what: &str) -> String {
    format!("body.{layer}.bn.{what}")
}

/// Running statistics are updated by momentum, never by gradient steps.
pub fn is_trainable(name: &str) -> bool {
    !(name.ends_with(".running_mean") || name.ends_with(".running_var"))
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn task(&self) -> TaskKind {
        self.spec.head.task()
    }

    /// Places `params` into `graph`.
    pub fn bind(&self, graph: &mut Graph, params: &ParamSet) -> Result<BoundParams, ModelError> {
        let mut out = BoundParams::default();
        for (name, p) in params.iter() {
            let e = if is_trainable(name) {
                out.bindings.insert(name.to_string(), p.tensor.clone());
                graph.input(name, p.tensor.shape())?
            } else {
                graph.constant(p.tensor.clone())
            };
            out.exprs.insert(name.to_string(), e);
        }
        Ok(out)
    }

    /// Builds the forward pass for `x: [N, input_width]` using parameter
    /// expressions (which may be inputs or derived expressions).
    pub fn forward(
        &self,
        graph: &mut Graph,
        params: &BTreeMap<String, Expr>,
        x: Expr,
        mode: Mode,
    ) -> Result<Forward, ModelError> {
        let get = |name: &str| {
            params
                .get(name)
                .copied()
                .ok_or_else(|| ModelError::Mismatch(format!("missing parameter `{name}`")))
        };
        let xs = graph.shape(x).to_vec();
        if xs.len() != 2 || xs[1] != self.spec.input_width {
            return Err(ModelError::InvalidBatch(format!(
                "features {xs:?}, model expects [N, {}]",
                self.spec.input_width
            )));
        }
        let mut h = x;
        let mut bn_stats = Vec::new();
        for (i, layer) in self.spec.body.iter().enumerate() {
            let w = get(&format!("body.{i}.weight"))?;
            let b = get(&format!("body.{i}.bias"))?;
            let z = graph.matmul(h, w)?;
            let mut z = graph.add(z, b)?;
            if layer.batch_norm {
                let gamma = get(&bn_name(i, "gamma"))?;
                let beta = get(&bn_name(i, "beta"))?;
                z = match mode {
                    Mode::Train => {
                        let bn = graph.batchnorm_train(z, gamma, beta)?;
                        bn_stats.push((i, bn.batch_mean, bn.batch_var));
                        bn.output
                    }
                    Mode::Eval => {
                        let rm = get(&bn_name(i, "running_mean"))?;
                        let rv = get(&bn_name(i, "running_var"))?;
                        graph.batchnorm_eval(z, gamma, beta, rm, rv)?
                    }
                };
            }
            h = match layer.activation {
                Activation::Relu => graph.relu(z),
                Activation::Tanh => graph.tanh(z),
                Activation::Sigmoid => graph.sigmoid(z),
                Activation::Identity => z,
            };
        }
        let w = get("head.weight")?;
        let b = get("head.bias")?;
        let z = graph.matmul(h, w)?;
        let output = graph.add(z, b)?;
        Ok(Forward { output, bn_stats })
    }

    /// Task loss of a forward output against targets: mean sigmoid
    /// cross-entropy for binary classification, mean squared error over all
    /// outputs for regression.
    pub fn loss(
        &self,
        graph: &mut Graph,
        output: Expr,
        targets: &Tensor,
    ) -> Result<Expr, ModelError> {
        validate_targets(self.task(), self.spec.head.outputs(), targets)?;
        if graph.shape(output) != targets.shape() {
            return Err(ModelError::InvalidBatch(format!(
                "targets {:?} vs outputs {:?}",
                targets.shape(),
                graph.shape(output)
            )));
        }
        let t = graph.constant(targets.clone());
        Ok(match self.task() {
            TaskKind::BinaryClassification => graph.sigmoid_cross_entropy(output, t)?,
            TaskKind::Regression => graph.mse(output, t)?,
        })
    }

    /// Eval-mode outputs: sigmoid probabilities for classification, raw
    /// values for regression.
    pub fn predict(&self, params: &ParamSet, features: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, params)?;
        let x = g.constant(features.clone());
        let fwd = self.forward(&mut g, &bound.exprs, x, Mode::Eval)?;
        let out = match self.task() {
            TaskKind::BinaryClassification => g.sigmoid(fwd.output),
            TaskKind::Regression => fwd.output,
        };
        Ok(g.evaluate(out, &bound.bindings)?)
    }
}

fn validate_targets(task: TaskKind, width: usize, targets: &Tensor) -> Result<(), ModelError> {
    if targets.shape().len() != 2 || targets.cols() != width {
        return Err(ModelError::InvalidBatch(format!(
            "targets {:?}, expected [N, {width}]",
            targets.shape()
        )));
    }
    if task == TaskKind::BinaryClassification {
        if let Some(i) = targets.data().iter().position(|&y| y != 0.0 && y != 1.0) {
            return Err(ModelError::InvalidBatch(format!(
                "classification label {} at row {i} is not 0 or 1",
                targets.data()[i]
            )));
        }
    }
    Ok(())
}

/// A train-mode loss graph over all trainable parameters.
pub struct LossGraph {
    pub graph: Graph,
    pub bound: BoundParams,
    pub loss: Expr,
    pub bn_stats: Vec<(usize, Expr, Expr)>,
}

impl Model {
    pub fn loss_graph(&self, params: &ParamSet, batch: &Batch) -> Result<LossGraph, ModelError> {
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph, params)?;
        let x = graph.constant(batch.features.clone());
        let fwd = self.forward(&mut graph, &bound.exprs, x, Mode::Train)?;
        let loss = self.loss(&mut graph, fwd.output, &batch.targets)?;
        Ok(LossGraph {
            graph,
            bound,
            loss,
            bn_stats: fwd.bn_stats,
        })
    }

    /// Momentum update of running statistics from evaluated batch stats.
    /// Running variance uses the unbiased batch variance.
    pub fn update_running_stats(
        &self,
        params: &mut ParamSet,
        stats: &[(usize, Tensor, Tensor)],
        batch_size: usize,
    ) -> Result<(), ModelError> {
        let correction = if batch_size > 1 {
            batch_size as f64 / (batch_size - 1) as f64
        } else {
            1.0
        };
        for (layer, mean, var) in stats {
            let rm = params
                .tensor_mut(&bn_name(*layer, "running_mean"))
                .ok_or_else(|| ModelError::Mismatch("running mean missing".into()))?;
            for (r, m) in rm.data_mut().iter_mut().zip(mean.data()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = params
                .tensor_mut(&bn_name(*layer, "running_var"))
                .ok_or_else(|| ModelError::Mismatch("running var missing".into()))?;
            for (r, v) in rv.data_mut().iter_mut().zip(var.data()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * correction;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(head: HeadKind, bn: bool) -> ModelSpec {
        ModelSpec {
            input_width: 3,
            body: vec![
                LayerSpec { width: 4, activation: Activation::Tanh, batch_norm: bn },
                LayerSpec { width: 5, activation: Activation::Relu, batch_norm: bn },
            ],
            head,
        }
    }

    #[test]
    fn roles_and_determinism() {
        let s = spec(HeadKind::BinaryClassification, true);
        let (a, _) = build_model(&s, 7).unwrap();
        let (b, _) = build_model(&s, 7).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        for role in [ParamRole::SharedBody, ParamRole::BatchNorm, ParamRole::PersonalHead] {
            assert!(a.roles().any(|r| r == role));
        }
    }

    #[test]
    fn regression_head_width() {
        let s = spec(HeadKind::Regression { outputs: 19 }, false);
        let (p, _) = build_model(&s, 0).unwrap();
        assert_eq!(p.tensor("head.weight").unwrap().shape(), &[5, 19]);
        let bad = spec(HeadKind::Regression { outputs: 0 }, false);
        assert!(build_model(&bad, 0).is_err());
    }

    #[test]
    fn init_within_fan_in_bound() {
        let s = spec(HeadKind::BinaryClassification, false);
        let (p, _) = build_model(&s, 3).unwrap();
        let w = p.tensor("body.0.weight").unwrap();
        let bound = 1.0 / 3f64.sqrt();
        assert!(w.data().iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn partition_examples() {
        let (p, _) = build_model(&spec(HeadKind::BinaryClassification, true), 1).unwrap();
        let (sel, rest) = p.partition(|r| r != ParamRole::PersonalHead);
        assert!(sel.roles().all(|r| r != ParamRole::PersonalHead));
        assert!(rest.roles().all(|r| r == ParamRole::PersonalHead));
        let (sel, rest) = p.partition(|r| r == ParamRole::SharedBody);
        assert!(sel.roles().all(|r| r == ParamRole::SharedBody));
        assert!(rest.roles().any(|r| r == ParamRole::BatchNorm));
        let (a, b) = ParamSet::new().partition(|_| true);
        assert!(a.is_empty() && b.is_empty());
    }

    #[test]
    fn loss_values() {
        let s = ModelSpec {
            input_width: 2,
            body: vec![],
            head: HeadKind::BinaryClassification,
        };
        let (mut p, m) = build_model(&s, 0).unwrap();
        // zero weights → logits 0 → ln 2 on any batch
        *p.tensor_mut("head.weight").unwrap() = Tensor::zeros(&[2, 1]);
        *p.tensor_mut("head.bias").unwrap() = Tensor::zeros(&[1, 1]);
        let batch = Batch {
            features: Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap(),
            targets: Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap(),
        };
        let lg = m.loss_graph(&p, &batch).unwrap();
        let v = lg.graph.evaluate(lg.loss, &lg.bound.bindings).unwrap();
        assert!((v.data()[0] - std::f64::consts::LN_2).abs() < 1e-15);

        let bad = Batch {
            targets: Tensor::from_rows(&[vec![2.0], vec![0.0]]).unwrap(),
            ..batch
        };
        assert!(matches!(m.loss_graph(&p, &bad), Err(ModelError::InvalidBatch(_))));
    }

    #[test]
    fn perfect_regression_has_zero_loss() {
        let s = ModelSpec {
            input_width: 2,
            body: vec![],
            head: HeadKind::Regression { outputs: 1 },
        };
        let (p, m) = build_model(&s, 0).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let y = m.predict(&p, &x).unwrap();
        let lg = m.loss_graph(&p, &Batch { features: x, targets: y }).unwrap();
        assert_eq!(lg.graph.evaluate(lg.loss, &lg.bound.bindings).unwrap().data(), &[0.0]);
    }

    #[test]
    fn eval_mode_is_batch_independent() {
        let (p, m) = build_model(&spec(HeadKind::Regression { outputs: 2 }, true), 5).unwrap();
        let rows = vec![vec![0.1, 0.2, 0.3], vec![1.0, -1.0, 2.0], vec![0.0, 0.5, -0.5]];
        let all = m.predict(&p, &Tensor::from_rows(&rows).unwrap()).unwrap();
        let one = m.predict(&p, &Tensor::from_rows(&rows[1..2]).unwrap()).unwrap();
        assert_eq!(all.row(1), one.row(0));
    }

    #[test]
    fn serialization_rejects_garbage() {
        let (p, _) = build_model(&spec(HeadKind::BinaryClassification, true), 1).unwrap();
        let mut bytes = p.to_bytes();
        assert_eq!(payload_element_count(&bytes).unwrap(), p.element_count());
        bytes.push(0);
        assert!(ParamSet::from_bytes(&bytes).is_err());
        assert!(ParamSet::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let (p, _) = build_model(&spec(HeadKind::BinaryClassification, true), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        p.save(&path).unwrap();
        assert_eq!(ParamSet::load(&path).unwrap().to_bytes(), p.to_bytes());
    }

    fn arb_paramset() -> impl Strategy<Value = ParamSet> {
        proptest::collection::vec((0u8..3, 1usize..4, 1usize..4), 0..12).prop_map(|items| {
            let mut p = ParamSet::new();
            for (i, (role, r, c)) in items.into_iter().enumerate() {
                let data = (0..r * c).map(|k| (i * 31 + k) as f64 * 0.5).collect();
                p.insert(
                    &format!("p{i}"),
                    Tensor::new(vec![r, c], data).unwrap(),
                    ParamRole::from_tag(role).unwrap(),
                )
                .unwrap();
            }
            p
        })
    }

    proptest! {
        #[test]
        fn partition_then_merge_is_identity(p in arb_paramset(), mask in 0u8..8) {
            let (a, b) = p.partition(|r| mask & (1 << r.tag()) != 0);
            let merged = ParamSet::merge(a, b).unwrap();
            prop_assert_eq!(merged.to_bytes(), p.to_bytes());
        }

        #[test]
        fn serialization_round_trips(p in arb_paramset()) {
            prop_assert_eq!(ParamSet::from_bytes(&p.to_bytes()).unwrap().to_bytes(), p.to_bytes());
        }
    }
}
