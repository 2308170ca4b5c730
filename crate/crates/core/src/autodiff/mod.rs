//! Minimal expression-graph differentiation over dense `f64` tensors.
//!
//! Gradients are built as ordinary graph nodes, so a gradient expression can
//! be differentiated again. Second order is what meta-learning needs and is
//! the highest order covered by tests.

mod graph;
mod tensor;

use std::collections::BTreeMap;

use thiserror::Error;

pub use graph::{Expr, Graph};
pub use tensor::Tensor;

/// Variance epsilon for batch normalization.
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("input `{0}` has no binding")]
    Unbound(String),
    #[error("non-finite value produced by node {node} ({kind})")]
    NonFinite { node: usize, kind: &'static str },
    #[error("gradient root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("input `{0}` is not reachable from the root")]
    NotReachable(String),
}

/// Nodes produced by a training-mode batch-norm layer.
#[derive(Debug, Clone, Copy)]
pub struct BatchNormTrain {
    pub output: Expr,
    /// Per-feature batch mean, shape `[1, h]`.
    pub batch_mean: Expr,
    /// Per-feature biased batch variance, shape `[1, h]`.
    pub batch_var: Expr,
}

impl Graph {
    /// Training-mode batch normalization of `x: [N, h]` with batch statistics.
    /// Built from primitive nodes, so it differentiates to any supported order.
    pub fn batchnorm_train(
        &mut self,
        x: Expr,
        gamma: Expr,
        beta: Expr,
    ) -> Result<BatchNormTrain, AutodiffError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "batchnorm expects [N, h], got {shape:?}"
            )));
        }
        let (n, h) = (shape[0], shape[1]);
        let sum = self.sum_to(x, &[1, h])?;
        let mean = self.scale(sum, 1.0 / n as f64);
        let centered = self.sub(x, mean)?;
        let sq = self.square(centered);
        let sq_sum = self.sum_to(sq, &[1, h])?;
        let var = self.scale(sq_sum, 1.0 / n as f64);
        let normalized = self.normalize(centered, var)?;
        let scaled = self.mul(normalized, gamma)?;
        let output = self.add(scaled, beta)?;
        Ok(BatchNormTrain {
            output,
            batch_mean: mean,
            batch_var: var,
        })
    }

    /// Evaluation-mode batch normalization using fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Expr,
        gamma: Expr,
        beta: Expr,
        running_mean: Expr,
        running_var: Expr,
    ) -> Result<Expr, AutodiffError> {
        let centered = self.sub(x, running_mean)?;
        let normalized = self.normalize(centered, running_var)?;
        let scaled = self.mul(normalized, gamma)?;
        self.add(scaled, beta)
    }

    fn normalize(&mut self, centered: Expr, var: Expr) -> Result<Expr, AutodiffError> {
        let eps = self.scalar(BN_EPS);
        let shifted = self.add(var, eps)?;
        let std = self.sqrt(shifted);
        let inv = self.recip(std);
        self.mul(centered, inv)
    }
}

/// Largest relative disagreement between analytic gradients and central
/// differences, `|analytic − fd| / max(1, |fd|)`, over every element of every
/// binding. Bindings that do not reach `root` have zero analytic gradient.
pub fn fd_check(
    graph: &Graph,
    root: Expr,
    bindings: &BTreeMap<String, Tensor>,
    eps: f64,
) -> Result<f64, AutodiffError> {
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut work = graph.clone();
    let reachable = work.reachable_inputs(root);
    let names: Vec<&str> = reachable
        .iter()
        .map(String::as_str)
        .filter(|n| bindings.contains_key(*n))
        .collect();
    let grads = work.gradient(root, &names)?;
    let roots: Vec<Expr> = names.iter().map(|n| grads[*n]).collect();
    let analytic: BTreeMap<&str, Tensor> = names
        .iter()
        .copied()
        .zip(work.evaluate_many(&roots, bindings)?)
        .collect();

    let mut worst = 0.0_f64;
    let mut perturbed = bindings.clone();
    for (name, value) in bindings {
        for k in 0..value.numel() {
            let orig = value.data()[k];
            perturbed.get_mut(name).expect("same keys").data_mut()[k] = orig + eps;
            let plus = graph.evaluate(root, &perturbed)?.data()[0];
            perturbed.get_mut(name).expect("same keys").data_mut()[k] = orig - eps;
            let minus = graph.evaluate(root, &perturbed)?.data()[0];
            perturbed.get_mut(name).expect("same keys").data_mut()[k] = orig;

            let fd = (plus - minus) / (2.0 * eps);
            let a = analytic
                .get(name.as_str())
                .map(|t| t.data()[k])
                .unwrap_or(0.0);
            worst = worst.max((a - fd).abs() / fd.abs().max(1.0));
        }
    }
    Ok(worst)
}
