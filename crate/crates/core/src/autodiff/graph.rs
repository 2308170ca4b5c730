use std::collections::{BTreeMap, HashMap};

use super::tensor::{self, broadcast_shapes, matrix_dims, Tensor};
use super::AutodiffError;

/// Handle to a node in a [`Graph`].
///
/// Operands always have smaller ids than the nodes that use them, so
/// descending id order is a valid reverse topological order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Expr(usize);

impl Expr {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Input(String),
    Constant(Tensor),
    Add(Expr, Expr),
    Sub(Expr, Expr),
    Mul(Expr, Expr),
    MatMul(Expr, Expr),
    Transpose(Expr),
    Relu(Expr),
    /// Heaviside step, `1[x > 0]`. Derivative of relu; itself has zero derivative.
    Step(Expr),
    Tanh(Expr),
    Sigmoid(Expr),
    Log(Expr),
    Recip(Expr),
    Sqrt(Expr),
    Square(Expr),
    ReduceMean(Expr),
    SumTo(Expr),
    BroadcastTo(Expr),
    Softmax(Expr),
    SoftmaxCrossEntropy { logits: Expr, labels: Expr },
    SigmoidCrossEntropy { logits: Expr, targets: Expr },
    Mse { pred: Expr, target: Expr },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Relu(_) => "relu",
            Op::Step(_) => "step",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log(_) => "log",
            Op::Recip(_) => "recip",
            Op::Sqrt(_) => "sqrt",
            Op::Square(_) => "square",
            Op::ReduceMean(_) => "reduce-mean",
            Op::SumTo(_) => "sum-to",
            Op::BroadcastTo(_) => "broadcast-to",
            Op::Softmax(_) => "softmax",
            Op::SoftmaxCrossEntropy { .. } => "softmax-cross-entropy",
            Op::SigmoidCrossEntropy { .. } => "sigmoid-cross-entropy",
            Op::Mse { .. } => "mse",
        }
    }

    fn operands(&self) -> Vec<Expr> {
        match *self {
            Op::Input(_) | Op::Constant(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::SoftmaxCrossEntropy { logits, labels } => vec![logits, labels],
            Op::SigmoidCrossEntropy { logits, targets } => vec![logits, targets],
            Op::Mse { pred, target } => vec![pred, target],
            Op::Transpose(a)
            | Op::Relu(a)
            | Op::Step(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Recip(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::ReduceMean(a)
            | Op::SumTo(a)
            | Op::BroadcastTo(a)
            | Op::Softmax(a) => vec![a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    /// True when some input is reachable below this node.
    depends_on_input: bool,
}

/// Append-only expression graph. Gradient expressions are added to the same
/// graph, so they can be evaluated and differentiated again.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: HashMap<String, Expr>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, e: Expr) -> &[usize] {
        &self.nodes[e.0].shape
    }

    pub fn kind(&self, e: Expr) -> &'static str {
        self.nodes[e.0].op.name()
    }

    /// Declares a named input. Declaring the same name twice with the same
    /// shape returns the existing node.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<Expr, AutodiffError> {
        tensor::validate_shape(shape)?;
        if let Some(&e) = self.inputs.get(name) {
            if self.shape(e) != shape {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "input `{name}` redeclared with shape {shape:?}, was {:?}",
                    self.shape(e)
                )));
            }
            return Ok(e);
        }
        let e = self.push(Op::Input(name.to_string()), shape.to_vec(), true);
        self.inputs.insert(name.to_string(), e);
        Ok(e)
    }

    pub fn input_named(&self, name: &str) -> Option<Expr> {
        self.inputs.get(name).copied()
    }

    pub fn constant(&mut self, value: Tensor) -> Expr {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape, false)
    }

    pub fn scalar(&mut self, value: f64) -> Expr {
        self.constant(Tensor::scalar(value))
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, depends_on_input: bool) -> Expr {
        self.nodes.push(Node {
            op,
            shape,
            depends_on_input,
        });
        Expr(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op: Op, shape: Vec<usize>) -> Expr {
        let dep = op
            .operands()
            .iter()
            .any(|o| self.nodes[o.0].depends_on_input);
        self.push(op, shape, dep)
    }

    fn binary_shape(&self, a: Expr, b: Expr, what: &str) -> Result<Vec<usize>, AutodiffError> {
        broadcast_shapes(self.shape(a), self.shape(b)).ok_or_else(|| {
            AutodiffError::ShapeMismatch(format!(
                "{what}: cannot broadcast {:?} with {:?}",
                self.shape(a),
                self.shape(b)
            ))
        })
    }

    pub fn add(&mut self, a: Expr, b: Expr) -> Result<Expr, AutodiffError> {
        let s = self.binary_shape(a, b, "add")?;
        Ok(self.push_op(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: Expr, b: Expr) -> Result<Expr, AutodiffError> {
        let s = self.binary_shape(a, b, "sub")?;
        Ok(self.push_op(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: Expr, b: Expr) -> Result<Expr, AutodiffError> {
        let s = self.binary_shape(a, b, "mul")?;
        Ok(self.push_op(Op::Mul(a, b), s))
    }

    /// `a * c` for a constant scalar `c`.
    pub fn scale(&mut self, a: Expr, c: f64) -> Expr {
        let k = self.scalar(c);
        let s = self.shape(a).to_vec();
        self.push_op(Op::Mul(a, k), s)
    }

    pub fn matmul(&mut self, a: Expr, b: Expr) -> Result<Expr, AutodiffError> {
        let (n, k1) = matrix_dims(self.shape(a));
        let (k2, m) = matrix_dims(self.shape(b));
        if k1 != k2 {
            return Err(AutodiffError::ShapeMismatch(format!(
                "matmul: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(self.push_op(Op::MatMul(a, b), vec![n, m]))
    }

    pub fn transpose(&mut self, a: Expr) -> Expr {
        let (r, c) = matrix_dims(self.shape(a));
        self.push_op(Op::Transpose(a), vec![c, r])
    }

    fn unary(&mut self, op: Op, a: Expr) -> Expr {
        let s = self.shape(a).to_vec();
        self.push_op(op, s)
    }

    pub fn relu(&mut self, a: Expr) -> Expr {
        self.unary(Op::Relu(a), a)
    }

    pub fn step(&mut self, a: Expr) -> Expr {
        self.unary(Op::Step(a), a)
    }

    pub fn tanh(&mut self, a: Expr) -> Expr {
        self.unary(Op::Tanh(a), a)
    }

    pub fn sigmoid(&mut self, a: Expr) -> Expr {
        self.unary(Op::Sigmoid(a), a)
    }

    pub fn log(&mut self, a: Expr) -> Expr {
        self.unary(Op::Log(a), a)
    }

    pub fn recip(&mut self, a: Expr) -> Expr {
        self.unary(Op::Recip(a), a)
    }

    pub fn sqrt(&mut self, a: Expr) -> Expr {
        self.unary(Op::Sqrt(a), a)
    }

    pub fn square(&mut self, a: Expr) -> Expr {
        self.unary(Op::Square(a), a)
    }

    pub fn softmax(&mut self, a: Expr) -> Expr {
        self.unary(Op::Softmax(a), a)
    }

    /// Mean of all elements, shape `[1]`.
    pub fn reduce_mean(&mut self, a: Expr) -> Expr {
        self.push_op(Op::ReduceMean(a), vec![1])
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum_all(&mut self, a: Expr) -> Expr {
        self.sum_to(a, &[1]).expect("[1] is a valid reduction target")
    }

    /// Sums `a` over the axes that are absent or of extent 1 in `shape`.
    pub fn sum_to(&mut self, a: Expr, shape: &[usize]) -> Result<Expr, AutodiffError> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        tensor::validate_shape(shape)?;
        if broadcast_shapes(shape, self.shape(a)).as_deref() != Some(self.shape(a)) {
            return Err(AutodiffError::ShapeMismatch(format!(
                "cannot sum {:?} to {shape:?}",
                self.shape(a)
            )));
        }
        Ok(self.push_op(Op::SumTo(a), shape.to_vec()))
    }

    pub fn broadcast_to(&mut self, a: Expr, shape: &[usize]) -> Result<Expr, AutodiffError> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        if broadcast_shapes(self.shape(a), shape).as_deref() != Some(shape) {
            return Err(AutodiffError::ShapeMismatch(format!(
                "cannot broadcast {:?} to {shape:?}",
                self.shape(a)
            )));
        }
        Ok(self.push_op(Op::BroadcastTo(a), shape.to_vec()))
    }

    /// Mean over rows of `-Σ_c labels·log softmax(logits)`. Labels are one-hot
    /// (or any nonnegative weights) of the same `[N, C]` shape.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Expr,
        labels: Expr,
    ) -> Result<Expr, AutodiffError> {
        self.same_shape(logits, labels, "softmax-cross-entropy")?;
        Ok(self.push_op(Op::SoftmaxCrossEntropy { logits, labels }, vec![1]))
    }

    /// Mean over elements of the binary cross-entropy of `sigmoid(logits)`
    /// against targets in `[0, 1]`, computed stably as `softplus(z) - y·z`.
    pub fn sigmoid_cross_entropy(
        &mut self,
        logits: Expr,
        targets: Expr,
    ) -> Result<Expr, AutodiffError> {
        self.same_shape(logits, targets, "sigmoid-cross-entropy")?;
        Ok(self.push_op(Op::SigmoidCrossEntropy { logits, targets }, vec![1]))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Expr, target: Expr) -> Result<Expr, AutodiffError> {
        self.same_shape(pred, target, "mse")?;
        Ok(self.push_op(Op::Mse { pred, target }, vec![1]))
    }

    fn same_shape(&self, a: Expr, b: Expr, what: &str) -> Result<(), AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Nodes reachable from `roots`, as a mask over node ids.
    fn reachable(&self, roots: &[Expr]) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack: Vec<Expr> = roots.to_vec();
        while let Some(e) = stack.pop() {
            if seen[e.0] {
                continue;
            }
            seen[e.0] = true;
            stack.extend(self.nodes[e.0].op.operands());
        }
        seen
    }

    /// Names of the inputs reachable from `root`, sorted.
    pub fn reachable_inputs(&self, root: Expr) -> Vec<String> {
        let seen = self.reachable(&[root]);
        let mut names: Vec<String> = self
            .inputs
            .iter()
            .filter(|(_, e)| seen[e.0])
            .map(|(n, _)| n.clone())
            .collect();
        names.sort();
        names
    }

    pub fn evaluate(
        &self,
        root: Expr,
        bindings: &BTreeMap<String, Tensor>,
    ) -> Result<Tensor, AutodiffError> {
        Ok(self
            .evaluate_many(&[root], bindings)?
            .pop()
            .expect("one root in, one value out"))
    }

    /// Evaluates several roots in one pass, sharing intermediate values.
    pub fn evaluate_many(
        &self,
        roots: &[Expr],
        bindings: &BTreeMap<String, Tensor>,
    ) -> Result<Vec<Tensor>, AutodiffError> {
        let seen = self.reachable(roots);
        let last = roots.iter().map(|e| e.0).max().unwrap_or(0);
        let mut values: Vec<Option<Tensor>> = vec![None; last + 1];
        for id in 0..=last {
            if !seen[id] {
                continue;
            }
            let v = self.eval_node(id, &values, bindings)?;
            if !v.is_finite() {
                return Err(AutodiffError::NonFinite {
                    node: id,
                    kind: self.nodes[id].op.name(),
                });
            }
            values[id] = Some(v);
        }
        Ok(roots
            .iter()
            .map(|e| values[e.0].clone().expect("root was evaluated"))
            .collect())
    }

    fn eval_node(
        &self,
        id: usize,
        values: &[Option<Tensor>],
        bindings: &BTreeMap<String, Tensor>,
    ) -> Result<Tensor, AutodiffError> {
        let node = &self.nodes[id];
        let v = |e: Expr| values[e.0].as_ref().expect("operand evaluated before use");
        let out = match &node.op {
            Op::Input(name) => {
                let t = bindings
                    .get(name)
                    .ok_or_else(|| AutodiffError::Unbound(name.clone()))?;
                if t.shape() != node.shape.as_slice() {
                    return Err(AutodiffError::ShapeMismatch(format!(
                        "binding `{name}` has shape {:?}, input declared {:?}",
                        t.shape(),
                        node.shape
                    )));
                }
                t.clone()
            }
            Op::Constant(t) => t.clone(),
            Op::Add(a, b) => tensor::zip_broadcast(v(*a), v(*b), &node.shape, |x, y| x + y),
            Op::Sub(a, b) => tensor::zip_broadcast(v(*a), v(*b), &node.shape, |x, y| x - y),
            Op::Mul(a, b) => tensor::zip_broadcast(v(*a), v(*b), &node.shape, |x, y| x * y),
            Op::MatMul(a, b) => tensor::matmul(v(*a), v(*b)),
            Op::Transpose(a) => tensor::transpose(v(*a)),
            Op::Relu(a) => v(*a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Step(a) => v(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Tanh(a) => v(*a).map(f64::tanh),
            Op::Sigmoid(a) => v(*a).map(sigmoid),
            Op::Log(a) => v(*a).map(f64::ln),
            Op::Recip(a) => v(*a).map(|x| 1.0 / x),
            Op::Sqrt(a) => v(*a).map(f64::sqrt),
            Op::Square(a) => v(*a).map(|x| x * x),
            Op::ReduceMean(a) => {
                let t = v(*a);
                Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64)
            }
            Op::SumTo(a) => tensor::sum_to(v(*a), &node.shape),
            Op::BroadcastTo(a) => tensor::broadcast_to(v(*a), &node.shape),
            Op::Softmax(a) => tensor::softmax_rows(v(*a)),
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let z = v(*logits);
                let t = v(*labels);
                let lse = tensor::logsumexp_rows(z);
                let (r, c) = matrix_dims(z.shape());
                let mut total = 0.0;
                for (i, l) in lse.iter().enumerate() {
                    for j in 0..c {
                        let k = i * c + j;
                        total -= t.data()[k] * (z.data()[k] - l);
                    }
                }
                Tensor::scalar(total / r as f64)
            }
            Op::SigmoidCrossEntropy { logits, targets } => {
                let z = v(*logits);
                let y = v(*targets);
                let total: f64 = z
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&z, &y)| softplus(z) - y * z)
                    .sum();
                Tensor::scalar(total / z.numel() as f64)
            }
            Op::Mse { pred, target } => {
                let p = v(*pred);
                let t = v(*target);
                let total: f64 = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                Tensor::scalar(total / p.numel() as f64)
            }
        };
        Ok(out)
    }

    /// Builds expressions for the gradient of the scalar `root` with respect
    /// to each named input. The returned expressions live in this graph and
    /// may themselves be differentiated.
    pub fn gradient(
        &mut self,
        root: Expr,
        wrt: &[&str],
    ) -> Result<BTreeMap<String, Expr>, AutodiffError> {
        if self.shape(root).iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarRoot(self.shape(root).to_vec()));
        }
        let seen = self.reachable(&[root]);
        let mut targets = Vec::with_capacity(wrt.len());
        for name in wrt {
            match self.inputs.get(*name) {
                Some(&e) if seen[e.0] => targets.push((name.to_string(), e)),
                _ => return Err(AutodiffError::NotReachable(name.to_string())),
            }
        }

        let mut adjoint: Vec<Option<Expr>> = vec![None; root.0 + 1];
        let root_shape = self.shape(root).to_vec();
        adjoint[root.0] = Some(self.constant(Tensor::filled(&root_shape, 1.0)));

        for id in (0..=root.0).rev() {
            if !seen[id] || !self.nodes[id].depends_on_input {
                continue;
            }
            let Some(g) = adjoint[id] else { continue };
            let op = self.nodes[id].op.clone();
            for (operand, contribution) in self.vjp(Expr(id), &op, g)? {
                adjoint[operand.0] = Some(match adjoint[operand.0] {
                    Some(prev) => self.add(prev, contribution)?,
                    None => contribution,
                });
            }
        }

        let mut out = BTreeMap::new();
        for (name, e) in targets {
            let g = match adjoint[e.0] {
                Some(g) => g,
                None => self.constant(Tensor::zeros(self.shape(e))),
            };
            out.insert(name, g);
        }
        Ok(out)
    }

    /// Vector-Jacobian products of one node, expressed as new graph nodes.
    /// Operands that do not depend on any input are skipped.
    fn vjp(&mut self, node: Expr, op: &Op, g: Expr) -> Result<Vec<(Expr, Expr)>, AutodiffError> {
        let mut out = Vec::new();
        let needs = |s: &Self, e: Expr| s.nodes[e.0].depends_on_input;
        match *op {
            Op::Input(_) | Op::Constant(_) | Op::Step(_) => {}
            Op::Add(a, b) => {
                if needs(self, a) {
                    let sa = self.shape(a).to_vec();
                    out.push((a, self.sum_to(g, &sa)?));
                }
                if needs(self, b) {
                    let sb = self.shape(b).to_vec();
                    out.push((b, self.sum_to(g, &sb)?));
                }
            }
            Op::Sub(a, b) => {
                if needs(self, a) {
                    let sa = self.shape(a).to_vec();
                    out.push((a, self.sum_to(g, &sa)?));
                }
                if needs(self, b) {
                    let sb = self.shape(b).to_vec();
                    let neg = self.scale(g, -1.0);
                    out.push((b, self.sum_to(neg, &sb)?));
                }
            }
            Op::Mul(a, b) => {
                if needs(self, a) {
                    let sa = self.shape(a).to_vec();
                    let t = self.mul(g, b)?;
                    out.push((a, self.sum_to(t, &sa)?));
                }
                if needs(self, b) {
                    let sb = self.shape(b).to_vec();
                    let t = self.mul(g, a)?;
                    out.push((b, self.sum_to(t, &sb)?));
                }
            }
            Op::MatMul(a, b) => {
                if needs(self, a) {
                    let bt = self.transpose(b);
                    let ga = self.matmul(g, bt)?;
                    out.push((a, self.reshape_like(ga, a)));
                }
                if needs(self, b) {
                    let at = self.transpose(a);
                    let gb = self.matmul(at, g)?;
                    out.push((b, self.reshape_like(gb, b)));
                }
            }
            Op::Transpose(a) => {
                let t = self.transpose(g);
                out.push((a, self.reshape_like(t, a)));
            }
            Op::Relu(a) => {
                let s = self.step(a);
                out.push((a, self.mul(g, s)?));
            }
            Op::Tanh(a) => {
                // 1 - y²
                let one = self.scalar(1.0);
                let y2 = self.square(node);
                let d = self.sub(one, y2)?;
                out.push((a, self.mul(g, d)?));
            }
            Op::Sigmoid(a) => {
                // y (1 - y)
                let one = self.scalar(1.0);
                let omy = self.sub(one, node)?;
                let d = self.mul(node, omy)?;
                out.push((a, self.mul(g, d)?));
            }
            Op::Log(a) => {
                let r = self.recip(a);
                out.push((a, self.mul(g, r)?));
            }
            Op::Recip(a) => {
                let y2 = self.square(node);
                let t = self.mul(g, y2)?;
                out.push((a, self.scale(t, -1.0)));
            }
            Op::Sqrt(a) => {
                let r = self.recip(node);
                let t = self.mul(g, r)?;
                out.push((a, self.scale(t, 0.5)));
            }
            Op::Square(a) => {
                let t = self.mul(g, a)?;
                out.push((a, self.scale(t, 2.0)));
            }
            Op::ReduceMean(a) => {
                let sa = self.shape(a).to_vec();
                let n = sa.iter().product::<usize>() as f64;
                let t = self.scale(g, 1.0 / n);
                out.push((a, self.broadcast_to(t, &sa)?));
            }
            Op::SumTo(a) => {
                let sa = self.shape(a).to_vec();
                out.push((a, self.broadcast_to(g, &sa)?));
            }
            Op::BroadcastTo(a) => {
                let sa = self.shape(a).to_vec();
                out.push((a, self.sum_to(g, &sa)?));
            }
            Op::Softmax(a) => {
                // y ⊙ (g − rowsum(g ⊙ y))
                let sa = self.shape(a).to_vec();
                let (r, _) = matrix_dims(&sa);
                let gy = self.mul(g, node)?;
                let rs = self.sum_to(gy, &[r, 1])?;
                let rs = self.broadcast_to(rs, &sa)?;
                let inner = self.sub(g, rs)?;
                out.push((a, self.mul(node, inner)?));
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let s = self.shape(logits).to_vec();
                let (r, _) = matrix_dims(&s);
                let gs = self.scale(g, 1.0 / r as f64);
                let gb = self.broadcast_to(gs, &s)?;
                let probs = self.softmax(logits);
                if needs(self, logits) {
                    // softmax(z)·rowsum(t) − t
                    let rs = self.sum_to(labels, &[r, 1])?;
                    let rs = self.broadcast_to(rs, &s)?;
                    let pr = self.mul(probs, rs)?;
                    let d = self.sub(pr, labels)?;
                    out.push((logits, self.mul(gb, d)?));
                }
                if needs(self, labels) {
                    let lp = self.log(probs);
                    let t = self.mul(gb, lp)?;
                    out.push((labels, self.scale(t, -1.0)));
                }
            }
            Op::SigmoidCrossEntropy { logits, targets } => {
                let s = self.shape(logits).to_vec();
                let n = s.iter().product::<usize>() as f64;
                let gs = self.scale(g, 1.0 / n);
                let gb = self.broadcast_to(gs, &s)?;
                if needs(self, logits) {
                    let p = self.sigmoid(logits);
                    let d = self.sub(p, targets)?;
                    out.push((logits, self.mul(gb, d)?));
                }
                if needs(self, targets) {
                    let t = self.mul(gb, logits)?;
                    out.push((targets, self.scale(t, -1.0)));
                }
            }
            Op::Mse { pred, target } => {
                let s = self.shape(pred).to_vec();
                let n = s.iter().product::<usize>() as f64;
                let gs = self.scale(g, 2.0 / n);
                let gb = self.broadcast_to(gs, &s)?;
                let d = self.sub(pred, target)?;
                let gp = self.mul(gb, d)?;
                if needs(self, pred) {
                    out.push((pred, gp));
                }
                if needs(self, target) {
                    out.push((target, self.scale(gp, -1.0)));
                }
            }
        }
        Ok(out)
    }

    /// Matmul promotes rank-1 operands to row vectors; map gradients back.
    fn reshape_like(&mut self, g: Expr, like: Expr) -> Expr {
        if self.shape(g) == self.shape(like) {
            return g;
        }
        // Only the `[c]` vs `[1, c]` case reaches here.
        let s = self.shape(like).to_vec();
        self.push_op(Op::SumTo(g), s)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
