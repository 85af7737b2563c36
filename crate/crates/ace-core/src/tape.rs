//! Tensor-level computation tape with reverse-mode differentiation.
//!
//! A [`Tape`] is built once per forward pass: nodes are appended in
//! topological order, shapes are inferred and validated immediately, and the
//! resulting graph can then be evaluated (and differentiated) against a map of
//! named input tensors. Gradients are taken of a single scalar output with
//! respect to every named input; constant nodes never receive adjoints, and
//! whole subgraphs that depend only on constants are skipped during the
//! backward sweep.
//!
//! The operation set is deliberately small: exactly what the encoder, the
//! concept head and the two training losses need.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Floor applied to each logarithm argument in binary cross-entropy,
/// equivalent to clamping probabilities to `[BCE_EPSILON, 1 - BCE_EPSILON]`.
pub const BCE_EPSILON: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Node {
    /// Named leaf bound at evaluation time; participates in gradients.
    Input { name: String },
    /// Baked-in tensor; never receives a gradient.
    Constant { value: Tensor },
    /// `x @ w + b` broadcast over rows: `[n,p] x [p,q] + [q] -> [n,q]`.
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    /// Row-wise softmax of a rank-2 tensor.
    SoftmaxRows { x: NodeId },
    /// Pairwise squared Euclidean distances: `[n,d] x [m,d] -> [n,m]`.
    SqDistRows { x: NodeId, y: NodeId },
    /// Picks `x[i, cols[i]]` for each row: `[n,m] -> [n]`.
    SelectCols { x: NodeId, cols: Vec<usize> },
    /// Row minimum over all columns except `cols[i]`: `[n,m] -> [n]`.
    MinExcludingCols { x: NodeId, cols: Vec<usize> },
    /// Mean of the rows assigned to each group: `[n,d] -> [n_groups,d]`.
    GroupMeanRows {
        x: NodeId,
        groups: Vec<usize>,
        n_groups: usize,
    },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: f64 },
    Offset { x: NodeId, amount: f64 },
    Sum { x: NodeId },
    Mean { x: NodeId },
    /// Mean-over-rows binary cross-entropy between probabilities and 0/1
    /// labels, optionally restricted to an active subset of columns.
    Bce {
        probs: NodeId,
        labels: NodeId,
        active: Option<Vec<bool>>,
    },
}

/// Record of a forward computation plan.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    shapes: Vec<Vec<usize>>,
    needs_grad: Vec<bool>,
    inputs: BTreeMap<String, NodeId>,
    named: BTreeMap<String, NodeId>,
}

/// Values of every node after a forward pass over a [`Tape`].
#[derive(Debug)]
pub struct Evaluation {
    values: Vec<Tensor>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.shapes[id.0]
    }

    /// The node registered under `name`, either an input or a node tagged via
    /// [`Tape::name_node`].
    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.named.get(name).copied()
    }

    /// Registers a human-readable name for an interior node so callers can
    /// look its value up after evaluation.
    pub fn name_node(&mut self, name: &str, id: NodeId) -> Result<()> {
        if self.named.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "node name {name:?} is already taken"
            )));
        }
        self.named.insert(name.to_string(), id);
        Ok(())
    }

    fn push(&mut self, node: Node, shape: Vec<usize>, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(node);
        self.shapes.push(shape);
        self.needs_grad.push(needs_grad);
        id
    }

    /// Declares a named input leaf with a fixed shape.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if self.inputs.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "input {name:?} declared twice"
            )));
        }
        let id = self.push(
            Node::Input {
                name: name.to_string(),
            },
            shape.to_vec(),
            true,
        );
        self.inputs.insert(name.to_string(), id);
        self.named.insert(name.to_string(), id);
        Ok(id)
    }

    /// Embeds a constant tensor. Constants never accumulate gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Node::Constant { value }, shape, false)
    }

    fn rank2(&self, id: NodeId, op: &str, role: &str) -> Result<(usize, usize)> {
        let s = &self.shapes[id.0];
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "{op}: {role} must be rank 2, found shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, p) = self.rank2(x, "affine", "x")?;
        let (wp, q) = self.rank2(w, "affine", "w")?;
        let bs = &self.shapes[b.0];
        if p != wp {
            return Err(Error::ShapeMismatch(format!(
                "affine: x has {p} columns but w has {wp} rows"
            )));
        }
        if bs.as_slice() != [q] {
            return Err(Error::ShapeMismatch(format!(
                "affine: bias shape {bs:?} does not match w columns [{q}]"
            )));
        }
        let ng = self.needs_grad[x.0] || self.needs_grad[w.0] || self.needs_grad[b.0];
        Ok(self.push(Node::Affine { x, w, b }, vec![n, q], ng))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let shape = self.shapes[x.0].clone();
        let ng = self.needs_grad[x.0];
        self.push(Node::Relu { x }, shape, ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let shape = self.shapes[x.0].clone();
        let ng = self.needs_grad[x.0];
        self.push(Node::Sigmoid { x }, shape, ng)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.rank2(x, "softmax_rows", "x")?;
        let shape = self.shapes[x.0].clone();
        let ng = self.needs_grad[x.0];
        Ok(self.push(Node::SoftmaxRows { x }, shape, ng))
    }

    pub fn sq_dist_rows(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        let (n, d) = self.rank2(x, "sq_dist_rows", "x")?;
        let (m, d2) = self.rank2(y, "sq_dist_rows", "y")?;
        if d != d2 {
            return Err(Error::ShapeMismatch(format!(
                "sq_dist_rows: x has width {d} but y has width {d2}"
            )));
        }
        let ng = self.needs_grad[x.0] || self.needs_grad[y.0];
        Ok(self.push(Node::SqDistRows { x, y }, vec![n, m], ng))
    }

    pub fn select_cols(&mut self, x: NodeId, cols: Vec<usize>) -> Result<NodeId> {
        let (n, m) = self.rank2(x, "select_cols", "x")?;
        if cols.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "select_cols: {} column indices for {n} rows",
                cols.len()
            )));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= m) {
            return Err(Error::InvalidArgument(format!(
                "select_cols: column index {bad} out of range for {m} columns"
            )));
        }
        let ng = self.needs_grad[x.0];
        Ok(self.push(Node::SelectCols { x, cols }, vec![n], ng))
    }

    pub fn min_excluding_cols(&mut self, x: NodeId, cols: Vec<usize>) -> Result<NodeId> {
        let (n, m) = self.rank2(x, "min_excluding_cols", "x")?;
        if m < 2 {
            return Err(Error::InvalidArgument(format!(
                "min_excluding_cols: needs at least 2 columns, found {m}"
            )));
        }
        if cols.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "min_excluding_cols: {} column indices for {n} rows",
                cols.len()
            )));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= m) {
            return Err(Error::InvalidArgument(format!(
                "min_excluding_cols: column index {bad} out of range for {m} columns"
            )));
        }
        let ng = self.needs_grad[x.0];
        Ok(self.push(Node::MinExcludingCols { x, cols }, vec![n], ng))
    }

    pub fn group_mean_rows(
        &mut self,
        x: NodeId,
        groups: Vec<usize>,
        n_groups: usize,
    ) -> Result<NodeId> {
        let (n, d) = self.rank2(x, "group_mean_rows", "x")?;
        if groups.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "group_mean_rows: {} group ids for {n} rows",
                groups.len()
            )));
        }
        if n_groups == 0 {
            return Err(Error::InvalidArgument(
                "group_mean_rows: n_groups must be positive".to_string(),
            ));
        }
        let mut counts = vec![0usize; n_groups];
        for &g in &groups {
            if g >= n_groups {
                return Err(Error::InvalidArgument(format!(
                    "group_mean_rows: group id {g} out of range for {n_groups} groups"
                )));
            }
            counts[g] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidArgument(format!(
                "group_mean_rows: group {empty} has no member rows"
            )));
        }
        let ng = self.needs_grad[x.0];
        Ok(self.push(
            Node::GroupMeanRows {
                x,
                groups,
                n_groups,
            },
            vec![n_groups, d],
            ng,
        ))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &str) -> Result<Vec<usize>> {
        let sa = &self.shapes[a.0];
        let sb = &self.shapes[b.0];
        if sa != sb {
            return Err(Error::ShapeMismatch(format!(
                "{op}: operand shapes {sa:?} and {sb:?} differ"
            )));
        }
        Ok(sa.clone())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape(a, b, "add")?;
        let ng = self.needs_grad[a.0] || self.needs_grad[b.0];
        Ok(self.push(Node::Add { a, b }, shape, ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape(a, b, "sub")?;
        let ng = self.needs_grad[a.0] || self.needs_grad[b.0];
        Ok(self.push(Node::Sub { a, b }, shape, ng))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let shape = self.shapes[x.0].clone();
        let ng = self.needs_grad[x.0];
        self.push(Node::Scale { x, factor }, shape, ng)
    }

    pub fn offset(&mut self, x: NodeId, amount: f64) -> NodeId {
        let shape = self.shapes[x.0].clone();
        let ng = self.needs_grad[x.0];
        self.push(Node::Offset { x, amount }, shape, ng)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let ng = self.needs_grad[x.0];
        self.push(Node::Sum { x }, Vec::new(), ng)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        if self.shapes[x.0].iter().product::<usize>() == 0 {
            return Err(Error::InvalidArgument(
                "mean: cannot average an empty tensor".to_string(),
            ));
        }
        let ng = self.needs_grad[x.0];
        Ok(self.push(Node::Mean { x }, Vec::new(), ng))
    }

    /// Binary cross-entropy between probabilities and 0/1 labels, summed over
    /// columns and averaged over rows. When `active` is given, only columns
    /// flagged `true` contribute.
    pub fn bce(
        &mut self,
        probs: NodeId,
        labels: NodeId,
        active: Option<Vec<bool>>,
    ) -> Result<NodeId> {
        let (n, k) = self.rank2(probs, "bce", "probs")?;
        let (n2, k2) = self.rank2(labels, "bce", "labels")?;
        if (n, k) != (n2, k2) {
            return Err(Error::ShapeMismatch(format!(
                "bce: probs shape [{n}, {k}] does not match labels shape [{n2}, {k2}]"
            )));
        }
        if n == 0 {
            return Err(Error::InvalidArgument(
                "bce: needs at least one row".to_string(),
            ));
        }
        if let Some(mask) = &active {
            if mask.len() != k {
                return Err(Error::ShapeMismatch(format!(
                    "bce: active mask has {} entries for {k} columns",
                    mask.len()
                )));
            }
        }
        let ng = self.needs_grad[probs.0] || self.needs_grad[labels.0];
        Ok(self.push(
            Node::Bce {
                probs,
                labels,
                active,
            },
            Vec::new(),
            ng,
        ))
    }

    /// Runs the forward pass. Every declared input must be bound with a tensor
    /// of exactly the declared shape.
    pub fn evaluate(&self, bindings: &BTreeMap<String, Tensor>) -> Result<Evaluation> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let value = self.forward_node(idx, node, bindings, &values)?;
            values.push(value);
        }
        Ok(Evaluation { values })
    }

    /// Values of all named nodes (inputs and nodes tagged via
    /// [`Tape::name_node`]) after a forward pass.
    pub fn evaluate_named(
        &self,
        bindings: &BTreeMap<String, Tensor>,
    ) -> Result<BTreeMap<String, Tensor>> {
        let eval = self.evaluate(bindings)?;
        Ok(self
            .named
            .iter()
            .map(|(name, id)| (name.clone(), eval.value(*id).clone()))
            .collect())
    }

    /// Gradients of the scalar `output` node with respect to every declared
    /// input. Inputs that do not influence the output get zero tensors.
    pub fn gradient(
        &self,
        bindings: &BTreeMap<String, Tensor>,
        output: NodeId,
    ) -> Result<BTreeMap<String, Tensor>> {
        let (_, grads) = self.evaluate_with_gradient(bindings, output)?;
        Ok(grads)
    }

    /// Forward pass plus reverse sweep in one call, returning both the full
    /// evaluation and the per-input gradients.
    pub fn evaluate_with_gradient(
        &self,
        bindings: &BTreeMap<String, Tensor>,
        output: NodeId,
    ) -> Result<(Evaluation, BTreeMap<String, Tensor>)> {
        if output.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!(
                "gradient output node {} is not on this tape",
                output.0
            )));
        }
        if !self.shapes[output.0].is_empty() {
            return Err(Error::InvalidArgument(format!(
                "gradient requires a scalar output, found shape {:?}",
                self.shapes[output.0]
            )));
        }
        let eval = self.evaluate(bindings)?;

        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoints[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(grad) = adjoints[idx].take() else {
                continue;
            };
            if !self.needs_grad[idx] {
                continue;
            }
            self.backward_node(idx, &grad, &eval, &mut adjoints);
            adjoints[idx] = Some(grad);
        }

        let mut out = BTreeMap::new();
        for (name, id) in &self.inputs {
            let tensor = match &adjoints[id.0] {
                Some(g) => Tensor::from_vec(self.shapes[id.0].clone(), g.clone())?,
                None => Tensor::zeros(&self.shapes[id.0]),
            };
            out.insert(name.clone(), tensor);
        }
        Ok((eval, out))
    }

    fn forward_node(
        &self,
        idx: usize,
        node: &Node,
        bindings: &BTreeMap<String, Tensor>,
        values: &[Tensor],
    ) -> Result<Tensor> {
        let val = |id: NodeId| &values[id.0];
        match node {
            Node::Input { name } => {
                let bound = bindings
                    .get(name)
                    .ok_or_else(|| Error::MissingInput(name.clone()))?;
                if bound.shape() != self.shapes[idx].as_slice() {
                    return Err(Error::ShapeMismatch(format!(
                        "input {name:?} bound with shape {:?}, declared {:?}",
                        bound.shape(),
                        self.shapes[idx]
                    )));
                }
                Ok(bound.clone())
            }
            Node::Constant { value } => Ok(value.clone()),
            Node::Affine { x, w, b } => {
                let (xt, wt, bt) = (val(*x), val(*w), val(*b));
                let (n, p) = (xt.rows(), xt.cols());
                let q = wt.cols();
                let out = affine_forward(xt.data(), n, p, wt.data(), q, bt.data());
                Tensor::from_vec(vec![n, q], out)
            }
            Node::Relu { x } => {
                let mut out = val(*x).clone();
                for v in out.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                Ok(out)
            }
            Node::Sigmoid { x } => {
                let mut out = val(*x).clone();
                for v in out.data_mut() {
                    *v = math::sigmoid(*v);
                }
                Ok(out)
            }
            Node::SoftmaxRows { x } => {
                let xt = val(*x);
                let (n, m) = (xt.rows(), xt.cols());
                let mut out = Vec::with_capacity(n * m);
                for i in 0..n {
                    out.extend(math::softmax(xt.row(i)));
                }
                Tensor::from_vec(vec![n, m], out)
            }
            Node::SqDistRows { x, y } => {
                let (xt, yt) = (val(*x), val(*y));
                let (n, m) = (xt.rows(), yt.rows());
                let mut out = Vec::with_capacity(n * m);
                for i in 0..n {
                    let xi = xt.row(i);
                    for j in 0..m {
                        out.push(math::squared_distance(xi, yt.row(j)));
                    }
                }
                Tensor::from_vec(vec![n, m], out)
            }
            Node::SelectCols { x, cols } => {
                let xt = val(*x);
                let out = cols
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| xt.get2(i, c))
                    .collect();
                Tensor::from_vec(vec![cols.len()], out)
            }
            Node::MinExcludingCols { x, cols } => {
                let xt = val(*x);
                let m = xt.cols();
                let mut out = Vec::with_capacity(cols.len());
                for (i, &skip) in cols.iter().enumerate() {
                    let row = xt.row(i);
                    let mut best = f64::INFINITY;
                    for (j, &v) in row.iter().enumerate() {
                        if j != skip && v < best {
                            best = v;
                        }
                    }
                    debug_assert!(m >= 2);
                    out.push(best);
                }
                Tensor::from_vec(vec![cols.len()], out)
            }
            Node::GroupMeanRows {
                x,
                groups,
                n_groups,
            } => {
                let xt = val(*x);
                let d = xt.cols();
                let mut sums = vec![0.0; n_groups * d];
                let mut counts = vec![0usize; *n_groups];
                for (i, &g) in groups.iter().enumerate() {
                    counts[g] += 1;
                    let row = xt.row(i);
                    let acc = &mut sums[g * d..(g + 1) * d];
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                for (g, &c) in counts.iter().enumerate() {
                    let inv = 1.0 / c as f64;
                    for v in &mut sums[g * d..(g + 1) * d] {
                        *v *= inv;
                    }
                }
                Tensor::from_vec(vec![*n_groups, d], sums)
            }
            Node::Add { a, b } => {
                let mut out = val(*a).clone();
                for (o, &v) in out.data_mut().iter_mut().zip(val(*b).data()) {
                    *o += v;
                }
                Ok(out)
            }
            Node::Sub { a, b } => {
                let mut out = val(*a).clone();
                for (o, &v) in out.data_mut().iter_mut().zip(val(*b).data()) {
                    *o -= v;
                }
                Ok(out)
            }
            Node::Scale { x, factor } => {
                let mut out = val(*x).clone();
                for v in out.data_mut() {
                    *v *= factor;
                }
                Ok(out)
            }
            Node::Offset { x, amount } => {
                let mut out = val(*x).clone();
                for v in out.data_mut() {
                    *v += amount;
                }
                Ok(out)
            }
            Node::Sum { x } => Ok(Tensor::scalar(val(*x).data().iter().sum())),
            Node::Mean { x } => {
                let xt = val(*x);
                let total: f64 = xt.data().iter().sum();
                Ok(Tensor::scalar(total / xt.numel() as f64))
            }
            Node::Bce {
                probs,
                labels,
                active,
            } => {
                let (pt, ct) = (val(*probs), val(*labels));
                let (n, k) = (pt.rows(), pt.cols());
                let mut total = 0.0;
                for i in 0..n {
                    for j in 0..k {
                        if let Some(mask) = active {
                            if !mask[j] {
                                continue;
                            }
                        }
                        let c = ct.get2(i, j);
                        if c != 0.0 && c != 1.0 {
                            return Err(Error::InvalidArgument(format!(
                                "bce: label at row {i}, column {j} is {c}, expected 0 or 1"
                            )));
                        }
                        // Flooring each logarithm's argument separately is the
                        // clamp to [eps, 1-eps] computed without the rounding
                        // error of forming `1 - (1 - eps)`.
                        let p = pt.get2(i, j);
                        total -= c * math::ln(p.max(BCE_EPSILON))
                            + (1.0 - c) * math::ln((1.0 - p).max(BCE_EPSILON));
                    }
                }
                Ok(Tensor::scalar(total / n as f64))
            }
        }
    }

    fn backward_node(
        &self,
        idx: usize,
        grad: &[f64],
        eval: &Evaluation,
        adjoints: &mut Vec<Option<Vec<f64>>>,
    ) {
        // Adds `contribution` into the adjoint buffer of `target`, skipping
        // targets whose subgraph contains no inputs.
        macro_rules! accumulate {
            ($target:expr, $contribution:expr) => {{
                let t: NodeId = $target;
                if self.needs_grad[t.0] {
                    let buf = adjoints[t.0].get_or_insert_with(|| {
                        vec![0.0; self.shapes[t.0].iter().product::<usize>()]
                    });
                    let contribution = $contribution;
                    for (a, v) in buf.iter_mut().zip(contribution) {
                        *a += v;
                    }
                }
            }};
        }

        let node = &self.nodes[idx];
        match node {
            Node::Input { .. } | Node::Constant { .. } => {}
            Node::Affine { x, w, b } => {
                let xt = eval.value(*x);
                let wt = eval.value(*w);
                let (n, p) = (xt.rows(), xt.cols());
                let q = wt.cols();
                if self.needs_grad[x.0] {
                    // dL/dx = g @ w^T
                    let gx = matmul_nt(grad, n, q, wt.data(), p);
                    accumulate!(*x, gx);
                }
                if self.needs_grad[w.0] {
                    // dL/dw = x^T @ g
                    let gw = matmul_tn(xt.data(), n, p, grad, q);
                    accumulate!(*w, gw);
                }
                if self.needs_grad[b.0] {
                    let mut gb = vec![0.0; q];
                    for i in 0..n {
                        for (a, &g) in gb.iter_mut().zip(&grad[i * q..(i + 1) * q]) {
                            *a += g;
                        }
                    }
                    accumulate!(*b, gb);
                }
            }
            Node::Relu { x } => {
                let xt = eval.value(*x);
                let gx: Vec<f64> = xt
                    .data()
                    .iter()
                    .zip(grad)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                accumulate!(*x, gx);
            }
            Node::Sigmoid { x } => {
                let yt = eval.value(NodeId(idx));
                let gx: Vec<f64> = yt
                    .data()
                    .iter()
                    .zip(grad)
                    .map(|(&y, &g)| g * y * (1.0 - y))
                    .collect();
                accumulate!(*x, gx);
            }
            Node::SoftmaxRows { x } => {
                let yt = eval.value(NodeId(idx));
                let (n, m) = (yt.rows(), yt.cols());
                let mut gx = vec![0.0; n * m];
                for i in 0..n {
                    let y = yt.row(i);
                    let g = &grad[i * m..(i + 1) * m];
                    let dot: f64 = y.iter().zip(g).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..m {
                        gx[i * m + j] = y[j] * (g[j] - dot);
                    }
                }
                accumulate!(*x, gx);
            }
            Node::SqDistRows { x, y } => {
                let xt = eval.value(*x);
                let yt = eval.value(*y);
                let (n, d) = (xt.rows(), xt.cols());
                let m = yt.rows();
                let gx_needed = self.needs_grad[x.0];
                let gy_needed = self.needs_grad[y.0];
                let mut gx = vec![0.0; if gx_needed { n * d } else { 0 }];
                let mut gy = vec![0.0; if gy_needed { m * d } else { 0 }];
                for i in 0..n {
                    let xr = xt.row(i);
                    for j in 0..m {
                        let coef = 2.0 * grad[i * m + j];
                        if coef == 0.0 {
                            continue;
                        }
                        let yr = yt.row(j);
                        for k in 0..d {
                            let diff = coef * (xr[k] - yr[k]);
                            if gx_needed {
                                gx[i * d + k] += diff;
                            }
                            if gy_needed {
                                gy[j * d + k] -= diff;
                            }
                        }
                    }
                }
                if gx_needed {
                    accumulate!(*x, gx);
                }
                if gy_needed {
                    accumulate!(*y, gy);
                }
            }
            Node::SelectCols { x, cols } => {
                let m = self.shapes[x.0][1];
                let mut gx = vec![0.0; cols.len() * m];
                for (i, &c) in cols.iter().enumerate() {
                    gx[i * m + c] += grad[i];
                }
                accumulate!(*x, gx);
            }
            Node::MinExcludingCols { x, cols } => {
                // Route each row's gradient to the first column achieving the
                // minimum, matching the deterministic forward scan.
                let xt = eval.value(*x);
                let m = xt.cols();
                let mut gx = vec![0.0; cols.len() * m];
                for (i, &skip) in cols.iter().enumerate() {
                    let row = xt.row(i);
                    let mut best = f64::INFINITY;
                    let mut best_j = usize::MAX;
                    for (j, &v) in row.iter().enumerate() {
                        if j != skip && v < best {
                            best = v;
                            best_j = j;
                        }
                    }
                    // An all-NaN row selects no column; leave its gradient
                    // zero and let the caller's finiteness checks reject the
                    // evaluation.
                    if best_j != usize::MAX {
                        gx[i * m + best_j] += grad[i];
                    }
                }
                accumulate!(*x, gx);
            }
            Node::GroupMeanRows { x, groups, .. } => {
                let d = self.shapes[x.0][1];
                let mut counts = vec![0usize; self.shapes[NodeId(idx).0][0]];
                for &g in groups {
                    counts[g] += 1;
                }
                let mut gx = vec![0.0; groups.len() * d];
                for (i, &g) in groups.iter().enumerate() {
                    let inv = 1.0 / counts[g] as f64;
                    let src = &grad[g * d..(g + 1) * d];
                    for (a, &v) in gx[i * d..(i + 1) * d].iter_mut().zip(src) {
                        *a = v * inv;
                    }
                }
                accumulate!(*x, gx);
            }
            Node::Add { a, b } => {
                accumulate!(*a, grad.iter().copied());
                accumulate!(*b, grad.iter().copied());
            }
            Node::Sub { a, b } => {
                accumulate!(*a, grad.iter().copied());
                accumulate!(*b, grad.iter().map(|&g| -g));
            }
            Node::Scale { x, factor } => {
                let f = *factor;
                accumulate!(*x, grad.iter().map(|&g| g * f));
            }
            Node::Offset { x, .. } => {
                accumulate!(*x, grad.iter().copied());
            }
            Node::Sum { x } => {
                let n = self.shapes[x.0].iter().product::<usize>();
                accumulate!(*x, core::iter::repeat(grad[0]).take(n));
            }
            Node::Mean { x } => {
                let n = self.shapes[x.0].iter().product::<usize>();
                let g = grad[0] / n as f64;
                accumulate!(*x, core::iter::repeat(g).take(n));
            }
            Node::Bce {
                probs,
                labels,
                active,
            } => {
                let pt = eval.value(*probs);
                let ct = eval.value(*labels);
                let (n, k) = (pt.rows(), pt.cols());
                let inv_n = grad[0] / n as f64;
                if self.needs_grad[probs.0] {
                    let mut gp = vec![0.0; n * k];
                    for i in 0..n {
                        for j in 0..k {
                            if let Some(mask) = active {
                                if !mask[j] {
                                    continue;
                                }
                            }
                            let p = pt.get2(i, j);
                            let c = ct.get2(i, j);
                            // The floor is flat below epsilon, so a floored
                            // term contributes zero gradient.
                            let mut g = 0.0;
                            if p > BCE_EPSILON {
                                g -= c / p;
                            }
                            if 1.0 - p > BCE_EPSILON {
                                g += (1.0 - c) / (1.0 - p);
                            }
                            gp[i * k + j] = inv_n * g;
                        }
                    }
                    accumulate!(*probs, gp);
                }
                if self.needs_grad[labels.0] {
                    let mut gc = vec![0.0; n * k];
                    for i in 0..n {
                        for j in 0..k {
                            if let Some(mask) = active {
                                if !mask[j] {
                                    continue;
                                }
                            }
                            let p = pt.get2(i, j);
                            gc[i * k + j] = inv_n
                                * (math::ln((1.0 - p).max(BCE_EPSILON))
                                    - math::ln(p.max(BCE_EPSILON)));
                        }
                    }
                    accumulate!(*labels, gc);
                }
            }
        }
    }
}

/// `out[n,q] = x[n,p] @ w[p,q] + b[q]`, accumulated in i-k-j order so the
/// inner loop runs over contiguous memory.
pub(crate) fn affine_forward(
    x: &[f64],
    n: usize,
    p: usize,
    w: &[f64],
    q: usize,
    b: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; n * q];
    for i in 0..n {
        let row = &mut out[i * q..(i + 1) * q];
        row.copy_from_slice(b);
        let xr = &x[i * p..(i + 1) * p];
        for (k, &xv) in xr.iter().enumerate() {
            let wr = &w[k * q..(k + 1) * q];
            for (o, &wv) in row.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
    }
    out
}

/// `out[n,p] = a[n,q] @ b[p,q]^T` (each output element is a row dot product).
fn matmul_nt(a: &[f64], n: usize, q: usize, b: &[f64], p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        let ar = &a[i * q..(i + 1) * q];
        let row = &mut out[i * p..(i + 1) * p];
        for (j, o) in row.iter_mut().enumerate() {
            let br = &b[j * q..(j + 1) * q];
            let mut acc = 0.0;
            for (&av, &bv) in ar.iter().zip(br) {
                acc += av * bv;
            }
            *o = acc;
        }
    }
    out
}

/// `out[p,q] = a[n,p]^T @ b[n,q]`, accumulated one rank-1 update per row.
fn matmul_tn(a: &[f64], n: usize, p: usize, b: &[f64], q: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    for i in 0..n {
        let ar = &a[i * p..(i + 1) * p];
        let br = &b[i * q..(i + 1) * q];
        for (k, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let row = &mut out[k * q..(k + 1) * q];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeMap;

    fn bind(pairs: &[(&str, Tensor)]) -> BTreeMap<String, Tensor> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn affine_matches_hand_computation() {
        let mut tape = Tape::new();
        let x = tape.input("x", &[2, 3]).unwrap();
        let w = tape.input("w", &[3, 2]).unwrap();
        let b = tape.input("b", &[2]).unwrap();
        let y = tape.affine(x, w, b).unwrap();
        let bindings = bind(&[
            (
                "x",
                Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            ),
            (
                "w",
                Tensor::from_vec(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap(),
            ),
            ("b", Tensor::from_vec(vec![2], vec![0.5, -0.5]).unwrap()),
        ]);
        let eval = tape.evaluate(&bindings).unwrap();
        // row 0: (1*1 + 3*1 + 0.5, 2*1 + 3*1 - 0.5) = (4.5, 4.5)
        // row 1: (4 + 6 + 0.5, 5 + 6 - 0.5) = (10.5, 10.5)
        assert_eq!(eval.value(y).data(), &[4.5, 4.5, 10.5, 10.5]);
    }

    #[test]
    fn shape_errors_name_the_operation() {
        let mut tape = Tape::new();
        let x = tape.input("x", &[2, 3]).unwrap();
        let w = tape.input("w", &[4, 2]).unwrap();
        let b = tape.input("b", &[2]).unwrap();
        let err = tape.affine(x, w, b).unwrap_err();
        match err {
            Error::ShapeMismatch(msg) => assert!(msg.contains("affine"), "message: {msg}"),
            other => panic!("unexpected error {other:?}"),
        }
        let err = tape.add(x, w).unwrap_err();
        match err {
            Error::ShapeMismatch(msg) => assert!(msg.contains("add"), "message: {msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_binding_is_reported_by_name() {
        let mut tape = Tape::new();
        let x = tape.input("x", &[1, 1]).unwrap();
        let _ = tape.relu(x);
        let err = tape.evaluate(&BTreeMap::new()).unwrap_err();
        assert_eq!(err, Error::MissingInput("x".into()));
    }

    #[test]
    fn replaying_a_tape_is_bit_for_bit_identical() {
        let mut tape = Tape::new();
        let x = tape.input("x", &[3, 4]).unwrap();
        let w = tape.input("w", &[4, 4]).unwrap();
        let b = tape.input("b", &[4]).unwrap();
        let h = tape.affine(x, w, b).unwrap();
        let r = tape.relu(h);
        let s = tape.softmax_rows(r).unwrap();
        let out = tape.sum(s);
        let bindings = bind(&[
            (
                "x",
                Tensor::from_vec(vec![3, 4], (0..12).map(|i| (i as f64) * 0.37 - 2.0).collect())
                    .unwrap(),
            ),
            (
                "w",
                Tensor::from_vec(
                    vec![4, 4],
                    (0..16).map(|i| ((i * 7 % 5) as f64) * 0.21 - 0.4).collect(),
                )
                .unwrap(),
            ),
            ("b", Tensor::from_vec(vec![4], vec![0.1, -0.2, 0.3, -0.4]).unwrap()),
        ]);
        let a = tape.evaluate(&bindings).unwrap();
        let b2 = tape.evaluate(&bindings).unwrap();
        for id in [x, w, h, r, s, out] {
            assert_eq!(a.value(id).data(), b2.value(id).data());
        }
    }

    #[test]
    fn gradient_rejects_non_scalar_output() {
        let mut tape = Tape::new();
        let x = tape.input("x", &[2, 2]).unwrap();
        let y = tape.relu(x);
        let bindings = bind(&[("x", Tensor::zeros(&[2, 2]))]);
        let err = tape.gradient(&bindings, y).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn gradient_of_sum_of_scale_is_constant() {
        let mut tape = Tape::new();
        let x = tape.input("x", &[2, 2]).unwrap();
        let s = tape.scale(x, 3.0);
        let out = tape.sum(s);
        let bindings = bind(&[(
            "x",
            Tensor::from_vec(vec![2, 2], vec![1.0, -2.0, 0.5, 7.0]).unwrap(),
        )]);
        let grads = tape.gradient(&bindings, out).unwrap();
        assert_eq!(grads["x"].data(), &[3.0; 4]);
    }

    #[test]
    fn constant_only_paths_are_skipped_and_unused_inputs_get_zeros() {
        let mut tape = Tape::new();
        let x = tape.input("x", &[2]).unwrap();
        let unused = tape.input("unused", &[3]).unwrap();
        let _ = unused;
        let c = tape.constant(Tensor::from_vec(vec![2], vec![5.0, 5.0]).unwrap());
        let y = tape.add(x, c).unwrap();
        let out = tape.sum(y);
        let bindings = bind(&[
            ("x", Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap()),
            ("unused", Tensor::zeros(&[3])),
        ]);
        let grads = tape.gradient(&bindings, out).unwrap();
        assert_eq!(grads["x"].data(), &[1.0, 1.0]);
        assert_eq!(grads["unused"].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn bce_matches_hand_computed_example() {
        // labels [1, 0], predictions [0.5, 0.5]: loss = -ln 0.5 - ln 0.5 = 2 ln 2.
        let mut tape = Tape::new();
        let p = tape.input("p", &[1, 2]).unwrap();
        let c = tape.constant(Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let loss = tape.bce(p, c, None).unwrap();
        let bindings = bind(&[("p", Tensor::from_vec(vec![1, 2], vec![0.5, 0.5]).unwrap())]);
        let eval = tape.evaluate(&bindings).unwrap();
        let expected = 2.0 * core::f64::consts::LN_2;
        assert!((eval.value(loss).scalar_value().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_fractional_labels() {
        let mut tape = Tape::new();
        let p = tape.input("p", &[1, 1]).unwrap();
        let c = tape.constant(Tensor::from_vec(vec![1, 1], vec![0.5]).unwrap());
        let loss = tape.bce(p, c, None).unwrap();
        let _ = loss;
        let bindings = bind(&[("p", Tensor::from_vec(vec![1, 1], vec![0.5]).unwrap())]);
        let err = tape.evaluate(&bindings).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn bce_is_finite_at_saturated_predictions() {
        let mut tape = Tape::new();
        let p = tape.input("p", &[1, 2]).unwrap();
        let c = tape.constant(Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let loss = tape.bce(p, c, None).unwrap();
        let bindings = bind(&[("p", Tensor::from_vec(vec![1, 2], vec![0.0, 1.0]).unwrap())]);
        let eval = tape.evaluate(&bindings).unwrap();
        let v = eval.value(loss).scalar_value().unwrap();
        assert!(v.is_finite());
        // Both terms clamp at epsilon: loss = -2 ln(1e-12) / 1.
        assert!((v - (-2.0 * (1e-12f64).ln())).abs() < 1e-6);
        let grads = tape.gradient(&bindings, loss).unwrap();
        assert!(grads["p"].all_finite());
        assert_eq!(grads["p"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn bce_active_mask_limits_columns() {
        let mut tape = Tape::new();
        let p = tape.input("p", &[1, 3]).unwrap();
        let c = tape.constant(Tensor::from_vec(vec![1, 3], vec![1.0, 1.0, 0.0]).unwrap());
        let loss = tape.bce(p, c, Some(vec![true, false, false])).unwrap();
        let bindings = bind(&[(
            "p",
            Tensor::from_vec(vec![1, 3], vec![0.5, 0.001, 0.999]).unwrap(),
        )]);
        let eval = tape.evaluate(&bindings).unwrap();
        let expected = -(0.5f64).ln();
        assert!((eval.value(loss).scalar_value().unwrap() - expected).abs() < 1e-12);
        let grads = tape.gradient(&bindings, loss).unwrap();
        assert_ne!(grads["p"].data()[0], 0.0);
        assert_eq!(grads["p"].data()[1], 0.0);
        assert_eq!(grads["p"].data()[2], 0.0);
    }

    #[test]
    fn group_mean_rejects_empty_groups() {
        let mut tape = Tape::new();
        let x = tape.input("x", &[3, 2]).unwrap();
        let err = tape.group_mean_rows(x, vec![0, 0, 2], 3).unwrap_err();
        match err {
            Error::InvalidArgument(msg) => assert!(msg.contains("group 1"), "message: {msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn group_mean_forward_averages_member_rows() {
        let mut tape = Tape::new();
        let x = tape.input("x", &[4, 2]).unwrap();
        let m = tape.group_mean_rows(x, vec![0, 1, 0, 1], 2).unwrap();
        let bindings = bind(&[(
            "x",
            Tensor::from_vec(vec![4, 2], vec![0.0, 0.0, 1.0, 1.0, 2.0, 4.0, 3.0, 5.0]).unwrap(),
        )]);
        let eval = tape.evaluate(&bindings).unwrap();
        assert_eq!(eval.value(m).data(), &[1.0, 2.0, 2.0, 3.0]);
    }

    #[test]
    fn min_excluding_cols_takes_first_minimum() {
        let mut tape = Tape::new();
        let x = tape.input("x", &[2, 3]).unwrap();
        let mn = tape.min_excluding_cols(x, vec![0, 2]).unwrap();
        let s = tape.sum(mn);
        let bindings = bind(&[(
            "x",
            // row 0 skips col 0: min(5, 5) with tie -> col 1 gets the gradient.
            // row 1 skips col 2: min(7, 3) -> col 1.
            Tensor::from_vec(vec![2, 3], vec![-1.0, 5.0, 5.0, 7.0, 3.0, 0.0]).unwrap(),
        )]);
        let eval = tape.evaluate(&bindings).unwrap();
        assert_eq!(eval.value(mn).data(), &[5.0, 3.0]);
        let grads = tape.gradient(&bindings, s).unwrap();
        assert_eq!(grads["x"].data(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn sq_dist_rows_forward_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.input("x", &[1, 2]).unwrap();
        let y = tape.input("y", &[2, 2]).unwrap();
        let d = tape.sq_dist_rows(x, y).unwrap();
        let s = tape.sum(d);
        let bindings = bind(&[
            ("x", Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap()),
            (
                "y",
                Tensor::from_vec(vec![2, 2], vec![0.0, 0.0, 3.0, 2.0]).unwrap(),
            ),
        ]);
        let eval = tape.evaluate(&bindings).unwrap();
        assert_eq!(eval.value(d).data(), &[5.0, 4.0]);
        let grads = tape.gradient(&bindings, s).unwrap();
        // d(sum)/dx = 2[(x - y0) + (x - y1)] = 2[(1,2) + (-2,0)] = (-2, 4)
        assert_eq!(grads["x"].data(), &[-2.0, 4.0]);
        assert_eq!(grads["y"].data(), &[-2.0, -4.0, 4.0, 0.0]);
    }

    #[test]
    fn named_nodes_appear_in_named_evaluation() {
        let mut tape = Tape::new();
        let x = tape.input("x", &[2]).unwrap();
        let s = tape.sum(x);
        tape.name_node("total", s).unwrap();
        assert!(tape.name_node("total", s).is_err());
        let bindings = bind(&[("x", Tensor::from_vec(vec![2], vec![2.0, 3.0]).unwrap())]);
        let named = tape.evaluate_named(&bindings).unwrap();
        assert_eq!(named["total"].scalar_value().unwrap(), 5.0);
        assert_eq!(named["x"].data(), &[2.0, 3.0]);
    }

    #[test]
    fn softmax_rows_gradient_sums_to_zero_per_row() {
        let mut tape = Tape::new();
        let x = tape.input("x", &[2, 3]).unwrap();
        let sm = tape.softmax_rows(x).unwrap();
        let picked = tape.select_cols(sm, vec![0, 2]).unwrap();
        let out = tape.sum(picked);
        let bindings = bind(&[(
            "x",
            Tensor::from_vec(vec![2, 3], vec![0.3, -0.1, 0.9, 1.5, 0.0, -2.0]).unwrap(),
        )]);
        let grads = tape.gradient(&bindings, out).unwrap();
        let g = grads["x"].data();
        for i in 0..2 {
            let row_sum: f64 = g[i * 3..(i + 1) * 3].iter().sum();
            assert!(row_sum.abs() < 1e-12, "row {i} gradient sum {row_sum}");
        }
    }
}
