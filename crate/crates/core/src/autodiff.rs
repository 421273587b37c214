//! A small reverse-mode differentiation engine over dense matrices.
//!
//! A [`Graph`] is built once by appending nodes; each node refers only to
//! nodes created before it, so construction order is a topological order and
//! evaluation simply walks the node list. Leaves are named and receive their
//! values at evaluation time from a [`Bindings`] map, which lets the same
//! expression be re-evaluated under perturbed inputs (see `gradcheck`).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, NORM_EPS};

/// Values for named leaves.
pub type Bindings = BTreeMap<String, Matrix>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, used for fault injection and introspection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Const,
    MatMul,
    Transpose,
    Add,
    Negate,
    Scale,
    MulScalar,
    Exp,
    Log,
    Sum,
    Mean,
    GroupMeanRows,
    StackRows,
    NormalizeRows,
    SoftmaxRows,
    LogSoftmaxRows,
    Trace,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(String),
    Const(Matrix),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Negate(NodeId),
    Scale(NodeId, f64),
    /// `a * s` where `s` is a 1x1 node.
    MulScalar(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Output row `k` is the mean of the listed input rows.
    GroupMeanRows(NodeId, Vec<Vec<usize>>),
    StackRows(Vec<NodeId>),
    NormalizeRows(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    /// Sum of the diagonal of a square matrix.
    Trace(NodeId),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf(_) => OpKind::Leaf,
            Op::Const(_) => OpKind::Const,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Negate(_) => OpKind::Negate,
            Op::Scale(..) => OpKind::Scale,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::GroupMeanRows(..) => OpKind::GroupMeanRows,
            Op::StackRows(_) => OpKind::StackRows,
            Op::NormalizeRows(_) => OpKind::NormalizeRows,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::LogSoftmaxRows(_) => OpKind::LogSoftmaxRows,
            Op::Trace(_) => OpKind::Trace,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: (usize, usize),
}

/// Forward values and, optionally, gradients for every leaf.
#[derive(Debug, Clone)]
pub struct Evaluation {
    values: Vec<Matrix>,
    root: NodeId,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.values[id.0]
    }

    /// The scalar value of the root.
    pub fn scalar(&self) -> f64 {
        self.values[self.root.0].get(0, 0)
    }
}

/// Per-leaf gradients, keyed by leaf name.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub value: f64,
    pub grads: BTreeMap<String, Matrix>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, NodeId>,
    fault: Option<OpKind>,
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
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

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].shape
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    /// Names and shapes of all leaves, in name order.
    pub fn leaves(&self) -> impl Iterator<Item = (&str, (usize, usize))> {
        self.leaves
            .iter()
            .map(|(k, &id)| (k.as_str(), self.nodes[id.0].shape))
    }

    /// Flip the sign of every gradient flowing back through `kind`.
    /// Exists so tests can confirm the gradient checker catches broken rules.
    pub fn inject_sign_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, op: Op, shape: (usize, usize)) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, name: &str, rows: usize, cols: usize) -> Result<NodeId> {
        if self.leaves.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "leaf `{name}` declared twice"
            )));
        }
        let id = self.push(Op::Leaf(name.to_string()), (rows, cols));
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    pub fn constant(&mut self, m: Matrix) -> NodeId {
        let shape = m.shape();
        self.push(Op::Const(m), shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(shape_err(format!("matmul {sa:?} x {sb:?}")));
        }
        Ok(self.push(Op::MatMul(a, b), (sa.0, sb.1)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        self.push(Op::Transpose(a), (s.1, s.0))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(format!("add {sa:?} + {sb:?}")));
        }
        Ok(self.push(Op::Add(a, b), sa))
    }

    pub fn negate(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        self.push(Op::Negate(a), s)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.shape(a);
        self.push(Op::Scale(a, c), s)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.shape(s) != (1, 1) {
            return Err(shape_err(format!(
                "mul_scalar needs a 1x1 factor, got {:?}",
                self.shape(s)
            )));
        }
        let sa = self.shape(a);
        Ok(self.push(Op::MulScalar(a, s), sa))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        self.push(Op::Exp(a), s)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        self.push(Op::Log(a), s)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), (1, 1))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if r * c == 0 {
            return Err(shape_err("mean of an empty matrix".into()));
        }
        Ok(self.push(Op::Mean(a), (1, 1)))
    }

    /// Row `k` of the output is the arithmetic mean of rows `groups[k]` of `a`.
    /// Singleton groups make this a row gather.
    pub fn group_mean_rows(&mut self, a: NodeId, groups: Vec<Vec<usize>>) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        for g in &groups {
            if g.is_empty() {
                return Err(shape_err("empty row group".into()));
            }
            if let Some(&bad) = g.iter().find(|&&i| i >= r) {
                return Err(shape_err(format!("row {bad} out of range for {r} rows")));
            }
        }
        let k = groups.len();
        Ok(self.push(Op::GroupMeanRows(a, groups), (k, c)))
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        self.group_mean_rows(a, rows.iter().map(|&i| vec![i]).collect())
    }

    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("stack of zero parts".into()));
        };
        let cols = self.shape(first).1;
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.1 != cols {
                return Err(shape_err(format!("stack of {cols}- and {}-column parts", s.1)));
            }
            rows += s.0;
        }
        Ok(self.push(Op::StackRows(parts.to_vec()), (rows, cols)))
    }

    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        self.push(Op::NormalizeRows(a), s)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.1 == 0 {
            return Err(Error::InvalidArgument("softmax of an empty row".into()));
        }
        Ok(self.push(Op::SoftmaxRows(a), s))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.1 == 0 {
            return Err(Error::InvalidArgument("log-softmax of an empty row".into()));
        }
        Ok(self.push(Op::LogSoftmaxRows(a), s))
    }

    pub fn trace(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if r != c {
            return Err(shape_err(format!("trace of a {r}x{c} matrix")));
        }
        Ok(self.push(Op::Trace(a), (1, 1)))
    }

    /// Pairwise cosine similarities between the rows of `a` and of `b`.
    pub fn cosine_matrix(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let na = self.normalize_rows(a);
        let nb = self.normalize_rows(b);
        let nbt = self.transpose(nb);
        self.matmul(na, nbt)
    }

    /// Forward pass only.
    pub fn forward(&self, root: NodeId, bindings: &Bindings) -> Result<Evaluation> {
        let mut values: Vec<Matrix> = Vec::with_capacity(root.0 + 1);
        for node in &self.nodes[..=root.0] {
            let v = self.eval_node(node, &values, bindings)?;
            values.push(v);
        }
        Ok(Evaluation { values, root })
    }

    /// Forward value of a scalar root plus exact gradients for every leaf.
    pub fn evaluate_with_gradients(&self, root: NodeId, bindings: &Bindings) -> Result<GradReport> {
        Ok(self.forward_backward(root, bindings)?.1)
    }

    /// Forward values of every node plus leaf gradients of a scalar root.
    pub fn forward_backward(
        &self,
        root: NodeId,
        bindings: &Bindings,
    ) -> Result<(Evaluation, GradReport)> {
        if self.shape(root) != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        let eval = self.forward(root, bindings)?;
        let adj = self.backward(&eval)?;
        let mut grads = BTreeMap::new();
        for (name, &id) in &self.leaves {
            if id.0 > root.0 {
                continue;
            }
            let (r, c) = self.shape(id);
            let g = adj[id.0].clone().unwrap_or_else(|| Matrix::zeros(r, c));
            grads.insert(name.clone(), g);
        }
        let report = GradReport {
            value: eval.scalar(),
            grads,
        };
        Ok((eval, report))
    }

    /// Forward value of a scalar root.
    pub fn evaluate(&self, root: NodeId, bindings: &Bindings) -> Result<f64> {
        if self.shape(root) != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        Ok(self.forward(root, bindings)?.scalar())
    }

    fn eval_node(&self, node: &Node, vals: &[Matrix], bindings: &Bindings) -> Result<Matrix> {
        let v = |id: &NodeId| &vals[id.0];
        let out = match &node.op {
            Op::Leaf(name) => {
                let m = bindings
                    .get(name)
                    .ok_or_else(|| Error::UnboundLeaf(name.clone()))?;
                if m.shape() != node.shape {
                    return Err(shape_err(format!(
                        "leaf `{name}` bound to {:?}, declared {:?}",
                        m.shape(),
                        node.shape
                    )));
                }
                if !m.is_finite() {
                    return Err(Error::NonFinite(format!("leaf `{name}`")));
                }
                m.clone()
            }
            Op::Const(m) => m.clone(),
            Op::MatMul(a, b) => v(a).matmul(v(b))?,
            Op::Transpose(a) => v(a).transpose(),
            Op::Add(a, b) => {
                let mut out = v(a).clone();
                for (o, x) in out.as_mut_slice().iter_mut().zip(v(b).as_slice()) {
                    *o += x;
                }
                out
            }
            Op::Negate(a) => v(a).map(|x| -x),
            Op::Scale(a, c) => v(a).map(|x| x * c),
            Op::MulScalar(a, s) => {
                let s = v(s).get(0, 0);
                v(a).map(|x| x * s)
            }
            Op::Exp(a) => v(a).map(f64::exp),
            Op::Log(a) => {
                let x = v(a);
                if x.as_slice().iter().any(|&e| e <= 0.0) {
                    return Err(Error::Degenerate("log of a non-positive value".into()));
                }
                x.map(f64::ln)
            }
            Op::Sum(a) => Matrix::scalar(v(a).as_slice().iter().sum()),
            Op::Mean(a) => {
                let x = v(a);
                Matrix::scalar(x.as_slice().iter().sum::<f64>() / x.as_slice().len() as f64)
            }
            Op::GroupMeanRows(a, groups) => {
                let x = v(a);
                let mut out = Matrix::zeros(groups.len(), x.cols());
                for (k, g) in groups.iter().enumerate() {
                    let row = out.row_mut(k);
                    for &i in g {
                        for (o, e) in row.iter_mut().zip(x.row(i)) {
                            *o += e;
                        }
                    }
                    let inv = 1.0 / g.len() as f64;
                    row.iter_mut().for_each(|o| *o *= inv);
                }
                out
            }
            Op::StackRows(parts) => {
                let mut data = Vec::with_capacity(node.shape.0 * node.shape.1);
                for p in parts {
                    data.extend_from_slice(v(p).as_slice());
                }
                Matrix::from_vec(node.shape.0, node.shape.1, data)?
            }
            Op::NormalizeRows(a) => {
                let mut out = v(a).clone();
                for r in 0..out.rows() {
                    let row = out.row_mut(r);
                    let n = crate::tensor::norm(row);
                    if n <= NORM_EPS {
                        return Err(Error::Degenerate(format!(
                            "row {r} has norm {n:e} at normalization"
                        )));
                    }
                    row.iter_mut().for_each(|x| *x /= n);
                }
                out
            }
            Op::SoftmaxRows(a) => {
                let mut out = v(a).clone();
                for r in 0..out.rows() {
                    let s = crate::tensor::softmax(out.row(r))?;
                    out.row_mut(r).copy_from_slice(&s);
                }
                out
            }
            Op::LogSoftmaxRows(a) => {
                let mut out = v(a).clone();
                for r in 0..out.rows() {
                    let s = crate::tensor::log_softmax(out.row(r))?;
                    out.row_mut(r).copy_from_slice(&s);
                }
                out
            }
            Op::Trace(a) => {
                let x = v(a);
                Matrix::scalar((0..x.rows()).map(|i| x.get(i, i)).sum())
            }
        };
        Ok(out)
    }

    fn backward(&self, eval: &Evaluation) -> Result<Vec<Option<Matrix>>> {
        let root = eval.root;
        let vals = &eval.values;
        let mut adj: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Matrix::scalar(1.0));

        fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
            match slot {
                Some(acc) => {
                    for (a, b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *a += b;
                    }
                }
                None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(mut g) = adj[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if self.fault == Some(node.op.kind()) {
                g = g.map(|x| -x);
            }
            let out = &vals[idx];
            match &node.op {
                Op::Leaf(_) => {
                    adj[idx] = Some(g);
                    continue;
                }
                Op::Const(_) => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&vals[b.0].transpose())?;
                    let gb = vals[a.0].transpose().matmul(&g)?;
                    accumulate(&mut adj[a.0], ga);
                    accumulate(&mut adj[b.0], gb);
                }
                Op::Transpose(a) => accumulate(&mut adj[a.0], g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut adj[a.0], g.clone());
                    accumulate(&mut adj[b.0], g);
                }
                Op::Negate(a) => accumulate(&mut adj[a.0], g.map(|x| -x)),
                Op::Scale(a, c) => accumulate(&mut adj[a.0], g.map(|x| x * c)),
                Op::MulScalar(a, s) => {
                    let sv = vals[s.0].get(0, 0);
                    let ds: f64 = g
                        .as_slice()
                        .iter()
                        .zip(vals[a.0].as_slice())
                        .map(|(gi, ai)| gi * ai)
                        .sum();
                    accumulate(&mut adj[a.0], g.map(|x| x * sv));
                    accumulate(&mut adj[s.0], Matrix::scalar(ds));
                }
                Op::Exp(a) => {
                    let mut ga = g;
                    for (x, y) in ga.as_mut_slice().iter_mut().zip(out.as_slice()) {
                        *x *= y;
                    }
                    accumulate(&mut adj[a.0], ga);
                }
                Op::Log(a) => {
                    let mut ga = g;
                    for (x, y) in ga.as_mut_slice().iter_mut().zip(vals[a.0].as_slice()) {
                        *x /= y;
                    }
                    accumulate(&mut adj[a.0], ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    let s = g.get(0, 0);
                    accumulate(&mut adj[a.0], Matrix::from_vec(r, c, vec![s; r * c])?);
                }
                Op::Mean(a) => {
                    let (r, c) = self.shape(*a);
                    let s = g.get(0, 0) / (r * c) as f64;
                    accumulate(&mut adj[a.0], Matrix::from_vec(r, c, vec![s; r * c])?);
                }
                Op::GroupMeanRows(a, groups) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    for (k, grp) in groups.iter().enumerate() {
                        let inv = 1.0 / grp.len() as f64;
                        for &i in grp {
                            for (o, e) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                                *o += e * inv;
                            }
                        }
                    }
                    accumulate(&mut adj[a.0], ga);
                }
                Op::StackRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (r, c) = self.shape(*p);
                        let slice = g.as_slice()[offset * c..(offset + r) * c].to_vec();
                        accumulate(&mut adj[p.0], Matrix::from_vec(r, c, slice)?);
                        offset += r;
                    }
                }
                Op::NormalizeRows(a) => {
                    let x = &vals[a.0];
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let n = crate::tensor::norm(x.row(r));
                        let y = out.row(r);
                        let gy = g.row(r);
                        let proj = crate::tensor::dot(y, gy);
                        for ((o, yi), gi) in ga.row_mut(r).iter_mut().zip(y).zip(gy) {
                            *o = (gi - yi * proj) / n;
                        }
                    }
                    accumulate(&mut adj[a.0], ga);
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = Matrix::zeros(out.rows(), out.cols());
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let gy = g.row(r);
                        let proj = crate::tensor::dot(y, gy);
                        for ((o, yi), gi) in ga.row_mut(r).iter_mut().zip(y).zip(gy) {
                            *o = yi * (gi - proj);
                        }
                    }
                    accumulate(&mut adj[a.0], ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let mut ga = Matrix::zeros(out.rows(), out.cols());
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let gy = g.row(r);
                        let total: f64 = gy.iter().sum();
                        for ((o, yi), gi) in ga.row_mut(r).iter_mut().zip(y).zip(gy) {
                            *o = gi - yi.exp() * total;
                        }
                    }
                    accumulate(&mut adj[a.0], ga);
                }
                Op::Trace(a) => {
                    let (n, _) = self.shape(*a);
                    let mut ga = Matrix::zeros(n, n);
                    let s = g.get(0, 0);
                    for i in 0..n {
                        ga.set(i, i, s);
                    }
                    accumulate(&mut adj[a.0], ga);
                }
            }
        }
        Ok(adj)
    }
}
