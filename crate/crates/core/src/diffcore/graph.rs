use super::tensor::{log_softmax_rows, matmul, softmax_rows, Tensor};
use super::DiffError;

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Index of a trainable parameter in the bindings slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Param(ParamId),
    Const(Tensor),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Relu(NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    IndexSelect(NodeId, Vec<usize>),
    Detach(NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: [usize; 2],
    requires_grad: bool,
}

/// A DAG of primitive tensor operations. Nodes are appended in topological
/// order, so every node's inputs precede it.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_of(t: &Tensor) -> Result<[usize; 2], DiffError> {
    if !t.is_matrix() {
        return Err(DiffError::Shape(format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok([t.rows(), t.cols()])
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

    pub fn shape(&self, id: NodeId) -> [usize; 2] {
        self.nodes[id.0].shape
    }

    fn push(&mut self, op: Op, shape: [usize; 2], requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, shape, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<[usize; 2], DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(DiffError::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    /// Leaf bound to `bindings[id]` at evaluation time.
    pub fn param(&mut self, id: ParamId, rows: usize, cols: usize) -> NodeId {
        self.push(Op::Param(id), [rows, cols], true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId, DiffError> {
        let shape = shape_of(&value)?;
        Ok(self.push(Op::Const(value), shape, false))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(DiffError::Shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), [sa[0], sb[1]], rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let s = self.same_shape(a, b, "add")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), s, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let s = self.same_shape(a, b, "sub")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), s, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let s = self.same_shape(a, b, "mul")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), s, rg))
    }

    /// Adds a `1 x m` row to every row of an `n x m` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, DiffError> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr != [1, sa[1]] {
            return Err(DiffError::Shape(format!("add_row: {sa:?} + {sr:?}")));
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Op::AddRow(a, row), sa, rg))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[0] != sb[0] {
            return Err(DiffError::Shape(format!("concat_cols: {sa:?} | {sb:?}")));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::ConcatCols(a, b), [sa[0], sa[1] + sb[1]], rg))
    }

    fn unary(&mut self, a: NodeId, make: impl FnOnce(NodeId) -> Op) -> NodeId {
        let s = self.shape(a);
        let rg = self.rg(a);
        self.push(make(a), s, rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp)
    }

    /// Natural log; evaluation fails on non-positive inputs.
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Log)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Softmax)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::LogSoftmax)
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |a| Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let rg = self.rg(a);
        self.push(Op::Sum(a), [1, 1], rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let rg = self.rg(a);
        self.push(Op::Mean(a), [1, 1], rg)
    }

    /// Gathers rows of `a` (repeats allowed).
    pub fn index_select(&mut self, a: NodeId, rows: Vec<usize>) -> Result<NodeId, DiffError> {
        let s = self.shape(a);
        if rows.is_empty() {
            return Err(DiffError::Shape("index_select: empty index list".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= s[0]) {
            return Err(DiffError::Shape(format!("index_select: row {bad} out of {}", s[0])));
        }
        let rg = self.rg(a);
        let n = rows.len();
        Ok(self.push(Op::IndexSelect(a, rows), [n, s[1]], rg))
    }

    /// Passes the value through and blocks the gradient.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a);
        self.push(Op::Detach(a), s, false)
    }

    /// Evaluates every node given parameter bindings.
    pub fn forward<'a>(&'a self, params: &'a [Tensor]) -> Result<Evaluation<'a>, DiffError> {
        let mut values: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let get = |id: NodeId| -> &Tensor { value_of(self, params, &values, id) };
            let out = match &node.op {
                Op::Param(pid) => {
                    let t = params
                        .get(pid.0)
                        .ok_or(DiffError::Unbound(pid.0))?;
                    if t.shape() != node.shape {
                        return Err(DiffError::Shape(format!(
                            "param {} bound with {:?}, declared {:?}",
                            pid.0,
                            t.shape(),
                            node.shape
                        )));
                    }
                    None
                }
                Op::Const(_) => None,
                Op::MatMul(a, b) => Some(matmul(get(*a), get(*b), false, false)),
                Op::Add(a, b) => Some(get(*a).zip_map(get(*b), |x, y| x + y)),
                Op::Sub(a, b) => Some(get(*a).zip_map(get(*b), |x, y| x - y)),
                Op::Mul(a, b) => Some(get(*a).zip_map(get(*b), |x, y| x * y)),
                Op::AddRow(a, r) => {
                    let (a, r) = (get(*a), get(*r));
                    let cols = a.cols();
                    let mut out = a.clone();
                    for row in out.data_mut().chunks_mut(cols) {
                        for (o, b) in row.iter_mut().zip(r.data()) {
                            *o += b;
                        }
                    }
                    Some(out)
                }
                Op::ConcatCols(a, b) => {
                    let (a, b) = (get(*a), get(*b));
                    let mut data = Vec::with_capacity(a.numel() + b.numel());
                    for r in 0..a.rows() {
                        data.extend_from_slice(a.row_slice(r));
                        data.extend_from_slice(b.row_slice(r));
                    }
                    Some(Tensor::new(node.shape.to_vec(), data)?)
                }
                Op::Tanh(a) => Some(get(*a).map(f64::tanh)),
                Op::Exp(a) => Some(get(*a).map(f64::exp)),
                Op::Log(a) => {
                    let a = get(*a);
                    if let Some(&bad) = a.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                        return Err(DiffError::LogDomain(bad));
                    }
                    Some(a.map(f64::ln))
                }
                Op::Softmax(a) => Some(softmax_rows(get(*a))),
                Op::LogSoftmax(a) => Some(log_softmax_rows(get(*a))),
                Op::Relu(a) => Some(get(*a).map(|v| v.max(0.0))),
                Op::Scale(a, c) => Some(get(*a).map(|v| v * c)),
                Op::Sum(a) => Some(Tensor::scalar(get(*a).data().iter().sum())),
                Op::Mean(a) => {
                    let a = get(*a);
                    Some(Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64))
                }
                Op::IndexSelect(a, rows) => {
                    let a = get(*a);
                    let mut data = Vec::with_capacity(rows.len() * a.cols());
                    for &r in rows {
                        data.extend_from_slice(a.row_slice(r));
                    }
                    Some(Tensor::new(node.shape.to_vec(), data)?)
                }
                Op::Detach(a) => Some(get(*a).clone()),
            };
            debug_assert!(out.is_none() || idx == values.len());
            values.push(out);
        }
        Ok(Evaluation { graph: self, params, values })
    }

    pub(crate) fn relu_inputs(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().filter_map(|n| match n.op {
            Op::Relu(a) => Some(a),
            _ => None,
        })
    }

    pub(crate) fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Param(p) => Some(p),
                _ => None,
            })
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

fn value_of<'v>(
    graph: &'v Graph,
    params: &'v [Tensor],
    values: &'v [Option<Tensor>],
    id: NodeId,
) -> &'v Tensor {
    match &graph.nodes[id.0].op {
        Op::Param(p) => &params[p.0],
        Op::Const(t) => t,
        _ => values[id.0].as_ref().expect("node evaluated before use"),
    }
}

/// Node values from one forward pass.
pub struct Evaluation<'a> {
    graph: &'a Graph,
    params: &'a [Tensor],
    values: Vec<Option<Tensor>>,
}

/// Gradient per parameter index; `None` when the parameter did not
/// participate in the output.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g.as_ref()))
    }
}

impl<'a> Evaluation<'a> {
    pub fn value(&self, id: NodeId) -> &Tensor {
        value_of(self.graph, self.params, &self.values, id)
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self, output: NodeId) -> Result<Gradients, DiffError> {
        let g = self.graph;
        if g.shape(output) != [1, 1] {
            return Err(DiffError::NonScalar(g.shape(output).to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        let mut grads: Vec<Option<Tensor>> = vec![None; self.params.len()];
        adj[output.0] = Some(Tensor::scalar(1.0));

        fn accum(adj: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
            match &mut adj[id.0] {
                Some(t) => t.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(gout) = adj[idx].take() else { continue };
            let node = &g.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let me = NodeId(idx);
            match &node.op {
                Op::Param(p) => match &mut grads[p.0] {
                    Some(t) => t.add_assign(&gout),
                    slot @ None => *slot = Some(gout),
                },
                Op::Const(_) | Op::Detach(_) => {}
                Op::MatMul(a, b) => {
                    if g.rg(*a) {
                        accum(&mut adj, *a, matmul(&gout, self.value(*b), false, true));
                    }
                    if g.rg(*b) {
                        accum(&mut adj, *b, matmul(self.value(*a), &gout, true, false));
                    }
                }
                Op::Add(a, b) => {
                    if g.rg(*a) {
                        accum(&mut adj, *a, gout.clone());
                    }
                    if g.rg(*b) {
                        accum(&mut adj, *b, gout);
                    }
                }
                Op::Sub(a, b) => {
                    if g.rg(*a) {
                        accum(&mut adj, *a, gout.clone());
                    }
                    if g.rg(*b) {
                        accum(&mut adj, *b, gout.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if g.rg(*a) {
                        accum(&mut adj, *a, gout.zip_map(self.value(*b), |x, y| x * y));
                    }
                    if g.rg(*b) {
                        accum(&mut adj, *b, gout.zip_map(self.value(*a), |x, y| x * y));
                    }
                }
                Op::AddRow(a, r) => {
                    if g.rg(*r) {
                        let cols = gout.cols();
                        let mut sums = vec![0.0; cols];
                        for row in gout.data().chunks(cols) {
                            for (s, v) in sums.iter_mut().zip(row) {
                                *s += v;
                            }
                        }
                        accum(&mut adj, *r, Tensor::row(&sums));
                    }
                    if g.rg(*a) {
                        accum(&mut adj, *a, gout);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = g.shape(*a)[1];
                    let cb = g.shape(*b)[1];
                    let rows = gout.rows();
                    if g.rg(*a) {
                        let mut d = Vec::with_capacity(rows * ca);
                        for r in 0..rows {
                            d.extend_from_slice(&gout.row_slice(r)[..ca]);
                        }
                        accum(&mut adj, *a, Tensor::new(vec![rows, ca], d)?);
                    }
                    if g.rg(*b) {
                        let mut d = Vec::with_capacity(rows * cb);
                        for r in 0..rows {
                            d.extend_from_slice(&gout.row_slice(r)[ca..]);
                        }
                        accum(&mut adj, *b, Tensor::new(vec![rows, cb], d)?);
                    }
                }
                Op::Tanh(a) => {
                    let y = self.value(me);
                    accum(&mut adj, *a, gout.zip_map(y, |gv, yv| gv * (1.0 - yv * yv)));
                }
                Op::Exp(a) => {
                    let y = self.value(me);
                    accum(&mut adj, *a, gout.zip_map(y, |gv, yv| gv * yv));
                }
                Op::Log(a) => {
                    let x = self.value(*a);
                    accum(&mut adj, *a, gout.zip_map(x, |gv, xv| gv / xv));
                }
                Op::Softmax(a) => {
                    let s = self.value(me);
                    let cols = s.cols();
                    let mut d = Vec::with_capacity(s.numel());
                    for (srow, grow) in s.data().chunks(cols).zip(gout.data().chunks(cols)) {
                        let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        d.extend(srow.iter().zip(grow).map(|(sv, gv)| sv * (gv - dot)));
                    }
                    accum(&mut adj, *a, Tensor::new(s.shape().to_vec(), d)?);
                }
                Op::LogSoftmax(a) => {
                    let ls = self.value(me);
                    let cols = ls.cols();
                    let mut d = Vec::with_capacity(ls.numel());
                    for (lrow, grow) in ls.data().chunks(cols).zip(gout.data().chunks(cols)) {
                        let gsum: f64 = grow.iter().sum();
                        d.extend(lrow.iter().zip(grow).map(|(lv, gv)| gv - lv.exp() * gsum));
                    }
                    accum(&mut adj, *a, Tensor::new(ls.shape().to_vec(), d)?);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    accum(&mut adj, *a, gout.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accum(&mut adj, *a, gout.map(|v| v * c));
                }
                Op::Sum(a) => {
                    let s = g.shape(*a);
                    accum(&mut adj, *a, Tensor::filled(&s, gout.item()));
                }
                Op::Mean(a) => {
                    let s = g.shape(*a);
                    let n = (s[0] * s[1]) as f64;
                    accum(&mut adj, *a, Tensor::filled(&s, gout.item() / n));
                }
                Op::IndexSelect(a, rows) => {
                    let s = g.shape(*a);
                    let mut d = Tensor::zeros(&s);
                    let cols = s[1];
                    for (i, &r) in rows.iter().enumerate() {
                        let src = gout.row_slice(i);
                        for (o, v) in d.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                    accum(&mut adj, *a, d);
                }
            }
        }
        Ok(Gradients { grads })
    }
}
