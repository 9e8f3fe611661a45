//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles.
//! Node ids grow monotonically, so a reverse sweep over ids is a valid
//! topological order. A graph may be differentiated once; record a fresh
//! graph for the next step.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Backward rule for operations defined outside this module.
///
/// `grad` has the shape of `output`; the returned vector is aligned with
/// `inputs` (use `None` for inputs that receive no gradient).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Silu,
    Sigmoid,
    Softplus,
    Exp,
    Tanh,
    Relu,
    Square,
}

impl Unary {
    fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Silu => x * sigmoid(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Square => x * x,
        }
    }

    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

type NodeId = usize;

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    SubFromRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Unary(NodeId, Unary),
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Linear(NodeId, NodeId, Option<NodeId>),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        shift: NodeId,
        eps: f64,
    },
    DwConv(NodeId, NodeId),
    GroupMax {
        x: NodeId,
        argmax: Vec<usize>,
    },
    SoftmaxRows(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize),
    SliceRows(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    RepeatRows(NodeId, usize),
    Reshape(NodeId),
    Sum(NodeId),
    GroupStandardize {
        x: NodeId,
        group: usize,
        floor: f64,
    },
    Custom(Vec<NodeId>, Box<dyn CustomOp>),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording tape. Single-threaded; independent graphs share nothing.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<ParamId, NodeId>>,
    consumed: Cell<bool>,
}

/// Handle to a recorded value.
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph<'g>,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
            consumed: Cell::new(false),
        }
    }

    /// Graph whose [`Graph::param`] leaves read from `store`.
    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            params: Some(store),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<'g> Graph<'g> {
    fn push(&'g self, value: Tensor, op: Op, requires_grad: bool) -> Var<'g> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push_shared(&'g self, value: Arc<Tensor>, requires_grad: bool) -> Var<'g> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Untracked input.
    pub fn constant(&'g self, t: Tensor) -> Var<'g> {
        self.push(t, Op::Leaf, false)
    }

    /// Tracked leaf; receives a gradient on `backward`.
    pub fn variable(&'g self, t: Tensor) -> Var<'g> {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&'g self, id: ParamId) -> Var<'g> {
        if let Some(&node) = self.bound.borrow().get(&id) {
            return Var { graph: self, id: node };
        }
        let store = self
            .params
            .expect("graph was created without a parameter store");
        let v = self.push_shared(store.value_arc(id), true);
        self.bound.borrow_mut().insert(id, v.id);
        v
    }

    /// Attaches a custom operation whose forward value was computed by the
    /// caller.
    pub fn custom(&'g self, inputs: &[Var<'g>], value: Tensor, op: Box<dyn CustomOp>) -> Var<'g> {
        let ids: Vec<NodeId> = inputs.iter().map(|v| v.id).collect();
        let rg = self.requires(&ids);
        self.push(value, Op::Custom(ids, op), rg)
    }

    /// Reverse sweep from a scalar. Gradients are retained for leaves.
    pub fn backward(&'g self, loss: Var<'g>) -> Result<Gradients> {
        if self.consumed.get() {
            return Err(Error::Contract(
                "backward already ran on this graph; record a new one".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        self.consumed.set(true);
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[id].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            backward_node(&nodes, node, &g, &mut grads);
        }

        let leaves = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if matches!(n.op, Op::Leaf) && n.requires_grad {
                    grads[i].take().or_else(|| Some(Tensor::zeros(n.value.shape())))
                } else {
                    None
                }
            })
            .collect();
        let bound = self.bound.borrow().iter().map(|(&p, &n)| (p, n)).collect();
        Ok(Gradients { grads: leaves, bound })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    bound: HashMap<ParamId, NodeId>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.bound.get(&id).and_then(|&n| self.grads[n].as_ref())
    }

    /// Gradients aligned with `store`; parameters the loss never touched get zeros.
    pub fn into_param_grads(mut self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                self.bound
                    .get(&id)
                    .and_then(|&n| self.grads[n].take())
                    .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()))
            })
            .collect()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: NodeId, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn col_sum(g: &Tensor) -> Vec<f64> {
    let c = g.cols();
    let mut out = vec![0.0; c];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

fn backward_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: NodeId| -> &Tensor { &nodes[id].value };
    let rg = |id: NodeId| nodes[id].requires_grad;
    macro_rules! acc {
        ($id:expr, $t:expr) => {
            accumulate(grads, nodes, $id, $t)
        };
    }
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc!(*a, g.clone());
            acc!(*b, g.clone());
        }
        Op::Sub(a, b) => {
            acc!(*a, g.clone());
            acc!(*b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                acc!(*a, zip(g, val(*b), |x, y| x * y));
            }
            if rg(*b) {
                acc!(*b, zip(g, val(*a), |x, y| x * y));
            }
        }
        Op::AddRow(x, row) => {
            acc!(*x, g.clone());
            if rg(*row) {
                acc!(*row, Tensor::from_parts(val(*row).shape().to_vec(), col_sum(g)));
            }
        }
        Op::SubFromRow(row, x) => {
            acc!(*x, g.map(|v| -v));
            if rg(*row) {
                acc!(*row, Tensor::from_parts(val(*row).shape().to_vec(), col_sum(g)));
            }
        }
        Op::MulRow(x, row) => {
            let r = val(*row).data();
            let c = r.len();
            if rg(*x) {
                let mut gx = g.clone();
                for (i, v) in gx.data_mut().iter_mut().enumerate() {
                    *v *= r[i % c];
                }
                acc!(*x, gx);
            }
            if rg(*row) {
                let xv = val(*x).data();
                let mut gr = vec![0.0; c];
                for (i, v) in g.data().iter().enumerate() {
                    gr[i % c] += v * xv[i];
                }
                acc!(*row, Tensor::from_parts(val(*row).shape().to_vec(), gr));
            }
        }
        Op::Scale(x, s) => acc!(*x, g.map(|v| v * s)),
        Op::AddScalar(x) => acc!(*x, g.clone()),
        Op::Unary(x, u) => {
            let xv = val(*x).data();
            let yv = node.value.data();
            let data = g
                .data()
                .iter()
                .enumerate()
                .map(|(i, gv)| gv * u.deriv(xv[i], yv[i]))
                .collect();
            acc!(*x, Tensor::from_parts(g.shape().to_vec(), data));
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if rg(*a) {
                acc!(*a, Tensor::from_parts(av.shape().to_vec(), matmul_nt(g.data(), bv.data(), m, n, k)));
            }
            if rg(*b) {
                acc!(*b, Tensor::from_parts(bv.shape().to_vec(), matmul_tn(av.data(), g.data(), k, m, n)));
            }
        }
        Op::MatMulNt(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.rows());
            if rg(*a) {
                acc!(*a, Tensor::from_parts(av.shape().to_vec(), matmul_nn(g.data(), bv.data(), m, n, k)));
            }
            if rg(*b) {
                acc!(*b, Tensor::from_parts(bv.shape().to_vec(), matmul_tn(g.data(), av.data(), n, m, k)));
            }
        }
        Op::Linear(x, w, b) => {
            let (xv, wv) = (val(*x), val(*w));
            let (r, i, o) = (xv.rows(), xv.cols(), wv.rows());
            if rg(*x) {
                acc!(*x, Tensor::from_parts(xv.shape().to_vec(), matmul_nn(g.data(), wv.data(), r, o, i)));
            }
            if rg(*w) {
                acc!(*w, Tensor::from_parts(wv.shape().to_vec(), matmul_tn(g.data(), xv.data(), o, r, i)));
            }
            if let Some(b) = b {
                if rg(*b) {
                    acc!(*b, Tensor::from_parts(val(*b).shape().to_vec(), col_sum(g)));
                }
            }
        }
        Op::LayerNorm { x, gain, shift, eps } => {
            let xv = val(*x);
            let gamma = val(*gain).data();
            let c = xv.cols();
            let mut gx = vec![0.0; xv.len()];
            let mut ggain = vec![0.0; c];
            let mut gshift = vec![0.0; c];
            let mut xhat = vec![0.0; c];
            let mut gxhat = vec![0.0; c];
            for r in 0..xv.rows() {
                let row = xv.row(r);
                let (mu, inv) = row_stats(row, *eps);
                let gr = g.row(r);
                for j in 0..c {
                    xhat[j] = (row[j] - mu) * inv;
                    ggain[j] += gr[j] * xhat[j];
                    gshift[j] += gr[j];
                    gxhat[j] = gr[j] * gamma[j];
                }
                let m1 = gxhat.iter().sum::<f64>() / c as f64;
                let m2 = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                for j in 0..c {
                    gx[r * c + j] = inv * (gxhat[j] - m1 - xhat[j] * m2);
                }
            }
            acc!(*x, Tensor::from_parts(xv.shape().to_vec(), gx));
            acc!(*gain, Tensor::from_parts(val(*gain).shape().to_vec(), ggain));
            acc!(*shift, Tensor::from_parts(val(*shift).shape().to_vec(), gshift));
        }
        Op::DwConv(x, w) => {
            let (xv, wv) = (val(*x), val(*w));
            let (len, c, k) = (xv.rows(), xv.cols(), wv.cols());
            let mut gx = vec![0.0; xv.len()];
            let mut gw = vec![0.0; wv.len()];
            let (xd, wd, gd) = (xv.data(), wv.data(), g.data());
            for t in 0..len {
                for j in 0..k {
                    let Some(src) = (t + j).checked_sub(k - 1) else { continue };
                    for ch in 0..c {
                        let gy = gd[t * c + ch];
                        gx[src * c + ch] += wd[ch * k + j] * gy;
                        gw[ch * k + j] += xd[src * c + ch] * gy;
                    }
                }
            }
            acc!(*x, Tensor::from_parts(xv.shape().to_vec(), gx));
            acc!(*w, Tensor::from_parts(wv.shape().to_vec(), gw));
        }
        Op::GroupMax { x, argmax } => {
            let xv = val(*x);
            let mut gx = vec![0.0; xv.len()];
            for (gv, &src) in g.data().iter().zip(argmax) {
                gx[src] += gv;
            }
            acc!(*x, Tensor::from_parts(xv.shape().to_vec(), gx));
        }
        Op::SoftmaxRows(x) => {
            let y = &node.value;
            let mut gx = g.clone();
            for r in 0..y.rows() {
                let yr = y.row(r);
                let dot: f64 = g.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                for (v, yy) in gx.row_mut(r).iter_mut().zip(yr) {
                    *v = yy * (*v - dot);
                }
            }
            acc!(*x, gx);
        }
        Op::ConcatCols(ids) => {
            let total = g.cols();
            let mut off = 0;
            for &id in ids {
                let t = val(id);
                let w = t.cols();
                if rg(id) {
                    let mut d = Vec::with_capacity(t.len());
                    for r in 0..g.rows() {
                        d.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                    }
                    acc!(id, Tensor::from_parts(t.shape().to_vec(), d));
                }
                off += w;
            }
        }
        Op::ConcatRows(ids) => {
            let mut off = 0;
            for &id in ids {
                let t = val(id);
                let n = t.len();
                if rg(id) {
                    acc!(id, Tensor::from_parts(t.shape().to_vec(), g.data()[off..off + n].to_vec()));
                }
                off += n;
            }
        }
        Op::SliceCols(x, start) => {
            let xv = val(*x);
            let (c, w) = (xv.cols(), g.cols());
            let mut gx = vec![0.0; xv.len()];
            for r in 0..g.rows() {
                gx[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
            }
            acc!(*x, Tensor::from_parts(xv.shape().to_vec(), gx));
        }
        Op::SliceRows(x, start) => {
            let xv = val(*x);
            let c = xv.cols();
            let mut gx = vec![0.0; xv.len()];
            gx[start * c..start * c + g.len()].copy_from_slice(g.data());
            acc!(*x, Tensor::from_parts(xv.shape().to_vec(), gx));
        }
        Op::GatherRows(x, idx) => {
            let xv = val(*x);
            let mut gx = Tensor::zeros(xv.shape());
            for (r, &i) in idx.iter().enumerate() {
                for (a, b) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                    *a += b;
                }
            }
            acc!(*x, gx);
        }
        Op::RepeatRows(x, k) => {
            let xv = val(*x);
            let mut gx = Tensor::zeros(xv.shape());
            for r in 0..g.rows() {
                for (a, b) in gx.row_mut(r / k).iter_mut().zip(g.row(r)) {
                    *a += b;
                }
            }
            acc!(*x, gx);
        }
        Op::Reshape(x) => {
            acc!(*x, Tensor::from_parts(val(*x).shape().to_vec(), g.data().to_vec()));
        }
        Op::Sum(x) => acc!(*x, Tensor::full(val(*x).shape(), g.item())),
        Op::GroupStandardize { x, group, floor } => {
            let xv = val(*x);
            let y = &node.value;
            let c = xv.cols();
            let mut gx = vec![0.0; xv.len()];
            let k = *group;
            for grp in 0..xv.rows() / k {
                for ch in 0..c {
                    let at = |r: usize| (grp * k + r) * c + ch;
                    let (_, sd) = group_channel_stats(xv.data(), k, at);
                    let s = sd.max(*floor);
                    let mg = (0..k).map(|r| g.data()[at(r)]).sum::<f64>() / k as f64;
                    let mgy = if sd > *floor {
                        (0..k).map(|r| g.data()[at(r)] * y.data()[at(r)]).sum::<f64>() / k as f64
                    } else {
                        0.0
                    };
                    for r in 0..k {
                        gx[at(r)] = (g.data()[at(r)] - mg - y.data()[at(r)] * mgy) / s;
                    }
                }
            }
            acc!(*x, Tensor::from_parts(xv.shape().to_vec(), gx));
        }
        Op::Custom(ids, op) => {
            let inputs: Vec<&Tensor> = ids.iter().map(|&i| val(i)).collect();
            for (id, gi) in ids.iter().zip(op.backward(&inputs, &node.value, g)) {
                if let Some(gi) = gi {
                    acc!(*id, gi);
                }
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Row mean and `1/sqrt(var + eps)` (population variance).
fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + eps).sqrt())
}

fn group_channel_stats(data: &[f64], k: usize, at: impl Fn(usize) -> usize) -> (f64, f64) {
    let mu = (0..k).map(|r| data[at(r)]).sum::<f64>() / k as f64;
    let var = (0..k).map(|r| (data[at(r)] - mu).powi(2)).sum::<f64>() / k as f64;
    (mu, var.sqrt())
}

fn out_shape_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    match s.last_mut() {
        Some(l) => *l = last,
        None => s.push(last),
    }
    s
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<'g> {
        self.graph
    }

    /// Shared handle to the forward value.
    pub fn value(&self) -> Arc<Tensor> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.rows()
    }

    pub fn cols(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.cols()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn emit(&self, value: Tensor, op: Op, parents: &[NodeId]) -> Var<'g> {
        let rg = self.graph.requires(parents);
        self.graph.push(value, op, rg)
    }

    fn same_shape(&self, o: &Var<'g>, op: &'static str) -> Result<(Arc<Tensor>, Arc<Tensor>)> {
        let (a, b) = (self.value(), o.value());
        if a.shape() != b.shape() {
            return Err(Error::dim(op, a.shape(), b.shape()));
        }
        Ok((a, b))
    }

    pub fn add(&self, o: &Var<'g>) -> Result<Var<'g>> {
        let (a, b) = self.same_shape(o, "add")?;
        Ok(self.emit(zip(&a, &b, |x, y| x + y), Op::Add(self.id, o.id), &[self.id, o.id]))
    }

    pub fn sub(&self, o: &Var<'g>) -> Result<Var<'g>> {
        let (a, b) = self.same_shape(o, "sub")?;
        Ok(self.emit(zip(&a, &b, |x, y| x - y), Op::Sub(self.id, o.id), &[self.id, o.id]))
    }

    pub fn mul(&self, o: &Var<'g>) -> Result<Var<'g>> {
        let (a, b) = self.same_shape(o, "mul")?;
        Ok(self.emit(zip(&a, &b, |x, y| x * y), Op::Mul(self.id, o.id), &[self.id, o.id]))
    }

    fn row_broadcast(&self, row: &Var<'g>, op: &'static str) -> Result<(Arc<Tensor>, Arc<Tensor>)> {
        let (x, r) = (self.value(), row.value());
        if r.len() != x.cols() {
            return Err(Error::dim(op, x.shape(), r.shape()));
        }
        Ok((x, r))
    }

    /// `x[r, :] + row` for every row.
    pub fn add_row(&self, row: &Var<'g>) -> Result<Var<'g>> {
        let (x, r) = self.row_broadcast(row, "add_row")?;
        let c = r.len();
        let data = x.data().iter().enumerate().map(|(i, v)| v + r.data()[i % c]).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.emit(t, Op::AddRow(self.id, row.id), &[self.id, row.id]))
    }

    /// `row - x[r, :]` for every row.
    pub fn sub_from_row(&self, row: &Var<'g>) -> Result<Var<'g>> {
        let (x, r) = self.row_broadcast(row, "sub_from_row")?;
        let c = r.len();
        let data = x.data().iter().enumerate().map(|(i, v)| r.data()[i % c] - v).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.emit(t, Op::SubFromRow(row.id, self.id), &[self.id, row.id]))
    }

    /// `x[r, :] ⊙ row` for every row.
    pub fn mul_row(&self, row: &Var<'g>) -> Result<Var<'g>> {
        let (x, r) = self.row_broadcast(row, "mul_row")?;
        let c = r.len();
        let data = x.data().iter().enumerate().map(|(i, v)| v * r.data()[i % c]).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.emit(t, Op::MulRow(self.id, row.id), &[self.id, row.id]))
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        let t = self.value().map(|v| v * s);
        self.emit(t, Op::Scale(self.id, s), &[self.id])
    }

    pub fn add_scalar(&self, s: f64) -> Var<'g> {
        let t = self.value().map(|v| v + s);
        self.emit(t, Op::AddScalar(self.id), &[self.id])
    }

    pub fn unary(&self, u: Unary) -> Var<'g> {
        let t = self.value().map(|v| u.eval(v));
        self.emit(t, Op::Unary(self.id, u), &[self.id])
    }

    pub fn silu(&self) -> Var<'g> {
        self.unary(Unary::Silu)
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(Unary::Sigmoid)
    }

    pub fn softplus(&self) -> Var<'g> {
        self.unary(Unary::Softplus)
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(Unary::Exp)
    }

    pub fn square(&self) -> Var<'g> {
        self.unary(Unary::Square)
    }

    /// `[m,k] · [k,n]`
    pub fn matmul(&self, o: &Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), o.value());
        if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
            return Err(Error::dim("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let t = Tensor::from_parts(vec![m, n], matmul_nn(a.data(), b.data(), m, k, n));
        Ok(self.emit(t, Op::MatMul(self.id, o.id), &[self.id, o.id]))
    }

    /// `[m,k] · [n,k]ᵀ`
    pub fn matmul_nt(&self, o: &Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), o.value());
        if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
            return Err(Error::dim("matmul_nt", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.rows());
        let t = Tensor::from_parts(vec![m, n], matmul_nt(a.data(), b.data(), m, k, n));
        Ok(self.emit(t, Op::MatMulNt(self.id, o.id), &[self.id, o.id]))
    }

    /// `y = x · Wᵀ + b` over the trailing dimension.
    pub fn linear(&self, w: &Var<'g>, b: Option<&Var<'g>>) -> Result<Var<'g>> {
        let (x, wv) = (self.value(), w.value());
        if wv.shape().len() != 2 || x.cols() != wv.cols() {
            return Err(Error::dim("linear", x.shape(), wv.shape()));
        }
        let (r, i, o) = (x.rows(), x.cols(), wv.rows());
        let mut y = matmul_nt(x.data(), wv.data(), r, i, o);
        let mut parents = vec![self.id, w.id];
        if let Some(b) = b {
            let bv = b.value();
            if bv.len() != o {
                return Err(Error::dim("linear bias", wv.shape(), bv.shape()));
            }
            for row in y.chunks_mut(o) {
                for (v, bb) in row.iter_mut().zip(bv.data()) {
                    *v += bb;
                }
            }
            parents.push(b.id);
        }
        let t = Tensor::from_parts(out_shape_last(x.shape(), o), y);
        Ok(self.emit(t, Op::Linear(self.id, w.id, b.map(|b| b.id)), &parents))
    }

    /// Per-row standardization followed by `gain ⊙ · + shift`.
    pub fn layer_norm(&self, gain: &Var<'g>, shift: &Var<'g>, eps: f64) -> Result<Var<'g>> {
        let x = self.value();
        let c = x.cols();
        if c == 0 || x.shape().is_empty() {
            return Err(Error::dim("layer_norm", x.shape(), &[c]));
        }
        let (gv, sv) = (gain.value(), shift.value());
        if gv.len() != c || sv.len() != c {
            return Err(Error::dim("layer_norm", x.shape(), gv.shape()));
        }
        let mut out = vec![0.0; x.len()];
        for r in 0..x.rows() {
            let row = x.row(r);
            let (mu, inv) = row_stats(row, eps);
            for j in 0..c {
                out[r * c + j] = (row[j] - mu) * inv * gv.data()[j] + sv.data()[j];
            }
        }
        let t = Tensor::from_parts(x.shape().to_vec(), out);
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            shift: shift.id,
            eps,
        };
        Ok(self.emit(t, op, &[self.id, gain.id, shift.id]))
    }

    /// Causal per-channel convolution along rows. `kernels` is `[C, k]`
    /// ordered oldest to newest; the input is left-padded with `k - 1` zeros.
    pub fn depthwise_conv1d(&self, kernels: &Var<'g>) -> Result<Var<'g>> {
        let (x, w) = (self.value(), kernels.value());
        if x.shape().len() != 2 || w.shape().len() != 2 || w.rows() != x.cols() || w.cols() == 0 {
            return Err(Error::dim("depthwise_conv1d", x.shape(), w.shape()));
        }
        let (len, c, k) = (x.rows(), x.cols(), w.cols());
        let mut y = vec![0.0; x.len()];
        for t in 0..len {
            for j in 0..k {
                let Some(src) = (t + j).checked_sub(k - 1) else { continue };
                for ch in 0..c {
                    y[t * c + ch] += w.data()[ch * k + j] * x.data()[src * c + ch];
                }
            }
        }
        let t = Tensor::from_parts(x.shape().to_vec(), y);
        Ok(self.emit(t, Op::DwConv(self.id, kernels.id), &[self.id, kernels.id]))
    }

    /// Columnwise maximum over consecutive blocks of `group` rows:
    /// `[G·group, C] → [G, C]`. Ties resolve to the first row.
    pub fn group_max(&self, group: usize) -> Result<Var<'g>> {
        let x = self.value();
        if group == 0 || x.rows() == 0 {
            return Err(Error::Empty("group_max"));
        }
        if x.rows() % group != 0 {
            return Err(Error::dim("group_max", x.shape(), &[group]));
        }
        let c = x.cols();
        let groups = x.rows() / group;
        let mut out = vec![f64::NEG_INFINITY; groups * c];
        let mut argmax = vec![0usize; groups * c];
        for gi in 0..groups {
            for r in 0..group {
                let row = gi * group + r;
                for ch in 0..c {
                    let v = x.data()[row * c + ch];
                    if r == 0 || v > out[gi * c + ch] {
                        out[gi * c + ch] = v;
                        argmax[gi * c + ch] = row * c + ch;
                    }
                }
            }
        }
        let t = Tensor::from_parts(vec![groups, c], out);
        Ok(self.emit(t, Op::GroupMax { x: self.id, argmax }, &[self.id]))
    }

    /// Columnwise maximum over all rows: `[R, C] → [C]`.
    pub fn max_pool_rows(&self) -> Result<Var<'g>> {
        let r = self.rows();
        if r == 0 {
            return Err(Error::Empty("max_pool_rows"));
        }
        let c = self.cols();
        self.group_max(r)?.reshape(&[c])
    }

    pub fn softmax_rows(&self) -> Var<'g> {
        let x = self.value();
        let mut y = (*x).clone();
        for r in 0..y.rows() {
            let row = y.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.emit(y, Op::SoftmaxRows(self.id), &[self.id])
    }

    pub fn concat_cols(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts.first().ok_or(Error::Empty("concat_cols"))?;
        let vals: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let rows = vals[0].rows();
        if let Some(bad) = vals.iter().find(|v| v.rows() != rows) {
            return Err(Error::dim("concat_cols", vals[0].shape(), bad.shape()));
        }
        let total: usize = vals.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row(r));
            }
        }
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        let t = Tensor::from_parts(vec![rows, total], data);
        Ok(first.emit(t, Op::ConcatCols(ids.clone()), &ids))
    }

    pub fn concat_rows(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts.first().ok_or(Error::Empty("concat_rows"))?;
        let vals: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let cols = vals[0].cols();
        if let Some(bad) = vals.iter().find(|v| v.cols() != cols) {
            return Err(Error::dim("concat_rows", vals[0].shape(), bad.shape()));
        }
        let rows: usize = vals.iter().map(|v| v.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for v in &vals {
            data.extend_from_slice(v.data());
        }
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        let t = Tensor::from_parts(vec![rows, cols], data);
        Ok(first.emit(t, Op::ConcatRows(ids.clone()), &ids))
    }

    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Var<'g>> {
        let x = self.value();
        if start + width > x.cols() {
            return Err(Error::dim("slice_cols", x.shape(), &[start, width]));
        }
        let mut data = Vec::with_capacity(x.rows() * width);
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row(r)[start..start + width]);
        }
        let t = Tensor::from_parts(vec![x.rows(), width], data);
        Ok(self.emit(t, Op::SliceCols(self.id, start), &[self.id]))
    }

    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Var<'g>> {
        let x = self.value();
        if start + count > x.rows() {
            return Err(Error::dim("slice_rows", x.shape(), &[start, count]));
        }
        let c = x.cols();
        let t = Tensor::from_parts(vec![count, c], x.data()[start * c..(start + count) * c].to_vec());
        Ok(self.emit(t, Op::SliceRows(self.id, start), &[self.id]))
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::Input(format!("gather_rows: index {bad} out of {} rows", x.rows())));
        }
        let t = x.gather_rows(idx);
        Ok(self.emit(t, Op::GatherRows(self.id, idx.to_vec()), &[self.id]))
    }

    /// Repeats each row `k` times consecutively: `[R, C] → [R·k, C]`.
    pub fn repeat_rows(&self, k: usize) -> Var<'g> {
        let x = self.value();
        let c = x.cols();
        let mut data = Vec::with_capacity(x.len() * k);
        for r in 0..x.rows() {
            for _ in 0..k {
                data.extend_from_slice(x.row(r));
            }
        }
        let t = Tensor::from_parts(vec![x.rows() * k, c], data);
        self.emit(t, Op::RepeatRows(self.id, k), &[self.id])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let t = (*self.value()).clone().reshape(shape)?;
        Ok(self.emit(t, Op::Reshape(self.id), &[self.id]))
    }

    pub fn sum(&self) -> Var<'g> {
        let t = Tensor::scalar(self.value().sum());
        self.emit(t, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Standardizes each channel within consecutive blocks of `group` rows:
    /// `(x - μ) / max(σ, floor)` with population statistics.
    pub fn group_standardize(&self, group: usize, floor: f64) -> Result<Var<'g>> {
        let x = self.value();
        if group == 0 || x.rows() % group != 0 {
            return Err(Error::dim("group_standardize", x.shape(), &[group]));
        }
        let c = x.cols();
        let mut y = vec![0.0; x.len()];
        for grp in 0..x.rows() / group {
            for ch in 0..c {
                let at = |r: usize| (grp * group + r) * c + ch;
                let (mu, sd) = group_channel_stats(x.data(), group, at);
                let s = sd.max(floor);
                for r in 0..group {
                    y[at(r)] = (x.data()[at(r)] - mu) / s;
                }
            }
        }
        let t = Tensor::from_parts(x.shape().to_vec(), y);
        let op = Op::GroupStandardize {
            x: self.id,
            group,
            floor,
        };
        Ok(self.emit(t, op, &[self.id]))
    }
}
