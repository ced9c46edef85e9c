//! Reverse-mode automatic differentiation over dense 2-D `f64` tensors.
//!
//! A [`Graph`] is a Wengert tape: every operation appends a node holding its
//! forward value and the parents needed for the backward sweep. Model
//! parameters are [`Param`]s carrying a process-unique id, so a parameter used
//! several times in one graph maps to a single leaf and its gradient
//! accumulates there.
//!
//! Shapes follow ndarray broadcasting for the elementwise binary ops; any axis
//! of length 1 broadcasts. Shape mismatches are programming errors and panic,
//! the same way ndarray arithmetic does. Public adapter entry points validate
//! caller input before building graphs.

pub mod check;

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{concatenate, s, Array2, Axis};

pub type Tensor = Array2<f64>;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

/// A trainable tensor with a stable identity.
#[derive(Clone, Debug)]
pub struct Param {
    id: ParamId,
    pub value: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let id = ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed));
        Self { id, value }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Tensor::zeros((rows, cols)))
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Silu(Var),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Softplus(Var),
    Relu(Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    GroupMean(Var, usize),
    RepeatRows(Var, usize),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<(usize, usize)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    frozen: HashSet<ParamId>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), frozen: HashSet::new(), grad_enabled: true }
    }

    /// A graph that records values only; `backward` yields no gradients.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    /// Parameters in `frozen` enter the graph as constants.
    pub fn with_frozen(frozen: HashSet<ParamId>) -> Self {
        Self { frozen, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = self.grad_enabled && self.op_requires_grad(&op);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn op_requires_grad(&self, op: &Op) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => rg(a) || rg(b),
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.iter().any(rg),
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sigmoid(a)
            | Op::Silu(a)
            | Op::Gelu(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Softplus(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::GroupMean(a, _)
            | Op::RepeatRows(a, _)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::Transpose(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::GatherRows(a, _)
            | Op::Pick(a, _) => rg(a),
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::from_elem((1, 1), x))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Tensor::zeros((rows, cols)))
    }

    /// Leaf for a parameter; repeated calls return the same node.
    pub fn param(&mut self, p: &Param) -> Var {
        if let Some(&v) = self.params.get(&p.id) {
            return v;
        }
        let requires_grad = self.grad_enabled && !self.frozen.contains(&p.id);
        self.nodes.push(Node { value: p.value.clone(), op: Op::Leaf, requires_grad });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(p.id, v);
        v
    }

    /// Differentiable leaf that is not tied to a [`Param`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.dim(), (1, 1), "scalar_value on non-scalar node");
        t[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ca, rb, "matmul shape mismatch: [{ra},{ca}] x [{rb},{cb}]");
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a))
    }

    // ---- broadcasting elementwise ----

    fn check_broadcast(&self, a: Var, b: Var) {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        let ok = |x: usize, y: usize| x == y || x == 1 || y == 1;
        assert!(ok(ra, rb) && ok(ca, cb), "incompatible broadcast: [{ra},{ca}] vs [{rb},{cb}]");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_broadcast(a, b);
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_broadcast(a, b);
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_broadcast(a, b);
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.check_broadcast(a, b);
        let out = self.value(a) / self.value(b);
        self.push(out, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = -self.value(a);
        self.push(out, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        self.push(out, Op::AddScalar(a))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, 1.0)
    }

    // ---- unary ----

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        self.push(out, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::sqrt);
        self.push(out, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        self.push(out, Op::Square(a))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(softplus);
        self.push(out, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    // ---- reductions and reshaping ----

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over rows: `[m, n] -> [1, n]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(out, Op::SumRows(a))
    }

    /// Sum over columns: `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::SumCols(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.shape(a).0 as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / m)
    }

    /// Mean of consecutive row groups: `[g*s, n] -> [g, n]`.
    pub fn group_mean(&mut self, a: Var, group: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(group > 0 && m % group == 0, "group_mean: {m} rows not divisible by {group}");
        let g = m / group;
        let src = self.value(a);
        let mut out = Tensor::zeros((g, n));
        for k in 0..g {
            let block = src.slice(s![k * group..(k + 1) * group, ..]);
            out.row_mut(k).assign(&(block.sum_axis(Axis(0)) / group as f64));
        }
        self.push(out, Op::GroupMean(a, group))
    }

    /// Repeat each row `times` times consecutively: `[g, n] -> [g*times, n]`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let (g, n) = self.shape(a);
        let src = self.value(a);
        let mut out = Tensor::zeros((g * times, n));
        for k in 0..g {
            for i in 0..times {
                out.row_mut(k * times + i).assign(&src.row(k));
            }
        }
        self.push(out, Op::RepeatRows(a, times))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            let lse = m + row.mapv(|v| (v - m).exp()).sum().ln();
            row.mapv_inplace(|v| v - lse);
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let views: Vec<_> = parts.iter().map(|&v| self.value(v).view()).collect();
        let out = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let views: Vec<_> = parts.iter().map(|&v| self.value(v).view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = self.value(a);
        let n = src.ncols();
        let mut out = Tensor::zeros((idx.len(), n));
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).assign(&src.row(i));
        }
        self.push(out, Op::GatherRows(a, idx.to_vec()))
    }

    /// Selected entries as a column: `[len(entries), 1]`.
    pub fn pick(&mut self, a: Var, entries: &[(usize, usize)]) -> Var {
        let src = self.value(a);
        let mut out = Tensor::zeros((entries.len(), 1));
        for (k, &(r, c)) in entries.iter().enumerate() {
            out[[k, 0]] = src[[r, c]];
        }
        self.push(out, Op::Pick(a, entries.to_vec()))
    }

    // ---- composites ----

    /// `x W + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add(y, b),
            None => y,
        }
    }

    /// Rows scaled to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        let ss = self.sum_cols(sq);
        let norm = self.sqrt(ss);
        self.div(a, norm)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones((1, 1)));
        }
        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, &grad, &mut grads);
            grads[idx] = Some(grad);
        }
        Gradients { grads, params: self.params.clone() }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let val = |v: &Var| &self.nodes[v.0].value;
        let acc = |v: Var, delta: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let target = self.nodes[v.0].value.dim();
            let delta = reduce_to(delta, target);
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    acc(*a, g.dot(&val(b).t()), grads);
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, val(a).t().dot(g), grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, -g, grads);
            }
            Op::Mul(a, b) => {
                acc(*a, g * val(b), grads);
                acc(*b, g * val(a), grads);
            }
            Op::Div(a, b) => {
                let bv = val(b);
                acc(*a, g / bv, grads);
                if self.nodes[b.0].requires_grad {
                    let d = -(g * val(a)) / (bv * bv);
                    acc(*b, d, grads);
                }
            }
            Op::Neg(a) => acc(*a, -g, grads),
            Op::Scale(a, c) => acc(*a, g * *c, grads),
            Op::AddScalar(a) => acc(*a, g.clone(), grads),
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, g * &y.mapv(|s| s * (1.0 - s)), grads);
            }
            Op::Silu(a) => {
                let d = val(a).mapv(|x| {
                    let s = sigmoid(x);
                    s + x * s * (1.0 - s)
                });
                acc(*a, g * &d, grads);
            }
            Op::Gelu(a) => acc(*a, g * &val(a).mapv(gelu_grad), grads),
            Op::Tanh(a) => acc(*a, g * &node.value.mapv(|y| 1.0 - y * y), grads),
            Op::Exp(a) => acc(*a, g * &node.value, grads),
            Op::Ln(a) => acc(*a, g / val(a), grads),
            Op::Sqrt(a) => acc(*a, g / &(&node.value * 2.0), grads),
            Op::Square(a) => acc(*a, g * &(val(a) * 2.0), grads),
            Op::Softplus(a) => acc(*a, g * &val(a).mapv(sigmoid), grads),
            Op::Relu(a) => acc(*a, g * &val(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }), grads),
            Op::Sum(a) => {
                let d = Tensor::from_elem(val(a).dim(), g[[0, 0]]);
                acc(*a, d, grads);
            }
            Op::SumRows(a) | Op::SumCols(a) => {
                let d = g.broadcast(val(a).dim()).expect("sum broadcast").to_owned();
                acc(*a, d, grads);
            }
            Op::GroupMean(a, group) => {
                let (m, n) = val(a).dim();
                let mut d = Tensor::zeros((m, n));
                for r in 0..m {
                    let k = r / group;
                    d.row_mut(r).assign(&(&g.row(k) / *group as f64));
                }
                acc(*a, d, grads);
            }
            Op::RepeatRows(a, times) => {
                let (rows, n) = val(a).dim();
                let mut d = Tensor::zeros((rows, n));
                for k in 0..rows {
                    let block = g.slice(s![k * times..(k + 1) * times, ..]);
                    d.row_mut(k).assign(&block.sum_axis(Axis(0)));
                }
                acc(*a, d, grads);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let gy = g * y;
                let dots = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                let d = &gy - &(y * &dots);
                acc(*a, d, grads);
            }
            Op::LogSoftmaxRows(a) => {
                let p = node.value.mapv(f64::exp);
                let gsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                let d = g - &(&p * &gsum);
                acc(*a, d, grads);
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned(), grads),
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = val(p).nrows();
                    acc(*p, g.slice(s![start..start + rows, ..]).to_owned(), grads);
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let cols = val(p).ncols();
                    acc(*p, g.slice(s![.., start..start + cols]).to_owned(), grads);
                    start += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let mut d = Tensor::zeros(val(a).dim());
                let rows = g.nrows();
                d.slice_mut(s![*start..*start + rows, ..]).assign(g);
                acc(*a, d, grads);
            }
            Op::SliceCols(a, start) => {
                let mut d = Tensor::zeros(val(a).dim());
                let cols = g.ncols();
                d.slice_mut(s![.., *start..*start + cols]).assign(g);
                acc(*a, d, grads);
            }
            Op::GatherRows(a, idx) => {
                let mut d = Tensor::zeros(val(a).dim());
                for (k, &i) in idx.iter().enumerate() {
                    let mut row = d.row_mut(i);
                    row += &g.row(k);
                }
                acc(*a, d, grads);
            }
            Op::Pick(a, entries) => {
                let mut d = Tensor::zeros(val(a).dim());
                for (k, &(r, c)) in entries.iter().enumerate() {
                    d[[r, c]] += g[[k, 0]];
                }
                acc(*a, d, grads);
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a parameter, if it took part in the graph and was not frozen.
    pub fn param(&self, p: &Param) -> Option<&Tensor> {
        self.params.get(&p.id()).and_then(|v| self.wrt(*v))
    }

    pub fn param_by_id(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }
}

/// Sum `delta` over broadcast axes so it matches `target`.
fn reduce_to(delta: Tensor, target: (usize, usize)) -> Tensor {
    let mut d = delta;
    if d.nrows() != target.0 {
        debug_assert_eq!(target.0, 1);
        d = d.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if d.ncols() != target.1 {
        debug_assert_eq!(target.1, 1);
        d = d.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    d
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
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}
