//! View-aware identity memory (IAMM).
//!
//! The bank stores `S` prototypes for every (identity, view) pair. During
//! training a clip descriptor attends to its own identity/view slice, the
//! attended context is fused back through a scalar gate, and the most attended
//! prototype is EMA-updated. At inference retrieval is class-agnostic: the
//! top-k prototypes by cosine similarity over the whole bank.

use ndarray::{s, Array1, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softmax_rows, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{join, Linear, Module};
use crate::types::{ClipDescriptor, ViewId};
use crate::Param;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Slots start at zero and are always EMA-updated.
    Zeros,
    /// A slot holds zeros until its first write, which copies the descriptor.
    #[default]
    FirstWrite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    num_ids: usize,
    slots: usize,
    dim: usize,
    momentum: f64,
    init_mode: InitMode,
    /// Row `((id * 3) + view) * slots + slot`.
    prototypes: Tensor,
    written: Vec<bool>,
}

impl MemoryBank {
    pub fn new(num_ids: usize, slots: usize, dim: usize, momentum: f64, init_mode: InitMode) -> Result<Self> {
        if slots == 0 {
            return Err(Error::Config("memory needs at least one slot".into()));
        }
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Config(format!("EMA momentum {momentum} not in (0, 1)")));
        }
        let rows = num_ids * ViewId::COUNT * slots;
        Ok(Self {
            num_ids,
            slots,
            dim,
            momentum,
            init_mode,
            prototypes: Tensor::zeros((rows, dim)),
            written: vec![false; rows],
        })
    }

    pub fn num_ids(&self) -> usize {
        self.num_ids
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn init_mode(&self) -> InitMode {
        self.init_mode
    }

    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    fn row(&self, id: usize, view: ViewId, slot: usize) -> usize {
        (id * ViewId::COUNT + view.index()) * self.slots + slot
    }

    fn check(&self, id: usize, slot: usize) -> Result<()> {
        if id >= self.num_ids {
            return Err(Error::Index(format!("identity {id} out of range (bank holds {})", self.num_ids)));
        }
        if slot >= self.slots {
            return Err(Error::Index(format!("slot {slot} out of range 0..{}", self.slots)));
        }
        Ok(())
    }

    /// All `S` prototypes of one identity/view pair.
    pub fn slice(&self, id: usize, view: ViewId) -> Result<ArrayView2<'_, f64>> {
        self.check(id, 0)?;
        let start = self.row(id, view, 0);
        Ok(self.prototypes.slice(s![start..start + self.slots, ..]))
    }

    pub fn prototype(&self, id: usize, view: ViewId, slot: usize) -> Result<ArrayView1<'_, f64>> {
        self.check(id, slot)?;
        Ok(self.prototypes.row(self.row(id, view, slot)))
    }

    pub fn is_written(&self, id: usize, view: ViewId, slot: usize) -> bool {
        self.check(id, slot).is_ok() && self.written[self.row(id, view, slot)]
    }

    pub fn written_count(&self) -> usize {
        self.written.iter().filter(|w| **w).count()
    }

    /// Slots that retrieval may attend to, with their prototypes.
    ///
    /// Under `first-write`, cold slots are excluded; under `zeros` every slot
    /// is live.
    pub fn attention_slice(&self, id: usize, view: ViewId) -> Result<(Vec<usize>, Tensor)> {
        let slice = self.slice(id, view)?;
        let live: Vec<usize> =
            (0..self.slots).filter(|&j| self.init_mode == InitMode::Zeros || self.is_written(id, view, j)).collect();
        let mut out = Tensor::zeros((live.len(), self.dim));
        for (k, &j) in live.iter().enumerate() {
            out.row_mut(k).assign(&slice.row(j));
        }
        Ok((live, out))
    }

    /// Slot to write after a training retrieval: the first cold slot under
    /// `first-write`, otherwise the most attended one.
    pub fn update_slot(&self, id: usize, view: ViewId, attended: Option<usize>) -> usize {
        if self.init_mode == InitMode::FirstWrite {
            if let Some(j) = (0..self.slots).find(|&j| !self.is_written(id, view, j)) {
                return j;
            }
        }
        attended.unwrap_or(0)
    }

    /// Live prototypes over the whole bank with their flat row indices.
    pub fn written(&self) -> &[bool] {
        &self.written
    }

    /// Replaces the stored prototypes, e.g. from a checkpoint.
    pub fn restore(&mut self, prototypes: Tensor, written: Vec<bool>) -> Result<()> {
        if prototypes.dim() != self.prototypes.dim() || written.len() != self.written.len() {
            return Err(Error::Shape(format!(
                "bank state is {:?} with {} flags, expected {:?}",
                prototypes.dim(),
                written.len(),
                self.prototypes.dim()
            )));
        }
        self.prototypes = prototypes;
        self.written = written;
        Ok(())
    }

    fn live_rows(&self) -> Vec<usize> {
        (0..self.prototypes.nrows()).filter(|&r| self.init_mode == InitMode::Zeros || self.written[r]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval {
    pub context: Array1<f64>,
    pub weights: Array1<f64>,
    /// Index (within the given slice) of the most attended prototype.
    pub argmax: usize,
}

fn argmax(w: &Array1<f64>) -> usize {
    let mut best = 0;
    for (j, &x) in w.iter().enumerate() {
        if x > w[best] {
            best = j;
        }
    }
    best
}

/// Softmax attention of `f` over the rows of `slice` with scores `<f, m_j> / temperature`.
pub fn memory_retrieve(f: &ClipDescriptor, slice: ArrayView2<'_, f64>, temperature: f64) -> Result<Retrieval> {
    if slice.nrows() == 0 {
        return Err(Error::Precondition("cannot attend over an empty prototype slice".into()));
    }
    if slice.ncols() != f.dim() {
        return Err(Error::Shape(format!("descriptor has {} channels, prototypes have {}", f.dim(), slice.ncols())));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    let scores = (slice.dot(&f.vector) / temperature).insert_axis(Axis(0));
    let weights = softmax_rows(&scores).row(0).to_owned();
    let context = weights.dot(&slice);
    let argmax = argmax(&weights);
    Ok(Retrieval { context, weights, argmax })
}

/// Graph version of [`memory_retrieve`]; gradients flow into `f` (`[1, d]`).
pub fn memory_retrieve_var(g: &mut Graph, f: Var, slice: &Tensor, temperature: f64) -> (Var, Array1<f64>, usize) {
    let protos = g.constant(slice.clone());
    let protos_t = g.constant(slice.t().to_owned());
    let scores = g.matmul(f, protos_t);
    let scores = g.scale(scores, 1.0 / temperature);
    let w = g.softmax_rows(scores);
    let context = g.matmul(w, protos);
    let weights = g.value(w).row(0).to_owned();
    let best = argmax(&weights);
    (context, weights, best)
}

/// Scalar gate `g = sigmoid(W_g [f; c])`.
#[derive(Clone, Debug)]
pub struct GateParams {
    pub linear: Linear,
}

impl GateParams {
    pub fn new<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let mut linear = Linear::new(2 * d, 1, true, rng);
        linear.weight.value *= 0.1;
        Self { linear }
    }

    pub fn dim(&self) -> usize {
        self.linear.input_dim() / 2
    }

    /// Returns `(f_hat, gate)`, both on the graph; `f` and `c` are `[1, d]`.
    pub fn forward(&self, g: &mut Graph, f: Var, c: Var) -> (Var, Var) {
        let cat = g.concat_cols(&[f, c]);
        let logit = self.linear.forward(g, cat);
        let gate = g.sigmoid(logit);
        let keep = g.mul(f, gate);
        let rest = g.one_minus(gate);
        let mix = g.mul(c, rest);
        (g.add(keep, mix), gate)
    }
}

impl Module for GateParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.linear.visit(&join(prefix, "gate"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.linear.visit_mut(&join(prefix, "gate"), f);
    }
}

/// `f_hat = g f + (1 - g) c` with `g = sigmoid(W_g [f; c])`.
pub fn gated_fuse(f: &ClipDescriptor, c: ArrayView1<'_, f64>, params: &GateParams) -> Result<Array1<f64>> {
    let d = params.dim();
    if f.dim() != d || c.len() != d {
        return Err(Error::Shape(format!("gate expects {d} channels, got f: {}, c: {}", f.dim(), c.len())));
    }
    let w = params.linear.weight.value.column(0);
    let mut logit = params.linear.bias.as_ref().map_or(0.0, |b| b.value[[0, 0]]);
    logit += w.slice(s![..d]).dot(&f.vector) + w.slice(s![d..]).dot(&c);
    let gate = sigmoid(logit);
    Ok(&f.vector * gate + &c * (1.0 - gate))
}

/// EMA update of one prototype: `m <- (1 - eta) m + eta f`.
///
/// A cold slot under `first-write` takes `f` verbatim. No other slot is touched.
pub fn memory_update(bank: &mut MemoryBank, id: usize, view: ViewId, f: &ClipDescriptor, slot: usize) -> Result<()> {
    bank.check(id, slot)?;
    if f.dim() != bank.dim {
        return Err(Error::Shape(format!("descriptor has {} channels, bank stores {}", f.dim(), bank.dim)));
    }
    if f.vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("memory update with non-finite descriptor".into()));
    }
    let row = bank.row(id, view, slot);
    let eta = bank.momentum;
    let cold = bank.init_mode == InitMode::FirstWrite && !bank.written[row];
    let mut m = bank.prototypes.row_mut(row);
    if cold {
        m.assign(&f.vector);
    } else {
        m.zip_mut_with(&f.vector, |mi, &fi| *mi = (1.0 - eta) * *mi + eta * fi);
    }
    bank.written[row] = true;
    Ok(())
}

/// Class-agnostic retrieval: top-`k` live prototypes by cosine similarity,
/// then the same softmax attention as [`memory_retrieve`] over them.
///
/// Takes no identity or view of the query.
pub fn memory_retrieve_inference(
    f: &ClipDescriptor,
    bank: &MemoryBank,
    k: usize,
    temperature: f64,
) -> Result<Array1<f64>> {
    Ok(retrieve_top_k(f, bank, k, temperature)?.context)
}

/// [`memory_retrieve_inference`] that also reports which bank rows were used.
pub fn retrieve_top_k(f: &ClipDescriptor, bank: &MemoryBank, k: usize, temperature: f64) -> Result<TopKRetrieval> {
    if k == 0 {
        return Err(Error::Config("inference retrieval needs k >= 1".into()));
    }
    let live = bank.live_rows();
    if live.is_empty() {
        return Err(Error::Precondition("memory bank is empty".into()));
    }
    let fnorm = f.norm().max(f64::MIN_POSITIVE);
    let mut scored: Vec<(f64, usize)> = live
        .iter()
        .map(|&r| {
            let m = bank.prototypes.row(r);
            let denom = fnorm * m.dot(&m).sqrt().max(f64::MIN_POSITIVE);
            (m.dot(&f.vector) / denom, r)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let rows: Vec<usize> = scored.iter().take(k).map(|&(_, r)| r).collect();
    let mut slice = Tensor::zeros((rows.len(), bank.dim));
    for (i, &r) in rows.iter().enumerate() {
        slice.row_mut(i).assign(&bank.prototypes.row(r));
    }
    let r = memory_retrieve(f, slice.view(), temperature)?;
    Ok(TopKRetrieval { context: r.context, rows, weights: r.weights })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopKRetrieval {
    pub context: Array1<f64>,
    pub rows: Vec<usize>,
    pub weights: Array1<f64>,
}
