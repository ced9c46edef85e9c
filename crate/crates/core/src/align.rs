//! Inter-view feature alignment (IVFA).
//!
//! Each clip is condensed into `K` summary tokens, the batch builds one
//! prototype per view, every clip cross-attends only to the prototypes of the
//! other views, and the retrieved context is diffused back into its tokens
//! through a gated residual. Exchange is batch-local; nothing persists.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{join, randn_scaled, Activation, Linear, Mlp, Module};
use crate::types::{ClipTokens, ClipVar, ViewId};
use crate::Param;

/// Single-head attention with residual output map, used to refine summaries.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(d: usize, width: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::new(d, width, false, rng),
            key: Linear::new(d, width, false, rng),
            value: Linear::new(d, width, false, rng),
            output: Linear::zeros(width, d, false),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, x);
        let v = self.value.forward(g, x);
        let a = attend(g, q, k, v, self.query.output_dim());
        let o = self.output.forward(g, a);
        g.add(x, o)
    }
}

impl Module for SelfAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// `softmax(q k^T / sqrt(width)) v`.
fn attend(g: &mut Graph, q: Var, k: Var, v: Var, width: usize) -> Var {
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt);
    let scores = g.scale(scores, 1.0 / (width as f64).sqrt());
    let w = g.softmax_rows(scores);
    g.matmul(w, v)
}

/// Cross-attention whose values are the raw prototypes.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub query: Linear,
    pub key: Linear,
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(d: usize, width: usize, rng: &mut R) -> Self {
        Self { query: Linear::new(d, width, false, rng), key: Linear::new(d, width, false, rng) }
    }

    pub fn forward(&self, g: &mut Graph, queries: Var, memory: Var) -> Var {
        let q = self.query.forward(g, queries);
        let k = self.key.forward(g, memory);
        attend(g, q, k, memory, self.query.output_dim())
    }
}

impl Module for CrossAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
    }
}

#[derive(Clone, Debug)]
pub struct IvfaParams {
    /// Learned pooling queries `[K, d]`; all-zero queries pool to the token mean.
    pub summary_queries: Param,
    pub refine: SelfAttention,
    pub cross: CrossAttention,
    /// Bias-free, so a zero context injects nothing.
    pub diffusion: Mlp,
    /// Per-token gate `sigmoid(x w + b)`.
    pub gate: Linear,
}

impl IvfaParams {
    pub fn new<R: Rng + ?Sized>(
        d: usize,
        summaries: usize,
        attn_width: usize,
        diffusion_hidden: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if summaries == 0 {
            return Err(Error::Config("IVFA needs at least one summary token".into()));
        }
        let mut gate = Linear::new(d, 1, true, rng);
        gate.weight.value *= 0.1;
        Ok(Self {
            summary_queries: Param::new(randn_scaled(summaries, d, 0.02, rng)),
            refine: SelfAttention::new(d, attn_width, rng),
            cross: CrossAttention::new(d, attn_width, rng),
            diffusion: Mlp::zero_out(d, diffusion_hidden, d, false, activation, rng),
            gate,
        })
    }

    pub fn dim(&self) -> usize {
        self.summary_queries.value.ncols()
    }

    pub fn summaries(&self) -> usize {
        self.summary_queries.value.nrows()
    }

    /// Attention-pool all tokens into `K` summaries, then one self-attention pass.
    pub fn summarize(&self, g: &mut Graph, clip: ClipVar) -> Var {
        let q = g.param(&self.summary_queries);
        let pooled = attend(g, q, clip.var, clip.var, self.dim());
        self.refine.forward(g, pooled)
    }

    /// Context `[K, d]` per clip, in batch order.
    pub fn exchange(&self, g: &mut Graph, batch: &[(Var, ViewId)]) -> Vec<Var> {
        let mut by_view: BTreeMap<ViewId, Vec<Var>> = BTreeMap::new();
        for &(s, v) in batch {
            by_view.entry(v).or_default().push(s);
        }
        let prototypes: BTreeMap<ViewId, Var> = by_view
            .into_iter()
            .map(|(v, members)| {
                let n = members.len() as f64;
                let mut acc = members[0];
                for &m in &members[1..] {
                    acc = g.add(acc, m);
                }
                (v, g.scale(acc, 1.0 / n))
            })
            .collect();
        let (k, d) = (self.summaries(), self.dim());
        batch
            .iter()
            .map(|&(s, v)| {
                let others: Vec<Var> = prototypes.iter().filter(|(w, _)| **w != v).map(|(_, &p)| p).collect();
                if others.is_empty() {
                    return g.zeros(k, d);
                }
                let memory = g.concat_rows(&others);
                self.cross.forward(g, s, memory)
            })
            .collect()
    }

    /// `X + gate(X) * diffusion(mean(context))` on every token.
    pub fn diffuse(&self, g: &mut Graph, clip: ClipVar, context: Var) -> ClipVar {
        let pooled = g.mean_rows(context);
        let inject = self.diffusion.forward(g, pooled);
        let logits = self.gate.forward(g, clip.var);
        let gate = g.sigmoid(logits);
        let scaled = g.mul(gate, inject);
        clip.with_var(g.add(clip.var, scaled))
    }

    /// Full batch pass: summarize, exchange, diffuse.
    pub fn forward_batch(&self, g: &mut Graph, batch: &[(ClipVar, ViewId)]) -> Vec<ClipVar> {
        let summaries: Vec<(Var, ViewId)> = batch.iter().map(|&(c, v)| (self.summarize(g, c), v)).collect();
        let contexts = self.exchange(g, &summaries);
        batch.iter().zip(contexts).map(|(&(c, _), ctx)| self.diffuse(g, c, ctx)).collect()
    }
}

impl Module for IvfaParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(join(prefix, "summary_queries"), &self.summary_queries);
        self.refine.visit(&join(prefix, "refine"), f);
        self.cross.visit(&join(prefix, "cross"), f);
        self.diffusion.visit(&join(prefix, "diffusion"), f);
        self.gate.visit(&join(prefix, "gate"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "summary_queries"), &mut self.summary_queries);
        self.refine.visit_mut(&join(prefix, "refine"), f);
        self.cross.visit_mut(&join(prefix, "cross"), f);
        self.diffusion.visit_mut(&join(prefix, "diffusion"), f);
        self.gate.visit_mut(&join(prefix, "gate"), f);
    }
}

fn check_tokens(tokens: &ClipTokens, d: usize) -> Result<()> {
    if tokens.dim() != d {
        return Err(Error::Shape(format!("tokens have {} channels, IVFA expects {d}", tokens.dim())));
    }
    Ok(())
}

fn check_summary(s: &Tensor, params: &IvfaParams) -> Result<()> {
    if s.dim() != (params.summaries(), params.dim()) {
        return Err(Error::Shape(format!(
            "summary is {:?}, expected [{}, {}]",
            s.dim(),
            params.summaries(),
            params.dim()
        )));
    }
    Ok(())
}

pub fn ivfa_summarize(tokens: &ClipTokens, params: &IvfaParams) -> Result<Tensor> {
    check_tokens(tokens, params.dim())?;
    let mut g = Graph::inference();
    let clip = tokens.to_var(&mut g);
    let s = params.summarize(&mut g, clip);
    Ok(g.value(s).clone())
}

/// Per-view prototypes of a batch: the mean refined summary of each present view.
pub fn batch_view_context(batch: &[(Tensor, ViewId)]) -> BTreeMap<ViewId, Tensor> {
    let mut sums: BTreeMap<ViewId, (Tensor, usize)> = BTreeMap::new();
    for (s, v) in batch {
        let e = sums.entry(*v).or_insert_with(|| (Tensor::zeros(s.dim()), 0));
        e.0 += s;
        e.1 += 1;
    }
    sums.into_iter().map(|(v, (s, n))| (v, s / n as f64)).collect()
}

pub fn ivfa_exchange(batch: &[(Tensor, ViewId)], params: &IvfaParams) -> Result<Vec<Tensor>> {
    if batch.is_empty() {
        return Err(Error::Precondition("IVFA exchange needs a non-empty batch".into()));
    }
    for (s, _) in batch {
        check_summary(s, params)?;
    }
    let mut g = Graph::inference();
    let vars: Vec<(Var, ViewId)> = batch.iter().map(|(s, v)| (g.constant(s.clone()), *v)).collect();
    let out = params.exchange(&mut g, &vars);
    Ok(out.into_iter().map(|c| g.value(c).clone()).collect())
}

pub fn ivfa_diffuse(tokens: &ClipTokens, context: &Tensor, params: &IvfaParams) -> Result<ClipTokens> {
    check_tokens(tokens, params.dim())?;
    if context.ncols() != params.dim() || context.nrows() == 0 {
        return Err(Error::Shape(format!("context is {:?}, expected [_, {}]", context.dim(), params.dim())));
    }
    let mut g = Graph::inference();
    let clip = tokens.to_var(&mut g);
    let ctx = g.constant(context.clone());
    params.diffuse(&mut g, clip, ctx).to_tokens(&g)
}
