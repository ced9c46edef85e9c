//! Temporal adapters: difference-based motion gating (TDM) and the
//! hierarchical multi-scale temporal streams (HTPL).

use ndarray::Axis;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{join, Activation, Linear, Mlp, Module};
use crate::types::{ClipTokens, ClipVar};
use crate::Param;

/// Gate bias at init; `sigmoid(10) ~ 1 - 4.5e-5`.
pub const TDM_GATE_BIAS: f64 = 10.0;

pub const HTPL_SCALES: [usize; 4] = [1, 2, 4, 8];

/// `Delta_t = A_t - A_{t-1}`, `Delta_1 = 0`.
pub fn frame_diff(tokens: &ClipTokens) -> ClipTokens {
    let mut g = Graph::inference();
    let clip = tokens.to_var(&mut g);
    let out = frame_diff_var(&mut g, clip);
    ClipTokens::new(g.value(out.var).clone(), tokens.frames()).expect("same shape")
}

pub fn frame_diff_var(g: &mut Graph, clip: ClipVar) -> ClipVar {
    let n = clip.tokens;
    let d = g.shape(clip.var).1;
    let first = g.zeros(n, d);
    if clip.frames == 1 {
        return clip.with_var(first);
    }
    let rest = clip.rows() - n;
    let later = g.slice_rows(clip.var, n, rest);
    let earlier = g.slice_rows(clip.var, 0, rest);
    let diffs = g.sub(later, earlier);
    clip.with_var(g.concat_rows(&[first, diffs]))
}

/// Motion encoder applied per token and a per-frame, per-channel gate head.
#[derive(Clone, Debug)]
pub struct TdmParams {
    pub motion: Mlp,
    pub gate: Mlp,
}

impl TdmParams {
    pub fn new<R: Rng + ?Sized>(
        d: usize,
        motion_hidden: usize,
        gate_hidden: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let motion = Mlp::zero_out(d, motion_hidden, d, true, activation, rng);
        let mut gate = Mlp::zero_out(2 * d, gate_hidden, d, true, activation, rng);
        if let Some(b) = &mut gate.fc2.bias {
            b.value.fill(TDM_GATE_BIAS);
        }
        Self { motion, gate }
    }

    pub fn dim(&self) -> usize {
        self.motion.fc1.input_dim()
    }

    /// Per-frame gates `[T, d]` and motion tokens `[T*(Np+1), d]`.
    pub fn gates(&self, g: &mut Graph, clip: ClipVar) -> (Var, Var) {
        let delta = frame_diff_var(g, clip);
        let m = self.motion.forward(g, delta.var);
        let a_mean = g.group_mean(clip.var, clip.tokens);
        let m_mean = g.group_mean(m, clip.tokens);
        let cat = g.concat_cols(&[a_mean, m_mean]);
        let logits = self.gate.forward(g, cat);
        (g.sigmoid(logits), m)
    }

    /// `g_t * A_t + (1 - g_t) * m_t`.
    pub fn forward(&self, g: &mut Graph, clip: ClipVar) -> ClipVar {
        let (gate, m) = self.gates(g, clip);
        let gate = g.repeat_rows(gate, clip.tokens);
        let keep = g.mul(gate, clip.var);
        let rest = g.one_minus(gate);
        let moved = g.mul(rest, m);
        clip.with_var(g.add(keep, moved))
    }
}

impl Module for TdmParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.motion.visit(&join(prefix, "motion"), f);
        self.gate.visit(&join(prefix, "gate"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.motion.visit_mut(&join(prefix, "motion"), f);
        self.gate.visit_mut(&join(prefix, "gate"), f);
    }
}

fn check_dim(tokens: &ClipTokens, d: usize) -> Result<()> {
    if tokens.dim() != d {
        return Err(Error::Shape(format!("tokens have {} channels, adapter expects {d}", tokens.dim())));
    }
    Ok(())
}

pub fn tdm_forward(tokens: &ClipTokens, params: &TdmParams) -> Result<ClipTokens> {
    check_dim(tokens, params.dim())?;
    let mut g = Graph::inference();
    let clip = tokens.to_var(&mut g);
    params.forward(&mut g, clip).to_tokens(&g)
}

fn check_scale(s: usize) -> Result<()> {
    if !HTPL_SCALES.contains(&s) {
        return Err(Error::Config(format!("temporal scale {s} not one of {HTPL_SCALES:?}")));
    }
    Ok(())
}

/// `[T, T]` matrix mapping a sequence to its scale-`s` stream: block means
/// placed at block centers, linearly interpolated, clamped at the edges.
pub fn stream_matrix(frames: usize, s: usize) -> Result<Tensor> {
    check_scale(s)?;
    let blocks = frames.div_ceil(s);
    let mut means = Tensor::zeros((blocks, frames));
    let mut centers = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let start = b * s;
        let end = (start + s).min(frames);
        for t in start..end {
            means[[b, t]] = 1.0 / (end - start) as f64;
        }
        centers.push((start + end - 1) as f64 / 2.0);
    }
    let mut interp = Tensor::zeros((frames, blocks));
    for t in 0..frames {
        let x = t as f64;
        if x <= centers[0] {
            interp[[t, 0]] = 1.0;
        } else if x >= centers[blocks - 1] {
            interp[[t, blocks - 1]] = 1.0;
        } else {
            let b = centers.iter().rposition(|&c| c <= x).expect("x above first center");
            let w = (x - centers[b]) / (centers[b + 1] - centers[b]);
            interp[[t, b]] = 1.0 - w;
            interp[[t, b + 1]] = w;
        }
    }
    Ok(interp.dot(&means))
}

/// Scale-`s` stream of per-frame descriptors `[T, d]`.
pub fn htpl_stream(seq: &Tensor, s: usize) -> Result<Tensor> {
    if seq.nrows() == 0 {
        return Err(Error::Shape("empty frame sequence".into()));
    }
    Ok(stream_matrix(seq.nrows(), s)?.dot(seq))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HtplInjection {
    /// Fused per-frame vector added to every token of its frame.
    #[default]
    ResidualOnTokens,
    /// Tokens untouched; the time-averaged fused vector is appended to the descriptor.
    ConcatToDescriptor,
}

#[derive(Clone, Debug)]
pub struct HtplParams {
    pub projections: Vec<Linear>,
    pub fusion: Mlp,
    pub injection: HtplInjection,
}

/// Graph outputs of one HTPL pass.
#[derive(Clone, Copy, Debug)]
pub struct HtplVar {
    pub tokens: ClipVar,
    /// Fusion output per frame, `[T, d]`.
    pub fused: Var,
    /// Time-averaged projected stream per scale, `[4, p]`.
    pub streams: Var,
}

impl HtplParams {
    pub fn new<R: Rng + ?Sized>(
        d: usize,
        proj: usize,
        hidden: usize,
        activation: Activation,
        injection: HtplInjection,
        rng: &mut R,
    ) -> Self {
        let projections = HTPL_SCALES.iter().map(|_| Linear::new(d, proj, true, rng)).collect();
        let fusion = Mlp::zero_out(4 * proj, hidden, d, true, activation, rng);
        Self { projections, fusion, injection }
    }

    pub fn dim(&self) -> usize {
        self.projections[0].input_dim()
    }

    pub fn forward(&self, g: &mut Graph, clip: ClipVar) -> HtplVar {
        let seq = g.group_mean(clip.var, clip.tokens);
        let mut projected = Vec::with_capacity(HTPL_SCALES.len());
        let mut means = Vec::with_capacity(HTPL_SCALES.len());
        for (&s, proj) in HTPL_SCALES.iter().zip(&self.projections) {
            let m = g.constant(stream_matrix(clip.frames, s).expect("fixed scale"));
            let stream = g.matmul(m, seq);
            let p = proj.forward(g, stream);
            means.push(g.mean_rows(p));
            projected.push(p);
        }
        let cat = g.concat_cols(&projected);
        let fused = self.fusion.forward(g, cat);
        let streams = g.concat_rows(&means);
        let tokens = match self.injection {
            HtplInjection::ResidualOnTokens => {
                let per_token = g.repeat_rows(fused, clip.tokens);
                clip.with_var(g.add(clip.var, per_token))
            }
            HtplInjection::ConcatToDescriptor => clip,
        };
        HtplVar { tokens, fused, streams }
    }
}

impl Module for HtplParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        for (s, p) in HTPL_SCALES.iter().zip(&self.projections) {
            p.visit(&join(prefix, &format!("proj_s{s}")), f);
        }
        self.fusion.visit(&join(prefix, "fusion"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (s, p) in HTPL_SCALES.iter().zip(&mut self.projections) {
            p.visit_mut(&join(prefix, &format!("proj_s{s}")), f);
        }
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
    }
}

pub fn htpl_forward(tokens: &ClipTokens, params: &HtplParams) -> Result<ClipTokens> {
    check_dim(tokens, params.dim())?;
    let mut g = Graph::inference();
    let clip = tokens.to_var(&mut g);
    params.forward(&mut g, clip).tokens.to_tokens(&g)
}

/// The four time-averaged projected streams of a clip, `[4, p]`.
pub fn htpl_stream_descriptors(tokens: &ClipTokens, params: &HtplParams) -> Result<Tensor> {
    check_dim(tokens, params.dim())?;
    let mut g = Graph::inference();
    let clip = tokens.to_var(&mut g);
    let out = params.forward(&mut g, clip);
    Ok(g.value(out.streams).clone())
}

/// Per-frame token means `[T, d]`.
pub fn frame_means(tokens: &ClipTokens) -> Tensor {
    let (t_n, _, d) = tokens.shape();
    let mut out = Tensor::zeros((t_n, d));
    for t in 0..t_n {
        out.row_mut(t).assign(&tokens.frame(t).mean_axis(Axis(0)).expect("non-empty frame"));
    }
    out
}
