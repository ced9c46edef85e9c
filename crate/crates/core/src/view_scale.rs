//! View-bias correction (CSFN) and multi-resolution harmonization (MRFH).
//!
//! Both adapters act on every frame independently and keep the token shape.
//! Their final affine maps start at zero so a fresh adapter is the identity.

use ndarray::{Array1, ArrayView2, Axis};
use rand::Rng;

use crate::autodiff::{softmax_rows, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{join, Activation, Linear, Mlp, Module};
use crate::types::{ClipTokens, ClipVar, ViewId};
use crate::Param;

/// Per-view offset `e_v` and residual MLP `phi_v`.
#[derive(Clone, Debug)]
pub struct CsfnParams {
    /// Row `v.index()` holds `e_v`.
    pub offsets: Param,
    pub mlps: Vec<Mlp>,
}

impl CsfnParams {
    pub fn new<R: Rng + ?Sized>(d: usize, hidden: usize, activation: Activation, rng: &mut R) -> Self {
        let offsets = Param::new(crate::nn::randn_scaled(ViewId::COUNT, d, 0.02, rng));
        let mlps = (0..ViewId::COUNT).map(|_| Mlp::zero_out(d, hidden, d, true, activation, rng)).collect();
        Self { offsets, mlps }
    }

    pub fn dim(&self) -> usize {
        self.offsets.value.ncols()
    }

    /// `phi_v(Z + 1 e_v^T) + Z`, applied to all frames at once.
    pub fn forward(&self, g: &mut Graph, clip: ClipVar, view: ViewId) -> ClipVar {
        let offsets = g.param(&self.offsets);
        let e = g.slice_rows(offsets, view.index(), 1);
        let shifted = g.add(clip.var, e);
        let corrected = self.mlps[view.index()].forward(g, shifted);
        clip.with_var(g.add(corrected, clip.var))
    }
}

impl Module for CsfnParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(join(prefix, "offsets"), &self.offsets);
        for (v, m) in ViewId::ALL.iter().zip(&self.mlps) {
            m.visit(&join(prefix, &format!("phi_{v}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "offsets"), &mut self.offsets);
        for (v, m) in ViewId::ALL.iter().zip(&mut self.mlps) {
            m.visit_mut(&join(prefix, &format!("phi_{v}")), f);
        }
    }
}

pub const MRFH_SCALES: [&str; 3] = ["half", "native", "double"];

/// Three token-space "virtual zoom" blocks and the scale-weight head.
///
/// Scale names are labels only; every block is `x + mlp_s(x)`.
#[derive(Clone, Debug)]
pub struct MrfhParams {
    pub blocks: Vec<Mlp>,
    pub head: Linear,
}

impl MrfhParams {
    pub fn new<R: Rng + ?Sized>(d: usize, hidden: usize, activation: Activation, rng: &mut R) -> Self {
        let blocks = (0..3).map(|_| Mlp::zero_out(d, hidden, d, true, activation, rng)).collect();
        let mut head = Linear::new(d, 3, true, rng);
        head.weight.value *= 0.1;
        Self { blocks, head }
    }

    /// Softmax scale weights per frame, `[T, 3]`.
    pub fn weights(&self, g: &mut Graph, clip: ClipVar) -> Var {
        let means = g.group_mean(clip.var, clip.tokens);
        let logits = self.head.forward(g, means);
        g.softmax_rows(logits)
    }

    /// `A_t = sum_s alpha_{t,s} psi_s(Z_t)`.
    pub fn forward(&self, g: &mut Graph, clip: ClipVar) -> ClipVar {
        let alpha = self.weights(g, clip);
        let mut out: Option<Var> = None;
        for (s, block) in self.blocks.iter().enumerate() {
            let delta = block.forward(g, clip.var);
            let psi = g.add(clip.var, delta);
            let a_s = g.slice_cols(alpha, s, 1);
            let a_tok = g.repeat_rows(a_s, clip.tokens);
            let term = g.mul(psi, a_tok);
            out = Some(match out {
                Some(acc) => g.add(acc, term),
                None => term,
            });
        }
        clip.with_var(out.expect("three scales"))
    }
}

impl Module for MrfhParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        for (name, b) in MRFH_SCALES.iter().zip(&self.blocks) {
            b.visit(&join(prefix, &format!("psi_{name}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (name, b) in MRFH_SCALES.iter().zip(&mut self.blocks) {
            b.visit_mut(&join(prefix, &format!("psi_{name}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

fn check_dim(tokens: &ClipTokens, d: usize) -> Result<()> {
    if tokens.dim() != d {
        return Err(Error::Shape(format!("tokens have {} channels, adapter expects {d}", tokens.dim())));
    }
    Ok(())
}

pub fn csfn_forward(tokens: &ClipTokens, view: ViewId, params: &CsfnParams) -> Result<ClipTokens> {
    check_dim(tokens, params.dim())?;
    let mut g = Graph::inference();
    let clip = tokens.to_var(&mut g);
    params.forward(&mut g, clip, view).to_tokens(&g)
}

/// Scale weights of one frame `[Np+1, d]`; always on the 3-simplex.
pub fn mrfh_weights(frame: ArrayView2<'_, f64>, params: &MrfhParams) -> Result<Array1<f64>> {
    let d = params.head.input_dim();
    if frame.ncols() != d || frame.nrows() == 0 {
        return Err(Error::Shape(format!("frame is [{}, {}], expected [_, {d}]", frame.nrows(), frame.ncols())));
    }
    if frame.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("frame tokens are not finite".into()));
    }
    let mean = frame.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
    let mut logits = mean.dot(&params.head.weight.value);
    if let Some(b) = &params.head.bias {
        logits += &b.value;
    }
    Ok(softmax_rows(&logits).row(0).to_owned())
}

pub fn mrfh_forward(tokens: &ClipTokens, params: &MrfhParams) -> Result<ClipTokens> {
    check_dim(tokens, params.head.input_dim())?;
    let mut g = Graph::inference();
    let clip = tokens.to_var(&mut g);
    params.forward(&mut g, clip).to_tokens(&g)
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Straight-line loop implementations used as independent references.
    use super::*;

    pub fn linear_row(x: &[f64], lin: &Linear) -> Vec<f64> {
        let w = &lin.weight.value;
        (0..w.ncols())
            .map(|j| {
                let mut acc = lin.bias.as_ref().map_or(0.0, |b| b.value[[0, j]]);
                for (i, xi) in x.iter().enumerate() {
                    acc += xi * w[[i, j]];
                }
                acc
            })
            .collect()
    }

    pub fn mlp_row(x: &[f64], mlp: &Mlp) -> Vec<f64> {
        let h: Vec<f64> = linear_row(x, &mlp.fc1).into_iter().map(|v| mlp.activation.eval(v)).collect();
        linear_row(&h, &mlp.fc2)
    }

    pub fn csfn(tokens: &ClipTokens, view: ViewId, p: &CsfnParams) -> Vec<Vec<Vec<f64>>> {
        let (t_n, n, d) = tokens.shape();
        let e = p.offsets.value.row(view.index());
        let mut out = vec![vec![vec![0.0; d]; n]; t_n];
        for t in 0..t_n {
            for i in 0..n {
                let shifted: Vec<f64> = (0..d).map(|c| tokens.get(t, i, c) + e[c]).collect();
                let phi = mlp_row(&shifted, &p.mlps[view.index()]);
                for c in 0..d {
                    out[t][i][c] = phi[c] + tokens.get(t, i, c);
                }
            }
        }
        out
    }

    pub fn mrfh(tokens: &ClipTokens, p: &MrfhParams) -> Vec<Vec<Vec<f64>>> {
        let (t_n, n, d) = tokens.shape();
        let mut out = vec![vec![vec![0.0; d]; n]; t_n];
        for t in 0..t_n {
            let mut mean = vec![0.0; d];
            for i in 0..n {
                for c in 0..d {
                    mean[c] += tokens.get(t, i, c) / n as f64;
                }
            }
            let logits = linear_row(&mean, &p.head);
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = ex.iter().sum();
            for i in 0..n {
                let z_ti: Vec<f64> = (0..d).map(|c| tokens.get(t, i, c)).collect();
                for (s, block) in p.blocks.iter().enumerate() {
                    let delta = mlp_row(&z_ti, block);
                    for c in 0..d {
                        out[t][i][c] += ex[s] / z * (z_ti[c] + delta[c]);
                    }
                }
            }
        }
        out
    }

    pub fn max_diff(tokens: &ClipTokens, reference: &[Vec<Vec<f64>>]) -> f64 {
        let (t_n, n, d) = tokens.shape();
        let mut worst: f64 = 0.0;
        for t in 0..t_n {
            for i in 0..n {
                for c in 0..d {
                    worst = worst.max((tokens.get(t, i, c) - reference[t][i][c]).abs());
                }
            }
        }
        worst
    }
}
