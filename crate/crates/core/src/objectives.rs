//! Training losses and their weighted combination.
//!
//! Every loss has a graph form (`*_var`) used by the trainer and a plain form
//! over tensors used by tests and evaluation tooling.

use std::collections::BTreeMap;

use ndarray::{Array1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{join, Activation, Mlp, Module};
use crate::types::ViewId;
use crate::Param;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub v2m: f64,
    pub tri: f64,
    pub ce: f64,
    pub ctr: f64,
    pub htpl: f64,
    pub mvicl: f64,
    pub alpha_cons: f64,
    pub beta_align: f64,
    pub tau: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            v2m: 1.0,
            tri: 2.0,
            ce: 1.0,
            ctr: 5e-4,
            htpl: 0.1,
            mvicl: 0.2,
            alpha_cons: 1.0,
            beta_align: 1.0,
            tau: 0.07,
            margin: 0.3,
        }
    }
}

impl LossWeights {
    /// Triplet + CE + alpha cons + beta align, nothing else.
    pub fn compact() -> Self {
        Self { v2m: 0.0, tri: 1.0, ce: 1.0, ctr: 0.0, htpl: 0.0, mvicl: 1.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("v2m", self.v2m),
            ("tri", self.tri),
            ("ce", self.ce),
            ("ctr", self.ctr),
            ("htpl", self.htpl),
            ("mvicl", self.mvicl),
            ("alpha_cons", self.alpha_cons),
            ("beta_align", self.beta_align),
            ("margin", self.margin),
        ];
        for (name, w) in named {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {w} must be finite and >= 0")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature tau = {} must be > 0", self.tau)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Stage {
    One,
    Two,
}

impl TryFrom<u32> for Stage {
    type Error = Error;

    fn try_from(n: u32) -> Result<Self> {
        Stage::from_number(n)
    }
}

impl From<Stage> for u32 {
    fn from(s: Stage) -> u32 {
        s.number()
    }
}

impl Stage {
    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            other => Err(Error::Config(format!("stage must be 1 or 2, got {other}"))),
        }
    }

    pub fn number(self) -> u32 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// Individual loss values; `mvicl` is already `alpha cons + beta align`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossComponents<T> {
    pub v2m: Option<T>,
    pub tri: Option<T>,
    pub ce: Option<T>,
    pub ctr: Option<T>,
    pub htpl: Option<T>,
    pub mvicl: Option<T>,
}

/// `(weight, value)` pairs that make up the stage objective.
///
/// Stage 1 reads only triplet, CE and (if present) center. Stage 2 requires
/// every component whose weight is non-zero.
impl<T> Default for LossComponents<T> {
    fn default() -> Self {
        Self { v2m: None, tri: None, ce: None, ctr: None, htpl: None, mvicl: None }
    }
}

pub fn weighted_terms<T: Copy>(c: &LossComponents<T>, w: &LossWeights, stage: Stage) -> Result<Vec<(f64, T)>> {
    let need = |name: &str, v: Option<T>| {
        v.ok_or_else(|| Error::Config(format!("stage {} objective needs the {name} loss", stage.number())))
    };
    let mut out = Vec::new();
    match stage {
        Stage::One => {
            out.push((w.tri, need("triplet", c.tri)?));
            out.push((w.ce, need("cross-entropy", c.ce)?));
            if let Some(ctr) = c.ctr {
                out.push((w.ctr, ctr));
            }
        }
        Stage::Two => {
            let all = [
                ("video-to-memory", w.v2m, c.v2m),
                ("triplet", w.tri, c.tri),
                ("cross-entropy", w.ce, c.ce),
                ("center", w.ctr, c.ctr),
                ("temporal-consistency", w.htpl, c.htpl),
                ("multi-view consistency", w.mvicl, c.mvicl),
            ];
            for (name, weight, value) in all {
                if weight != 0.0 {
                    out.push((weight, need(name, value)?));
                } else if let Some(v) = value {
                    out.push((0.0, v));
                }
            }
        }
    }
    Ok(out)
}

pub fn total_loss(c: &LossComponents<f64>, w: &LossWeights, stage: Stage) -> Result<f64> {
    Ok(weighted_terms(c, w, stage)?.iter().map(|(w, v)| w * v).sum())
}

pub fn total_loss_var(g: &mut Graph, c: &LossComponents<Var>, w: &LossWeights, stage: Stage) -> Result<Var> {
    let mut total = g.scalar(0.0);
    for (weight, v) in weighted_terms(c, w, stage)? {
        let term = g.scale(v, weight);
        total = g.add(total, term);
    }
    Ok(total)
}

/// `alpha cons + beta align`.
pub fn mvicl(cons: f64, align: f64, w: &LossWeights) -> f64 {
    w.alpha_cons * cons + w.beta_align * align
}

pub fn mvicl_var(g: &mut Graph, cons: Var, align: Var, w: &LossWeights) -> Var {
    let a = g.scale(cons, w.alpha_cons);
    let b = g.scale(align, w.beta_align);
    g.add(a, b)
}

fn check_batch(rows: usize, ids: &[usize], views: Option<&[ViewId]>) -> Result<()> {
    if ids.len() != rows || views.is_some_and(|v| v.len() != rows) {
        return Err(Error::Shape(format!(
            "batch has {rows} rows but {} ids{}",
            ids.len(),
            views.map_or(String::new(), |v| format!(" and {} views", v.len()))
        )));
    }
    Ok(())
}

/// Cross-view consistency: for every ordered view pair, the mean of
/// `softplus(-cos / tau)` over same-identity clip pairs, summed over view pairs.
pub fn loss_cons_var(g: &mut Graph, features: Var, ids: &[usize], views: &[ViewId], tau: f64) -> Var {
    let n = g.l2_normalize_rows(features);
    let nt = g.transpose(n);
    let sim = g.matmul(n, nt);
    let mut total = g.scalar(0.0);
    for v1 in ViewId::ALL {
        for v2 in ViewId::ALL {
            if v1 == v2 {
                continue;
            }
            let pairs: Vec<(usize, usize)> = (0..ids.len())
                .flat_map(|i| (0..ids.len()).map(move |j| (i, j)))
                .filter(|&(i, j)| views[i] == v1 && views[j] == v2 && ids[i] == ids[j])
                .collect();
            if pairs.is_empty() {
                continue;
            }
            let s = g.pick(sim, &pairs);
            let s = g.scale(s, -1.0 / tau);
            let l = g.softplus(s);
            let l = g.mean(l);
            total = g.add(total, l);
        }
    }
    total
}

pub fn loss_cons(features: &Tensor, ids: &[usize], views: &[ViewId], tau: f64) -> Result<f64> {
    check_batch(features.nrows(), ids, Some(views))?;
    eval(features, |g, f| loss_cons_var(g, f, ids, views, tau))
}

/// AlignNet: a residual MLP mapping the mean of the per-view features to the anchor.
#[derive(Clone, Debug)]
pub struct AlignNet {
    pub mlp: Mlp,
}

impl AlignNet {
    pub fn new<R: Rng + ?Sized>(d: usize, hidden: usize, activation: Activation, rng: &mut R) -> Self {
        Self { mlp: Mlp::zero_out(d, hidden, d, true, activation, rng) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let delta = self.mlp.forward(g, x);
        g.add(x, delta)
    }
}

impl Module for AlignNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.mlp.visit(&join(prefix, "align_net"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.mlp.visit_mut(&join(prefix, "align_net"), f);
    }
}

/// `sum_v ||anchor - F_v||^2` for one identity.
pub fn loss_align(per_view: &[Array1<f64>], anchor: &Array1<f64>) -> Result<f64> {
    let mut total = 0.0;
    for f in per_view {
        if f.len() != anchor.len() {
            return Err(Error::Shape(format!("view feature has {} channels, anchor has {}", f.len(), anchor.len())));
        }
        total += (anchor - f).mapv(|x| x * x).sum();
    }
    Ok(total)
}

/// Batch form: per identity seen in at least two views, `F_v` is the mean
/// normalized feature of its clips in view `v` and the anchor is `AlignNet`
/// of their mean. Averaged over such identities; 0 if there are none.
pub fn loss_align_var(g: &mut Graph, features: Var, ids: &[usize], views: &[ViewId], net: &AlignNet) -> Var {
    let n = g.l2_normalize_rows(features);
    let mut groups: BTreeMap<usize, BTreeMap<ViewId, Vec<usize>>> = BTreeMap::new();
    for (b, (&id, &v)) in ids.iter().zip(views).enumerate() {
        groups.entry(id).or_default().entry(v).or_default().push(b);
    }
    let mut total = g.scalar(0.0);
    let mut count = 0usize;
    for per_view in groups.values().filter(|m| m.len() >= 2) {
        let feats: Vec<Var> = per_view
            .values()
            .map(|rows| {
                let sel = g.gather_rows(n, rows);
                g.mean_rows(sel)
            })
            .collect();
        let stacked = g.concat_rows(&feats);
        let mean = g.mean_rows(stacked);
        let anchor = net.forward(g, mean);
        let diff = g.sub(stacked, anchor);
        let sq = g.square(diff);
        let l = g.sum(sq);
        total = g.add(total, l);
        count += 1;
    }
    if count > 1 {
        total = g.scale(total, 1.0 / count as f64);
    }
    total
}

/// `max(0, d_ap - d_an + margin)`.
pub fn triplet_term(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    (d_ap - d_an + margin).max(0.0)
}

const DIST_EPS: f64 = 1e-12;

/// Pairwise Euclidean distances `sqrt(||a - b||^2 + eps)`, `[B, B]`.
pub fn pairwise_distances_var(g: &mut Graph, features: Var) -> Var {
    let sq = g.square(features);
    let norms = g.sum_cols(sq);
    let norms_t = g.transpose(norms);
    let ft = g.transpose(features);
    let gram = g.matmul(features, ft);
    let gram = g.scale(gram, -2.0);
    let d2 = g.add(norms, norms_t);
    let d2 = g.add(d2, gram);
    let d2 = g.relu(d2);
    let d2 = g.add_scalar(d2, DIST_EPS);
    g.sqrt(d2)
}

/// Batch-hard triplet loss; anchors without a positive or a negative are skipped.
pub fn loss_triplet_var(g: &mut Graph, features: Var, ids: &[usize], margin: f64) -> Var {
    let dist = pairwise_distances_var(g, features);
    let dv = g.value(dist).clone();
    let b = ids.len();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for a in 0..b {
        let hardest = |same: bool| {
            (0..b).filter(|&j| j != a && (ids[j] == ids[a]) == same).fold(None, |best: Option<usize>, j| match best {
                Some(k) if (same && dv[[a, k]] >= dv[[a, j]]) || (!same && dv[[a, k]] <= dv[[a, j]]) => Some(k),
                _ => Some(j),
            })
        };
        if let (Some(p), Some(n)) = (hardest(true), hardest(false)) {
            pos.push((a, p));
            neg.push((a, n));
        }
    }
    if pos.is_empty() {
        return g.scalar(0.0);
    }
    let dp = g.pick(dist, &pos);
    let dn = g.pick(dist, &neg);
    let diff = g.sub(dp, dn);
    let diff = g.add_scalar(diff, margin);
    let hinge = g.relu(diff);
    g.mean(hinge)
}

pub fn loss_triplet(features: &Tensor, ids: &[usize], margin: f64) -> Result<f64> {
    check_batch(features.nrows(), ids, None)?;
    eval(features, |g, f| loss_triplet_var(g, f, ids, margin))
}

/// Softmax cross-entropy, averaged over the batch.
pub fn loss_ce_var(g: &mut Graph, logits: Var, ids: &[usize]) -> Result<Var> {
    let (rows, classes) = g.shape(logits);
    check_batch(rows, ids, None)?;
    if let Some(&bad) = ids.iter().find(|&&y| y >= classes) {
        return Err(Error::Index(format!("identity {bad} has no logit among {classes} classes")));
    }
    let lsm = g.log_softmax_rows(logits);
    let entries: Vec<(usize, usize)> = ids.iter().copied().enumerate().collect();
    let picked = g.pick(lsm, &entries);
    let m = g.mean(picked);
    Ok(g.neg(m))
}

pub fn loss_ce(logits: &Tensor, ids: &[usize]) -> Result<f64> {
    let mut g = Graph::inference();
    let l = g.constant(logits.clone());
    let out = loss_ce_var(&mut g, l, ids)?;
    Ok(g.scalar_value(out))
}

/// One center per identity, EMA-maintained outside the gradient path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterBank {
    pub centers: Tensor,
    pub momentum: f64,
    seen: Vec<bool>,
}

impl CenterBank {
    pub fn new(num_ids: usize, dim: usize, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::Config(format!("center momentum {momentum} not in (0, 1]")));
        }
        Ok(Self { centers: Tensor::zeros((num_ids, dim)), momentum, seen: vec![false; num_ids] })
    }

    pub fn seen(&self) -> &[bool] {
        &self.seen
    }

    pub fn restore(&mut self, centers: Tensor, seen: Vec<bool>) -> Result<()> {
        if centers.dim() != self.centers.dim() || seen.len() != self.seen.len() {
            return Err(Error::Shape(format!(
                "center state is {:?}, expected {:?}",
                centers.dim(),
                self.centers.dim()
            )));
        }
        self.centers = centers;
        self.seen = seen;
        Ok(())
    }

    /// Moves each center toward the batch mean of its identity; the first
    /// update of a center copies that mean.
    pub fn update(&mut self, features: &Tensor, ids: &[usize]) -> Result<()> {
        check_batch(features.nrows(), ids, None)?;
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (b, &id) in ids.iter().enumerate() {
            if id >= self.centers.nrows() {
                return Err(Error::Index(format!("identity {id} has no center")));
            }
            groups.entry(id).or_default().push(b);
        }
        for (id, rows) in groups {
            let mean = features.select(Axis(0), &rows).mean_axis(Axis(0)).expect("non-empty");
            let eta = if self.seen[id] { self.momentum } else { 1.0 };
            let mut c = self.centers.row_mut(id);
            c.zip_mut_with(&mean, |ci, &mi| *ci = (1.0 - eta) * *ci + eta * mi);
            self.seen[id] = true;
        }
        Ok(())
    }
}

/// Mean over the batch of `||f_b - center(id_b)||^2`.
pub fn loss_center_var(g: &mut Graph, features: Var, ids: &[usize], centers: &Tensor) -> Result<Var> {
    let (rows, d) = g.shape(features);
    check_batch(rows, ids, None)?;
    if centers.ncols() != d {
        return Err(Error::Shape(format!("centers have {} channels, features {d}", centers.ncols())));
    }
    if let Some(&bad) = ids.iter().find(|&&y| y >= centers.nrows()) {
        return Err(Error::Index(format!("identity {bad} has no center")));
    }
    let c = g.constant(centers.select(Axis(0), ids));
    let diff = g.sub(features, c);
    let sq = g.square(diff);
    let per = g.sum_cols(sq);
    Ok(g.mean(per))
}

pub fn loss_center(features: &Tensor, ids: &[usize], centers: &Tensor) -> Result<f64> {
    let mut g = Graph::inference();
    let f = g.constant(features.clone());
    let out = loss_center_var(&mut g, f, ids, centers)?;
    Ok(g.scalar_value(out))
}

/// Symmetric clip/context InfoNCE over cosine similarities; clip `b` is paired
/// with context `b`, every other context in the batch is a negative.
pub fn loss_v2m_var(g: &mut Graph, descriptors: Var, contexts: Var, tau: f64) -> Var {
    let b = g.shape(descriptors).0;
    let f = g.l2_normalize_rows(descriptors);
    let c = g.l2_normalize_rows(contexts);
    let ct = g.transpose(c);
    let logits = g.matmul(f, ct);
    let logits = g.scale(logits, 1.0 / tau);
    let diag: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
    let rows = g.log_softmax_rows(logits);
    let rows = g.pick(rows, &diag);
    let lt = g.transpose(logits);
    let cols = g.log_softmax_rows(lt);
    let cols = g.pick(cols, &diag);
    let both = g.concat_rows(&[rows, cols]);
    let m = g.mean(both);
    g.neg(m)
}

pub fn loss_v2m(descriptors: &Tensor, contexts: &Tensor, tau: f64) -> Result<f64> {
    if descriptors.dim() != contexts.dim() || descriptors.nrows() == 0 {
        return Err(Error::Shape(format!(
            "descriptors {:?} and contexts {:?} must match",
            descriptors.dim(),
            contexts.dim()
        )));
    }
    let mut g = Graph::inference();
    let f = g.constant(descriptors.clone());
    let c = g.constant(contexts.clone());
    let out = loss_v2m_var(&mut g, f, c, tau);
    Ok(g.scalar_value(out))
}

/// Cross-scale agreement: mean over stream pairs of squared distance, averaged
/// over clips. Each entry of `streams` is one clip's `[S, p]` stream matrix.
pub fn loss_htpl_var(g: &mut Graph, streams: &[Var]) -> Var {
    let mut total = g.scalar(0.0);
    if streams.is_empty() {
        return total;
    }
    for &s in streams {
        let k = g.shape(s).0;
        let mut pairs = Vec::new();
        for a in 0..k {
            for b in a + 1..k {
                let ra = g.slice_rows(s, a, 1);
                let rb = g.slice_rows(s, b, 1);
                let diff = g.sub(ra, rb);
                let sq = g.square(diff);
                pairs.push(g.sum(sq));
            }
        }
        if pairs.is_empty() {
            continue;
        }
        let n = pairs.len() as f64;
        let stacked = g.concat_rows(&pairs);
        let sum = g.sum(stacked);
        let mean = g.scale(sum, 1.0 / n);
        total = g.add(total, mean);
    }
    g.scale(total, 1.0 / streams.len() as f64)
}

pub fn loss_htpl(streams: &[Tensor]) -> f64 {
    let mut g = Graph::inference();
    let vars: Vec<Var> = streams.iter().map(|s| g.constant(s.clone())).collect();
    let out = loss_htpl_var(&mut g, &vars);
    g.scalar_value(out)
}

fn eval(features: &Tensor, f: impl FnOnce(&mut Graph, Var) -> Var) -> Result<f64> {
    let mut g = Graph::inference();
    let x = g.constant(features.clone());
    let out = f(&mut g, x);
    Ok(g.scalar_value(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{check_inputs, check_module};
    use crate::nn::randomize;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    use ViewId::{Aerial, Ground, Wearable};

    fn randt(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_shape_fn((r, c), |_| StandardNormal.sample(rng))
    }

    fn softplus_ref(x: f64) -> f64 {
        (1.0 + x.exp()).ln()
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn cons_orthogonal_pair() {
        let f = array![[1.0, 0.0], [0.0, 1.0]];
        let l = loss_cons(&f, &[0, 0], &[Aerial, Ground], 1.0).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((l - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn cons_without_cross_view_pairs_is_zero() {
        let f = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        assert_eq!(loss_cons(&f, &[0, 0, 1], &[Aerial, Aerial, Ground], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn cons_matches_enumeration() {
        let f = array![[1.0, 0.5], [-0.3, 2.0], [0.7, -0.2], [1.5, 1.5]];
        let ids = [0, 0, 0, 1];
        let views = [Aerial, Ground, Wearable, Ground];
        let tau = 0.5;
        let rows: Vec<Vec<f64>> = f.rows().into_iter().map(|r| r.to_vec()).collect();
        let mut expected = 0.0;
        for v1 in ViewId::ALL {
            for v2 in ViewId::ALL {
                if v1 == v2 {
                    continue;
                }
                let mut terms = Vec::new();
                for i in 0..4 {
                    for j in 0..4 {
                        if views[i] == v1 && views[j] == v2 && ids[i] == ids[j] {
                            terms.push(softplus_ref(-cos(&rows[i], &rows[j]) / tau));
                        }
                    }
                }
                if !terms.is_empty() {
                    expected += terms.iter().sum::<f64>() / terms.len() as f64;
                }
            }
        }
        let l = loss_cons(&f, &ids, &views, tau).unwrap();
        assert!((l - expected).abs() < 1e-12, "{l} vs {expected}");
    }

    proptest! {
        #[test]
        fn cons_is_scale_invariant(vals in prop::collection::vec(-3.0f64..3.0, 8), k in 0.1f64..10.0) {
            let f = Tensor::from_shape_vec((4, 2), vals).unwrap();
            prop_assume!(f.rows().into_iter().all(|r| r.dot(&r) > 1e-3));
            let ids = [0, 0, 1, 1];
            let views = [Aerial, Ground, Ground, Wearable];
            let a = loss_cons(&f, &ids, &views, 0.3).unwrap();
            let b = loss_cons(&(&f * k), &ids, &views, 0.3).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn losses_are_nonnegative(vals in prop::collection::vec(-3.0f64..3.0, 12)) {
            let f = Tensor::from_shape_vec((4, 3), vals).unwrap();
            let ids = [0, 0, 1, 1];
            prop_assert!(loss_triplet(&f, &ids, 0.3).unwrap() >= 0.0);
            prop_assert!(loss_ce(&f, &ids).unwrap() >= 0.0);
            prop_assert!(loss_center(&f, &ids, &Tensor::zeros((2, 3))).unwrap() >= 0.0);
            prop_assert!(loss_htpl(std::slice::from_ref(&f)) >= 0.0);
            if f.rows().into_iter().all(|r| r.dot(&r) > 1e-3) {
                prop_assert!(loss_v2m(&f, &f.mapv(|x| x + 0.5), 0.5).unwrap() >= 0.0);
            }
        }
    }

    #[test]
    fn align_examples() {
        let a = array![1.0, 0.0];
        assert_eq!(loss_align(&[a.clone(), a.clone()], &a).unwrap(), 0.0);
        assert_eq!(loss_align(&[array![0.0, 0.0]], &a).unwrap(), 1.0);
        let f1 = array![0.2, -1.0, 0.5];
        let f2 = array![1.1, 0.3, -0.4];
        let anchor = array![0.6, 0.1, 0.0];
        let hand =
            (0.4f64.powi(2) + 1.1f64.powi(2) + 0.5f64.powi(2)) + (0.5f64.powi(2) + 0.2f64.powi(2) + 0.4f64.powi(2));
        assert!((loss_align(&[f1, f2], &anchor).unwrap() - hand).abs() < 1e-12);
    }

    #[test]
    fn align_batch_matches_manual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = AlignNet::new(3, 4, Activation::Silu, &mut rng);
        randomize(&mut net, 0.5, &mut rng);
        let f = randt(5, 3, &mut rng);
        let ids = [0, 0, 0, 1, 2];
        let views = [Aerial, Aerial, Ground, Ground, Wearable];
        let mut g = Graph::inference();
        let x = g.constant(f.clone());
        let l = loss_align_var(&mut g, x, &ids, &views, &net);
        let norm = |r: usize| {
            let row = f.row(r).to_owned();
            &row / row.dot(&row).sqrt()
        };
        let fa = (norm(0) + norm(1)) / 2.0;
        let fg = norm(2);
        let mean = (&fa + &fg) / 2.0;
        let delta = crate::view_scale::oracle::mlp_row(&mean.to_vec(), &net.mlp);
        let anchor = &mean + &Array1::from(delta);
        let expected = loss_align(&[fa, fg], &anchor).unwrap();
        assert!((g.scalar_value(l) - expected).abs() < 1e-12);
    }

    #[test]
    fn triplet_examples() {
        assert_eq!(triplet_term(0.5, 1.0, 0.3), 0.0);
        assert_eq!(triplet_term(0.7, 0.7, 0.3), 0.3);
        // d_ap = 0.5, d_an = 1.0 realized on a line
        let f = array![[0.0], [0.5], [1.0], [1.5]];
        let l = loss_triplet(&f, &[0, 0, 1, 1], 0.3).unwrap();
        let expected = [
            triplet_term(0.5, 1.0, 0.3),
            triplet_term(0.5, 0.5, 0.3),
            triplet_term(0.5, 0.5, 0.3),
            triplet_term(0.5, 1.0, 0.3),
        ];
        assert!((l - expected.iter().sum::<f64>() / 4.0).abs() < 1e-6);
    }

    #[test]
    fn triplet_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = randt(6, 4, &mut rng);
        let ids = [0, 1, 0, 1, 0, 1];
        let dist = |i: usize, j: usize| (&f.row(i) - &f.row(j)).mapv(|x| x * x).sum().sqrt();
        let mut total = 0.0;
        for a in 0..6 {
            // worst violation over every (positive, negative) choice equals batch-hard
            let mut worst = f64::NEG_INFINITY;
            for p in 0..6 {
                for n in 0..6 {
                    if p != a && ids[p] == ids[a] && ids[n] != ids[a] {
                        worst = worst.max(dist(a, p) - dist(a, n) + 0.3);
                    }
                }
            }
            total += worst.max(0.0);
        }
        let l = loss_triplet(&f, &ids, 0.3).unwrap();
        assert!((l - total / 6.0).abs() < 1e-9, "{l} vs {}", total / 6.0);
    }

    #[test]
    fn triplet_skips_singletons() {
        let f = array![[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]];
        // only ids 0 has a positive pair; anchor 2 is skipped
        let l = loss_triplet(&f, &[0, 0, 1], 1.0).unwrap();
        let d_an = 50f64.sqrt().min((16.0f64 + 25.0).sqrt());
        let expected = (triplet_term(1.0, 50f64.sqrt(), 1.0) + triplet_term(1.0, d_an, 1.0)) / 2.0;
        assert!((l - expected).abs() < 1e-9);
        assert_eq!(loss_triplet(&f, &[0, 1, 2], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn ce_examples() {
        let l = loss_ce(&Tensor::zeros((3, 5)), &[0, 4, 2]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        assert!(matches!(loss_ce(&Tensor::zeros((1, 3)), &[3]), Err(Error::Index(_))));
    }

    #[test]
    fn center_examples_and_ema() {
        let f = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(loss_center(&f, &[0, 1], &f).unwrap(), 0.0);
        assert_eq!(loss_center(&f, &[0, 0], &array![[1.0, 2.0]]).unwrap(), 4.0);
        let mut bank = CenterBank::new(2, 2, 0.5).unwrap();
        bank.update(&f, &[0, 0]).unwrap();
        assert_eq!(bank.centers.row(0), array![2.0, 3.0]);
        bank.update(&array![[4.0, 5.0]], &[0]).unwrap();
        assert_eq!(bank.centers.row(0), array![3.0, 4.0]);
        assert_eq!(bank.centers.row(1), array![0.0, 0.0]);
    }

    #[test]
    fn v2m_two_way_enumeration() {
        let f = array![[1.0, 0.0], [0.0, 1.0]];
        let c = array![[0.0, 1.0], [1.0, 0.0]];
        // sims: f0.c0 = 0, f0.c1 = 1, f1.c0 = 1, f1.c1 = 0
        let row = -(0f64.exp() / (0f64.exp() + 1f64.exp())).ln();
        let expected = row;
        assert!((loss_v2m(&f, &c, 1.0).unwrap() - expected).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = randt(3, 4, &mut rng);
        let c = randt(3, 4, &mut rng);
        let tau = 0.2;
        let s = |i: usize, j: usize| cos(&f.row(i).to_vec(), &c.row(j).to_vec()) / tau;
        let mut total = 0.0;
        for i in 0..3 {
            let zr: f64 = (0..3).map(|j| s(i, j).exp()).sum();
            let zc: f64 = (0..3).map(|j| s(j, i).exp()).sum();
            total -= (s(i, i).exp() / zr).ln() + (s(i, i).exp() / zc).ln();
        }
        assert!((loss_v2m(&f, &c, tau).unwrap() - total / 6.0).abs() < 1e-10);
    }

    #[test]
    fn htpl_consistency_values() {
        let same = Tensor::from_shape_fn((4, 3), |(_, c)| c as f64);
        assert_eq!(loss_htpl(&[same]), 0.0);
        let s = array![[0.0], [1.0], [2.0], [3.0]];
        // pair distances squared: 1,4,9,1,4,1 → mean 20/6
        assert!((loss_htpl(&[s]) - 20.0 / 6.0).abs() < 1e-12);
    }

    fn ones() -> LossComponents<f64> {
        LossComponents {
            v2m: Some(1.0),
            tri: Some(1.0),
            ce: Some(1.0),
            ctr: Some(1.0),
            htpl: Some(1.0),
            mvicl: Some(1.0),
        }
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert!((total_loss(&ones(), &w, Stage::Two).unwrap() - 4.3005).abs() < 1e-12);
        let zeros = LossComponents {
            v2m: Some(0.0),
            tri: Some(0.0),
            ce: Some(0.0),
            ctr: Some(0.0),
            htpl: Some(0.0),
            mvicl: Some(0.0),
        };
        assert_eq!(total_loss(&zeros, &w, Stage::Two).unwrap(), 0.0);
        assert!((total_loss(&ones(), &w, Stage::One).unwrap() - 3.0005).abs() < 1e-12);
        assert!((mvicl(0.5, 2.0, &w) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn stage_one_ignores_stage_two_terms() {
        let w = LossWeights::default();
        let c = LossComponents { tri: Some(0.5), ce: Some(2.0), ..Default::default() };
        assert!((total_loss(&c, &w, Stage::One).unwrap() - 3.0).abs() < 1e-15);
        let mut noisy = ones();
        noisy.tri = Some(0.5);
        noisy.ce = Some(2.0);
        noisy.ctr = None;
        noisy.mvicl = Some(1e9);
        noisy.htpl = Some(f64::NAN);
        assert!((total_loss(&noisy, &w, Stage::One).unwrap() - 3.0).abs() < 1e-15);
        assert!(matches!(total_loss(&c, &w, Stage::Two), Err(Error::Config(_))));
        let missing = LossComponents { ce: Some(1.0), ..Default::default() };
        assert!(matches!(total_loss(&missing, &w, Stage::One), Err(Error::Config(_))));
    }

    #[test]
    fn total_is_linear_in_weights() {
        let base = LossWeights::default();
        let c = LossComponents {
            v2m: Some(0.3),
            tri: Some(1.7),
            ce: Some(2.2),
            ctr: Some(9.0),
            htpl: Some(0.4),
            mvicl: Some(1.1),
        };
        let t0 = total_loss(&c, &base, Stage::Two).unwrap();
        let fields: [(fn(&mut LossWeights) -> &mut f64, f64); 6] = [
            (|w| &mut w.v2m, 0.3),
            (|w| &mut w.tri, 1.7),
            (|w| &mut w.ce, 2.2),
            (|w| &mut w.ctr, 9.0),
            (|w| &mut w.htpl, 0.4),
            (|w| &mut w.mvicl, 1.1),
        ];
        for (field, value) in fields {
            for sign in [0.5, -0.5] {
                let mut w = base.clone();
                let lambda = *field(&mut w);
                *field(&mut w) = lambda * (1.0 + sign);
                let t = total_loss(&c, &w, Stage::Two).unwrap();
                assert!((t - t0 - sign * lambda * value).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn compact_preset() {
        let w = LossWeights::compact();
        let c =
            LossComponents { tri: Some(1.0), ce: Some(2.0), mvicl: Some(mvicl(1.0, 3.0, &w)), ..Default::default() };
        assert!((total_loss(&c, &w, Stage::Two).unwrap() - 7.0).abs() < 1e-15);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let w = LossWeights { tau: 0.0, ..Default::default() };
        assert!(matches!(w.validate(), Err(Error::Config(_))));
        let w = LossWeights { tri: -1.0, ..Default::default() };
        assert!(matches!(w.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = randt(6, 3, &mut rng);
        let c = randt(6, 3, &mut rng);
        let ids = [0, 0, 1, 1, 2, 2];
        let views = [Aerial, Ground, Ground, Wearable, Aerial, Aerial];
        let centers = randt(3, 3, &mut rng);
        let tol = 1e-4;
        let r = check_inputs(std::slice::from_ref(&f), 1e-5, |g, v| loss_cons_var(g, v[0], &ids, &views, 0.5));
        assert!(r.max_rel_error < tol, "cons {r:?}");
        let r = check_inputs(std::slice::from_ref(&f), 1e-5, |g, v| loss_triplet_var(g, v[0], &ids, 5.0));
        assert!(r.max_rel_error < tol, "triplet {r:?}");
        let r = check_inputs(std::slice::from_ref(&f), 1e-5, |g, v| loss_ce_var(g, v[0], &ids).unwrap());
        assert!(r.max_rel_error < tol, "ce {r:?}");
        let r = check_inputs(std::slice::from_ref(&f), 1e-5, |g, v| loss_center_var(g, v[0], &ids, &centers).unwrap());
        assert!(r.max_rel_error < tol, "center {r:?}");
        let r = check_inputs(&[f.clone(), c.clone()], 1e-5, |g, v| loss_v2m_var(g, v[0], v[1], 0.3));
        assert!(r.max_rel_error < tol, "v2m {r:?}");
        let s1 = randt(4, 2, &mut rng);
        let s2 = randt(4, 2, &mut rng);
        let r = check_inputs(&[s1, s2], 1e-5, loss_htpl_var);
        assert!(r.max_rel_error < tol, "htpl {r:?}");
        let mut net = AlignNet::new(3, 4, Activation::Silu, &mut rng);
        randomize(&mut net, 0.5, &mut rng);
        let r = check_inputs(std::slice::from_ref(&f), 1e-5, |g, v| loss_align_var(g, v[0], &ids, &views, &net));
        assert!(r.max_rel_error < tol, "align {r:?}");
        let r = check_module(&mut net, 1e-5, |net, g| {
            let x = g.constant(f.clone());
            loss_align_var(g, x, &ids, &views, net)
        });
        assert!(r.max_rel_error < tol, "align params {r:?}");
    }
}
