use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::DistanceMatrix;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::types::ClipDescriptor;

static RERANK_CALLS: AtomicUsize = AtomicUsize::new(0);

/// Number of [`k_reciprocal_rerank`] invocations in this process.
pub fn rerank_calls() -> usize {
    RERANK_CALLS.load(Ordering::SeqCst)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RerankParams {
    pub k1: usize,
    pub k2: usize,
    pub lambda: f64,
}

impl Default for RerankParams {
    fn default() -> Self {
        Self { k1: 20, k2: 6, lambda: 0.3 }
    }
}

impl RerankParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 > self.k2 && self.k2 >= 1) {
            return Err(Error::Config(format!("re-ranking needs k1 > k2 >= 1 (got k1={}, k2={})", self.k1, self.k2)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("re-ranking lambda {} not in [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

/// Indices of each row sorted by ascending distance, ties to the lower index.
pub(crate) fn argsort_rows(d: &Tensor) -> Vec<Vec<usize>> {
    d.rows()
        .into_iter()
        .map(|row| {
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            idx
        })
        .collect()
}

fn reciprocal(rank: &[Vec<usize>], i: usize, k: usize) -> Vec<usize> {
    rank[i][..=k].iter().copied().filter(|&c| rank[c][..=k].contains(&i)).collect()
}

/// All-pairs cosine distance over queries then gallery, each column
/// divided by its maximum.
fn joint_distances(queries: &[ClipDescriptor], gallery: &[ClipDescriptor]) -> Tensor {
    let all: Vec<&ClipDescriptor> = queries.iter().chain(gallery).collect();
    let n = all.len();
    let mut d = Tensor::from_shape_fn((n, n), |(i, j)| (1.0 - all[i].vector.dot(&all[j].vector)).max(0.0));
    for j in 0..n {
        let max = d.column(j).fold(0.0f64, |m, &v| m.max(v));
        if max > 0.0 {
            d.column_mut(j).mapv_inplace(|v| v / max);
        }
    }
    d
}

/// k-reciprocal re-ranking with Jaccard distance and local query expansion.
///
/// `dist` holds the query-gallery distances that are blended back in.
pub fn k_reciprocal_rerank(
    dist: &DistanceMatrix,
    queries: &[ClipDescriptor],
    gallery: &[ClipDescriptor],
    params: &RerankParams,
) -> Result<DistanceMatrix> {
    RERANK_CALLS.fetch_add(1, Ordering::SeqCst);
    params.validate()?;
    let (q, g) = dist.values.dim();
    if queries.len() != q || gallery.len() != g {
        return Err(Error::Shape(format!(
            "distance matrix is {q}x{g} but {} queries and {} gallery features were given",
            queries.len(),
            gallery.len()
        )));
    }
    if params.lambda == 1.0 {
        return Ok(dist.clone());
    }
    if g <= 1 {
        log::warn!("gallery of size {g}: re-ranking skipped");
        return Ok(dist.clone());
    }
    let n = q + g;
    let mut k1 = params.k1;
    let mut k2 = params.k2;
    if k1 >= n {
        k1 = n - 1;
        log::warn!("k1 = {} exceeds the {n} available neighbours; clamped to {k1}", params.k1);
    }
    k2 = k2.min(k1).max(1);

    let original = joint_distances(queries, gallery);
    let rank = argsort_rows(&original);
    let half = (k1 as f64 / 2.0).round() as usize;
    let mut v = Tensor::zeros((n, n));
    for i in 0..n {
        let base = reciprocal(&rank, i, k1);
        let mut expanded: BTreeSet<usize> = base.iter().copied().collect();
        for &c in &base {
            let cand = reciprocal(&rank, c, half);
            let shared = cand.iter().filter(|x| base.contains(x)).count();
            if shared as f64 > 2.0 / 3.0 * cand.len() as f64 {
                expanded.extend(cand);
            }
        }
        let weights: Vec<(usize, f64)> = expanded.iter().map(|&j| (j, (-original[[i, j]]).exp())).collect();
        let total: f64 = weights.iter().map(|(_, w)| w).sum();
        for (j, w) in weights {
            v[[i, j]] = w / total;
        }
    }
    if k2 > 1 {
        let mut qe = Tensor::zeros((n, n));
        for i in 0..n {
            for &j in &rank[i][..k2] {
                qe.row_mut(i).scaled_add(1.0 / k2 as f64, &v.row(j));
            }
        }
        v = qe;
    }
    // inverted index: which rows are non-zero in each column
    let postings: Vec<Vec<usize>> = (0..n).map(|c| (0..n).filter(|&r| v[[r, c]] != 0.0).collect()).collect();
    let mut out = dist.values.clone();
    for i in 0..q {
        let mut overlap = vec![0.0; n];
        for c in (0..n).filter(|&c| v[[i, c]] != 0.0) {
            for &r in &postings[c] {
                overlap[r] += v[[i, c]].min(v[[r, c]]);
            }
        }
        for j in 0..g {
            let m = overlap[q + j];
            let jaccard = 1.0 - m / (2.0 - m);
            out[[i, j]] = params.lambda * dist.values[[i, j]] + (1.0 - params.lambda) * jaccard;
        }
    }
    Ok(DistanceMatrix { values: out, metric: dist.metric })
}
