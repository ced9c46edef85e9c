#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use cvreid_core::evaluation::{DistanceMatrix, Metric};
use cvreid_core::types::{ClipDescriptor, ViewId};
use cvreid_core::Tensor;
use ndarray::Array1;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn unit(v: Vec<f64>) -> ClipDescriptor {
    let a = Array1::from(v);
    let n = a.dot(&a).sqrt();
    ClipDescriptor::new(a / n).unwrap()
}

pub fn random_units(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<ClipDescriptor> {
    (0..n).map(|_| unit((0..d).map(|_| rng.random::<f64>() - 0.5).collect())).collect()
}

pub fn matrix(values: Tensor) -> DistanceMatrix {
    DistanceMatrix { values, metric: Metric::CosineDistance }
}

/// Counting formulation: rank of item j is the number of valid items ahead of it.
pub fn brute_cmc(
    dist: &Tensor,
    q_ids: &[usize],
    g_ids: &[usize],
    q_views: &[ViewId],
    g_views: &[ViewId],
) -> (Vec<f64>, f64, usize) {
    let mut hits = [0.0; 3];
    let mut aps = Vec::new();
    for i in 0..q_ids.len() {
        let valid: Vec<usize> = (0..g_ids.len()).filter(|&j| g_views[j] != q_views[i]).collect();
        let ahead = |j: usize| {
            valid.iter().filter(|&&o| dist[[i, o]] < dist[[i, j]] || (dist[[i, o]] == dist[[i, j]] && o < j)).count()
        };
        let rel: Vec<usize> = valid.iter().copied().filter(|&j| g_ids[j] == q_ids[i]).collect();
        if rel.is_empty() {
            continue;
        }
        let best = rel.iter().map(|&j| ahead(j)).min().unwrap();
        for (h, k) in hits.iter_mut().zip([1, 5, 10]) {
            if best < k {
                *h += 1.0;
            }
        }
        let mut ap = 0.0;
        for &r in &rel {
            let pos = ahead(r) + 1;
            let rel_upto = rel.iter().filter(|&&o| ahead(o) < pos).count();
            ap += rel_upto as f64 / pos as f64;
        }
        aps.push(ap / rel.len() as f64);
    }
    let n = aps.len() as f64;
    (hits.iter().map(|h| 100.0 * h / n).collect(), 100.0 * aps.iter().sum::<f64>() / n, aps.len())
}

/// Straight transcription of the published k-reciprocal algorithm using sets
/// and the `sum(min) / sum(max)` form of the Jaccard distance.
pub fn reference_rerank(
    q: &[ClipDescriptor],
    g: &[ClipDescriptor],
    dist: &Tensor,
    k1: usize,
    k2: usize,
    lambda: f64,
) -> Tensor {
    let all: Vec<&ClipDescriptor> = q.iter().chain(g).collect();
    let n = all.len();
    let raw = |i: usize, j: usize| (1.0 - all[i].vector.dot(&all[j].vector)).max(0.0);
    let colmax: Vec<f64> = (0..n).map(|j| (0..n).map(|i| raw(i, j)).fold(0.0, f64::max)).collect();
    let od = |i: usize, j: usize| if colmax[j] > 0.0 { raw(i, j) / colmax[j] } else { 0.0 };
    let ranked = |i: usize| {
        let mut v: Vec<usize> = (0..n).collect();
        v.sort_by(|&a, &b| od(i, a).partial_cmp(&od(i, b)).unwrap().then(a.cmp(&b)));
        v
    };
    let ranks: Vec<Vec<usize>> = (0..n).map(ranked).collect();
    let krec = |i: usize, k: usize| -> BTreeSet<usize> {
        let fwd: BTreeSet<usize> = ranks[i][..k + 1].iter().copied().collect();
        fwd.into_iter().filter(|&c| ranks[c][..k + 1].contains(&i)).collect()
    };
    let half = ((k1 as f64) / 2.0).round() as usize;
    let mut vmat: Vec<BTreeMap<usize, f64>> = Vec::new();
    for i in 0..n {
        let r = krec(i, k1);
        let mut exp = r.clone();
        for &c in &r {
            let rc = krec(c, half);
            if rc.intersection(&r).count() as f64 > 2.0 / 3.0 * rc.len() as f64 {
                exp.extend(rc);
            }
        }
        let z: f64 = exp.iter().map(|&j| (-od(i, j)).exp()).sum();
        vmat.push(exp.iter().map(|&j| (j, (-od(i, j)).exp() / z)).collect());
    }
    if k2 > 1 {
        let qe: Vec<BTreeMap<usize, f64>> = (0..n)
            .map(|i| {
                let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
                for &nb in &ranks[i][..k2] {
                    for (&j, &w) in &vmat[nb] {
                        *acc.entry(j).or_default() += w / k2 as f64;
                    }
                }
                acc
            })
            .collect();
        vmat = qe;
    }
    Tensor::from_shape_fn((q.len(), g.len()), |(i, j)| {
        let (a, b) = (&vmat[i], &vmat[q.len() + j]);
        let keys: BTreeSet<usize> = a.keys().chain(b.keys()).copied().collect();
        let (mut mn, mut mx) = (0.0, 0.0);
        for k in keys {
            let (x, y) = (a.get(&k).copied().unwrap_or(0.0), b.get(&k).copied().unwrap_or(0.0));
            mn += x.min(y);
            mx += x.max(y);
        }
        lambda * dist[[i, j]] + (1.0 - lambda) * (1.0 - mn / mx)
    })
}
