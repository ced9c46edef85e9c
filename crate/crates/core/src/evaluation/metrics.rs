use serde::{Deserialize, Serialize};

use super::DistanceMatrix;
use crate::error::{Error, Result};
use crate::types::ViewId;

/// Ranking metrics in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cmc {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    /// Queries with at least one valid match.
    pub valid_queries: usize,
    /// Queries without one; left out of every metric.
    pub skipped_queries: usize,
}

/// CMC and mAP under the cross-view protocol: for each query, gallery
/// entries from the query's own view are ignored.
pub fn cmc_map<T: PartialEq>(
    dist: &DistanceMatrix,
    q_ids: &[T],
    g_ids: &[T],
    q_views: &[ViewId],
    g_views: &[ViewId],
) -> Result<Cmc> {
    let (q, g) = dist.values.dim();
    if q_ids.len() != q || q_views.len() != q || g_ids.len() != g || g_views.len() != g {
        return Err(Error::Shape(format!(
            "{q}x{g} distances with {}/{} query and {}/{} gallery labels",
            q_ids.len(),
            q_views.len(),
            g_ids.len(),
            g_views.len()
        )));
    }
    let mut hits = [0usize; 3];
    let mut ap_sum = 0.0;
    let mut valid = 0;
    for i in 0..q {
        let row = dist.values.row(i);
        let mut order: Vec<usize> = (0..g).filter(|&j| g_views[j] != q_views[i]).collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let relevant: Vec<bool> = order.iter().map(|&j| g_ids[j] == q_ids[i]).collect();
        let n_rel = relevant.iter().filter(|&&r| r).count();
        if n_rel == 0 {
            continue;
        }
        valid += 1;
        let first = relevant.iter().position(|&r| r).expect("has a match");
        for (h, k) in hits.iter_mut().zip([1, 5, 10]) {
            if first < k {
                *h += 1;
            }
        }
        let mut found = 0;
        let mut ap = 0.0;
        for (rank, _) in relevant.iter().enumerate().filter(|(_, &r)| r) {
            found += 1;
            ap += found as f64 / (rank + 1) as f64;
        }
        ap_sum += ap / n_rel as f64;
    }
    if q - valid > 0 {
        log::warn!("{} of {q} queries have no cross-view match and are excluded", q - valid);
    }
    let pct = |x: f64| if valid == 0 { 0.0 } else { 100.0 * x / valid as f64 };
    Ok(Cmc {
        rank1: pct(hits[0] as f64),
        rank5: pct(hits[1] as f64),
        rank10: pct(hits[2] as f64),
        map: pct(ap_sum),
        valid_queries: valid,
        skipped_queries: q - valid,
    })
}
