//! Retrieval evaluation: distances, k-reciprocal re-ranking, CMC/mAP by
//! direction and altitude, throughput and embedding export.

mod metrics;
mod rerank;

pub use metrics::{cmc_map, Cmc};
pub use rerank::{k_reciprocal_rerank, rerank_calls, RerankParams};

use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{direction_split, Direction, TrackletStore};
use crate::encoder::Frame;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::types::{normalize_descriptor, ClipDescriptor, ViewId};

const UNIT_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    CosineDistance,
    Euclidean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    /// `[Q, G]`.
    pub values: Tensor,
    pub metric: Metric,
}

/// Cosine distance `1 - <q, g>` between unit-norm descriptors.
pub fn compute_distances(queries: &[ClipDescriptor], gallery: &[ClipDescriptor]) -> Result<DistanceMatrix> {
    for (side, set) in [("query", queries), ("gallery", gallery)] {
        if let Some((i, d)) = set.iter().enumerate().find(|(_, d)| (d.norm() - 1.0).abs() > UNIT_TOL) {
            return Err(Error::Validation(format!(
                "{side} descriptor {i} has norm {:.6}, expected unit norm",
                d.norm()
            )));
        }
    }
    if let (Some(a), Some(b)) = (queries.first(), gallery.first()) {
        if a.dim() != b.dim() {
            return Err(Error::Shape(format!("query dim {} vs gallery dim {}", a.dim(), b.dim())));
        }
    }
    let values = Tensor::from_shape_fn((queries.len(), gallery.len()), |(i, j)| {
        (1.0 - queries[i].vector.dot(&gallery[j].vector)).clamp(0.0, 2.0)
    });
    Ok(DistanceMatrix { values, metric: Metric::CosineDistance })
}

/// Normalized inference descriptor of one manifest record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub tracklet_id: String,
    pub person_id: String,
    pub view: ViewId,
    pub altitude_m: Option<u32>,
    pub vector: Vec<f64>,
}

impl Embedding {
    pub fn descriptor(&self) -> Result<ClipDescriptor> {
        ClipDescriptor::new(self.vector.clone().into())
    }
}

/// Runs every clip of `store` through the model in inference mode.
pub fn embed_store(model: &Model, store: &TrackletStore) -> Result<Vec<Embedding>> {
    store
        .manifest
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let tokens = model.embed(store.clip(i))?;
            let d = normalize_descriptor(&model.describe(&tokens, r.view)?)?;
            Ok(Embedding {
                tracklet_id: r.tracklet_id.clone(),
                person_id: r.person_id.clone(),
                view: r.view,
                altitude_m: r.altitude_m,
                vector: d.vector.to_vec(),
            })
        })
        .collect()
}

/// One JSON object per line: ids, view, altitude and the descriptor.
pub fn export_embeddings(path: &Path, embeddings: &[Embedding]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for e in embeddings {
        let line = serde_json::to_string(e).expect("plain record");
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub direction: Direction,
    /// `None` means all altitudes.
    pub altitude: Option<u32>,
    pub reranked: bool,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub queries: usize,
    pub gallery: usize,
    pub gallery_identities: usize,
    pub skipped_queries: usize,
    pub clips_per_sec: Option<f64>,
}

impl MetricsReport {
    /// Rank-1 of a random ranking, in percent.
    pub fn chance_rank1(&self) -> f64 {
        100.0 / self.gallery_identities.max(1) as f64
    }
}

/// Metrics for one direction and altitude filter from precomputed embeddings
/// aligned with `store.manifest`.
pub fn evaluate_embeddings(
    store: &TrackletStore,
    embeddings: &[Embedding],
    direction: Direction,
    altitude: Option<u32>,
    rerank: Option<&RerankParams>,
) -> Result<MetricsReport> {
    if embeddings.len() != store.manifest.len() {
        return Err(Error::Shape(format!("{} embeddings for {} records", embeddings.len(), store.manifest.len())));
    }
    let (qi, gi) = direction_split(&store.manifest, direction, altitude)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| embeddings[i].descriptor()).collect::<Result<Vec<_>>>();
    let (queries, gallery) = (pick(&qi)?, pick(&gi)?);
    let mut dist = compute_distances(&queries, &gallery)?;
    if let Some(p) = rerank {
        dist = k_reciprocal_rerank(&dist, &queries, &gallery, p)?;
    }
    let ids = |idx: &[usize]| idx.iter().map(|&i| embeddings[i].person_id.as_str()).collect::<Vec<_>>();
    let views = |idx: &[usize]| idx.iter().map(|&i| embeddings[i].view).collect::<Vec<_>>();
    let cmc = cmc_map(&dist, &ids(&qi), &ids(&gi), &views(&qi), &views(&gi))?;
    let gallery_identities = ids(&gi).into_iter().collect::<std::collections::BTreeSet<_>>().len();
    Ok(MetricsReport {
        direction,
        altitude,
        reranked: rerank.is_some(),
        rank1: cmc.rank1,
        rank5: cmc.rank5,
        rank10: cmc.rank10,
        map: cmc.map,
        queries: qi.len(),
        gallery: gi.len(),
        gallery_identities,
        skipped_queries: cmc.skipped_queries,
        clips_per_sec: None,
    })
}

pub fn evaluate(
    model: &Model,
    store: &TrackletStore,
    direction: Direction,
    altitude: Option<u32>,
    rerank: Option<&RerankParams>,
) -> Result<MetricsReport> {
    // fail on an empty split before paying for the forward passes
    direction_split(&store.manifest, direction, altitude)?;
    let embeddings = embed_store(model, store)?;
    evaluate_embeddings(store, &embeddings, direction, altitude, rerank)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub clips_per_sec: f64,
    pub median_latency_s: f64,
    pub iters: usize,
}

/// Median single-clip latency of the feed-forward path (embedding through
/// pooling), inverted. Frames are already in memory; no re-ranking.
pub fn measure_throughput(
    model: &Model,
    clip: &[Frame],
    view: ViewId,
    warmup: usize,
    iters: usize,
) -> Result<Throughput> {
    if iters == 0 {
        return Err(Error::Config("throughput needs at least one timed iteration".into()));
    }
    let forward = || -> Result<ClipDescriptor> {
        let tokens = model.embed(clip)?;
        model.describe(&tokens, view)
    };
    for _ in 0..warmup {
        forward()?;
    }
    let calls = rerank_calls();
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = Instant::now();
        std::hint::black_box(forward()?);
        times.push(start.elapsed().as_secs_f64());
    }
    debug_assert_eq!(calls, rerank_calls(), "re-ranking ran inside the timed region");
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    let median = if times.len() % 2 == 0 { 0.5 * (times[mid - 1] + times[mid]) } else { times[mid] };
    Ok(Throughput { clips_per_sec: 1.0 / median.max(f64::MIN_POSITIVE), median_latency_s: median, iters })
}
