use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Manifest;
use crate::error::{Error, Result};
use crate::types::ViewId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Identities per batch.
    pub p: usize,
    /// Clips per identity.
    pub k: usize,
    pub require_mixed_views: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { p: 16, k: 4, require_mixed_views: true }
    }
}

/// P identities x K clips per batch, reshuffled every epoch.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    cfg: SamplerConfig,
    seed: u64,
    /// Per eligible identity: record indices grouped by view.
    groups: Vec<BTreeMap<ViewId, Vec<usize>>>,
}

impl BatchSampler {
    pub fn new(manifest: &Manifest, cfg: SamplerConfig, seed: u64) -> Result<Self> {
        if cfg.p == 0 || cfg.k == 0 {
            return Err(Error::Config(format!("sampler needs P, K >= 1 (got P={}, K={})", cfg.p, cfg.k)));
        }
        let index = manifest.identity_index();
        let mut by_id: Vec<BTreeMap<ViewId, Vec<usize>>> = vec![BTreeMap::new(); index.len()];
        for (i, r) in manifest.records().iter().enumerate() {
            by_id[index[&r.person_id]].entry(r.view).or_default().push(i);
        }
        let mut groups = Vec::new();
        for (person, views) in index.keys().zip(by_id) {
            let clips: usize = views.values().map(Vec::len).sum();
            if clips < cfg.k {
                log::warn!("identity {person} has {clips} clips (< K = {}); skipped by the sampler", cfg.k);
                continue;
            }
            if cfg.require_mixed_views && views.len() < 2 {
                log::warn!("identity {person} is seen in a single view; its clips cannot mix views");
            }
            groups.push(views);
        }
        if groups.len() < cfg.p {
            return Err(Error::Config(format!(
                "P={} identities with K={} clips each requested, only {} identities qualify",
                cfg.p,
                cfg.k,
                groups.len()
            )));
        }
        Ok(Self { cfg, seed, groups })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn batch_size(&self) -> usize {
        self.cfg.p * self.cfg.k
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.groups.len().div_ceil(self.cfg.p)
    }

    /// Batches of record indices for one epoch. Every eligible identity
    /// appears at least once; the last batch is topped up with other ids.
    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..self.groups.len()).collect();
        order.shuffle(&mut rng);
        let mut batches = Vec::with_capacity(self.batches_per_epoch());
        for chunk in order.chunks(self.cfg.p) {
            let mut ids = chunk.to_vec();
            if ids.len() < self.cfg.p {
                let mut extra: Vec<usize> = order.iter().copied().filter(|i| !ids.contains(i)).collect();
                extra.shuffle(&mut rng);
                ids.extend(extra.into_iter().take(self.cfg.p - ids.len()));
            }
            let mut batch = Vec::with_capacity(self.batch_size());
            for id in ids {
                batch.extend(self.pick_clips(id, &mut rng));
            }
            batches.push(batch);
        }
        batches
    }

    fn pick_clips(&self, id: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let views = &self.groups[id];
        if !self.cfg.require_mixed_views || views.len() < 2 {
            let mut all: Vec<usize> = views.values().flatten().copied().collect();
            all.shuffle(rng);
            all.truncate(self.cfg.k);
            return all;
        }
        // interleave shuffled per-view lists so the first K span as many views as possible
        let mut lists: Vec<Vec<usize>> = views
            .values()
            .map(|v| {
                let mut v = v.clone();
                v.shuffle(rng);
                v
            })
            .collect();
        lists.shuffle(rng);
        let mut out = Vec::with_capacity(self.cfg.k);
        let mut depth = 0;
        while out.len() < self.cfg.k {
            for l in &lists {
                if let Some(&i) = l.get(depth) {
                    if out.len() < self.cfg.k {
                        out.push(i);
                    }
                }
            }
            depth += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Direction, Split};
    use crate::types::TrackletRecord;
    use std::collections::HashSet;

    fn manifest(ids: usize, per_view: usize, views: &[ViewId]) -> Manifest {
        let mut recs = Vec::new();
        for p in 0..ids {
            for &v in views {
                for k in 0..per_view {
                    recs.push(TrackletRecord {
                        tracklet_id: format!("p{p}-{v}-{k}"),
                        person_id: format!("p{p}"),
                        view: v,
                        altitude_m: (v == ViewId::Aerial).then_some(15),
                        frames: vec!["x".into()],
                    });
                }
            }
        }
        Manifest::new(Split::Train, Direction::A2G, recs).unwrap()
    }

    #[test]
    fn batches_have_p_times_k_clips() {
        let m = manifest(4, 2, &[ViewId::Aerial, ViewId::Ground]);
        let cfg = SamplerConfig { p: 2, k: 2, require_mixed_views: true };
        let s = BatchSampler::new(&m, cfg, 7).unwrap();
        for batch in s.epoch(0) {
            assert_eq!(batch.len(), 4);
            let persons: Vec<&str> = batch.iter().map(|&i| m.records()[i].person_id.as_str()).collect();
            let distinct: HashSet<&str> = persons.iter().copied().collect();
            assert_eq!(distinct.len(), 2);
            for pair in batch.chunks(2) {
                let r0 = &m.records()[pair[0]];
                let r1 = &m.records()[pair[1]];
                assert_eq!(r0.person_id, r1.person_id);
                assert_ne!(r0.view, r1.view);
            }
        }
    }

    #[test]
    fn single_view_identity_is_still_sampled() {
        let m = manifest(3, 3, &[ViewId::Ground]);
        let cfg = SamplerConfig { p: 3, k: 2, require_mixed_views: true };
        let s = BatchSampler::new(&m, cfg, 1).unwrap();
        let batches = s.epoch(0);
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].len(), 6);
    }

    #[test]
    fn epoch_covers_every_identity() {
        let m = manifest(11, 2, &[ViewId::Aerial, ViewId::Ground, ViewId::Wearable]);
        let cfg = SamplerConfig { p: 4, k: 3, require_mixed_views: true };
        let s = BatchSampler::new(&m, cfg, 3).unwrap();
        for epoch in 0..5 {
            let seen: HashSet<&str> =
                s.epoch(epoch).iter().flatten().map(|&i| m.records()[i].person_id.as_str()).collect();
            assert_eq!(seen.len(), 11);
        }
        assert_eq!(s.epoch(2), s.epoch(2));
        assert_ne!(s.epoch(2), s.epoch(3));
    }

    #[test]
    fn infeasible_configuration() {
        let m = manifest(2, 1, &[ViewId::Ground]);
        let cfg = SamplerConfig { p: 2, k: 2, require_mixed_views: false };
        assert!(matches!(BatchSampler::new(&m, cfg, 0), Err(Error::Config(_))));
        let cfg = SamplerConfig { p: 3, k: 1, require_mixed_views: false };
        assert!(matches!(BatchSampler::new(&m, cfg, 0), Err(Error::Config(_))));
    }
}
