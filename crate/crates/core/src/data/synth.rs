use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_payload, Direction, Manifest, Split, SYNTH_PREFIX};
use crate::encoder::Frame;
use crate::error::{Error, Result};
use crate::types::{TrackletRecord, ViewId, ALTITUDES_M};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_ids: usize,
    pub views: Vec<ViewId>,
    /// Altitudes cycled over aerial tracklets.
    pub altitudes: Vec<u32>,
    pub tracklets_per_view: usize,
    pub frames_per_tracklet: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// Fixes identity appearance.
    pub seed: u64,
    /// Tracklet nuisance is drawn per split, so a `test` set shows the same
    /// people in new tracklets.
    pub split: Split,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_ids: 10,
            views: vec![ViewId::Aerial, ViewId::Ground],
            altitudes: ALTITUDES_M.to_vec(),
            tracklets_per_view: 2,
            frames_per_tracklet: 12,
            image_h: 32,
            image_w: 16,
            seed: 0,
            split: Split::Train,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_ids == 0 || self.tracklets_per_view == 0 || self.frames_per_tracklet == 0 {
            return Err(Error::Config("synthetic ids, tracklets and frames must be >= 1".into()));
        }
        if self.views.is_empty() {
            return Err(Error::Config("synthetic set needs at least one view".into()));
        }
        if self.image_h < 8 || self.image_w < 8 {
            return Err(Error::Config(format!(
                "synthetic frames must be at least 8x8, got {}x{}",
                self.image_h, self.image_w
            )));
        }
        if self.views.contains(&ViewId::Aerial) {
            if self.altitudes.is_empty() {
                return Err(Error::Config("aerial view requested without altitudes".into()));
            }
            if let Some(a) = self.altitudes.iter().find(|a| !ALTITUDES_M.contains(a)) {
                return Err(Error::Config(format!("altitude {a} m not in {ALTITUDES_M:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Synthetic {
    pub manifest: Manifest,
    /// Full tracklets keyed by tracklet id.
    pub frames: HashMap<String, Vec<Frame>>,
}

fn mix(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h = 0x243F_6A88_85A3_08D3u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

struct Identity {
    top: [f32; 3],
    bottom: [f32; 3],
    stripes: f32,
    stripe_phase: f32,
    gait_freq: f32,
    gait_phase: f32,
    width: f32,
}

impl Identity {
    fn new(seed: u64, id: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, id as u64, 1]));
        let mut color = || [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)];
        let top = color();
        let bottom = color();
        Self {
            top,
            bottom,
            stripes: rng.random_range(1.0..4.0),
            stripe_phase: rng.random_range(0.0..std::f32::consts::TAU),
            gait_freq: rng.random_range(0.4..1.6),
            gait_phase: rng.random_range(0.0..std::f32::consts::TAU),
            width: rng.random_range(0.45..0.7),
        }
    }
}

struct Nuisance {
    background: f32,
    brightness: f32,
    offset: f32,
    shift: i32,
    rng: ChaCha8Rng,
}

fn render(person: &Identity, n: &mut Nuisance, phase: f32, h: usize, w: usize) -> Frame {
    let mut frame = Frame::zeros(h, w);
    let center = w as f32 / 2.0 + n.shift as f32;
    let half = person.width * w as f32 / 2.0;
    let gait = (person.gait_freq * (phase + n.offset) + person.gait_phase).sin();
    let (top, bottom) = (2, h - 2);
    let waist = h / 2;
    for y in 0..h {
        for x in 0..w {
            let xf = x as f32 + 0.5;
            let mut px = [n.background; 3];
            if (top..bottom).contains(&y) && (xf - center).abs() <= half {
                if y < waist {
                    let stripe = 0.15
                        * (std::f32::consts::TAU * person.stripes * y as f32 / h as f32 + person.stripe_phase).sin();
                    px = person.top.map(|c| c + stripe);
                } else {
                    // legs spread and brighten with the gait cycle
                    let spread = half * (0.25 + 0.2 * gait);
                    let gap = (xf - center).abs() < spread * (y - waist) as f32 / (bottom - waist) as f32;
                    px = if gap { [n.background; 3] } else { person.bottom.map(|c| c + 0.1 * gait) };
                }
            }
            for c in 0..3 {
                let noise: f32 = n.rng.random_range(-0.03..0.03);
                frame.set(y, x, c, px[c] + n.brightness + noise);
            }
        }
    }
    frame
}

fn view_transform(frame: Frame, view: ViewId, altitude: Option<u32>, rng: &mut ChaCha8Rng) -> Frame {
    let (h, w) = (frame.height, frame.width);
    let mut out = match view {
        ViewId::Ground => frame,
        ViewId::Aerial => {
            let a = altitude.unwrap_or(30) as f32;
            let scale = 1.0 / (1.0 + a / 40.0);
            let sh = ((h as f32 * scale).round() as usize).max(2);
            let sw = ((w as f32 * scale).round() as usize).max(2);
            let mut f = frame.resize(sh, sw).resize(h, w);
            let cool = a / 120.0;
            for y in 0..h {
                for x in 0..w {
                    f.set(y, x, 0, f.get(y, x, 0) - 0.08 * cool);
                    f.set(y, x, 2, f.get(y, x, 2) + 0.12 * cool);
                }
            }
            f
        }
        ViewId::Wearable => {
            let dy: i32 = rng.random_range(-2..=2);
            let dx: i32 = rng.random_range(-2..=2);
            let mut f = Frame::zeros(h, w);
            for y in 0..h {
                for x in 0..w {
                    let sy = (y as i32 + dy).clamp(0, h as i32 - 1) as usize;
                    let sx = (x as i32 + dx).clamp(0, w as i32 - 1) as usize;
                    for c in 0..3 {
                        let warm = if c == 0 { 0.05 } else { 0.0 };
                        f.set(y, x, c, frame.get(sy, sx, c) + warm);
                    }
                }
            }
            f
        }
    };
    for p in &mut out.pixels {
        *p = p.clamp(0.0, 1.0);
    }
    out
}

/// Deterministic cross-view tracklets for `spec`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Synthetic> {
    spec.validate()?;
    let split_code = spec.split as u64 + 11;
    let mut records = Vec::new();
    let mut frames = HashMap::new();
    for id in 0..spec.num_ids {
        let person = Identity::new(spec.seed, id);
        for &view in &spec.views {
            for k in 0..spec.tracklets_per_view {
                let altitude = (view == ViewId::Aerial).then(|| spec.altitudes[(id + k) % spec.altitudes.len()]);
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix(&[spec.seed, split_code, id as u64, view.index() as u64, k as u64]));
                let mut n = Nuisance {
                    background: rng.random_range(0.3..0.6),
                    brightness: rng.random_range(-0.05..0.05),
                    offset: rng.random_range(0.0..20.0),
                    shift: rng.random_range(-1..=1),
                    rng: ChaCha8Rng::seed_from_u64(rng.random()),
                };
                let clip: Vec<Frame> = (0..spec.frames_per_tracklet)
                    .map(|f| {
                        let raw = render(&person, &mut n, f as f32, spec.image_h, spec.image_w);
                        view_transform(raw, view, altitude, &mut rng)
                    })
                    .collect();
                let tracklet_id = format!("{}_p{id:04}_{view}_{k}", spec.split);
                records.push(TrackletRecord {
                    tracklet_id: tracklet_id.clone(),
                    person_id: format!("p{id:04}"),
                    view,
                    altitude_m: altitude,
                    frames: (0..clip.len()).map(|i| format!("{SYNTH_PREFIX}{i}")).collect(),
                });
                frames.insert(tracklet_id, clip);
            }
        }
    }
    let manifest = Manifest::new(spec.split, Direction::A2G, records)?;
    Ok(Synthetic { manifest, frames })
}

/// Writes `manifest_name` and one payload per tracklet into `dir`.
pub fn write_synthetic(dir: &Path, synth: &Synthetic, manifest_name: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for r in synth.manifest.records() {
        write_payload(&dir.join(format!("{}.bin", r.tracklet_id)), &synth.frames[&r.tracklet_id])?;
    }
    synth.manifest.write(&dir.join(manifest_name))
}

/// Mean absolute 4-neighbor Laplacian response over interior pixels and channels.
pub fn laplacian_energy(frame: &Frame) -> f64 {
    let (h, w) = (frame.height, frame.width);
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            for c in 0..3 {
                let lap = 4.0 * frame.get(y, x, c)
                    - frame.get(y - 1, x, c)
                    - frame.get(y + 1, x, c)
                    - frame.get(y, x - 1, c)
                    - frame.get(y, x + 1, c);
                total += lap.abs() as f64;
                count += 1;
            }
        }
    }
    total / count.max(1) as f64
}
