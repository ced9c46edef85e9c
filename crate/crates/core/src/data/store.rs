use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;

use super::{sample_indices, Manifest};
use crate::encoder::Frame;
use crate::error::{Error, Result};
use crate::types::TrackletRecord;

/// Frame references of the form `synth:<index>` point into `<tracklet_id>.bin`.
pub const SYNTH_PREFIX: &str = "synth:";

const PAYLOAD_MAGIC: &[u8; 8] = b"CVRFRAME";
const PAYLOAD_VERSION: u32 = 1;

/// Raw frame payload: magic, version, count, height, width, then `f32` LE pixels.
pub fn write_payload(path: &Path, frames: &[Frame]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let (h, w) = frames.first().map_or((0, 0), |f| (f.height, f.width));
    if frames.iter().any(|f| f.height != h || f.width != w) {
        return Err(Error::Shape("payload frames must share one size".into()));
    }
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    out.write_all(PAYLOAD_MAGIC).map_err(io)?;
    for v in [PAYLOAD_VERSION, frames.len() as u32, h as u32, w as u32] {
        out.write_u32::<LittleEndian>(v).map_err(io)?;
    }
    for f in frames {
        for &p in &f.pixels {
            out.write_f32::<LittleEndian>(p).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

pub fn read_payload(path: &Path) -> Result<Vec<Frame>> {
    let io = |e| Error::io(path, e);
    let mut input = BufReader::new(File::open(path).map_err(io)?);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(io)?;
    if &magic != PAYLOAD_MAGIC {
        return Err(Error::Format(format!("{} is not a frame payload", path.display())));
    }
    let mut header = [0u32; 4];
    for v in &mut header {
        *v = input.read_u32::<LittleEndian>().map_err(io)?;
    }
    let [version, count, h, w] = header;
    if version != PAYLOAD_VERSION {
        return Err(Error::Format(format!("{}: payload version {version} unsupported", path.display())));
    }
    let (h, w) = (h as usize, w as usize);
    let mut frames = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut pixels = vec![0f32; h * w * 3];
        input
            .read_f32_into::<LittleEndian>(&mut pixels)
            .map_err(|e| Error::Format(format!("{}: truncated payload ({e})", path.display())))?;
        frames.push(Frame::new(h, w, pixels)?);
    }
    Ok(frames)
}

fn load_image(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|e| Error::Format(format!("cannot decode {}: {e}", path.display())))?.to_rgb8();
    let (w, h) = img.dimensions();
    let pixels = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Frame::new(h as usize, w as usize, pixels)
}

/// Loads the given frame references of one record, resized to `height x width`.
///
/// Synthetic references resolve against `<root>/<tracklet_id>.bin`, anything
/// else is an image path relative to `root`.
pub fn load_frames(
    record: &TrackletRecord,
    refs: &[String],
    root: &Path,
    height: usize,
    width: usize,
) -> Result<Vec<Frame>> {
    let mut payload: Option<Vec<Frame>> = None;
    refs.iter()
        .map(|r| {
            let frame = if let Some(idx) = r.strip_prefix(SYNTH_PREFIX) {
                let idx: usize =
                    idx.parse().map_err(|_| Error::Format(format!("bad synthetic frame reference '{r}'")))?;
                if payload.is_none() {
                    payload = Some(read_payload(&root.join(format!("{}.bin", record.tracklet_id)))?);
                }
                let frames = payload.as_ref().expect("loaded above");
                frames.get(idx).cloned().ok_or_else(|| {
                    Error::Index(format!(
                        "tracklet {} has {} payload frames, reference asks for {idx}",
                        record.tracklet_id,
                        frames.len()
                    ))
                })?
            } else {
                load_image(&root.join(r))?
            };
            Ok(frame.resize(height, width))
        })
        .collect()
}

/// Horizontally flips the whole clip with probability `p`.
pub fn augment<R: Rng + ?Sized>(frames: &[Frame], p: f64, rng: &mut R) -> Vec<Frame> {
    if rng.random::<f64>() < p {
        frames.iter().map(Frame::flip_horizontal).collect()
    } else {
        frames.to_vec()
    }
}

/// The `T` uniformly sampled frames of every record, held in memory.
#[derive(Clone, Debug)]
pub struct TrackletStore {
    pub manifest: Manifest,
    clips: Vec<Vec<Frame>>,
}

impl TrackletStore {
    pub fn load(manifest: Manifest, root: &Path, t: usize, height: usize, width: usize) -> Result<Self> {
        let clips = manifest
            .records()
            .iter()
            .map(|r| {
                let refs = super::sample_frames(r, t)?;
                load_frames(r, &refs, root, height, width)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, clips })
    }

    /// Builds a store from already decoded full tracklets (in manifest order).
    pub fn from_frames(manifest: Manifest, mut tracklets: HashMap<String, Vec<Frame>>, t: usize) -> Result<Self> {
        let clips = manifest
            .records()
            .iter()
            .map(|r| {
                let all = tracklets
                    .remove(&r.tracklet_id)
                    .ok_or_else(|| Error::Validation(format!("no frames supplied for tracklet {}", r.tracklet_id)))?;
                if all.is_empty() {
                    return Err(Error::Validation(format!("tracklet {} has no frames", r.tracklet_id)));
                }
                Ok(sample_indices(all.len(), t).into_iter().map(|i| all[i].clone()).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, clips })
    }

    pub fn clip(&self, i: usize) -> &[Frame] {
        &self.clips[i]
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}
