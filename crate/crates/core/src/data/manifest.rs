use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{TrackletRecord, ViewId};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
    /// Mixed-view evaluation pool, split into query/gallery by direction.
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Aerial queries against a ground/wearable gallery.
    #[default]
    A2G,
    G2A,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::A2G => "a2g",
            Direction::G2A => "g2a",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a2g" => Ok(Direction::A2G),
            "g2a" => Ok(Direction::G2A),
            other => Err(Error::Validation(format!("unknown direction '{other}' (valid: a2g, g2a)"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    manifest_version: u32,
    split: Split,
    direction: Direction,
}

/// A list of tracklets with unique ids.
///
/// On disk: one JSON header line `{manifest_version, split, direction}`
/// followed by one [`TrackletRecord`] object per line.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub split: Split,
    pub direction: Direction,
    records: Vec<TrackletRecord>,
}

impl Manifest {
    pub fn new(split: Split, direction: Direction, records: Vec<TrackletRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            r.validate()?;
            if !seen.insert(r.tracklet_id.as_str()) {
                return Err(Error::Validation(format!("duplicate tracklet id '{}'", r.tracklet_id)));
            }
        }
        Ok(Self { split, direction, records })
    }

    pub fn records(&self) -> &[TrackletRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Dense label per person id, in sorted id order.
    pub fn identity_index(&self) -> BTreeMap<String, usize> {
        let mut ids: Vec<&str> = self.records.iter().map(|r| r.person_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter().enumerate().map(|(i, p)| (p.to_string(), i)).collect()
    }

    pub fn num_identities(&self) -> usize {
        self.identity_index().len()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = Header { manifest_version: MANIFEST_VERSION, split: self.split, direction: self.direction };
        let mut write_line = |value: String| {
            w.write_all(value.as_bytes()).and_then(|_| w.write_all(b"\n")).map_err(|e| Error::io(path, e))
        };
        write_line(serde_json::to_string(&header).expect("header serializes"))?;
        for r in &self.records {
            write_line(serde_json::to_string(r).expect("record serializes"))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines().enumerate();
        let bad = |line: usize, msg: String| Error::Format(format!("{}:{}: {msg}", path.display(), line + 1));
        let (n, first) = lines.next().ok_or_else(|| bad(0, "empty manifest".into()))?;
        let first = first.map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_str(&first).map_err(|e| bad(n, format!("bad header: {e}")))?;
        if header.manifest_version != MANIFEST_VERSION {
            return Err(bad(
                n,
                format!("manifest version {} unsupported (expected {MANIFEST_VERSION})", header.manifest_version),
            ));
        }
        let mut records = Vec::new();
        for (n, line) in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| bad(n, e.to_string()))?);
        }
        Self::new(header.split, header.direction, records)
    }
}

/// `floor(i * L / T)` for `i = 0..T`.
pub fn sample_indices(available: usize, t: usize) -> Vec<usize> {
    (0..t).map(|i| i * available / t).collect()
}

pub fn sample_frames(record: &TrackletRecord, t: usize) -> Result<Vec<String>> {
    if record.frames.is_empty() {
        return Err(Error::Validation(format!("tracklet {} has no frames", record.tracklet_id)));
    }
    if t == 0 {
        return Err(Error::Config("must sample at least one frame".into()));
    }
    Ok(sample_indices(record.frames.len(), t).into_iter().map(|i| record.frames[i].clone()).collect())
}

/// Query and gallery record indices for one retrieval direction.
///
/// The altitude filter applies to the aerial side only.
pub fn direction_split(
    manifest: &Manifest,
    direction: Direction,
    altitude: Option<u32>,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let aerial_ok = |r: &TrackletRecord| altitude.is_none() || r.altitude_m == altitude;
    let mut aerial = Vec::new();
    let mut other = Vec::new();
    for (i, r) in manifest.records().iter().enumerate() {
        if r.view == ViewId::Aerial {
            if aerial_ok(r) {
                aerial.push(i);
            }
        } else {
            other.push(i);
        }
    }
    let filter = match altitude {
        Some(a) => format!("direction {direction}, altitude {a} m"),
        None => format!("direction {direction}, all altitudes"),
    };
    let (query, gallery, qname, gname) = match direction {
        Direction::A2G => (aerial, other, "aerial", "ground/wearable"),
        Direction::G2A => (other, aerial, "ground/wearable", "aerial"),
    };
    if query.is_empty() {
        return Err(Error::Protocol(format!("no {qname} queries left after filter ({filter})")));
    }
    if gallery.is_empty() {
        return Err(Error::Protocol(format!("no {gname} gallery left after filter ({filter})")));
    }
    Ok((query, gallery))
}
