//! Single-file checkpoint: magic, version, JSON header, `f64` LE tensors.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{AdamW, Trainer};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::Module;
use crate::objectives::Stage;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MTFCVRID";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    identities: Vec<String>,
    stage: Stage,
    epochs_done: usize,
    stage_complete: bool,
    step: u64,
    optimizer: AdamW,
    memory_written: Vec<bool>,
    centers_seen: Vec<bool>,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

const MEMORY: &str = "state:memory";
const CENTERS: &str = "state:centers";

impl Trainer {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Tensor)> =
            self.model.state().into_iter().map(|(n, t)| (format!("param:{n}"), t)).collect();
        tensors.push((MEMORY.into(), self.model.memory.prototypes().clone()));
        tensors.push((CENTERS.into(), self.model.centers.centers.clone()));
        for (name, (m, v)) in &self.optimizer.moments {
            tensors.push((format!("adam.m:{name}"), m.clone()));
            tensors.push((format!("adam.v:{name}"), v.clone()));
        }
        let header = Header {
            model: self.model.config.clone(),
            identities: self.identities.clone(),
            stage: self.stage,
            epochs_done: self.epochs_done,
            stage_complete: self.stage_complete,
            step: self.step,
            optimizer: self.optimizer.clone(),
            memory_written: self.model.memory.written().to_vec(),
            centers_seen: self.model.centers.seen().to_vec(),
            config: self.config_snapshot.clone(),
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorEntry { name: name.clone(), rows: t.nrows(), cols: t.ncols() })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;

        // write to a sibling then rename so a crash never leaves half a file
        let tmp = path.with_extension("partial");
        let io = |e| Error::io(path, e);
        let mut out = BufWriter::new(Self::create_file(&tmp)?);
        out.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION).map_err(io)?;
        out.write_u64::<LittleEndian>(json.len() as u64).map_err(io)?;
        out.write_all(&json).map_err(io)?;
        for (_, t) in &tensors {
            for &v in t.iter() {
                out.write_f64::<LittleEndian>(v).map_err(io)?;
            }
        }
        out.flush().map_err(io)?;
        drop(out);
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let mut input = BufReader::new(File::open(path).map_err(io)?);
        let format = |m: String| Error::Format(format!("{}: {m}", path.display()));
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(|_| format("not a checkpoint".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(format("not a checkpoint".into()));
        }
        let version = input.read_u32::<LittleEndian>().map_err(io)?;
        if version != CHECKPOINT_VERSION {
            return Err(format(format!("checkpoint version {version} unsupported")));
        }
        let len = input.read_u64::<LittleEndian>().map_err(io)? as usize;
        let mut json = vec![0u8; len];
        input.read_exact(&mut json).map_err(|_| format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| format(format!("bad header: {e}")))?;
        let mut tensors: HashMap<String, Tensor> = HashMap::new();
        for entry in &header.tensors {
            let mut buf = vec![0f64; entry.rows * entry.cols];
            input
                .read_f64_into::<LittleEndian>(&mut buf)
                .map_err(|_| format(format!("truncated tensor {}", entry.name)))?;
            let t = Tensor::from_shape_vec((entry.rows, entry.cols), buf).expect("sized above");
            tensors.insert(entry.name.clone(), t);
        }

        let mut model = Model::new(header.model, header.identities.len())?;
        let mut missing = None;
        model.visit_mut("", &mut |name, p| match tensors.remove(&format!("param:{name}")) {
            Some(t) if t.dim() == p.value.dim() => p.value = t,
            _ => missing = missing.take().or(Some(name)),
        });
        if let Some(name) = missing {
            return Err(format(format!("parameter {name} missing or misshapen")));
        }
        let memory = tensors.remove(MEMORY).ok_or_else(|| format("memory bank missing".into()))?;
        model.memory.restore(memory, header.memory_written)?;
        let centers = tensors.remove(CENTERS).ok_or_else(|| format("centers missing".into()))?;
        model.centers.restore(centers, header.centers_seen)?;
        let mut optimizer = header.optimizer;
        let names: Vec<String> = tensors.keys().filter_map(|k| k.strip_prefix("adam.m:").map(str::to_string)).collect();
        for name in names {
            let m = tensors.remove(&format!("adam.m:{name}")).expect("listed");
            let v = tensors
                .remove(&format!("adam.v:{name}"))
                .ok_or_else(|| format(format!("second moment of {name} missing")))?;
            optimizer.moments.insert(name, (m, v));
        }
        Ok(Self {
            model,
            optimizer,
            identities: header.identities,
            stage: header.stage,
            epochs_done: header.epochs_done,
            stage_complete: header.stage_complete,
            step: header.step,
            config_snapshot: header.config,
        })
    }
}
