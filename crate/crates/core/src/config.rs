//! Run configuration: every section with its defaults, layered overrides.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{Direction, SynthSpec};
use crate::error::{Error, Result};
use crate::evaluation::RerankParams;
use crate::model::ModelConfig;
use crate::objectives::{LossWeights, Stage};
use crate::training::{StageConfig, TrainOptions};
use crate::types::ALTITUDES_M;

/// Aerial-side altitude filter: `"all"` or metres.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "AltitudeRepr", into = "AltitudeRepr")]
pub enum Altitude {
    #[default]
    All,
    Meters(u32),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum AltitudeRepr {
    Meters(u32),
    Text(String),
}

impl TryFrom<AltitudeRepr> for Altitude {
    type Error = Error;

    fn try_from(r: AltitudeRepr) -> Result<Self> {
        match r {
            AltitudeRepr::Meters(m) => Altitude::Meters(m).checked(),
            AltitudeRepr::Text(s) => s.parse(),
        }
    }
}

impl From<Altitude> for AltitudeRepr {
    fn from(a: Altitude) -> Self {
        match a {
            Altitude::All => AltitudeRepr::Text("all".into()),
            Altitude::Meters(m) => AltitudeRepr::Meters(m),
        }
    }
}

impl Altitude {
    fn checked(self) -> Result<Self> {
        match self {
            Altitude::Meters(m) if !ALTITUDES_M.contains(&m) => {
                Err(Error::Config(format!("altitude {m} m not one of {ALTITUDES_M:?} or 'all'")))
            }
            a => Ok(a),
        }
    }

    pub fn meters(self) -> Option<u32> {
        match self {
            Altitude::All => None,
            Altitude::Meters(m) => Some(m),
        }
    }
}

impl std::str::FromStr for Altitude {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Altitude::All);
        }
        let m = s
            .trim_end_matches('m')
            .parse()
            .map_err(|_| Error::Config(format!("altitude '{s}' is neither 'all' nor metres")))?;
        Altitude::Meters(m).checked()
    }
}

impl fmt::Display for Altitude {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Altitude::All => f.write_str("all"),
            Altitude::Meters(m) => write!(f, "{m}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    /// Clips per identity in a batch.
    pub k: usize,
    pub require_mixed_views: bool,
    pub flip_prob: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { k: 4, require_mixed_views: true, flip_prob: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding manifests and payloads.
    pub root: String,
    pub train_manifest: String,
    pub test_manifest: String,
    pub synth: SynthSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: "data".into(),
            train_manifest: "train.jsonl".into(),
            test_manifest: "test.jsonl".into(),
            synth: SynthSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub direction: Direction,
    pub altitude: Altitude,
    pub rerank: bool,
    pub k1: usize,
    pub k2: usize,
    pub lambda: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let r = RerankParams::default();
        Self { direction: Direction::A2G, altitude: Altitude::All, rerank: false, k1: r.k1, k2: r.k2, lambda: r.lambda }
    }
}

impl EvalSection {
    pub fn rerank_params(&self) -> RerankParams {
        RerankParams { k1: self.k1, k2: self.k2, lambda: self.lambda }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub loss: LossWeights,
    pub sampler: SamplerSection,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
            loss: LossWeights::default(),
            sampler: SamplerSection::default(),
            data: DataSection::default(),
            eval: EvalSection::default(),
        }
    }
}

fn merge(base: &mut Value, over: Value, path: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => return Err(Error::Config(format!("unknown config key '{key}'"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn flatten(v: &Value, path: &str, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                flatten(v, &key, out);
            }
        }
        other => out.push((path.to_string(), other.to_string())),
    }
}

impl Config {
    /// Desk-scale preset: toy encoder, 10 synthetic identities, a few epochs.
    pub fn toy() -> Self {
        let d = Self::default();
        Self {
            model: ModelConfig::toy(),
            stage1: StageConfig { epochs: 8, batch_size: 16, base_lr: 3e-3, warmup_epochs: 0, ..d.stage1 },
            stage2: StageConfig { epochs: 6, batch_size: 16, base_lr: 1e-3, milestones: vec![4], ..d.stage2 },
            ..d
        }
    }

    /// Applies `overrides` (a nested object) on top of `self`; unknown keys
    /// are rejected.
    pub fn with_overrides(&self, overrides: Value) -> Result<Self> {
        let mut tree = serde_json::to_value(self).expect("config serializes");
        merge(&mut tree, overrides, "")?;
        let cfg: Config = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one dotted key, parsing `value` as JSON and falling back to a string.
    pub fn set(&self, key: &str, value: &str) -> Result<Self> {
        let parsed = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        let mut node = parsed;
        for part in key.split('.').rev() {
            let mut m = Map::new();
            m.insert(part.to_string(), node);
            node = Value::Object(m);
        }
        self.with_overrides(node)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for (name, stage, cfg) in [("stage1", Stage::One, &self.stage1), ("stage2", Stage::Two, &self.stage2)] {
            if cfg.stage != stage {
                return Err(Error::Config(format!("{name}.stage must be {}", stage.number())));
            }
            cfg.validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        self.loss.validate()?;
        self.eval.rerank_params().validate()?;
        if !(0.0..=1.0).contains(&self.sampler.flip_prob) {
            return Err(Error::Config(format!("sampler.flip_prob {} not in [0, 1]", self.sampler.flip_prob)));
        }
        Ok(())
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::One => &self.stage1,
            Stage::Two => &self.stage2,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            k: self.sampler.k,
            require_mixed_views: self.sampler.require_mixed_views,
            flip_prob: self.sampler.flip_prob,
            ..TrainOptions::default()
        }
    }

    /// Every dotted key with its value, in section order.
    pub fn keys(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        flatten(&serde_json::to_value(self).expect("config serializes"), "", &mut out);
        out
    }
}
