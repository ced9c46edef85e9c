//! Two-stage training: frozen-backbone adapter training, then integration
//! with selective unfreezing and per-group learning rates.

mod checkpoint;
mod optim;
mod run;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::AdamW;
pub use run::{EpochRecord, TrainData, TrainOptions, Trainer};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Module;
use crate::objectives::Stage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Linear warm-up then cosine decay to zero.
    Cosine,
    /// Step decay by `gamma` at each milestone.
    Multistep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrMultipliers {
    pub htpl: f64,
    pub mvicl: f64,
    pub classifier: f64,
}

impl Default for LrMultipliers {
    fn default() -> Self {
        Self { htpl: 0.5, mvicl: 2.0, classifier: 10.0 }
    }
}

impl LrMultipliers {
    pub fn uniform() -> Self {
        Self { htpl: 1.0, mvicl: 1.0, classifier: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    /// Clips per batch; `P = batch_size / K` identities.
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub schedule: Schedule,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub clip_max_norm: f64,
    pub lr_multipliers: LrMultipliers,
    pub weight_decay: f64,
    /// Center loss in the Stage-1 objective.
    pub center_loss: bool,
    /// Checkpoint every N epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl StageConfig {
    pub fn stage1() -> Self {
        Self {
            stage: Stage::One,
            epochs: 150,
            batch_size: 64,
            base_lr: 1e-4,
            warmup_epochs: 10,
            schedule: Schedule::Cosine,
            milestones: vec![40, 70, 90],
            gamma: 0.1,
            clip_max_norm: 1.0,
            lr_multipliers: LrMultipliers::uniform(),
            weight_decay: 5e-4,
            center_loss: false,
            checkpoint_every: 0,
            seed: 0,
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: Stage::Two,
            epochs: 100,
            batch_size: 32,
            base_lr: 5e-6,
            warmup_epochs: 0,
            schedule: Schedule::Multistep,
            lr_multipliers: LrMultipliers::default(),
            ..Self::stage1()
        }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::One => Self::stage1(),
            Stage::Two => Self::stage2(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be > 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be > 0".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be finite and >= 0", self.base_lr));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones {:?} must be strictly increasing", self.milestones));
        }
        if self.schedule == Schedule::Multistep && self.milestones.iter().any(|&m| m >= self.epochs) {
            return bad(format!("milestones {:?} must be < epochs ({})", self.milestones, self.epochs));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} not in (0, 1]", self.gamma));
        }
        if !(self.clip_max_norm > 0.0) {
            return bad(format!("clip_max_norm {} must be > 0", self.clip_max_norm));
        }
        let m = &self.lr_multipliers;
        if [m.htpl, m.mvicl, m.classifier].iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad("learning-rate multipliers must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterGroup {
    pub name: String,
    /// Dotted parameter names.
    pub members: Vec<String>,
    pub lr_multiplier: f64,
    pub trainable: bool,
}

/// 1-indexed encoder blocks trained in Stage 2: blocks 8-12, or the top
/// `ceil(5n/12)` of a shallower encoder.
pub fn unfrozen_blocks(n: usize) -> Vec<usize> {
    if n >= 12 {
        return (8..=12).collect();
    }
    let top = (5 * n).div_ceil(12);
    if n > 0 {
        log::info!("encoder has {n} blocks (< 12); stage 2 unfreezes the top {top}");
    }
    (n - top + 1..=n).collect()
}

/// Partitions every model parameter into named groups for `stage`.
pub fn select_trainable(model: &Model, stage: Stage, multipliers: &LrMultipliers) -> Vec<ParameterGroup> {
    let two = stage == Stage::Two;
    let open: Vec<usize> = if two { unfrozen_blocks(model.encoder.blocks.len()) } else { Vec::new() };
    let mut frozen_blocks = Vec::new();
    let mut open_blocks = Vec::new();
    model.encoder.visit("encoder", &mut |name, _| {
        let block: usize = name["encoder.block".len()..]
            .split('.')
            .next()
            .and_then(|b| b.parse().ok())
            .expect("encoder parameters live in numbered blocks");
        if open.contains(&block) {
            open_blocks.push(name);
        } else {
            frozen_blocks.push(name);
        }
    });
    let names = |m: &dyn Module, prefix: &str| -> Vec<String> {
        let mut out = Vec::new();
        m.visit(prefix, &mut |n, _| out.push(n));
        out
    };
    let mut adapters = names(&model.csfn, "csfn");
    adapters.extend(names(&model.mrfh, "mrfh"));
    adapters.extend(names(&model.iamm, "iamm"));
    adapters.extend(names(&model.tdm, "tdm"));
    adapters.extend(names(&model.ivfa, "ivfa"));
    let group = |name: &str, members, lr_multiplier, trainable| ParameterGroup {
        name: name.into(),
        members,
        lr_multiplier,
        trainable,
    };
    vec![
        group("encoder.frozen", frozen_blocks, 1.0, false),
        group("encoder.unfrozen", open_blocks, 1.0, true),
        group("adapters", adapters, 1.0, true),
        group("htpl", names(&model.htpl, "htpl"), multipliers.htpl, two),
        group("mvicl", names(&model.mvicl, "mvicl"), multipliers.mvicl, two),
        group("classifier", names(&model.classifier, "classifier"), multipliers.classifier, true),
    ]
}

/// Learning rate of `group` during `epoch` (0-based).
pub fn lr_at(epoch: usize, group: &ParameterGroup, cfg: &StageConfig) -> f64 {
    let base = cfg.base_lr;
    let lr = if epoch < cfg.warmup_epochs {
        base * epoch as f64 / cfg.warmup_epochs as f64
    } else {
        match cfg.schedule {
            Schedule::Cosine => {
                let span = cfg.epochs.saturating_sub(cfg.warmup_epochs).max(1) as f64;
                let progress = (epoch - cfg.warmup_epochs) as f64 / span;
                0.5 * base * (1.0 + (PI * progress).cos())
            }
            Schedule::Multistep => {
                let passed = cfg.milestones.iter().filter(|&&m| m <= epoch).count();
                base * cfg.gamma.powi(passed as i32)
            }
        }
    };
    lr * group.lr_multiplier
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [crate::Tensor], max_norm: f64, step: u64) -> Result<f64> {
    let mut sq = 0.0;
    for g in grads.iter() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training { step, message: "non-finite gradient".into() });
        }
        sq += g.iter().map(|v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    Ok(norm)
}
