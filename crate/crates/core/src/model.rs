//! The full adapter chain around the frame encoder.
//!
//! `tokens -> CSFN -> MRFH -> IAMM -> (TDM || HTPL) -> IVFA -> pool`, plus the
//! identity classifier and the MVICL alignment head used by the losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::IvfaParams;
use crate::autodiff::{Graph, Tensor, Var};
use crate::encoder::{EncoderSpec, Frame, FrameEncoder, ToyEncoder};
use crate::error::{Error, Result};
use crate::memory::{memory_retrieve_var, retrieve_top_k, GateParams, InitMode, MemoryBank};
use crate::nn::{join, Activation, Linear, Module};
use crate::objectives::{AlignNet, CenterBank};
use crate::temporal::{HtplInjection, HtplParams, TdmParams};
use crate::types::{ClipDescriptor, ClipTokens, ClipVar, ViewId};
use crate::view_scale::{CsfnParams, MrfhParams};
use crate::Param;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    pub enabled: bool,
    /// Prototypes per (identity, view).
    pub slots: usize,
    pub momentum: f64,
    pub init: InitMode,
    /// Prototypes attended at inference.
    pub top_k: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self { enabled: true, slots: 3, momentum: 0.2, init: InitMode::FirstWrite, top_k: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderSpec,
    /// Frames per clip.
    pub frames: usize,
    pub activation: Activation,
    pub csfn_hidden: usize,
    pub mrfh_hidden: usize,
    pub tdm_motion_hidden: usize,
    pub tdm_gate_hidden: usize,
    pub htpl_proj: usize,
    pub htpl_hidden: usize,
    pub htpl_injection: HtplInjection,
    pub ivfa_summaries: usize,
    pub ivfa_attn_width: usize,
    pub ivfa_diffusion_hidden: usize,
    pub align_hidden: usize,
    pub memory: MemoryConfig,
    pub center_momentum: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderSpec::default(),
            frames: 8,
            activation: Activation::Silu,
            csfn_hidden: 48,
            mrfh_hidden: 75,
            tdm_motion_hidden: 64,
            tdm_gate_hidden: 96,
            htpl_proj: 48,
            htpl_hidden: 108,
            htpl_injection: HtplInjection::ResidualOnTokens,
            ivfa_summaries: 4,
            ivfa_attn_width: 48,
            ivfa_diffusion_hidden: 48,
            align_hidden: 110,
            memory: MemoryConfig::default(),
            center_momentum: 0.5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset: d = 64, 32x16 frames, 8x8 patches.
    pub fn toy() -> Self {
        Self {
            encoder: EncoderSpec { patch_size: 8, image_h: 32, image_w: 16, d: 64, ..EncoderSpec::default() },
            ..Self::default()
        }
    }

    pub fn d(&self) -> usize {
        self.encoder.d
    }

    pub fn descriptor_dim(&self) -> usize {
        match self.htpl_injection {
            HtplInjection::ResidualOnTokens => self.d(),
            HtplInjection::ConcatToDescriptor => 2 * self.d(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let widths = [
            ("frames", self.frames),
            ("csfn_hidden", self.csfn_hidden),
            ("mrfh_hidden", self.mrfh_hidden),
            ("tdm_motion_hidden", self.tdm_motion_hidden),
            ("tdm_gate_hidden", self.tdm_gate_hidden),
            ("htpl_proj", self.htpl_proj),
            ("htpl_hidden", self.htpl_hidden),
            ("ivfa_summaries", self.ivfa_summaries),
            ("ivfa_attn_width", self.ivfa_attn_width),
            ("ivfa_diffusion_hidden", self.ivfa_diffusion_hidden),
            ("align_hidden", self.align_hidden),
            ("memory.slots", self.memory.slots),
            ("memory.top_k", self.memory.top_k),
        ];
        for (name, v) in widths {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Per-module learnable parameter deltas (in millions) at d = 768.
pub const TABLE3_BUDGET_M: [(&str, f64); 7] =
    [("csfn", 0.22), ("mrfh", 0.35), ("iamm", 0.46), ("tdm", 0.32), ("ivfa", 0.32), ("htpl", 0.25), ("mvicl", 0.17)];

/// Modules held to ±30% of their budget.
pub const BUDGET_CHECKED: [&str; 6] = ["csfn", "mrfh", "tdm", "ivfa", "htpl", "mvicl"];

pub const MAX_ADAPTER_PARAMS: usize = 2_500_000;

/// Where a clip's IAMM context comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryMode {
    /// Attend over the clip's own (identity, view) slice.
    Train,
    /// Label-blind top-k over the whole bank.
    Inference,
    /// Skip IAMM.
    Off,
}

/// One clip of a forward batch.
#[derive(Clone, Copy, Debug)]
pub struct ClipInput<'a> {
    pub tokens: &'a ClipTokens,
    pub view: ViewId,
    /// Dense identity label; required in [`MemoryMode::Train`].
    pub id: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Pooled clip descriptors `[B, D]`.
    pub descriptors: Var,
    /// IAMM queries (pooled tokens entering IAMM), `[B, d]`.
    pub queries: Var,
    /// Retrieved memory contexts `[B, d]`.
    pub contexts: Var,
    /// Per clip `[4, p]` projected stream means.
    pub streams: Vec<Var>,
    pub logits: Var,
    /// Most attended slot per clip (training retrieval only).
    pub attended: Vec<Option<usize>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: ToyEncoder,
    pub csfn: CsfnParams,
    pub mrfh: MrfhParams,
    pub iamm: GateParams,
    pub tdm: TdmParams,
    pub htpl: HtplParams,
    pub ivfa: IvfaParams,
    pub mvicl: AlignNet,
    pub classifier: Linear,
    pub memory: MemoryBank,
    pub centers: CenterBank,
}

/// Learnable parameter count per adapter module.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub modules: Vec<(String, usize)>,
    pub total: usize,
}

impl Model {
    pub fn new(config: ModelConfig, num_ids: usize) -> Result<Self> {
        config.validate()?;
        if num_ids == 0 {
            return Err(Error::Config("model needs at least one identity".into()));
        }
        let d = config.d();
        let act = config.activation;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = ToyEncoder::new(config.encoder.clone())?;
        let csfn = CsfnParams::new(d, config.csfn_hidden, act, &mut rng);
        let mrfh = MrfhParams::new(d, config.mrfh_hidden, act, &mut rng);
        let iamm = GateParams::new(d, &mut rng);
        let tdm = TdmParams::new(d, config.tdm_motion_hidden, config.tdm_gate_hidden, act, &mut rng);
        let htpl = HtplParams::new(d, config.htpl_proj, config.htpl_hidden, act, config.htpl_injection, &mut rng);
        let ivfa = IvfaParams::new(
            d,
            config.ivfa_summaries,
            config.ivfa_attn_width,
            config.ivfa_diffusion_hidden,
            act,
            &mut rng,
        )?;
        let mvicl = AlignNet::new(config.descriptor_dim(), config.align_hidden, act, &mut rng);
        let classifier = Linear::new(config.descriptor_dim(), num_ids, true, &mut rng);
        let memory = MemoryBank::new(num_ids, config.memory.slots, d, config.memory.momentum, config.memory.init)?;
        let centers = CenterBank::new(num_ids, config.descriptor_dim(), config.center_momentum)?;
        let model = Self { config, encoder, csfn, mrfh, iamm, tdm, htpl, ivfa, mvicl, classifier, memory, centers };
        if model.config.d() == 768 {
            model.check_budget()?;
        }
        Ok(model)
    }

    pub fn num_ids(&self) -> usize {
        self.classifier.output_dim()
    }

    pub fn budget(&self) -> BudgetReport {
        let modules: Vec<(String, usize)> = vec![
            ("csfn".into(), self.csfn.num_params()),
            ("mrfh".into(), self.mrfh.num_params()),
            ("iamm".into(), self.iamm.num_params()),
            ("tdm".into(), self.tdm.num_params()),
            ("ivfa".into(), self.ivfa.num_params()),
            ("htpl".into(), self.htpl.num_params()),
            ("mvicl".into(), self.mvicl.num_params()),
        ];
        let total = modules.iter().map(|(_, n)| n).sum();
        BudgetReport { modules, total }
    }

    /// Total adapter parameters within 2.5M and each checked module within
    /// ±30% of its budget.
    pub fn check_budget(&self) -> Result<()> {
        let report = self.budget();
        if report.total > MAX_ADAPTER_PARAMS {
            return Err(Error::Config(format!(
                "adapters hold {} parameters, budget is {MAX_ADAPTER_PARAMS}",
                report.total
            )));
        }
        for (name, count) in &report.modules {
            if !BUDGET_CHECKED.contains(&name.as_str()) {
                continue;
            }
            let target = TABLE3_BUDGET_M.iter().find(|(n, _)| n == name).expect("listed").1 * 1e6;
            let ratio = *count as f64 / target;
            if !(0.7..=1.3).contains(&ratio) {
                return Err(Error::Config(format!(
                    "{name} holds {count} parameters, {:.0}% of its {target:.0} budget",
                    ratio * 100.0
                )));
            }
        }
        Ok(())
    }

    /// Patch embedding of a clip; fixed, so callers may cache it.
    pub fn embed(&self, frames: &[Frame]) -> Result<ClipTokens> {
        if frames.len() != self.config.frames {
            return Err(Error::Shape(format!(
                "clip has {} frames, model expects {}",
                frames.len(),
                self.config.frames
            )));
        }
        self.encoder.embed(frames)
    }

    /// Encoder blocks, CSFN and MRFH.
    fn front(&self, g: &mut Graph, tokens: &ClipTokens, view: ViewId) -> ClipVar {
        let clip = tokens.to_var(g);
        let clip = self.encoder.blocks_forward(g, clip);
        let clip = self.csfn.forward(g, clip, view);
        self.mrfh.forward(g, clip)
    }

    /// Pooled descriptor entering IAMM; also what the memory bank stores.
    pub fn memory_query(&self, tokens: &ClipTokens, view: ViewId) -> Result<ClipDescriptor> {
        self.check_tokens(tokens)?;
        let mut g = Graph::inference();
        let clip = self.front(&mut g, tokens, view);
        let f = g.mean_rows(clip.var);
        ClipDescriptor::new(g.value(f).row(0).to_owned())
    }

    fn check_tokens(&self, tokens: &ClipTokens) -> Result<()> {
        let expected = (self.config.frames, self.config.encoder.tokens_per_frame(), self.config.d());
        if tokens.shape() != expected {
            return Err(Error::Shape(format!("clip tokens are {:?}, model expects {expected:?}", tokens.shape())));
        }
        Ok(())
    }

    /// Runs the chain on a batch. IVFA exchanges context inside the batch only.
    pub fn forward(&self, g: &mut Graph, batch: &[ClipInput<'_>], mode: MemoryMode) -> Result<ForwardOutput> {
        if batch.is_empty() {
            return Err(Error::Precondition("empty forward batch".into()));
        }
        let mut queries = Vec::with_capacity(batch.len());
        let mut contexts = Vec::with_capacity(batch.len());
        let mut attended = Vec::with_capacity(batch.len());
        let mut mid = Vec::with_capacity(batch.len());
        let mut fused_frames = Vec::with_capacity(batch.len());
        let mut streams = Vec::with_capacity(batch.len());
        let temperature = (self.config.d() as f64).sqrt();
        for clip in batch {
            self.check_tokens(clip.tokens)?;
            let a = self.front(g, clip.tokens, clip.view);
            let f = g.mean_rows(a.var);
            let (context, slot) = match mode {
                MemoryMode::Off => (None, None),
                _ if !self.config.memory.enabled => (None, None),
                MemoryMode::Train => {
                    let id = clip
                        .id
                        .ok_or_else(|| Error::Precondition("training retrieval needs identity labels".into()))?;
                    let (live, slice) = self.memory.attention_slice(id, clip.view)?;
                    if live.is_empty() {
                        (None, None)
                    } else {
                        let (c, _, best) = memory_retrieve_var(g, f, &slice, temperature);
                        (Some(c), Some(live[best]))
                    }
                }
                MemoryMode::Inference => {
                    let desc = ClipDescriptor::new(g.value(f).row(0).to_owned())?;
                    let r = retrieve_top_k(&desc, &self.memory, self.config.memory.top_k, temperature)?;
                    (Some(g.constant(r.context.insert_axis(ndarray::Axis(0)))), None)
                }
            };
            let a = match context {
                Some(c) => {
                    let (f_hat, _) = self.iamm.forward(g, f, c);
                    let shift = g.sub(f_hat, f);
                    a.with_var(g.add(a.var, shift))
                }
                None => a,
            };
            let temporal = self.tdm.forward(g, a);
            let h = self.htpl.forward(g, a);
            let extra = g.sub(h.tokens.var, a.var);
            mid.push((temporal.with_var(g.add(temporal.var, extra)), clip.view));
            fused_frames.push(h.fused);
            streams.push(h.streams);
            queries.push(f);
            contexts.push(context.unwrap_or(f));
            attended.push(slot);
        }
        let aligned = self.ivfa.forward_batch(g, &mid);
        let mut descriptors = Vec::with_capacity(batch.len());
        for (clip, fused) in aligned.iter().zip(fused_frames) {
            let pooled = g.mean_rows(clip.var);
            descriptors.push(match self.config.htpl_injection {
                HtplInjection::ResidualOnTokens => pooled,
                HtplInjection::ConcatToDescriptor => {
                    let extra = g.mean_rows(fused);
                    g.concat_cols(&[pooled, extra])
                }
            });
        }
        let descriptors = g.concat_rows(&descriptors);
        let logits = self.classifier.forward(g, descriptors);
        Ok(ForwardOutput {
            descriptors,
            queries: g.concat_rows(&queries),
            contexts: g.concat_rows(&contexts),
            streams,
            logits,
            attended,
        })
    }

    /// Inference descriptor of one clip: label-blind memory, no batch context.
    pub fn describe(&self, tokens: &ClipTokens, view: ViewId) -> Result<ClipDescriptor> {
        let mut g = Graph::inference();
        let mode = if self.config.memory.enabled && self.memory.written_count() > 0 {
            MemoryMode::Inference
        } else if self.config.memory.enabled && self.config.memory.init == InitMode::FirstWrite {
            return Err(Error::Precondition("memory bank is empty; populate it (stage 1) before inference".into()));
        } else {
            MemoryMode::Inference
        };
        let out = self.forward(&mut g, &[ClipInput { tokens, view, id: None }], mode)?;
        ClipDescriptor::new(g.value(out.descriptors).row(0).to_owned())
    }

    /// Writes the IAMM query of every clip into its (identity, view) slice.
    pub fn populate_memory<'a>(&mut self, clips: impl IntoIterator<Item = (ClipInput<'a>, usize)>) -> Result<()> {
        for (clip, id) in clips {
            let f = self.memory_query(clip.tokens, clip.view)?;
            let slot = self.memory.update_slot(id, clip.view, None);
            crate::memory::memory_update(&mut self.memory, id, clip.view, &f, slot)?;
        }
        Ok(())
    }

    /// Parameter tensors by name, in visiting order.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        self.named_params("")
    }
}

impl Module for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.csfn.visit(&join(prefix, "csfn"), f);
        self.mrfh.visit(&join(prefix, "mrfh"), f);
        self.iamm.visit(&join(prefix, "iamm"), f);
        self.tdm.visit(&join(prefix, "tdm"), f);
        self.htpl.visit(&join(prefix, "htpl"), f);
        self.ivfa.visit(&join(prefix, "ivfa"), f);
        self.mvicl.visit(&join(prefix, "mvicl"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.csfn.visit_mut(&join(prefix, "csfn"), f);
        self.mrfh.visit_mut(&join(prefix, "mrfh"), f);
        self.iamm.visit_mut(&join(prefix, "iamm"), f);
        self.tdm.visit_mut(&join(prefix, "tdm"), f);
        self.htpl.visit_mut(&join(prefix, "htpl"), f);
        self.ivfa.visit_mut(&join(prefix, "ivfa"), f);
        self.mvicl.visit_mut(&join(prefix, "mvicl"), f);
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}
