use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{clip_gradients, lr_at, select_trainable, AdamW, StageConfig};
use crate::autodiff::{Graph, ParamId, Tensor, Var};
use crate::data::{BatchSampler, SamplerConfig, TrackletStore};
use crate::error::{Error, Result};
use crate::memory::memory_update;
use crate::model::{ClipInput, MemoryMode, Model};
use crate::nn::Module;
use crate::objectives::{
    loss_align_var, loss_ce_var, loss_center_var, loss_cons_var, loss_htpl_var, loss_triplet_var, loss_v2m_var,
    mvicl_var, total_loss_var, LossComponents, LossWeights, Stage,
};
use crate::types::{ClipDescriptor, ClipTokens, ViewId};

/// Embedded training clips, with their mirrored copies for augmentation.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub identities: Vec<String>,
    pub ids: Vec<usize>,
    pub views: Vec<ViewId>,
    pub store: TrackletStore,
    tokens: Vec<ClipTokens>,
    mirrored: Vec<ClipTokens>,
}

impl TrainData {
    pub fn new(model: &Model, store: TrackletStore) -> Result<Self> {
        let index = store.manifest.identity_index();
        let identities: Vec<String> = index.keys().cloned().collect();
        let records = store.manifest.records();
        let ids = records.iter().map(|r| index[&r.person_id]).collect();
        let views = records.iter().map(|r| r.view).collect();
        let mut tokens = Vec::with_capacity(store.len());
        let mut mirrored = Vec::with_capacity(store.len());
        for i in 0..store.len() {
            let clip = store.clip(i);
            tokens.push(model.embed(clip)?);
            let flipped: Vec<_> = clip.iter().map(|f| f.flip_horizontal()).collect();
            mirrored.push(model.embed(&flipped)?);
        }
        Ok(Self { identities, ids, views, store, tokens, mirrored })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self, i: usize, mirrored: bool) -> &ClipTokens {
        if mirrored {
            &self.mirrored[i]
        } else {
            &self.tokens[i]
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    /// Clips per identity in a batch.
    pub k: usize,
    pub require_mixed_views: bool,
    /// Probability of mirroring a clip.
    pub flip_prob: f64,
    /// Line-delimited JSON epoch log, appended to.
    pub log: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Stop after this many epochs in this call (the stage stays resumable).
    pub max_epochs: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { k: 4, require_mixed_views: true, flip_prob: 0.5, log: None, checkpoint: None, max_epochs: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u32,
    pub epoch: usize,
    /// Mean total loss over the epoch's batches.
    pub loss: f64,
    pub components: BTreeMap<String, f64>,
    pub lrs: BTreeMap<String, f64>,
    /// Mean pre-clip global gradient norm.
    pub grad_norm: f64,
    pub steps: usize,
}

struct StepStats {
    loss: f64,
    components: Vec<(&'static str, f64)>,
    grad_norm: f64,
}

/// Model plus optimizer and progress; what a checkpoint holds.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    pub identities: Vec<String>,
    /// Stage in progress, or last finished.
    pub stage: Stage,
    pub epochs_done: usize,
    pub stage_complete: bool,
    pub step: u64,
    /// Free-form configuration snapshot stored with checkpoints.
    pub config_snapshot: serde_json::Value,
}

impl Trainer {
    pub fn new(model: Model, identities: Vec<String>) -> Result<Self> {
        if identities.len() != model.num_ids() {
            return Err(Error::Config(format!(
                "model classifies {} identities, training set has {}",
                model.num_ids(),
                identities.len()
            )));
        }
        Ok(Self {
            model,
            optimizer: AdamW::new(0.0),
            identities,
            stage: Stage::One,
            epochs_done: 0,
            stage_complete: false,
            step: 0,
            config_snapshot: serde_json::Value::Null,
        })
    }

    /// Runs (or resumes) one stage. Returns the records of the epochs run.
    pub fn run_stage(
        &mut self,
        data: &TrainData,
        cfg: &StageConfig,
        weights: &LossWeights,
        opts: &TrainOptions,
    ) -> Result<Vec<EpochRecord>> {
        cfg.validate()?;
        weights.validate()?;
        if data.identities != self.identities {
            return Err(Error::Precondition("training set identities differ from the model's classifier".into()));
        }
        let resuming = self.stage == cfg.stage && !self.stage_complete && self.epochs_done > 0;
        if cfg.stage == Stage::Two && !resuming && !(self.stage == Stage::One && self.stage_complete) {
            return Err(Error::Precondition("stage 2 needs a completed stage-1 checkpoint".into()));
        }
        if !resuming {
            self.stage = cfg.stage;
            self.epochs_done = 0;
            self.stage_complete = false;
            self.optimizer = AdamW::new(cfg.weight_decay);
            if cfg.stage == Stage::One && self.model.config.memory.enabled {
                self.populate_memory(data)?;
            }
        }
        if opts.k == 0 || !cfg.batch_size.is_multiple_of(opts.k) {
            return Err(Error::Config(format!("batch_size {} is not a multiple of K = {}", cfg.batch_size, opts.k)));
        }
        let sampler = BatchSampler::new(
            &data.store.manifest,
            SamplerConfig { p: cfg.batch_size / opts.k, k: opts.k, require_mixed_views: opts.require_mixed_views },
            cfg.seed ^ u64::from(cfg.stage.number()),
        )?;

        let groups = select_trainable(&self.model, cfg.stage, &cfg.lr_multipliers);
        let mut group_of: HashMap<String, usize> = HashMap::new();
        for (gi, g) in groups.iter().enumerate() {
            for m in &g.members {
                group_of.insert(m.clone(), gi);
            }
        }
        let mut frozen = HashSet::new();
        self.model.visit("", &mut |name, p| {
            if !groups[group_of[&name]].trainable {
                frozen.insert(p.id());
            }
        });

        let mut log = match &opts.log {
            Some(path) => Some(BufWriter::new(
                OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?,
            )),
            None => None,
        };
        let mut records = Vec::new();
        let end = match opts.max_epochs {
            Some(n) => (self.epochs_done + n).min(cfg.epochs),
            None => cfg.epochs,
        };
        while self.epochs_done < end {
            let epoch = self.epochs_done;
            let lrs: Vec<f64> = groups.iter().map(|g| lr_at(epoch, g, cfg)).collect();
            let param_lr: HashMap<String, f64> = group_of.iter().map(|(n, &gi)| (n.clone(), lrs[gi])).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(
                cfg.seed ^ (u64::from(cfg.stage.number()) << 32) ^ (epoch as u64).wrapping_mul(0x2545_F491_4F6C_DD1D),
            );
            let mut sums: BTreeMap<String, f64> = BTreeMap::new();
            let (mut loss, mut norm) = (0.0, 0.0);
            let batches = sampler.epoch(epoch as u64);
            for batch in &batches {
                let flips: Vec<bool> = batch.iter().map(|_| rng.random::<f64>() < opts.flip_prob).collect();
                let stats = self.train_step(data, batch, &flips, &frozen, &param_lr, cfg, weights)?;
                loss += stats.loss;
                norm += stats.grad_norm;
                for (k, v) in stats.components {
                    *sums.entry(k.to_string()).or_default() += v;
                }
            }
            let n = batches.len() as f64;
            let record = EpochRecord {
                stage: cfg.stage.number(),
                epoch,
                loss: loss / n,
                components: sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
                lrs: groups
                    .iter()
                    .zip(&lrs)
                    .filter(|(g, _)| g.trainable && !g.members.is_empty())
                    .map(|(g, &lr)| (g.name.clone(), lr))
                    .collect(),
                grad_norm: norm / n,
                steps: batches.len(),
            };
            log::info!("stage {} epoch {epoch}: loss {:.5}", record.stage, record.loss);
            if let (Some(out), Some(path)) = (log.as_mut(), opts.log.as_ref()) {
                let line = serde_json::to_string(&record).expect("plain record");
                writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
            }
            records.push(record);
            self.epochs_done += 1;
            self.stage_complete = self.epochs_done == cfg.epochs;
            if let Some(path) = &opts.checkpoint {
                let due = cfg.checkpoint_every > 0 && self.epochs_done.is_multiple_of(cfg.checkpoint_every);
                if due || self.epochs_done == end {
                    self.save(path)?;
                }
            }
        }
        if let (Some(out), Some(path)) = (log.as_mut(), opts.log.as_ref()) {
            out.flush().map_err(|e| Error::io(path, e))?;
        }
        Ok(records)
    }

    /// Writes the frozen-path query of every training clip into the bank.
    fn populate_memory(&mut self, data: &TrainData) -> Result<()> {
        let clips: Vec<_> = (0..data.len())
            .map(|i| {
                let input = ClipInput { tokens: data.tokens(i, false), view: data.views[i], id: Some(data.ids[i]) };
                (input, data.ids[i])
            })
            .collect();
        self.model.populate_memory(clips)
    }

    #[allow(clippy::too_many_arguments)]
    fn train_step(
        &mut self,
        data: &TrainData,
        batch: &[usize],
        flips: &[bool],
        frozen: &HashSet<ParamId>,
        param_lr: &HashMap<String, f64>,
        cfg: &StageConfig,
        w: &LossWeights,
    ) -> Result<StepStats> {
        let step = self.step;
        let model = &self.model;
        let ids: Vec<usize> = batch.iter().map(|&i| data.ids[i]).collect();
        let views: Vec<ViewId> = batch.iter().map(|&i| data.views[i]).collect();
        let inputs: Vec<ClipInput> = batch
            .iter()
            .zip(flips)
            .map(|(&i, &flip)| ClipInput { tokens: data.tokens(i, flip), view: data.views[i], id: Some(data.ids[i]) })
            .collect();
        let mut g = Graph::with_frozen(frozen.clone());
        let out = model.forward(&mut g, &inputs, MemoryMode::Train)?;
        let desc = out.descriptors;
        let mut named: Vec<(&'static str, Var)> = Vec::new();
        let mut c = LossComponents::<Var>::default();
        let tri = loss_triplet_var(&mut g, desc, &ids, w.margin);
        c.tri = Some(tri);
        named.push(("tri", tri));
        let ce = loss_ce_var(&mut g, out.logits, &ids)?;
        c.ce = Some(ce);
        named.push(("ce", ce));
        let two = cfg.stage == Stage::Two;
        if (two && w.ctr != 0.0) || (!two && cfg.center_loss) {
            let centers = self.centers_for(&g.value(desc).clone(), &ids);
            let ctr = loss_center_var(&mut g, desc, &ids, &centers)?;
            c.ctr = Some(ctr);
            named.push(("ctr", ctr));
        }
        if two {
            let d = model.config.d();
            let head = g.slice_cols(desc, 0, d);
            let v2m = loss_v2m_var(&mut g, head, out.contexts, w.tau);
            let htpl = loss_htpl_var(&mut g, &out.streams);
            let cons = loss_cons_var(&mut g, desc, &ids, &views, w.tau);
            let align = loss_align_var(&mut g, desc, &ids, &views, &model.mvicl);
            let mv = mvicl_var(&mut g, cons, align, w);
            c.v2m = Some(v2m);
            c.htpl = Some(htpl);
            c.mvicl = Some(mv);
            named.extend([("v2m", v2m), ("htpl", htpl), ("cons", cons), ("align", align), ("mvicl", mv)]);
        }
        let total = total_loss_var(&mut g, &c, w, cfg.stage)?;
        let loss = g.scalar_value(total);
        let components: Vec<(&'static str, f64)> = named.iter().map(|&(n, v)| (n, g.scalar_value(v))).collect();
        if !loss.is_finite() {
            let parts: Vec<String> = components.iter().map(|(n, v)| format!("{n}={v}")).collect();
            return Err(Error::Training { step, message: format!("loss diverged ({})", parts.join(", ")) });
        }
        let grads = g.backward(total);
        let mut names = Vec::new();
        let mut tensors: Vec<Tensor> = Vec::new();
        model.visit("", &mut |name, p| {
            if let Some(t) = grads.param(p) {
                names.push(name);
                tensors.push(t.clone());
            }
        });
        let grad_norm = clip_gradients(&mut tensors, cfg.clip_max_norm, step)?;
        let descriptors = g.value(desc).clone();
        let queries = g.value(out.queries).clone();
        let attended = out.attended.clone();
        drop(g);

        let grads: HashMap<String, Tensor> = names.into_iter().zip(tensors).collect();
        self.optimizer.tick();
        let opt = &mut self.optimizer;
        self.model.visit_mut("", &mut |name, p| {
            if let Some(gr) = grads.get(&name) {
                opt.update(&name, &mut p.value, gr, param_lr[&name]);
            }
        });
        if self.model.config.memory.enabled {
            for (b, (&id, &view)) in ids.iter().zip(&views).enumerate() {
                let f = ClipDescriptor::new(queries.index_axis(Axis(0), b).to_owned())?;
                let slot = self.model.memory.update_slot(id, view, attended[b]);
                memory_update(&mut self.model.memory, id, view, &f, slot)?;
            }
        }
        self.model.centers.update(&descriptors, &ids)?;
        self.step += 1;
        Ok(StepStats { loss, components, grad_norm })
    }

    /// Current centers with never-updated rows replaced by this batch's mean.
    fn centers_for(&self, features: &Tensor, ids: &[usize]) -> Tensor {
        let bank = &self.model.centers;
        let mut centers = bank.centers.clone();
        let mut fresh: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (b, &id) in ids.iter().enumerate() {
            if !bank.seen()[id] {
                fresh.entry(id).or_default().push(b);
            }
        }
        for (id, rows) in fresh {
            let mean = features.select(Axis(0), &rows).mean_axis(Axis(0)).expect("non-empty");
            centers.row_mut(id).assign(&mean);
        }
        centers
    }

    /// Forward of one clip in inference mode; convenience for callers.
    pub fn describe(&self, tokens: &ClipTokens, view: ViewId) -> Result<ClipDescriptor> {
        self.model.describe(tokens, view)
    }

    pub(crate) fn create_file(path: &std::path::Path) -> Result<File> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        File::create(path).map_err(|e| Error::io(path, e))
    }
}
