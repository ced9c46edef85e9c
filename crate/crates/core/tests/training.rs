use cvreid_core::data::{generate_synthetic, SynthSpec, TrackletStore};
use cvreid_core::encoder::EncoderSpec;
use cvreid_core::model::{ClipInput, MemoryMode, Model, ModelConfig};
use cvreid_core::objectives::{LossWeights, Stage};
use cvreid_core::training::{StageConfig, TrainData, TrainOptions, Trainer};
use cvreid_core::{Error, Graph};

fn setup(ids: usize, blocks: usize) -> (Trainer, TrainData) {
    let synth = generate_synthetic(&SynthSpec { num_ids: ids, ..SynthSpec::default() }).unwrap();
    let base = ModelConfig::toy();
    let config = ModelConfig { encoder: EncoderSpec { blocks, ..base.encoder.clone() }, ..base };
    let model = Model::new(config, ids).unwrap();
    let store = TrackletStore::from_frames(synth.manifest, synth.frames, 8).unwrap();
    let data = TrainData::new(&model, store).unwrap();
    let trainer = Trainer::new(model, data.identities.clone()).unwrap();
    (trainer, data)
}

fn stage(stage: Stage, epochs: usize) -> StageConfig {
    StageConfig {
        epochs,
        batch_size: 8,
        base_lr: 1e-3,
        warmup_epochs: 0,
        milestones: vec![],
        seed: 3,
        ..StageConfig::for_stage(stage)
    }
}

fn opts() -> TrainOptions {
    TrainOptions { k: 4, ..TrainOptions::default() }
}

fn fixed_batch_descriptors(trainer: &Trainer, data: &TrainData) -> ndarray::Array2<f64> {
    let inputs: Vec<ClipInput> =
        (0..4).map(|i| ClipInput { tokens: data.tokens(i, false), view: data.views[i], id: None }).collect();
    let mut g = Graph::inference();
    let out = trainer.model.forward(&mut g, &inputs, MemoryMode::Inference).unwrap();
    g.value(out.descriptors).clone()
}

#[test]
fn seeded_runs_are_identical() {
    let w = LossWeights::default();
    let run = || {
        let (mut t, data) = setup(4, 0);
        t.run_stage(&data, &stage(Stage::One, 2), &w, &opts()).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.len(), 2);
    let la: Vec<f64> = a.iter().map(|r| r.loss).collect();
    let lb: Vec<f64> = b.iter().map(|r| r.loss).collect();
    assert_eq!(la, lb);
}

#[test]
fn stage_two_requires_stage_one() {
    let (mut t, data) = setup(4, 0);
    let err = t.run_stage(&data, &stage(Stage::Two, 1), &LossWeights::default(), &opts());
    assert!(matches!(err, Err(Error::Precondition(_))));
}

#[test]
fn stage_one_keeps_encoder_bitwise_frozen() {
    let (mut t, data) = setup(4, 3);
    let before: Vec<_> = t.model.state().into_iter().filter(|(n, _)| n.starts_with("encoder.")).collect();
    assert!(!before.is_empty());
    t.run_stage(&data, &stage(Stage::One, 1), &LossWeights::default(), &opts()).unwrap();
    let after: Vec<_> = t.model.state().into_iter().filter(|(n, _)| n.starts_with("encoder.")).collect();
    assert_eq!(before, after);
    let moved = t.model.state().into_iter().filter(|(n, _)| n.starts_with("classifier."));
    let fresh = setup(4, 3).0.model.state().into_iter().filter(|(n, _)| n.starts_with("classifier."));
    assert!(moved.zip(fresh).any(|(a, b)| a != b));
}

#[test]
fn stage_one_populates_memory_first() {
    let (mut t, data) = setup(4, 0);
    assert_eq!(t.model.memory.written_count(), 0);
    let o = TrainOptions { max_epochs: Some(0), ..opts() };
    t.run_stage(&data, &stage(Stage::One, 1), &LossWeights::default(), &o).unwrap();
    // 4 ids x 2 views x 2 tracklets
    assert_eq!(t.model.memory.written_count(), 16);
    t.run_stage(&data, &stage(Stage::One, 1), &LossWeights::default(), &opts()).unwrap();
    assert!(t.model.memory.written_count() > 16);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s1.ckpt");
    let (mut t, data) = setup(4, 2);
    t.run_stage(&data, &stage(Stage::One, 1), &LossWeights::default(), &opts()).unwrap();
    t.config_snapshot = serde_json::json!({"note": "x"});
    t.save(&path).unwrap();
    let back = Trainer::load(&path).unwrap();
    assert_eq!(back.model.state(), t.model.state());
    assert_eq!(back.model.memory, t.model.memory);
    assert_eq!(back.model.centers, t.model.centers);
    assert_eq!(back.optimizer, t.optimizer);
    assert_eq!(back.optimizer.moments, t.optimizer.moments);
    assert_eq!(back.config_snapshot, t.config_snapshot);
    assert_eq!(fixed_batch_descriptors(&back, &data), fixed_batch_descriptors(&t, &data));
    std::fs::write(&path, b"nonsense").unwrap();
    assert!(matches!(Trainer::load(&path), Err(Error::Format(_))));
    assert!(matches!(Trainer::load(&dir.path().join("none")), Err(Error::Io { .. })));
}

#[test]
fn resumed_run_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("part.ckpt");
    let w = LossWeights::default();
    let cfg = stage(Stage::One, 3);
    let (mut full, data) = setup(4, 0);
    let all = full.run_stage(&data, &cfg, &w, &opts()).unwrap();

    let (mut first, _) = setup(4, 0);
    let part = TrainOptions { max_epochs: Some(2), checkpoint: Some(path.clone()), ..opts() };
    first.run_stage(&data, &cfg, &w, &part).unwrap();
    let mut resumed = Trainer::load(&path).unwrap();
    assert_eq!(resumed.epochs_done, 2);
    let rest = resumed.run_stage(&data, &cfg, &w, &opts()).unwrap();
    assert_eq!(rest.len(), 1);
    assert_eq!(rest[0].loss, all[2].loss);
    assert!(resumed.stage_complete);
}

#[test]
fn stage_two_runs_after_stage_one_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("train.jsonl");
    let w = LossWeights::default();
    let (mut t, data) = setup(4, 6);
    let o = TrainOptions { log: Some(log.clone()), ..opts() };
    t.run_stage(&data, &stage(Stage::One, 2), &w, &o).unwrap();
    let before: Vec<_> = t.model.state().into_iter().filter(|(n, _)| n.starts_with("encoder.block1.")).collect();
    let recs = t.run_stage(&data, &stage(Stage::Two, 2), &w, &o).unwrap();
    assert!(recs.iter().all(|r| r.loss.is_finite()));
    assert!(["v2m", "htpl", "mvicl"].iter().all(|k| recs[0].components.contains_key(*k)));
    assert!(recs[0].lrs.contains_key("encoder.unfrozen"));
    let after: Vec<_> = t.model.state().into_iter().filter(|(n, _)| n.starts_with("encoder.block1.")).collect();
    assert_eq!(before, after);
    let lines = std::fs::read_to_string(&log).unwrap();
    assert_eq!(lines.lines().count(), 4);
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert_eq!(first["stage"], 1);
    assert!(first["grad_norm"].as_f64().unwrap() > 0.0);
}
