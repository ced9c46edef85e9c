use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn cvreid(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvreid"))
        .env("CVREID_OUT", out)
        .env("RUST_LOG", "warn")
        .arg("--preset")
        .arg("toy")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = cvreid(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(out: &Path, ids: &str) {
    ok(out, &["synth", "--ids", ids, "--views", "aerial,ground", "--seed", "42"]);
}

fn losses(stdout: &str) -> Vec<String> {
    stdout
        .lines()
        .filter(|l| l.starts_with("stage "))
        .map(|l| l.split("loss ").nth(1).unwrap().split(' ').next().unwrap().to_string())
        .collect()
}

fn metrics_line(stdout: &str) -> serde_json::Value {
    let line = stdout.lines().find(|l| l.starts_with('{')).expect("json line");
    serde_json::from_str(line).unwrap()
}

#[test]
fn synth_writes_both_splits() {
    let dir = TempDir::new().unwrap();
    let stdout = ok(dir.path(), &["synth", "--ids", "10", "--views", "aerial,ground", "--seed", "42"]);
    assert!(stdout.contains("train: 40 records, 10 identities"), "{stdout}");
    assert!(stdout.contains("test: 40 records, 10 identities"), "{stdout}");
    let train = fs::read_to_string(dir.path().join("data/train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 41);
}

#[test]
fn synth_is_seeded() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    synth(a.path(), "4");
    synth(b.path(), "4");
    for name in ["data/train.jsonl", "data/test.jsonl", "data/train_p0002_aerial_1.bin"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn synth_rejects_unknown_view() {
    let dir = TempDir::new().unwrap();
    let o = cvreid(dir.path(), &["synth", "--ids", "4", "--views", "aerial,satellite"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error[E_USAGE]"), "{err}");
    assert!(err.contains("aerial") && err.contains("ground"), "{err}");
}

#[test]
fn synth_refuses_to_overwrite() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), "4");
    let o = cvreid(dir.path(), &["synth", "--ids", "4", "--views", "aerial,ground"]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    ok(dir.path(), &["synth", "--ids", "4", "--views", "aerial,ground", "--force"]);
}

#[test]
fn stage_two_needs_a_checkpoint() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), "4");
    let o = cvreid(dir.path(), &["train", "--stage", "2"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).starts_with("error[E_PRECONDITION]"), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), "4");
    let missing = dir.path().join("nope.ckpt");
    let o = cvreid(dir.path(), &["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).starts_with("error[E_IO]"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let o = cvreid(dir.path(), &["--set", "stage1.learning_rate=0.1", "config"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("stage1.learning_rate"), "{}", stderr(&o));

    let o = cvreid(dir.path(), &["--set", "stage1.epochs=0", "config"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn help_lists_keys_and_exit_codes() {
    let dir = TempDir::new().unwrap();
    let stdout = ok(dir.path(), &["--help"]);
    for needle in ["stage1.base_lr", "stage2.milestones", "loss.v2m", "eval.rerank", "E_PRECONDITION"] {
        assert!(stdout.contains(needle), "missing {needle}");
    }
}

#[test]
fn config_layers_preset_file_set() {
    let dir = TempDir::new().unwrap();
    let toy_file = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.toml");
    let from_file = Command::new(env!("CARGO_BIN_EXE_cvreid"))
        .args(["--preset", "paper", "--config", toy_file, "config"])
        .output()
        .unwrap();
    assert!(from_file.status.success(), "{}", stderr(&from_file));
    let preset = ok(dir.path(), &["config"]);
    assert_eq!(String::from_utf8(from_file.stdout).unwrap(), preset);

    let file = dir.path().join("c.toml");
    fs::write(&file, "[stage1]\nepochs = 5\nbase_lr = 0.01\n").unwrap();
    let f = file.to_str().unwrap();
    let cfg: serde_json::Value =
        serde_json::from_str(&ok(dir.path(), &["--config", f, "--set", "stage1.epochs=2", "config"])).unwrap();
    assert_eq!(cfg["stage1"]["epochs"], 2);
    assert_eq!(cfg["stage1"]["base_lr"], 0.01);
    assert_eq!(cfg["stage1"]["batch_size"], 16);
}

#[test]
fn train_eval_bench_round_trip() {
    let dir = TempDir::new().unwrap();
    let out = dir.path();
    synth(out, "6");

    let stdout = ok(out, &["train", "--stage", "1", "--epochs", "2"]);
    assert_eq!(losses(&stdout).len(), 2);
    let ckpt = out.join("stage1.ckpt");
    assert!(ckpt.exists());
    let log = fs::read_to_string(out.join("stage1.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let c = ckpt.to_str().unwrap();

    let stdout = ok(out, &["train", "--stage", "2", "--epochs", "1", "--from-stage1", c]);
    assert_eq!(losses(&stdout).len(), 1);
    assert!(out.join("stage2.ckpt").exists());

    let plain = metrics_line(&ok(out, &["eval", "--checkpoint", c]));
    assert_eq!(plain["reranked"], false);
    assert_eq!(plain["queries"], 12);
    assert_eq!(plain, metrics_line(&ok(out, &["eval", "--checkpoint", c])));
    assert!(out.join("eval_a2g_all.json").exists());

    let reranked = metrics_line(&ok(out, &["eval", "--checkpoint", c, "--rerank", "--direction", "g2a"]));
    assert_eq!(reranked["reranked"], true);
    assert_eq!(reranked["direction"], "g2a");

    let high = metrics_line(&ok(out, &["eval", "--checkpoint", c, "--altitude", "120"]));
    assert_eq!(high["altitude"], 120);
    assert!(high["queries"].as_u64().unwrap() < 12);

    let bench = metrics_line(&ok(out, &["bench", "--checkpoint", c, "--warmup", "1", "--iters", "3"]));
    assert!(bench["clips_per_sec"].as_f64().unwrap() > 0.0);
    assert!(out.join("bench.json").exists());
}

#[test]
fn resumed_run_matches_uninterrupted() {
    let full = TempDir::new().unwrap();
    let split = TempDir::new().unwrap();
    synth(full.path(), "4");
    synth(split.path(), "4");

    let whole = losses(&ok(full.path(), &["train", "--stage", "1", "--epochs", "3"]));
    let first = losses(&ok(split.path(), &["train", "--stage", "1", "--epochs", "3", "--max-epochs", "2"]));
    let ckpt = split.path().join("stage1.ckpt");
    let rest =
        losses(&ok(split.path(), &["train", "--stage", "1", "--epochs", "3", "--resume", ckpt.to_str().unwrap()]));
    assert_eq!(first.len(), 2);
    assert_eq!([first, rest].concat(), whole);
}
