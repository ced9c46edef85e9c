//! `cvreid`: synthetic data, two-stage training, evaluation and throughput.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use cvreid_core::config::{Altitude, Config};
use cvreid_core::data::{generate_synthetic, write_synthetic, Direction, Manifest, Split, SynthSpec, TrackletStore};
use cvreid_core::evaluation::{embed_store, evaluate_embeddings, export_embeddings, measure_throughput, MetricsReport};
use cvreid_core::model::Model;
use cvreid_core::objectives::Stage;
use cvreid_core::training::{TrainData, TrainOptions, Trainer};
use cvreid_core::types::ViewId;
use cvreid_core::Error;
use serde::Serialize;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  other error
  2  usage error (E_USAGE)
  3  invalid configuration (E_CONFIG, E_VALIDATION)
  4  file error (E_IO, E_FORMAT)
  5  precondition or protocol error (E_PRECONDITION, E_PROTOCOL)
  6  training error (E_TRAINING)";

#[derive(Parser, Debug)]
#[command(name = "cvreid", version, about = "Cross-view video person re-identification")]
struct Cli {
    /// TOML config file; its values override the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set stage1.base_lr=3e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,

    /// Built-in defaults the config file is layered on.
    #[arg(long, value_enum, default_value_t = Preset::Paper, global = true)]
    preset: Preset,

    /// Root for data, checkpoints, logs and reports.
    #[arg(long, env = "CVREID_OUT", default_value = "runs", global = true)]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Published hyperparameters (d = 768, 150 + 100 epochs).
    Paper,
    /// Desk-scale: d = 64, 32x16 frames, a few epochs.
    Toy,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cross-view set (train and test manifests).
    Synth {
        #[arg(long)]
        ids: Option<usize>,
        /// Comma-separated views.
        #[arg(long, value_delimiter = ',', value_parser = parse_view)]
        views: Option<Vec<ViewId>>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        tracklets: Option<usize>,
        /// Overwrite existing manifests.
        #[arg(long)]
        force: bool,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=2))]
        stage: u32,
        #[arg(long)]
        epochs: Option<usize>,
        /// Completed stage-1 checkpoint (required for stage 2).
        #[arg(long)]
        from_stage1: Option<PathBuf>,
        /// Continue an interrupted run of the same stage.
        #[arg(long, conflicts_with = "from_stage1")]
        resume: Option<PathBuf>,
        /// Defaults to `<out>/stage<N>.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `<out>/stage<N>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Stop after this many epochs; the checkpoint stays resumable.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on the test manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_direction)]
        direction: Option<Direction>,
        /// `all` or one of 15, 30, 80, 120 (metres).
        #[arg(long)]
        altitude: Option<Altitude>,
        #[arg(long)]
        rerank: bool,
        /// Write per-clip embeddings (JSON lines) here.
        #[arg(long)]
        export: Option<PathBuf>,
        /// Defaults to `<out>/eval_<direction>_<altitude>[_rerank].json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print the resolved configuration as JSON.
    Config,
    /// Single-clip feed-forward throughput.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        /// Defaults to `<out>/bench.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn parse_view(s: &str) -> Result<ViewId, String> {
    s.parse().map_err(|_| format!("unknown view '{s}' (valid views: aerial, ground, wearable)"))
}

fn parse_direction(s: &str) -> Result<Direction, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
        .map_err(|_| format!("unknown direction '{s}' (valid: a2g, g2a)"))
}

enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "E_USAGE",
            CliError::Core(e) => e.code(),
        }
    }

    fn exit(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::Validation(_) => 3,
                Error::Io { .. } | Error::Format(_) => 4,
                Error::Precondition(_) | Error::Protocol(_) => 5,
                Error::Training { .. } => 6,
                _ => 1,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn key_listing() -> String {
    let mut s = String::from("Config keys (paper defaults; set in --config files or with --set):\n");
    for (key, value) in Config::default().keys() {
        let _ = writeln!(s, "  {key} = {value}");
    }
    s.push('\n');
    s.push_str(EXIT_CODES);
    s
}

fn load_config(cli: &Cli) -> CliResult<Config> {
    let mut cfg = match cli.preset {
        Preset::Paper => Config::default(),
        Preset::Toy => Config::toy(),
    };
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        let value = serde_json::to_value(table).map_err(|e| Error::Config(e.to_string()))?;
        cfg = cfg.with_overrides(value)?;
    }
    for item in &cli.sets {
        let (key, value) =
            item.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got '{item}'")))?;
        cfg = cfg.set(key.trim(), value.trim())?;
    }
    Ok(cfg)
}

fn data_dir(cli: &Cli, cfg: &Config) -> PathBuf {
    cli.out.join(&cfg.data.root)
}

fn load_store(
    cli: &Cli,
    cfg: &Config,
    manifest: &str,
    model: &cvreid_core::model::ModelConfig,
) -> CliResult<TrackletStore> {
    let dir = data_dir(cli, cfg);
    let path = dir.join(manifest);
    let manifest = Manifest::read(&path)?;
    let enc = &model.encoder;
    Ok(TrackletStore::load(manifest, &dir, model.frames, enc.image_h, enc.image_w)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("plain report");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn cmd_synth(
    cli: &Cli,
    cfg: &Config,
    ids: Option<usize>,
    views: Option<Vec<ViewId>>,
    seed: Option<u64>,
    tracklets: Option<usize>,
    force: bool,
) -> CliResult<()> {
    let base = &cfg.data.synth;
    let spec = SynthSpec {
        num_ids: ids.unwrap_or(base.num_ids),
        views: views.unwrap_or_else(|| base.views.clone()),
        seed: seed.unwrap_or(base.seed),
        tracklets_per_view: tracklets.unwrap_or(base.tracklets_per_view),
        ..base.clone()
    };
    let dir = data_dir(cli, cfg);
    let targets = [(Split::Train, &cfg.data.train_manifest), (Split::Test, &cfg.data.test_manifest)];
    if !force {
        if let Some((_, name)) = targets.iter().find(|(_, name)| dir.join(name).exists()) {
            return Err(Error::Precondition(format!(
                "{} already exists; pass --force to overwrite",
                dir.join(name).display()
            ))
            .into());
        }
    }
    for (split, name) in targets {
        let synth = generate_synthetic(&SynthSpec { split, ..spec.clone() })?;
        write_synthetic(&dir, &synth, name)?;
        println!(
            "{}: {} records, {} identities -> {}",
            split.as_str(),
            synth.manifest.len(),
            synth.manifest.num_identities(),
            dir.join(name).display()
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    cli: &Cli,
    cfg: &Config,
    stage: u32,
    epochs: Option<usize>,
    from_stage1: Option<&Path>,
    resume: Option<&Path>,
    checkpoint: Option<PathBuf>,
    log: Option<PathBuf>,
    max_epochs: Option<usize>,
) -> CliResult<()> {
    let stage = Stage::from_number(stage)?;
    let mut stage_cfg = cfg.stage(stage).clone();
    if let Some(e) = epochs {
        stage_cfg.epochs = e;
        stage_cfg.milestones.retain(|&m| m < e);
        stage_cfg.warmup_epochs = stage_cfg.warmup_epochs.min(e.saturating_sub(1));
    }
    stage_cfg.validate()?;
    let trainer = match (resume, from_stage1) {
        (Some(path), _) => Trainer::load(path)?,
        (None, Some(path)) => Trainer::load(path)?,
        (None, None) if stage == Stage::Two => {
            return Err(Error::Precondition("stage 2 needs --from-stage1 <checkpoint> (or --resume)".into()).into())
        }
        (None, None) => {
            let store = load_store(cli, cfg, &cfg.data.train_manifest, &cfg.model)?;
            let model = Model::new(cfg.model.clone(), store.manifest.num_identities())?;
            let data = TrainData::new(&model, store)?;
            let identities = data.identities.clone();
            let outputs = Outputs { checkpoint, log, max_epochs };
            return run(cli, cfg, Trainer::new(model, identities)?, &data, stage, &stage_cfg, outputs);
        }
    };
    if from_stage1.is_some() && !(trainer.stage == Stage::One && trainer.stage_complete) {
        return Err(Error::Precondition("--from-stage1 checkpoint has not completed stage 1".into()).into());
    }
    let model_cfg = trainer.model.config.clone();
    let store = load_store(cli, cfg, &cfg.data.train_manifest, &model_cfg)?;
    let data = TrainData::new(&trainer.model, store)?;
    run(cli, cfg, trainer, &data, stage, &stage_cfg, Outputs { checkpoint, log, max_epochs })
}

struct Outputs {
    checkpoint: Option<PathBuf>,
    log: Option<PathBuf>,
    max_epochs: Option<usize>,
}

fn run(
    cli: &Cli,
    cfg: &Config,
    mut trainer: Trainer,
    data: &TrainData,
    stage: Stage,
    stage_cfg: &cvreid_core::training::StageConfig,
    outputs: Outputs,
) -> CliResult<()> {
    let n = stage.number();
    let checkpoint = outputs.checkpoint.unwrap_or_else(|| cli.out.join(format!("stage{n}.ckpt")));
    let log = outputs.log.unwrap_or_else(|| cli.out.join(format!("stage{n}.log.jsonl")));
    trainer.config_snapshot = serde_json::to_value(cfg).expect("config serializes");
    let opts = TrainOptions {
        log: Some(log.clone()),
        checkpoint: Some(checkpoint.clone()),
        max_epochs: outputs.max_epochs,
        ..cfg.train_options()
    };
    let records = trainer.run_stage(data, stage_cfg, &cfg.loss, &opts)?;
    for r in &records {
        println!("stage {} epoch {:>3}: loss {:.5} grad-norm {:.4}", r.stage, r.epoch, r.loss, r.grad_norm);
    }
    println!("checkpoint: {}", checkpoint.display());
    println!("log: {}", log.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    cli: &Cli,
    cfg: &Config,
    checkpoint: &Path,
    direction: Option<Direction>,
    altitude: Option<Altitude>,
    rerank: bool,
    export: Option<&Path>,
    report: Option<PathBuf>,
) -> CliResult<()> {
    let trainer = Trainer::load(checkpoint)?;
    let model = &trainer.model;
    let direction = direction.unwrap_or(cfg.eval.direction);
    let altitude = altitude.unwrap_or(cfg.eval.altitude);
    let rerank = rerank || cfg.eval.rerank;
    let params = cfg.eval.rerank_params();
    let store = load_store(cli, cfg, &cfg.data.test_manifest, &model.config)?;
    cvreid_core::data::direction_split(&store.manifest, direction, altitude.meters())?;
    let embeddings = embed_store(model, &store)?;
    if let Some(path) = export {
        export_embeddings(path, &embeddings)?;
        println!("embeddings: {}", path.display());
    }
    let metrics: MetricsReport =
        evaluate_embeddings(&store, &embeddings, direction, altitude.meters(), rerank.then_some(&params))?;
    let path = report.unwrap_or_else(|| {
        let suffix = if rerank { "_rerank" } else { "" };
        cli.out.join(format!("eval_{}_{altitude}{suffix}.json", direction.as_str()))
    });
    println!("{}", serde_json::to_string(&metrics).expect("plain report"));
    write_json(&path, &metrics)?;
    println!("report: {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct BenchReport {
    clips_per_sec: f64,
    median_latency_s: f64,
    iters: usize,
    warmup: usize,
    d: usize,
    frames: usize,
}

fn cmd_bench(
    cli: &Cli,
    cfg: &Config,
    checkpoint: &Path,
    warmup: usize,
    iters: usize,
    report: Option<PathBuf>,
) -> CliResult<()> {
    let trainer = Trainer::load(checkpoint)?;
    let model = &trainer.model;
    let store = load_store(cli, cfg, &cfg.data.test_manifest, &model.config)?;
    let view =
        store.manifest.records().first().ok_or_else(|| Error::Precondition("test manifest is empty".into()))?.view;
    let t = measure_throughput(model, store.clip(0), view, warmup, iters)?;
    let out = BenchReport {
        clips_per_sec: t.clips_per_sec,
        median_latency_s: t.median_latency_s,
        iters: t.iters,
        warmup,
        d: model.config.d(),
        frames: model.config.frames,
    };
    let path = report.unwrap_or_else(|| cli.out.join("bench.json"));
    println!("{}", serde_json::to_string(&out).expect("plain report"));
    write_json(&path, &out)?;
    println!("report: {}", path.display());
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Synth { ids, views, seed, tracklets, force } => {
            cmd_synth(&cli, &cfg, *ids, views.clone(), *seed, *tracklets, *force)
        }
        Command::Train { stage, epochs, from_stage1, resume, checkpoint, log, max_epochs } => cmd_train(
            &cli,
            &cfg,
            *stage,
            *epochs,
            from_stage1.as_deref(),
            resume.as_deref(),
            checkpoint.clone(),
            log.clone(),
            *max_epochs,
        ),
        Command::Eval { checkpoint, direction, altitude, rerank, export, report } => {
            cmd_eval(&cli, &cfg, checkpoint, *direction, *altitude, *rerank, export.as_deref(), report.clone())
        }
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
            Ok(())
        }
        Command::Bench { checkpoint, warmup, iters, report } => {
            cmd_bench(&cli, &cfg, checkpoint, *warmup, *iters, report.clone())
        }
    }
}

fn parse_args() -> CliResult<Cli> {
    let command = Cli::command().after_long_help(key_listing());
    let matches = command.try_get_matches().map_err(|e| {
        use clap::error::ErrorKind;
        if matches!(
            e.kind(),
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
        ) {
            e.exit();
        }
        let text = e.kind().as_str().map(str::to_string).unwrap_or_default();
        let rendered = e.to_string();
        let first = rendered.lines().next().unwrap_or(&text).trim_start_matches("error: ").to_string();
        CliError::Usage(first)
    })?;
    Cli::from_arg_matches(&matches).map_err(|e| CliError::Usage(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    match parse_args().and_then(dispatch) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.message().replace('\n', " "));
            ExitCode::from(e.exit())
        }
    }
}
