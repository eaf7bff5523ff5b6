//! Command-line front end.
//!
//! A world directory holds `world.json` (the generator config and split
//! sizes), `scenes/<scan>.json` and one episode file per split
//! (`train.json`, `val.json`). A training run directory holds `loss.jsonl`,
//! `state.json` (everything needed to resume) and `checkpoint.json` (the
//! model parameters alone).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentError, Checkpoint, ModelParams};
use crate::dataset::{self, compute_stats, stats_table, DatasetError, PpDataset, SplitStats};
use crate::eval::{evaluate, Decode, EvalError, EvalProtocol, EvalReport, ProtocolMode};
use crate::graph::Scene;
use crate::io::{self, IoError};
use crate::training::{TrainConfig, TrainData, TrainError, TrainState, Trainer};
use crate::worldgen::{generate_world, vocab_size, Episode, WorldConfig, WorldError};

pub const WORLD_FILE: &str = "world.json";
pub const SCENES_DIR: &str = "scenes";
pub const LOSS_LOG: &str = "loss.jsonl";
pub const STATE_FILE: &str = "state.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<AgentError> for CliError {
    fn from(e: AgentError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<WorldError> for CliError {
    fn from(e: WorldError) -> Self {
        match e {
            WorldError::Graph(_) => CliError::Data(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "pertnav", version, about = "Perturbation-robust navigation workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes and train/val episodes
    GenWorld(GenWorldArgs),
    /// Collect deletable edges and perturbation-aware references for a split
    BuildPp(BuildPpArgs),
    /// Train an agent
    Train(TrainArgs),
    /// Evaluate a checkpoint
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenWorldArgs {
    /// Output directory
    #[arg(long, default_value = "world")]
    pub out: PathBuf,
    /// JSON world config; the flags below override its fields
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Nodes per scene
    #[arg(long)]
    pub nodes: Option<usize>,
    /// Connection radius in meters
    #[arg(long)]
    pub radius: Option<f64>,
    /// Side of the square the nodes are placed in, in meters
    #[arg(long)]
    pub extent: Option<f64>,
    /// Landmark vocabulary size
    #[arg(long)]
    pub landmarks: Option<u32>,
    /// Shortest ground-truth path, in hops
    #[arg(long)]
    pub min_hops: Option<usize>,
    /// Longest ground-truth path, in hops
    #[arg(long)]
    pub max_hops: Option<usize>,
    /// Root seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of scenes
    #[arg(long, default_value_t = 10)]
    pub scenes: usize,
    /// Training episodes
    #[arg(long, default_value_t = 200)]
    pub episodes: usize,
    /// Validation episodes
    #[arg(long, default_value_t = 50)]
    pub val_episodes: usize,
}

#[derive(Debug, Clone, Args)]
pub struct BuildPpArgs {
    /// World directory written by gen-world
    #[arg(long, conflicts_with_all = ["connectivity", "trajectories"], required_unless_present = "connectivity")]
    pub data: Option<PathBuf>,
    /// Split name; with --data the episodes are read from <data>/<split>.json
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Directory of R2R `<scan>_connectivity.json` files
    #[arg(long, requires = "trajectories")]
    pub connectivity: Option<PathBuf>,
    /// R2R trajectory file, e.g. R2R_train.json
    #[arg(long, requires = "connectivity")]
    pub trajectories: Option<PathBuf>,
    /// Output dataset file
    #[arg(long)]
    pub out: PathBuf,
    /// Statistics report as JSON
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Statistics report as an aligned text table
    #[arg(long)]
    pub table: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMode {
    /// Imitation and actor-critic only
    Baseline,
    /// Perturbed-trajectory augmentation and contrastive terms as configured
    Proper,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// World directory written by gen-world
    #[arg(long)]
    pub data: PathBuf,
    /// Split to train on
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Run directory for the loss log, state and checkpoint
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = TrainMode::Proper)]
    pub mode: TrainMode,
    /// JSON training config; the flags below override its fields
    #[arg(long, conflicts_with = "resume")]
    pub config: Option<PathBuf>,
    #[arg(long, conflicts_with = "resume")]
    pub iterations: Option<usize>,
    #[arg(long, conflicts_with = "resume")]
    pub seed: Option<u64>,
    #[arg(long, conflicts_with = "resume")]
    pub batch_size: Option<usize>,
    #[arg(long, conflicts_with = "resume")]
    pub learning_rate: Option<f64>,
    /// Save state and checkpoint every N iterations; 0 saves only at the end
    #[arg(long, default_value_t = 1000)]
    pub checkpoint_every: usize,
    /// Continue from <out>/state.json with the config stored there
    #[arg(long)]
    pub resume: bool,
    /// Return after this many iterations of this invocation, leaving a
    /// resumable state
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    PerFree,
    PerBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DecodeArg {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// World directory written by gen-world
    #[arg(long)]
    pub data: PathBuf,
    /// Split to evaluate
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Model parameters (checkpoint.json of a run)
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSON evaluation protocol; the flags below override its fields
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub protocol: Option<ProtocolArg>,
    #[arg(long, value_enum)]
    pub decode: Option<DecodeArg>,
    /// Seed for edge designation and sampling
    #[arg(long)]
    pub seed: Option<u64>,
    /// Success radius in meters
    #[arg(long)]
    pub success_radius: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Deletions designated per episode under per-based evaluation
    #[arg(long)]
    pub events: Option<usize>,
    /// Report file
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldManifest {
    pub config: WorldConfig,
    pub scenes: Vec<String>,
    pub train: usize,
    pub val: usize,
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{}: no such file", path.display())))
    }
}

fn require_dir(path: &Path) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{}: no such directory", path.display())))
    }
}

pub fn split_file(data: &Path, split: &str) -> PathBuf {
    data.join(format!("{split}.json"))
}

/// Scenes and episodes of one split of a world directory.
pub fn load_split(data: &Path, split: &str) -> Result<(BTreeMap<String, Scene>, Vec<Episode>), CliError> {
    let scenes_dir = data.join(SCENES_DIR);
    let episodes = split_file(data, split);
    require_dir(&scenes_dir)?;
    require_file(&episodes)?;
    let scenes = io::load_scenes(&scenes_dir)?;
    let episodes = io::load_episodes(&episodes, &scenes)?;
    Ok((scenes, episodes))
}

pub fn read_manifest(data: &Path) -> Result<WorldManifest, CliError> {
    let path = data.join(WORLD_FILE);
    require_file(&path)?;
    Ok(io::read_json(&path)?)
}

pub fn gen_world(args: &GenWorldArgs) -> Result<WorldManifest, CliError> {
    let mut config: WorldConfig = read_config(args.config.as_deref())?;
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = args.$field { config.$field = v; })* };
    }
    set!(nodes, radius, extent, landmarks, min_hops, max_hops, seed);
    config.validate()?;
    let world = generate_world(&config, args.scenes, args.episodes, args.val_episodes)?;
    let scenes: BTreeMap<String, Scene> = world.scenes.iter().map(|s| (s.scan().to_string(), s.clone())).collect();
    for scene in &world.scenes {
        io::save_scene(&args.out.join(SCENES_DIR), scene)?;
    }
    io::save_episodes(&split_file(&args.out, "train"), &world.train, &scenes)?;
    io::save_episodes(&split_file(&args.out, "val"), &world.val, &scenes)?;
    let manifest = WorldManifest {
        config,
        scenes: scenes.keys().cloned().collect(),
        train: world.train.len(),
        val: world.val.len(),
    };
    io::write_json(&args.out.join(WORLD_FILE), &manifest)?;
    let edges: usize = world.scenes.iter().map(Scene::edge_count).sum();
    let nodes: usize = world.scenes.iter().map(Scene::node_count).sum();
    println!(
        "scenes {}  nodes {nodes}  edges {edges}  train {}  val {}",
        manifest.scenes.len(),
        manifest.train,
        manifest.val
    );
    Ok(manifest)
}

pub struct BuildPpOutcome {
    pub scenes: BTreeMap<String, Scene>,
    pub dataset: PpDataset,
    pub stats: SplitStats,
}

pub fn build_pp(args: &BuildPpArgs) -> Result<BuildPpOutcome, CliError> {
    let (scenes, episodes) = match (&args.data, &args.connectivity, &args.trajectories) {
        (Some(data), _, _) => load_split(data, &args.split)?,
        (None, Some(conn), Some(traj)) => {
            require_dir(conn)?;
            require_file(traj)?;
            dataset::load_r2r(conn, &dataset::read_r2r_split(traj)?)?
        }
        _ => return Err(CliError::Config("either --data or --connectivity with --trajectories is required".into())),
    };
    if episodes.is_empty() {
        return Err(DatasetError::EmptyDataset.into());
    }
    let pp = dataset::build_pp_dataset(&args.split, &scenes, &episodes);
    for e in &pp.errors {
        log::warn!("{e}");
    }
    let stats = compute_stats(&pp, &scenes)?;
    io::write_json(&args.out, &pp.to_json(&scenes))?;
    if let Some(path) = &args.stats {
        io::write_json(path, &stats)?;
    }
    let table = stats_table(std::slice::from_ref(&stats));
    if let Some(path) = &args.table {
        io::write_atomic(path, table.as_bytes())?;
    }
    print!("{table}");
    Ok(BuildPpOutcome { scenes, dataset: pp, stats })
}

fn log_iteration(line: &str) -> Option<usize> {
    let v: serde_json::Value = serde_json::from_str(line).ok()?;
    v.get("iteration")?.as_u64().map(|i| i as usize)
}

fn save_run(out: &Path, trainer: &Trainer<'_>, log: &[String]) -> Result<(), CliError> {
    let mut text = String::with_capacity(log.iter().map(|l| l.len() + 1).sum());
    for line in log {
        text.push_str(line);
        text.push('\n');
    }
    io::write_atomic(&out.join(LOSS_LOG), text.as_bytes())?;
    io::write_json(&out.join(STATE_FILE), &trainer.state())?;
    io::write_json(&out.join(CHECKPOINT_FILE), &trainer.params.to_checkpoint())?;
    Ok(())
}

pub fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut config: TrainConfig = read_config(args.config.as_deref())?;
    if let Some(v) = args.iterations {
        config.iterations = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        config.learning_rate = v;
    }
    if args.mode == TrainMode::Baseline {
        config = config.baseline();
    }
    config.validate()?;
    Ok(config)
}

pub fn train(args: &TrainArgs) -> Result<TrainState, CliError> {
    let state_path = args.out.join(STATE_FILE);
    let resumed: Option<TrainState> = if args.resume {
        require_file(&state_path)?;
        Some(io::read_json(&state_path)?)
    } else {
        None
    };
    let config = match &resumed {
        Some(s) => s.config.clone(),
        None => resolve_train_config(args)?,
    };
    let manifest = read_manifest(&args.data)?;
    let (scenes, episodes) = load_split(&args.data, &args.split)?;
    let data = TrainData::new(scenes, episodes)?;

    let (mut trainer, mut log) = match &resumed {
        Some(state) => {
            let trainer = Trainer::resume(&data, state)?;
            let log_path = args.out.join(LOSS_LOG);
            let previous = if log_path.is_file() {
                fs::read_to_string(&log_path).map_err(|e| CliError::Data(format!("{}: {e}", log_path.display())))?
            } else {
                String::new()
            };
            let kept = previous
                .lines()
                .filter(|l| log_iteration(l).is_some_and(|i| i < state.iteration))
                .map(str::to_string)
                .collect();
            (trainer, kept)
        }
        None => (Trainer::new(&data, config, vocab_size(manifest.config.landmarks))?, Vec::new()),
    };

    let budget = args.stop_after.unwrap_or(usize::MAX);
    let mut ran = 0;
    while !trainer.done() && ran < budget {
        let report = match trainer.step() {
            Ok(r) => r,
            Err(e) => {
                save_run(&args.out, &trainer, &log)?;
                return Err(e.into());
            }
        };
        log.push(serde_json::to_string(&report).expect("reports serialize"));
        ran += 1;
        if args.checkpoint_every > 0 && trainer.iteration % args.checkpoint_every == 0 {
            save_run(&args.out, &trainer, &log)?;
            log::info!(
                "iteration {}  total {:.4}  pool {} ({:.2})",
                trainer.iteration,
                report.total,
                report.pool_size,
                report.pool_proportion
            );
        }
    }
    save_run(&args.out, &trainer, &log)?;
    println!(
        "iterations {}/{}  pool {} entries over {} episodes ({:.1}% of perturbable)",
        trainer.iteration,
        trainer.config.iterations,
        trainer.pool.len(),
        trainer.pool.episode_count(),
        100.0 * trainer.pool_proportion()
    );
    Ok(trainer.state())
}

pub fn resolve_protocol(args: &EvalArgs) -> Result<EvalProtocol, CliError> {
    let mut p: EvalProtocol = read_config(args.config.as_deref())?;
    if let Some(m) = args.protocol {
        p.mode = match m {
            ProtocolArg::PerFree => ProtocolMode::PerFree,
            ProtocolArg::PerBased => ProtocolMode::PerBased,
        };
    }
    if let Some(d) = args.decode {
        p.decode = match d {
            DecodeArg::Greedy => Decode::Greedy,
            DecodeArg::Sample => Decode::Sample,
        };
    }
    if let Some(v) = args.seed {
        p.seed = v;
    }
    if let Some(v) = args.success_radius {
        p.success_radius = v;
    }
    if let Some(v) = args.max_steps {
        p.max_steps = v;
    }
    if let Some(v) = args.events {
        p.events = v;
    }
    if !(p.success_radius >= 0.0 && p.success_radius.is_finite()) || p.max_steps == 0 {
        return Err(CliError::Config("success radius must be non-negative and max steps positive".into()));
    }
    Ok(p)
}

pub fn eval(args: &EvalArgs) -> Result<EvalReport, CliError> {
    let protocol = resolve_protocol(args)?;
    require_file(&args.checkpoint)?;
    let (scenes, episodes) = load_split(&args.data, &args.split)?;
    let checkpoint: Checkpoint = io::read_json(&args.checkpoint)?;
    let params = ModelParams::from_checkpoint(&checkpoint)?;
    let report = evaluate(&params, &scenes, &episodes, &protocol)?;
    io::write_json(&args.out, &report)?;
    let m = &report.metrics;
    println!(
        "episodes {}  TL {:.2}  NE {:.2}  SR {:.1}  SPL {:.1}  events fired {}  flagged {}",
        m.episodes,
        m.tl,
        m.ne,
        100.0 * m.sr,
        100.0 * m.spl,
        report.events_fired,
        report.flagged
    );
    Ok(report)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenWorld(a) => gen_world(a).map(drop),
        Command::BuildPp(a) => build_pp(a).map(drop),
        Command::Train(a) => train(a).map(drop),
        Command::Eval(a) => eval(a).map(drop),
    }
}
