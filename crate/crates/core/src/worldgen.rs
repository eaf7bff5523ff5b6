//! Procedural scenes, episodes and observation features.
//!
//! Scenes are random geometric graphs on a planar box. Each node carries a
//! landmark label that is the same from every approach direction, and
//! instructions are `(direction, landmark)` token pairs per ground-truth hop
//! followed by a STOP token.

use std::f64::consts::{FRAC_PI_4, PI};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, NodeId, Path, Position, Scene, SceneView};
use crate::seeds;

pub const STOP: u32 = 0;
pub const LEFT: u32 = 1;
pub const RIGHT: u32 = 2;
pub const STRAIGHT: u32 = 3;
pub const UP: u32 = 4;
pub const DOWN: u32 = 5;
/// First landmark token; landmark `k` is token `LANDMARK_BASE + k`.
pub const LANDMARK_BASE: u32 = 6;

pub fn landmark_token(k: u32) -> u32 {
    LANDMARK_BASE + k
}

pub fn vocab_size(landmarks: u32) -> usize {
    (LANDMARK_BASE + landmarks) as usize
}

const MAX_SCENE_ATTEMPTS: usize = 1000;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("no connected scene after {0} attempts")]
    GenerationFailed(usize),
    #[error("no start/goal pair with {min}..={max} hops in scene {scan}")]
    NoValidPair { scan: String, min: usize, max: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub nodes: usize,
    /// Nodes closer than this are connected.
    pub radius: f64,
    /// Side length of the square the nodes are placed in.
    pub extent: f64,
    pub landmarks: u32,
    pub min_hops: usize,
    pub max_hops: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { nodes: 40, radius: 8.0, extent: 40.0, landmarks: 24, min_hops: 3, max_hops: 6, seed: 7 }
    }
}

impl WorldConfig {
    /// Checks the parameters needed to place nodes.
    pub fn validate_scene(&self) -> Result<(), WorldError> {
        if self.nodes == 0 {
            return Err(WorldError::InvalidConfig("node count must be positive".into()));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(WorldError::InvalidConfig("radius must be positive".into()));
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return Err(WorldError::InvalidConfig("extent must be positive".into()));
        }
        if self.landmarks == 0 {
            return Err(WorldError::InvalidConfig("landmark vocabulary must be non-empty".into()));
        }
        Ok(())
    }

    /// Additionally checks the hop range, which must lie in `[2, nodes - 1]`.
    pub fn validate(&self) -> Result<(), WorldError> {
        self.validate_scene()?;
        if self.min_hops < 2 || self.min_hops > self.max_hops || self.max_hops + 1 > self.nodes {
            return Err(WorldError::InvalidConfig(format!(
                "hop range {}..={} must satisfy 2 <= min <= max <= {}",
                self.min_hops,
                self.max_hops,
                self.nodes.saturating_sub(1)
            )));
        }
        Ok(())
    }
}

/// Navigation episode. `path` is the ground-truth shortest path.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub path_id: String,
    pub scan: String,
    pub path: Path,
    pub heading: f64,
    pub instruction: Vec<u32>,
}

impl Episode {
    pub fn start(&self) -> NodeId {
        self.path.first().expect("episode path is non-empty")
    }

    pub fn goal(&self) -> NodeId {
        self.path.last().expect("episode path is non-empty")
    }

    pub fn from_json(json: &EpisodeJson, scene: &Scene) -> Result<Self, GraphError> {
        if json.path.is_empty() {
            return Err(GraphError::EmptyPath);
        }
        Ok(Self {
            path_id: json.path_id.clone(),
            scan: json.scan.clone(),
            path: scene.path_from_ids(&json.path)?,
            heading: json.heading,
            instruction: json.instruction.clone(),
        })
    }

    pub fn to_json(&self, scene: &Scene) -> EpisodeJson {
        EpisodeJson {
            path_id: self.path_id.clone(),
            scan: self.scan.clone(),
            path: scene.path_ids(&self.path),
            heading: self.heading,
            instruction: self.instruction.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeJson {
    pub path_id: String,
    pub scan: String,
    pub path: Vec<String>,
    pub heading: f64,
    pub instruction: Vec<u32>,
}

/// Heading of the displacement `from → to`: 0 along +y, increasing clockwise
/// (π/2 along +x).
pub fn heading_between(from: Position, to: Position) -> f64 {
    (to.x - from.x).atan2(to.y - from.y)
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Direction token for a relative heading; ±45° boundaries count as STRAIGHT.
pub fn direction_token(relative: f64) -> u32 {
    if relative.abs() <= FRAC_PI_4 + 1e-12 {
        STRAIGHT
    } else if relative > 0.0 {
        RIGHT
    } else {
        LEFT
    }
}

/// Instruction for following `path` from `heading`: one direction token and
/// one landmark token per hop, then STOP.
pub fn build_instruction(scene: &Scene, path: &Path, heading: f64) -> Vec<u32> {
    let mut tokens = Vec::with_capacity(2 * path.hops() + 1);
    let mut current = heading;
    for w in path.nodes().windows(2) {
        let (a, b) = (scene.position(w[0]), scene.position(w[1]));
        let h = heading_between(a, b);
        tokens.push(direction_token(wrap_angle(h - current)));
        let lm = scene.landmark(w[1]).expect("generated scenes label every node");
        tokens.push(landmark_token(lm));
        current = h;
    }
    tokens.push(STOP);
    tokens
}

/// Random geometric scene number `index` of the world described by `config`.
pub fn generate_scene(config: &WorldConfig, index: usize) -> Result<Scene, WorldError> {
    config.validate_scene()?;
    let mut rng = seeds::rng(config.seed, seeds::WORLD, index as u64);
    let width = (config.nodes.max(2) - 1).to_string().len();
    let ids: Vec<String> = (0..config.nodes).map(|i| format!("n{i:0width$}")).collect();
    let scan = format!("synth_{}_{index:03}", config.seed);
    for _ in 0..MAX_SCENE_ATTEMPTS {
        let positions: Vec<Position> = (0..config.nodes)
            .map(|_| Position::new(rng.gen_range(0.0..config.extent), rng.gen_range(0.0..config.extent), 0.0))
            .collect();
        let mut edges = Vec::new();
        for i in 0..config.nodes {
            for j in i + 1..config.nodes {
                if positions[i].distance(&positions[j]) < config.radius {
                    edges.push((ids[i].clone(), ids[j].clone()));
                }
            }
        }
        let nodes = ids.iter().cloned().zip(positions).collect();
        let scene = match Scene::new(scan.clone(), nodes, &edges) {
            Ok(s) => s,
            Err(GraphError::ZeroLengthEdge(..)) => continue,
            Err(e) => return Err(e.into()),
        };
        if !scene.is_connected() {
            continue;
        }
        let mut labels: Vec<u32> = (0..config.nodes).map(|i| i as u32 % config.landmarks).collect();
        labels.shuffle(&mut rng);
        return Ok(scene.with_landmarks(labels));
    }
    Err(WorldError::GenerationFailed(MAX_SCENE_ATTEMPTS))
}

/// Draws start/goal pairs whose shortest path has a hop count in range.
pub struct EpisodeSampler<'s> {
    scene: &'s Scene,
    pairs: Vec<Path>,
}

impl<'s> EpisodeSampler<'s> {
    pub fn new(scene: &'s Scene, min_hops: usize, max_hops: usize) -> Result<Self, WorldError> {
        let view = scene.view();
        let mut pairs = Vec::new();
        for goal in scene.nodes() {
            let dist = view.distances_to(goal);
            for start in scene.nodes() {
                if start == goal || !dist[start.index()].is_finite() {
                    continue;
                }
                let path = view.trace_shortest(start, goal, &dist)?;
                if (min_hops..=max_hops).contains(&path.hops()) {
                    pairs.push(path);
                }
            }
        }
        if pairs.is_empty() {
            return Err(WorldError::NoValidPair { scan: scene.scan().into(), min: min_hops, max: max_hops });
        }
        Ok(Self { scene, pairs })
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, path_id: String) -> Episode {
        let path = self.pairs[rng.gen_range(0..self.pairs.len())].clone();
        let heading = rng.gen_range(-PI..PI);
        let instruction = build_instruction(self.scene, &path, heading);
        Episode { path_id, scan: self.scene.scan().into(), path, heading, instruction }
    }
}

/// Single-episode convenience over [`EpisodeSampler`].
pub fn sample_episode(
    scene: &Scene,
    min_hops: usize,
    max_hops: usize,
    seed: u64,
    path_id: &str,
) -> Result<Episode, WorldError> {
    let sampler = EpisodeSampler::new(scene, min_hops, max_hops)?;
    let mut rng = seeds::rng(seed, seeds::EPISODES, 0);
    Ok(sampler.sample(&mut rng, path_id.to_string()))
}

/// Scenes plus train/validation episodes.
#[derive(Debug, Clone)]
pub struct World {
    pub scenes: Vec<Scene>,
    pub train: Vec<Episode>,
    pub val: Vec<Episode>,
}

impl World {
    pub fn scene(&self, scan: &str) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.scan() == scan)
    }
}

/// Episodes are assigned to scenes round-robin; each draws from its own
/// seed stream.
pub fn generate_world(
    config: &WorldConfig,
    scene_count: usize,
    train: usize,
    val: usize,
) -> Result<World, WorldError> {
    config.validate()?;
    if scene_count == 0 {
        return Err(WorldError::InvalidConfig("at least one scene is required".into()));
    }
    let scenes = (0..scene_count).map(|i| generate_scene(config, i)).collect::<Result<Vec<_>, _>>()?;
    let samplers = scenes
        .iter()
        .map(|s| EpisodeSampler::new(s, config.min_hops, config.max_hops))
        .collect::<Result<Vec<_>, _>>()?;
    let split = |name: &str, count: usize, offset: u64| -> Vec<Episode> {
        (0..count)
            .map(|k| {
                let mut rng = seeds::rng(config.seed, seeds::EPISODES, offset + k as u64);
                samplers[k % samplers.len()].sample(&mut rng, format!("{name}_{k:04}"))
            })
            .collect()
    };
    let train_eps = split("train", train, 0);
    let val_eps = split("val", val, 1 << 32);
    Ok(World { train: train_eps, val: val_eps, scenes })
}

/// One action candidate: a neighbor, or STOP when `node` is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub node: Option<NodeId>,
    pub landmark: Option<u32>,
    pub heading_sin: f64,
    pub heading_cos: f64,
    pub elevation: f64,
    pub distance: f64,
}

impl Candidate {
    pub fn stop() -> Self {
        Self { node: None, landmark: None, heading_sin: 0.0, heading_cos: 0.0, elevation: 0.0, distance: 0.0 }
    }

    pub fn is_stop(&self) -> bool {
        self.node.is_none()
    }
}

/// Candidate list at one node: neighbors in id order, then STOP.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub at: NodeId,
    pub heading: f64,
    pub candidates: Vec<Candidate>,
}

impl Observation {
    pub fn stop_index(&self) -> usize {
        self.candidates.len() - 1
    }

    pub fn index_of(&self, node: NodeId) -> Option<usize> {
        self.candidates.iter().position(|c| c.node == Some(node))
    }
}

pub fn observe(view: &SceneView<'_>, current: NodeId, heading: f64) -> Observation {
    let scene = view.scene();
    let here = scene.position(current);
    let mut candidates: Vec<Candidate> = view
        .neighbors(current)
        .map(|(v, w)| {
            let there = scene.position(v);
            let rel = wrap_angle(heading_between(here, there) - heading);
            let planar = ((there.x - here.x).powi(2) + (there.y - here.y).powi(2)).sqrt();
            Candidate {
                node: Some(v),
                landmark: scene.landmark(v),
                heading_sin: rel.sin(),
                heading_cos: rel.cos(),
                elevation: (there.z - here.z).atan2(planar),
                distance: w,
            }
        })
        .collect();
    candidates.push(Candidate::stop());
    Observation { at: current, heading, candidates }
}
