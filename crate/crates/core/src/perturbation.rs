//! Edge-deletion perturbations.
//!
//! A ground-truth edge `(c_t, c_{t+1})` is deletable when removing it keeps
//! the goal reachable and `c_t` keeps at least one other neighbor within the
//! scene's mean edge length of `c_{t+1}`. For each deletable edge the
//! perturbation-aware reference path keeps the ground-truth prefix up to
//! `c_t`, takes the cheapest detour from `c_t` back onto the remaining
//! ground truth, and follows the ground truth from the rejoin node `m`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Edge, GraphError, NodeId, Path, Scene, SceneView, LENGTH_EPS};
use crate::worldgen::Episode;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerturbationError {
    #[error("episode {path_id}: {source}")]
    InvalidEpisode { path_id: String, source: GraphError },
    #[error("episode {0}: ground truth needs at least two nodes")]
    TooShort(String),
    #[error("episode {0}: edge at step {1} is not deletable")]
    NotDeletable(String, usize),
    #[error("episode {0}: no detour from step {1}")]
    NoDetour(String, usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Which reachability condition a deletion must preserve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReachabilityCheck {
    /// `c_t` must still reach the goal.
    #[default]
    CurrentToGoal,
    /// The episode start must still reach the goal.
    StartToGoal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DeletableEdge {
    /// Index of `c_t` in the ground-truth path.
    pub t: usize,
    pub from: NodeId,
    pub to: NodeId,
}

impl DeletableEdge {
    pub fn edge(&self) -> Edge {
        Edge::new(self.from, self.to)
    }

    pub fn event(&self) -> PerturbationEvent {
        PerturbationEvent { t: self.t, from: self.from, to: self.to }
    }
}

/// Deletion of `from → to`, designated at ground-truth step `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PerturbationEvent {
    pub t: usize,
    pub from: NodeId,
    pub to: NodeId,
}

impl PerturbationEvent {
    pub fn edge(&self) -> Edge {
        Edge::new(self.from, self.to)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedGt {
    pub path_id: String,
    pub deleted: DeletableEdge,
    /// Rejoin node on the ground-truth suffix.
    pub m: NodeId,
    pub path: Path,
}

/// On-disk form of [`PerturbedGt`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbedGtJson {
    pub path_id: String,
    pub t: usize,
    pub edge: [String; 2],
    pub m: String,
    pub path_obs: Vec<String>,
}

impl PerturbedGt {
    pub fn to_json(&self, scene: &Scene) -> PerturbedGtJson {
        PerturbedGtJson {
            path_id: self.path_id.clone(),
            t: self.deleted.t,
            edge: [scene.id(self.deleted.from).into(), scene.id(self.deleted.to).into()],
            m: scene.id(self.m).into(),
            path_obs: scene.path_ids(&self.path),
        }
    }

    pub fn from_json(json: &PerturbedGtJson, scene: &Scene) -> Result<Self, GraphError> {
        let from = scene.lookup(&json.edge[0])?;
        let to = scene.lookup(&json.edge[1])?;
        scene.edge(from, to)?;
        Ok(Self {
            path_id: json.path_id.clone(),
            deleted: DeletableEdge { t: json.t, from, to },
            m: scene.lookup(&json.m)?,
            path: scene.path_from_ids(&json.path_obs)?,
        })
    }
}

fn validate(scene: &Scene, episode: &Episode) -> Result<(), PerturbationError> {
    if episode.path.len() < 2 {
        return Err(PerturbationError::TooShort(episode.path_id.clone()));
    }
    scene
        .path_length(&episode.path)
        .map(|_| ())
        .map_err(|source| PerturbationError::InvalidEpisode { path_id: episode.path_id.clone(), source })
}

/// Ground-truth edges that may be deleted, in path order. Uses the
/// current-to-goal reachability check.
pub fn collect_deletable_edges(scene: &Scene, episode: &Episode) -> Result<Vec<DeletableEdge>, PerturbationError> {
    collect_deletable_edges_with(scene, episode, ReachabilityCheck::CurrentToGoal)
}

pub fn collect_deletable_edges_with(
    scene: &Scene,
    episode: &Episode,
    check: ReachabilityCheck,
) -> Result<Vec<DeletableEdge>, PerturbationError> {
    validate(scene, episode)?;
    let r = scene.avg_neighbor_distance()?;
    let nodes = episode.path.nodes();
    let goal = episode.goal();
    let mut out = Vec::new();
    for (t, w) in nodes.windows(2).enumerate() {
        let (from, to) = (w[0], w[1]);
        let view = scene.without(Edge::new(from, to))?;
        let source = match check {
            ReachabilityCheck::CurrentToGoal => from,
            ReachabilityCheck::StartToGoal => episode.start(),
        };
        if !view.reachable(source, goal) {
            continue;
        }
        let near_alternative = view.neighbors(from).any(|(u, _)| u != to && scene.straight_distance(u, to) < r);
        if near_alternative {
            out.push(DeletableEdge { t, from, to });
        }
    }
    Ok(out)
}

/// Perturbation-aware reference path for one deletable edge.
///
/// The rejoin node `m` minimizes the detour length from `c_t` over the
/// ground-truth suffix starting at `c_{t+1}`; ties go to the node closest to
/// the goal along the ground truth.
pub fn build_perturbed_gt(
    scene: &Scene,
    episode: &Episode,
    edge: &DeletableEdge,
) -> Result<PerturbedGt, PerturbationError> {
    validate(scene, episode)?;
    let nodes = episode.path.nodes();
    let t = edge.t;
    if t + 1 >= nodes.len() || nodes[t] != edge.from || nodes[t + 1] != edge.to {
        return Err(PerturbationError::NotDeletable(episode.path_id.clone(), t));
    }
    let view = scene.without(edge.edge())?;
    let (m_index, detour) = cheapest_rejoin(&view, nodes, t)
        .ok_or_else(|| PerturbationError::NoDetour(episode.path_id.clone(), t))?;

    let mut path = nodes[..t].to_vec();
    path.extend_from_slice(detour.nodes());
    path.extend_from_slice(&nodes[m_index + 1..]);
    Ok(PerturbedGt {
        path_id: episode.path_id.clone(),
        deleted: *edge,
        m: nodes[m_index],
        path: Path(path),
    })
}

/// Returns the ground-truth index of the rejoin node and the detour
/// `c_t → m` (both endpoints included).
fn cheapest_rejoin(view: &SceneView<'_>, nodes: &[NodeId], t: usize) -> Option<(usize, Path)> {
    let from = nodes[t];
    // Distances from c_t; the view is undirected so distance-to equals
    // distance-from.
    let dist = view.distances_to(from);
    let mut best: Option<(usize, f64)> = None;
    for (i, &m) in nodes.iter().enumerate().skip(t + 1) {
        let d = dist[m.index()];
        if !d.is_finite() {
            continue;
        }
        best = match best {
            None => Some((i, d)),
            Some((_, bd)) if d < bd - LENGTH_EPS * bd.max(1.0) => Some((i, d)),
            // later on the ground truth means closer to the goal
            Some((_, bd)) if (d - bd).abs() <= LENGTH_EPS * bd.max(1.0) => Some((i, bd)),
            keep => keep,
        };
    }
    let (i, _) = best?;
    let path = view.shortest_path(from, nodes[i]).ok()?;
    Some((i, path))
}

/// Read-only view of `scene` with the event's edge removed.
pub fn apply_event<'a>(scene: &'a Scene, event: &PerturbationEvent) -> Result<SceneView<'a>, GraphError> {
    scene.without(event.edge())
}

/// Checks the structural properties every perturbed reference must have.
pub fn check_perturbed_gt(scene: &Scene, episode: &Episode, p: &PerturbedGt) -> Result<(), String> {
    let gt = episode.path.nodes();
    let obs = p.path.nodes();
    let t = p.deleted.t;
    if obs.first() != gt.first() || obs.last() != gt.last() {
        return Err("endpoints differ from ground truth".into());
    }
    if p.path.edges().any(|e| e == p.deleted.edge()) {
        return Err("reference traverses the deleted edge".into());
    }
    if obs.len() <= t || obs[..=t] != gt[..=t] {
        return Err("prefix up to c_t differs from ground truth".into());
    }
    let Some(mi) = gt.iter().skip(t + 1).position(|&n| n == p.m).map(|k| k + t + 1) else {
        return Err("rejoin node is not on the ground-truth suffix".into());
    };
    let suffix = &gt[mi..];
    if obs.len() < suffix.len() || obs[obs.len() - suffix.len()..] != *suffix {
        return Err("suffix from m differs from ground truth".into());
    }
    let view = scene.without(p.deleted.edge()).map_err(|e| e.to_string())?;
    view.path_length(&p.path).map_err(|e| e.to_string())?;
    Ok(())
}
