//! Navigation metrics and the perturbation-free / perturbation-based
//! evaluation protocols.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{rollout, AgentError, ModelParams};
use crate::graph::{GraphError, Scene};
use crate::perturbation::{build_perturbed_gt, collect_deletable_edges, DeletableEdge, PerturbationError, PerturbationEvent};
use crate::rollout::{drive, GtReplay, Mode, Policy, RolloutConfig, RolloutError, RolloutRecord};
use crate::seeds;
use crate::worldgen::{Episode, Observation};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no episodes to evaluate")]
    EmptyDataset,
    #[error("episode {0} references an unknown scene")]
    UnknownScene(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Perturbation(#[from] PerturbationError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolMode {
    PerFree,
    PerBased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decode {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub mode: ProtocolMode,
    pub success_radius: f64,
    pub seed: u64,
    pub decode: Decode,
    pub max_steps: usize,
    /// Designated deletions per episode in per-based mode; more than one is
    /// a stress setting.
    pub events: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self { mode: ProtocolMode::PerFree, success_radius: 3.0, seed: 0, decode: Decode::Greedy, max_steps: 12, events: 1 }
    }
}

impl EvalProtocol {
    pub fn per_based(self) -> Self {
        Self { mode: ProtocolMode::PerBased, ..self }
    }

    fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig { max_steps: self.max_steps, success_radius: self.success_radius }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeScore {
    pub path_id: String,
    pub tl: f64,
    pub ne: f64,
    pub success: bool,
    pub spl: f64,
    pub reference_length: f64,
    /// Deletions designated for this episode (path order index `t`).
    pub designated: Vec<usize>,
    pub event_fired: bool,
    /// Per-based protocol, but the episode has no deletable edge and was
    /// evaluated perturbation-free.
    pub flagged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tl: f64,
    pub ne: f64,
    pub sr: f64,
    pub spl: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    pub metrics: Metrics,
    pub events_fired: usize,
    pub flagged: usize,
    pub episodes: Vec<EpisodeScore>,
}

/// Scores one finished rollout against a reference length.
pub fn score_episode(
    scene: &Scene,
    episode: &Episode,
    record: &RolloutRecord,
    reference_length: f64,
    success_radius: f64,
) -> Result<EpisodeScore, EvalError> {
    let tl = scene.path_length(&record.path())?;
    let ne = scene.geodesic_distance(record.final_node(), episode.goal())?;
    let success = ne <= success_radius;
    let spl = if success { reference_length / tl.max(reference_length) } else { 0.0 };
    Ok(EpisodeScore {
        path_id: episode.path_id.clone(),
        tl,
        ne,
        success,
        spl: if spl.is_nan() { 1.0 } else { spl },
        reference_length,
        designated: Vec::new(),
        event_fired: !record.fired.is_empty(),
        flagged: false,
    })
}

/// Mean metrics; rows are sorted by path id first so the result does not
/// depend on episode order.
pub fn aggregate(scores: &[EpisodeScore]) -> Metrics {
    let mut rows: Vec<&EpisodeScore> = scores.iter().collect();
    rows.sort_by(|a, b| a.path_id.cmp(&b.path_id));
    let n = rows.len().max(1) as f64;
    Metrics {
        tl: rows.iter().map(|r| r.tl).sum::<f64>() / n,
        ne: rows.iter().map(|r| r.ne).sum::<f64>() / n,
        sr: rows.iter().filter(|r| r.success).count() as f64 / n,
        spl: rows.iter().map(|r| r.spl).sum::<f64>() / n,
        episodes: rows.len(),
    }
}

/// Anything that can be run through an episode.
pub trait Navigator {
    fn navigate(
        &self,
        scene: &Scene,
        episode: &Episode,
        mode: Mode<'_>,
        events: &[PerturbationEvent],
        config: &RolloutConfig,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<RolloutRecord, EvalError>;
}

impl Navigator for ModelParams {
    fn navigate(
        &self,
        scene: &Scene,
        episode: &Episode,
        mode: Mode<'_>,
        events: &[PerturbationEvent],
        config: &RolloutConfig,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<RolloutRecord, EvalError> {
        Ok(rollout(self, scene, episode, mode, events, config, rng)?)
    }
}

/// Replays the ground truth; after a deletion it has no preference.
pub struct GtReplayNavigator;

impl Navigator for GtReplayNavigator {
    fn navigate(
        &self,
        scene: &Scene,
        episode: &Episode,
        mode: Mode<'_>,
        events: &[PerturbationEvent],
        config: &RolloutConfig,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<RolloutRecord, EvalError> {
        let mut policy = GtReplay::new(&episode.path);
        Ok(drive(&mut policy, scene, episode, mode, events, config, rng)?)
    }
}

/// Uniform over the candidates.
pub struct RandomNavigator;

struct Uniform;

impl Policy for Uniform {
    fn act(&mut self, obs: &Observation) -> (Vec<f64>, f64) {
        let n = obs.candidates.len();
        (vec![1.0 / n as f64; n], 0.0)
    }

    fn commit(&mut self, _obs: &Observation, _chosen: usize) {}
}

impl Navigator for RandomNavigator {
    fn navigate(
        &self,
        scene: &Scene,
        episode: &Episode,
        mode: Mode<'_>,
        events: &[PerturbationEvent],
        config: &RolloutConfig,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<RolloutRecord, EvalError> {
        Ok(drive(&mut Uniform, scene, episode, mode, events, config, rng)?)
    }
}

/// Deletable edges designated for an episode, in path order.
pub fn designate(episode: &Episode, deletable: &[DeletableEdge], protocol: &EvalProtocol) -> Vec<DeletableEdge> {
    if deletable.is_empty() || protocol.events == 0 {
        return Vec::new();
    }
    let mut rng = seeds::keyed_rng(protocol.seed, seeds::EVAL, &episode.path_id);
    let count = protocol.events.min(deletable.len());
    let mut picked: Vec<usize> = sample(&mut rng, deletable.len(), count).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| deletable[i]).collect()
}

pub fn evaluate<N: Navigator + ?Sized>(
    navigator: &N,
    scenes: &BTreeMap<String, Scene>,
    episodes: &[Episode],
    protocol: &EvalProtocol,
) -> Result<EvalReport, EvalError> {
    if episodes.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let config = protocol.rollout_config();
    let mut rows = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let scene = scenes.get(&ep.scan).ok_or_else(|| EvalError::UnknownScene(ep.path_id.clone()))?;
        let (designated, flagged) = match protocol.mode {
            ProtocolMode::PerFree => (Vec::new(), false),
            ProtocolMode::PerBased => {
                let d = designate(ep, &collect_deletable_edges(scene, ep)?, protocol);
                let flagged = d.is_empty();
                (d, flagged)
            }
        };
        let reference = match designated.first() {
            Some(d) => scene.path_length(&build_perturbed_gt(scene, ep, d)?.path)?,
            None => scene.path_length(&ep.path)?,
        };
        let events: Vec<PerturbationEvent> = designated.iter().map(DeletableEdge::event).collect();
        let mut rng = seeds::keyed_rng(protocol.seed, seeds::ROLLOUT, &ep.path_id);
        let mode = match protocol.decode {
            Decode::Greedy => Mode::Greedy,
            Decode::Sample => Mode::Sample,
        };
        let record = navigator.navigate(scene, ep, mode, &events, &config, &mut rng)?;
        let mut score = score_episode(scene, ep, &record, reference, protocol.success_radius)?;
        score.designated = designated.iter().map(|d| d.t).collect();
        score.flagged = flagged;
        rows.push(score);
    }
    rows.sort_by(|a, b| a.path_id.cmp(&b.path_id));
    Ok(EvalReport {
        protocol: protocol.clone(),
        metrics: aggregate(&rows),
        events_fired: rows.iter().filter(|r| r.event_fired).count(),
        flagged: rows.iter().filter(|r| r.flagged).count(),
        episodes: rows,
    })
}
