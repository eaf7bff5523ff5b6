//! Training objectives and the progressive perturbed-trajectory augmentation
//! loop.
//!
//! Each iteration samples perturbation-free rollouts for a minibatch, grows
//! the perturbed pool from rollouts that already overlap their ground truth
//! on a deletable edge, runs perturbed rollouts for pooled episodes and takes
//! one gradient step on
//! `L_RL + λ1·L_IL + λ2·L_f + λ3·L_p`.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{encode_on_tape, AgentError, Checkpoint, ModelParams, StepVars, TapedAgent};
use crate::autodiff::{dot, norm, Tape, Var};
use crate::graph::{NodeId, Path, Scene};
use crate::perturbation::{
    build_perturbed_gt, collect_deletable_edges, DeletableEdge, PerturbationError, PerturbationEvent, PerturbedGt,
};
use crate::rollout::{drive, Mode, RolloutConfig, RolloutRecord};
use crate::seeds;
use crate::worldgen::Episode;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("record has {steps} steps, teacher path needs {expected}")]
    LengthMismatch { steps: usize, expected: usize },
    #[error("record carries no rewards")]
    MissingRewards,
    #[error("zero-norm vector in contrastive loss")]
    ZeroNormVector,
    #[error("vector dimensions differ")]
    DimensionMismatch,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Perturbation(#[from] PerturbationError),
    #[error("episode {0} references an unknown scene")]
    UnknownScene(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// λ1, imitation weight.
    pub imitation: f64,
    /// λ2, perturbation-free contrastive weight.
    pub contrastive_free: f64,
    /// λ3, perturbation-based contrastive weight.
    pub contrastive_perturbed: f64,
    pub temperature: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { imitation: 0.2, contrastive_free: 1.0, contrastive_perturbed: 1.0, temperature: 0.1, gamma: 0.9 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        let w = [self.imitation, self.contrastive_free, self.contrastive_perturbed];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(TrainError::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(TrainError::Config("temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(TrainError::Config("gamma must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[i] = acc;
    }
    out
}

/// Imitation loss of a teacher-mode record: summed negative log-probability
/// of the teacher actions.
pub fn il_loss(record: &RolloutRecord, teacher: &Path) -> Result<f64, LossError> {
    if record.steps.len() != teacher.len() {
        return Err(LossError::LengthMismatch { steps: record.steps.len(), expected: teacher.len() });
    }
    Ok(record.steps.iter().map(|s| -s.log_prob).sum())
}

/// Advantage actor-critic loss, `−log p(a_t)·(R_t − v_t) + ½ (v_t − R_t)²`
/// averaged over the steps of the trajectory, with the advantage treated as
/// a constant.
pub fn rl_loss(record: &RolloutRecord, gamma: f64) -> Result<f64, LossError> {
    if record.steps.is_empty() || record.steps.iter().any(|s| !s.reward.is_finite()) {
        return Err(LossError::MissingRewards);
    }
    let returns = discounted_returns(&record.rewards(), gamma);
    let total: f64 = record
        .steps
        .iter()
        .zip(&returns)
        .map(|(s, r)| -s.log_prob * (r - s.value) + 0.5 * (s.value - r).powi(2))
        .sum();
    Ok(total / returns.len() as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64, LossError> {
    if a.len() != b.len() {
        return Err(LossError::DimensionMismatch);
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(LossError::ZeroNormVector);
    }
    Ok(dot(a, b) / (na * nb))
}

pub fn info_nce(anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>], tau: f64) -> Result<f64, LossError> {
    let pos = cosine(anchor, positive)? / tau;
    let mut logits = vec![pos];
    for n in negatives {
        logits.push(cosine(anchor, n)? / tau);
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    Ok(lse - pos)
}

fn paired_nce(
    anchor: &[f64],
    positive: &[f64],
    intra: &[Vec<f64>],
    inter: &[Vec<f64>],
    tau: f64,
) -> Result<f64, LossError> {
    let intra_term = if intra.is_empty() { 0.0 } else { info_nce(anchor, positive, intra, tau)? };
    let inter_term = if inter.is_empty() { 0.0 } else { info_nce(anchor, positive, inter, tau)? };
    Ok(intra_term + inter_term)
}

/// Perturbation-free contrastive loss: the sampled trajectory `e_f` is pulled
/// toward its ground truth `e_g` and away from the episode's
/// perturbation-aware references (intra) and other episodes (inter).
pub fn contrastive_free(
    e_f: &[f64],
    e_g: &[f64],
    intra: &[Vec<f64>],
    inter: &[Vec<f64>],
    tau: f64,
) -> Result<f64, LossError> {
    paired_nce(e_f, e_g, intra, inter, tau)
}

/// Perturbation-based contrastive loss: the perturbed trajectory `e_p` is
/// pulled toward its perturbation-aware reference `e_og` and away from the
/// references of the other perturbation positions (intra) and other episodes
/// (inter).
pub fn contrastive_perturbed(
    e_p: &[f64],
    e_og: &[f64],
    intra: &[Vec<f64>],
    inter: &[Vec<f64>],
    tau: f64,
) -> Result<f64, LossError> {
    paired_nce(e_p, e_og, intra, inter, tau)
}

/// Log-probability of candidate `target` under the masked softmax of `logits`.
pub fn log_prob_on_tape(tape: &mut Tape<'_>, logits: Var, masked: &[usize], target: usize) -> Var {
    if masked.is_empty() {
        let lp = tape.log_softmax(logits);
        return tape.pick(lp, target);
    }
    let n = tape.value(logits).len();
    let keep: Vec<usize> = (0..n).filter(|i| !masked.contains(i)).collect();
    let pos = keep.iter().position(|&i| i == target).expect("target is not masked");
    let sub = tape.gather(logits, &keep);
    let lp = tape.log_softmax(sub);
    tape.pick(lp, pos)
}

/// Summed negative log-probability of `targets` along a taped run.
pub fn il_on_tape(tape: &mut Tape<'_>, run: &Run, targets: &[usize]) -> Var {
    let terms: Vec<Var> = run
        .steps
        .iter()
        .zip(&run.record.steps)
        .zip(targets)
        .map(|((vars, rec), &t)| log_prob_on_tape(tape, vars.logits, &rec.masked, t))
        .collect();
    let total = tape.sum(&terms);
    tape.scale(total, -1.0)
}

/// Taped counterpart of [`rl_loss`]. Rewards, actions and the advantage
/// baseline come from `sampled`, the record the trajectory was drawn as.
pub fn rl_on_tape(tape: &mut Tape<'_>, run: &Run, sampled: &RolloutRecord, gamma: f64) -> Var {
    let returns = discounted_returns(&sampled.rewards(), gamma);
    let mut terms = Vec::with_capacity(2 * returns.len());
    for ((vars, rec), r) in run.steps.iter().zip(&sampled.steps).zip(&returns) {
        let lp = log_prob_on_tape(tape, vars.logits, &rec.masked, rec.chosen);
        terms.push(tape.scale(lp, -(r - rec.value)));
        let target = tape.constant(*r);
        let err = tape.sub(vars.value, target);
        let sq = tape.square(err);
        terms.push(tape.scale(sq, 0.5));
    }
    let total = tape.sum(&terms);
    tape.scale(total, 1.0 / returns.len() as f64)
}

/// InfoNCE on the tape; `None` when there are no negatives (the loss is then
/// identically zero).
pub fn info_nce_on_tape(tape: &mut Tape<'_>, anchor: Var, positive: Var, negatives: &[Var], tau: f64) -> Option<Var> {
    if negatives.is_empty() {
        return None;
    }
    let mut sims = Vec::with_capacity(negatives.len() + 1);
    for &other in std::iter::once(&positive).chain(negatives) {
        let c = tape.cosine(anchor, other);
        sims.push(tape.scale(c, 1.0 / tau));
    }
    let logits = tape.concat(&sims);
    let lp = tape.log_softmax(logits);
    let first = tape.pick(lp, 0);
    Some(tape.scale(first, -1.0))
}

/// Episodes with their scenes and precomputed perturbation references.
pub struct TrainData {
    pub scenes: BTreeMap<String, Scene>,
    pub episodes: Vec<Episode>,
    pub deletable: Vec<Vec<DeletableEdge>>,
    pub perturbed: Vec<Vec<PerturbedGt>>,
}

impl TrainData {
    pub fn new(scenes: BTreeMap<String, Scene>, episodes: Vec<Episode>) -> Result<Self, TrainError> {
        let mut deletable = Vec::with_capacity(episodes.len());
        let mut perturbed = Vec::with_capacity(episodes.len());
        for ep in &episodes {
            let scene = scenes.get(&ep.scan).ok_or_else(|| TrainError::UnknownScene(ep.path_id.clone()))?;
            let edges = collect_deletable_edges(scene, ep)?;
            let refs = edges.iter().map(|d| build_perturbed_gt(scene, ep, d)).collect::<Result<Vec<_>, _>>()?;
            deletable.push(edges);
            perturbed.push(refs);
        }
        Ok(Self { scenes, episodes, deletable, perturbed })
    }

    pub fn scene(&self, episode: usize) -> &Scene {
        &self.scenes[&self.episodes[episode].scan]
    }

    pub fn perturbable_count(&self) -> usize {
        self.deletable.iter().filter(|d| !d.is_empty()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PoolKey {
    pub episode: usize,
    /// Index into the episode's deletable edges.
    pub edge: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolEntry {
    pub key: PoolKey,
    pub iteration: usize,
}

/// Growing set of perturbed training trajectories. Entries are never
/// removed; insertion order is kept.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PerturbedPool {
    entries: Vec<PoolEntry>,
    keys: BTreeSet<PoolKey>,
    by_episode: BTreeMap<usize, Vec<usize>>,
}

impl PerturbedPool {
    pub fn insert(&mut self, key: PoolKey, iteration: usize) -> bool {
        if !self.keys.insert(key) {
            return false;
        }
        self.entries.push(PoolEntry { key, iteration });
        self.by_episode.entry(key.episode).or_default().push(key.edge);
        true
    }

    pub fn contains(&self, key: PoolKey) -> bool {
        self.keys.contains(&key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    /// Pooled deletable-edge indices of an episode, in insertion order.
    pub fn edges_of(&self, episode: usize) -> &[usize] {
        self.by_episode.get(&episode).map_or(&[], Vec::as_slice)
    }

    pub fn episode_count(&self) -> usize {
        self.by_episode.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matched {
    pub episode: usize,
    /// Deletable-edge indices the rollout traversed that are not yet pooled.
    pub edges: Vec<usize>,
}

/// Episodes whose rollout traversed at least one deletable ground-truth edge
/// that is not yet in the pool. Only moves in the ground-truth direction
/// count; walking an edge backwards is not following the ground truth.
pub fn match_gt(rollouts: &[(usize, &RolloutRecord)], deletable: &[Vec<DeletableEdge>], pool: &PerturbedPool) -> Vec<Matched> {
    rollouts
        .iter()
        .filter_map(|&(episode, rec)| {
            let walked: BTreeSet<(NodeId, NodeId)> = rec.nodes.windows(2).map(|w| (w[0], w[1])).collect();
            let edges: Vec<usize> = deletable[episode]
                .iter()
                .enumerate()
                .filter(|(k, d)| walked.contains(&(d.from, d.to)) && !pool.contains(PoolKey { episode, edge: *k }))
                .map(|(k, _)| k)
                .collect();
            (!edges.is_empty()).then_some(Matched { episode, edges })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Curriculum {
    #[default]
    None,
    /// Imitation moves from teacher forcing to student forcing in four equal
    /// phases: fully forced, first four steps forced, first two, none.
    TeacherToStudent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub dim: usize,
    pub max_steps: usize,
    pub success_radius: f64,
    pub weights: LossWeights,
    /// Progressive perturbed-trajectory augmentation.
    pub augment: bool,
    /// Detach positives and negatives in the contrastive terms.
    pub stop_gradient: bool,
    pub curriculum: Curriculum,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 20_000,
            batch_size: 4,
            learning_rate: 1e-2,
            momentum: 0.0,
            clip_norm: 5.0,
            dim: 64,
            max_steps: 12,
            success_radius: 3.0,
            weights: LossWeights::default(),
            augment: true,
            stop_gradient: false,
            curriculum: Curriculum::None,
        }
    }
}

impl TrainConfig {
    /// Imitation plus actor-critic only: no contrastive terms, no pool.
    pub fn baseline(mut self) -> Self {
        self.weights.contrastive_free = 0.0;
        self.weights.contrastive_perturbed = 0.0;
        self.augment = false;
        self
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.weights.validate()?;
        if self.batch_size == 0 || self.dim == 0 || self.max_steps == 0 {
            return Err(TrainError::Config("batch size, dim and max steps must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.clip_norm > 0.0) {
            return Err(TrainError::Config("learning rate, momentum or clip norm out of range".into()));
        }
        Ok(())
    }

    pub fn rollout(&self) -> RolloutConfig {
        RolloutConfig { max_steps: self.max_steps, success_radius: self.success_radius }
    }

    fn forced_steps(&self, iteration: usize) -> Option<usize> {
        match self.curriculum {
            Curriculum::None => None,
            Curriculum::TeacherToStudent => match 4 * iteration / self.iterations.max(1) {
                0 => None,
                1 => Some(4),
                2 => Some(2),
                _ => Some(0),
            },
        }
    }
}

/// One taped pass of the decoder.
pub struct Run {
    pub record: RolloutRecord,
    pub steps: Vec<StepVars>,
    pub hidden: Var,
}

#[allow(clippy::too_many_arguments)]
fn run_on_tape<R: Rng>(
    tape: &mut Tape<'_>,
    context: &[Var],
    dim: usize,
    scene: &Scene,
    episode: &Episode,
    mode: Mode<'_>,
    events: &[PerturbationEvent],
    config: &RolloutConfig,
    rng: &mut R,
) -> Result<Run, AgentError> {
    let mut agent = TapedAgent::new(tape, context.to_vec(), dim);
    let record = drive(&mut agent, scene, episode, mode, events, config, rng)?;
    let hidden = agent.hidden();
    Ok(Run { record, steps: agent.steps, hidden })
}

/// Student-forcing targets: the next hop of a shortest path from the current
/// node to the goal, or STOP at the goal.
fn oracle_targets(scene: &Scene, episode: &Episode, record: &RolloutRecord) -> Vec<usize> {
    let goal = episode.goal();
    record
        .steps
        .iter()
        .map(|s| {
            if s.at == goal {
                return s.candidates.len() - 1;
            }
            let path = scene.shortest_path(s.at, goal, None).expect("scenes are connected");
            let next = path.nodes()[1];
            s.candidates.iter().position(|c| *c == Some(next)).expect("next hop is a neighbor")
        })
        .collect()
}

/// Trajectories of one batch element that were chosen before the loss is
/// built: the perturbation-free sample, the optional perturbed sample with
/// its pooled deletable-edge index, and the optional student-forced run.
#[derive(Debug, Clone)]
pub struct PlanItem {
    pub episode: usize,
    pub free: RolloutRecord,
    pub perturbed: Option<(usize, RolloutRecord)>,
    pub student: Option<RolloutRecord>,
}

struct ItemRuns {
    episode: usize,
    context: Vec<Var>,
    free: Run,
    perturbed: Option<(usize, Run)>,
    student: Option<Run>,
}

impl ItemRuns {
    /// Restores the sampled records on replayed runs so the advantage
    /// baselines match the ones seen when sampling.
    fn with_sampled(mut self, item: &PlanItem) -> Self {
        self.free.record = item.free.clone();
        if let (Some((_, run)), Some((_, rec))) = (&mut self.perturbed, &item.perturbed) {
            run.record = rec.clone();
        }
        if let (Some(run), Some(rec)) = (&mut self.student, &item.student) {
            run.record = rec.clone();
        }
        self
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub imitation: Var,
    pub reinforcement: Var,
    pub contrastive_free: Var,
    pub contrastive_perturbed: Var,
    pub total: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LossOptions {
    pub weights: LossWeights,
    pub stop_gradient: bool,
    pub dim: usize,
    pub rollout: RolloutConfig,
}

impl LossOptions {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self { weights: c.weights, stop_gradient: c.stop_gradient, dim: c.dim, rollout: c.rollout() }
    }
}

fn replay_run(tape: &mut Tape<'_>, context: &[Var], data: &TrainData, episode: usize, rec: &RolloutRecord, opts: &LossOptions) -> Result<Run, AgentError> {
    let path = rec.path();
    let mode = if rec.stopped { Mode::Teacher(&path) } else { Mode::TeacherNoStop(&path) };
    let mut rng = seeds::rng(0, seeds::ROLLOUT, 0);
    let run = run_on_tape(tape, context, opts.dim, data.scene(episode), &data.episodes[episode], mode, &rec.replay_events(), &opts.rollout, &mut rng)?;
    debug_assert_eq!(run.record.nodes, rec.nodes);
    Ok(run)
}

/// Builds the full objective on `tape` for fixed trajectories (used for
/// gradient checks and by the trainer after sampling).
pub fn batch_loss(tape: &mut Tape<'_>, data: &TrainData, plan: &[PlanItem], opts: &LossOptions) -> Result<LossVars, AgentError> {
    let mut items = Vec::with_capacity(plan.len());
    for item in plan {
        let ep = &data.episodes[item.episode];
        let context = encode_on_tape(tape, &ep.instruction);
        let free = replay_run(tape, &context, data, item.episode, &item.free, opts)?;
        let perturbed = match &item.perturbed {
            Some((k, rec)) => Some((*k, replay_run(tape, &context, data, item.episode, rec, opts)?)),
            None => None,
        };
        let student = match &item.student {
            Some(rec) => Some(replay_run(tape, &context, data, item.episode, rec, opts)?),
            None => None,
        };
        items.push(ItemRuns { episode: item.episode, context, free, perturbed, student }.with_sampled(item));
    }
    assemble(tape, data, &items, opts)
}

fn assemble(tape: &mut Tape<'_>, data: &TrainData, items: &[ItemRuns], opts: &LossOptions) -> Result<LossVars, AgentError> {
    let w = &opts.weights;
    let tau = w.temperature;
    let batch = items.len() as f64;
    let mut dummy = seeds::rng(0, seeds::ROLLOUT, 0);
    let mut il_terms = Vec::new();
    let mut rl_terms = Vec::new();
    let mut free_terms = Vec::new();
    let mut pert_terms = Vec::new();
    let free_codes: Vec<Var> = items.iter().map(|it| it.free.hidden).collect();
    let guard = |tape: &mut Tape<'_>, v: Var| if opts.stop_gradient { tape.detach(v) } else { v };

    for (i, it) in items.iter().enumerate() {
        let ep = &data.episodes[it.episode];
        let scene = data.scene(it.episode);
        let deletable = &data.deletable[it.episode];
        let refs = &data.perturbed[it.episode];
        let need_gt = it.student.is_none() || w.contrastive_free > 0.0;
        let need_refs = w.contrastive_free > 0.0 || (w.contrastive_perturbed > 0.0 && it.perturbed.is_some());

        let gt = if need_gt {
            Some(run_on_tape(tape, &it.context, opts.dim, scene, ep, Mode::Teacher(&ep.path), &[], &opts.rollout, &mut dummy)?)
        } else {
            None
        };
        match (&it.student, &gt) {
            (Some(run), _) => {
                let targets = oracle_targets(scene, ep, &run.record);
                il_terms.push(il_on_tape(tape, run, &targets));
            }
            (None, Some(run)) => {
                let targets: Vec<usize> = run.record.steps.iter().map(|s| s.chosen).collect();
                il_terms.push(il_on_tape(tape, run, &targets));
            }
            (None, None) => unreachable!("ground-truth pass runs whenever there is no student pass"),
        }
        rl_terms.push(rl_on_tape(tape, &it.free, &it.free.record, w.gamma));

        let mut ref_codes: Vec<Option<Var>> = vec![None; refs.len()];
        let mut ref_runs: BTreeMap<usize, Run> = BTreeMap::new();
        for k in 0..refs.len() {
            let wanted = need_refs || it.perturbed.as_ref().is_some_and(|(kp, _)| *kp == k);
            if wanted {
                let run = run_on_tape(
                    tape,
                    &it.context,
                    opts.dim,
                    scene,
                    ep,
                    Mode::Teacher(&refs[k].path),
                    &[deletable[k].event()],
                    &opts.rollout,
                    &mut dummy,
                )?;
                ref_codes[k] = Some(run.hidden);
                ref_runs.insert(k, run);
            }
        }

        let inter: Vec<Var> =
            free_codes.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| guard(tape, *v)).collect();

        if w.contrastive_free > 0.0 {
            let e_g = guard(tape, gt.as_ref().expect("computed when contrastive_free > 0").hidden);
            let intra: Vec<Var> = ref_codes.iter().flatten().map(|v| guard(tape, *v)).collect();
            let a = info_nce_on_tape(tape, it.free.hidden, e_g, &intra, tau);
            let b = info_nce_on_tape(tape, it.free.hidden, e_g, &inter, tau);
            free_terms.extend(a.into_iter().chain(b));
        }

        if let Some((k, run)) = &it.perturbed {
            let teacher = &ref_runs[k];
            let targets: Vec<usize> = teacher.record.steps.iter().map(|s| s.chosen).collect();
            il_terms.push(il_on_tape(tape, teacher, &targets));
            rl_terms.push(rl_on_tape(tape, run, &run.record, w.gamma));
            if w.contrastive_perturbed > 0.0 {
                let e_og = guard(tape, teacher.hidden);
                let intra: Vec<Var> = ref_codes
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| j != k)
                    .filter_map(|(_, v)| v.map(|v| guard(tape, v)))
                    .collect();
                let a = info_nce_on_tape(tape, run.hidden, e_og, &intra, tau);
                let b = info_nce_on_tape(tape, run.hidden, e_og, &inter, tau);
                pert_terms.extend(a.into_iter().chain(b));
            }
        }
    }

    let mut mean = |terms: &[Var]| {
        if terms.is_empty() {
            return tape.constant(0.0);
        }
        let s = tape.sum(terms);
        tape.scale(s, 1.0 / batch)
    };
    let imitation = mean(&il_terms);
    let reinforcement = mean(&rl_terms);
    let contrastive_free = mean(&free_terms);
    let contrastive_perturbed = mean(&pert_terms);
    let parts = [
        reinforcement,
        tape.scale(imitation, w.imitation),
        tape.scale(contrastive_free, w.contrastive_free),
        tape.scale(contrastive_perturbed, w.contrastive_perturbed),
    ];
    let total = tape.sum(&parts);
    Ok(LossVars { imitation, reinforcement, contrastive_free, contrastive_perturbed, total })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Insertion {
    pub path_id: String,
    pub t: usize,
    pub edge: [String; 2],
    /// Node ids of the perturbation-free rollout that matched.
    pub rollout: Vec<String>,
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub imitation: f64,
    pub reinforcement: f64,
    pub contrastive_free: f64,
    pub contrastive_perturbed: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub pool_size: usize,
    pub pool_episodes: usize,
    pub pool_proportion: f64,
    pub inserted: Vec<Insertion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolRecord {
    pub path_id: String,
    pub t: usize,
    pub iteration: usize,
}

/// Everything needed to resume training bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub iteration: usize,
    pub config: TrainConfig,
    pub params: Checkpoint,
    pub velocity: Vec<Vec<f64>>,
    pub pool: Vec<PoolRecord>,
}

pub struct Trainer<'d> {
    data: &'d TrainData,
    pub config: TrainConfig,
    pub params: ModelParams,
    velocity: Vec<Vec<f64>>,
    pub pool: PerturbedPool,
    pub iteration: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(data: &'d TrainData, config: TrainConfig, vocab: usize) -> Result<Self, TrainError> {
        config.validate()?;
        if data.episodes.is_empty() {
            return Err(TrainError::Config("no training episodes".into()));
        }
        let params = ModelParams::init(config.dim, vocab, config.seed);
        let velocity = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Ok(Self { data, config, params, velocity, pool: PerturbedPool::default(), iteration: 0 })
    }

    pub fn state(&self) -> TrainState {
        let pool = self
            .pool
            .entries()
            .iter()
            .map(|e| PoolRecord {
                path_id: self.data.episodes[e.key.episode].path_id.clone(),
                t: self.data.deletable[e.key.episode][e.key.edge].t,
                iteration: e.iteration,
            })
            .collect();
        TrainState {
            iteration: self.iteration,
            config: self.config.clone(),
            params: self.params.to_checkpoint(),
            velocity: self.velocity.clone(),
            pool,
        }
    }

    pub fn resume(data: &'d TrainData, state: &TrainState) -> Result<Self, TrainError> {
        state.config.validate()?;
        let params = ModelParams::from_checkpoint(&state.params)?;
        let index: BTreeMap<&str, usize> =
            data.episodes.iter().enumerate().map(|(i, e)| (e.path_id.as_str(), i)).collect();
        let mut pool = PerturbedPool::default();
        for r in &state.pool {
            let episode = *index
                .get(r.path_id.as_str())
                .ok_or_else(|| TrainError::Config(format!("pooled episode {} not in training data", r.path_id)))?;
            let edge = data.deletable[episode]
                .iter()
                .position(|d| d.t == r.t)
                .ok_or_else(|| TrainError::Config(format!("pooled edge t={} of {} is not deletable", r.t, r.path_id)))?;
            pool.insert(PoolKey { episode, edge }, r.iteration);
        }
        if state.velocity.len() != params.tensors.len()
            || state.velocity.iter().zip(&params.tensors).any(|(v, t)| v.len() != t.len())
        {
            return Err(TrainError::Config("optimizer state does not match parameters".into()));
        }
        Ok(Self { data, config: state.config.clone(), params, velocity: state.velocity.clone(), pool, iteration: state.iteration })
    }

    pub fn pool_proportion(&self) -> f64 {
        match self.data.perturbable_count() {
            0 => 0.0,
            n => self.pool.episode_count() as f64 / n as f64,
        }
    }

    pub fn done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    /// Runs one iteration and applies the update.
    pub fn step(&mut self) -> Result<IterationReport, TrainError> {
        let it = self.iteration;
        let cfg = &self.config;
        let data = self.data;
        let opts = LossOptions::from_config(cfg);
        let n = data.episodes.len();
        let batch = sample(&mut seeds::rng(cfg.seed, seeds::BATCH, it as u64), n, cfg.batch_size.min(n)).into_vec();
        let mut roll_rng = seeds::rng(cfg.seed, seeds::ROLLOUT, it as u64);
        let mut pool_rng = seeds::rng(cfg.seed, seeds::POOL, it as u64);
        let forced = cfg.forced_steps(it);

        let mut tape = Tape::new(&self.params.tensors);
        let mut items: Vec<ItemRuns> = Vec::with_capacity(batch.len());
        for &e in &batch {
            let ep = &data.episodes[e];
            let context = encode_on_tape(&mut tape, &ep.instruction);
            let free = run_on_tape(&mut tape, &context, cfg.dim, data.scene(e), ep, Mode::Sample, &[], &opts.rollout, &mut roll_rng)?;
            let student = match forced {
                Some(teacher_steps) => Some(run_on_tape(
                    &mut tape,
                    &context,
                    cfg.dim,
                    data.scene(e),
                    ep,
                    Mode::Mixed { path: &ep.path, teacher_steps },
                    &[],
                    &opts.rollout,
                    &mut roll_rng,
                )?),
                None => None,
            };
            items.push(ItemRuns { episode: e, context, free, perturbed: None, student });
        }

        let mut inserted = Vec::new();
        if cfg.augment {
            let pairs: Vec<(usize, &RolloutRecord)> = items.iter().map(|i| (i.episode, &i.free.record)).collect();
            for m in match_gt(&pairs, &data.deletable, &self.pool) {
                let k = m.edges[pool_rng.gen_range(0..m.edges.len())];
                let key = PoolKey { episode: m.episode, edge: k };
                if self.pool.insert(key, it) {
                    let scene = data.scene(m.episode);
                    let d = &data.deletable[m.episode][k];
                    let rec = &items.iter().find(|i| i.episode == m.episode).expect("matched from batch").free.record;
                    inserted.push(Insertion {
                        path_id: data.episodes[m.episode].path_id.clone(),
                        t: d.t,
                        edge: [scene.id(d.from).to_string(), scene.id(d.to).to_string()],
                        rollout: scene.path_ids(&rec.path()),
                    });
                }
            }
            for item in items.iter_mut() {
                let pooled = self.pool.edges_of(item.episode);
                if pooled.is_empty() {
                    continue;
                }
                let k = pooled[pool_rng.gen_range(0..pooled.len())];
                let ep = &data.episodes[item.episode];
                let event = data.deletable[item.episode][k].event();
                let run = run_on_tape(&mut tape, &item.context, cfg.dim, data.scene(item.episode), ep, Mode::Sample, &[event], &opts.rollout, &mut roll_rng)?;
                item.perturbed = Some((k, run));
            }
        }

        let loss = assemble(&mut tape, data, &items, &opts)?;
        let total = tape.scalar(loss.total);
        if !total.is_finite() {
            return Err(TrainError::NonFiniteLoss { iteration: it });
        }
        let grads = tape.backward(loss.total);
        let grad_norm = grads.params.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        let clip = if grad_norm > cfg.clip_norm { cfg.clip_norm / grad_norm } else { 1.0 };
        if !grad_norm.is_finite() {
            return Err(TrainError::NonFiniteLoss { iteration: it });
        }
        let report = IterationReport {
            iteration: it,
            imitation: tape.scalar(loss.imitation),
            reinforcement: tape.scalar(loss.reinforcement),
            contrastive_free: tape.scalar(loss.contrastive_free),
            contrastive_perturbed: tape.scalar(loss.contrastive_perturbed),
            total,
            grad_norm,
            pool_size: self.pool.len(),
            pool_episodes: self.pool.episode_count(),
            pool_proportion: self.pool_proportion(),
            inserted,
        };
        drop(tape);

        let (lr, mu) = (cfg.learning_rate, cfg.momentum);
        for ((t, g), v) in self.params.tensors.iter_mut().zip(&grads.params).zip(&mut self.velocity) {
            for ((w, gi), vi) in t.data.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = mu * *vi + gi * clip;
                *w -= lr * *vi;
            }
        }
        self.iteration += 1;
        Ok(report)
    }
}
