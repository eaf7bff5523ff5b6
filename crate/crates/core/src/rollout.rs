//! Episode rollouts with attempt-triggered edge deletion.
//!
//! The driver owns the environment side: observations, teacher forcing,
//! action selection, perturbation firing and rewards. Anything that can turn
//! an [`Observation`] into an action distribution can be driven through a
//! [`Policy`].

use rand::Rng;
use thiserror::Error;

use crate::graph::{Edge, NodeId, Path, Scene, SceneView};
use crate::perturbation::PerturbationEvent;
use crate::worldgen::{heading_between, observe, Episode, Observation};

/// Terminal bonus (or penalty when negative) for stopping inside (outside)
/// the success radius.
pub const TERMINAL_REWARD: f64 = 2.0;

/// Per-move reward: the reduction in geodesic distance to the goal, clipped
/// to ±1 so long edges do not swamp the terminal signal.
pub fn progress_reward(reduction: f64) -> f64 {
    reduction.clamp(-1.0, 1.0)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RolloutError {
    #[error("teacher path must start at the episode start")]
    TeacherStart,
    #[error("teacher path step {step}: node {node} is not a candidate")]
    TeacherNotAdjacent { step: usize, node: String },
}

pub trait Policy {
    /// Action distribution over `obs.candidates` and a value estimate.
    fn act(&mut self, obs: &Observation) -> (Vec<f64>, f64);
    /// Records the candidate actually taken after `act`.
    fn commit(&mut self, obs: &Observation, chosen: usize);
    /// Trajectory encoding after the last step.
    fn encoding(&self) -> Vec<f64> {
        Vec::new()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    /// Follow `path` and stop at its end. Events fire at their designated
    /// step `t` when the agent stands on `event.from`.
    Teacher(&'a Path),
    /// Like `Teacher` but without a final STOP (replays of unterminated
    /// trajectories).
    TeacherNoStop(&'a Path),
    Sample,
    Greedy,
    /// Teacher-forced along `path` for the first `teacher_steps` steps, then
    /// sampled from the policy.
    Mixed { path: &'a Path, teacher_steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutConfig {
    pub max_steps: usize,
    pub success_radius: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self { max_steps: 15, success_radius: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub at: NodeId,
    /// Candidate targets; `None` is STOP.
    pub candidates: Vec<Option<NodeId>>,
    /// Policy output before masking.
    pub probs: Vec<f64>,
    /// Candidates removed by perturbation events at this step.
    pub masked: Vec<usize>,
    pub chosen: usize,
    /// Log-probability of `chosen` under the masked, renormalized
    /// distribution.
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
}

impl StepRecord {
    /// Distribution actually acted on: masked entries zeroed, the rest
    /// renormalized (uniform over the rest if they carry no mass).
    pub fn effective_probs(&self) -> Vec<f64> {
        masked_distribution(&self.probs, &self.masked)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiredEvent {
    pub step: usize,
    pub event: PerturbationEvent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub nodes: Vec<NodeId>,
    pub steps: Vec<StepRecord>,
    pub encoding: Vec<f64>,
    pub fired: Vec<FiredEvent>,
    /// False when the step budget ran out before STOP.
    pub stopped: bool,
}

impl RolloutRecord {
    pub fn path(&self) -> Path {
        Path(self.nodes.clone())
    }

    pub fn final_node(&self) -> NodeId {
        *self.nodes.last().expect("rollouts start somewhere")
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn traversed_edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.nodes.windows(2).map(|w| Edge::new(w[0], w[1]))
    }

    /// Events that reproduce this trajectory's masks under teacher forcing.
    pub fn replay_events(&self) -> Vec<PerturbationEvent> {
        self.fired
            .iter()
            .map(|f| PerturbationEvent { t: f.step, from: f.event.from, to: f.event.to })
            .collect()
    }
}

pub fn masked_distribution(probs: &[f64], masked: &[usize]) -> Vec<f64> {
    let mut out: Vec<f64> = probs.to_vec();
    for &m in masked {
        out[m] = 0.0;
    }
    let total: f64 = out.iter().sum();
    if total > 0.0 {
        out.iter_mut().for_each(|p| *p /= total);
    } else {
        let free = probs.len() - masked.len();
        for (i, p) in out.iter_mut().enumerate() {
            *p = if masked.contains(&i) { 0.0 } else { 1.0 / free as f64 };
        }
    }
    out
}

fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    best
}

/// Runs one episode. `events` are deletions the environment imposes; in
/// sample and greedy modes an event fires the first time the chosen action
/// would traverse its edge (in either direction), the candidate is masked,
/// and a replacement is drawn from the renormalized distribution.
pub fn drive<P: Policy, R: Rng>(
    policy: &mut P,
    scene: &Scene,
    episode: &Episode,
    mode: Mode<'_>,
    events: &[PerturbationEvent],
    config: &RolloutConfig,
    rng: &mut R,
) -> Result<RolloutRecord, RolloutError> {
    let goal = episode.goal();
    let dist_to_goal = scene.view().distances_to(goal);
    let (teacher, teacher_stops) = match mode {
        Mode::Teacher(p) => (Some(p), true),
        Mode::TeacherNoStop(p) => (Some(p), false),
        Mode::Mixed { path, .. } => (Some(path), true),
        _ => (None, false),
    };
    let forced_steps = match mode {
        Mode::Mixed { teacher_steps, .. } => teacher_steps,
        _ => usize::MAX,
    };
    if let Some(p) = teacher {
        if p.first() != Some(episode.start()) {
            return Err(RolloutError::TeacherStart);
        }
    }
    let budget = match (teacher, mode) {
        (_, Mode::Mixed { .. }) | (None, _) => config.max_steps,
        (Some(p), _) => p.len() - usize::from(!teacher_stops),
    };

    let mut pending: Vec<PerturbationEvent> = events.to_vec();
    let mut removed: Vec<Edge> = Vec::new();
    let mut fired = Vec::new();
    let mut at = episode.start();
    let mut heading = episode.heading;
    let mut nodes = vec![at];
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut stopped = false;

    for step in 0..budget {
        let mut view: SceneView<'_> = scene.view();
        for e in &removed {
            view = view.without(*e).expect("fired edges exist in the scene");
        }
        let obs = observe(&view, at, heading);
        let (probs, value) = policy.act(&obs);
        debug_assert_eq!(probs.len(), obs.candidates.len());
        let mut masked: Vec<usize> = Vec::new();

        let forced = teacher.filter(|_| step < forced_steps);
        let chosen = match forced {
            Some(path) => {
                let mut i = 0;
                while i < pending.len() {
                    let ev = pending[i];
                    if ev.t == step && ev.from == at {
                        if let Some(idx) = obs.index_of(ev.to) {
                            masked.push(idx);
                        }
                        removed.push(ev.edge());
                        fired.push(FiredEvent { step, event: ev });
                        pending.remove(i);
                    } else {
                        i += 1;
                    }
                }
                match path.nodes().get(step + 1) {
                    None => obs.stop_index(),
                    Some(&next) => obs
                        .index_of(next)
                        .filter(|idx| !masked.contains(idx))
                        .ok_or_else(|| RolloutError::TeacherNotAdjacent { step, node: scene.id(next).into() })?,
                }
            }
            None => loop {
                let dist = masked_distribution(&probs, &masked);
                let pick = match mode {
                    Mode::Greedy => argmax(&dist),
                    _ => sample_index(&dist, rng),
                };
                let Some(target) = obs.candidates[pick].node else { break pick };
                let hit = pending.iter().position(|ev| ev.edge() == Edge::new(at, target));
                match hit {
                    Some(k) => {
                        let ev = pending.remove(k);
                        masked.push(pick);
                        removed.push(ev.edge());
                        fired.push(FiredEvent { step, event: PerturbationEvent { t: ev.t, from: at, to: target } });
                    }
                    None => break pick,
                }
            },
        };

        let effective = masked_distribution(&probs, &masked);
        policy.commit(&obs, chosen);
        let mut record = StepRecord {
            at,
            candidates: obs.candidates.iter().map(|c| c.node).collect(),
            probs,
            masked,
            chosen,
            log_prob: effective[chosen].ln(),
            value,
            reward: 0.0,
        };
        match obs.candidates[chosen].node {
            None => {
                let ne = dist_to_goal[at.index()];
                record.reward = if ne <= config.success_radius { TERMINAL_REWARD } else { -TERMINAL_REWARD };
                steps.push(record);
                stopped = true;
                break;
            }
            Some(next) => {
                record.reward = progress_reward(dist_to_goal[at.index()] - dist_to_goal[next.index()]);
                heading = heading_between(scene.position(at), scene.position(next));
                at = next;
                nodes.push(at);
                steps.push(record);
            }
        }
    }
    if !stopped && (teacher.is_none() || matches!(mode, Mode::Mixed { .. })) {
        if let Some(last) = steps.last_mut() {
            last.reward -= TERMINAL_REWARD;
        }
    }
    Ok(RolloutRecord { nodes, steps, encoding: policy.encoding(), fired, stopped })
}

/// Oracle that puts all mass on the next ground-truth node and STOP at the
/// goal. Once off the ground truth it has no preference.
pub struct GtReplay<'e> {
    path: &'e Path,
}

impl<'e> GtReplay<'e> {
    pub fn new(path: &'e Path) -> Self {
        Self { path }
    }
}

impl Policy for GtReplay<'_> {
    fn act(&mut self, obs: &Observation) -> (Vec<f64>, f64) {
        let n = obs.candidates.len();
        let nodes = self.path.nodes();
        let target = match nodes.iter().position(|&x| x == obs.at) {
            Some(i) if i + 1 == nodes.len() => Some(obs.stop_index()),
            Some(i) => obs.index_of(nodes[i + 1]),
            None => None,
        };
        let mut probs = vec![0.0; n];
        match target {
            Some(t) => probs[t] = 1.0,
            None => probs.iter_mut().for_each(|p| *p = 1.0 / n as f64),
        }
        (probs, 0.0)
    }

    fn commit(&mut self, _obs: &Observation, _chosen: usize) {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Position;
    use crate::seeds;

    fn s4() -> Scene {
        let nodes = [("A", 0.0, 0.0), ("B", 1.0, 0.0), ("C", 1.0, 1.0), ("D", 0.0, 1.0)]
            .iter()
            .map(|(id, x, y)| (id.to_string(), Position::new(*x, *y, 0.0)))
            .collect();
        let e = |a: &str, b: &str| (a.to_string(), b.to_string());
        Scene::new("s4", nodes, &[e("A", "B"), e("B", "C"), e("C", "D"), e("D", "A"), e("A", "C")])
            .unwrap()
            .with_landmarks(vec![0, 1, 2, 3])
    }

    fn episode(s: &Scene, ids: &[&str]) -> Episode {
        Episode {
            path_id: "e".into(),
            scan: "s4".into(),
            path: s.path_from_ids(ids).unwrap(),
            heading: 0.0,
            instruction: vec![0],
        }
    }

    /// Fixed preference order over candidates, independent of state.
    struct Scripted(Vec<f64>);

    impl Policy for Scripted {
        fn act(&mut self, obs: &Observation) -> (Vec<f64>, f64) {
            let mut p: Vec<f64> = obs
                .candidates
                .iter()
                .map(|c| c.node.map_or(self.0[4], |n| self.0[n.index()]))
                .collect();
            let total: f64 = p.iter().sum();
            p.iter_mut().for_each(|x| *x /= total);
            (p, 0.5)
        }
        fn commit(&mut self, _obs: &Observation, _chosen: usize) {}
    }

    #[test]
    fn teacher_follows_ground_truth() {
        let s = s4();
        let ep = episode(&s, &["A", "B", "C"]);
        let mut oracle = GtReplay::new(&ep.path);
        let mut rng = seeds::rng(0, "t", 0);
        let rec = drive(&mut oracle, &s, &ep, Mode::Teacher(&ep.path), &[], &RolloutConfig::default(), &mut rng)
            .unwrap();
        assert_eq!(rec.nodes, ep.path.nodes());
        assert!(rec.stopped);
        assert_eq!(rec.steps.len(), 3);
        assert_eq!(rec.steps[2].reward, TERMINAL_REWARD);
        assert!((rec.steps[0].reward - 0.4142135623730951).abs() < 1e-12);
        assert_eq!(progress_reward(1.0), 1.0);
        assert_eq!(progress_reward(-7.5), -1.0);
    }

    #[test]
    fn greedy_masking_takes_next_best() {
        let s = s4();
        let ep = episode(&s, &["A", "B", "C"]);
        let (a, b) = (s.lookup("A").unwrap(), s.lookup("B").unwrap());
        // preferences: B > D > C > A, STOP low
        let mut policy = Scripted(vec![0.01, 0.5, 0.1, 0.3, 0.09]);
        let ev = PerturbationEvent { t: 0, from: a, to: b };
        let cfg = RolloutConfig { max_steps: 1, ..Default::default() };
        let mut rng = seeds::rng(0, "t", 0);
        let rec = drive(&mut policy, &s, &ep, Mode::Greedy, &[ev], &cfg, &mut rng).unwrap();
        let step = &rec.steps[0];
        assert_eq!(step.candidates[step.chosen], s.lookup("D").ok());
        assert_eq!(rec.fired.len(), 1);
        let eff = step.effective_probs();
        let bi = step.candidates.iter().position(|c| *c == Some(b)).unwrap();
        assert_eq!(eff[bi], 0.0);
        let scale = 1.0 - step.probs[bi];
        for (i, (e, p)) in eff.iter().zip(&step.probs).enumerate() {
            if i != bi {
                assert!((e - p / scale).abs() < 1e-12);
            }
        }
        assert!((eff.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fired_edge_stays_removed() {
        let s = s4();
        let ep = episode(&s, &["A", "B", "C"]);
        let (a, b) = (s.lookup("A").unwrap(), s.lookup("B").unwrap());
        let mut policy = Scripted(vec![0.3, 0.5, 0.05, 0.1, 0.05]);
        let ev = PerturbationEvent { t: 0, from: a, to: b };
        let mut rng = seeds::rng(0, "t", 0);
        let rec = drive(&mut policy, &s, &ep, Mode::Greedy, &[ev], &RolloutConfig::default(), &mut rng).unwrap();
        assert_eq!(rec.fired.len(), 1);
        for st in &rec.steps {
            if st.at == a {
                assert!(!st.candidates.contains(&Some(b)) || !rec.fired.is_empty() && st.masked.len() == 1);
            }
        }
        assert!(rec.traversed_edges().all(|e| e != Edge::new(a, b)));
        assert!(!rec.stopped);
        assert_eq!(rec.steps.len(), RolloutConfig::default().max_steps);
    }

    #[test]
    fn sampling_is_reproducible() {
        let s = s4();
        let ep = episode(&s, &["A", "B", "C"]);
        let run = || {
            let mut policy = Scripted(vec![0.2, 0.2, 0.2, 0.2, 0.2]);
            let mut rng = seeds::rng(5, seeds::ROLLOUT, 1);
            drive(&mut policy, &s, &ep, Mode::Sample, &[], &RolloutConfig::default(), &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn teacher_with_event_masks_and_follows_detour() {
        let s = s4();
        let ep = episode(&s, &["A", "B", "C"]);
        let (a, b) = (s.lookup("A").unwrap(), s.lookup("B").unwrap());
        let obs_path = s.path_from_ids(&["A", "C"]).unwrap();
        let mut policy = Scripted(vec![0.2, 0.2, 0.2, 0.2, 0.2]);
        let ev = PerturbationEvent { t: 0, from: a, to: b };
        let mut rng = seeds::rng(0, "t", 0);
        let rec = drive(&mut policy, &s, &ep, Mode::Teacher(&obs_path), &[ev], &RolloutConfig::default(), &mut rng)
            .unwrap();
        assert_eq!(rec.nodes, obs_path.nodes());
        assert_eq!(rec.steps[0].masked.len(), 1);
        assert!((rec.steps[0].log_prob - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        // stepping onto the removed edge is a teacher error
        let bad = s.path_from_ids(&["A", "B", "C"]).unwrap();
        let err = drive(&mut policy, &s, &ep, Mode::Teacher(&bad), &[ev], &RolloutConfig::default(), &mut rng);
        assert!(matches!(err, Err(RolloutError::TeacherNotAdjacent { .. })));
    }

    #[test]
    fn masking_all_mass_falls_back_to_uniform() {
        let d = masked_distribution(&[0.0, 1.0, 0.0], &[1]);
        assert_eq!(d, vec![0.5, 0.0, 0.5]);
    }
}
