//! Encoder-decoder navigation policy with dot-product attention over the
//! instruction and a linear critic head.
//!
//! The decoder hidden state after the final step doubles as the trajectory
//! encoding used by the contrastive objectives. All computation goes through
//! a [`Tape`], so the same code serves inference and training.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{softmax, ParamId, Tape, Tensor, Var};
use crate::graph::{Path, Scene};
use crate::perturbation::PerturbationEvent;
use crate::rollout::{drive, Mode, Policy, RolloutConfig, RolloutError, RolloutRecord};
use crate::seeds;
use crate::worldgen::{landmark_token, Candidate, Episode, Observation};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Geometric candidate features: sin, cos, elevation, scaled distance and
/// a move flag that is 0 for STOP.
pub const GEO: usize = 5;
const DIST_SCALE: f64 = 0.1;

const EMB: ParamId = 0;
const ENC_WX: ParamId = 1;
const ENC_WH: ParamId = 2;
const ENC_B: ParamId = 3;
const ATT_W: ParamId = 4;
const DEC_WH: ParamId = 5;
const DEC_WC: ParamId = 6;
const DEC_WA: ParamId = 7;
const DEC_WO: ParamId = 8;
const DEC_B: ParamId = 9;
const FEAT_W: ParamId = 10;
const FEAT_B: ParamId = 11;
const OUT_W: ParamId = 12;
const OUT_B: ParamId = 13;
const CRITIC_W: ParamId = 14;
const CRITIC_B: ParamId = 15;

pub const PARAM_NAMES: [&str; 16] = [
    "embedding",
    "encoder.wx",
    "encoder.wh",
    "encoder.b",
    "attention.w",
    "decoder.wh",
    "decoder.wc",
    "decoder.wa",
    "decoder.wo",
    "decoder.b",
    "feature.w",
    "feature.b",
    "output.w",
    "output.b",
    "critic.w",
    "critic.b",
];

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("token {token} outside vocabulary of {vocab}")]
    UnknownToken { token: u32, vocab: usize },
    #[error("empty instruction")]
    EmptyInstruction,
    #[error("invalid path: {0}")]
    InvalidPath(#[from] RolloutError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dim: usize,
    pub vocab: usize,
    pub tensors: Vec<Tensor>,
}

fn shapes(dim: usize, vocab: usize) -> [(usize, usize); 16] {
    let d = dim;
    [
        (vocab, d),
        (d, d),
        (d, d),
        (d, 1),
        (d, d),
        (d, d),
        (d, d),
        (d, d),
        (d, d),
        (d, 1),
        (d, GEO),
        (d, 1),
        (d, 2 * d),
        (d, 1),
        (d, 1),
        (1, 1),
    ]
}

fn is_bias(id: ParamId) -> bool {
    matches!(id, ENC_B | DEC_B | FEAT_B | OUT_B | CRITIC_B)
}

impl ModelParams {
    pub fn zeros(dim: usize, vocab: usize) -> Self {
        let tensors = shapes(dim, vocab).iter().map(|&(r, c)| Tensor::zeros(r, c)).collect();
        Self { dim, vocab, tensors }
    }

    /// Weights uniform in ±1/√d, biases zero.
    pub fn init(dim: usize, vocab: usize, seed: u64) -> Self {
        let mut params = Self::zeros(dim, vocab);
        let bound = 1.0 / (dim as f64).sqrt();
        for (id, t) in params.tensors.iter_mut().enumerate() {
            if is_bias(id) {
                continue;
            }
            let mut rng = seeds::rng(seed, seeds::INIT, id as u64);
            t.data.iter_mut().for_each(|w| *w = rng.gen_range(-bound..bound));
        }
        params
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            dim: self.dim,
            vocab: self.vocab,
            tensors: PARAM_NAMES
                .iter()
                .zip(&self.tensors)
                .map(|(name, t)| NamedTensor { name: name.to_string(), rows: t.rows, cols: t.cols, data: t.data.clone() })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, AgentError> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(AgentError::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        let expected = shapes(ck.dim, ck.vocab);
        if ck.tensors.len() != expected.len() {
            return Err(AgentError::Checkpoint(format!("expected {} tensors, found {}", expected.len(), ck.tensors.len())));
        }
        let mut tensors = Vec::with_capacity(expected.len());
        for ((t, name), (r, c)) in ck.tensors.iter().zip(PARAM_NAMES).zip(expected) {
            if t.name != name || t.rows != r || t.cols != c || t.data.len() != r * c {
                return Err(AgentError::Checkpoint(format!("tensor {} has unexpected name or shape", t.name)));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(AgentError::Checkpoint(format!("tensor {} holds non-finite values", t.name)));
            }
            tensors.push(Tensor { rows: r, cols: c, data: t.data.clone() });
        }
        Ok(Self { dim: ck.dim, vocab: ck.vocab, tensors })
    }
}

/// Serialized parameters. serde_json writes shortest round-trip float
/// representations, so a reload is bit-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub dim: usize,
    pub vocab: usize,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

fn geometry(c: &Candidate) -> Vec<f64> {
    if c.is_stop() {
        vec![0.0; GEO]
    } else {
        vec![c.heading_sin, c.heading_cos, c.elevation, c.distance * DIST_SCALE, 1.0]
    }
}

fn check_tokens(params: &ModelParams, tokens: &[u32]) -> Result<(), AgentError> {
    if tokens.is_empty() {
        return Err(AgentError::EmptyInstruction);
    }
    match tokens.iter().find(|&&t| t as usize >= params.vocab) {
        Some(&token) => Err(AgentError::UnknownToken { token, vocab: params.vocab }),
        None => Ok(()),
    }
}

/// Recurrent instruction encoder; one context vector per token.
pub fn encode_on_tape(tape: &mut Tape<'_>, tokens: &[u32]) -> Vec<Var> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut s: Option<Var> = None;
    for &tok in tokens {
        let x = tape.row(EMB, tok as usize);
        let wx = tape.matvec(ENC_WX, x);
        let b = tape.param(ENC_B);
        let mut pre = tape.add(wx, b);
        if let Some(prev) = s {
            let wh = tape.matvec(ENC_WH, prev);
            pre = tape.add(pre, wh);
        }
        let h = tape.tanh(pre);
        out.push(h);
        s = Some(h);
    }
    out
}

fn candidate_feature(tape: &mut Tape<'_>, c: &Candidate) -> Var {
    let geo = tape.input(geometry(c));
    let wg = tape.matvec(FEAT_W, geo);
    let b = tape.param(FEAT_B);
    let mut g = tape.add(wg, b);
    if let Some(k) = c.landmark {
        let e = tape.row(EMB, landmark_token(k) as usize);
        g = tape.add(g, e);
    }
    g
}

/// Tape handles produced by one decoder step.
#[derive(Debug, Clone)]
pub struct StepVars {
    pub logits: Var,
    pub value: Var,
    pub hidden: Var,
    pub features: Vec<Var>,
}

/// One decoder step: attend over `context` with the previous hidden state,
/// update the recurrent state from the attended context, the observation
/// summary and the previously taken action, then score candidates.
pub fn step_on_tape(tape: &mut Tape<'_>, context: &[Var], h: Var, prev: Var, obs: &Observation) -> StepVars {
    let q = tape.matvec(ATT_W, h);
    let scores = tape.dots(context, q);
    let alpha = tape.softmax(scores);
    let ctx = tape.weighted_sum(alpha, context);
    let features: Vec<Var> = obs.candidates.iter().map(|c| candidate_feature(tape, c)).collect();
    let summary = tape.mean(&features);

    let a = tape.matvec(DEC_WH, h);
    let b = tape.matvec(DEC_WC, ctx);
    let c = tape.matvec(DEC_WA, prev);
    let o = tape.matvec(DEC_WO, summary);
    let bias = tape.param(DEC_B);
    let pre = tape.sum(&[a, b, c, o, bias]);
    let hidden = tape.tanh(pre);

    let joint = tape.concat(&[hidden, ctx]);
    let u = tape.matvec(OUT_W, joint);
    let ub = tape.param(OUT_B);
    let u = tape.add(u, ub);
    let u = tape.tanh(u);
    let logits = tape.dots(&features, u);

    let cw = tape.param(CRITIC_W);
    let v = tape.dot(cw, hidden);
    let cb = tape.param(CRITIC_B);
    let value = tape.add(v, cb);
    StepVars { logits, value, hidden, features }
}

/// Policy that records every step on a tape.
pub struct TapedAgent<'t, 'p> {
    tape: &'t mut Tape<'p>,
    context: Vec<Var>,
    h: Var,
    prev: Var,
    pending: Option<StepVars>,
    pub steps: Vec<StepVars>,
}

impl<'t, 'p> TapedAgent<'t, 'p> {
    /// Starts an episode from an already encoded instruction. The initial
    /// hidden state is the last context vector.
    pub fn new(tape: &'t mut Tape<'p>, context: Vec<Var>, dim: usize) -> Self {
        let h = *context.last().expect("instruction encodings are non-empty");
        let prev = tape.input(vec![0.0; dim]);
        Self { tape, context, h, prev, pending: None, steps: Vec::new() }
    }

    pub fn hidden(&self) -> Var {
        self.h
    }
}

impl Policy for TapedAgent<'_, '_> {
    fn act(&mut self, obs: &Observation) -> (Vec<f64>, f64) {
        let vars = step_on_tape(self.tape, &self.context, self.h, self.prev, obs);
        let probs = softmax(self.tape.value(vars.logits));
        let value = self.tape.scalar(vars.value);
        self.pending = Some(vars);
        (probs, value)
    }

    fn commit(&mut self, _obs: &Observation, chosen: usize) {
        let vars = self.pending.take().expect("commit follows act");
        self.h = vars.hidden;
        self.prev = vars.features[chosen];
        self.steps.push(vars);
    }

    fn encoding(&self) -> Vec<f64> {
        self.tape.value(self.h).to_vec()
    }
}

/// Context matrix (L × d) for an instruction.
pub fn encode_instruction(params: &ModelParams, tokens: &[u32]) -> Result<Vec<Vec<f64>>, AgentError> {
    check_tokens(params, tokens)?;
    let mut tape = Tape::new(&params.tensors);
    let vars = encode_on_tape(&mut tape, tokens);
    Ok(vars.iter().map(|v| tape.value(*v).to_vec()).collect())
}

/// Decoder state between steps. `prev` is the candidate taken on the
/// previous step (`None` before the first move).
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub h: Vec<f64>,
    pub prev: Option<Candidate>,
    pub heading: f64,
    pub node: crate::graph::NodeId,
}

impl AgentState {
    pub fn initial(context: &[Vec<f64>], episode: &Episode) -> Self {
        Self { h: context.last().cloned().unwrap_or_default(), prev: None, heading: episode.heading, node: episode.start() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub probs: Vec<f64>,
    pub value: f64,
    /// State after the step; `prev`, `heading` and `node` are updated once
    /// an action is chosen with [`StepOutput::advance`].
    pub state: AgentState,
}

impl StepOutput {
    pub fn advance(&self, scene: &Scene, obs: &Observation, chosen: usize) -> AgentState {
        let mut next = self.state.clone();
        let c = &obs.candidates[chosen];
        if let Some(n) = c.node {
            next.heading = crate::worldgen::heading_between(scene.position(next.node), scene.position(n));
            next.node = n;
        }
        next.prev = Some(c.clone());
        next
    }
}

/// Pure single decoder step.
pub fn step(params: &ModelParams, state: &AgentState, obs: &Observation, context: &[Vec<f64>]) -> StepOutput {
    let mut tape = Tape::new(&params.tensors);
    let ctx: Vec<Var> = context.iter().map(|c| tape.input(c.clone())).collect();
    let h = tape.input(state.h.clone());
    let prev = match &state.prev {
        Some(c) => candidate_feature(&mut tape, c),
        None => tape.input(vec![0.0; params.dim]),
    };
    let vars = step_on_tape(&mut tape, &ctx, h, prev, obs);
    let probs = softmax(tape.value(vars.logits));
    let value = tape.scalar(vars.value);
    let state = AgentState { h: tape.value(vars.hidden).to_vec(), ..state.clone() };
    StepOutput { probs, value, state }
}

/// Runs the policy through an episode (see [`drive`] for mode semantics).
pub fn rollout<R: Rng>(
    params: &ModelParams,
    scene: &Scene,
    episode: &Episode,
    mode: Mode<'_>,
    events: &[PerturbationEvent],
    config: &RolloutConfig,
    rng: &mut R,
) -> Result<RolloutRecord, AgentError> {
    check_tokens(params, &episode.instruction)?;
    let mut tape = Tape::new(&params.tensors);
    let context = encode_on_tape(&mut tape, &episode.instruction);
    let mut agent = TapedAgent::new(&mut tape, context, params.dim);
    Ok(drive(&mut agent, scene, episode, mode, events, config, rng)?)
}

/// Final hidden state after teacher-forcing the decoder along `path`,
/// with `events` imposed.
pub fn encode_path(
    params: &ModelParams,
    scene: &Scene,
    episode: &Episode,
    path: &Path,
    events: &[PerturbationEvent],
) -> Result<Vec<f64>, AgentError> {
    let mut rng = seeds::rng(0, seeds::ROLLOUT, 0);
    let rec = rollout(params, scene, episode, Mode::Teacher(path), events, &RolloutConfig::default(), &mut rng)?;
    Ok(rec.encoding)
}
