//! Central finite differences against the tape.

use std::collections::BTreeMap;

use pertnav::agent::{rollout, ModelParams};
use pertnav::autodiff::{Tape, Var};
use pertnav::rollout::{Mode, RolloutConfig};
use pertnav::seeds;
use pertnav::training::{batch_loss, info_nce, info_nce_on_tape, LossOptions, LossVars, LossWeights, PlanItem, TrainData};
use pertnav::worldgen::{generate_world, vocab_size, WorldConfig};
use rand::Rng;

pub const EPS: f64 = 1e-4;
pub const DIM: usize = 8;
pub const INSTANCES: u64 = 20;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Largest relative error seen and where.
#[derive(Debug, Clone, Default)]
pub struct Worst {
    pub err: f64,
    pub at: String,
}

impl Worst {
    fn note(&mut self, err: f64, at: impl FnOnce() -> String) {
        if err > self.err {
            self.err = err;
            self.at = at();
        }
    }
}

fn world(seed: u64) -> (TrainData, usize) {
    let cfg = WorldConfig { nodes: 14, radius: 9.0, extent: 30.0, landmarks: 5, min_hops: 2, max_hops: 4, seed };
    let w = generate_world(&cfg, 2, 6, 0).unwrap();
    let scenes: BTreeMap<_, _> = w.scenes.into_iter().map(|s| (s.scan().to_string(), s)).collect();
    (TrainData::new(scenes, w.train).unwrap(), vocab_size(cfg.landmarks))
}

/// Two-episode plan with sampled free rollouts, a perturbed rollout where
/// the episode allows one, and a student-forced run on the first item.
fn plan(data: &TrainData, params: &ModelParams, seed: u64) -> Vec<PlanItem> {
    let cfg = RolloutConfig { max_steps: 6, success_radius: 3.0 };
    let mut rng = seeds::rng(seed, seeds::ROLLOUT, 0);
    let mut order: Vec<usize> = (0..data.episodes.len()).collect();
    order.sort_by_key(|&i| (data.deletable[i].is_empty(), seeds::derive(seed, "order", i as u64)));
    order
        .into_iter()
        .take(2)
        .enumerate()
        .map(|(slot, e)| {
            let ep = &data.episodes[e];
            let scene = data.scene(e);
            let free = rollout(params, scene, ep, Mode::Sample, &[], &cfg, &mut rng).unwrap();
            let perturbed = (!data.deletable[e].is_empty()).then(|| {
                let k = rng.gen_range(0..data.deletable[e].len());
                let rec = rollout(params, scene, ep, Mode::Sample, &[data.deletable[e][k].event()], &cfg, &mut rng).unwrap();
                (k, rec)
            });
            let student = (slot == 0).then(|| {
                rollout(params, scene, ep, Mode::Mixed { path: &ep.path, teacher_steps: 1 }, &[], &cfg, &mut rng).unwrap()
            });
            PlanItem { episode: e, free, perturbed, student }
        })
        .collect()
}

/// Checks one loss term of the full training objective on 40 random
/// parameter entries per instance.
pub fn loss_term(pick: fn(&LossVars) -> Var) -> Worst {
    let mut worst = Worst::default();
    for instance in 0..INSTANCES {
        let (data, vocab) = world(100 + instance);
        let params = ModelParams::init(DIM, vocab, instance);
        let plan = plan(&data, &params, instance);
        let opts = LossOptions {
            weights: LossWeights { imitation: 0.7, contrastive_free: 0.9, contrastive_perturbed: 1.3, temperature: 0.5, gamma: 0.9 },
            stop_gradient: false,
            dim: DIM,
            rollout: RolloutConfig { max_steps: 6, success_radius: 3.0 },
        };
        let eval = |p: &ModelParams| {
            let mut tape = Tape::new(&p.tensors);
            let vars = batch_loss(&mut tape, &data, &plan, &opts).unwrap();
            tape.scalar(pick(&vars))
        };
        let mut tape = Tape::new(&params.tensors);
        let vars = batch_loss(&mut tape, &data, &plan, &opts).unwrap();
        let grads = tape.backward(pick(&vars));
        let mut rng = seeds::rng(instance, "fd", 0);
        for _ in 0..40 {
            let t = rng.gen_range(0..params.tensors.len());
            let i = rng.gen_range(0..params.tensors[t].len());
            let mut plus = params.clone();
            plus.tensors[t].data[i] += EPS;
            let mut minus = params.clone();
            minus.tensors[t].data[i] -= EPS;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
            let analytic = grads.params[t][i];
            worst.note(rel_err(analytic, numeric), || {
                format!("instance {instance}, tensor {t}[{i}]: analytic {analytic} numeric {numeric}")
            });
        }
    }
    worst
}

/// InfoNCE with five negatives, differentiated with respect to every input
/// coordinate.
pub fn info_nce_inputs() -> Worst {
    let mut worst = Worst::default();
    for instance in 0..INSTANCES {
        let mut rng = seeds::rng(instance, "nce", 0);
        let mut vec = || (0..DIM).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let inputs: Vec<Vec<f64>> = (0..7).map(|_| vec()).collect();
        let tau = 0.1 + 0.2 * instance as f64 / INSTANCES as f64;
        let value = |xs: &[Vec<f64>]| info_nce(&xs[0], &xs[1], &xs[2..], tau).unwrap();
        let no_params: [pertnav::autodiff::Tensor; 0] = [];
        let mut tape = Tape::new(&no_params);
        let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
        let out = info_nce_on_tape(&mut tape, vars[0], vars[1], &vars[2..], tau).unwrap();
        assert!((tape.scalar(out) - value(&inputs)).abs() < 1e-12);
        let grads = tape.backward(out);
        for (v, var) in vars.iter().enumerate() {
            let analytic = grads.wrt(*var, DIM);
            for i in 0..DIM {
                let mut plus = inputs.clone();
                plus[v][i] += EPS;
                let mut minus = inputs.clone();
                minus[v][i] -= EPS;
                let numeric = (value(&plus) - value(&minus)) / (2.0 * EPS);
                worst.note(rel_err(analytic[i], numeric), || {
                    format!("instance {instance}, input {v}[{i}]: analytic {} numeric {numeric}", analytic[i])
                });
            }
        }
    }
    worst
}
