#![allow(dead_code)]

use gaxnet::config::Config;
use gaxnet::env::UavEnv;
use gaxnet::mixer::Mixer;
use gaxnet::nn::Tensor;
use gaxnet::policy::{ExchangeMode, PolicyMode, Team};
use gaxnet::rollout::{rollout, Episode};
use gaxnet::trainer::Learner;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;

/// `||a - n|| / max(||a||, ||n||)`.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-12)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Observation block with all neighbours observable.
pub fn random_obs(rng: &mut ChaCha8Rng, rows: usize, n_agents: usize) -> Tensor {
    let d = 10 + 4 * (n_agents - 1);
    let mut t = random_tensor(rng, &[rows, d], 0.0, 1.0);
    for r in 0..rows {
        for j in 0..n_agents - 1 {
            t.row_mut(r)[10 + 4 * j + 3] = 1.0;
        }
    }
    t
}

pub fn production_config(mode: PolicyMode, exchange: ExchangeMode) -> Config {
    Config {
        mode,
        exchange,
        ..Config::default()
    }
}

/// A fixed unrolled problem: `slots` slots of `[batch, obs_dim]` blocks per
/// agent, chosen actions, states and loss weights on `Q_tot`.
pub struct ChainProblem {
    pub team: Team,
    pub mixer: Mixer,
    pub obs: Vec<Vec<Tensor>>,
    pub states: Vec<Tensor>,
    pub actions: Vec<Vec<Vec<usize>>>,
    pub weights: Vec<Tensor>,
}

impl ChainProblem {
    pub fn new(cfg: &Config, slots: usize, batch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let env = cfg.env().unwrap();
        let team = Team::new(&cfg.actor().unwrap(), &mut rng).unwrap();
        let mixer = Mixer::new(env.n_agents, env.state_dim(), cfg.mixer_width, &mut rng).unwrap();
        let n = env.n_agents;
        let obs = (0..slots)
            .map(|_| (0..n).map(|_| random_obs(&mut rng, batch, n)).collect())
            .collect();
        let states = (0..slots)
            .map(|_| random_tensor(&mut rng, &[batch, env.state_dim()], 0.0, 1.0))
            .collect();
        let actions = (0..slots)
            .map(|_| {
                (0..batch)
                    .map(|_| (0..n).map(|_| rng.gen_range(0..8)).collect())
                    .collect()
            })
            .collect();
        let weights = (0..slots)
            .map(|_| random_tensor(&mut rng, &[batch, 1], -1.0, 1.0))
            .collect();
        Self {
            team,
            mixer,
            obs,
            states,
            actions,
            weights,
        }
    }

    fn utilities(&self, outputs: &[gaxnet::policy::StepOutput], t: usize) -> Tensor {
        let b = self.weights[t].rows();
        let n = outputs.len();
        let mut u = Tensor::zeros(&[b, n]);
        for (a, out) in outputs.iter().enumerate() {
            for r in 0..b {
                u.row_mut(r)[a] = out.q.row(r)[self.actions[t][r][a]];
            }
        }
        u
    }

    /// `Σ_t Σ_b c_{t,b} Q_tot`.
    pub fn loss(&self) -> f64 {
        let b = self.weights[0].rows();
        let mut carry = self.team.initial_state(b);
        let mut total = 0.0;
        for t in 0..self.obs.len() {
            let step = self.team.forward_step(&carry, &self.obs[t]).unwrap();
            let u = self.utilities(&step.outputs, t);
            let (q, _) = self.mixer.forward(&u, &self.states[t]).unwrap();
            total += q
                .data()
                .iter()
                .zip(self.weights[t].data())
                .map(|(a, c)| a * c)
                .sum::<f64>();
            carry = step.next;
        }
        total
    }

    /// Analytic observation gradients, `[t][agent]`.
    pub fn obs_gradients(&mut self) -> Vec<Vec<Tensor>> {
        let b = self.weights[0].rows();
        let mut carry = self.team.initial_state(b);
        let mut caches = Vec::new();
        let mut d_q = Vec::new();
        for t in 0..self.obs.len() {
            let step = self.team.forward_step(&carry, &self.obs[t]).unwrap();
            let u = self.utilities(&step.outputs, t);
            let (_, mc) = self.mixer.forward(&u, &self.states[t]).unwrap();
            let du = self.mixer.backward(&mc, &self.weights[t]).unwrap();
            let per_agent = (0..step.outputs.len())
                .map(|a| {
                    let mut g = Tensor::zeros(&[b, 8]);
                    for r in 0..b {
                        g.row_mut(r)[self.actions[t][r][a]] = du.row(r)[a];
                    }
                    g
                })
                .collect::<Vec<_>>();
            d_q.push(per_agent);
            caches.push(step.caches);
            carry = step.next;
        }
        self.team.backward(&caches, &d_q).unwrap()
    }

    /// Relative error of the analytic observation gradient against central
    /// differences over every observation entry.
    pub fn obs_check(&mut self) -> f64 {
        let analytic = self.obs_gradients();
        let mut a = Vec::new();
        let mut num = Vec::new();
        for t in 0..self.obs.len() {
            for n in 0..self.obs[t].len() {
                for i in 0..self.obs[t][n].len() {
                    let orig = self.obs[t][n].data()[i];
                    self.obs[t][n].data_mut()[i] = orig + FD_STEP;
                    let up = self.loss();
                    self.obs[t][n].data_mut()[i] = orig - FD_STEP;
                    let down = self.loss();
                    self.obs[t][n].data_mut()[i] = orig;
                    num.push((up - down) / (2.0 * FD_STEP));
                    a.push(analytic[t][n].data()[i]);
                }
            }
        }
        rel_error(&a, &num)
    }
}

/// Short random-policy episodes for loss checks.
pub fn random_episodes(cfg: &Config, count: usize, seed: u64) -> Vec<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let team = Team::new(&cfg.actor().unwrap(), &mut rng).unwrap();
    let mut env = UavEnv::new(cfg.env().unwrap()).unwrap();
    (0..count)
        .map(|i| {
            rollout(&mut env, &team, 1.0, seed * 1000 + i as u64, &mut rng)
                .unwrap()
                .episode
        })
        .collect()
}

/// Relative error of the TD-loss parameter gradient against central
/// differences on `per_tensor` entries of every actor and mixer tensor.
pub fn td_param_check(cfg: &Config, episodes: &[Episode], per_tensor: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut learner = Learner::new(cfg, &mut rng).unwrap();
    // Perturb the target copy so the bootstrap term is not trivially tied
    // to the online weights.
    for a in &mut learner.target.actors {
        let ids: Vec<_> = a.params().ids().collect();
        for id in ids {
            for v in a.params_mut().value_mut(id).data_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
    }
    let batch: Vec<&Episode> = episodes.iter().collect();
    learner.zero_grad();
    learner.loss_and_grad(&batch).unwrap();

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    // (store index, param id, entry): store 0..N are actors, N is the mixer
    let n_agents = learner.online.actors.len();
    let mut probes = Vec::new();
    for s in 0..=n_agents {
        let store = if s < n_agents {
            learner.online.actors[s].params()
        } else {
            learner.mixer.params()
        };
        for id in store.ids() {
            let len = store.value(id).len();
            for _ in 0..per_tensor.min(len) {
                probes.push((s, id, rng.gen_range(0..len)));
            }
        }
    }
    let grads: Vec<f64> = probes
        .iter()
        .map(|&(s, id, i)| {
            let store = if s < n_agents {
                learner.online.actors[s].params()
            } else {
                learner.mixer.params()
            };
            store.grad(id).data()[i]
        })
        .collect();
    for (&(s, id, i), g) in probes.iter().zip(grads) {
        let eval = |delta: f64, l: &mut Learner| {
            let store = if s < n_agents {
                l.online.actors[s].params_mut()
            } else {
                l.mixer.params_mut()
            };
            store.value_mut(id).data_mut()[i] += delta;
            l.zero_grad();
            l.loss_and_grad(&batch).unwrap()
        };
        let up = eval(FD_STEP, &mut learner);
        let down = eval(-2.0 * FD_STEP, &mut learner);
        eval(FD_STEP, &mut learner);
        numeric.push((up - down) / (2.0 * FD_STEP));
        analytic.push(g);
    }
    rel_error(&analytic, &numeric)
}

/// Zero-violation count of the monotonicity probe over `trials` random
/// mixers, states and utilities.
pub fn monotonicity_violations(cfg: &Config, trials: usize, seed: u64) -> usize {
    let env = cfg.env().unwrap();
    let mut violations = 0;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + trial as u64);
        let mixer = Mixer::new(env.n_agents, env.state_dim(), cfg.mixer_width, &mut rng).unwrap();
        let s = random_tensor(&mut rng, &[1, env.state_dim()], -1.0, 1.0);
        let u = random_tensor(&mut rng, &[1, env.n_agents], -5.0, 5.0);
        let (base, _) = mixer.forward(&u, &s).unwrap();
        for n in 0..env.n_agents {
            let mut up = u.clone();
            up.data_mut()[n] += 1e-3;
            let (q, _) = mixer.forward(&up, &s).unwrap();
            if q.data()[0] < base.data()[0] {
                violations += 1;
            }
        }
    }
    violations
}
