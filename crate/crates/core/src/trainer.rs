//! Centralised training with decentralised execution: replay of whole
//! episodes, monotonic mixing and TD updates against target copies.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::env::{TrajectoryRecord, UavEnv};
use crate::error::{Error, Result};
use crate::mixer::{MixCache, Mixer};
use crate::nn::{AdamConfig, Tensor};
use crate::policy::{argmax, Team};
use crate::rollout::{rollout, Episode, Rollout};

// Independent random streams derived from the run seed.
pub const STREAM_INIT: u64 = 1;
pub const STREAM_ACTIONS: u64 = 2;
pub const STREAM_ENV: u64 = 3;
pub const STREAM_REPLAY: u64 = 4;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// FIFO store of whole episodes.
#[derive(Clone, Debug)]
pub struct Replay {
    episodes: VecDeque<Episode>,
    capacity: usize,
}

impl Replay {
    pub fn new(capacity: usize) -> Self {
        Self {
            episodes: VecDeque::with_capacity(capacity.min(1024)),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn push(&mut self, episode: Episode) {
        if self.capacity == 0 {
            return;
        }
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    /// Uniform sample of distinct episodes.
    pub fn sample(&self, batch: usize, rng: &mut impl Rng) -> Result<Vec<&Episode>> {
        if batch == 0 || batch > self.episodes.len() {
            return Err(Error::Sampling(format!(
                "cannot draw {batch} episodes from {}",
                self.episodes.len()
            )));
        }
        Ok(sample(rng, self.episodes.len(), batch)
            .into_iter()
            .map(|i| &self.episodes[i])
            .collect())
    }
}

/// Linear anneal from `start` to `floor` over `anneal_steps`, then constant.
pub fn epsilon_schedule(iteration: u64, start: f64, floor: f64, anneal_steps: u64) -> f64 {
    if anneal_steps == 0 || iteration >= anneal_steps {
        return floor;
    }
    start + (floor - start) * iteration as f64 / anneal_steps as f64
}

/// Online and target networks with their optimiser.
#[derive(Clone, Debug)]
pub struct Learner {
    pub online: Team,
    pub target: Team,
    pub mixer: Mixer,
    pub target_mixer: Mixer,
    pub gamma: f64,
    pub adam: AdamConfig,
}

/// Per-slot batch layout of a set of episodes.
struct Batch {
    /// `[T + 1][N]` blocks of `[B, obs_dim]`.
    obs: Vec<Vec<Tensor>>,
    /// `[T + 1]` of `[B, state_dim]`.
    states: Vec<Tensor>,
    /// `[T][B][N]`.
    actions: Vec<Vec<Vec<usize>>>,
    /// `[T][B]`.
    rewards: Vec<Vec<f64>>,
    dones: Vec<Vec<bool>>,
}

impl Batch {
    fn new(episodes: &[&Episode]) -> Result<Self> {
        let first = episodes
            .first()
            .ok_or_else(|| Error::Sampling("empty batch".into()))?;
        let t_len = first.len();
        if episodes.iter().any(|e| e.len() != t_len) {
            return Err(Error::Sampling("episodes of different lengths".into()));
        }
        let n = first.observations[0].len();
        let b = episodes.len();
        let obs = (0..=t_len)
            .map(|t| {
                (0..n)
                    .map(|a| {
                        let d = first.observations[t][a].len();
                        let data = episodes
                            .iter()
                            .flat_map(|e| e.observations[t][a].iter().copied())
                            .collect();
                        Tensor::matrix(b, d, data)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let states = (0..=t_len)
            .map(|t| {
                let s = first.states[t].len();
                Tensor::matrix(
                    b,
                    s,
                    episodes
                        .iter()
                        .flat_map(|e| e.states[t].iter().copied())
                        .collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            obs,
            states,
            actions: (0..t_len)
                .map(|t| episodes.iter().map(|e| e.actions[t].clone()).collect())
                .collect(),
            rewards: (0..t_len)
                .map(|t| episodes.iter().map(|e| e.rewards[t]).collect())
                .collect(),
            dones: (0..t_len)
                .map(|t| episodes.iter().map(|e| e.dones[t]).collect())
                .collect(),
        })
    }
}

impl Learner {
    pub fn new(cfg: &Config, rng: &mut impl Rng) -> Result<Self> {
        let env = cfg.env()?;
        let online = Team::new(&cfg.actor()?, rng)?;
        let mixer = Mixer::new(env.n_agents, env.state_dim(), cfg.mixer_width, rng)?;
        Ok(Self {
            target: online.clone(),
            target_mixer: mixer.clone(),
            online,
            mixer,
            gamma: cfg.gamma,
            adam: AdamConfig::with_lr(cfg.lr()),
        })
    }

    /// Hard copy of the online parameters into the target networks.
    pub fn update_target(&mut self) -> Result<()> {
        for (t, o) in self.target.actors.iter_mut().zip(&self.online.actors) {
            t.params_mut().copy_values_from(o.params())?;
        }
        self.target_mixer
            .params_mut()
            .copy_values_from(self.mixer.params())
    }

    /// Bootstrapped targets `r + γ (1 - done) Q_tot^-(s', argmax Q^-)`,
    /// `[T][B]`.
    fn td_targets(&self, batch: &Batch) -> Result<Vec<Vec<f64>>> {
        let t_len = batch.rewards.len();
        let b = batch.states[0].rows();
        let n = self.target.actors.len();
        let mut y: Vec<Vec<f64>> = batch.rewards.clone();
        let mut carry = self.target.initial_state(b);
        for t in 0..=t_len {
            let needed = t > 0 && batch.dones[t - 1].iter().any(|&d| !d);
            if t == t_len && !needed {
                break;
            }
            let step = self.target.forward_step(&carry, &batch.obs[t])?;
            if needed {
                let mut u = Tensor::zeros(&[b, n]);
                for (a, out) in step.outputs.iter().enumerate() {
                    for r in 0..b {
                        let q = out.q.row(r);
                        u.row_mut(r)[a] = q[argmax(q)];
                    }
                }
                let (q_next, _) = self.target_mixer.forward(&u, &batch.states[t])?;
                for r in 0..b {
                    if !batch.dones[t - 1][r] {
                        y[t - 1][r] += self.gamma * q_next.row(r)[0];
                    }
                }
            }
            carry = step.next;
        }
        Ok(y)
    }

    /// Summed squared TD error of the online networks on `episodes`, with
    /// gradients accumulated into the online parameter stores. No
    /// optimiser step is taken.
    pub fn loss_and_grad(&mut self, episodes: &[&Episode]) -> Result<f64> {
        let batch = Batch::new(episodes)?;
        let targets = self.td_targets(&batch)?;
        let t_len = batch.rewards.len();
        let b = episodes.len();
        let n = self.online.actors.len();
        let n_actions = self.online.config().n_actions;

        let mut carry = self.online.initial_state(b);
        let mut caches = Vec::with_capacity(t_len);
        let mut mix_caches: Vec<MixCache> = Vec::with_capacity(t_len);
        let mut d_qtot = Vec::with_capacity(t_len);
        let mut loss = 0.0;
        for t in 0..t_len {
            let step = self.online.forward_step(&carry, &batch.obs[t])?;
            let mut u = Tensor::zeros(&[b, n]);
            for (a, out) in step.outputs.iter().enumerate() {
                for r in 0..b {
                    u.row_mut(r)[a] = out.q.row(r)[batch.actions[t][r][a]];
                }
            }
            let (q_tot, mc) = self.mixer.forward(&u, &batch.states[t])?;
            let mut g = Tensor::zeros(&[b, 1]);
            for r in 0..b {
                let diff = q_tot.row(r)[0] - targets[t][r];
                loss += diff * diff;
                g.row_mut(r)[0] = 2.0 * diff;
            }
            d_qtot.push(g);
            mix_caches.push(mc);
            caches.push(step.caches);
            carry = step.next;
        }
        if !loss.is_finite() {
            return Err(Error::Numeric {
                context: "TD loss".into(),
            });
        }
        let mut d_q = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let d_u = self.mixer.backward(&mix_caches[t], &d_qtot[t])?;
            let per_agent = (0..n)
                .map(|a| {
                    let mut g = Tensor::zeros(&[b, n_actions]);
                    for r in 0..b {
                        g.row_mut(r)[batch.actions[t][r][a]] = d_u.row(r)[a];
                    }
                    g
                })
                .collect();
            d_q.push(per_agent);
        }
        self.online.backward(&caches, &d_q)?;
        Ok(loss)
    }

    pub fn zero_grad(&mut self) {
        for a in &mut self.online.actors {
            a.params_mut().zero_grad();
        }
        self.mixer.params_mut().zero_grad();
    }

    /// One optimiser step on actors and mixer; returns the loss.
    pub fn td_update(&mut self, episodes: &[&Episode]) -> Result<f64> {
        self.zero_grad();
        let loss = self.loss_and_grad(episodes)?;
        for a in &self.online.actors {
            a.params().check_grads()?;
        }
        self.mixer.params().check_grads()?;
        for a in &mut self.online.actors {
            a.params_mut().adam_step(&self.adam)?;
        }
        self.mixer.params_mut().adam_step(&self.adam)?;
        Ok(loss)
    }
}

/// One row of `train.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub iteration: u64,
    pub epsilon: f64,
    /// Absent until the replay holds a full batch.
    pub loss: Option<f64>,
    pub episode_reward: f64,
    pub collisions: usize,
    pub in_range: usize,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub rows: Vec<TrainRow>,
    pub learner: Learner,
}

impl TrainReport {
    /// Mean episode reward over the last `window` iterations.
    pub fn final_moving_average(&self, window: usize) -> f64 {
        moving_average_tail(
            &self
                .rows
                .iter()
                .map(|r| r.episode_reward)
                .collect::<Vec<_>>(),
            window,
        )
    }
}

pub fn moving_average_tail(values: &[f64], window: usize) -> f64 {
    let w = window.min(values.len()).max(1);
    values[values.len().saturating_sub(w)..].iter().sum::<f64>() / w as f64
}

/// Where a training run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn checkpoint_path(&self, iteration: u64) -> PathBuf {
        self.dir.join(format!("checkpoint_{iteration:06}.json"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint_final.json")
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    seed: u64,
    config_hash: String,
    code_version: &'static str,
    config: &'a Config,
}

fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Runs the full loop: per iteration one ε-greedy episode, then one TD
/// update once the replay holds a batch, and a hard target copy every
/// `target_update_period` iterations.
pub fn train(cfg: &Config, out: Option<&RunOutput>) -> Result<TrainReport> {
    cfg.validate()?;
    let mut init_rng = stream(cfg.seed, STREAM_INIT);
    let mut action_rng = stream(cfg.seed, STREAM_ACTIONS);
    let mut env_rng = stream(cfg.seed, STREAM_ENV);
    let mut replay_rng = stream(cfg.seed, STREAM_REPLAY);

    let mut learner = Learner::new(cfg, &mut init_rng)?;
    let mut env = UavEnv::new(cfg.env()?)?;
    let mut replay = Replay::new(cfg.replay_capacity);
    let mut rows = Vec::with_capacity(cfg.iterations as usize);

    let mut csv_out = None;
    let mut traj_out = None;
    if let Some(o) = out {
        std::fs::create_dir_all(&o.dir)?;
        let manifest = RunManifest {
            seed: cfg.seed,
            config_hash: cfg.config_hash(),
            code_version: env!("CARGO_PKG_VERSION"),
            config: cfg,
        };
        std::fs::write(
            o.dir.join("run_manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        std::fs::write(o.dir.join("config.toml"), cfg.to_toml_string())?;
        let mut w = csv::Writer::from_path(o.dir.join("train.csv"))?;
        w.write_record([
            "iteration",
            "epsilon",
            "loss",
            "episode_reward",
            "collisions",
            "in_range",
        ])?;
        csv_out = Some(w);
        if cfg.write_trajectory {
            traj_out = Some(BufWriter::new(File::create(
                o.dir.join("trajectory.jsonl"),
            )?));
        }
    }

    for it in 0..cfg.iterations {
        let epsilon = epsilon_schedule(it, cfg.epsilon_start, cfg.epsilon_floor, cfg.anneal_steps);
        let env_seed: u64 = env_rng.gen();
        let ro = rollout(
            &mut env,
            &learner.online,
            epsilon,
            env_seed,
            &mut action_rng,
        )?;
        if let Some(w) = traj_out.as_mut() {
            write_trajectory(w, it, &ro)?;
        }
        let episode_reward = ro.episode.total_reward();
        let collisions = ro.collisions();
        let in_range = ro.covered_slots();
        replay.push(ro.episode);

        let loss = if replay.len() >= cfg.batch_size {
            let batch = replay.sample(cfg.batch_size, &mut replay_rng)?;
            match learner.td_update(&batch) {
                Ok(l) => Some(l),
                Err(e @ Error::Numeric { .. }) => {
                    if let Some(o) = out {
                        let ck = Checkpoint::from_team(
                            cfg,
                            it,
                            &learner.online,
                            Some(learner.mixer.params().snapshot()),
                        );
                        ck.save(&o.dir.join("checkpoint_diagnostic.json"))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        if (it + 1) % cfg.target_update_period == 0 {
            learner.update_target()?;
        }
        let row = TrainRow {
            iteration: it,
            epsilon,
            loss,
            episode_reward,
            collisions,
            in_range,
        };
        if let Some(w) = csv_out.as_mut() {
            w.write_record([
                row.iteration.to_string(),
                format_float(row.epsilon),
                row.loss.map(format_float).unwrap_or_default(),
                format_float(row.episode_reward),
                row.collisions.to_string(),
                row.in_range.to_string(),
            ])?;
        }
        rows.push(row);
        if let Some(o) = out {
            if cfg.checkpoint_period > 0 && (it + 1) % cfg.checkpoint_period == 0 {
                Checkpoint::from_team(
                    cfg,
                    it + 1,
                    &learner.online,
                    Some(learner.mixer.params().snapshot()),
                )
                .save(&o.checkpoint_path(it + 1))?;
            }
        }
    }
    if let Some(mut w) = csv_out {
        w.flush()?;
    }
    if let Some(mut w) = traj_out {
        w.flush()?;
    }
    if let Some(o) = out {
        Checkpoint::from_team(
            cfg,
            cfg.iterations,
            &learner.online,
            Some(learner.mixer.params().snapshot()),
        )
        .save(&o.final_checkpoint())?;
    }
    Ok(TrainReport { rows, learner })
}

fn write_trajectory(w: &mut impl Write, episode: u64, ro: &Rollout) -> Result<()> {
    for (slot, world) in ro.worlds.iter().enumerate() {
        let info = slot.checked_sub(1).map(|i| &ro.infos[i]);
        let rec = TrajectoryRecord::from_world(episode, world, info);
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Mean episode reward of a fixed ε policy over `episodes` rollouts with the
/// given seed, without any learning.
pub fn policy_average_reward(
    cfg: &Config,
    team: &Team,
    epsilon: f64,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    let mut env = UavEnv::new(cfg.env()?)?;
    let mut env_rng = stream(seed, STREAM_ENV);
    let mut action_rng = stream(seed, STREAM_ACTIONS);
    let mut total = 0.0;
    for _ in 0..episodes {
        let ro = rollout(&mut env, team, epsilon, env_rng.gen(), &mut action_rng)?;
        total += ro.episode.total_reward();
    }
    Ok(total / episodes.max(1) as f64)
}

/// Reads `train.csv` back.
pub fn read_train_csv(path: &Path) -> Result<Vec<TrainRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}
