//! Decentralised episode execution shared by training and evaluation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, StepInfo, UavEnv, WorldState};
use crate::error::Result;
use crate::nn::Tensor;
use crate::policy::{route_messages, Decision, Team};

/// One whole episode as stored for replay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    /// `[T + 1][N][obs_dim]`.
    pub observations: Vec<Vec<Vec<f64>>>,
    /// `[T + 1][state_dim]`.
    pub states: Vec<Vec<f64>>,
    /// `[T][N]`.
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub episode: Episode,
    /// `[T + 1]`, the reset world first.
    pub worlds: Vec<WorldState>,
    pub infos: Vec<StepInfo>,
    /// `[T][N]`.
    pub decisions: Vec<Vec<Decision>>,
}

impl Rollout {
    pub fn collisions(&self) -> usize {
        self.infos.iter().map(StepInfo::collision_count).sum()
    }

    /// Slots in which at least one agent covers the user.
    pub fn covered_slots(&self) -> usize {
        self.infos
            .iter()
            .filter(|i| i.in_range.iter().any(|&b| b))
            .count()
    }
}

/// Plays one episode. Every agent decides from its own observation, inbox
/// and carry only; messages reach the neighbours one slot later.
pub fn rollout(
    env: &mut UavEnv,
    team: &Team,
    epsilon: f64,
    env_seed: u64,
    rng: &mut impl Rng,
) -> Result<Rollout> {
    let (mut obs, state) = env.reset(env_seed)?;
    let n_agents = team.actors.len();
    let mut carry = team.initial_state(1);
    let mut episode = Episode {
        observations: vec![obs.iter().map(|o| o.to_vec()).collect()],
        states: vec![state],
        actions: Vec::new(),
        rewards: Vec::new(),
        dones: Vec::new(),
    };
    let mut worlds = vec![env.world().clone()];
    let mut infos = Vec::new();
    let mut decisions = Vec::new();
    while !env.is_done() {
        let inboxes = route_messages(&carry.outboxes)?;
        let mut slot = Vec::with_capacity(n_agents);
        for n in 0..n_agents {
            let d = team.actors[n].act(
                &obs[n].to_vec(),
                inboxes[n].data(),
                &mut carry.actors[n],
                epsilon,
                rng,
            )?;
            carry.outboxes[n] = Tensor::row_vector(d.outbox.clone());
            slot.push(d);
        }
        let actions: Vec<Action> = slot.iter().map(|d| d.action).collect();
        let step = env.step(&actions)?;
        episode
            .actions
            .push(actions.iter().map(|a| a.index()).collect());
        episode.rewards.push(step.reward);
        episode.dones.push(step.done);
        episode
            .observations
            .push(step.observations.iter().map(|o| o.to_vec()).collect());
        episode.states.push(step.state);
        worlds.push(env.world().clone());
        infos.push(step.info);
        decisions.push(slot);
        obs = step.observations;
    }
    Ok(Rollout {
        episode,
        worlds,
        infos,
        decisions,
    })
}
