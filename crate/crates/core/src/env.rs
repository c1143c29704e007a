//! Multi-UAV target tracking grid world.
//!
//! `N` UAVs fly over a square plane while a ground user wanders around the
//! server at the centre. Each slot every UAV picks one of eight compass moves;
//! the team shares one reward made of per-UAV coverage terms and per-pair
//! collision penalties.

use std::f64::consts::{FRAC_1_SQRT_2, PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-UAV reward when inside the coverage radius.
pub const REWARD_IN_RANGE: f64 = 1.0;
/// Per-UAV reward when outside the radius but closing in.
pub const REWARD_APPROACHING: f64 = 0.05;
/// Per-UAV reward otherwise.
pub const REWARD_IDLE: f64 = -0.01;
/// Penalty per ordered pair closer than the collision distance.
pub const REWARD_COLLISION: f64 = -0.5;

/// Own block: for the current and previous slot, position (2), offset to the
/// target (2) and distance to the target (1).
pub const OWN_FEATURES: usize = 10;
/// Per-neighbour block: offset (2), distance (1), observability flag (1).
pub const OTHER_FEATURES: usize = 4;
/// Neighbour-specific encoder input: own position, target offset, neighbour
/// offset, target distance, neighbour distance, observability flag.
pub const PAIR_FEATURES: usize = 9;

const PLACEMENT_RETRIES: usize = 1000;

pub fn kmh_to_ms(kmh: f64) -> f64 {
    kmh / 3.6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Side of the square plane, m.
    pub grid_side: f64,
    pub n_agents: usize,
    /// m/s.
    pub uav_speed: f64,
    /// m/s.
    pub target_speed: f64,
    /// Coverage radius used by the reward, m.
    pub urllc_range: f64,
    /// m.
    pub collision_dist: f64,
    /// s.
    pub slot_duration: f64,
    pub steps_per_episode: usize,
    /// Neighbours further than this are unobservable, m.
    pub observe_radius: f64,
    /// The user stays within this radius of the grid centre, m.
    pub target_containment: f64,
    /// Half-width of the uniform heading perturbation per slot, degrees.
    pub target_heading_jitter_deg: f64,
    pub rng_seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        let grid_side = 3750.0;
        Self {
            grid_side,
            n_agents: 4,
            uav_speed: kmh_to_ms(45.0),
            target_speed: kmh_to_ms(36.0),
            urllc_range: 938.0,
            collision_dist: 563.0,
            slot_duration: 60.0,
            steps_per_episode: 20,
            observe_radius: grid_side * std::f64::consts::SQRT_2,
            target_containment: 1200.0,
            target_heading_jitter_deg: 30.0,
            rng_seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 2 {
            return Err(Error::Config("at least two agents are required".into()));
        }
        if !(self.collision_dist < self.urllc_range && self.urllc_range < self.grid_side) {
            return Err(Error::Config(
                "expected collision_dist < urllc_range < grid_side".into(),
            ));
        }
        if !(self.uav_speed > 0.0 && self.target_speed > 0.0 && self.slot_duration > 0.0) {
            return Err(Error::Config(
                "speeds and slot duration must be positive".into(),
            ));
        }
        if self.steps_per_episode == 0 {
            return Err(Error::Config("steps_per_episode must be at least 1".into()));
        }
        if !(self.target_containment > 0.0 && self.target_containment <= self.grid_side / 2.0) {
            return Err(Error::Config(
                "target_containment must be positive and fit inside the grid".into(),
            ));
        }
        if self.observe_radius < 0.0 {
            return Err(Error::Config("observe_radius must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn diagonal(&self) -> f64 {
        self.grid_side * std::f64::consts::SQRT_2
    }

    pub fn center(&self) -> [f64; 2] {
        [self.grid_side / 2.0, self.grid_side / 2.0]
    }

    /// UAV displacement per slot, m.
    pub fn uav_step(&self) -> f64 {
        self.uav_speed * self.slot_duration
    }

    /// User displacement per slot, m.
    pub fn target_step(&self) -> f64 {
        self.target_speed * self.slot_duration
    }

    pub fn obs_dim(&self) -> usize {
        OWN_FEATURES + OTHER_FEATURES * (self.n_agents - 1)
    }

    /// Own and previous observations of every agent plus the user position,
    /// for the current and the previous slot.
    pub fn state_dim(&self) -> usize {
        2 * (self.n_agents * self.obs_dim() + 2)
    }
}

/// One of the eight compass moves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action(u8);

impl Action {
    pub const COUNT: usize = 8;
    const NAMES: [&'static str; 8] = ["E", "W", "N", "S", "NE", "NW", "SE", "SW"];

    pub fn new(index: usize) -> Result<Self> {
        if index < Self::COUNT {
            Ok(Action(index as u8))
        } else {
            Err(Error::Domain(format!("action index {index} out of range")))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        Self::NAMES[self.index()]
    }

    /// Unit direction of the move.
    pub fn direction(self) -> [f64; 2] {
        let d = FRAC_1_SQRT_2;
        match self.0 {
            0 => [1.0, 0.0],
            1 => [-1.0, 0.0],
            2 => [0.0, 1.0],
            3 => [0.0, -1.0],
            4 => [d, d],
            5 => [-d, d],
            6 => [d, -d],
            _ => [-d, -d],
        }
    }

    pub fn displacement(self, step: f64) -> [f64; 2] {
        let [x, y] = self.direction();
        [x * step, y * step]
    }

    pub fn all() -> impl Iterator<Item = Action> {
        (0..Self::COUNT as u8).map(Action)
    }
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    (dx * dx + dy * dy).sqrt()
}

/// Index of `m` in agent `n`'s neighbour list (ascending, self excluded).
pub fn neighbor_slot(n: usize, m: usize) -> usize {
    debug_assert_ne!(n, m);
    if m < n {
        m
    } else {
        m - 1
    }
}

/// Agent index of neighbour slot `j` of agent `n`.
pub fn neighbor_agent(n: usize, j: usize) -> usize {
    if j < n {
        j
    } else {
        j + 1
    }
}

/// Positions for the current slot and the one before it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub agents: Vec<[f64; 2]>,
    pub agents_prev: Vec<[f64; 2]>,
    pub target: [f64; 2],
    pub target_prev: [f64; 2],
    pub target_heading: f64,
    pub slot: usize,
}

/// Local observation of one agent, already normalised (coordinates by the
/// grid side, distances by the grid diagonal).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub own: [f64; OWN_FEATURES],
    pub others: Vec<[f64; OTHER_FEATURES]>,
}

impl Observation {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(OWN_FEATURES + OTHER_FEATURES * self.others.len());
        self.write_into(&mut v);
        v
    }

    pub fn write_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.own);
        for block in &self.others {
            out.extend_from_slice(block);
        }
    }

    pub fn observable(&self, j: usize) -> bool {
        self.others[j][3] != 0.0
    }
}

/// Gathers the neighbour-specific encoder input for neighbour slot `j` from a
/// flattened observation.
pub fn pair_features(obs: &[f64], j: usize) -> [f64; PAIR_FEATURES] {
    let b = OWN_FEATURES + OTHER_FEATURES * j;
    [
        obs[0],
        obs[1],
        obs[2],
        obs[3],
        obs[b],
        obs[b + 1],
        obs[4],
        obs[b + 2],
        obs[b + 3],
    ]
}

/// Observability flag of neighbour slot `j` in a flattened observation.
pub fn observability(obs: &[f64], j: usize) -> f64 {
    obs[OWN_FEATURES + OTHER_FEATURES * j + 3]
}

/// Reward terms of one slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    /// Coverage term of each agent.
    pub target: Vec<f64>,
    /// Sum of the penalties over ordered pairs.
    pub collision: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Symmetric matrix, diagonal false.
    pub collisions: Vec<Vec<bool>>,
    pub in_range: Vec<bool>,
    /// Distance of each agent to the user, m.
    pub dist_to_target: Vec<f64>,
    pub reward: RewardBreakdown,
}

impl StepInfo {
    /// Number of unordered colliding pairs.
    pub fn collision_count(&self) -> usize {
        let n = self.collisions.len();
        (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .filter(|&(a, b)| self.collisions[a][b])
            .count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observations: Vec<Observation>,
    pub state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Computes the shared reward from positions.
pub fn reward_terms(
    cfg: &EnvConfig,
    agents: &[[f64; 2]],
    target: [f64; 2],
    prev_dist_to_target: &[f64],
) -> (RewardBreakdown, Vec<Vec<bool>>, Vec<f64>) {
    let n = agents.len();
    let dists: Vec<f64> = agents.iter().map(|&a| distance(a, target)).collect();
    let target_terms: Vec<f64> = dists
        .iter()
        .zip(prev_dist_to_target)
        .map(|(&d, &prev)| {
            if d < cfg.urllc_range {
                REWARD_IN_RANGE
            } else if d < prev {
                REWARD_APPROACHING
            } else {
                REWARD_IDLE
            }
        })
        .collect();
    let mut collisions = vec![vec![false; n]; n];
    let mut collision = 0.0;
    for a in 0..n {
        for b in 0..n {
            if a != b && distance(agents[a], agents[b]) < cfg.collision_dist {
                collisions[a][b] = true;
                collision += REWARD_COLLISION;
            }
        }
    }
    let total = target_terms.iter().sum::<f64>() + collision;
    (
        RewardBreakdown {
            target: target_terms,
            collision,
            total,
        },
        collisions,
        dists,
    )
}

pub struct UavEnv {
    cfg: EnvConfig,
    rng: ChaCha8Rng,
    world: WorldState,
    prev_observations: Vec<Observation>,
    done: bool,
}

impl UavEnv {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_agents;
        let center = cfg.center();
        let seed = cfg.rng_seed;
        let mut env = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            world: WorldState {
                agents: vec![center; n],
                agents_prev: vec![center; n],
                target: center,
                target_prev: center,
                target_heading: 0.0,
                slot: 0,
            },
            prev_observations: Vec::new(),
            done: true,
            cfg,
        };
        env.reset(seed)?;
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Starts a new episode. Agents are spread uniformly with pairwise
    /// separation of at least the collision distance; the user starts within
    /// half the containment radius of the centre.
    pub fn reset(&mut self, seed: u64) -> Result<(Vec<Observation>, Vec<f64>)> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = &self.cfg;
        let mut agents: Vec<[f64; 2]> = Vec::with_capacity(cfg.n_agents);
        for n in 0..cfg.n_agents {
            let mut placed = None;
            for _ in 0..PLACEMENT_RETRIES {
                let p = [
                    self.rng.gen_range(0.0..=cfg.grid_side),
                    self.rng.gen_range(0.0..=cfg.grid_side),
                ];
                if agents.iter().all(|&q| distance(p, q) >= cfg.collision_dist) {
                    placed = Some(p);
                    break;
                }
            }
            agents.push(placed.ok_or_else(|| {
                Error::Config(format!(
                    "could not place agent {n} at least {} m from the others",
                    cfg.collision_dist
                ))
            })?);
        }
        let center = cfg.center();
        let radius = 0.5 * cfg.target_containment * self.rng.gen::<f64>().sqrt();
        let angle = self.rng.gen_range(0.0..TAU);
        let target = [
            center[0] + radius * angle.cos(),
            center[1] + radius * angle.sin(),
        ];
        let heading = self.rng.gen_range(0.0..TAU);
        self.world = WorldState {
            agents_prev: agents.clone(),
            agents,
            target,
            target_prev: target,
            target_heading: heading,
            slot: 0,
        };
        self.done = false;
        let observations = self.build_observations();
        self.prev_observations = observations.clone();
        let state = self.build_state(&observations);
        Ok((observations, state))
    }

    pub fn step(&mut self, actions: &[Action]) -> Result<StepResult> {
        if self.done {
            return Err(Error::State("step called on a finished episode".into()));
        }
        let cfg = &self.cfg;
        if actions.len() != cfg.n_agents {
            return Err(Error::State(format!(
                "expected {} actions, got {}",
                cfg.n_agents,
                actions.len()
            )));
        }
        let prev_dists: Vec<f64> = self
            .world
            .agents
            .iter()
            .map(|&a| distance(a, self.world.target))
            .collect();
        let step = cfg.uav_step();
        let side = cfg.grid_side;
        let moved: Vec<[f64; 2]> = self
            .world
            .agents
            .iter()
            .zip(actions)
            .map(|(&p, a)| {
                let [dx, dy] = a.displacement(step);
                [(p[0] + dx).clamp(0.0, side), (p[1] + dy).clamp(0.0, side)]
            })
            .collect();
        let (target, heading) = target_motion(
            cfg,
            self.world.target,
            self.world.target_heading,
            &mut self.rng,
        );

        self.world.agents_prev = std::mem::replace(&mut self.world.agents, moved);
        self.world.target_prev = self.world.target;
        self.world.target = target;
        self.world.target_heading = heading;
        self.world.slot += 1;

        let (reward, collisions, dist_to_target) = reward_terms(
            &self.cfg,
            &self.world.agents,
            self.world.target,
            &prev_dists,
        );
        let in_range = dist_to_target
            .iter()
            .map(|&d| d < self.cfg.urllc_range)
            .collect();

        let observations = self.build_observations();
        let state = self.build_state(&observations);
        self.prev_observations = observations.clone();
        self.done = self.world.slot == self.cfg.steps_per_episode;
        Ok(StepResult {
            observations,
            state,
            reward: reward.total,
            done: self.done,
            info: StepInfo {
                collisions,
                in_range,
                dist_to_target,
                reward,
            },
        })
    }

    pub fn build_observations(&self) -> Vec<Observation> {
        (0..self.cfg.n_agents)
            .map(|n| self.build_observation(n))
            .collect()
    }

    pub fn build_observation(&self, n: usize) -> Observation {
        let cfg = &self.cfg;
        let w = &self.world;
        let side = cfg.grid_side;
        let diag = cfg.diagonal();
        let mut own = [0.0; OWN_FEATURES];
        for (i, (pos, target)) in [(w.agents[n], w.target), (w.agents_prev[n], w.target_prev)]
            .into_iter()
            .enumerate()
        {
            let o = 5 * i;
            own[o] = pos[0] / side;
            own[o + 1] = pos[1] / side;
            own[o + 2] = (target[0] - pos[0]) / side;
            own[o + 3] = (target[1] - pos[1]) / side;
            own[o + 4] = distance(pos, target) / diag;
        }
        let others = (0..cfg.n_agents)
            .filter(|&m| m != n)
            .map(|m| {
                let d = distance(w.agents[n], w.agents[m]);
                if d <= cfg.observe_radius {
                    [
                        (w.agents[m][0] - w.agents[n][0]) / side,
                        (w.agents[m][1] - w.agents[n][1]) / side,
                        d / diag,
                        1.0,
                    ]
                } else {
                    [0.0; OTHER_FEATURES]
                }
            })
            .collect();
        Observation { own, others }
    }

    /// Global state: every agent's observation and the normalised user
    /// position, for the current slot followed by the previous slot.
    pub fn build_state(&self, observations: &[Observation]) -> Vec<f64> {
        let side = self.cfg.grid_side;
        let mut state = Vec::with_capacity(self.cfg.state_dim());
        for obs in observations {
            obs.write_into(&mut state);
        }
        state.push(self.world.target[0] / side);
        state.push(self.world.target[1] / side);
        for obs in &self.prev_observations {
            obs.write_into(&mut state);
        }
        state.push(self.world.target_prev[0] / side);
        state.push(self.world.target_prev[1] / side);
        state
    }
}

/// Advances the user one slot: the heading takes a uniform perturbation and
/// the user moves exactly one step. A move that would leave the containment
/// disc is mirrored about the radial direction, and if that is still not
/// enough the heading is turned towards the centre until the end point is
/// inside.
pub fn target_motion(
    cfg: &EnvConfig,
    pos: [f64; 2],
    heading: f64,
    rng: &mut impl Rng,
) -> ([f64; 2], f64) {
    let jitter = cfg.target_heading_jitter_deg.to_radians();
    let mut heading = heading + rng.gen_range(-jitter..=jitter);
    let step = cfg.target_step();
    let center = cfg.center();
    let radius = cfg.target_containment;
    let advance = |h: f64| [pos[0] + step * h.cos(), pos[1] + step * h.sin()];
    let inside = |p: [f64; 2]| distance(p, center) <= radius;

    let mut next = advance(heading);
    if !inside(next) {
        let rx = pos[0] - center[0];
        let ry = pos[1] - center[1];
        let norm = (rx * rx + ry * ry).sqrt();
        if norm > 0.0 {
            let (nx, ny) = (rx / norm, ry / norm);
            let (ux, uy) = (heading.cos(), heading.sin());
            let radial = ux * nx + uy * ny;
            if radial > 0.0 {
                heading = (uy - 2.0 * radial * ny).atan2(ux - 2.0 * radial * nx);
                next = advance(heading);
            }
        }
        if !inside(next) {
            let inward = (center[1] - pos[1]).atan2(center[0] - pos[0]);
            let gap = wrap_angle(inward - heading);
            const TURNS: usize = 64;
            for k in 1..=TURNS {
                let h = heading + gap * k as f64 / TURNS as f64;
                let p = advance(h);
                if inside(p) {
                    heading = h;
                    next = p;
                    break;
                }
            }
        }
    }
    (next, wrap_angle(heading))
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % TAU;
    if a > PI {
        a -= TAU;
    } else if a < -PI {
        a += TAU;
    }
    a
}

/// One line of the trajectory log. Slot 0 is the reset state and carries no
/// reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub episode: u64,
    pub slot: usize,
    pub agents: Vec<[f64; 2]>,
    pub target: [f64; 2],
    pub dist_to_target: Vec<f64>,
    pub target_rewards: Option<Vec<f64>>,
    pub collision_reward: Option<f64>,
    pub reward: Option<f64>,
    /// Unordered colliding pairs.
    pub collisions: Vec<[usize; 2]>,
}

impl TrajectoryRecord {
    pub fn from_world(episode: u64, world: &WorldState, info: Option<&StepInfo>) -> Self {
        let dist_to_target = world
            .agents
            .iter()
            .map(|&a| distance(a, world.target))
            .collect();
        let collisions = info
            .map(|i| {
                let n = i.collisions.len();
                (0..n)
                    .flat_map(|a| (a + 1..n).map(move |b| [a, b]))
                    .filter(|&[a, b]| i.collisions[a][b])
                    .collect()
            })
            .unwrap_or_default();
        Self {
            episode,
            slot: world.slot,
            agents: world.agents.clone(),
            target: world.target,
            dist_to_target,
            target_rewards: info.map(|i| i.reward.target.clone()),
            collision_reward: info.map(|i| i.reward.collision),
            reward: info.map(|i| i.reward.total),
            collisions,
        }
    }
}
