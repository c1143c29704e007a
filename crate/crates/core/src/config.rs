//! Flat key/value run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{ChannelParams, UrllcRequirement};
use crate::env::{kmh_to_ms, EnvConfig};
use crate::error::{Error, Result};
use crate::nn::ops::ScoreNormalization;
use crate::policy::{ActorConfig, ExchangeMode, PolicyMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,

    // environment
    pub grid_side: f64,
    pub n_agents: usize,
    pub uav_speed_kmh: f64,
    pub target_speed_kmh: f64,
    pub urllc_range: f64,
    pub collision_dist: f64,
    pub slot_duration: f64,
    pub steps_per_episode: usize,
    /// Defaults to the grid diagonal, so every neighbour is observable.
    pub observe_radius: Option<f64>,
    pub target_containment: f64,
    pub target_heading_jitter_deg: f64,

    // channel
    pub alpha: f64,
    pub beta: f64,
    pub eta_los: f64,
    pub eta_nlos: f64,
    pub carrier_freq: f64,
    pub tx_power_dbm: f64,
    pub noise_power_dbm: f64,
    pub bandwidth: f64,
    pub payload_bits: f64,
    pub altitude: f64,
    pub target_error: f64,
    pub target_latency: f64,

    // architecture
    pub mode: PolicyMode,
    pub exchange: ExchangeMode,
    pub score_norm: ScoreNormalization,
    pub enc_dim: usize,
    pub attn_dim: usize,
    pub head_hidden: usize,
    pub mixer_width: usize,

    // training
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_gaxnet: f64,
    pub lr_qmix: f64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_floor: f64,
    pub anneal_steps: u64,
    pub target_update_period: u64,
    pub replay_capacity: usize,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_period: u64,
    pub write_trajectory: bool,

    // evaluation
    pub eval_episodes: usize,
    pub eval_seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        let env = EnvConfig::default();
        let ch = ChannelParams::default();
        let req = UrllcRequirement::default();
        Self {
            seed: 0,
            grid_side: env.grid_side,
            n_agents: env.n_agents,
            uav_speed_kmh: 45.0,
            target_speed_kmh: 36.0,
            urllc_range: env.urllc_range,
            collision_dist: env.collision_dist,
            slot_duration: env.slot_duration,
            steps_per_episode: env.steps_per_episode,
            observe_radius: None,
            target_containment: env.target_containment,
            target_heading_jitter_deg: env.target_heading_jitter_deg,
            alpha: ch.alpha,
            beta: ch.beta,
            eta_los: ch.eta_los,
            eta_nlos: ch.eta_nlos,
            carrier_freq: ch.carrier_freq,
            tx_power_dbm: ch.tx_power,
            noise_power_dbm: ch.noise_power,
            bandwidth: ch.bandwidth,
            payload_bits: ch.payload_bits,
            altitude: ch.altitude,
            target_error: req.target_error,
            target_latency: req.target_latency,
            mode: PolicyMode::Gaxnet,
            exchange: ExchangeMode::Semantic,
            score_norm: ScoreNormalization::Softmax,
            enc_dim: 64,
            attn_dim: 32,
            head_hidden: 64,
            mixer_width: 32,
            iterations: 5000,
            batch_size: 64,
            lr_gaxnet: 8e-4,
            lr_qmix: 1e-4,
            gamma: 0.99,
            epsilon_start: 1.0,
            epsilon_floor: 0.3,
            anneal_steps: 1000,
            target_update_period: 200,
            replay_capacity: 5000,
            checkpoint_period: 0,
            write_trajectory: true,
            eval_episodes: 20,
            eval_seed: 1_000_000,
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("validated config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.env()?;
        self.channel().validate()?;
        self.requirement().validate()?;
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma {} outside [0, 1)",
                self.gamma
            )));
        }
        for (name, eps) in [
            ("epsilon_start", self.epsilon_start),
            ("epsilon_floor", self.epsilon_floor),
        ] {
            if !(0.0..=1.0).contains(&eps) {
                return Err(Error::Config(format!("{name} {eps} outside [0, 1]")));
            }
        }
        if self.batch_size == 0 || self.replay_capacity < self.batch_size {
            return Err(Error::Config(
                "need 0 < batch_size <= replay_capacity".into(),
            ));
        }
        if !(self.lr_gaxnet > 0.0 && self.lr_qmix > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.target_update_period == 0 {
            return Err(Error::Config(
                "target_update_period must be positive".into(),
            ));
        }
        if self.mixer_width == 0 {
            return Err(Error::Config("mixer_width must be positive".into()));
        }
        // TOML integers are signed 64-bit.
        for (name, v) in [("seed", self.seed), ("eval_seed", self.eval_seed)] {
            if v > i64::MAX as u64 {
                return Err(Error::Config(format!("{name} {v} exceeds {}", i64::MAX)));
            }
        }
        Ok(())
    }

    pub fn env(&self) -> Result<EnvConfig> {
        let mut env = EnvConfig {
            grid_side: self.grid_side,
            n_agents: self.n_agents,
            uav_speed: kmh_to_ms(self.uav_speed_kmh),
            target_speed: kmh_to_ms(self.target_speed_kmh),
            urllc_range: self.urllc_range,
            collision_dist: self.collision_dist,
            slot_duration: self.slot_duration,
            steps_per_episode: self.steps_per_episode,
            observe_radius: 0.0,
            target_containment: self.target_containment,
            target_heading_jitter_deg: self.target_heading_jitter_deg,
            rng_seed: self.seed,
        };
        env.observe_radius = self.observe_radius.unwrap_or_else(|| env.diagonal());
        env.validate()?;
        Ok(env)
    }

    pub fn channel(&self) -> ChannelParams {
        ChannelParams {
            alpha: self.alpha,
            beta: self.beta,
            eta_los: self.eta_los,
            eta_nlos: self.eta_nlos,
            carrier_freq: self.carrier_freq,
            tx_power: self.tx_power_dbm,
            noise_power: self.noise_power_dbm,
            bandwidth: self.bandwidth,
            payload_bits: self.payload_bits,
            altitude: self.altitude,
            ..ChannelParams::default()
        }
    }

    pub fn requirement(&self) -> UrllcRequirement {
        UrllcRequirement {
            target_error: self.target_error,
            target_latency: self.target_latency,
        }
    }

    pub fn actor(&self) -> Result<ActorConfig> {
        let env = self.env()?;
        let mut a = ActorConfig::new(env.obs_dim(), env.n_agents);
        a.enc_dim = self.enc_dim;
        a.attn_dim = self.attn_dim;
        a.head_hidden = self.head_hidden;
        a.mode = self.mode;
        a.exchange = self.exchange;
        a.score_norm = self.score_norm;
        Ok(a)
    }

    /// Learning rate of the selected mode.
    pub fn lr(&self) -> f64 {
        match self.mode {
            PolicyMode::Gaxnet => self.lr_gaxnet,
            PolicyMode::Baseline => self.lr_qmix,
        }
    }

    /// Hash over everything that fixes parameter shapes and the environment
    /// a checkpoint was trained in. Seeds and budgets are excluded.
    pub fn config_hash(&self) -> String {
        let key = serde_json::json!({
            "grid_side": self.grid_side,
            "n_agents": self.n_agents,
            "uav_speed_kmh": self.uav_speed_kmh,
            "target_speed_kmh": self.target_speed_kmh,
            "urllc_range": self.urllc_range,
            "collision_dist": self.collision_dist,
            "slot_duration": self.slot_duration,
            "steps_per_episode": self.steps_per_episode,
            "observe_radius": self.observe_radius,
            "target_containment": self.target_containment,
            "target_heading_jitter_deg": self.target_heading_jitter_deg,
            "mode": self.mode,
            "exchange": self.exchange,
            "score_norm": self.score_norm,
            "enc_dim": self.enc_dim,
            "attn_dim": self.attn_dim,
            "head_hidden": self.head_hidden,
            "mixer_width": self.mixer_width,
        });
        hex::encode(Sha256::digest(key.to_string().as_bytes()))
    }
}
