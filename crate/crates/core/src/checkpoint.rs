//! JSON parameter checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::TensorRecord;
use crate::policy::Team;

pub const FORMAT_VERSION: u32 = 1;

pub type ParamMap = BTreeMap<String, TensorRecord>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub iteration: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub manifest: Manifest,
    /// One map per agent, in agent order.
    pub actors: Vec<ParamMap>,
    /// Present only in training checkpoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixer: Option<ParamMap>,
}

impl Checkpoint {
    pub fn from_team(cfg: &Config, iteration: u64, team: &Team, mixer: Option<ParamMap>) -> Self {
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                seed: cfg.seed,
                config_hash: cfg.config_hash(),
                iteration,
            },
            actors: team.actors.iter().map(|a| a.params().snapshot()).collect(),
            mixer,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Checks the manifest against `cfg` and loads the actor parameters.
    pub fn restore_actors(&self, cfg: &Config, team: &mut Team) -> Result<()> {
        if self.manifest.format_version != FORMAT_VERSION {
            return Err(Error::Version(format!(
                "checkpoint format {} but this build reads {FORMAT_VERSION}",
                self.manifest.format_version
            )));
        }
        let hash = cfg.config_hash();
        if self.manifest.config_hash != hash {
            return Err(Error::Version(format!(
                "checkpoint config hash {} does not match {hash}",
                self.manifest.config_hash
            )));
        }
        if self.actors.len() != team.actors.len() {
            return Err(Error::Version(format!(
                "checkpoint has {} actors, config has {}",
                self.actors.len(),
                team.actors.len()
            )));
        }
        for (actor, map) in team.actors.iter_mut().zip(&self.actors) {
            actor.params_mut().load_snapshot(map)?;
        }
        Ok(())
    }
}
