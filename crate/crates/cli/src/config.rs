//! Experiment configuration: one TOML file for every pipeline stage.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ddnet_core::forecaster::TrainConfig;
use ddnet_core::netblocks::NetworkSpec;
use ddnet_core::opsloop::CycleConfig;
use ddnet_core::synthworld::{TimeGrid, WorldConfig};

use crate::CliError;

/// Network size preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Small ConvLSTMs that train on one CPU.
    Desk,
    /// The published layer sizes (64 hidden channels, 7/5/3/1 kernels).
    PaperShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub preset: Preset,
    /// Hidden channels of the desk networks.
    pub prednet_hidden: usize,
    pub danet_hidden: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Desk,
            prednet_hidden: 8,
            danet_hidden: 8,
        }
    }
}

impl NetworkConfig {
    pub fn prednet(&self) -> NetworkSpec {
        match self.preset {
            Preset::Desk => NetworkSpec::prednet_desk(self.prednet_hidden),
            Preset::PaperShape => NetworkSpec::prednet_reference(),
        }
    }

    pub fn danet(&self) -> NetworkSpec {
        match self.preset {
            Preset::Desk => NetworkSpec::danet_desk(self.danet_hidden),
            Preset::PaperShape => NetworkSpec::danet_reference(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LeadTimeConfig {
    /// Number of random initial times.
    pub starts: usize,
    pub max_lead: usize,
    pub seed: u64,
}

impl Default for LeadTimeConfig {
    fn default() -> Self {
        Self {
            starts: 100,
            max_lead: 40,
            seed: 17,
        }
    }
}

/// Artifact locations, relative to the base directory (the config file's
/// directory, or `--out`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: PathBuf,
    pub prednet: PathBuf,
    pub danet: PathBuf,
    pub da_pairs: PathBuf,
    pub runs: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data: "data".into(),
            prednet: "models/prednet.ddnt".into(),
            danet: "models/danet.ddnt".into(),
            da_pairs: "da_pairs".into(),
            runs: "runs".into(),
        }
    }
}

pub fn default_prednet_training() -> TrainConfig {
    TrainConfig::default()
}

pub fn default_danet_training() -> TrainConfig {
    TrainConfig {
        epochs: 40,
        samples_per_epoch: 0,
        patience: 15,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub grid: TimeGrid,
    pub network: NetworkConfig,
    pub prednet_training: TrainConfig,
    pub danet_training: TrainConfig,
    pub cycle: CycleConfig,
    pub lead_time: LeadTimeConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            grid: TimeGrid::default(),
            network: NetworkConfig::default(),
            prednet_training: default_prednet_training(),
            danet_training: default_danet_training(),
            cycle: CycleConfig::default(),
            lead_time: LeadTimeConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML text; errors name the offending key path.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            CliError::Config {
                key: if path == "." { String::new() } else { path },
                message: inner.message().trim().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Applies `--seed`: the world, both trainings and the lead-time sampler.
    pub fn override_seed(&mut self, seed: u64) {
        self.world.seed = seed;
        self.prednet_training.seed = seed;
        self.danet_training.seed = seed.wrapping_add(1);
        self.lead_time.seed = seed.wrapping_add(2);
    }

    /// Cross-section checks beyond what each section validates itself.
    pub fn validate(&self) -> Result<(), CliError> {
        let v = |key: &str, e: &dyn std::fmt::Display| CliError::Config {
            key: key.to_string(),
            message: e.to_string(),
        };
        self.world.validate().map_err(|e| v("world", &e))?;
        self.grid.validate().map_err(|e| v("grid", &e))?;
        if self.world.dt_hours != self.grid.dt_hours as f64 {
            return Err(v("grid.dt_hours", &"must equal world.dt_hours"));
        }
        self.network.prednet().validate().map_err(|e| v("network", &e))?;
        self.network.danet().validate().map_err(|e| v("network", &e))?;
        self.prednet_training.validate().map_err(|e| v("prednet_training", &e))?;
        self.danet_training.validate().map_err(|e| v("danet_training", &e))?;
        self.cycle.validate().map_err(|e| v("cycle", &e))?;
        if self.cycle.k != self.grid.k {
            return Err(v("cycle.k", &format!("must equal grid.k ({})", self.grid.k)));
        }
        if self.lead_time.starts == 0 || self.lead_time.max_lead == 0 {
            return Err(v("lead_time", &"starts and max_lead must be >= 1"));
        }
        Ok(())
    }
}
