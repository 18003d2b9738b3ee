//! TOML configuration shared by all subcommands. Every section and key is
//! optional; missing values take the defaults below.

use crate::dataset::StateSamplingBox;
use crate::harness::ExperimentConfig;
use crate::mpc::{Mpc, MpcConfig};
use crate::net::TrainConfig;
use crate::plant::{CartpoleConstants, CartpoleParams};
use crate::simloop::EpisodeConfig;
use crate::tuner::TurboConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Nominal parameters and fixed constants of the cartpole.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantConfig {
    pub m_add: f64,
    #[serde(rename = "M")]
    pub cart_mass: f64,
    #[serde(rename = "C1")]
    pub c1: f64,
    #[serde(rename = "C2")]
    pub c2: f64,
    #[serde(rename = "C3")]
    pub c3: f64,
    pub m_pole: f64,
    pub l_pole: f64,
    pub g: f64,
    pub u_max: f64,
    pub rail_halfwidth: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        let p = CartpoleParams::default();
        let c = CartpoleConstants::default();
        Self {
            m_add: p.m_add,
            cart_mass: p.cart_mass,
            c1: p.c1,
            c2: p.c2,
            c3: p.c3,
            m_pole: c.m_pole,
            l_pole: c.l_pole,
            g: c.g,
            u_max: c.u_max,
            rail_halfwidth: c.rail_halfwidth,
        }
    }
}

impl PlantConfig {
    pub fn params(&self) -> CartpoleParams {
        CartpoleParams { m_add: self.m_add, cart_mass: self.cart_mass, c1: self.c1, c2: self.c2, c3: self.c3 }
    }

    pub fn constants(&self) -> CartpoleConstants {
        CartpoleConstants {
            m_pole: self.m_pole,
            l_pole: self.l_pole,
            g: self.g,
            u_max: self.u_max,
            rail_halfwidth: self.rail_halfwidth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n: usize,
    #[serde(rename = "box")]
    pub sampling_box: StateSamplingBox,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { n: 200_000, sampling_box: StateSamplingBox::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub plant: PlantConfig,
    pub mpc: MpcConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub episode: EpisodeConfig,
    pub tuner: TurboConfig,
    pub experiment: ExperimentConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        if !self.plant.params().is_valid() {
            return Err(ConfigError::Invalid("plant parameters out of range".into()));
        }
        if !self.plant.constants().is_valid() {
            return Err(ConfigError::Invalid("plant constants must be positive".into()));
        }
        self.mpc.validate().map_err(|e| invalid(&e))?;
        self.dataset.sampling_box.validate(self.plant.rail_halfwidth).map_err(|e| invalid(&e))?;
        if self.dataset.n == 0 {
            return Err(ConfigError::Invalid("dataset.n must be at least 1".into()));
        }
        self.train.validate().map_err(|e| invalid(&e))?;
        self.episode.validate().map_err(|e| invalid(&e))?;
        self.tuner.validate().map_err(|e| invalid(&e))?;
        self.experiment.validate(&self.plant.params()).map_err(|e| invalid(&e))?;
        Ok(())
    }

    pub fn mpc(&self) -> Result<Mpc, ConfigError> {
        Mpc::new(self.mpc.clone(), self.plant.constants()).map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}
