//! Parameter-adaptive approximate MPC: the action net plus a first-order
//! correction from the sensitivity net.

use crate::net::{Mlp, NetError};
use crate::plant::{CartpoleParams, State, N_ACTION, N_PARAMS};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const ACTION_FILE: &str = "action.pamn";
pub const SENSITIVITY_FILE: &str = "sensitivity.pamn";
pub const META_FILE: &str = "bundle.json";

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("parameter vector has length {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("inconsistent networks: {0}")]
    Inconsistent(String),
    #[error("bundle metadata: {0}")]
    Meta(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Metadata stored next to the two model files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleMeta {
    pub theta_nom: CartpoleParams,
    pub u_max: f64,
    /// Validation RMSE of the action net [V].
    #[serde(default)]
    pub action_val_rmse: Option<f64>,
    /// Validation RMSE of each sensitivity output.
    #[serde(default)]
    pub sensitivity_val_rmse: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptivePolicy {
    pub net_action: Mlp,
    pub net_sens: Mlp,
    pub meta: BundleMeta,
}

impl AdaptivePolicy {
    pub fn new(net_action: Mlp, net_sens: Mlp, meta: BundleMeta) -> Result<Self, PolicyError> {
        if net_action.output_dim() != N_ACTION {
            return Err(PolicyError::Inconsistent(format!("action net has {} outputs", net_action.output_dim())));
        }
        if net_sens.output_dim() != N_ACTION * N_PARAMS {
            return Err(PolicyError::Inconsistent(format!("sensitivity net has {} outputs", net_sens.output_dim())));
        }
        if net_action.input_dim() != net_sens.input_dim() {
            return Err(PolicyError::Inconsistent("input widths differ".into()));
        }
        if !meta.theta_nom.to_array().iter().all(|v| v.is_finite()) || !(meta.u_max > 0.0) {
            return Err(PolicyError::Meta("theta_nom must be finite and u_max positive".into()));
        }
        Ok(Self { net_action, net_sens, meta })
    }

    pub fn u_max(&self) -> f64 {
        self.meta.u_max
    }

    /// Nominal action plus sensitivity correction, before saturation.
    pub fn act_unclamped(&self, s: &State, theta: &[f64]) -> Result<f64, PolicyError> {
        if theta.len() != N_PARAMS {
            return Err(PolicyError::DimensionMismatch { expected: N_PARAMS, got: theta.len() });
        }
        let u = self.net_action.forward_state(s)?[0];
        let nom = self.meta.theta_nom.to_array();
        if theta.iter().zip(&nom).all(|(a, b)| a == b) {
            return Ok(u);
        }
        let sens = self.net_sens.forward_state(s)?;
        Ok(u + sens.iter().zip(theta.iter().zip(&nom)).map(|(g, (t, n))| g * (t - n)).sum::<f64>())
    }

    pub fn act(&self, s: &State, theta: &[f64]) -> Result<f64, PolicyError> {
        let u = self.act_unclamped(s, theta)?;
        Ok(u.clamp(-self.meta.u_max, self.meta.u_max))
    }

    pub fn save(&self, dir: &Path) -> Result<(), PolicyError> {
        fs::create_dir_all(dir)?;
        self.net_action.save(&dir.join(ACTION_FILE))?;
        self.net_sens.save(&dir.join(SENSITIVITY_FILE))?;
        let json = serde_json::to_string_pretty(&self.meta).map_err(|e| PolicyError::Meta(e.to_string()))?;
        fs::write(dir.join(META_FILE), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, PolicyError> {
        let text = fs::read_to_string(dir.join(META_FILE))?;
        let meta: BundleMeta = serde_json::from_str(&text).map_err(|e| PolicyError::Meta(e.to_string()))?;
        let net_action = Mlp::load(&dir.join(ACTION_FILE))?;
        let net_sens = Mlp::load(&dir.join(SENSITIVITY_FILE))?;
        Self::new(net_action, net_sens, meta)
    }
}
