//! Closed-loop episodes on the simulated cartpole and the sparse swing-up
//! reward.

use crate::plant::{step, CartpoleConstants, CartpoleParams, State};
use crate::policy::AdaptivePolicy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

/// Position weight of the reward [1/m^2].
pub const W_POS: f64 = 5.0 / 0.39;
/// Half-width of the upright band [rad].
pub const UPRIGHT_BAND: f64 = 15.0 * PI / 180.0;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("invalid episode config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum InitialState {
    /// Hanging rest, phi = pi.
    Hanging,
    /// Hanging rest with phi(0) uniform in [pi - amplitude, pi + amplitude].
    Jittered { amplitude: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    /// Episode length [s].
    pub duration: f64,
    /// Control rate [Hz].
    pub control_rate: f64,
    /// Integration step [s].
    pub sim_dt: f64,
    pub initial: InitialState,
    pub w_pos: f64,
    /// Upright band half-width [deg].
    pub upright_band_deg: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            duration: 20.0,
            control_rate: 50.0,
            sim_dt: 0.002,
            initial: InitialState::Hanging,
            w_pos: W_POS,
            upright_band_deg: 15.0,
        }
    }
}

impl EpisodeConfig {
    pub fn jittered() -> Self {
        Self { initial: InitialState::Jittered { amplitude: 0.05 }, ..Self::default() }
    }

    /// Number of control steps `T`.
    pub fn steps(&self) -> usize {
        (self.duration * self.control_rate).round() as usize
    }

    fn substeps(&self) -> usize {
        (1.0 / (self.control_rate * self.sim_dt)).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.into()));
        if !(self.duration > 0.0 && self.control_rate > 0.0 && self.sim_dt > 0.0) {
            return bad("duration, control_rate and sim_dt must be positive");
        }
        let ratio = 1.0 / (self.control_rate * self.sim_dt);
        if ratio < 0.5 || (ratio - ratio.round()).abs() > 1e-9 * ratio {
            return bad("control period must be a multiple of sim_dt");
        }
        if (self.duration * self.control_rate - self.steps() as f64).abs() > 1e-9 {
            return bad("duration must span a whole number of control periods");
        }
        if let InitialState::Jittered { amplitude } = self.initial {
            if !(amplitude >= 0.0 && amplitude.is_finite()) {
                return bad("jitter amplitude must be nonnegative");
            }
        }
        if !(self.w_pos >= 0.0 && self.upright_band_deg > 0.0) {
            return bad("w_pos must be nonnegative and the upright band positive");
        }
        Ok(())
    }

    pub fn initial_state(&self, seed: u64) -> State {
        match self.initial {
            InitialState::Hanging => State::HANGING,
            InitialState::Jittered { amplitude } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let phi = if amplitude > 0.0 { rng.random_range(PI - amplitude..=PI + amplitude) } else { PI };
                State::new(0.0, phi, 0.0, 0.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Failure {
    /// The cart left the rail.
    Rail { time: f64, position: f64 },
    /// State or action became non-finite.
    NonFinite { time: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    /// States at the control instants, `T + 1` entries unless failed.
    pub states: Vec<State>,
    /// Action applied from each recorded state.
    pub actions: Vec<f64>,
    pub control_dt: f64,
    pub reward: f64,
    pub failure: Option<Failure>,
}

impl EpisodeRecord {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    pub fn write_csv(&self, path: &Path) -> io::Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_csv_to(&mut w)?;
        w.flush()
    }

    pub fn write_csv_to(&self, w: &mut impl Write) -> io::Result<()> {
        writeln!(w, "time,angle_pendulum,position_cart,u")?;
        for (k, (s, u)) in self.states.iter().zip(&self.actions).enumerate() {
            writeln!(w, "{},{},{},{}", k as f64 * self.control_dt, s.phi, s.p, u)?;
        }
        Ok(())
    }
}

/// Sparse swing-up reward over angles and positions at `k = 0..=T`.
///
/// `k_up` is the start of the final run inside the upright band and
/// `t_up = T - k_up`; the reward is `t_up / T - w_pos / t_up * sum p(k)^2`
/// over `k_up < k <= T`. Failed episodes, episodes that never settle
/// upright, and `t_up = 0` score 0.
pub fn cartpole_reward(phi: &[f64], p: &[f64], failed: bool, w_pos: f64, band: f64) -> Result<f64, SimError> {
    if phi.is_empty() || phi.len() != p.len() {
        return Err(SimError::EmptyTrajectory);
    }
    let t = phi.len() - 1;
    if failed || t == 0 {
        return Ok(0.0);
    }
    let inside = |k: usize| phi[k].abs() <= band;
    if !inside(t) {
        return Ok(0.0);
    }
    let mut k_up = t;
    while k_up > 0 && inside(k_up - 1) {
        k_up -= 1;
    }
    let t_up = t - k_up;
    if t_up == 0 {
        return Ok(0.0);
    }
    let sum: f64 = p[k_up + 1..=t].iter().map(|v| v * v).sum();
    Ok(t_up as f64 / t as f64 - w_pos / t_up as f64 * sum)
}

/// Runs one episode with an arbitrary state-feedback law. Actions are held
/// for one control period while the plant is integrated at `sim_dt`.
pub fn rollout_with(
    mut controller: impl FnMut(&State) -> f64,
    theta_true: &CartpoleParams,
    constants: &CartpoleConstants,
    cfg: &EpisodeConfig,
    seed: u64,
) -> Result<EpisodeRecord, SimError> {
    cfg.validate()?;
    let steps = cfg.steps();
    let substeps = cfg.substeps();
    let dt = 1.0 / (cfg.control_rate * substeps as f64);
    let control_dt = 1.0 / cfg.control_rate;
    let mut s = cfg.initial_state(seed);
    let mut states = Vec::with_capacity(steps + 1);
    let mut actions = Vec::with_capacity(steps + 1);
    let mut failure = None;
    for k in 0..=steps {
        let u = controller(&s);
        states.push(s);
        actions.push(u);
        if !u.is_finite() {
            failure = Some(Failure::NonFinite { time: k as f64 * control_dt });
            break;
        }
        if k == steps {
            break;
        }
        for i in 0..substeps {
            s = step(&s, u, theta_true, constants, dt);
            let time = k as f64 * control_dt + (i + 1) as f64 * dt;
            if !s.is_finite() {
                failure = Some(Failure::NonFinite { time });
            } else if s.p.abs() > constants.rail_halfwidth {
                failure = Some(Failure::Rail { time, position: s.p });
            }
            if failure.is_some() {
                break;
            }
        }
        if failure.is_some() {
            break;
        }
    }
    let phi: Vec<f64> = states.iter().map(|s| s.phi).collect();
    let p: Vec<f64> = states.iter().map(|s| s.p).collect();
    let failed = failure.is_some();
    let reward = cartpole_reward(&phi, &p, failed, cfg.w_pos, cfg.upright_band_deg.to_radians())?;
    Ok(EpisodeRecord { states, actions, control_dt, reward, failure })
}

/// Episode under the adaptive policy evaluated at `theta_policy`, on a
/// plant with parameters `theta_true`.
pub fn rollout(
    pol: &AdaptivePolicy,
    theta_policy: &CartpoleParams,
    theta_true: &CartpoleParams,
    constants: &CartpoleConstants,
    cfg: &EpisodeConfig,
    seed: u64,
) -> Result<EpisodeRecord, SimError> {
    let th = theta_policy.to_array();
    rollout_with(|s| pol.act(s, &th).unwrap_or(f64::NAN), theta_true, constants, cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn band() -> f64 {
        UPRIGHT_BAND
    }

    #[test]
    fn upright_and_centered_scores_one() {
        let n = 1001;
        let r = cartpole_reward(&vec![0.0; n], &vec![0.0; n], false, W_POS, band()).unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn never_upright_scores_zero() {
        let n = 1001;
        let r = cartpole_reward(&vec![PI; n], &vec![0.0; n], false, W_POS, band()).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn half_upright_with_offset() {
        let t = 1000;
        let phi: Vec<f64> = (0..=t).map(|k| if k < t / 2 { 1.0 } else { 0.0 }).collect();
        let p: Vec<f64> = (0..=t).map(|k| if k > t / 2 { 0.1 } else { 0.0 }).collect();
        let r = cartpole_reward(&phi, &p, false, W_POS, band()).unwrap();
        // 0.5 - (5 / 0.39) * 0.01
        assert!((r - 0.371_794_871_794_871_8).abs() < 1e-12, "{r}");
    }

    #[test]
    fn failure_scores_zero() {
        let n = 11;
        assert_eq!(cartpole_reward(&vec![0.0; n], &vec![0.0; n], true, W_POS, band()).unwrap(), 0.0);
    }

    #[test]
    fn only_the_final_run_counts() {
        // Upright, falls at k = 3, upright again from k = 6.
        let phi = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let r = cartpole_reward(&phi, &[0.0; 11], false, W_POS, band()).unwrap();
        assert_eq!(r, 0.4);
        let late = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0];
        assert_eq!(cartpole_reward(&late, &[0.0; 11], false, W_POS, band()).unwrap(), 0.0);
    }

    #[test]
    fn empty_trajectory_is_an_error() {
        assert_eq!(cartpole_reward(&[], &[], false, W_POS, band()), Err(SimError::EmptyTrajectory));
    }

    #[test]
    fn zero_policy_stays_down_without_failure() {
        let c = CartpoleConstants::default();
        let rec = rollout_with(|_| 0.0, &CartpoleParams::default(), &c, &EpisodeConfig::default(), 0).unwrap();
        assert_eq!(rec.states.len(), 1001);
        assert!(!rec.failed());
        assert_eq!(rec.reward, 0.0);
    }

    #[test]
    fn constant_push_hits_the_rail() {
        let c = CartpoleConstants::default();
        let rec = rollout_with(|_| 12.0, &CartpoleParams::default(), &c, &EpisodeConfig::default(), 0).unwrap();
        assert!(matches!(rec.failure, Some(Failure::Rail { position, .. }) if position > 0.39));
        assert_eq!(rec.reward, 0.0);
        assert!(rec.states.len() < 1001);
    }

    #[test]
    fn nan_action_is_a_failure() {
        let c = CartpoleConstants::default();
        let rec = rollout_with(|_| f64::NAN, &CartpoleParams::default(), &c, &EpisodeConfig::default(), 0).unwrap();
        assert!(matches!(rec.failure, Some(Failure::NonFinite { .. })));
    }

    #[test]
    fn rollouts_are_deterministic_per_seed() {
        let c = CartpoleConstants::default();
        let cfg = EpisodeConfig::jittered();
        let ctl = |s: &State| -3.0 * s.phi.sin() - 2.0 * s.p;
        let a = rollout_with(ctl, &CartpoleParams::default(), &c, &cfg, 17).unwrap();
        let b = rollout_with(ctl, &CartpoleParams::default(), &c, &cfg, 17).unwrap();
        let d = rollout_with(ctl, &CartpoleParams::default(), &c, &cfg, 18).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.states[0], d.states[0]);
        assert!((a.states[0].phi.abs() - PI).abs() <= 0.05 + 1e-12);
    }

    #[test]
    fn invalid_rates_are_rejected() {
        let cfg = EpisodeConfig { sim_dt: 0.003, ..EpisodeConfig::default() };
        assert!(cfg.validate().is_err());
        assert!(EpisodeConfig::default().validate().is_ok());
        assert_eq!(EpisodeConfig::default().steps(), 1000);
    }

    #[test]
    fn csv_header_and_length() {
        let c = CartpoleConstants::default();
        let cfg = EpisodeConfig { duration: 0.1, ..EpisodeConfig::default() };
        let rec = rollout_with(|_| 0.0, &CartpoleParams::default(), &c, &cfg, 0).unwrap();
        let mut buf = Vec::new();
        rec.write_csv_to(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "time,angle_pendulum,position_cart,u");
        assert_eq!(lines.len(), 7);
    }

    fn trajectory() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..60).prop_flat_map(|n| {
            (prop::collection::vec(-3.2f64..3.2, n), prop::collection::vec(-0.39f64..0.39, n))
        })
    }

    proptest! {
        #[test]
        fn reward_is_bounded((phi, p) in trajectory()) {
            let r = cartpole_reward(&phi, &p, false, W_POS, band()).unwrap();
            prop_assert!((-W_POS * 0.39 * 0.39 - 1e-12..=1.0).contains(&r));
        }

        #[test]
        fn reward_is_mirror_invariant((phi, p) in trajectory()) {
            let r = cartpole_reward(&phi, &p, false, W_POS, band()).unwrap();
            let mphi: Vec<f64> = phi.iter().map(|v| -v).collect();
            let mp: Vec<f64> = p.iter().map(|v| -v).collect();
            prop_assert_eq!(r, cartpole_reward(&mphi, &mp, false, W_POS, band()).unwrap());
        }

        #[test]
        fn shrinking_positions_never_lowers_reward((phi, p) in trajectory(), f in 0.0f64..1.0) {
            let r = cartpole_reward(&phi, &p, false, W_POS, band()).unwrap();
            let shrunk: Vec<f64> = p.iter().map(|v| v * f).collect();
            prop_assert!(cartpole_reward(&phi, &shrunk, false, W_POS, band()).unwrap() >= r - 1e-15);
        }
    }
}
