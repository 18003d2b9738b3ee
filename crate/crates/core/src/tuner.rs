//! Single-trust-region Bayesian optimization (TuRBO style) with Thompson
//! sampling, and the quasi-random Sobol baseline.
//!
//! The search runs in the unit cube over the tuning bounds; the objective
//! sees raw parameter vectors.

use crate::dataset::sample_seed;
use crate::gp::{fit, FitOptions, GpError, GpModel};
use crate::sobol::{scale_to_box, Sobol};
use serde::{Deserialize, Serialize};
use std::io::{self, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TunerError {
    #[error("invalid tuner input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Gp(#[from] GpError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TurboConfig {
    pub length_init: f64,
    pub length_min: f64,
    pub length_max: f64,
    pub success_tol: u32,
    pub fail_tol: u32,
    /// Candidate count; `None` means `min(5000, 200 d)`.
    pub n_candidates: Option<usize>,
    /// Relative threshold of the improvement test.
    pub improvement_rel: f64,
}

impl Default for TurboConfig {
    fn default() -> Self {
        Self {
            length_init: 0.4,
            length_min: 0.5f64.powi(7),
            length_max: 1.6,
            success_tol: 3,
            fail_tol: 3,
            n_candidates: None,
            improvement_rel: 1e-3,
        }
    }
}

impl TurboConfig {
    pub fn validate(&self) -> Result<(), TunerError> {
        let ok = self.length_min > 0.0
            && self.length_min <= self.length_init
            && self.length_init <= self.length_max
            && self.success_tol > 0
            && self.fail_tol > 0
            && self.improvement_rel >= 0.0
            && self.n_candidates != Some(0);
        if ok {
            Ok(())
        } else {
            Err(TunerError::InvalidInput(format!("trust region settings {self:?}")))
        }
    }

    pub fn candidates_for(&self, d: usize) -> usize {
        self.n_candidates.unwrap_or((200 * d).min(5000))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrustRegionState {
    pub length: f64,
    /// Center in unit-cube coordinates.
    pub center: Vec<f64>,
    pub success_count: u32,
    pub failure_count: u32,
    pub length_init: f64,
    pub length_min: f64,
    pub length_max: f64,
    pub success_tol: u32,
    pub fail_tol: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrUpdate {
    Continue,
    /// The region collapsed below its minimum length.
    Reset,
}

impl TrustRegionState {
    pub fn new(center: Vec<f64>, cfg: &TurboConfig) -> Self {
        Self {
            length: cfg.length_init,
            center,
            success_count: 0,
            failure_count: 0,
            length_init: cfg.length_init,
            length_min: cfg.length_min,
            length_max: cfg.length_max,
            success_tol: cfg.success_tol,
            fail_tol: cfg.fail_tol,
        }
    }

    /// Side lengths `L * l_j / (prod l)^(1/d)` before clipping.
    pub fn sides(&self, lengthscales: &[f64]) -> Vec<f64> {
        let d = lengthscales.len() as f64;
        let log_geo = lengthscales.iter().map(|l| l.ln()).sum::<f64>() / d;
        lengthscales.iter().map(|l| self.length * (l.ln() - log_geo).exp()).collect()
    }

    /// The region as per-dimension intervals, clipped to the unit cube.
    pub fn bounds(&self, lengthscales: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let sides = self.sides(lengthscales);
        let lo = self.center.iter().zip(&sides).map(|(c, s)| (c - s / 2.0).max(0.0)).collect();
        let hi = self.center.iter().zip(&sides).map(|(c, s)| (c + s / 2.0).min(1.0)).collect();
        (lo, hi)
    }

    /// Counter and length update after one evaluation.
    pub fn update(&mut self, improved: bool) -> TrUpdate {
        if improved {
            self.success_count += 1;
            self.failure_count = 0;
            if self.success_count >= self.success_tol {
                self.length = (2.0 * self.length).min(self.length_max);
                self.success_count = 0;
            }
        } else {
            self.failure_count += 1;
            self.success_count = 0;
            if self.failure_count >= self.fail_tol {
                self.length /= 2.0;
                self.failure_count = 0;
            }
        }
        if self.length < self.length_min {
            TrUpdate::Reset
        } else {
            TrUpdate::Continue
        }
    }

    /// Restart at `center` with the initial length and cleared counters.
    pub fn reset(&mut self, center: Vec<f64>) {
        self.length = self.length_init;
        self.center = center;
        self.success_count = 0;
        self.failure_count = 0;
    }
}

/// Index of the candidate maximizing one joint posterior draw.
pub fn thompson_select(model: &GpModel, candidates: &[Vec<f64>], seed: u64) -> Result<usize, TunerError> {
    if candidates.len() == 1 {
        return Ok(0);
    }
    let draw = model.sample_joint(candidates, seed)?;
    Ok(argmax(&draw))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Sobol candidates inside the trust region and the Thompson choice among
/// them, in unit-cube coordinates.
pub fn propose_next(
    model: &GpModel,
    tr: &TrustRegionState,
    n_candidates: usize,
    seed: u64,
) -> Result<Vec<f64>, TunerError> {
    let (lo, hi) = tr.bounds(&model.hyper.lengthscales);
    let candidates: Vec<Vec<f64>> = Sobol::scrambled(tr.center.len(), seed)
        .take_points(n_candidates.max(1))
        .iter()
        .map(|u| scale_to_box(u, &lo, &hi))
        .collect();
    let i = thompson_select(model, &candidates, sample_seed(seed, 1))?;
    Ok(candidates[i].clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    /// 1-based episode number.
    pub episode: usize,
    pub theta: Vec<f64>,
    pub reward: f64,
    /// Seed handed to the objective.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TuningHistory {
    pub records: Vec<EvalRecord>,
    /// Best reward after each episode.
    pub incumbent: Vec<f64>,
    /// Parameters of the best reward after each episode.
    pub incumbent_theta: Vec<Vec<f64>>,
    /// Episodes after which the trust region was reset.
    pub resets: Vec<usize>,
    /// Trust-region length after each episode (BO only).
    pub tr_length: Vec<f64>,
}

impl TuningHistory {
    fn push(&mut self, rec: EvalRecord) {
        let best = self.incumbent.last().copied().unwrap_or(f64::NEG_INFINITY);
        if rec.reward > best {
            self.incumbent.push(rec.reward);
            self.incumbent_theta.push(rec.theta.clone());
        } else {
            self.incumbent.push(best);
            self.incumbent_theta.push(self.incumbent_theta.last().unwrap().clone());
        }
        self.records.push(rec);
    }

    pub fn best_theta(&self) -> Option<&[f64]> {
        self.incumbent_theta.last().map(|v| v.as_slice())
    }

    pub fn write_csv_to(&self, w: &mut impl Write) -> io::Result<()> {
        let d = self.records.first().map_or(0, |r| r.theta.len());
        let thetas: Vec<String> = (1..=d).map(|j| format!("theta_{j}")).collect();
        writeln!(w, "episode,{},reward,incumbent_reward", thetas.join(","))?;
        for (r, inc) in self.records.iter().zip(&self.incumbent) {
            let th: Vec<String> = r.theta.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{},{},{}", r.episode, th.join(","), r.reward, inc)?;
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> io::Result<()> {
        let mut w = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv_to(&mut w)?;
        w.flush()
    }
}

fn check_bounds(theta_init: &[f64], lo: &[f64], hi: &[f64], n_episodes: usize) -> Result<(), TunerError> {
    let d = theta_init.len();
    if d == 0 || lo.len() != d || hi.len() != d {
        return Err(TunerError::InvalidInput("dimension mismatch between start point and bounds".into()));
    }
    if lo.iter().zip(hi).any(|(l, h)| !(l < h)) {
        return Err(TunerError::InvalidInput("every lower bound must be below its upper bound".into()));
    }
    if theta_init.iter().zip(lo.iter().zip(hi)).any(|(t, (l, h))| t < l || t > h) {
        return Err(TunerError::InvalidInput("start point outside the bounds".into()));
    }
    if n_episodes < 2 {
        return Err(TunerError::InvalidInput("need at least two episodes".into()));
    }
    Ok(())
}

fn to_unit(theta: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    theta.iter().zip(lo.iter().zip(hi)).map(|(t, (l, h))| (t - l) / (h - l)).collect()
}

fn clean(r: f64) -> f64 {
    if r.is_finite() {
        r
    } else {
        0.0
    }
}

/// Bayesian optimization of a noisy objective `f(theta, seed)`.
///
/// Episode 1 evaluates `theta_init`. While the current data holds fewer
/// than three distinct points, scrambled Sobol points inside the trust
/// region are evaluated; afterwards each episode fits the GP, proposes by
/// Thompson sampling and updates the region. On a reset the region is
/// re-centered at the incumbent and the GP data are cleared.
pub fn run_bo(
    mut objective: impl FnMut(&[f64], u64) -> f64,
    theta_init: &[f64],
    lo: &[f64],
    hi: &[f64],
    n_episodes: usize,
    seed: u64,
    cfg: &TurboConfig,
) -> Result<TuningHistory, TunerError> {
    check_bounds(theta_init, lo, hi, n_episodes)?;
    cfg.validate()?;
    let d = theta_init.len();
    let fit_opts = FitOptions::default();
    let mut hist = TuningHistory::default();
    let mut tr = TrustRegionState::new(to_unit(theta_init, lo, hi), cfg);
    // GP data since the last reset, unit-cube inputs.
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut restart = 0u64;
    let mut init_points = Sobol::scrambled(d, sample_seed(seed, u64::MAX));

    for episode in 1..=n_episodes {
        let ep_seed = sample_seed(seed, episode as u64);
        let distinct = {
            let mut pts: Vec<&Vec<f64>> = xs.iter().collect();
            pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            pts.dedup();
            pts.len()
        };
        let mut model_step = false;
        let u = if episode == 1 {
            tr.center.clone()
        } else if distinct < 3 {
            let iso = vec![1.0; d];
            let (blo, bhi) = tr.bounds(&iso);
            loop {
                let cand = scale_to_box(&init_points.next_point(), &blo, &bhi);
                if !xs.contains(&cand) {
                    break cand;
                }
            }
        } else {
            let model = fit(xs.clone(), ys.clone(), &fit_opts, sample_seed(ep_seed, 2))?;
            model_step = true;
            propose_next(&model, &tr, cfg.candidates_for(d), sample_seed(ep_seed, 3))?
        };
        let theta = if episode == 1 { theta_init.to_vec() } else { scale_to_box(&u, lo, hi) };
        let reward = clean(objective(&theta, ep_seed));
        let best_before = hist.incumbent.last().copied();
        hist.push(EvalRecord { episode, theta, reward, seed: ep_seed });
        xs.push(u.clone());
        ys.push(reward);

        let improved = match best_before {
            None => true,
            Some(b) => reward > b + cfg.improvement_rel * b.abs(),
        };
        if improved {
            tr.center = u;
        }
        if model_step && tr.update(improved) == TrUpdate::Reset {
            let center = to_unit(hist.best_theta().unwrap(), lo, hi);
            tr.reset(center);
            xs.clear();
            ys.clear();
            restart += 1;
            init_points = Sobol::scrambled(d, sample_seed(seed, u64::MAX - restart));
            hist.resets.push(episode);
        }
        hist.tr_length.push(tr.length);
    }
    Ok(hist)
}

/// Evaluates the first `n_episodes` points of the unscrambled Sobol
/// sequence scaled into the bounds; the first point is the box midpoint.
pub fn run_sobol_baseline(
    mut objective: impl FnMut(&[f64], u64) -> f64,
    lo: &[f64],
    hi: &[f64],
    n_episodes: usize,
    seed: u64,
) -> Result<TuningHistory, TunerError> {
    let mid: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect();
    check_bounds(&mid, lo, hi, n_episodes)?;
    let mut sobol = Sobol::new(lo.len());
    let mut hist = TuningHistory::default();
    for episode in 1..=n_episodes {
        let ep_seed = sample_seed(seed, episode as u64);
        let theta = scale_to_box(&sobol.next_point(), lo, hi);
        let reward = clean(objective(&theta, ep_seed));
        hist.push(EvalRecord { episode, theta, reward, seed: ep_seed });
    }
    Ok(hist)
}
