//! Simulation study: random plant instances, one tuning run per instance,
//! method and seed, and incumbent curves aggregated across instances.

use crate::dataset::sample_seed;
use crate::plant::{CartpoleConstants, CartpoleParams, ParamVector, N_PARAMS, PARAM_HALF_WIDTHS};
use crate::policy::{AdaptivePolicy, PolicyError};
use crate::simloop::{rollout, EpisodeConfig, InitialState, SimError};
use crate::tuner::{run_bo, run_sobol_baseline, TunerError, TuningHistory, TurboConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

const MAX_INSTANCE_RETRIES: usize = 100;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("no valid plant instance after {0} draws")]
    InvariantUnsatisfiable(usize),
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tuner(#[from] TunerError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Turbo,
    Sobol,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Turbo => "turbo",
            Method::Sobol => "sobol",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub n_instances: usize,
    /// Episodes per tuning run.
    pub episodes: usize,
    pub methods: Vec<Method>,
    pub bo_seeds: Vec<u64>,
    /// Half-widths of the instance box and of the tuning box around
    /// `theta_nom`, ordered as `m_add, M, C1, C2, C3`.
    pub half_widths: ParamVector,
    /// Jitter amplitude of the initial angle during tuning and final
    /// evaluation [rad].
    pub jitter: f64,
    /// Episodes averaged when re-evaluating the final incumbent.
    pub final_episodes: usize,
    pub bundle: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_instances: 20,
            episodes: 18,
            methods: vec![Method::Turbo, Method::Sobol],
            bo_seeds: vec![0, 1, 2],
            half_widths: PARAM_HALF_WIDTHS,
            jitter: 0.05,
            final_episodes: 3,
            bundle: PathBuf::from("artifacts/bundle"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self, theta_nom: &CartpoleParams) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidConfig(m.into()));
        if self.n_instances == 0 {
            return bad("n_instances must be at least 1");
        }
        if self.episodes < 2 {
            return bad("episodes must be at least 2");
        }
        if self.methods.is_empty() || self.bo_seeds.is_empty() {
            return bad("methods and bo_seeds must be nonempty");
        }
        if !self.half_widths.iter().all(|h| *h > 0.0 && h.is_finite()) {
            return bad("half_widths must be positive");
        }
        let (lo, hi) = self.tuning_bounds(theta_nom);
        if !CartpoleParams::from_slice(&lo).is_valid() || !CartpoleParams::from_slice(&hi).is_valid() {
            return bad("parameter box leaves the valid plant range");
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return bad("jitter must be nonnegative");
        }
        if self.final_episodes == 0 {
            return bad("final_episodes must be at least 1");
        }
        Ok(())
    }

    pub fn tuning_bounds(&self, theta_nom: &CartpoleParams) -> (Vec<f64>, Vec<f64>) {
        let nom = theta_nom.to_array();
        let lo = nom.iter().zip(&self.half_widths).map(|(n, h)| n - h).collect();
        let hi = nom.iter().zip(&self.half_widths).map(|(n, h)| n + h).collect();
        (lo, hi)
    }

    pub fn episode_config(&self, base: &EpisodeConfig) -> EpisodeConfig {
        EpisodeConfig { initial: InitialState::Jittered { amplitude: self.jitter }, ..base.clone() }
    }
}

/// Draws `theta_true` uniformly from `[theta_nom + lower, theta_nom + upper]`,
/// redrawing while the plant is invalid.
pub fn sample_instance(
    theta_nom: &CartpoleParams,
    lower: &[f64],
    upper: &[f64],
    seed: u64,
) -> Result<CartpoleParams, HarnessError> {
    if lower.len() != N_PARAMS || upper.len() != N_PARAMS {
        return Err(HarnessError::InvalidConfig("bounds must have one entry per parameter".into()));
    }
    if lower.iter().zip(upper).any(|(l, u)| !(l <= u) || !l.is_finite() || !u.is_finite()) {
        return Err(HarnessError::InvalidConfig("every lower bound must not exceed its upper bound".into()));
    }
    let nom = theta_nom.to_array();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_INSTANCE_RETRIES {
        let mut th = nom;
        for j in 0..N_PARAMS {
            if upper[j] > lower[j] {
                th[j] += rng.random_range(lower[j]..upper[j]);
            } else {
                th[j] += lower[j];
            }
        }
        let theta = CartpoleParams::from_array(th);
        if theta.is_valid() {
            return Ok(theta);
        }
    }
    Err(HarnessError::InvariantUnsatisfiable(MAX_INSTANCE_RETRIES))
}

/// Seed of instance `i` in an experiment with global seed `seed`.
pub fn instance_seed(seed: u64, instance: usize) -> u64 {
    sample_seed(seed, instance as u64)
}

/// Seed of one tuning run, a function of the instance seed and BO seed only.
pub fn run_seed(instance_seed: u64, bo_seed: u64) -> u64 {
    sample_seed(instance_seed, bo_seed)
}

/// Everything one tuning run needs besides the method and seeds.
pub struct TuningSetup<'a> {
    pub policy: &'a AdaptivePolicy,
    pub constants: &'a CartpoleConstants,
    pub episode: &'a EpisodeConfig,
    pub turbo: &'a TurboConfig,
    pub lo: &'a [f64],
    pub hi: &'a [f64],
}

impl TuningSetup<'_> {
    fn reward(&self, theta: &[f64], theta_true: &CartpoleParams, seed: u64) -> f64 {
        let th = CartpoleParams::from_slice(theta);
        match rollout(self.policy, &th, theta_true, self.constants, self.episode, seed) {
            Ok(rec) => rec.reward,
            Err(_) => 0.0,
        }
    }

    /// Tunes the policy parameters on a plant with `theta_true`.
    pub fn tune(
        &self,
        method: Method,
        theta_true: &CartpoleParams,
        episodes: usize,
        seed: u64,
    ) -> Result<TuningHistory, TunerError> {
        let objective = |theta: &[f64], s: u64| self.reward(theta, theta_true, s);
        match method {
            Method::Turbo => {
                let init = self.policy.meta.theta_nom.to_array();
                run_bo(objective, &init, self.lo, self.hi, episodes, seed, self.turbo)
            }
            Method::Sobol => run_sobol_baseline(objective, self.lo, self.hi, episodes, seed),
        }
    }

    /// Mean reward of `theta` over `n` jittered episodes with seeds derived
    /// from `seed`.
    pub fn evaluate(&self, theta: &[f64], theta_true: &CartpoleParams, n: usize, seed: u64) -> f64 {
        let total: f64 = (0..n).map(|j| self.reward(theta, theta_true, sample_seed(seed, j as u64))).sum();
        total / n.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub method: Method,
    pub bo_seed: u64,
    pub instance: usize,
    pub instance_seed: u64,
    pub theta_true: CartpoleParams,
    pub history: TuningHistory,
    /// Mean reward of the final incumbent over fresh jittered episodes.
    pub final_eval: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub epoch: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub mean_initial: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub method: Method,
    pub bo_seed: u64,
    pub rows: Vec<AggregateRow>,
}

impl Aggregate {
    pub fn file_name(&self) -> String {
        format!("aggregate_{}_seed{}.csv", self.method, self.bo_seed)
    }

    pub fn write_csv_to(&self, w: &mut impl Write) -> io::Result<()> {
        writeln!(w, "epoch,mean,min,max,mean_initial")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{}", r.epoch, r.mean, r.min, r.max, r.mean_initial)?;
        }
        Ok(())
    }
}

/// Incumbent statistics across runs per epoch. `mean_initial` is the mean
/// episode-1 reward.
pub fn aggregate(method: Method, bo_seed: u64, runs: &[&TuningHistory]) -> Aggregate {
    let episodes = runs.iter().map(|h| h.incumbent.len()).min().unwrap_or(0);
    let n = runs.len() as f64;
    let mean_initial = runs.iter().map(|h| h.records[0].reward).sum::<f64>() / n;
    let rows = (0..episodes)
        .map(|e| {
            let vals: Vec<f64> = runs.iter().map(|h| h.incumbent[e]).collect();
            AggregateRow {
                epoch: e + 1,
                mean: vals.iter().sum::<f64>() / n,
                min: vals.iter().copied().fold(f64::INFINITY, f64::min),
                max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean_initial,
            }
        })
        .collect();
    Aggregate { method, bo_seed, rows }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    /// Ordered by method, then BO seed, then instance.
    pub runs: Vec<RunResult>,
    pub aggregates: Vec<Aggregate>,
}

impl ExperimentResult {
    pub fn aggregate_for(&self, method: Method, bo_seed: u64) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.method == method && a.bo_seed == bo_seed)
    }

    /// Writes `instances.csv`, `summary.csv`, one aggregate file per method
    /// and seed, and every run history under `runs/`.
    pub fn write(&self, dir: &Path) -> io::Result<()> {
        let runs_dir = dir.join("runs");
        fs::create_dir_all(&runs_dir)?;
        for a in &self.aggregates {
            write_file(&dir.join(a.file_name()), |w| a.write_csv_to(w))?;
        }
        for r in &self.runs {
            let name = format!("{}_seed{}_instance{:03}.csv", r.method, r.bo_seed, r.instance);
            write_file(&runs_dir.join(name), |w| r.history.write_csv_to(w))?;
        }
        write_file(&dir.join("summary.csv"), |w| {
            writeln!(w, "method,bo_seed,instance,instance_seed,initial_reward,incumbent_reward,final_eval_reward")?;
            for r in &self.runs {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{}",
                    r.method,
                    r.bo_seed,
                    r.instance,
                    r.instance_seed,
                    r.history.records[0].reward,
                    r.history.incumbent.last().unwrap(),
                    r.final_eval
                )?;
            }
            Ok(())
        })?;
        write_file(&dir.join("instances.csv"), |w| {
            writeln!(w, "instance,instance_seed,m_add,M,C1,C2,C3")?;
            let mut seen = std::collections::BTreeSet::new();
            for r in &self.runs {
                if seen.insert(r.instance) {
                    let t = r.theta_true;
                    writeln!(w, "{},{},{},{},{},{},{}", r.instance, r.instance_seed, t.m_add, t.cart_mass, t.c1, t.c2, t.c3)?;
                }
            }
            Ok(())
        })
    }
}

pub fn write_file(path: &Path, f: impl FnOnce(&mut io::BufWriter<fs::File>) -> io::Result<()>) -> io::Result<()> {
    let mut w = io::BufWriter::new(fs::File::create(path)?);
    f(&mut w)?;
    w.flush()
}

/// Runs every (method, BO seed, instance) combination in parallel and
/// aggregates the incumbent traces.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    policy: &AdaptivePolicy,
    constants: &CartpoleConstants,
    episode: &EpisodeConfig,
    turbo: &TurboConfig,
    seed: u64,
) -> Result<ExperimentResult, HarnessError> {
    let theta_nom = policy.meta.theta_nom;
    cfg.validate(&theta_nom)?;
    let (lo, hi) = cfg.tuning_bounds(&theta_nom);
    let ep = cfg.episode_config(episode);
    ep.validate()?;
    let setup = TuningSetup { policy, constants, episode: &ep, turbo, lo: &lo, hi: &hi };
    let neg: Vec<f64> = cfg.half_widths.iter().map(|h| -h).collect();
    let instances: Vec<(u64, CartpoleParams)> = (0..cfg.n_instances)
        .map(|i| {
            let s = instance_seed(seed, i);
            sample_instance(&theta_nom, &neg, &cfg.half_widths, s).map(|t| (s, t))
        })
        .collect::<Result<_, _>>()?;

    let jobs: Vec<(Method, u64, usize)> = cfg
        .methods
        .iter()
        .flat_map(|m| cfg.bo_seeds.iter().flat_map(move |b| (0..cfg.n_instances).map(move |i| (*m, *b, i))))
        .collect();
    let runs: Vec<RunResult> = jobs
        .par_iter()
        .map(|&(method, bo_seed, instance)| {
            let (iseed, theta_true) = instances[instance];
            let rseed = run_seed(iseed, bo_seed);
            let history = setup.tune(method, &theta_true, cfg.episodes, rseed)?;
            let best = history.best_theta().expect("nonempty history").to_vec();
            let final_eval =
                setup.evaluate(&best, &theta_true, cfg.final_episodes, sample_seed(rseed, u64::MAX));
            log::info!(
                "{method} seed {bo_seed} instance {instance}: initial {:.4}, incumbent {:.4}, final {:.4}",
                history.records[0].reward,
                history.incumbent.last().unwrap(),
                final_eval
            );
            Ok(RunResult { method, bo_seed, instance, instance_seed: iseed, theta_true, history, final_eval })
        })
        .collect::<Result<_, HarnessError>>()?;

    let mut aggregates = Vec::new();
    for m in &cfg.methods {
        for b in &cfg.bo_seeds {
            let hs: Vec<&TuningHistory> =
                runs.iter().filter(|r| r.method == *m && r.bo_seed == *b).map(|r| &r.history).collect();
            aggregates.push(aggregate(*m, *b, &hs));
        }
    }
    Ok(ExperimentResult { runs, aggregates })
}
