//! Parameterized nonlinear MPC for the cartpole, solved with box-constrained
//! iLQR (Gauss-Newton DDP).
//!
//! The input box `|u| <= u_max` is handled exactly by clamping the Newton
//! step in the backward pass; the rail constraint `|p| <= rail_halfwidth`
//! enters the stage cost as a quadratic exterior penalty.

use crate::plant::{self, CartpoleConstants, CartpoleParams, State};
use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpcError {
    #[error("MPC did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    NotConverged { iterations: usize, grad_norm: f64, action: f64 },
    #[error("non-finite cost in MPC rollout")]
    NonFiniteCost,
    #[error("invalid MPC input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    /// Horizon length in steps.
    pub horizon: usize,
    /// Discretization step [s].
    pub dt: f64,
    pub w_cos: f64,
    pub w_p: f64,
    pub w_p_dot: f64,
    pub w_phi_dot: f64,
    pub w_u: f64,
    /// Multiplier of the state terms in the terminal cost.
    pub terminal_scale: f64,
    /// Rail-violation penalty weight.
    pub rail_penalty: f64,
    /// Distance kept from the rail ends: the penalty starts at
    /// `rail_halfwidth - rail_margin`.
    pub rail_margin: f64,
    pub max_iterations: usize,
    /// Max-norm of the projected control gradient at convergence.
    pub tolerance: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 50,
            dt: 0.02,
            w_cos: 10.0,
            w_p: 5.0,
            w_p_dot: 0.1,
            w_phi_dot: 0.02,
            w_u: 0.1,
            terminal_scale: 10.0,
            rail_penalty: 1e4,
            rail_margin: 0.03,
            max_iterations: 200,
            tolerance: 1e-6,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), MpcError> {
        let weights = [self.w_cos, self.w_p, self.w_p_dot, self.w_phi_dot, self.w_u, self.terminal_scale];
        if !(self.rail_margin >= 0.0) {
            return Err(MpcError::InvalidInput("rail_margin must be nonnegative".into()));
        }
        if self.horizon == 0 {
            return Err(MpcError::InvalidInput("horizon must be >= 1".into()));
        }
        if !(self.dt > 0.0) || !(self.rail_penalty > 0.0) || !(self.tolerance > 0.0) {
            return Err(MpcError::InvalidInput("dt, rail_penalty and tolerance must be positive".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(MpcError::InvalidInput("cost weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Optimal open-loop plan from one MPC solve.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    pub actions: Vec<f64>,
    /// Predicted states `s(0..=N)` on the unwrapped angle chart.
    pub states: Vec<[f64; 4]>,
    pub cost: f64,
    pub grad_norm: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl MpcSolution {
    pub fn first_action(&self) -> f64 {
        self.actions[0]
    }

    /// Writes `kappa,u,p,phi,pdot,phidot`; the terminal row has an empty `u`.
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "kappa,u,p,phi,pdot,phidot")?;
        for (k, x) in self.states.iter().enumerate() {
            let u = self.actions.get(k).map(|u| format!("{u}")).unwrap_or_default();
            writeln!(w, "{k},{u},{},{},{},{}", x[0], x[1], x[2], x[3])?;
        }
        w.flush()
    }
}

const MU_INIT: f64 = 1e-6;
const MU_MIN: f64 = 1e-9;
const MU_MAX: f64 = 1e10;
const LINE_SEARCH_STEPS: usize = 12;
/// Magnitude of the constant cold-start guesses, as a fraction of `u_max`.
const COLD_START_FRACTION: f64 = 0.25;

/// Cartpole MPC problem: cost weights plus the rig's fixed constants.
#[derive(Debug, Clone)]
pub struct Mpc {
    pub cfg: MpcConfig,
    pub constants: CartpoleConstants,
}

struct Derivs {
    lx: Vector4<f64>,
    lxx: Matrix4<f64>,
    lu: f64,
    luu: f64,
}

impl Mpc {
    pub fn new(cfg: MpcConfig, constants: CartpoleConstants) -> Result<Self, MpcError> {
        cfg.validate()?;
        Ok(Mpc { cfg, constants })
    }

    fn rail_limit(&self) -> f64 {
        self.constants.rail_halfwidth - self.cfg.rail_margin
    }

    fn state_cost(&self, x: &[f64; 4], scale: f64) -> f64 {
        let c = &self.cfg;
        let violation = (x[0].abs() - self.rail_limit()).max(0.0);
        scale
            * (c.w_cos * (1.0 - x[1].cos())
                + c.w_p * x[0] * x[0]
                + c.w_p_dot * x[2] * x[2]
                + c.w_phi_dot * x[3] * x[3])
            + c.rail_penalty * violation * violation
    }

    fn stage_cost(&self, x: &[f64; 4], u: f64) -> f64 {
        self.state_cost(x, 1.0) + self.cfg.w_u * u * u
    }

    fn terminal_cost(&self, x: &[f64; 4]) -> f64 {
        self.state_cost(x, self.cfg.terminal_scale)
    }

    /// Gradient and Gauss-Newton Hessian of the state terms.
    fn state_derivs(&self, x: &[f64; 4], scale: f64) -> (Vector4<f64>, Matrix4<f64>) {
        let c = &self.cfg;
        let (sin, _) = x[1].sin_cos();
        let half_cos = (0.5 * x[1]).cos();
        let mut lx = Vector4::new(
            scale * 2.0 * c.w_p * x[0],
            scale * c.w_cos * sin,
            scale * 2.0 * c.w_p_dot * x[2],
            scale * 2.0 * c.w_phi_dot * x[3],
        );
        // 1 - cos(phi) = 2 sin^2(phi/2): Gauss-Newton curvature cos^2(phi/2).
        let mut lxx = Matrix4::from_diagonal(&Vector4::new(
            scale * 2.0 * c.w_p,
            scale * c.w_cos * half_cos * half_cos,
            scale * 2.0 * c.w_p_dot,
            scale * 2.0 * c.w_phi_dot,
        ));
        let violation = x[0].abs() - self.rail_limit();
        if violation > 0.0 {
            lx[0] += 2.0 * c.rail_penalty * violation * x[0].signum();
            lxx[(0, 0)] += 2.0 * c.rail_penalty;
        }
        (lx, lxx)
    }

    fn rollout(&self, s0: &[f64; 4], actions: &[f64], theta: &CartpoleParams) -> (Vec<[f64; 4]>, f64) {
        let mut states = Vec::with_capacity(actions.len() + 1);
        states.push(*s0);
        let mut cost = 0.0;
        let mut x = *s0;
        for &u in actions {
            cost += self.stage_cost(&x, u);
            x = plant::rk4_raw(&x, u, theta, &self.constants, self.cfg.dt);
            states.push(x);
        }
        cost += self.terminal_cost(&x);
        (states, cost)
    }

    /// True when no input bound and no rail penalty is active anywhere along
    /// the plan, with the given clearances. Only then is the plan a smooth
    /// function of the parameters.
    pub fn constraints_inactive(&self, sol: &MpcSolution, action_clearance: f64, rail_clearance: f64) -> bool {
        let u_lim = (1.0 - action_clearance) * self.constants.u_max;
        let p_lim = self.rail_limit() - rail_clearance;
        sol.actions.iter().all(|u| u.abs() <= u_lim) && sol.states.iter().all(|x| x[0].abs() <= p_lim)
    }

    /// Total cost of an action sequence from `s0`.
    pub fn total_cost(&self, s0: &State, actions: &[f64], theta: &CartpoleParams) -> f64 {
        self.rollout(&s0.to_array(), actions, theta).1
    }

    /// Solves the MPC problem from `s0`.
    ///
    /// With a warm start the solver starts from its action sequence. Without
    /// one it runs two constant cold starts `+c` and `-c` and keeps the lower
    /// cost. The pair is closed under mirroring, so the solver stays odd in
    /// `s0` except at exact ties (e.g. hanging rest), which resolve to `+c`.
    /// A zero start is avoided: at hanging rest it sits on a stationary
    /// saddle of the cost.
    pub fn solve(
        &self,
        s0: &State,
        theta: &CartpoleParams,
        warm_start: Option<&MpcSolution>,
    ) -> Result<MpcSolution, MpcError> {
        if !s0.is_finite() {
            return Err(MpcError::InvalidInput("initial state is not finite".into()));
        }
        if !theta.is_valid() {
            return Err(MpcError::InvalidInput(format!("invalid parameters {theta:?}")));
        }
        let n = self.cfg.horizon;
        if let Some(ws) = warm_start {
            let mut guess = ws.actions.clone();
            guess.resize(n, 0.0);
            return self.solve_from(s0, theta, guess);
        }
        let c = COLD_START_FRACTION * self.constants.u_max;
        let mut best: Option<MpcSolution> = None;
        for level in [c, -c] {
            let sol = self.solve_from(s0, theta, vec![level; n])?;
            let better = match &best {
                None => true,
                Some(b) => (sol.converged && !b.converged) || (sol.converged == b.converged && sol.cost < b.cost),
            };
            if better {
                best = Some(sol);
            }
        }
        Ok(best.expect("at least one cold start"))
    }

    /// First action of the optimal plan, `pi_MPC(s, theta)`.
    pub fn policy(&self, s: &State, theta: &CartpoleParams) -> Result<f64, MpcError> {
        let sol = self.solve(s, theta, None)?;
        if sol.converged {
            Ok(sol.first_action())
        } else {
            Err(MpcError::NotConverged {
                iterations: sol.iterations,
                grad_norm: sol.grad_norm,
                action: sol.first_action(),
            })
        }
    }

    fn solve_from(&self, s0: &State, theta: &CartpoleParams, guess: Vec<f64>) -> Result<MpcSolution, MpcError> {
        let n = self.cfg.horizon;
        let u_max = self.constants.u_max;
        let x0 = s0.to_array();
        let mut us: Vec<f64> = guess.into_iter().map(|u| u.clamp(-u_max, u_max)).collect();
        let (mut xs, mut cost) = self.rollout(&x0, &us, theta);
        if !cost.is_finite() {
            return Err(MpcError::NonFiniteCost);
        }

        let mut mu = MU_INIT;
        let mut fx = vec![Matrix4::zeros(); n];
        let mut fu = vec![Vector4::zeros(); n];
        let mut feedforward = vec![0.0; n];
        let mut gains = vec![Vector4::zeros(); n];
        let mut grad_norm = f64::INFINITY;
        let mut iterations = 0;
        let mut relinearize = true;
        let mut derivs: Vec<Derivs> = Vec::with_capacity(n);
        // One extra Newton step is taken after the gradient test first
        // passes; near the optimum it is nearly free and tightens the plan.
        let mut polished = false;
        let mut terminal = (Vector4::zeros(), Matrix4::zeros());

        while iterations < self.cfg.max_iterations {
            if relinearize {
                derivs.clear();
                for k in 0..n {
                    let (_, a, b) = plant::rk4_with_jacobian(&xs[k], us[k], theta, &self.constants, self.cfg.dt);
                    fx[k] = Matrix4::from_fn(|i, j| a[i][j]);
                    fu[k] = Vector4::from_column_slice(&b);
                    let (lx, lxx) = self.state_derivs(&xs[k], 1.0);
                    derivs.push(Derivs { lx, lxx, lu: 2.0 * self.cfg.w_u * us[k], luu: 2.0 * self.cfg.w_u });
                }
                terminal = self.state_derivs(&xs[n], self.cfg.terminal_scale);

                // Adjoint pass for the exact projected gradient dJ/du.
                let mut lambda = terminal.0;
                grad_norm = 0.0;
                for k in (0..n).rev() {
                    let g = derivs[k].lu + fu[k].dot(&lambda);
                    let at_upper = us[k] >= u_max && g < 0.0;
                    let at_lower = us[k] <= -u_max && g > 0.0;
                    if !(at_upper || at_lower) {
                        grad_norm = f64::max(grad_norm, g.abs());
                    }
                    lambda = derivs[k].lx + fx[k].transpose() * lambda;
                }
                relinearize = false;
                if grad_norm < self.cfg.tolerance {
                    if polished {
                        return Ok(MpcSolution { actions: us, states: xs, cost, grad_norm, converged: true, iterations });
                    }
                    polished = true;
                }
            }
            iterations += 1;

            // Backward pass.
            let mut vx = terminal.0;
            let mut vxx = terminal.1;
            let mut dv = (0.0, 0.0);
            let mut backward_ok = true;
            for k in (0..n).rev() {
                let d = &derivs[k];
                let vxx_fu = vxx * fu[k];
                let qx = d.lx + fx[k].transpose() * vx;
                let qu = d.lu + fu[k].dot(&vx);
                let qxx = d.lxx + fx[k].transpose() * vxx * fx[k];
                let quu = d.luu + fu[k].dot(&vxx_fu) + mu;
                let qux = fx[k].transpose() * vxx_fu;
                if !(quu > 0.0) || !quu.is_finite() {
                    backward_ok = false;
                    break;
                }
                let unclamped = -qu / quu;
                let step = unclamped.clamp(-u_max - us[k], u_max - us[k]);
                let gain = if step != unclamped { Vector4::zeros() } else { -qux / quu };
                feedforward[k] = step;
                gains[k] = gain;
                vx = qx + gain * (quu * step) + gain * qu + qux * step;
                vxx = qxx + gain * gain.transpose() * quu + gain * qux.transpose() + qux * gain.transpose();
                vxx = 0.5 * (vxx + vxx.transpose());
                dv.0 += step * qu;
                dv.1 += 0.5 * step * step * quu;
            }
            if !backward_ok {
                mu *= 10.0;
                if mu > MU_MAX {
                    break;
                }
                continue;
            }

            // Forward pass with backtracking line search.
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..LINE_SEARCH_STEPS {
                let mut new_us = Vec::with_capacity(n);
                let mut new_xs = Vec::with_capacity(n + 1);
                new_xs.push(x0);
                let mut new_cost = 0.0;
                let mut x = x0;
                for k in 0..n {
                    let dx = Vector4::from_column_slice(&x) - Vector4::from_column_slice(&xs[k]);
                    let u = (us[k] + alpha * feedforward[k] + gains[k].dot(&dx)).clamp(-u_max, u_max);
                    new_cost += self.stage_cost(&x, u);
                    x = plant::rk4_raw(&x, u, theta, &self.constants, self.cfg.dt);
                    new_us.push(u);
                    new_xs.push(x);
                }
                new_cost += self.terminal_cost(&x);
                let expected = -(alpha * dv.0 + alpha * alpha * dv.1);
                if new_cost.is_finite() && new_cost < cost && cost - new_cost >= 1e-4 * expected.max(0.0) {
                    accepted = Some((new_us, new_xs, new_cost));
                    break;
                }
                alpha *= 0.5;
            }
            match accepted {
                Some((new_us, new_xs, new_cost)) => {
                    us = new_us;
                    xs = new_xs;
                    cost = new_cost;
                    mu = (mu / 2.0).max(MU_MIN);
                    relinearize = true;
                }
                None if polished && grad_norm < self.cfg.tolerance => {
                    return Ok(MpcSolution { actions: us, states: xs, cost, grad_norm, converged: true, iterations });
                }
                None => {
                    mu *= 10.0;
                    if mu > MU_MAX {
                        break;
                    }
                }
            }
        }

        if relinearize {
            grad_norm = self.projected_gradient_norm(&x0, &us, theta);
        }
        let converged = grad_norm < self.cfg.tolerance;
        Ok(MpcSolution { actions: us, states: xs, cost, grad_norm, converged, iterations })
    }

    fn projected_gradient_norm(&self, x0: &[f64; 4], us: &[f64], theta: &CartpoleParams) -> f64 {
        let (xs, _) = self.rollout(x0, us, theta);
        let n = us.len();
        let u_max = self.constants.u_max;
        let mut lambda = self.state_derivs(&xs[n], self.cfg.terminal_scale).0;
        let mut norm: f64 = 0.0;
        for k in (0..n).rev() {
            let (_, a, b) = plant::rk4_with_jacobian(&xs[k], us[k], theta, &self.constants, self.cfg.dt);
            let fx = Matrix4::from_fn(|i, j| a[i][j]);
            let g = 2.0 * self.cfg.w_u * us[k] + Vector4::from_column_slice(&b).dot(&lambda);
            if !((us[k] >= u_max && g < 0.0) || (us[k] <= -u_max && g > 0.0)) {
                norm = norm.max(g.abs());
            }
            lambda = self.state_derivs(&xs[k], 1.0).0 + fx.transpose() * lambda;
        }
        norm
    }
}

/// Receding-horizon controller applying the same cold-started solve that
/// labels the training data. Unconverged plans still supply their first
/// action.
#[derive(Debug, Clone)]
pub struct MpcController<'a> {
    mpc: &'a Mpc,
    theta: CartpoleParams,
    /// Solves that ended without convergence.
    pub unconverged: usize,
    pub last: Option<MpcSolution>,
}

impl<'a> MpcController<'a> {
    pub fn new(mpc: &'a Mpc, theta: CartpoleParams) -> Self {
        Self { mpc, theta, unconverged: 0, last: None }
    }

    /// Returns NaN when the problem cannot be solved at all.
    pub fn act(&mut self, s: &State) -> f64 {
        match self.mpc.solve(s, &self.theta, None) {
            Ok(sol) => {
                if !sol.converged {
                    self.unconverged += 1;
                }
                let u = sol.first_action();
                self.last = Some(sol);
                u
            }
            Err(_) => f64::NAN,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn nominal_mpc() -> Mpc {
        Mpc::new(MpcConfig::default(), CartpoleConstants::default()).unwrap()
    }

    #[test]
    fn upright_rest_gives_zero_plan() {
        let mpc = nominal_mpc();
        let sol = mpc.solve(&State::UPRIGHT, &CartpoleParams::default(), None).unwrap();
        assert!(sol.converged);
        let max = sol.actions.iter().fold(0.0f64, |m, u| m.max(u.abs()));
        assert!(max < 1e-6, "max |u| = {max}");
    }

    #[test]
    fn policy_is_deterministic() {
        let mpc = nominal_mpc();
        let s = State::new(0.1, 2.0, -0.5, 1.0);
        let theta = CartpoleParams::default();
        let a = mpc.solve(&s, &theta, None).unwrap().first_action();
        let b = mpc.solve(&s, &theta, None).unwrap().first_action();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn mirrored_state_gives_mirrored_plan() {
        let mpc = nominal_mpc();
        let theta = CartpoleParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let s = State::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-3.0..3.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-3.0..3.0),
            );
            let a = mpc.solve(&s, &theta, None).unwrap();
            let b = mpc.solve(&s.mirrored(), &theta, None).unwrap();
            for (x, y) in a.actions.iter().zip(&b.actions) {
                assert!((x + y).abs() <= 1e-6, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn actions_stay_in_box_and_states_follow_model() {
        let mpc = nominal_mpc();
        let theta = CartpoleParams::default();
        let s = State::HANGING;
        let sol = mpc.solve(&s, &theta, None).unwrap();
        assert!(sol.actions.iter().all(|u| u.abs() <= 12.0));
        assert!(sol.first_action().abs() > 0.0);
        let (xs, cost) = mpc.rollout(&s.to_array(), &sol.actions, &theta);
        assert_eq!(xs, sol.states);
        assert_eq!(cost, sol.cost);
    }

    #[test]
    fn warm_start_from_perturbed_parameters_is_cheaper() {
        let mpc = nominal_mpc();
        let theta = CartpoleParams::default();
        let perturbed = CartpoleParams { cart_mass: 0.6, ..theta };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut cold = Vec::new();
        let mut warm = Vec::new();
        for _ in 0..50 {
            let s = State::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-3.1..3.1),
                rng.random_range(-2.0..2.0),
                rng.random_range(-5.0..5.0),
            );
            let base = mpc.solve(&s, &theta, None).unwrap();
            let from_scratch = mpc.solve(&s, &perturbed, None).unwrap();
            let warmed = mpc.solve(&s, &perturbed, Some(&base)).unwrap();
            cold.push(from_scratch.iterations);
            warm.push(warmed.iterations);
        }
        cold.sort_unstable();
        warm.sort_unstable();
        assert!(warm[25] <= cold[25], "warm median {} cold median {}", warm[25], cold[25]);
    }

    #[test]
    fn rail_violation_small_at_solution() {
        let mpc = nominal_mpc();
        let theta = CartpoleParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let s = State::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-3.1..3.1),
                rng.random_range(-1.0..1.0),
                rng.random_range(-3.0..3.0),
            );
            let sol = mpc.solve(&s, &theta, None).unwrap();
            let worst = sol.states.iter().map(|x| x[0].abs() - 0.39).fold(0.0f64, f64::max);
            assert!(worst < 1e-3, "violation {worst} from {s:?}");
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = MpcConfig { horizon: 0, ..MpcConfig::default() };
        assert!(Mpc::new(cfg, CartpoleConstants::default()).is_err());
        let cfg = MpcConfig { w_u: -1.0, ..MpcConfig::default() };
        assert!(Mpc::new(cfg, CartpoleConstants::default()).is_err());
    }
}
