//! Parametric sensitivity `d pi_MPC / d theta` of the MPC's first action.
//!
//! Computed by central differences over full re-solves, each warm-started
//! from the nominal solution. Step sizes are relative to the parameter
//! scales so that all columns are equally well conditioned.

use crate::mpc::{Mpc, MpcError, MpcSolution};
use crate::plant::{CartpoleParams, ParamVector, State, N_ACTION, N_PARAMS};
use rayon::prelude::*;
use thiserror::Error;

/// Relative finite-difference step: `delta_j = FD_STEP * scale_j`.
///
/// The solver stops at a control-gradient norm of about 1e-6, which leaves
/// roughly 1e-6..1e-5 V of error in the first action; this step keeps that
/// error below 1e-3 of a typical difference quotient.
pub const FD_STEP: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SensitivityError {
    #[error("perturbed MPC solve for parameter {column} failed: {source}")]
    PerturbedSolveFailed { column: usize, source: MpcError },
    #[error("base solution is not converged")]
    BaseNotConverged,
}

/// `n_a x n_theta` sensitivity matrix (row-major) at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct Sensitivity {
    pub matrix: [f64; N_ACTION * N_PARAMS],
    pub at_state: State,
    pub converged: bool,
}

impl Sensitivity {
    /// Entries multiplied by the parameter scales (action change per
    /// scale unit), which makes columns comparable.
    pub fn scaled(&self, scales: &ParamVector) -> [f64; N_PARAMS] {
        let mut out = self.matrix;
        for (v, s) in out.iter_mut().zip(scales) {
            *v *= s;
        }
        out
    }

    /// Max-norm distance between two sensitivities in scaled units,
    /// relative to the larger scaled max-norm.
    pub fn relative_distance(&self, other: &Sensitivity, scales: &ParamVector) -> f64 {
        let a = self.scaled(scales);
        let b = other.scaled(scales);
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let norm = a.iter().chain(&b).map(|v| v.abs()).fold(0.0, f64::max);
        if norm == 0.0 {
            diff
        } else {
            diff / norm
        }
    }

    /// First-order change of the action for a parameter step `delta`.
    pub fn predict(&self, delta: &ParamVector) -> f64 {
        self.matrix.iter().zip(delta).map(|(s, d)| s * d).sum()
    }
}

/// Central-difference sensitivity with step `step * scales[j]` per column.
pub fn sensitivity_fd_with_step(
    mpc: &Mpc,
    s: &State,
    theta_nom: &CartpoleParams,
    base: &MpcSolution,
    scales: &ParamVector,
    step: f64,
) -> Result<Sensitivity, SensitivityError> {
    if !base.converged {
        return Err(SensitivityError::BaseNotConverged);
    }
    let nominal = theta_nom.to_array();
    let columns: Result<Vec<f64>, SensitivityError> = (0..N_PARAMS)
        .into_par_iter()
        .map(|j| {
            let delta = step * scales[j];
            let solve_at = |sign: f64| -> Result<f64, SensitivityError> {
                let mut theta = nominal;
                theta[j] += sign * delta;
                let sol = mpc
                    .solve(s, &CartpoleParams::from_array(theta), Some(base))
                    .map_err(|source| SensitivityError::PerturbedSolveFailed { column: j, source })?;
                if !sol.converged {
                    return Err(SensitivityError::PerturbedSolveFailed {
                        column: j,
                        source: MpcError::NotConverged {
                            iterations: sol.iterations,
                            grad_norm: sol.grad_norm,
                            action: sol.first_action(),
                        },
                    });
                }
                Ok(sol.first_action())
            };
            Ok((solve_at(1.0)? - solve_at(-1.0)?) / (2.0 * delta))
        })
        .collect();
    let columns = columns?;
    let mut matrix = [0.0; N_PARAMS];
    matrix.copy_from_slice(&columns);
    Ok(Sensitivity { matrix, at_state: *s, converged: true })
}

/// Sensitivity at the default relative step [`FD_STEP`].
pub fn sensitivity_fd(
    mpc: &Mpc,
    s: &State,
    theta_nom: &CartpoleParams,
    base: &MpcSolution,
    scales: &ParamVector,
) -> Result<Sensitivity, SensitivityError> {
    sensitivity_fd_with_step(mpc, s, theta_nom, base, scales, FD_STEP)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpc::MpcConfig;
    use crate::plant::{CartpoleConstants, PARAM_HALF_WIDTHS};

    fn setup() -> (Mpc, CartpoleParams) {
        (Mpc::new(MpcConfig::default(), CartpoleConstants::default()).unwrap(), CartpoleParams::default())
    }

    #[test]
    fn upright_rest_has_zero_sensitivity() {
        let (mpc, theta) = setup();
        let base = mpc.solve(&State::UPRIGHT, &theta, None).unwrap();
        let sens = sensitivity_fd(&mpc, &State::UPRIGHT, &theta, &base, &PARAM_HALF_WIDTHS).unwrap();
        for v in sens.matrix {
            assert!(v.abs() < 1e-3, "{:?}", sens.matrix);
        }
    }

    #[test]
    fn deterministic() {
        let (mpc, theta) = setup();
        let s = State::new(0.1, 1.0, 0.2, -1.0);
        let base = mpc.solve(&s, &theta, None).unwrap();
        let a = sensitivity_fd(&mpc, &s, &theta, &base, &PARAM_HALF_WIDTHS).unwrap();
        let b = sensitivity_fd(&mpc, &s, &theta, &base, &PARAM_HALF_WIDTHS).unwrap();
        assert_eq!(a, b);
    }

    /// Halving the step must not change the estimate: a consistency oracle
    /// for both truncation and solver noise.
    #[test]
    fn step_halving_agrees() {
        use rand::{Rng, SeedableRng};
        let (mpc, theta) = setup();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        let mut checked = 0;
        while checked < 20 {
            let s = State::new(
                rng.random_range(-0.39..0.39),
                rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0 * std::f64::consts::PI..3.0 * std::f64::consts::PI),
            );
            let base = mpc.solve(&s, &theta, None).unwrap();
            if !base.converged || !mpc.constraints_inactive(&base, 0.01, 0.005) {
                continue;
            }
            let full = sensitivity_fd_with_step(&mpc, &s, &theta, &base, &PARAM_HALF_WIDTHS, FD_STEP).unwrap();
            let half = sensitivity_fd_with_step(&mpc, &s, &theta, &base, &PARAM_HALF_WIDTHS, FD_STEP / 2.0).unwrap();
            let d = full.relative_distance(&half, &PARAM_HALF_WIDTHS);
            assert!(d < 1e-2, "state {s:?}: relative distance {d}");
            checked += 1;
        }
    }

    #[test]
    fn mirrored_state_negates_sensitivity() {
        let (mpc, theta) = setup();
        for s in [State::new(0.0, 0.2, 0.1, -0.3), State::new(-0.1, 1.0, 0.3, -2.0)] {
            let base = mpc.solve(&s, &theta, None).unwrap();
            let m = s.mirrored();
            let base_m = mpc.solve(&m, &theta, None).unwrap();
            let a = sensitivity_fd(&mpc, &s, &theta, &base, &PARAM_HALF_WIDTHS).unwrap();
            let mut b = sensitivity_fd(&mpc, &m, &theta, &base_m, &PARAM_HALF_WIDTHS).unwrap();
            for v in b.matrix.iter_mut() {
                *v = -*v;
            }
            assert!(a.relative_distance(&b, &PARAM_HALF_WIDTHS) < 2e-2, "{:?} vs {:?}", a.matrix, b.matrix);
        }
    }

    #[test]
    fn non_converged_base_is_rejected() {
        let (mpc, theta) = setup();
        let mut base = mpc.solve(&State::UPRIGHT, &theta, None).unwrap();
        base.converged = false;
        assert_eq!(
            sensitivity_fd(&mpc, &State::UPRIGHT, &theta, &base, &PARAM_HALF_WIDTHS),
            Err(SensitivityError::BaseNotConverged)
        );
    }
}
