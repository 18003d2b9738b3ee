//! Parameterized cartpole dynamics.
//!
//! The continuous-time model is integrated with classic RK4 to obtain the
//! discrete-time map `s(k+1) = f(s(k), a(k))`. Angles follow the convention
//! `phi = 0` upright and are kept wrapped to `(-pi, pi]`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Number of tunable model parameters `[m_add, M, C1, C2, C3]`.
pub const N_PARAMS: usize = 5;
/// Cartpole state dimension.
pub const N_STATE: usize = 4;
/// Cartpole action dimension.
pub const N_ACTION: usize = 1;

/// Plain parameter vector in the canonical `[m_add, M, C1, C2, C3]` order.
pub type ParamVector = [f64; N_PARAMS];

/// Half-widths of the box used to synthesize random cartpole instances
/// around the nominal parameters; also the scale of each parameter for
/// finite differences and tuning.
pub const PARAM_HALF_WIDTHS: ParamVector = [0.016, 0.4, 2.0, 0.4, 0.008];

/// Generic discrete-time plant interface over flat slices.
///
/// The cartpole is the only implementation shipped here; the trait keeps
/// the integrator independent of it.
pub trait Plant {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    /// Writes `ds/dt` into `out`.
    fn derivative(&self, state: &[f64], action: &[f64], params: &[f64], out: &mut [f64]);
    /// Maps a state back onto its canonical chart (e.g. angle wrapping).
    fn canonicalize(&self, _state: &mut [f64]) {}
}

/// One RK4 step of any [`Plant`] with zero-order-hold action.
pub fn rk4_step<P: Plant + ?Sized>(
    plant: &P,
    state: &[f64],
    action: &[f64],
    params: &[f64],
    dt: f64,
) -> Vec<f64> {
    let n = plant.state_dim();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    plant.derivative(state, action, params, &mut k1);
    for i in 0..n {
        tmp[i] = state[i] + 0.5 * dt * k1[i];
    }
    plant.derivative(&tmp, action, params, &mut k2);
    for i in 0..n {
        tmp[i] = state[i] + 0.5 * dt * k2[i];
    }
    plant.derivative(&tmp, action, params, &mut k3);
    for i in 0..n {
        tmp[i] = state[i] + dt * k3[i];
    }
    plant.derivative(&tmp, action, params, &mut k4);
    let mut next: Vec<f64> = (0..n)
        .map(|i| state[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    plant.canonicalize(&mut next);
    next
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(phi: f64) -> f64 {
    if phi > -PI && phi <= PI {
        return phi;
    }
    let r = (phi + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r + 2.0 * PI
    } else {
        r
    }
}

/// Cartpole state. `phi = 0` is upright.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub p: f64,
    pub phi: f64,
    pub p_dot: f64,
    pub phi_dot: f64,
}

impl State {
    pub const UPRIGHT: State = State { p: 0.0, phi: 0.0, p_dot: 0.0, phi_dot: 0.0 };
    pub const HANGING: State = State { p: 0.0, phi: PI, p_dot: 0.0, phi_dot: 0.0 };

    pub fn new(p: f64, phi: f64, p_dot: f64, phi_dot: f64) -> Self {
        State { p, phi: wrap_angle(phi), p_dot, phi_dot }
    }

    pub fn from_array(a: [f64; N_STATE]) -> Self {
        State::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; N_STATE] {
        [self.p, self.phi, self.p_dot, self.phi_dot]
    }

    /// Point reflection `s -> -s`, with the angle re-wrapped.
    pub fn mirrored(self) -> Self {
        State::new(-self.p, -self.phi, -self.p_dot, -self.phi_dot)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Model parameters tuned by the adaptive policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CartpoleParams {
    /// Mass atop the rod [kg].
    pub m_add: f64,
    /// Cart mass [kg].
    #[serde(rename = "M")]
    pub cart_mass: f64,
    /// Velocity-proportional force coefficient [N s/m].
    #[serde(rename = "C1")]
    pub c1: f64,
    /// Voltage-to-force gain [N/V].
    #[serde(rename = "C2")]
    pub c2: f64,
    /// Pivot friction [N m s/rad].
    #[serde(rename = "C3")]
    pub c3: f64,
}

impl Default for CartpoleParams {
    fn default() -> Self {
        CartpoleParams { m_add: 0.02, cart_mass: 0.57, c1: 5.0, c2: 1.0, c3: 0.01 }
    }
}

impl CartpoleParams {
    pub fn to_array(self) -> ParamVector {
        [self.m_add, self.cart_mass, self.c1, self.c2, self.c3]
    }

    pub fn from_array(a: ParamVector) -> Self {
        CartpoleParams { m_add: a[0], cart_mass: a[1], c1: a[2], c2: a[3], c3: a[4] }
    }

    pub fn from_slice(a: &[f64]) -> Self {
        assert_eq!(a.len(), N_PARAMS, "cartpole parameter vector has {N_PARAMS} entries");
        CartpoleParams::from_array([a[0], a[1], a[2], a[3], a[4]])
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
            && self.cart_mass > 0.0
            && self.m_add >= 0.0
            && self.c2 > 0.0
            && self.c1 >= 0.0
            && self.c3 >= 0.0
    }
}

/// Fixed physical constants of the cartpole rig.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CartpoleConstants {
    /// Rod mass [kg].
    pub m_pole: f64,
    /// Rod length [m].
    pub l_pole: f64,
    pub g: f64,
    /// Voltage bound [V].
    pub u_max: f64,
    /// Rail half-width [m].
    pub rail_halfwidth: f64,
}

impl Default for CartpoleConstants {
    fn default() -> Self {
        CartpoleConstants { m_pole: 0.1, l_pole: 0.3, g: 9.81, u_max: 12.0, rail_halfwidth: 0.39 }
    }
}

impl CartpoleConstants {
    pub fn is_valid(&self) -> bool {
        [self.m_pole, self.l_pole, self.g, self.u_max, self.rail_halfwidth]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
    }
}

/// Lumped inertial quantities shared by the dynamics and its Jacobian.
#[derive(Debug, Clone, Copy)]
struct Inertia {
    /// Cart plus pendulum mass.
    m_total: f64,
    /// `m * l_c`.
    ml: f64,
    /// Pendulum inertia about the pivot.
    j: f64,
}

impl Inertia {
    fn new(theta: &CartpoleParams, c: &CartpoleConstants) -> Self {
        let m = c.m_pole + theta.m_add;
        let ml = c.m_pole * c.l_pole / 2.0 + theta.m_add * c.l_pole;
        let j = c.m_pole * c.l_pole * c.l_pole / 3.0 + theta.m_add * c.l_pole * c.l_pole;
        Inertia { m_total: theta.cart_mass + m, ml, j }
    }
}

/// Solves the 2x2 mass-matrix system for `(p_ddot, phi_ddot)`.
///
/// Returns the accelerations and, for reuse by the Jacobian, the inverse
/// determinant.
#[inline]
fn accelerations(s: &[f64; 4], u: f64, theta: &CartpoleParams, c: &CartpoleConstants) -> ([f64; 2], f64) {
    let inertia = Inertia::new(theta, c);
    let (sin, cos) = s[1].sin_cos();
    let m11 = inertia.m_total;
    let m12 = inertia.ml * cos;
    let m22 = inertia.j;
    let det = m11 * m22 - m12 * m12;
    debug_assert!(det > 0.0, "singular cartpole mass matrix");
    let force = theta.c2 * u - theta.c1 * s[2];
    let b1 = force + inertia.ml * s[3] * s[3] * sin;
    let b2 = inertia.ml * c.g * sin - theta.c3 * s[3];
    let inv = 1.0 / det;
    ([(m22 * b1 - m12 * b2) * inv, (m11 * b2 - m12 * b1) * inv], inv)
}

/// `ds/dt` of the cartpole.
#[inline]
pub fn continuous_dynamics(s: &State, u: f64, theta: &CartpoleParams, c: &CartpoleConstants) -> [f64; 4] {
    derivative_raw(&s.to_array(), u, theta, c)
}

#[inline]
pub(crate) fn derivative_raw(s: &[f64; 4], u: f64, theta: &CartpoleParams, c: &CartpoleConstants) -> [f64; 4] {
    let ([p_dd, phi_dd], _) = accelerations(s, u, theta, c);
    [s[2], s[3], p_dd, phi_dd]
}

/// Jacobian of `ds/dt` with respect to `(s, u)`: a 4x4 state block and a
/// 4-vector action column.
pub(crate) fn derivative_jacobian(
    s: &[f64; 4],
    u: f64,
    theta: &CartpoleParams,
    c: &CartpoleConstants,
) -> ([[f64; 4]; 4], [f64; 4]) {
    let inertia = Inertia::new(theta, c);
    let ([p_dd, phi_dd], inv) = accelerations(s, u, theta, c);
    let (sin, cos) = s[1].sin_cos();
    let m11 = inertia.m_total;
    let m12 = inertia.ml * cos;
    let m22 = inertia.j;
    let solve = |r1: f64, r2: f64| [(m22 * r1 - m12 * r2) * inv, (m11 * r2 - m12 * r1) * inv];

    // d(acc)/dz = M^-1 (db/dz - dM/dz acc); only phi enters M.
    let dm12 = -inertia.ml * sin;
    let d_phi = solve(
        inertia.ml * s[3] * s[3] * cos - dm12 * phi_dd,
        inertia.ml * c.g * cos - dm12 * p_dd,
    );
    let d_pdot = solve(-theta.c1, 0.0);
    let d_phidot = solve(2.0 * inertia.ml * s[3] * sin, -theta.c3);
    let d_u = solve(theta.c2, 0.0);

    let mut a = [[0.0; 4]; 4];
    a[0][2] = 1.0;
    a[1][3] = 1.0;
    for row in 0..2 {
        a[2 + row][1] = d_phi[row];
        a[2 + row][2] = d_pdot[row];
        a[2 + row][3] = d_phidot[row];
    }
    (a, [0.0, 0.0, d_u[0], d_u[1]])
}

/// One RK4 step without angle wrapping (the MPC predicts on the unwrapped
/// chart so its cost stays smooth).
#[inline]
pub(crate) fn rk4_raw(s: &[f64; 4], u: f64, theta: &CartpoleParams, c: &CartpoleConstants, dt: f64) -> [f64; 4] {
    let k1 = derivative_raw(s, u, theta, c);
    let k2 = derivative_raw(&axpy(s, 0.5 * dt, &k1), u, theta, c);
    let k3 = derivative_raw(&axpy(s, 0.5 * dt, &k2), u, theta, c);
    let k4 = derivative_raw(&axpy(s, dt, &k3), u, theta, c);
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = s[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// RK4 step together with its exact Jacobians `(ds'/ds, ds'/du)`.
pub(crate) fn rk4_with_jacobian(
    s: &[f64; 4],
    u: f64,
    theta: &CartpoleParams,
    c: &CartpoleConstants,
    dt: f64,
) -> ([f64; 4], [[f64; 4]; 4], [f64; 4]) {
    // Stage derivatives with respect to z = (s, u), stored as 4x5.
    type Jz = [[f64; 5]; 4];
    let stage = |x: &[f64; 4], dx: &Jz| -> ([f64; 4], Jz) {
        let k = derivative_raw(x, u, theta, c);
        let (a, b) = derivative_jacobian(x, u, theta, c);
        let mut dk = [[0.0; 5]; 4];
        for i in 0..4 {
            for j in 0..5 {
                let mut acc = if j == 4 { b[i] } else { 0.0 };
                for l in 0..4 {
                    acc += a[i][l] * dx[l][j];
                }
                dk[i][j] = acc;
            }
        }
        (k, dk)
    };
    let mut ident: Jz = [[0.0; 5]; 4];
    for (i, row) in ident.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let shift = |h: f64, k: &[f64; 4], dk: &Jz| -> ([f64; 4], Jz) {
        let mut dx = ident;
        for i in 0..4 {
            for j in 0..5 {
                dx[i][j] += h * dk[i][j];
            }
        }
        (axpy(s, h, k), dx)
    };
    let (k1, d1) = stage(s, &ident);
    let (x2, dx2) = shift(0.5 * dt, &k1, &d1);
    let (k2, d2) = stage(&x2, &dx2);
    let (x3, dx3) = shift(0.5 * dt, &k2, &d2);
    let (k3, d3) = stage(&x3, &dx3);
    let (x4, dx4) = shift(dt, &k3, &d3);
    let (k4, d4) = stage(&x4, &dx4);

    let mut next = [0.0; 4];
    let mut fx = [[0.0; 4]; 4];
    let mut fu = [0.0; 4];
    for i in 0..4 {
        next[i] = s[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        for j in 0..5 {
            let v = ident[i][j] + dt / 6.0 * (d1[i][j] + 2.0 * d2[i][j] + 2.0 * d3[i][j] + d4[i][j]);
            if j == 4 {
                fu[i] = v;
            } else {
                fx[i][j] = v;
            }
        }
    }
    (next, fx, fu)
}

#[inline]
fn axpy(x: &[f64; 4], h: f64, k: &[f64; 4]) -> [f64; 4] {
    [x[0] + h * k[0], x[1] + h * k[1], x[2] + h * k[2], x[3] + h * k[3]]
}

/// Discrete-time cartpole step: RK4 over `dt`, angle re-wrapped.
pub fn step(s: &State, u: f64, theta: &CartpoleParams, c: &CartpoleConstants, dt: f64) -> State {
    debug_assert!(dt > 0.0);
    State::from_array(rk4_raw(&s.to_array(), u, theta, c, dt))
}

/// Total mechanical energy, zero at upright rest.
pub fn mechanical_energy(s: &State, theta: &CartpoleParams, c: &CartpoleConstants) -> f64 {
    let inertia = Inertia::new(theta, c);
    let kinetic = 0.5 * inertia.m_total * s.p_dot * s.p_dot
        + inertia.ml * s.p_dot * s.phi_dot * s.phi.cos()
        + 0.5 * inertia.j * s.phi_dot * s.phi_dot;
    let potential = inertia.ml * c.g * (s.phi.cos() - 1.0);
    kinetic + potential
}

/// The cartpole with its constants; parameters are supplied per call.
#[derive(Debug, Clone, Copy, Default)]
pub struct Cartpole {
    pub constants: CartpoleConstants,
}

impl Plant for Cartpole {
    fn state_dim(&self) -> usize {
        N_STATE
    }

    fn action_dim(&self) -> usize {
        N_ACTION
    }

    fn param_dim(&self) -> usize {
        N_PARAMS
    }

    fn derivative(&self, state: &[f64], action: &[f64], params: &[f64], out: &mut [f64]) {
        let s = [state[0], state[1], state[2], state[3]];
        out.copy_from_slice(&derivative_raw(&s, action[0], &CartpoleParams::from_slice(params), &self.constants));
    }

    fn canonicalize(&self, state: &mut [f64]) {
        state[1] = wrap_angle(state[1]);
    }
}
