//! Gaussian process regression with a Matérn 5/2 ARD kernel and constant
//! mean.
//!
//! [`GpModel::condition`] builds the exact posterior for given
//! hyperparameters. [`fit`] standardizes the targets, maximizes the log
//! marginal likelihood over (log lengthscales, log signal variance, log
//! noise variance, mean) and conditions on the result; predictions are
//! reported in the original target units.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

const SQRT5: f64 = 2.236_067_977_499_79;
/// Jitter added to the sampling covariance.
pub const SAMPLE_JITTER: f64 = 1e-8;
const MAX_JITTER: f64 = 1e-2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("Cholesky factorization failed after jitter {jitter:e}")]
    CholeskyFailure { jitter: f64 },
    #[error("need at least two distinct training points")]
    InsufficientData,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    pub lengthscales: Vec<f64>,
    pub signal_var: f64,
    pub noise_var: f64,
    pub mean: f64,
}

impl Hyperparameters {
    pub fn isotropic(d: usize, lengthscale: f64, signal_var: f64, noise_var: f64) -> Self {
        Self { lengthscales: vec![lengthscale; d], signal_var, noise_var, mean: 0.0 }
    }

    fn validate(&self) -> Result<(), GpError> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if self.lengthscales.iter().all(|l| positive(*l))
            && positive(self.signal_var)
            && self.noise_var >= 0.0
            && self.mean.is_finite()
        {
            Ok(())
        } else {
            Err(GpError::InvalidInput(format!("hyperparameters {self:?}")))
        }
    }
}

/// Matérn 5/2 with ARD lengthscales.
pub fn kernel(a: &[f64], b: &[f64], h: &Hyperparameters) -> f64 {
    let r2: f64 = a.iter().zip(b).zip(&h.lengthscales).map(|((x, y), l)| ((x - y) / l).powi(2)).sum();
    let r = r2.sqrt();
    h.signal_var * (1.0 + SQRT5 * r + 5.0 / 3.0 * r2) * (-SQRT5 * r).exp()
}

fn gram(x: &[Vec<f64>], h: &Hyperparameters) -> DMatrix<f64> {
    let n = x.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel(&x[i], &x[j], h);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn cross(x: &[Vec<f64>], c: &[Vec<f64>], h: &Hyperparameters) -> DMatrix<f64> {
    DMatrix::from_fn(x.len(), c.len(), |i, j| kernel(&x[i], &c[j], h))
}

/// Cholesky of `k + jitter * I`. On failure the jitter is raised tenfold,
/// starting no lower than 1e-10 of the mean diagonal, up to `MAX_JITTER`
/// times the mean diagonal.
fn cholesky_with_jitter(k: &DMatrix<f64>, jitter: f64) -> Result<Cholesky<f64, Dyn>, GpError> {
    let scale = if k.nrows() == 0 { 1.0 } else { (k.trace() / k.nrows() as f64).abs().max(1e-300) };
    let mut j = jitter;
    loop {
        let mut kj = k.clone();
        for i in 0..kj.nrows() {
            kj[(i, i)] += j;
        }
        if let Some(c) = kj.cholesky() {
            return Ok(c);
        }
        j = (j * 10.0).max(1e-10 * scale);
        if j > MAX_JITTER * scale {
            return Err(GpError::CholeskyFailure { jitter: j });
        }
    }
}

#[derive(Debug, Clone)]
pub struct GpModel {
    pub hyper: Hyperparameters,
    pub x: Vec<Vec<f64>>,
    /// Targets in model units.
    pub y: Vec<f64>,
    /// Model units to original units: `original = shift + scale * model`.
    pub y_shift: f64,
    pub y_scale: f64,
    chol: Option<Cholesky<f64, Dyn>>,
    alpha: DVector<f64>,
    dim: usize,
}

impl GpModel {
    /// Exact GP posterior for fixed hyperparameters (no target transform).
    pub fn condition(x: Vec<Vec<f64>>, y: Vec<f64>, hyper: Hyperparameters) -> Result<Self, GpError> {
        hyper.validate()?;
        let dim = hyper.lengthscales.len();
        if x.len() != y.len() || x.iter().any(|r| r.len() != dim) {
            return Err(GpError::InvalidInput("inconsistent training data dimensions".into()));
        }
        if x.is_empty() {
            return Ok(Self { hyper, x, y, y_shift: 0.0, y_scale: 1.0, chol: None, alpha: DVector::zeros(0), dim });
        }
        let mut k = gram(&x, &hyper);
        for i in 0..x.len() {
            k[(i, i)] += hyper.noise_var;
        }
        let chol = cholesky_with_jitter(&k, 0.0)?;
        let resid = DVector::from_iterator(y.len(), y.iter().map(|v| v - hyper.mean));
        let alpha = chol.solve(&resid);
        Ok(Self { hyper, x, y, y_shift: 0.0, y_scale: 1.0, chol: Some(chol), alpha, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Noise variance in original units.
    pub fn noise_variance(&self) -> f64 {
        self.hyper.noise_var * self.y_scale * self.y_scale
    }

    /// Posterior mean and variance at `x` in original units.
    pub fn posterior(&self, x: &[f64]) -> (f64, f64) {
        let prior = kernel(x, x, &self.hyper);
        let (mu, var) = match &self.chol {
            None => (self.hyper.mean, prior),
            Some(chol) => {
                let kx = DVector::from_iterator(self.x.len(), self.x.iter().map(|xi| kernel(xi, x, &self.hyper)));
                let mu = self.hyper.mean + kx.dot(&self.alpha);
                let v = chol.l().solve_lower_triangular(&kx).expect("triangular factor is nonsingular");
                (mu, (prior - v.norm_squared()).max(0.0))
            }
        };
        (self.y_shift + self.y_scale * mu, var * self.y_scale * self.y_scale)
    }

    /// Posterior mean vector and covariance over `candidates`, model units.
    fn joint_posterior(&self, candidates: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
        let kcc = gram(candidates, &self.hyper);
        match &self.chol {
            None => (DVector::from_element(candidates.len(), self.hyper.mean), kcc),
            Some(chol) => {
                let kxc = cross(&self.x, candidates, &self.hyper);
                let mu = DVector::from_element(candidates.len(), self.hyper.mean) + kxc.transpose() * &self.alpha;
                let v = chol.l().solve_lower_triangular(&kxc).expect("triangular factor is nonsingular");
                let cov = kcc - v.transpose() * v;
                (mu, cov)
            }
        }
    }

    /// One draw from the joint posterior over `candidates`, original units.
    pub fn sample_joint(&self, candidates: &[Vec<f64>], seed: u64) -> Result<Vec<f64>, GpError> {
        if candidates.is_empty() {
            return Err(GpError::InvalidInput("no candidates".into()));
        }
        if candidates.iter().any(|c| c.len() != self.dim) {
            return Err(GpError::InvalidInput("candidate dimension mismatch".into()));
        }
        let (mu, mut cov) = self.joint_posterior(candidates);
        // Symmetrize against roundoff before factorizing.
        let m = cov.nrows();
        for i in 0..m {
            for j in 0..i {
                let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        let chol = cholesky_with_jitter(&cov, SAMPLE_JITTER)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DVector::from_iterator(m, (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let draw = mu + chol.l() * z;
        Ok(draw.iter().map(|v| self.y_shift + self.y_scale * v).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub restarts: usize,
    pub steps: usize,
    pub lengthscale_bounds: (f64, f64),
    pub noise_bounds: (f64, f64),
    /// Signal variance bounds in standardized units.
    pub signal_bounds: (f64, f64),
    /// Mean bounds in standardized units.
    pub mean_bounds: (f64, f64),
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            restarts: 5,
            steps: 200,
            lengthscale_bounds: (0.005, 2.0),
            noise_bounds: (1e-6, 1.0),
            signal_bounds: (0.05, 20.0),
            mean_bounds: (-3.0, 3.0),
        }
    }
}

/// Log marginal likelihood and its gradient with respect to
/// `z = (log l_1..log l_d, log sf2, log sn2, mean)`.
pub fn log_marginal_likelihood(x: &[Vec<f64>], y: &[f64], h: &Hyperparameters) -> Option<(f64, Vec<f64>)> {
    let n = x.len();
    let d = h.lengthscales.len();
    let kf = gram(x, h);
    let mut k = kf.clone();
    for i in 0..n {
        k[(i, i)] += h.noise_var;
    }
    let chol = k.cholesky()?;
    let resid = DVector::from_iterator(n, y.iter().map(|v| v - h.mean));
    let alpha = chol.solve(&resid);
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let lml = -0.5 * resid.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    if !lml.is_finite() {
        return None;
    }
    // W = alpha alpha^T - K^{-1}; dL/dz = 0.5 tr(W dK/dz).
    let kinv = chol.inverse();
    let w = &alpha * alpha.transpose() - kinv;
    let mut grad = vec![0.0; d + 3];
    for i in 0..n {
        for j in 0..n {
            let wij = w[(i, j)];
            if i != j {
                let r2: f64 = (0..d).map(|q| ((x[i][q] - x[j][q]) / h.lengthscales[q]).powi(2)).sum();
                let r = r2.sqrt();
                let common = 5.0 / 3.0 * h.signal_var * (1.0 + SQRT5 * r) * (-SQRT5 * r).exp();
                for q in 0..d {
                    let t = (x[i][q] - x[j][q]) / h.lengthscales[q];
                    grad[q] += 0.5 * wij * common * t * t;
                }
            }
            grad[d] += 0.5 * wij * kf[(i, j)];
        }
        grad[d + 1] += 0.5 * w[(i, i)] * h.noise_var;
    }
    grad[d + 2] = alpha.sum();
    Some((lml, grad))
}

struct Bounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Bounds {
    fn new(d: usize, o: &FitOptions) -> Self {
        let (ll, lh) = (o.lengthscale_bounds.0.ln(), o.lengthscale_bounds.1.ln());
        let mut lo = vec![ll; d];
        let mut hi = vec![lh; d];
        lo.extend([o.signal_bounds.0.ln(), o.noise_bounds.0.ln(), o.mean_bounds.0]);
        hi.extend([o.signal_bounds.1.ln(), o.noise_bounds.1.ln(), o.mean_bounds.1]);
        Self { lo, hi }
    }

    fn project(&self, z: &mut [f64]) {
        for (i, v) in z.iter_mut().enumerate() {
            *v = v.clamp(self.lo[i], self.hi[i]);
        }
    }
}

fn unpack(z: &[f64], d: usize) -> Hyperparameters {
    Hyperparameters {
        lengthscales: z[..d].iter().map(|v| v.exp()).collect(),
        signal_var: z[d].exp(),
        noise_var: z[d + 1].exp(),
        mean: z[d + 2],
    }
}

/// Projected sign-gradient ascent with per-coordinate step sizes. A step is
/// accepted only if the likelihood does not decrease, so the accepted
/// sequence is monotone. Returns the final point, its likelihood, and the
/// accepted likelihood trace.
pub fn maximize_lml(
    x: &[Vec<f64>],
    y: &[f64],
    z0: Vec<f64>,
    opts: &FitOptions,
) -> Option<(Vec<f64>, f64, Vec<f64>)> {
    let d = x.first().map_or(0, |r| r.len());
    let bounds = Bounds::new(d, opts);
    let mut z = z0;
    bounds.project(&mut z);
    let (mut f, mut g) = log_marginal_likelihood(x, y, &unpack(&z, d))?;
    let mut step = vec![0.1; z.len()];
    let mut trace = vec![f];
    for _ in 0..opts.steps {
        let mut trial = z.clone();
        for i in 0..z.len() {
            trial[i] += step[i] * g[i].signum() * (g[i] != 0.0) as u8 as f64;
        }
        bounds.project(&mut trial);
        if trial == z {
            break;
        }
        match log_marginal_likelihood(x, y, &unpack(&trial, d)) {
            Some((ft, gt)) if ft >= f => {
                for i in 0..z.len() {
                    step[i] = if gt[i] * g[i] > 0.0 { (step[i] * 1.2).min(1.0) } else { step[i] * 0.5 };
                    step[i] = step[i].max(1e-6);
                }
                z = trial;
                f = ft;
                g = gt;
                trace.push(f);
            }
            _ => step.iter_mut().for_each(|s| *s = (*s * 0.5).max(1e-6)),
        }
    }
    Some((z, f, trace))
}

/// Maximum-likelihood fit on standardized targets.
pub fn fit(x: Vec<Vec<f64>>, y: Vec<f64>, opts: &FitOptions, seed: u64) -> Result<GpModel, GpError> {
    if x.len() != y.len() || x.is_empty() {
        return Err(GpError::InvalidInput("x and y must be nonempty and of equal length".into()));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) || y.iter().any(|v| !v.is_finite()) {
        return Err(GpError::InvalidInput("inconsistent or non-finite training data".into()));
    }
    let distinct = x.iter().any(|r| r != &x[0]);
    if !distinct {
        return Err(GpError::InsufficientData);
    }
    let n = y.len() as f64;
    let shift = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - shift).powi(2)).sum::<f64>() / n;
    let scale = if var > 1e-24 { var.sqrt() } else { 1.0 };
    let ys: Vec<f64> = y.iter().map(|v| (v - shift) / scale).collect();

    let bounds = Bounds::new(d, opts);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for r in 0..opts.restarts.max(1) {
        let z0: Vec<f64> = if r == 0 {
            let mut z = vec![0.2f64.ln(); d];
            z.extend([0.0, 1e-2f64.ln(), 0.0]);
            z
        } else {
            (0..d + 3).map(|i| rng.random_range(bounds.lo[i]..=bounds.hi[i])).collect()
        };
        if let Some((z, f, _)) = maximize_lml(&x, &ys, z0, opts) {
            if best.as_ref().is_none_or(|(_, bf)| f > *bf) {
                best = Some((z, f));
            }
        }
    }
    let (z, _) = best.ok_or(GpError::CholeskyFailure { jitter: 0.0 })?;
    let mut model = GpModel::condition(x, ys, unpack(&z, d))?;
    model.y_shift = shift;
    model.y_scale = scale;
    Ok(model)
}
