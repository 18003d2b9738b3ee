//! Feed-forward networks for the action and sensitivity approximators.
//!
//! Weights are stored as `out x in` matrices and batches as `features x
//! batch`, so every layer is one matrix product. Training is plain Adam on
//! the mean squared error of z-scored targets.

use crate::dataset::Dataset;
use crate::plant::State;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"PAMN";
pub const VERSION: u32 = 1;
/// Network input width: (p, sin phi, cos phi, p_dot, phi_dot).
pub const N_FEATURES: usize = 5;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid model file: {0}")]
    Format(String),
    #[error("unsupported model version {0}")]
    Version(u32),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Hidden widths plus output width; first hidden layer tanh, the rest relu.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub inputs: usize,
    pub hidden: Vec<usize>,
    pub outputs: usize,
}

impl Architecture {
    pub fn action() -> Self {
        Self { inputs: N_FEATURES, hidden: vec![100; 4], outputs: 1 }
    }

    pub fn sensitivity() -> Self {
        Self { inputs: N_FEATURES, hidden: vec![100; 8], outputs: crate::plant::N_PARAMS }
    }

    fn activations(&self) -> Vec<Activation> {
        let mut acts: Vec<_> =
            (0..self.hidden.len()).map(|i| if i == 0 { Activation::Tanh } else { Activation::Relu }).collect();
        acts.push(Activation::Identity);
        acts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

/// Per-coordinate affine normalization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
}

impl Normalizer {
    pub fn identity(n: usize) -> Self {
        Self { mean: DVector::zeros(n), std: DVector::from_element(n, 1.0) }
    }

    /// Column statistics of a `features x samples` matrix; constant
    /// features get std 1.
    pub fn fit(data: &DMatrix<f64>) -> Self {
        let n = data.ncols() as f64;
        let mean = data.column_mean();
        let mut std = DVector::zeros(data.nrows());
        for i in 0..data.nrows() {
            let var = data.row(i).iter().map(|v| (v - mean[i]).powi(2)).sum::<f64>() / n;
            std[i] = if var > 1e-24 { var.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }

    fn normalize(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = data.clone();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row.apply(|v| *v = (*v - self.mean[i]) / self.std[i]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub input_norm: Normalizer,
    pub output_norm: Normalizer,
}

/// Network input for a state.
pub fn features(s: &State) -> [f64; N_FEATURES] {
    [s.p, s.phi.sin(), s.phi.cos(), s.p_dot, s.phi_dot]
}

impl Mlp {
    /// Randomly initialized hidden layers (He for relu, Glorot for tanh), a
    /// zero output layer and identity normalization. The zero output layer
    /// starts the net at the target mean.
    pub fn init(arch: &Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![arch.inputs];
        dims.extend(&arch.hidden);
        dims.push(arch.outputs);
        let layers = dims
            .windows(2)
            .zip(arch.activations())
            .map(|(d, act)| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let var = match act {
                    Activation::Relu => 2.0 / fan_in as f64,
                    _ => 2.0 / (fan_in + fan_out) as f64,
                };
                let normal = Normal::new(0.0, var.sqrt()).unwrap();
                let weights = match act {
                    Activation::Identity => DMatrix::zeros(fan_out, fan_in),
                    _ => DMatrix::from_fn(fan_out, fan_in, |_, _| normal.sample(&mut rng)),
                };
                Layer {
                    weights,
                    bias: DVector::zeros(fan_out),
                    activation: act,
                }
            })
            .collect();
        Self {
            layers,
            input_norm: Normalizer::identity(arch.inputs),
            output_norm: Normalizer::identity(arch.outputs),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weights.nrows()
    }

    /// Checks that layer shapes chain and normalizers are usable.
    pub fn validate(&self) -> Result<(), NetError> {
        if self.layers.is_empty() {
            return Err(NetError::Format("no layers".into()));
        }
        for w in self.layers.windows(2) {
            if w[1].weights.ncols() != w[0].weights.nrows() {
                return Err(NetError::Format("layer dimensions do not chain".into()));
            }
        }
        for l in &self.layers {
            if l.bias.len() != l.weights.nrows() {
                return Err(NetError::Format("bias length mismatch".into()));
            }
        }
        if self.layers.last().unwrap().activation != Activation::Identity {
            return Err(NetError::Format("final activation must be identity".into()));
        }
        for (norm, n) in [(&self.input_norm, self.input_dim()), (&self.output_norm, self.output_dim())] {
            if norm.mean.len() != n || norm.std.len() != n || norm.std.iter().any(|s| !(*s > 0.0)) {
                return Err(NetError::Format("bad normalizer".into()));
            }
        }
        Ok(())
    }

    /// Forward pass on one raw input vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        if x.len() != self.input_dim() {
            return Err(NetError::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        let mut a = DVector::from_iterator(
            x.len(),
            x.iter().enumerate().map(|(i, v)| (v - self.input_norm.mean[i]) / self.input_norm.std[i]),
        );
        for l in &self.layers {
            let mut z = &l.weights * &a + &l.bias;
            z.apply(|v| *v = l.activation.apply(*v));
            a = z;
        }
        Ok(a.iter().enumerate().map(|(i, v)| v * self.output_norm.std[i] + self.output_norm.mean[i]).collect())
    }

    pub fn forward_state(&self, s: &State) -> Result<Vec<f64>, NetError> {
        self.forward(&features(s))
    }

    /// Jacobian of the output with respect to the raw input, row-major
    /// `outputs x inputs`.
    pub fn input_jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>, NetError> {
        if x.len() != self.input_dim() {
            return Err(NetError::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        let mut a = DVector::from_iterator(
            x.len(),
            x.iter().enumerate().map(|(i, v)| (v - self.input_norm.mean[i]) / self.input_norm.std[i]),
        );
        let mut jac = DMatrix::from_diagonal(&self.input_norm.std.map(|s| 1.0 / s));
        for l in &self.layers {
            let mut z = &l.weights * &a + &l.bias;
            z.apply(|v| *v = l.activation.apply(*v));
            let d = z.map(|y| l.activation.derivative_from_output(y));
            jac = DMatrix::from_diagonal(&d) * (&l.weights * jac);
            a = z;
        }
        Ok(DMatrix::from_diagonal(&self.output_norm.std) * jac)
    }

    /// Batched forward pass in normalized units, keeping every activation.
    fn forward_batch_normalized(&self, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for l in &self.layers {
            let mut z = &l.weights * acts.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += &l.bias;
            }
            z.apply(|v| *v = l.activation.apply(*v));
            acts.push(z);
        }
        acts
    }

    /// Batched forward pass on raw `inputs x samples`.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let xn = self.input_norm.normalize(x);
        let mut out = self.forward_batch_normalized(&xn).pop().unwrap();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row.apply(|v| *v = *v * self.output_norm.std[i] + self.output_norm.mean[i]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, batch_size: 256, epochs: 200, validation_fraction: 0.1, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NetError::InvalidInput("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(NetError::InvalidInput("batch_size and epochs must be positive".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 0.5) {
            return Err(NetError::InvalidInput("validation_fraction must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Action,
    Sensitivity,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Mean squared error of normalized outputs per epoch.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    /// Validation RMSE per output in original units, best weights.
    pub val_rmse: Vec<f64>,
}

/// Splits a dataset into `features x samples` inputs and targets.
pub fn dataset_matrices(ds: &Dataset, target: Target) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = ds.len();
    let x = DMatrix::from_fn(N_FEATURES, n, |i, j| features(&ds.records[j].state)[i]);
    let y = match target {
        Target::Action => DMatrix::from_fn(1, n, |_, j| ds.records[j].action),
        Target::Sensitivity => DMatrix::from_fn(crate::plant::N_PARAMS, n, |i, j| ds.records[j].sensitivity[i]),
    };
    (x, y)
}

struct Adam {
    m_w: Vec<DMatrix<f64>>,
    v_w: Vec<DMatrix<f64>>,
    m_b: Vec<DVector<f64>>,
    v_b: Vec<DVector<f64>>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(net: &Mlp) -> Self {
        Self {
            m_w: net.layers.iter().map(|l| l.weights.map(|_| 0.0)).collect(),
            v_w: net.layers.iter().map(|l| l.weights.map(|_| 0.0)).collect(),
            m_b: net.layers.iter().map(|l| l.bias.map(|_| 0.0)).collect(),
            v_b: net.layers.iter().map(|l| l.bias.map(|_| 0.0)).collect(),
            t: 0,
        }
    }

    fn step(&mut self, net: &mut Mlp, grads: &[(DMatrix<f64>, DVector<f64>)], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        };
        for (k, (gw, gb)) in grads.iter().enumerate() {
            let layer = &mut net.layers[k];
            update(layer.weights.as_mut_slice(), gw.as_slice(), self.m_w[k].as_mut_slice(), self.v_w[k].as_mut_slice());
            update(layer.bias.as_mut_slice(), gb.as_slice(), self.m_b[k].as_mut_slice(), self.v_b[k].as_mut_slice());
        }
    }
}

fn mse(pred: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    (pred - y).norm_squared() / (y.len() as f64)
}

/// Gradients of the batch MSE with respect to all weights and biases.
fn backward(net: &Mlp, acts: &[DMatrix<f64>], y: &DMatrix<f64>) -> Vec<(DMatrix<f64>, DVector<f64>)> {
    let out = acts.last().unwrap();
    let mut delta = (out - y) * (2.0 / y.len() as f64);
    let mut grads = Vec::with_capacity(net.layers.len());
    for k in (0..net.layers.len()).rev() {
        let layer = &net.layers[k];
        let a = &acts[k + 1];
        delta.zip_apply(a, |d, y| *d *= layer.activation.derivative_from_output(y));
        let gw = &delta * acts[k].transpose();
        let gb = delta.column_sum();
        if k > 0 {
            delta = layer.weights.transpose() * &delta;
        }
        grads.push((gw, gb));
    }
    grads.reverse();
    grads
}

fn columns(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), idx.len(), |i, j| m[(i, idx[j])])
}

/// Mean squared error of the normalized network on normalized data,
/// evaluated in chunks.
fn eval_loss(net: &Mlp, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for start in (0..x.ncols()).step_by(4096) {
        let n = (x.ncols() - start).min(4096);
        let pred = net.forward_batch_normalized(&x.columns(start, n).into_owned()).pop().unwrap();
        total += (pred - y.columns(start, n)).norm_squared();
    }
    total / y.len() as f64
}

/// Trains `arch` on `features x samples` inputs and targets with Adam and
/// returns the weights with the lowest validation loss.
pub fn train(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    arch: &Architecture,
    cfg: &TrainConfig,
) -> Result<(Mlp, TrainReport), NetError> {
    cfg.validate()?;
    if x.ncols() != y.ncols() || x.nrows() != arch.inputs || y.nrows() != arch.outputs {
        return Err(NetError::DimensionMismatch { expected: arch.inputs, got: x.nrows() });
    }
    let n = x.ncols();
    let n_val = ((n as f64) * cfg.validation_fraction).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(NetError::InvalidInput(format!("{n} samples are too few for a validation split")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (val_idx, train_idx) = order.split_at(n_val);
    let (x_train, y_train) = (columns(x, train_idx), columns(y, train_idx));
    let (x_val, y_val) = (columns(x, val_idx), columns(y, val_idx));

    let mut net = Mlp::init(arch, cfg.seed.wrapping_add(1));
    net.input_norm = Normalizer::fit(&x_train);
    net.output_norm = Normalizer::fit(&y_train);
    let (xt, yt) = (net.input_norm.normalize(&x_train), net.output_norm.normalize(&y_train));
    let (xv, yv) = (net.input_norm.normalize(&x_val), net.output_norm.normalize(&y_val));

    let mut adam = Adam::new(&net);
    let mut report = TrainReport::default();
    let mut best = (f64::INFINITY, net.clone());
    let mut perm: Vec<usize> = (0..xt.ncols()).collect();
    for epoch in 1..=cfg.epochs {
        perm.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in perm.chunks(cfg.batch_size) {
            let xb = columns(&xt, batch);
            let yb = columns(&yt, batch);
            let acts = net.forward_batch_normalized(&xb);
            sum += mse(acts.last().unwrap(), &yb) * batch.len() as f64;
            let grads = backward(&net, &acts, &yb);
            adam.step(&mut net, &grads, cfg.learning_rate);
        }
        let train_loss = sum / perm.len() as f64;
        let val_loss = eval_loss(&net, &xv, &yv);
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(NetError::NonFiniteLoss { epoch });
        }
        report.train_loss.push(train_loss);
        report.val_loss.push(val_loss);
        if val_loss < best.0 {
            best = (val_loss, net.clone());
            report.best_epoch = epoch;
        }
        log::info!("epoch {epoch}: train {train_loss:.3e} val {val_loss:.3e}");
    }
    let net = best.1;
    let pred = net.forward_batch(&x_val);
    report.val_rmse = (0..y.nrows())
        .map(|i| ((pred.row(i) - y_val.row(i)).norm_squared() / n_val as f64).sqrt())
        .collect();
    Ok((net, report))
}

pub fn train_on_dataset(ds: &Dataset, target: Target, cfg: &TrainConfig) -> Result<(Mlp, TrainReport), NetError> {
    if ds.is_empty() {
        return Err(NetError::InvalidInput("empty dataset".into()));
    }
    let arch = match target {
        Target::Action => Architecture::action(),
        Target::Sensitivity => Architecture::sensitivity(),
    };
    let (x, y) = dataset_matrices(ds, target);
    train(&x, &y, &arch, cfg)
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerHeader {
    inputs: usize,
    outputs: usize,
    activation: Activation,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    inputs: usize,
    outputs: usize,
    layers: Vec<LayerHeader>,
}

impl Mlp {
    /// `MAGIC | version u32 | header length u32 | JSON header | f64 values`.
    /// Values: input mean, input std, output mean, output std, then each
    /// layer's weights (row-major) and bias.
    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        let header = ModelHeader {
            inputs: self.input_dim(),
            outputs: self.output_dim(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerHeader { inputs: l.weights.ncols(), outputs: l.weights.nrows(), activation: l.activation })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        let mut put = |v: f64| w.write_all(&v.to_le_bytes());
        for norm in [&self.input_norm, &self.output_norm] {
            norm.mean.iter().try_for_each(|v| put(*v))?;
            norm.std.iter().try_for_each(|v| put(*v))?;
        }
        for l in &self.layers {
            for i in 0..l.weights.nrows() {
                for j in 0..l.weights.ncols() {
                    put(l.weights[(i, j)])?;
                }
            }
            l.bias.iter().try_for_each(|v| put(*v))?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, NetError> {
        let mut head = [0u8; 12];
        r.read_exact(&mut head).map_err(|_| NetError::Format("file too short".into()))?;
        if &head[..4] != MAGIC {
            return Err(NetError::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(NetError::Version(version));
        }
        let len = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        if len > 1 << 20 {
            return Err(NetError::Format("header too long".into()));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| NetError::Format("truncated header".into()))?;
        let header: ModelHeader =
            serde_json::from_slice(&json).map_err(|e| NetError::Format(format!("header: {e}")))?;
        if header.layers.is_empty()
            || header.layers[0].inputs != header.inputs
            || header.layers.last().unwrap().outputs != header.outputs
        {
            return Err(NetError::Format("header dimensions inconsistent".into()));
        }
        let mut get = || -> Result<f64, NetError> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| NetError::Format("truncated weights".into()))?;
            Ok(f64::from_le_bytes(b))
        };
        let mut read_vec = |n: usize| -> Result<DVector<f64>, NetError> {
            let v: Result<Vec<f64>, NetError> = (0..n).map(|_| get()).collect();
            Ok(DVector::from_vec(v?))
        };
        let input_norm = Normalizer { mean: read_vec(header.inputs)?, std: read_vec(header.inputs)? };
        let output_norm = Normalizer { mean: read_vec(header.outputs)?, std: read_vec(header.outputs)? };
        let mut layers = Vec::with_capacity(header.layers.len());
        for lh in &header.layers {
            let flat = read_vec(lh.inputs * lh.outputs)?;
            let weights = DMatrix::from_row_slice(lh.outputs, lh.inputs, flat.as_slice());
            let bias = read_vec(lh.outputs)?;
            layers.push(Layer { weights, bias, activation: lh.activation });
        }
        let net = Mlp { layers, input_norm, output_norm };
        net.validate()?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
