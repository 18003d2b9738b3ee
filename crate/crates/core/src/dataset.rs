//! Imitation datasets: states with the nominal MPC action and its parameter
//! sensitivity, generated in parallel and stored in a compact binary file.
//!
//! Layout (little endian):
//!
//! ```text
//! "PAAD" | version u32 | n u64 | n_s u32 | n_a u32 | n_theta u32
//! n records of (n_s + n_a + n_a*n_theta + 2) f64:
//!     state, action, sensitivity (row-major), converged (0/1), iterations
//! ```

use crate::mpc::Mpc;
use crate::plant::{wrap_angle, CartpoleParams, State, N_ACTION, N_PARAMS, N_STATE, PARAM_HALF_WIDTHS};
use crate::sensitivity::sensitivity_fd;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"PAAD";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4 * 3;
/// f64 values per record.
pub const RECORD_LEN: usize = N_STATE + N_ACTION + N_ACTION * N_PARAMS + 2;
/// Draws per sample index before generation gives up on that index.
const MAX_ATTEMPTS: u64 = 64;
/// Samples generated between acceptance-rate checks.
const CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("dimension mismatch: file has (n_s, n_a, n_theta) = {found:?}, expected {expected:?}")]
    DimensionMismatch { found: (u32, u32, u32), expected: (u32, u32, u32) },
    #[error("file truncated in record {index}")]
    Truncated { index: u64 },
    #[error("acceptance rate too low: {accepted} of {attempts} solves usable")]
    AcceptanceRateTooLow { accepted: u64, attempts: u64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSamplingBox {
    pub lower: [f64; N_STATE],
    pub upper: [f64; N_STATE],
}

impl Default for StateSamplingBox {
    fn default() -> Self {
        let w = 0.39;
        Self { lower: [-w, -PI, -3.0, -3.0 * PI], upper: [w, PI, 3.0, 3.0 * PI] }
    }
}

impl StateSamplingBox {
    /// A box holding the single state `s`.
    pub fn point(s: State) -> Self {
        let a = s.to_array();
        Self { lower: a, upper: a }
    }

    pub fn validate(&self, rail_halfwidth: f64) -> Result<(), DatasetError> {
        for i in 0..N_STATE {
            let (lo, hi) = (self.lower[i], self.upper[i]);
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(DatasetError::InvalidInput(format!("box dimension {i}: [{lo}, {hi}]")));
            }
        }
        if self.lower[0] < -rail_halfwidth || self.upper[0] > rail_halfwidth {
            return Err(DatasetError::InvalidInput("position bounds exceed the rail".into()));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> State {
        let mut x = [0.0; N_STATE];
        for (i, v) in x.iter_mut().enumerate() {
            let (lo, hi) = (self.lower[i], self.upper[i]);
            *v = if lo == hi { lo } else { rng.random_range(lo..hi) };
        }
        State::new(x[0], x[1], x[2], x[3])
    }

    /// Membership test; the angle is compared after wrapping.
    pub fn contains(&self, s: &State) -> bool {
        let x = s.to_array();
        (0..N_STATE).all(|i| {
            let v = if i == 1 { wrap_angle(x[i]) } else { x[i] };
            let (lo, hi) = if i == 1 && self.upper[1] - self.lower[1] >= 2.0 * PI - 1e-12 {
                (-PI, PI)
            } else {
                (self.lower[i], self.upper[i])
            };
            v >= lo && v <= hi
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleRecord {
    pub state: State,
    pub action: f64,
    pub sensitivity: [f64; N_ACTION * N_PARAMS],
    pub converged: bool,
    pub iterations: u32,
}

impl SampleRecord {
    fn to_values(self) -> [f64; RECORD_LEN] {
        let mut v = [0.0; RECORD_LEN];
        v[..N_STATE].copy_from_slice(&self.state.to_array());
        v[N_STATE] = self.action;
        v[N_STATE + 1..N_STATE + 1 + N_PARAMS].copy_from_slice(&self.sensitivity);
        v[RECORD_LEN - 2] = if self.converged { 1.0 } else { 0.0 };
        v[RECORD_LEN - 1] = self.iterations as f64;
        v
    }

    fn from_values(v: &[f64]) -> Self {
        let mut sensitivity = [0.0; N_PARAMS];
        sensitivity.copy_from_slice(&v[N_STATE + 1..N_STATE + 1 + N_PARAMS]);
        Self {
            state: State { p: v[0], phi: v[1], p_dot: v[2], phi_dot: v[3] },
            action: v[N_STATE],
            sensitivity,
            converged: v[RECORD_LEN - 2] != 0.0,
            iterations: v[RECORD_LEN - 1] as u32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub records: Vec<SampleRecord>,
}

/// Per-sample seed derivation (splitmix64 finalizer over seed and index).
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Solve at `s` and compute the sensitivity; `None` when either step fails.
pub fn label_state(mpc: &Mpc, s: &State, theta_nom: &CartpoleParams) -> Option<SampleRecord> {
    let base = mpc.solve(s, theta_nom, None).ok()?;
    if !base.converged {
        return None;
    }
    let sens = sensitivity_fd(mpc, s, theta_nom, &base, &PARAM_HALF_WIDTHS).ok()?;
    let rec = SampleRecord {
        state: *s,
        action: base.first_action(),
        sensitivity: sens.matrix,
        converged: true,
        iterations: base.iterations as u32,
    };
    rec.to_values().iter().all(|v| v.is_finite()).then_some(rec)
}

/// Draws for index `j` until one is labelled. Returns the record and the
/// number of draws used.
fn generate_one(
    mpc: &Mpc,
    bx: &StateSamplingBox,
    theta_nom: &CartpoleParams,
    seed: u64,
    j: u64,
) -> (Option<SampleRecord>, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, j));
    for attempt in 1..=MAX_ATTEMPTS {
        let s = bx.sample(&mut rng);
        if let Some(rec) = label_state(mpc, &s, theta_nom) {
            return (Some(rec), attempt);
        }
    }
    (None, MAX_ATTEMPTS)
}

/// Generates `n` records, writing each completed chunk to `sink` in index
/// order. Output depends only on the inputs, not on the thread count.
pub fn generate_with(
    n: usize,
    bx: &StateSamplingBox,
    theta_nom: &CartpoleParams,
    mpc: &Mpc,
    seed: u64,
    mut sink: impl FnMut(&[SampleRecord]) -> Result<(), DatasetError>,
) -> Result<(), DatasetError> {
    if n == 0 {
        return Err(DatasetError::InvalidInput("n must be at least 1".into()));
    }
    bx.validate(mpc.constants.rail_halfwidth)?;
    let (mut accepted, mut attempts) = (0u64, 0u64);
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let chunk: Vec<_> = (start..end)
            .into_par_iter()
            .map(|j| generate_one(mpc, bx, theta_nom, seed, j as u64))
            .collect();
        let mut records = Vec::with_capacity(chunk.len());
        for (rec, used) in chunk {
            attempts += used;
            if let Some(r) = rec {
                accepted += 1;
                records.push(r);
            }
        }
        if 2 * accepted < attempts || records.len() < end - start {
            return Err(DatasetError::AcceptanceRateTooLow { accepted, attempts });
        }
        sink(&records)?;
        log::info!("dataset: {end}/{n} samples, acceptance {:.3}", accepted as f64 / attempts as f64);
    }
    Ok(())
}

pub fn generate(
    n: usize,
    bx: &StateSamplingBox,
    theta_nom: &CartpoleParams,
    mpc: &Mpc,
    seed: u64,
) -> Result<Dataset, DatasetError> {
    let mut records = Vec::with_capacity(n);
    generate_with(n, bx, theta_nom, mpc, seed, |chunk| {
        records.extend_from_slice(chunk);
        Ok(())
    })?;
    Ok(Dataset { records })
}

fn write_header(w: &mut impl Write, n: u64) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&n.to_le_bytes())?;
    for d in [N_STATE, N_ACTION, N_PARAMS] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    Ok(())
}

fn write_records(w: &mut impl Write, records: &[SampleRecord]) -> io::Result<()> {
    for r in records {
        for v in r.to_values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Generates straight to a file without holding the dataset in memory.
pub fn generate_to_file(
    path: &Path,
    n: usize,
    bx: &StateSamplingBox,
    theta_nom: &CartpoleParams,
    mpc: &Mpc,
    seed: u64,
) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, n as u64)?;
    generate_with(n, bx, theta_nom, mpc, seed, |chunk| Ok(write_records(&mut w, chunk)?))?;
    w.flush()?;
    Ok(())
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        write_header(w, self.records.len() as u64)?;
        write_records(w, &self.records)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, DatasetError> {
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header).map_err(|_| DatasetError::CorruptHeader("header shorter than 28 bytes".into()))?;
        if &header[..4] != MAGIC {
            return Err(DatasetError::CorruptHeader(format!("bad magic {:?}", &header[..4])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(DatasetError::CorruptHeader(format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(header[8..16].try_into().unwrap());
        let dims = (u32_at(16), u32_at(20), u32_at(24));
        let expected = (N_STATE as u32, N_ACTION as u32, N_PARAMS as u32);
        if dims != expected {
            return Err(DatasetError::DimensionMismatch { found: dims, expected });
        }
        let mut records = Vec::with_capacity(n.min(1 << 24) as usize);
        let mut buf = [0u8; RECORD_LEN * 8];
        let mut values = [0.0; RECORD_LEN];
        for index in 0..n {
            r.read_exact(&mut buf).map_err(|e| match e.kind() {
                io::ErrorKind::UnexpectedEof => DatasetError::Truncated { index },
                _ => DatasetError::Io(e),
            })?;
            for (v, b) in values.iter_mut().zip(buf.chunks_exact(8)) {
                *v = f64::from_le_bytes(b.try_into().unwrap());
            }
            records.push(SampleRecord::from_values(&values));
        }
        Ok(Self { records })
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn write_csv(&self, path: &Path) -> io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "p,phi,pdot,phidot,u,s_m_add,s_M,s_C1,s_C2,s_C3,converged,iterations")?;
        for r in &self.records {
            let v = r.to_values();
            let cols: Vec<String> = v[..RECORD_LEN - 2].iter().map(|x| x.to_string()).collect();
            writeln!(w, "{},{},{}", cols.join(","), r.converged as u8, r.iterations)?;
        }
        w.flush()
    }
}
