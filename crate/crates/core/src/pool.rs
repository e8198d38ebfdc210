//! Global pooling heads: data-adaptive pooling and the pure variants used
//! for ablations.
//!
//! Data-adaptive pooling sums global max, global average and generalized
//! mean pooling, applies a linear map and a sigmoid self-gate:
//! `h = lin(max + avg + gem)`, `out = σ(gate(h)) ⊙ h`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{he_init, normal_init, param_struct};

/// Lower clamp applied before the GeM power.
pub const GEM_EPS: f64 = 1e-6;

/// Initial GeM exponent.
pub const GEM_P_INIT: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    DataAdaptive,
    Gem,
    Avg,
    Max,
}

impl Pooling {
    pub const ALL: [Pooling; 4] = [Pooling::DataAdaptive, Pooling::Gem, Pooling::Avg, Pooling::Max];

    pub fn code(self) -> u8 {
        match self {
            Pooling::DataAdaptive => 0,
            Pooling::Gem => 1,
            Pooling::Avg => 2,
            Pooling::Max => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Pooling::ALL
            .into_iter()
            .find(|p| p.code() == code)
            .ok_or_else(|| Error::Config(format!("unknown pooling code {code}")))
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::DataAdaptive => "da",
            Pooling::Gem => "gem",
            Pooling::Avg => "avg",
            Pooling::Max => "max",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "da" => Ok(Pooling::DataAdaptive),
            "gem" => Ok(Pooling::Gem),
            "avg" => Ok(Pooling::Avg),
            "max" => Ok(Pooling::Max),
            _ => Err(Error::Config(format!("unknown pooling '{s}' (expected da, gem, avg or max)"))),
        }
    }
}

param_struct! {
    /// Pooling head parameters. `lin_w` is `[C, D]`, `gate_w` is `[D, D]`.
    /// The pure variants use only `lin` (and `p` for GeM).
    pub struct PoolParams { p, lin_w, lin_b, gate_w, gate_b }
}

impl<T: Real> PoolParams<Tensor<T>> {
    /// GeM exponent 3, He-scaled linear map, small gate, zero biases.
    pub fn init(channels: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PoolParams {
            p: Tensor::full(&[1], T::from_f64(GEM_P_INIT)),
            lin_w: he_init(&[channels, dim], channels, &mut rng),
            lin_b: Tensor::zeros(&[dim]),
            gate_w: normal_init(&[dim, dim], (1.0 / dim as f64).sqrt(), &mut rng),
            gate_b: Tensor::zeros(&[dim]),
        }
    }
}

/// Generalized mean `(mean z^p)^(1/p)` per channel of a `C×H×W` map, with
/// `z` clamped below at [`GEM_EPS`]. `p` is a one-element tensor.
pub fn gem_pool<T: Real>(tape: &Tape<T>, z: Var, p: Var) -> Result<Var> {
    let pv = tape.value_ref(p).data()[0].to_f64();
    if tape.shape(p) != [1] || !(pv >= 1.0) {
        return Err(Error::Invalid(format!("GeM exponent must be a single value >= 1, got {pv}")));
    }
    let zc = tape.clamp_min(z, GEM_EPS)?;
    let logz = tape.log(zc)?;
    let powed = tape.exp(tape.mul(logz, p)?)?;
    let m = tape.global_avg_pool(powed)?;
    let logm = tape.log(m)?;
    tape.exp(tape.div(logm, p)?)
}

/// `s = max + avg + gem` (data-adaptive) or the single pooled vector, as a
/// `[1, C]` row.
fn pooled_row<T: Real>(tape: &Tape<T>, z: Var, p: &PoolParams<Var>, kind: Pooling) -> Result<Var> {
    let s = match kind {
        Pooling::DataAdaptive => {
            let mx = tape.global_max_pool(z)?;
            let av = tape.global_avg_pool(z)?;
            let gm = gem_pool(tape, z, p.p)?;
            tape.add(tape.add(mx, av)?, gm)?
        }
        Pooling::Gem => gem_pool(tape, z, p.p)?,
        Pooling::Avg => tape.global_avg_pool(z)?,
        Pooling::Max => tape.global_max_pool(z)?,
    };
    let c = tape.shape(s)[0];
    tape.reshape(s, &[1, c])
}

/// Pooling head of the given kind on a `C×H×W` map, returning a `D` vector.
pub fn pool<T: Real>(tape: &Tape<T>, z: Var, p: &PoolParams<Var>, kind: Pooling) -> Result<Var> {
    let zs = tape.shape(z);
    let ws = tape.shape(p.lin_w);
    if zs.len() != 3 || ws.len() != 2 || zs[0] != ws[0] {
        return Err(Error::shape("pool", &zs, &ws));
    }
    let s = pooled_row(tape, z, p, kind)?;
    let h = tape.add(tape.matmul(s, p.lin_w)?, p.lin_b)?;
    let out = if kind == Pooling::DataAdaptive {
        let g = tape.add(tape.matmul(h, p.gate_w)?, p.gate_b)?;
        tape.mul(tape.sigmoid(g)?, h)?
    } else {
        h
    };
    tape.reshape(out, &[ws[1]])
}

/// Data-adaptive pooling.
pub fn da_pool<T: Real>(tape: &Tape<T>, z: Var, p: &PoolParams<Var>) -> Result<Var> {
    pool(tape, z, p, Pooling::DataAdaptive)
}

/// `x / ‖x‖` for a vector or each row of a matrix.
pub fn l2_normalize<T: Real>(tape: &Tape<T>, x: Var) -> Result<Var> {
    let sq = tape.mul(x, x)?;
    let n = tape.sum_last(sq)?;
    let n = tape.pow(tape.add_scalar(n, 1e-12)?, 0.5)?;
    let s = tape.shape(x);
    let n = if s.len() == 2 { tape.reshape(n, &[s[0], 1])? } else { n };
    tape.div(x, n)
}

/// Learned-parameter count of a head of the given kind.
pub fn pool_param_count(channels: usize, dim: usize, kind: Pooling) -> usize {
    let lin = channels * dim + dim;
    match kind {
        Pooling::DataAdaptive => 1 + lin + dim * dim + dim,
        Pooling::Gem => 1 + lin,
        Pooling::Avg | Pooling::Max => lin,
    }
}

pub fn pool_macs(channels: usize, dim: usize, kind: Pooling) -> usize {
    match kind {
        Pooling::DataAdaptive => channels * dim + dim * dim,
        _ => channels * dim,
    }
}
