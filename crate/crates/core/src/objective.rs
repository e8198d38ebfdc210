//! InfoNCE and the three-term training objective
//! `L(f, S) + γ·L(f, s*) + α·L(s, b)`.

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    /// Weight of the street/BEV alignment term.
    pub alpha: f64,
    /// Weight of the causal supervision term.
    pub gamma: f64,
    pub symmetric: bool,
    /// Learn a logit scale initialized at `1/temperature`.
    pub learnable_temperature: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.1,
            alpha: 0.1,
            gamma: 0.1,
            symmetric: false,
            learnable_temperature: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if !(self.alpha >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights alpha={} gamma={} must be non-negative",
                self.alpha, self.gamma
            )));
        }
        Ok(())
    }
}

/// Mean over rows of `logsumexp(row) − row[i]` for a square `[B, B]` logit
/// matrix, stabilized by subtracting each row's max (a constant shift that
/// leaves both value and gradient unchanged).
pub fn cross_entropy_diagonal<T: Real>(tape: &Tape<T>, logits: Var) -> Result<Var> {
    let s = tape.shape(logits);
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::Invalid(format!("diagonal cross-entropy needs a square matrix, got {s:?}")));
    }
    let b = s[0];
    let shift = {
        let v = tape.value_ref(logits);
        let maxes: Vec<T> = v
            .data()
            .chunks(b)
            .map(|r| r.iter().copied().fold(r[0], |m, x| if x > m { x } else { m }))
            .collect();
        Tensor::new(&[b, 1], maxes)?
    };
    let shifted = tape.sub(logits, tape.constant(shift)?)?;
    let lse = tape.log(tape.sum_last(tape.exp(shifted)?)?)?;
    let eye = tape.constant(Tensor::from_fn(&[b, b], |i| if i / b == i % b { T::ONE } else { T::ZERO }))?;
    let pos = tape.sum_last(tape.mul(shifted, eye)?)?;
    tape.mean(tape.sub(lse, pos)?)
}

/// InfoNCE with logits `q rᵀ · scale`; `scale` is a one-element var
/// (`1/τ`). Row `i` of `refs` is the positive of query `i`.
pub fn info_nce_scaled<T: Real>(tape: &Tape<T>, queries: Var, refs: Var, scale: Var, symmetric: bool) -> Result<Var> {
    let (qs, rs) = (tape.shape(queries), tape.shape(refs));
    if qs.len() != 2 || qs != rs {
        return Err(Error::shape("info_nce", &qs, &rs));
    }
    let sims = tape.matmul(queries, tape.transpose(refs)?)?;
    let logits = tape.mul(sims, scale)?;
    let forward = cross_entropy_diagonal(tape, logits)?;
    if !symmetric {
        return Ok(forward);
    }
    let backward = cross_entropy_diagonal(tape, tape.transpose(logits)?)?;
    tape.mul_scalar(tape.add(forward, backward)?, 0.5)
}

/// InfoNCE at fixed temperature `tau`.
pub fn info_nce<T: Real>(tape: &Tape<T>, queries: Var, refs: Var, tau: f64, symmetric: bool) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let scale = tape.constant(Tensor::full(&[1], T::from_f64(1.0 / tau)))?;
    info_nce_scaled(tape, queries, refs, scale, symmetric)
}

/// Scalar total and the three unweighted terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub main: Var,
    pub causal: Option<Var>,
    pub geo: Var,
}

/// Embedding batches entering the objective, all `[B, D]`.
#[derive(Clone, Copy, Debug)]
pub struct Embeddings {
    /// Fused street embedding.
    pub fused: Var,
    /// Aerial references.
    pub aerial: Var,
    /// Street embedding of the intervened image; may be absent when `γ = 0`.
    pub causal: Option<Var>,
    /// Raw street embedding.
    pub street: Var,
    pub bev: Var,
}

/// `L(f,S) + γ·L(f,s*) + α·L(s,b)`. `scale` overrides the fixed `1/τ`
/// (learnable temperature).
pub fn clgt_loss<T: Real>(tape: &Tape<T>, e: &Embeddings, cfg: &LossConfig, scale: Option<Var>) -> Result<LossTerms> {
    cfg.validate()?;
    let scale = match scale {
        Some(s) => s,
        None => tape.constant(Tensor::full(&[1], T::from_f64(1.0 / cfg.temperature)))?,
    };
    let nce = |q, r| info_nce_scaled(tape, q, r, scale, cfg.symmetric);
    let main = nce(e.fused, e.aerial)?;
    let geo = nce(e.street, e.bev)?;
    let causal = match e.causal {
        Some(c) => Some(nce(e.fused, c)?),
        None if cfg.gamma == 0.0 => None,
        None => return Err(Error::Invalid("causal embeddings required when gamma > 0".into())),
    };
    let mut total = tape.add(main, tape.mul_scalar(geo, cfg.alpha)?)?;
    if let Some(c) = causal {
        total = tape.add(total, tape.mul_scalar(c, cfg.gamma)?)?;
    }
    Ok(LossTerms { total, main, causal, geo })
}
