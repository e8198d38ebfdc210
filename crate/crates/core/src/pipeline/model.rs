//! Encoders, fusion and pooling assembled into the retrieval model.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::ModelInputs;
use super::ModelConfig;
use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusion::{gt_fusion_forward, FusionParams};
use crate::image::Image;
use crate::objective::Embeddings;
use crate::params::{he_init, param_struct};
use crate::pool::{l2_normalize, pool, PoolParams};
use crate::rng::derive;

const NORM_EPS: f64 = 1e-5;

param_struct! {
    /// One encoder stage: 3×3 conv, channel layer norm, GELU.
    pub struct StageParams { w, b, ln_g, ln_b }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<P> {
    pub stages: Vec<StageParams<P>>,
}

impl<P> EncoderParams<P> {
    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a P)>) {
        for (i, s) in self.stages.iter().enumerate() {
            for (n, p) in s.fields() {
                out.push((format!("{prefix}.{i}.{n}"), p));
            }
        }
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut P)>) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            for (n, p) in s.fields_mut() {
                out.push((format!("{prefix}.{i}.{n}"), p));
            }
        }
    }

    fn try_map<Q, E>(
        &self,
        prefix: &str,
        f: &mut impl FnMut(&str, &P) -> std::result::Result<Q, E>,
    ) -> std::result::Result<EncoderParams<Q>, E> {
        let stages = self
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| s.try_map(|n, p| f(&format!("{prefix}.{i}.{n}"), p)))
            .collect::<std::result::Result<_, E>>()?;
        Ok(EncoderParams { stages })
    }
}

/// Every learned tensor of the model. `bev` and `aerial` are `None` when
/// those branches reuse the street encoder, and `pool_aerial` is `None`
/// when the aerial branch reuses the query-side pooling head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P> {
    pub street: EncoderParams<P>,
    pub bev: Option<EncoderParams<P>>,
    pub aerial: Option<EncoderParams<P>>,
    pub fusion: FusionParams<P>,
    pub pool: PoolParams<P>,
    pub pool_aerial: Option<PoolParams<P>>,
    /// Log of the learned logit scale.
    pub log_scale: Option<P>,
}

impl<P> ModelParams<P> {
    /// `(name, tensor)` in a fixed order; names are unique.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.street.named("enc_street", &mut out);
        if let Some(b) = &self.bev {
            b.named("enc_bev", &mut out);
        }
        if let Some(a) = &self.aerial {
            a.named("enc_aerial", &mut out);
        }
        for (n, p) in self.fusion.fields() {
            out.push((format!("fusion.{n}"), p));
        }
        for (n, p) in self.pool.fields() {
            out.push((format!("pool.{n}"), p));
        }
        for (n, p) in self.pool_aerial.iter().flat_map(|a| a.fields()) {
            out.push((format!("pool_aerial.{n}"), p));
        }
        if let Some(s) = &self.log_scale {
            out.push(("log_scale".into(), s));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut P)> {
        let mut out = Vec::new();
        self.street.named_mut("enc_street", &mut out);
        if let Some(b) = &mut self.bev {
            b.named_mut("enc_bev", &mut out);
        }
        if let Some(a) = &mut self.aerial {
            a.named_mut("enc_aerial", &mut out);
        }
        for (n, p) in self.fusion.fields_mut() {
            out.push((format!("fusion.{n}"), p));
        }
        for (n, p) in self.pool.fields_mut() {
            out.push((format!("pool.{n}"), p));
        }
        for (n, p) in self.pool_aerial.iter_mut().flat_map(|a| a.fields_mut()) {
            out.push((format!("pool_aerial.{n}"), p));
        }
        if let Some(s) = &mut self.log_scale {
            out.push(("log_scale".into(), s));
        }
        out
    }

    pub fn try_map<Q, E>(
        &self,
        mut f: impl FnMut(&str, &P) -> std::result::Result<Q, E>,
    ) -> std::result::Result<ModelParams<Q>, E> {
        let street = self.street.try_map("enc_street", &mut f)?;
        let bev = match &self.bev {
            Some(b) => Some(b.try_map("enc_bev", &mut f)?),
            None => None,
        };
        let aerial = match &self.aerial {
            Some(a) => Some(a.try_map("enc_aerial", &mut f)?),
            None => None,
        };
        let fusion = self.fusion.try_map(|n, p| f(&format!("fusion.{n}"), p))?;
        let pool = self.pool.try_map(|n, p| f(&format!("pool.{n}"), p))?;
        let pool_aerial = match &self.pool_aerial {
            Some(a) => Some(a.try_map(|n, p| f(&format!("pool_aerial.{n}"), p))?),
            None => None,
        };
        let log_scale = match &self.log_scale {
            Some(s) => Some(f("log_scale", s)?),
            None => None,
        };
        Ok(ModelParams {
            street,
            bev,
            aerial,
            fusion,
            pool,
            pool_aerial,
            log_scale,
        })
    }

    /// Encoder feeding the BEV branch.
    pub fn bev_encoder(&self) -> &EncoderParams<P> {
        self.bev.as_ref().unwrap_or(&self.street)
    }

    pub fn aerial_encoder(&self) -> &EncoderParams<P> {
        self.aerial.as_ref().unwrap_or(&self.street)
    }

    pub fn aerial_pool(&self) -> &PoolParams<P> {
        self.pool_aerial.as_ref().unwrap_or(&self.pool)
    }

    pub fn pools_mut(&mut self) -> impl Iterator<Item = &mut PoolParams<P>> {
        std::iter::once(&mut self.pool).chain(self.pool_aerial.as_mut())
    }
}

impl ModelParams<Vec<usize>> {
    pub fn shapes(cfg: &ModelConfig) -> ModelParams<Vec<usize>> {
        let encoder = || {
            let mut cin = 3;
            let stages = cfg
                .widths
                .iter()
                .map(|&c| {
                    let s = StageParams {
                        w: vec![c, cin, 3, 3],
                        b: vec![c],
                        ln_g: vec![c],
                        ln_b: vec![c],
                    };
                    cin = c;
                    s
                })
                .collect();
            EncoderParams { stages }
        };
        let (c, d) = (cfg.channels(), cfg.embed_dim);
        let pool = PoolParams {
            p: vec![1],
            lin_w: vec![c, d],
            lin_b: vec![d],
            gate_w: vec![d, d],
            gate_b: vec![d],
        };
        ModelParams {
            street: encoder(),
            bev: (!cfg.share_bev_encoder).then(encoder),
            aerial: (!cfg.share_aerial_encoder).then(encoder),
            fusion: cfg.fusion().shapes(),
            pool_aerial: (!cfg.share_pool).then(|| pool.clone()),
            pool,
            log_scale: cfg.loss.learnable_temperature.then(|| vec![1]),
        }
    }
}

fn init_encoder<T: Real>(shapes: &EncoderParams<Vec<usize>>, seed: u64) -> EncoderParams<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stages = shapes
        .stages
        .iter()
        .map(|s| StageParams {
            w: he_init(&s.w, s.w[1] * 9, &mut rng),
            b: Tensor::zeros(&s.b),
            ln_g: Tensor::ones(&s.ln_g),
            ln_b: Tensor::zeros(&s.ln_b),
        })
        .collect();
    EncoderParams { stages }
}

impl<T: Real> ModelParams<Tensor<T>> {
    /// Fresh parameters; every block draws from its own stream of
    /// `train.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.train.seed;
        let shapes = ModelParams::shapes(cfg);
        let (c, d) = (cfg.channels(), cfg.embed_dim);
        Ok(ModelParams {
            street: init_encoder(&shapes.street, derive(seed, 1)),
            bev: shapes.bev.as_ref().map(|s| init_encoder(s, derive(seed, 2))),
            aerial: shapes.aerial.as_ref().map(|s| init_encoder(s, derive(seed, 3))),
            fusion: cfg.fusion().init(derive(seed, 4))?,
            pool: PoolParams::init(c, d, derive(seed, 5)),
            pool_aerial: shapes.pool_aerial.as_ref().map(|_| PoolParams::init(c, d, derive(seed, 6))),
            log_scale: cfg
                .loss
                .learnable_temperature
                .then(|| Tensor::full(&[1], T::from_f64((1.0 / cfg.loss.temperature).ln()))),
        })
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> Result<ModelParams<Var>> {
        self.try_map(|_, t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
    }
}

/// Which embedding to compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    /// Street features fused with BEV features (the retrieval query).
    StreetFused,
    Aerial,
    /// Street features without fusion.
    StreetRaw,
    Bev,
}

impl Branch {
    pub const ALL: [Branch; 4] = [Branch::StreetFused, Branch::Aerial, Branch::StreetRaw, Branch::Bev];
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::StreetFused => "street-fused",
            Branch::Aerial => "aerial",
            Branch::StreetRaw => "street-raw",
            Branch::Bev => "bev",
        })
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Branch::ALL
            .into_iter()
            .find(|b| b.to_string() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown branch '{s}'")))
    }
}

/// Image as a centered `C×H×W` constant.
pub fn image_input<T: Real>(tape: &Tape<T>, img: &Image) -> Result<Var> {
    tape.constant(img.to_chw::<T>().map(|v| v - T::from_f64(0.5)))
}

/// Layer norm across channels at every pixel of a `C×H×W` map, with affine.
pub fn channel_norm<T: Real>(tape: &Tape<T>, x: Var, g: Var, b: Var) -> Result<Var> {
    let s = tape.shape(x);
    let (c, hw) = (s[0], s[1] * s[2]);
    let t = tape.transpose(tape.reshape(x, &[c, hw])?)?;
    let t = tape.layer_norm(t, NORM_EPS)?;
    let t = tape.add(tape.mul(t, g)?, b)?;
    tape.reshape(tape.transpose(t)?, &s)
}

pub fn encode<T: Real>(tape: &Tape<T>, enc: &EncoderParams<Var>, strides: &[usize], x: Var) -> Result<Var> {
    let mut h = x;
    for (s, &stride) in enc.stages.iter().zip(strides) {
        h = tape.conv2d(h, s.w, Some(s.b), stride, 1, 1)?;
        h = channel_norm(tape, h, s.ln_g, s.ln_b)?;
        h = tape.gelu(h)?;
    }
    Ok(h)
}

/// Street, BEV and fused feature maps of one query.
pub struct QueryFeatures {
    pub street: Var,
    pub bev: Var,
    pub fused: Var,
}

pub fn query_features<T: Real>(
    tape: &Tape<T>,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    street: &Image,
    bev: &Image,
) -> Result<QueryFeatures> {
    let fs = encode(tape, &p.street, &cfg.strides, image_input(tape, street)?)?;
    let fb = encode(tape, p.bev_encoder(), &cfg.strides, image_input(tape, bev)?)?;
    let fused = gt_fusion_forward(tape, fs, fb, &p.fusion, &cfg.fusion())?;
    Ok(QueryFeatures { street: fs, bev: fb, fused })
}

/// Unnormalized pooled vector `[D]` of the query-side head.
pub fn pool_query<T: Real>(tape: &Tape<T>, p: &ModelParams<Var>, cfg: &ModelConfig, z: Var) -> Result<Var> {
    pool(tape, z, &p.pool, cfg.pooling)
}

pub fn aerial_vector<T: Real>(tape: &Tape<T>, p: &ModelParams<Var>, cfg: &ModelConfig, aerial: &Image) -> Result<Var> {
    let z = encode(tape, p.aerial_encoder(), &cfg.strides, image_input(tape, aerial)?)?;
    pool(tape, z, p.aerial_pool(), cfg.pooling)
}

/// Unit-norm `[D]` embedding of one sample on the given branch.
pub fn embed_sample<T: Real>(
    tape: &Tape<T>,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    x: &ModelInputs,
    branch: Branch,
) -> Result<Var> {
    let v = match branch {
        Branch::Aerial => aerial_vector(tape, p, cfg, &x.aerial)?,
        Branch::StreetRaw => {
            let z = encode(tape, &p.street, &cfg.strides, image_input(tape, &x.street)?)?;
            pool_query(tape, p, cfg, z)?
        }
        Branch::Bev => {
            let z = encode(tape, p.bev_encoder(), &cfg.strides, image_input(tape, &x.bev)?)?;
            pool_query(tape, p, cfg, z)?
        }
        Branch::StreetFused => {
            let q = query_features(tape, p, cfg, &x.street, &x.bev)?;
            pool_query(tape, p, cfg, q.fused)?
        }
    };
    l2_normalize(tape, v)
}

/// Stacks `[D]` vectors into a row-normalized `[B, D]` matrix.
fn stack_normalized<T: Real>(tape: &Tape<T>, rows: &[Var]) -> Result<Var> {
    let d = tape.shape(rows[0])[0];
    let rows = rows.iter().map(|&r| tape.reshape(r, &[1, d])).collect::<Result<Vec<_>>>()?;
    l2_normalize(tape, tape.concat(&rows, 0)?)
}

/// The five embedding batches of one training step. `causal` holds the
/// intervened street image per sample; `None` skips that branch.
pub fn batch_embeddings<T: Real>(
    tape: &Tape<T>,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    batch: &[&ModelInputs],
    causal: Option<&[Image]>,
) -> Result<Embeddings> {
    let (mut f, mut a, mut s, mut b, mut c) = (vec![], vec![], vec![], vec![], vec![]);
    for (i, x) in batch.iter().enumerate() {
        let q = query_features(tape, p, cfg, &x.street, &x.bev)?;
        f.push(pool_query(tape, p, cfg, q.fused)?);
        s.push(pool_query(tape, p, cfg, q.street)?);
        b.push(pool_query(tape, p, cfg, q.bev)?);
        a.push(aerial_vector(tape, p, cfg, &x.aerial)?);
        if let Some(imgs) = causal {
            let z = encode(tape, &p.street, &cfg.strides, image_input(tape, &imgs[i])?)?;
            c.push(pool_query(tape, p, cfg, z)?);
        }
    }
    Ok(Embeddings {
        fused: stack_normalized(tape, &f)?,
        aerial: stack_normalized(tape, &a)?,
        causal: if causal.is_some() { Some(stack_normalized(tape, &c)?) } else { None },
        street: stack_normalized(tape, &s)?,
        bev: stack_normalized(tape, &b)?,
    })
}

/// Worker count from `CLGT_THREADS` (unset or 0 = available parallelism).
pub fn thread_count() -> usize {
    let auto = || std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var("CLGT_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(0) | None => auto(),
        Some(n) => n,
    }
}

/// A configuration with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ModelParams<Tensor<T>>,
}

impl<T: Real> Model<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let params = ModelParams::init(&cfg)?;
        Ok(Model { cfg, params })
    }

    /// `[N, D]` unit-norm embeddings. Rows are computed independently (one
    /// tape each), split across worker threads in contiguous blocks.
    pub fn embed(&self, inputs: &[ModelInputs], branch: Branch) -> Result<Tensor<T>> {
        let d = self.cfg.embed_dim;
        let workers = thread_count().clamp(1, inputs.len().max(1));
        let chunk = inputs.len().div_ceil(workers).max(1);
        let one = |x: &ModelInputs| -> Result<Vec<T>> {
            let tape = Tape::new();
            let p = self.params.bind(&tape, false)?;
            let v = embed_sample(&tape, &p, &self.cfg, x, branch)?;
            Ok(tape.value(v).into_data())
        };
        let blocks: Vec<Result<Vec<T>>> = if workers == 1 {
            vec![inputs.iter().map(one).collect::<Result<Vec<_>>>().map(|r| r.concat())]
        } else {
            std::thread::scope(|sc| {
                let handles: Vec<_> = inputs
                    .chunks(chunk)
                    .map(|c| sc.spawn(move || c.iter().map(one).collect::<Result<Vec<_>>>().map(|r| r.concat())))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("embedding worker panicked")).collect()
            })
        };
        let mut data = Vec::with_capacity(inputs.len() * d);
        for b in blocks {
            data.extend(b?);
        }
        Tensor::new(&[inputs.len(), d], data)
    }
}
