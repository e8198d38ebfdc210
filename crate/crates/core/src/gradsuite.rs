//! Registered finite-difference gradient checks, one per op and per
//! composite block, all at 64-bit.
//!
//! Every check reduces its output to a scalar through a fixed random
//! projection so that each output coordinate contributes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, grad_check_at, InputDist, Tape, Tensor, Var};
use crate::error::Result;
use crate::fusion::{gt_fusion_forward, FusionConfig};
use crate::objective::{clgt_loss, info_nce, Embeddings, LossConfig};
use crate::params::{normal_init, uniform_init};
use crate::pipeline::model::{encode, EncoderParams, StageParams};
use crate::pool::{pool, PoolParams, Pooling};
use crate::rng::derive;

/// Seeds every suite is run with.
pub const SEEDS: [u64; 3] = [1, 2, 3];
/// Pass threshold on the max relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy)]
pub struct GradSuite {
    pub module: &'static str,
    pub name: &'static str,
    pub check: fn(u64) -> Result<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub module: &'static str,
    pub name: &'static str,
    /// Worst relative error over [`SEEDS`].
    pub max_error: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_error < TOLERANCE
    }
}

/// `Σ out ⊙ R` with `R` a fixed Gaussian tensor shaped like `out`.
fn project(tape: &Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out);
    let r = normal_init(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(derive(seed, 0xBEEF)));
    let r = tape.constant(r)?;
    tape.sum(tape.mul(out, r)?)
}

fn op(
    seed: u64,
    shapes: &[&[usize]],
    dist: InputDist,
    f: impl Fn(&Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    grad_check(|t, v| project(t, f(t, v)?, seed), shapes, dist, seed)
}

const N: InputDist = InputDist::Normal;
const POS: InputDist = InputDist::Uniform(0.5, 2.0);
// unnormalized rows at embedding scale keep the softmax unsaturated
const EMBED: InputDist = InputDist::Uniform(-0.4, 0.4);

fn ops() -> Vec<GradSuite> {
    macro_rules! suite {
        ($name:expr, $body:expr) => {
            GradSuite { module: "autodiff", name: $name, check: $body }
        };
    }
    vec![
        suite!("matmul", |s| op(s, &[&[3, 4], &[4, 5]], N, |t, v| t.matmul(v[0], v[1]))),
        suite!("conv2d", |s| op(s, &[&[2, 5, 5], &[3, 2, 3, 3], &[3]], N, |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1)
        })),
        suite!("conv2d_strided", |s| op(s, &[&[2, 6, 6], &[3, 2, 3, 3], &[3]], N, |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), 2, 1, 1)
        })),
        suite!("conv2d_depthwise", |s| op(s, &[&[3, 5, 4], &[3, 1, 3, 3]], N, |t, v| {
            t.conv2d(v[0], v[1], None, 1, 1, 3)
        })),
        suite!("conv2d_1x1", |s| op(s, &[&[4, 3, 3], &[2, 4, 1, 1], &[2]], N, |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), 1, 0, 1)
        })),
        suite!("layer_norm", |s| op(s, &[&[3, 6]], N, |t, v| t.layer_norm(v[0], 1e-5))),
        suite!("softmax", |s| op(s, &[&[3, 5]], N, |t, v| t.softmax(v[0]))),
        suite!("sigmoid", |s| op(s, &[&[7]], N, |t, v| t.sigmoid(v[0]))),
        suite!("gelu", |s| op(s, &[&[9]], N, |t, v| t.gelu(v[0]))),
        suite!("exp", |s| op(s, &[&[6]], N, |t, v| t.exp(v[0]))),
        suite!("log", |s| op(s, &[&[6]], POS, |t, v| t.log(v[0]))),
        suite!("pow", |s| op(s, &[&[6]], POS, |t, v| t.pow(v[0], 2.7))),
        suite!("add_scalar", |s| op(s, &[&[4]], N, |t, v| t.add_scalar(v[0], 1.5))),
        suite!("mul_scalar", |s| op(s, &[&[4]], N, |t, v| t.mul_scalar(v[0], -0.7))),
        suite!("neg", |s| op(s, &[&[4]], N, |t, v| t.neg(v[0]))),
        suite!("clamp_min", |s| {
            // inputs drawn away from the clamp point
            op(s, &[&[8]], InputDist::Uniform(0.3, 2.0), |t, v| {
                let shifted = t.add_scalar(v[0], -1.0)?;
                t.clamp_min(shifted, 0.0)
            })
        }),
        suite!("add_broadcast", |s| op(s, &[&[3, 4], &[4]], N, |t, v| t.add(v[0], v[1]))),
        suite!("sub_broadcast", |s| op(s, &[&[3, 1], &[3, 4]], N, |t, v| t.sub(v[0], v[1]))),
        suite!("mul_broadcast", |s| op(s, &[&[2, 3, 4], &[3, 1]], N, |t, v| t.mul(v[0], v[1]))),
        suite!("div_broadcast", |s| op(s, &[&[3, 4], &[4]], POS, |t, v| t.div(v[0], v[1]))),
        suite!("global_max_pool", |s| op(s, &[&[3, 4, 4]], N, |t, v| t.global_max_pool(v[0]))),
        suite!("global_avg_pool", |s| op(s, &[&[3, 4, 4]], N, |t, v| t.global_avg_pool(v[0]))),
        suite!("sum_last", |s| op(s, &[&[3, 5]], N, |t, v| t.sum_last(v[0]))),
        suite!("sum", |s| op(s, &[&[3, 5]], N, |t, v| t.sum(v[0]))),
        suite!("mean", |s| op(s, &[&[3, 5]], N, |t, v| t.mean(v[0]))),
        suite!("concat", |s| op(s, &[&[2, 3], &[2, 2]], N, |t, v| t.concat(&[v[0], v[1]], 1))),
        suite!("reshape", |s| op(s, &[&[2, 6]], N, |t, v| t.reshape(v[0], &[3, 4]))),
        suite!("transpose", |s| op(s, &[&[2, 5]], N, |t, v| t.transpose(v[0]))),
        suite!("broadcast_to", |s| op(s, &[&[3, 1]], N, |t, v| t.broadcast_to(v[0], &[2, 3, 4]))),
    ]
}

fn fusion_block(seed: u64) -> Result<f64> {
    let cfg = FusionConfig { channels: 4, heads: 2, feature_hw: (6, 6) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // random rather than identity-start values so every path is active
    let params = cfg.shapes().try_map(|name, s| {
        let t: Tensor<f64> = normal_init(s, 0.3, &mut rng);
        Ok::<_, crate::Error>(if name.starts_with("ln_") && name.ends_with("_g") { t.map(|v| 1.0 + v) } else { t })
    })?;
    let mut inputs = vec![normal_init(&[4, 6, 6], 1.0, &mut rng), normal_init(&[4, 6, 6], 1.0, &mut rng)];
    inputs.extend(params.fields().into_iter().map(|(_, t)| t.clone()));
    grad_check_at(
        |tape, v| {
            let mut it = v[2..].iter().copied();
            let p = cfg.shapes().try_map(|_, _| Ok::<_, crate::Error>(it.next().expect("one var per field")))?;
            project(tape, gt_fusion_forward(tape, v[0], v[1], &p, &cfg)?, seed)
        },
        &inputs,
    )
}

fn pool_head(kind: Pooling, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: PoolParams<Tensor<f64>> = PoolParams {
        p: Tensor::full(&[1], 2.5),
        lin_w: normal_init(&[3, 4], 0.7, &mut rng),
        lin_b: normal_init(&[4], 0.3, &mut rng),
        gate_w: normal_init(&[4, 4], 0.7, &mut rng),
        gate_b: normal_init(&[4], 0.3, &mut rng),
    };
    // positive activations keep GeM away from its clamp
    let mut inputs = vec![uniform_init(&[3, 4, 4], 0.2, 2.0, &mut rng)];
    inputs.extend(params.fields().into_iter().map(|(_, t)| t.clone()));
    grad_check_at(
        |tape, v| {
            let p = PoolParams { p: v[1], lin_w: v[2], lin_b: v[3], gate_w: v[4], gate_b: v[5] };
            project(tape, pool(tape, v[0], &p, kind)?, seed)
        },
        &inputs,
    )
}

fn nce(seed: u64, symmetric: bool) -> Result<f64> {
    grad_check(|t, v| info_nce(t, v[0], v[1], 0.1, symmetric), &[&[4, 8], &[4, 8]], EMBED, seed)
}

/// All three terms with a learnable scale.
fn full_loss(seed: u64) -> Result<f64> {
    grad_check(
        |t, v| {
            let e = Embeddings { fused: v[0], aerial: v[1], causal: Some(v[2]), street: v[3], bev: v[4] };
            let scale = t.exp(v[5])?;
            Ok(clgt_loss(t, &e, &LossConfig::default(), Some(scale))?.total)
        },
        &[&[4, 8], &[4, 8], &[4, 8], &[4, 8], &[4, 8], &[1]],
        EMBED,
        seed,
    )
}

/// Two encoder stages (conv, channel layer norm, GELU) on an image-sized
/// input, differentiated with respect to the input and every weight.
fn encoder_stages(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = [(3, 4, 2), (4, 5, 1)];
    let mut inputs = vec![normal_init(&[3, 8, 8], 1.0, &mut rng)];
    for &(cin, cout, _) in &widths {
        inputs.push(normal_init(&[cout, cin, 3, 3], 0.5, &mut rng));
        inputs.push(normal_init(&[cout], 0.3, &mut rng));
        inputs.push(normal_init::<f64>(&[cout], 0.2, &mut rng).map(|v| 1.0 + v));
        inputs.push(normal_init(&[cout], 0.3, &mut rng));
    }
    grad_check_at(
        |tape, v| {
            let stages = v[1..]
                .chunks(4)
                .map(|s| StageParams { w: s[0], b: s[1], ln_g: s[2], ln_b: s[3] })
                .collect();
            let strides: Vec<usize> = widths.iter().map(|w| w.2).collect();
            project(tape, encode(tape, &EncoderParams { stages }, &strides, v[0])?, seed)
        },
        &inputs,
    )
}

pub fn suites() -> Vec<GradSuite> {
    let mut all = ops();
    all.push(GradSuite { module: "fusion", name: "gt_fusion", check: fusion_block });
    all.push(GradSuite { module: "pool", name: "da_pool", check: |s| pool_head(Pooling::DataAdaptive, s) });
    all.push(GradSuite { module: "pool", name: "gem_pool", check: |s| pool_head(Pooling::Gem, s) });
    all.push(GradSuite { module: "pool", name: "avg_pool", check: |s| pool_head(Pooling::Avg, s) });
    all.push(GradSuite { module: "pool", name: "max_pool", check: |s| pool_head(Pooling::Max, s) });
    all.push(GradSuite { module: "objective", name: "info_nce", check: |s| nce(s, false) });
    all.push(GradSuite { module: "objective", name: "info_nce_symmetric", check: |s| nce(s, true) });
    all.push(GradSuite { module: "objective", name: "clgt_loss", check: full_loss });
    all.push(GradSuite { module: "encoder", name: "encoder_stages", check: encoder_stages });
    all
}

pub fn modules() -> Vec<&'static str> {
    let mut m: Vec<&'static str> = suites().iter().map(|s| s.module).collect();
    m.dedup();
    m
}

/// Runs every suite (or those of `module`) over [`SEEDS`].
pub fn run(module: Option<&str>) -> Result<Vec<SuiteReport>> {
    suites()
        .into_iter()
        .filter(|s| module.is_none_or(|m| m == s.module))
        .map(|s| {
            let mut worst = 0.0f64;
            for seed in SEEDS {
                worst = worst.max((s.check)(seed)?);
            }
            Ok(SuiteReport { module: s.module, name: s.name, max_error: worst })
        })
        .collect()
}
