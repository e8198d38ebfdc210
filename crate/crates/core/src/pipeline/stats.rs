//! Analytic parameter and multiply-accumulate counts.

use std::fmt;

use super::model::ModelParams;
use super::ModelConfig;
use crate::fusion::fusion_macs;
use crate::pool::pool_macs;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ModelStats {
    pub params: usize,
    /// Per-sample forward multiply-accumulates.
    pub macs: usize,
}

impl std::ops::Add for ModelStats {
    type Output = ModelStats;
    fn add(self, o: ModelStats) -> ModelStats {
        ModelStats {
            params: self.params + o.params,
            macs: self.macs + o.macs,
        }
    }
}

impl fmt::Display for ModelStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "params {}\nmacs {}", self.params, self.macs)
    }
}

/// A layer whose cost depends only on its shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv {
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        bias: bool,
    },
    /// Dense map on a vector; leaves the spatial size untouched.
    Linear { inputs: usize, outputs: usize, bias: bool },
}

/// Sums layer costs for an input of `(channels, height, width)`, tracking
/// the spatial size through strided convolutions.
pub fn layer_stats(layers: &[Layer], input: (usize, usize, usize)) -> ModelStats {
    let (_, mut h, mut w) = input;
    let mut total = ModelStats::default();
    for l in layers {
        total = total
            + match *l {
                Layer::Conv { cin, cout, k, stride, pad, groups, bias } => {
                    h = (h + 2 * pad - k) / stride + 1;
                    w = (w + 2 * pad - k) / stride + 1;
                    let per_out = cin / groups * k * k;
                    ModelStats {
                        params: cout * (per_out + bias as usize),
                        macs: per_out * cout * h * w,
                    }
                }
                Layer::Linear { inputs, outputs, bias } => ModelStats {
                    params: inputs * outputs + if bias { outputs } else { 0 },
                    macs: inputs * outputs,
                },
            };
    }
    total
}

fn encoder_layers(cfg: &ModelConfig) -> Vec<Layer> {
    let mut cin = 3;
    cfg.widths
        .iter()
        .zip(&cfg.strides)
        .map(|(&cout, &stride)| {
            let l = Layer::Conv { cin, cout, k: 3, stride, pad: 1, groups: 1, bias: true };
            cin = cout;
            l
        })
        .collect()
}

/// Exact parameter count and the forward MACs of one query–reference pair:
/// street and BEV encoders, fusion and query pooling, plus the aerial
/// encoder and its pooling. Normalization and elementwise work is not
/// counted.
pub fn model_stats(cfg: &ModelConfig) -> ModelStats {
    let params = ModelParams::shapes(cfg)
        .named()
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    let enc = layer_stats(&encoder_layers(cfg), (3, cfg.input_hw, cfg.input_hw)).macs;
    let pool = pool_macs(cfg.channels(), cfg.embed_dim, cfg.pooling);
    ModelStats {
        params,
        macs: 3 * enc + fusion_macs(&cfg.fusion()) + 2 * pool,
    }
}
