//! The retrieval model, its training loop and evaluation.

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod model;
pub mod stats;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{prepare, Dataset, ModelInputs};
pub use eval::{evaluate, recall_at_k, Recall, RecallTable};
pub use model::{Branch, EncoderParams, Model, ModelParams, StageParams};
pub use stats::{layer_stats, model_stats, Layer, ModelStats};
pub use train::{train, train_on, EpochMetrics, TrainOutcome};

use crate::bev::BevConfig;
use crate::config::{join, list, parse_kv, render_kv, value};
use crate::error::{Error, Result};
use crate::freq::CamConfig;
use crate::fusion::FusionConfig;
use crate::objective::LossConfig;
use crate::pool::Pooling;

/// Optimization schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Chance that a sample's causal view is the CFE image rather than the
    /// plain street image.
    pub cfe_prob: f64,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            seed: 0,
            cfe_prob: 1.0,
            lr: 0.5e-3,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Output channels of each encoder stage.
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub embed_dim: usize,
    pub heads: usize,
    /// Every branch is resized to `input_hw × input_hw` before encoding.
    pub input_hw: usize,
    /// Side of the feature map entering fusion; must equal `input_hw`
    /// divided by the product of the strides.
    pub fusion_hw: usize,
    pub share_bev_encoder: bool,
    pub share_aerial_encoder: bool,
    /// One pooling head for queries and references.
    pub share_pool: bool,
    pub pooling: Pooling,
    pub cam: CamConfig,
    pub loss: LossConfig,
    /// Projection from the street panorama to the BEV input.
    pub bev: BevConfig,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            widths: vec![16, 32, 32],
            strides: vec![2, 2, 1],
            embed_dim: 64,
            heads: 4,
            input_hw: 32,
            fusion_hw: 8,
            share_bev_encoder: true,
            share_aerial_encoder: true,
            share_pool: true,
            pooling: Pooling::DataAdaptive,
            cam: CamConfig::default(),
            loss: LossConfig::default(),
            bev: BevConfig {
                grid_n: 64,
                pano_h: 128,
                pano_w: 256,
                ..BevConfig::default()
            },
            train: TrainConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "{} stage widths but {} strides",
                self.widths.len(),
                self.strides.len()
            )));
        }
        if self.widths.contains(&0) || self.strides.contains(&0) || self.embed_dim == 0 {
            return Err(Error::Config("widths, strides and embed_dim must be positive".into()));
        }
        let mut side = self.input_hw;
        for &s in &self.strides {
            side = (side + 2 - 3) / s + 1;
        }
        if side != self.fusion_hw {
            return Err(Error::Config(format!(
                "input {} through strides {:?} gives {side}x{side} features, not {}x{}",
                self.input_hw, self.strides, self.fusion_hw, self.fusion_hw
            )));
        }
        self.fusion().validate()?;
        self.cam.validate()?;
        self.loss.validate()?;
        self.bev.validate()?;
        let t = &self.train;
        if t.batch_size < 2 {
            return Err(Error::Config(format!("batch size {} leaves no negatives", t.batch_size)));
        }
        if !(0.0..=1.0).contains(&t.cfe_prob) {
            return Err(Error::Config(format!("cfe probability {} outside [0, 1]", t.cfe_prob)));
        }
        if !(t.lr >= 0.0) || !(t.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate and weight decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            channels: self.widths.last().copied().unwrap_or(0),
            heads: self.heads,
            feature_hw: (self.fusion_hw, self.fusion_hw),
        }
    }

    /// Every field as `(dotted key, value)`, in a fixed order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let c = &self.cam;
        let l = &self.loss;
        let b = &self.bev;
        let t = &self.train;
        let kv: Vec<(&str, String)> = vec![
            ("model.widths", join(&self.widths)),
            ("model.strides", join(&self.strides)),
            ("model.embed_dim", self.embed_dim.to_string()),
            ("model.heads", self.heads.to_string()),
            ("model.input_hw", self.input_hw.to_string()),
            ("model.fusion_hw", self.fusion_hw.to_string()),
            ("model.share_bev_encoder", self.share_bev_encoder.to_string()),
            ("model.share_aerial_encoder", self.share_aerial_encoder.to_string()),
            ("model.share_pool", self.share_pool.to_string()),
            ("model.pooling", self.pooling.to_string()),
            ("cam.r1", c.r_init[0].to_string()),
            ("cam.r2", c.r_init[1].to_string()),
            ("cam.r3", c.r_init[2].to_string()),
            ("cam.kappa", c.kappa.to_string()),
            ("cam.grad_norm", c.grad_norm_c.to_string()),
            ("cam.noise_low", c.noise_scale[0].to_string()),
            ("cam.noise_mid_high", c.noise_scale[1].to_string()),
            ("cam.noise_high", c.noise_scale[2].to_string()),
            ("cam.r_max", c.r_max.to_string()),
            ("loss.temperature", l.temperature.to_string()),
            ("loss.alpha", l.alpha.to_string()),
            ("loss.gamma", l.gamma.to_string()),
            ("loss.symmetric", l.symmetric.to_string()),
            ("loss.learnable_temperature", l.learnable_temperature.to_string()),
            ("bev.grid", b.grid_n.to_string()),
            ("bev.extent", b.extent_m.to_string()),
            ("bev.height", b.cam_height_m.to_string()),
            ("bev.pano_h", b.pano_h.to_string()),
            ("bev.pano_w", b.pano_w.to_string()),
            ("bev.azimuth_offset", b.azimuth_offset_rad.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.cfe_prob", t.cfe_prob.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
        ];
        kv.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "model.widths" => self.widths = list(key, v)?,
            "model.strides" => self.strides = list(key, v)?,
            "model.embed_dim" => self.embed_dim = value(key, v)?,
            "model.heads" => self.heads = value(key, v)?,
            "model.input_hw" => self.input_hw = value(key, v)?,
            "model.fusion_hw" => self.fusion_hw = value(key, v)?,
            "model.share_bev_encoder" => self.share_bev_encoder = value(key, v)?,
            "model.share_aerial_encoder" => self.share_aerial_encoder = value(key, v)?,
            "model.share_pool" => self.share_pool = value(key, v)?,
            "model.pooling" => self.pooling = v.parse()?,
            "cam.r1" => self.cam.r_init[0] = value(key, v)?,
            "cam.r2" => self.cam.r_init[1] = value(key, v)?,
            "cam.r3" => self.cam.r_init[2] = value(key, v)?,
            "cam.kappa" => self.cam.kappa = value(key, v)?,
            "cam.grad_norm" => self.cam.grad_norm_c = value(key, v)?,
            "cam.noise_low" => self.cam.noise_scale[0] = value(key, v)?,
            "cam.noise_mid_high" => self.cam.noise_scale[1] = value(key, v)?,
            "cam.noise_high" => self.cam.noise_scale[2] = value(key, v)?,
            "cam.r_max" => self.cam.r_max = value(key, v)?,
            "loss.temperature" => self.loss.temperature = value(key, v)?,
            "loss.alpha" => self.loss.alpha = value(key, v)?,
            "loss.gamma" => self.loss.gamma = value(key, v)?,
            "loss.symmetric" => self.loss.symmetric = value(key, v)?,
            "loss.learnable_temperature" => self.loss.learnable_temperature = value(key, v)?,
            "bev.grid" => self.bev.grid_n = value(key, v)?,
            "bev.extent" => self.bev.extent_m = value(key, v)?,
            "bev.height" => self.bev.cam_height_m = value(key, v)?,
            "bev.pano_h" => self.bev.pano_h = value(key, v)?,
            "bev.pano_w" => self.bev.pano_w = value(key, v)?,
            "bev.azimuth_offset" => self.bev.azimuth_offset_rad = value(key, v)?,
            "train.epochs" => self.train.epochs = value(key, v)?,
            "train.batch_size" => self.train.batch_size = value(key, v)?,
            "train.seed" => self.train.seed = value(key, v)?,
            "train.cfe_prob" => self.train.cfe_prob = value(key, v)?,
            "train.lr" => self.train.lr = value(key, v)?,
            "train.weight_decay" => self.train.weight_decay = value(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Defaults overridden by each assignment in turn, then validated.
    pub fn from_kv<'a>(pairs: impl IntoIterator<Item = &'a (String, String)>) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&parse_kv(text)?)
    }

    pub fn echo(&self) -> String {
        render_kv(&self.to_kv())
    }
}
