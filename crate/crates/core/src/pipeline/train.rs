//! The optimization loop.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::data::{Dataset, ModelInputs};
use super::eval::{recall_at_k, Recall};
use super::model::{batch_embeddings, Model, ModelParams};
use super::ModelConfig;
use crate::autodiff::{AdamW, AdamWConfig, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::freq::cfe_apply;
use crate::image::Image;
use crate::objective::{clgt_loss, Embeddings, LossTerms};
use crate::rng::{derive, uniform_at};

const SHUFFLE_TAG: u64 = 0x5_4FF1E;
const CFE_TAG: u64 = 0xCFE5_7E9;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.txt";

/// One line of the metrics log; losses are means over the epoch's steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_main: f64,
    /// Zero when the causal term is disabled.
    pub loss_causal: f64,
    pub loss_geo: f64,
    /// Recall@1 over the training set, using the query and reference
    /// embeddings each sample received during its step of the epoch.
    #[serde(rename = "train_R@1")]
    pub train_r1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint<f32>,
    pub metrics: Vec<EpochMetrics>,
}

/// Loss values of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub main: f64,
    pub causal: f64,
    pub geo: f64,
}

fn loss_values<T: Real>(tape: &Tape<T>, t: &LossTerms) -> LossValues {
    let get = |v: Var| tape.value_ref(v).data()[0].to_f64();
    LossValues {
        total: get(t.total),
        main: get(t.main),
        causal: t.causal.map(get).unwrap_or(0.0),
        geo: get(t.geo),
    }
}

fn forward<T: Real>(
    tape: &Tape<T>,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    batch: &[&ModelInputs],
    causal: Option<&[Image]>,
) -> Result<(Embeddings, LossTerms)> {
    let emb = batch_embeddings(tape, p, cfg, batch, causal)?;
    let scale = match p.log_scale {
        Some(ls) => Some(tape.exp(ls)?),
        None => None,
    };
    let terms = clgt_loss(tape, &emb, &cfg.loss, scale)?;
    Ok((emb, terms))
}

/// Objective of one batch under fixed parameters.
pub fn batch_loss<T: Real>(model: &Model<T>, batch: &[&ModelInputs], causal: Option<&[Image]>) -> Result<LossValues> {
    let tape = Tape::new();
    let p = model.params.bind(&tape, false)?;
    let (_, terms) = forward(&tape, &p, &model.cfg, batch, causal)?;
    Ok(loss_values(&tape, &terms))
}

/// Intervened street view of sample `id` at optimizer step `step`. With
/// probability `1 − cfe_prob` the plain image is returned.
pub fn causal_view(x: &ModelInputs, cfg: &ModelConfig, step: u64, id: usize) -> Result<Image> {
    let key = derive(derive(cfg.train.seed, CFE_TAG), step);
    if uniform_at(key, id as u64) >= cfg.train.cfe_prob {
        return Ok(x.street.clone());
    }
    cfe_apply(&x.street, &cfg.cam, derive(key, id as u64))
}

/// Sample order of epoch `epoch` (1-based).
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(derive(seed, SHUFFLE_TAG), epoch as u64)));
    order
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } | Error::Parameter { .. } => Error::Diverged {
            epoch,
            step,
            detail: e.to_string(),
        },
        other => other,
    }
}

/// Loads `data_dir`, trains, and writes the config echo, the metrics log
/// and a checkpoint after every epoch into `out_dir`.
pub fn train(data_dir: &Path, cfg: &ModelConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = Dataset::load(data_dir, cfg, None)?;
    train_on(&data, cfg, Some(out_dir), &mut |_| {})
}

/// Trains on loaded data. `on_epoch` sees each metrics record as it is
/// produced.
pub fn train_on(
    data: &Dataset,
    cfg: &ModelConfig,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::Invalid(format!("{} training pairs; need at least 2", data.len())));
    }
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let cp = dir.join(CONFIG_FILE);
            fs::write(&cp, cfg.echo()).map_err(|e| Error::io(&cp, e))?;
            let mp = dir.join(METRICS_FILE);
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .truncate(true)
                .open(&mp)
                .map_err(|e| Error::io(&mp, e))?;
            Some((f, mp))
        }
        None => None,
    };

    let mut model = Model::<f32>::new(cfg.clone())?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.train.lr,
        weight_decay: cfg.train.weight_decay,
        ..AdamWConfig::default()
    });
    let use_causal = cfg.loss.gamma > 0.0;
    let mut step = 0usize;
    let mut metrics = Vec::with_capacity(cfg.train.epochs);

    for epoch in 1..=cfg.train.epochs {
        let order = epoch_order(data.len(), cfg.train.seed, epoch);
        let mut sums = [0.0f64; 4];
        let mut steps = 0usize;
        let d = cfg.embed_dim;
        // samples skipped in a short final batch keep zero rows
        let mut seen_q = vec![0.0f32; data.len() * d];
        let mut seen_r = vec![0.0f32; data.len() * d];
        for ids in order.chunks(cfg.train.batch_size) {
            if ids.len() < 2 {
                continue;
            }
            let batch: Vec<&ModelInputs> = ids.iter().map(|&i| &data.inputs[i]).collect();
            let causal = if use_causal {
                Some(
                    ids.iter()
                        .map(|&i| causal_view(&data.inputs[i], cfg, step as u64, i))
                        .collect::<Result<Vec<_>>>()?,
                )
            } else {
                None
            };
            let out = sgd_step(&mut model, &mut opt, &batch, causal.as_deref()).map_err(|e| diverged(epoch, step, e))?;
            let lv = out.loss;
            for (row, &i) in ids.iter().enumerate() {
                seen_q[i * d..(i + 1) * d].copy_from_slice(&out.fused.data()[row * d..(row + 1) * d]);
                seen_r[i * d..(i + 1) * d].copy_from_slice(&out.aerial.data()[row * d..(row + 1) * d]);
            }
            if !lv.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("loss {} (main {}, causal {}, geo {})", lv.total, lv.main, lv.causal, lv.geo),
                });
            }
            for (s, v) in sums.iter_mut().zip([lv.total, lv.main, lv.causal, lv.geo]) {
                *s += v;
            }
            steps += 1;
            step += 1;
        }
        let q = Tensor::new(&[data.len(), d], seen_q)?;
        let r = Tensor::new(&[data.len(), d], seen_r)?;
        let k = steps.max(1) as f64;
        let m = EpochMetrics {
            epoch,
            loss_total: sums[0] / k,
            loss_main: sums[1] / k,
            loss_causal: sums[2] / k,
            loss_geo: sums[3] / k,
            train_r1: recall_at_k(&q, &r, Recall::Top(1))?,
        };
        on_epoch(&m);
        if let (Some((file, path)), Some(dir)) = (log.as_mut(), out_dir) {
            write_metrics(file, path, &m)?;
            let ckpt = Checkpoint { model: model.clone(), step: step as u64 };
            save_checkpoint(&dir.join(CHECKPOINT_FILE), &ckpt)?;
        }
        metrics.push(m);
    }
    if let (Some(dir), 0) = (out_dir, cfg.train.epochs) {
        save_checkpoint(&dir.join(CHECKPOINT_FILE), &Checkpoint { model: model.clone(), step: step as u64 })?;
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint { model, step: step as u64 },
        metrics,
    })
}

fn write_metrics(file: &mut File, path: &Path, m: &EpochMetrics) -> Result<()> {
    let line = serde_json::to_string(m).map_err(|e| Error::Invalid(e.to_string()))?;
    writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    file.flush().map_err(|e| Error::io(path, e))
}

/// Result of one optimizer update: the batch's losses and its fused query
/// and aerial embeddings before the update.
pub struct StepOutput {
    pub loss: LossValues,
    pub fused: Tensor<f32>,
    pub aerial: Tensor<f32>,
}

/// One optimizer update on a batch.
pub fn sgd_step(
    model: &mut Model<f32>,
    opt: &mut AdamW<f32>,
    batch: &[&ModelInputs],
    causal: Option<&[Image]>,
) -> Result<StepOutput> {
    let tape = Tape::new();
    let p = model.params.bind(&tape, true)?;
    let (emb, terms) = forward(&tape, &p, &model.cfg, batch, causal)?;
    let lv = loss_values(&tape, &terms);
    let (fused, aerial) = (tape.value(emb.fused), tape.value(emb.aerial));
    tape.backward(terms.total)?;
    let grads: Vec<Tensor<f32>> = p
        .named()
        .iter()
        .map(|(_, &v)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(&tape.shape(v))))
        .collect();
    let mut named = model.params.named_mut();
    let mut refs: Vec<(&str, &mut Tensor<f32>)> = named.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
    let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
    opt.step(&mut refs, &grad_refs)?;
    // GeM needs p >= 1
    for head in model.params.pools_mut() {
        head.p.data_mut().iter_mut().for_each(|v| *v = v.max(1.0));
    }
    Ok(StepOutput { loss: lv, fused, aerial })
}

/// Reads a metrics log back.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
        .collect()
}
