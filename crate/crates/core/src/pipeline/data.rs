//! Loading a generated dataset into model-ready inputs.

use std::path::Path;

use super::ModelConfig;
use crate::bev::panorama_to_bev;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::derive;
use crate::synth::{corrupt, read_manifest, sample_paths, Corruption, ManifestRecord};

const CORRUPT_TAG: u64 = 0xC0_2277;

/// The three images one sample contributes, each `input_hw × input_hw`.
/// `bev` is projected from the full-resolution street panorama.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInputs {
    pub street: Image,
    pub bev: Image,
    pub aerial: Image,
}

/// Resizes a pair and derives its BEV input.
pub fn prepare(street: &Image, aerial: &Image, cfg: &ModelConfig) -> Result<ModelInputs> {
    if street.channels != 3 || aerial.channels != 3 {
        return Err(Error::Invalid("model inputs must be RGB".into()));
    }
    let n = cfg.input_hw;
    let bev = panorama_to_bev(street, &cfg.bev)?;
    Ok(ModelInputs {
        street: street.resize(n, n),
        bev: bev.resize(n, n),
        aerial: aerial.resize(n, n),
    })
}

/// Seed for corrupting the street image of sample `id`.
pub fn corruption_seed(id: usize, kind: Corruption) -> u64 {
    derive(derive(CORRUPT_TAG, id as u64), kind as u64)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<ManifestRecord>,
    pub inputs: Vec<ModelInputs>,
}

impl Dataset {
    /// Reads every pair listed in `dir`'s manifest. With `corruption`, each
    /// street panorama is corrupted before its BEV projection, so both
    /// query-side inputs see the same degraded image.
    pub fn load(dir: &Path, cfg: &ModelConfig, corruption: Option<(Corruption, u8)>) -> Result<Dataset> {
        let records = read_manifest(dir)?;
        let mut inputs = Vec::with_capacity(records.len());
        for rec in &records {
            let [sp, ap, _] = sample_paths(dir, rec.id);
            let mut street = Image::load_png(&sp)?;
            if let Some((kind, severity)) = corruption {
                street = corrupt(&street, kind, severity, corruption_seed(rec.id, kind))?;
            }
            let aerial = Image::load_png(&ap)?;
            inputs.push(prepare(&street, &aerial, cfg).map_err(|e| Error::Format {
                path: sp.clone(),
                reason: e.to_string(),
            })?);
        }
        Ok(Dataset { records, inputs })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}
