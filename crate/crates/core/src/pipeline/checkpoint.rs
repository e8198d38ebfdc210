//! Binary checkpoint: magic `CLGT`, `u32` version, `u32` tensor count, then
//! per tensor a `u16` name length, the UTF-8 name, a `u8` dtype code
//! (0 = f32, 1 = f64), a `u8` rank, `u32` dims and the raw values, all
//! little-endian.
//!
//! Besides the parameters, two tensors carry metadata: `meta.step` (one
//! f64) and `meta.config`, the configuration echo text stored one byte per
//! f64 element.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::model::{Model, ModelParams};
use super::ModelConfig;
use crate::autodiff::{DType, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CLGT";
pub const VERSION: u32 = 1;
const META_STEP: &str = "meta.step";
const META_CONFIG: &str = "meta.config";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
}

/// A tensor as stored, before conversion to the model's precision.
enum Stored {
    F32(Vec<usize>, Vec<f32>),
    F64(Vec<usize>, Vec<f64>),
}

impl Stored {
    fn shape(&self) -> &[usize] {
        match self {
            Stored::F32(s, _) | Stored::F64(s, _) => s,
        }
    }

    fn to_f64(&self) -> Vec<f64> {
        match self {
            Stored::F32(_, v) => v.iter().map(|&x| x as f64).collect(),
            Stored::F64(_, v) => v.clone(),
        }
    }
}

fn put_tensor<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend((name.len() as u16).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(T::DTYPE as u8);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend((d as u32).to_le_bytes());
    }
    for &v in t.data() {
        match T::DTYPE {
            DType::F32 => out.extend((v.to_f64() as f32).to_le_bytes()),
            DType::F64 => out.extend(v.to_f64().to_le_bytes()),
        }
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let named = self.model.params.named();
        let config: Vec<f64> = self.model.cfg.echo().bytes().map(f64::from).collect();
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((named.len() as u32 + 2).to_le_bytes());
        put_tensor(&mut out, META_STEP, &Tensor::<f64>::scalar(self.step as f64).reshape(&[1]).expect("one element"));
        put_tensor(&mut out, META_CONFIG, &Tensor::new(&[config.len()], config).expect("length matches"));
        for (name, t) in named {
            put_tensor(&mut out, &name, t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Invalid("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Invalid(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors: HashMap<String, Stored> = HashMap::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Invalid("tensor name is not UTF-8".into()))?;
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let stored = match dtype {
                0 => Stored::F32(
                    shape,
                    r.take(numel * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                ),
                1 => Stored::F64(
                    shape,
                    r.take(numel * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                ),
                d => return Err(Error::Invalid(format!("tensor '{name}': unknown dtype code {d}"))),
            };
            if tensors.insert(name.clone(), stored).is_some() {
                return Err(Error::Invalid(format!("tensor '{name}' appears twice")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Invalid(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let meta = |name: &str| {
            tensors
                .get(name)
                .map(Stored::to_f64)
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks '{name}'")))
        };
        let step = meta(META_STEP)?.first().copied().unwrap_or(0.0) as u64;
        let text: Vec<u8> = meta(META_CONFIG)?.iter().map(|&b| b as u8).collect();
        let text = String::from_utf8(text).map_err(|_| Error::Invalid("config echo is not UTF-8".into()))?;
        let cfg = ModelConfig::parse(&text)?;

        let shapes = ModelParams::shapes(&cfg);
        let expected = shapes.named().len() + 2;
        if tensors.len() != expected {
            return Err(Error::Invalid(format!(
                "checkpoint holds {} tensors, configuration needs {expected}",
                tensors.len()
            )));
        }
        let params = shapes.try_map(|name, shape| {
            let st = tensors
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks '{name}'")))?;
            if st.shape() != shape.as_slice() {
                return Err(Error::Parameter {
                    name: name.to_string(),
                    reason: format!("stored shape {:?}, expected {shape:?}", st.shape()),
                });
            }
            let data = match st {
                Stored::F32(_, v) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
                Stored::F64(_, v) => v.iter().map(|&x| T::from_f64(x)).collect(),
            };
            Tensor::new(shape, data)
        })?;
        Ok(Checkpoint { model: Model { cfg, params }, step })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Invalid("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint<T: Real>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
