pub mod autodiff;
pub mod error;

pub use autodiff::{AdamW, AdamWConfig, DType, Real, Tape, Tensor, Var};
pub use error::{Error, Result};
pub mod bev;
pub mod config;
pub mod freq;
pub mod fusion;
pub mod gradsuite;
pub mod image;
pub mod objective;
pub mod params;
pub mod pipeline;
pub mod pool;
pub mod rng;
pub mod synth;
