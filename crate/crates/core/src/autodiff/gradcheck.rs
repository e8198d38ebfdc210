//! Central finite-difference gradient checking at 64-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

/// How random inputs are drawn for [`grad_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InputDist {
    /// Standard normal.
    Normal,
    /// Uniform on `[lo, hi)`.
    Uniform(f64, f64),
}

/// Relative error used throughout: `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Draws inputs of the given shapes and checks the graph built by `build`.
pub fn grad_check<F>(build: F, shapes: &[&[usize]], dist: InputDist, seed: u64) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = shapes
        .iter()
        .map(|s| {
            Tensor::from_fn(s, |_| match dist {
                InputDist::Normal => normal(&mut rng),
                InputDist::Uniform(lo, hi) => rng.random_range(lo..hi),
            })
        })
        .collect();
    grad_check_at(build, &inputs)
}

/// Max relative error between backward and central differences over every
/// coordinate of every input.
pub fn grad_check_at<F>(build: F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.leaf(t.clone())).collect::<Result<Vec<_>>>()?;
    let root = build(&tape, &vars)?;
    let shape = tape.shape(root);
    if shape.iter().product::<usize>() != 1 {
        return Err(Error::NonScalarRoot(shape));
    }
    tape.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars = inputs.iter().map(|t| tape.constant(t.clone())).collect::<Result<Vec<_>>>()?;
        let root = build(&tape, &vars)?;
        Ok(tape.value(root).item())
    };

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..grad.numel() {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + FD_STEP;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - FD_STEP;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}

pub(crate) fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
