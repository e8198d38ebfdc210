use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// AdamW hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 0.5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Moment buffers are allocated lazily on
/// the first step and matched to parameters by position.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `params` and `grads` are aligned by position.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor<T>)], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Invalid(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::Invalid("parameter list changed between steps".into()));
        }
        for ((name, p), (g, m)) in params.iter().zip(grads.iter().zip(&self.first)) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Parameter {
                    name: name.to_string(),
                    reason: format!("gradient shape {:?} does not match {:?}", g.shape(), p.shape()),
                });
            }
            if !g.is_finite() {
                return Err(Error::Parameter {
                    name: name.to_string(),
                    reason: "non-finite gradient".into(),
                });
            }
        }

        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let decay = T::from_f64(1.0 - c.lr * c.weight_decay);
        for (((_, p), g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (T::ONE - b1) * gi;
                let vi = b2 * v.data()[i] + (T::ONE - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi.to_f64() / bc1;
                let v_hat = vi.to_f64() / bc2;
                let update = c.lr * m_hat / (v_hat.sqrt() + c.eps);
                pd[i] = pd[i] * decay - T::from_f64(update);
            }
        }
        Ok(())
    }
}
