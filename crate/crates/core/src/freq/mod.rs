//! Causal feature extraction in the DCT domain.
//!
//! Three concentric radii split the spectrum into four regions. The band
//! `[r1, r2)` carries the structural (causal) content and passes through;
//! the other three are multiplicatively randomized. The radii grow linearly
//! with the image's mean Sobel gradient so that textured images keep a wider
//! causal band.

pub mod cfe;
pub mod dct;
pub mod mask;
pub mod sobel;

pub use cfe::{cfe_apply, cfe_apply_unclamped, cfe_spectra, CfeSpectra};
pub use dct::{dct2, idct2, Plane};
pub use mask::{build_mask, normalized_radius, Region, RegionMask};
pub use sobel::{luminance, sobel, sobel_gradient_mean};

use crate::error::{Error, Result};

/// Content-aware mask configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CamConfig {
    /// Initial radii `(r1, r2, r3)` in normalized radial frequency.
    pub r_init: [f64; 3],
    /// Radius growth per unit of normalized gradient.
    pub kappa: f64,
    /// Mean gradient magnitude that maps to 1.
    pub grad_norm_c: f64,
    /// Perturbation scales for the low, mid-high and high regions.
    pub noise_scale: [f64; 3],
    pub r_max: f64,
}

impl Default for CamConfig {
    fn default() -> Self {
        CamConfig {
            r_init: [0.1, 0.3, 0.6],
            kappa: 0.5,
            grad_norm_c: 0.5,
            noise_scale: [1.0, 0.5, 1.0],
            r_max: 0.95,
        }
    }
}

impl CamConfig {
    pub fn validate(&self) -> Result<()> {
        let [r1, r2, r3] = self.r_init;
        if !(0.0 < r1 && r1 < r2 && r2 < r3 && r3 <= self.r_max && self.r_max <= 1.0) {
            return Err(Error::Config(format!(
                "radii {:?} with r_max {} must satisfy 0 < r1 < r2 < r3 <= r_max <= 1",
                self.r_init, self.r_max
            )));
        }
        if !(self.kappa >= 0.0) || self.noise_scale.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("kappa and noise scales must be non-negative".into()));
        }
        if !(self.grad_norm_c > 0.0) {
            return Err(Error::Config("gradient normalization must be positive".into()));
        }
        Ok(())
    }

    /// `r_i' = min(r_i (1 + kappa g), r_max)`.
    ///
    /// Clamping can make two radii coincide; in that case the outer one is
    /// nudged to the next representable value above so the regions stay
    /// ordered (the later region is then empty in practice).
    pub fn adapt_radii(&self, gradient: f64) -> Result<[f64; 3]> {
        self.validate()?;
        if !(0.0..=1.0).contains(&gradient) {
            return Err(Error::Invalid(format!("normalized gradient {gradient} outside [0, 1]")));
        }
        let grow = 1.0 + self.kappa * gradient;
        let mut r = self.r_init.map(|r| (r * grow).min(self.r_max));
        for i in 1..3 {
            if r[i] <= r[i - 1] {
                r[i] = next_up(r[i - 1]);
            }
        }
        Ok(r)
    }
}

fn next_up(x: f64) -> f64 {
    f64::from_bits(x.to_bits() + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: [f64; 3], b: [f64; 3]) -> bool {
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn zero_gradient_keeps_initial_radii() {
        assert_eq!(CamConfig::default().adapt_radii(0.0).unwrap(), [0.1, 0.3, 0.6]);
    }

    #[test]
    fn full_gradient_growth() {
        let cfg = CamConfig::default();
        assert!(close(cfg.adapt_radii(1.0).unwrap(), [0.15, 0.45, 0.90]));
        let cfg = CamConfig {
            kappa: 2.0,
            ..Default::default()
        };
        assert!(close(cfg.adapt_radii(1.0).unwrap(), [0.3, 0.9, 0.95]));
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = CamConfig {
            r_init: [0.3, 0.2, 0.6],
            ..Default::default()
        };
        assert!(bad.adapt_radii(0.0).is_err());
        let bad = CamConfig {
            kappa: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(CamConfig::default().adapt_radii(1.5).is_err());
    }

    proptest! {
        #[test]
        fn adaptation_is_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0, kappa in 0.0f64..4.0) {
            let cfg = CamConfig { kappa, ..Default::default() };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (ra, rb) = (cfg.adapt_radii(lo).unwrap(), cfg.adapt_radii(hi).unwrap());
            for i in 0..3 {
                prop_assert!(ra[i] <= rb[i]);
            }
            // the causal band can only narrow once r2 hits the clamp
            if cfg.r_init[1] * (1.0 + kappa) <= cfg.r_max {
                prop_assert!(ra[1] - ra[0] <= rb[1] - rb[0] + 1e-15);
            }
            prop_assert!(0.0 < rb[0] && rb[0] < rb[1] && rb[1] < rb[2] && rb[2] <= cfg.r_max + 1e-15);
        }
    }
}
