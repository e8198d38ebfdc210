use super::dct::{dct2, idct2, Plane};
use super::mask::{build_mask, Region, RegionMask};
use super::sobel::sobel_gradient_mean;
use super::CamConfig;
use crate::error::Result;
use crate::image::Image;
use crate::rng;

const CFE_STREAM: u64 = 0xCFE0;

/// Intermediate state of one extraction, exposed for inspection.
#[derive(Clone, Debug)]
pub struct CfeSpectra {
    pub gradient: f64,
    pub radii: [f64; 3],
    pub mask: RegionMask,
    /// Per-channel DCT of the input.
    pub input: Vec<Plane>,
    /// Per-channel spectrum after randomizing the non-causal regions.
    pub mixed: Vec<Plane>,
}

/// Gaussian stream for one channel of one extraction.
fn channel_key(seed: u64, channel: usize) -> u64 {
    rng::derive(rng::derive(seed, CFE_STREAM), channel as u64)
}

/// Runs the frequency-domain intervention up to (not including) the inverse
/// transform: causal coefficients pass unchanged, every other coefficient
/// `S` becomes `S · (1 + λ_region · n)` with `n ~ N(0, 1)`.
pub fn cfe_spectra(image: &Image, cfg: &CamConfig, seed: u64) -> Result<CfeSpectra> {
    cfg.validate()?;
    let gradient = sobel_gradient_mean(image, cfg.grad_norm_c)?;
    let radii = cfg.adapt_radii(gradient)?;
    let mask = build_mask(image.height, image.width, radii)?;
    let mut input = Vec::with_capacity(image.channels);
    let mut mixed = Vec::with_capacity(image.channels);
    for c in 0..image.channels {
        let spec = dct2(&Plane::new(image.height, image.width, image.channel(c))?)?;
        let key = channel_key(seed, c);
        let mut out = spec.clone();
        for (i, (s, &label)) in out.data.iter_mut().zip(&mask.labels).enumerate() {
            let scale = match label {
                Region::Causal => continue,
                Region::Low => cfg.noise_scale[0],
                Region::MidHigh => cfg.noise_scale[1],
                Region::High => cfg.noise_scale[2],
            };
            *s *= 1.0 + scale * rng::normal_at(key, i as u64);
        }
        input.push(spec);
        mixed.push(out);
    }
    Ok(CfeSpectra {
        gradient,
        radii,
        mask,
        input,
        mixed,
    })
}

/// Inverse transform of the mixed spectrum without clamping.
pub fn cfe_apply_unclamped(image: &Image, cfg: &CamConfig, seed: u64) -> Result<Image> {
    let spectra = cfe_spectra(image, cfg, seed)?;
    let mut out = image.clone();
    for (c, spec) in spectra.mixed.iter().enumerate() {
        out.set_channel(c, &idct2(spec)?.data);
    }
    Ok(out)
}

/// Causally enhanced image: intervention, inverse DCT, clamp to `[0, 1]`.
pub fn cfe_apply(image: &Image, cfg: &CamConfig, seed: u64) -> Result<Image> {
    let mut out = cfe_apply_unclamped(image, cfg, seed)?;
    out.clamp_unit();
    Ok(out)
}
