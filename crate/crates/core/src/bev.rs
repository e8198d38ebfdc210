//! Ground-plane geometry between equirectangular panoramas and a
//! bird's-eye-view grid.
//!
//! Conventions: ground `x` points right and `y` forward; azimuth is measured
//! from `+y` towards `+x`; panorama column 0 sits at azimuth
//! `azimuth_offset_rad`; row 0 is the zenith and the last row the nadir, so
//! the horizon is the middle row. Pixel centers are at half-integer
//! coordinates.

use std::f64::consts::{PI, TAU};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevConfig {
    pub grid_n: usize,
    /// Half-width of the covered ground square, meters.
    pub extent_m: f64,
    pub cam_height_m: f64,
    pub pano_h: usize,
    pub pano_w: usize,
    pub azimuth_offset_rad: f64,
}

impl Default for BevConfig {
    fn default() -> Self {
        BevConfig {
            grid_n: 128,
            extent_m: 20.0,
            cam_height_m: 2.0,
            pano_h: 256,
            pano_w: 512,
            azimuth_offset_rad: 0.0,
        }
    }
}

impl BevConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_n < 2 {
            return Err(Error::Config(format!("BEV grid {} must be at least 2", self.grid_n)));
        }
        if !(self.extent_m > 0.0) || !(self.cam_height_m > 0.0) {
            return Err(Error::Config("BEV extent and camera height must be positive".into()));
        }
        if self.pano_h == 0 || self.pano_w == 0 {
            return Err(Error::Config("empty panorama dimensions".into()));
        }
        if !(0.0..TAU).contains(&self.azimuth_offset_rad) {
            return Err(Error::Config(format!(
                "azimuth offset {} outside [0, 2pi)",
                self.azimuth_offset_rad
            )));
        }
        Ok(())
    }

    /// Ground coordinates of the center of BEV cell `(row, col)`; row 0 is
    /// the farthest forward.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let step = 2.0 * self.extent_m / self.grid_n as f64;
        let x = (col as f64 + 0.5) * step - self.extent_m;
        let y = self.extent_m - (row as f64 + 0.5) * step;
        (x, y)
    }
}

/// Continuous panorama coordinates `(u, v)` of the ground point `(x, y)`.
pub fn bev_lookup(x_m: f64, y_m: f64, cfg: &BevConfig) -> Result<(f64, f64)> {
    if x_m == 0.0 && y_m == 0.0 {
        return Err(Error::Invalid("ground point at the camera foot has no azimuth".into()));
    }
    let theta = (x_m.atan2(y_m) + cfg.azimuth_offset_rad).rem_euclid(TAU);
    let phi = -(cfg.cam_height_m / x_m.hypot(y_m)).atan();
    let u = theta / TAU * cfg.pano_w as f64;
    let v = (0.5 - phi / PI) * cfg.pano_h as f64;
    Ok((u, v))
}

fn check_pano(pano: &Image, cfg: &BevConfig) -> Result<()> {
    if pano.height != cfg.pano_h || pano.width != cfg.pano_w {
        return Err(Error::Config(format!(
            "panorama is {}x{} but the projection expects {}x{}",
            pano.height, pano.width, cfg.pano_h, cfg.pano_w
        )));
    }
    Ok(())
}

/// Back-projects a panorama onto the ground grid.
pub fn panorama_to_bev(pano: &Image, cfg: &BevConfig) -> Result<Image> {
    cfg.validate()?;
    check_pano(pano, cfg)?;
    let n = cfg.grid_n;
    let ch = pano.channels;
    let mut nadir = vec![0.0f32; ch];
    let last = pano.height - 1;
    for x in 0..pano.width {
        for (c, acc) in nadir.iter_mut().enumerate() {
            *acc += pano.at(last, x, c) / pano.width as f32;
        }
    }
    let mut out = Image::filled(n, n, &vec![0.0; ch]);
    let mut px = vec![0.0f32; ch];
    for i in 0..n {
        for j in 0..n {
            let (x, y) = cfg.cell_center(i, j);
            if x == 0.0 && y == 0.0 {
                px.copy_from_slice(&nadir);
            } else {
                let (u, v) = bev_lookup(x, y, cfg)?;
                pano.sample_bilinear(u, v, true, &mut px);
            }
            for (c, &p) in px.iter().enumerate() {
                out.set(i, j, c, p);
            }
        }
    }
    Ok(out)
}

/// Raster ground texture covering `[-half_extent_m, half_extent_m]²`, row 0
/// at `+y`, column 0 at `-x`. Outside the square it reads `border`.
#[derive(Clone, Debug)]
pub struct GroundTexture {
    pub image: Image,
    pub half_extent_m: f64,
    pub border: Vec<f32>,
}

impl GroundTexture {
    pub fn sample(&self, x_m: f64, y_m: f64, out: &mut [f32]) {
        let e = self.half_extent_m;
        if x_m.abs() > e || y_m.abs() > e {
            out.copy_from_slice(&self.border);
            return;
        }
        let u = (x_m + e) / (2.0 * e) * self.image.width as f64;
        let v = (e - y_m) / (2.0 * e) * self.image.height as f64;
        self.image.sample_bilinear(u, v, false, out);
    }
}

/// Ray-casts a panorama from a camera at `cam_height_m` above the textured
/// ground plane. Rows at or above the horizon are `sky`.
pub fn render_panorama(ground: &GroundTexture, cfg: &BevConfig, sky: &[f32]) -> Result<Image> {
    cfg.validate()?;
    let ch = ground.image.channels;
    if sky.len() != ch || ground.border.len() != ch {
        return Err(Error::Invalid("sky, border and texture channel counts differ".into()));
    }
    let (h, w) = (cfg.pano_h, cfg.pano_w);
    let far = 20.0 * cfg.extent_m;
    let mut out = Image::filled(h, w, sky);
    let mut px = vec![0.0f32; ch];
    // column directions are shared by every row
    let dirs: Vec<(f64, f64)> = (0..w)
        .map(|c| {
            let az = (c as f64 + 0.5) / w as f64 * TAU - cfg.azimuth_offset_rad;
            (az.sin(), az.cos())
        })
        .collect();
    for r in 0..h {
        let phi = (0.5 - (r as f64 + 0.5) / h as f64) * PI;
        if phi >= 0.0 {
            continue;
        }
        let dist = cfg.cam_height_m / (-phi).tan();
        for (c, &(sx, cy)) in dirs.iter().enumerate() {
            if dist > far {
                px.copy_from_slice(&ground.border);
            } else {
                ground.sample(dist * sx, dist * cy, &mut px);
            }
            for (k, &p) in px.iter().enumerate() {
                out.set(r, c, k, p);
            }
        }
    }
    Ok(out)
}
