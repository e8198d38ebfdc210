//! Procedural paired scenes: a flat ground plane with roads and building
//! footprints, seen as an equirectangular street panorama and as an
//! orthographic aerial image.
//!
//! Layout (roads, buildings, ground color) comes from the geometry seed and
//! is the content shared by both views. Brightness, tint, sky and sensor
//! noise come from a separate style seed and touch only the street view, so
//! the same layout can be re-styled.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bev::{render_panorama, BevConfig, GroundTexture};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{derive, normal_at, uniform_at};

const STYLE_TAG: u64 = 0x5717_1E00;
const NOISE_TAG: u64 = 0x0015_E000;
const ROAD_COLOR: [f32; 3] = [0.24, 0.24, 0.26];
const ROOF_COLORS: [[f32; 3]; 3] = [[0.62, 0.30, 0.24], [0.66, 0.66, 0.68], [0.20, 0.30, 0.52]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub a: (f64, f64),
    pub b: (f64, f64),
    pub width: f64,
}

impl Road {
    /// Distance from `p` to the center line segment.
    pub fn distance(&self, p: (f64, f64)) -> f64 {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((p.0 - self.a.0) * dx + (p.1 - self.a.1) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (p.0 - self.a.0 - t * dx).hypot(p.1 - self.a.1 - t * dy)
    }

    pub fn covers(&self, p: (f64, f64)) -> bool {
        self.distance(p) <= 0.5 * self.width
    }
}

/// Axis-aligned footprint `[min, max]` in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub min: (f64, f64),
    pub max: (f64, f64),
    pub height_class: u8,
    pub color: [f32; 3],
}

impl Building {
    pub fn contains(&self, p: (f64, f64)) -> bool {
        (self.min.0..=self.max.0).contains(&p.0) && (self.min.1..=self.max.1).contains(&p.1)
    }

    fn overlaps(&self, other: &Building, margin: f64) -> bool {
        self.min.0 - margin < other.max.0
            && other.min.0 - margin < self.max.0
            && self.min.1 - margin < other.max.1
            && other.min.1 - margin < self.max.1
    }

    /// Whether any road strip (plus `margin`) touches the footprint.
    /// Sampled at 0.25 m along the boundary and interior.
    fn touches(&self, road: &Road, margin: f64) -> bool {
        let (w, h) = (self.max.0 - self.min.0, self.max.1 - self.min.1);
        let (nx, ny) = ((w / 0.25).ceil() as usize, (h / 0.25).ceil() as usize);
        (0..=nx).any(|i| {
            (0..=ny).any(|j| {
                let p = (self.min.0 + w * i as f64 / nx as f64, self.min.1 + h * j as f64 / ny as f64);
                road.distance(p) < 0.5 * road.width + margin
            })
        })
    }
}

/// Street-view confounders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Style {
    pub brightness: f64,
    pub tint: [f64; 3],
    pub noise_sigma: f64,
    pub sky_zenith: [f32; 3],
    pub sky_horizon: [f32; 3],
}

impl Style {
    /// No brightness offset, unit tint, no noise, fixed sky.
    pub fn neutral() -> Self {
        Style {
            brightness: 0.0,
            tint: [1.0; 3],
            noise_sigma: 0.0,
            sky_zenith: [0.45, 0.62, 0.85],
            sky_horizon: [0.80, 0.86, 0.92],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub geometry_seed: u64,
    pub style_seed: u64,
    pub roads: Vec<Road>,
    pub buildings: Vec<Building>,
    pub ground_color: [f32; 3],
    /// Mild per-scene tint of the aerial view, drawn from the geometry seed.
    pub aerial_tint: [f64; 3],
    pub style: Style,
}

/// Rendering sizes and scene scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub extent_m: f64,
    pub cam_height_m: f64,
    pub street_hw: (usize, usize),
    pub aerial_n: usize,
    pub bev_n: usize,
    /// Meters per texel of the ground raster used for the street view.
    pub texel_m: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            extent_m: 20.0,
            cam_height_m: 2.0,
            street_hw: (128, 256),
            aerial_n: 128,
            bev_n: 64,
            texel_m: 0.125,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.extent_m > 0.0 && self.cam_height_m > 0.0 && self.texel_m > 0.0) {
            return Err(Error::Config("scene extent, camera height and texel size must be positive".into()));
        }
        if self.street_hw.0 < 2 || self.street_hw.1 < 2 || self.aerial_n < 2 || self.bev_n < 2 {
            return Err(Error::Config("image sizes must be at least 2".into()));
        }
        Ok(())
    }

    /// Projection matching the street renderer.
    pub fn bev_config(&self) -> BevConfig {
        BevConfig {
            grid_n: self.bev_n,
            extent_m: self.extent_m,
            cam_height_m: self.cam_height_m,
            pano_h: self.street_hw.0,
            pano_w: self.street_hw.1,
            azimuth_offset_rad: 0.0,
        }
    }
}

fn uniform3(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

fn color3(rng: &mut ChaCha8Rng, base: [f32; 3], jitter: f32) -> [f32; 3] {
    base.map(|c| (c + rng.random_range(-jitter..=jitter)).clamp(0.0, 1.0))
}

/// Style seed paired with a geometry seed by default.
pub fn default_style_seed(geometry_seed: u64) -> u64 {
    derive(geometry_seed, STYLE_TAG)
}

pub fn generate_scene(seed: u64) -> SceneSpec {
    generate_scene_styled(seed, default_style_seed(seed))
}

/// Layout from `geometry_seed`, confounders from `style_seed`.
pub fn generate_scene_styled(geometry_seed: u64, style_seed: u64) -> SceneSpec {
    let extent = SynthConfig::default().extent_m;
    let mut rng = ChaCha8Rng::seed_from_u64(geometry_seed);
    let reach = 3.0 * extent;

    let n_roads = rng.random_range(2..=4);
    let mut roads = Vec::with_capacity(n_roads);
    // the through-road passes within 4 m of the camera
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let offset = rng.random_range(-4.0..4.0);
    let (dir, normal) = ((theta.cos(), theta.sin()), (-theta.sin(), theta.cos()));
    let mid = (offset * normal.0, offset * normal.1);
    roads.push(Road {
        a: (mid.0 - reach * dir.0, mid.1 - reach * dir.1),
        b: (mid.0 + reach * dir.0, mid.1 + reach * dir.1),
        width: rng.random_range(4.0..8.0),
    });
    while roads.len() < n_roads {
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let dir = (theta.cos(), theta.sin());
        let width = rng.random_range(3.0..7.0);
        if rng.random_bool(0.5) {
            // branch leaving a point on an existing road
            let base = &roads[rng.random_range(0..roads.len())];
            let t: f64 = rng.random_range(0.3..0.7);
            let start = (base.a.0 + t * (base.b.0 - base.a.0), base.a.1 + t * (base.b.1 - base.a.1));
            if start.0.abs() > extent || start.1.abs() > extent {
                continue;
            }
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            roads.push(Road {
                a: start,
                b: (start.0 + sign * reach * dir.0, start.1 + sign * reach * dir.1),
                width,
            });
        } else {
            let normal = (-dir.1, dir.0);
            let offset = rng.random_range(-extent..extent);
            let mid = (offset * normal.0, offset * normal.1);
            roads.push(Road {
                a: (mid.0 - reach * dir.0, mid.1 - reach * dir.1),
                b: (mid.0 + reach * dir.0, mid.1 + reach * dir.1),
                width,
            });
        }
    }

    let target = rng.random_range(3..=8);
    let mut buildings: Vec<Building> = Vec::with_capacity(target);
    let mut attempts = 0usize;
    while buildings.len() < target && attempts < 5000 {
        attempts += 1;
        // shrink footprints if the layout is crowded
        let max_side = if attempts < 400 { 10.0 } else { 4.0 };
        let (w, h) = (rng.random_range(3.0..max_side), rng.random_range(3.0..max_side));
        let c = (rng.random_range(-extent..extent), rng.random_range(-extent..extent));
        let class = rng.random_range(0..3u8);
        let b = Building {
            min: (c.0 - w / 2.0, c.1 - h / 2.0),
            max: (c.0 + w / 2.0, c.1 + h / 2.0),
            height_class: class,
            color: color3(&mut rng, ROOF_COLORS[class as usize], 0.05),
        };
        if roads.iter().any(|r| b.touches(r, 0.5)) || buildings.iter().any(|o| o.overlaps(&b, 1.0)) {
            continue;
        }
        buildings.push(b);
    }

    let ground_color = color3(&mut rng, [0.42, 0.52, 0.30], 0.08);
    let aerial_tint = uniform3(&mut rng, 0.97, 1.03);
    let style = sample_style(style_seed);
    SceneSpec {
        geometry_seed,
        style_seed,
        roads,
        buildings,
        ground_color,
        aerial_tint,
        style,
    }
}

fn sample_style(style_seed: u64) -> Style {
    let mut rng = ChaCha8Rng::seed_from_u64(style_seed);
    Style {
        brightness: rng.random_range(-0.2..=0.2),
        tint: uniform3(&mut rng, 0.9, 1.1),
        noise_sigma: rng.random_range(0.0..=0.05),
        sky_zenith: color3(&mut rng, [0.45, 0.62, 0.85], 0.1),
        sky_horizon: color3(&mut rng, [0.80, 0.86, 0.92], 0.08),
    }
}

impl SceneSpec {
    /// Ground color at a point: buildings over roads over the base color.
    pub fn ground_at(&self, p: (f64, f64)) -> [f32; 3] {
        if let Some(b) = self.buildings.iter().find(|b| b.contains(p)) {
            return b.color;
        }
        if self.roads.iter().any(|r| r.covers(p)) {
            return ROAD_COLOR;
        }
        self.ground_color
    }

    /// Orthographic top-down raster of `[-extent, extent]²` at `n × n`, 2×2
    /// supersampled; row 0 is `+y`.
    pub fn rasterize(&self, n: usize, extent: f64) -> Image {
        let step = 2.0 * extent / n as f64;
        let mut img = Image::filled(n, n, &[0.0; 3]);
        for i in 0..n {
            for j in 0..n {
                let mut acc = [0.0f32; 3];
                for (sy, sx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                    let x = (j as f64 + sx) * step - extent;
                    let y = extent - (i as f64 + sy) * step;
                    let c = self.ground_at((x, y));
                    (0..3).for_each(|k| acc[k] += 0.25 * c[k]);
                }
                (0..3).for_each(|k| img.set(i, j, k, acc[k]));
            }
        }
        img
    }

    /// Ground texture for the street renderer, covering twice the aerial
    /// extent so nearby roads continue past the aerial frame.
    pub fn ground_texture(&self, cfg: &SynthConfig) -> GroundTexture {
        let half = 2.0 * cfg.extent_m;
        let n = (2.0 * half / cfg.texel_m).round() as usize;
        GroundTexture {
            image: self.rasterize(n, half),
            half_extent_m: half,
            border: self.ground_color.to_vec(),
        }
    }
}

/// One rendered pair.
#[derive(Clone, Debug)]
pub struct PairSample {
    pub id: usize,
    pub street: Image,
    pub aerial: Image,
    /// Clean top-down raster at BEV size.
    pub bev_gt: Image,
    pub spec: SceneSpec,
}

/// Sky gradient from zenith to horizon plus the ground render, unstyled.
pub fn render_street_clean(spec: &SceneSpec, cfg: &SynthConfig) -> Result<Image> {
    let ground = spec.ground_texture(cfg);
    let bev = cfg.bev_config();
    let mut pano = render_panorama(&ground, &bev, &[0.0; 3])?;
    let (h, w) = cfg.street_hw;
    let half = h / 2;
    for r in 0..half {
        let t = (r as f32 + 0.5) / half as f32;
        for c in 0..w {
            for k in 0..3 {
                let v = spec.style.sky_zenith[k] * (1.0 - t) + spec.style.sky_horizon[k] * t;
                pano.set(r, c, k, v);
            }
        }
    }
    Ok(pano)
}

/// Applies tint, brightness and seeded sensor noise, then clamps.
pub fn apply_style(img: &Image, style: &Style, style_seed: u64) -> Image {
    let key = derive(style_seed, NOISE_TAG);
    let mut out = img.clone();
    let ch = img.channels;
    for (i, v) in out.data.iter_mut().enumerate() {
        let k = i % ch;
        let noise = if style.noise_sigma > 0.0 { style.noise_sigma * normal_at(key, i as u64) } else { 0.0 };
        *v = ((*v as f64) * style.tint[k % 3] + style.brightness + noise).clamp(0.0, 1.0) as f32;
    }
    out
}

pub fn render_pair(spec: &SceneSpec, cfg: &SynthConfig, id: usize) -> Result<PairSample> {
    cfg.validate()?;
    let clean = render_street_clean(spec, cfg)?;
    let street = apply_style(&clean, &spec.style, spec.style_seed);
    let mut aerial = spec.rasterize(cfg.aerial_n, cfg.extent_m);
    for (i, v) in aerial.data.iter_mut().enumerate() {
        *v = (*v as f64 * spec.aerial_tint[i % 3]).clamp(0.0, 1.0) as f32;
    }
    let bev_gt = spec.rasterize(cfg.bev_n, cfg.extent_m);
    Ok(PairSample {
        id,
        street,
        aerial,
        bev_gt,
        spec: spec.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Corruption {
    GaussianNoise,
    Brightness,
    Fog,
    Snow,
    MotionBlur,
}

impl Corruption {
    pub const ALL: [Corruption; 5] = [
        Corruption::GaussianNoise,
        Corruption::Brightness,
        Corruption::Fog,
        Corruption::Snow,
        Corruption::MotionBlur,
    ];
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Corruption::GaussianNoise => "gaussian_noise",
            Corruption::Brightness => "brightness",
            Corruption::Fog => "fog",
            Corruption::Snow => "snow",
            Corruption::MotionBlur => "motion_blur",
        })
    }
}

impl FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Corruption::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption '{s}'")))
    }
}

/// Horizontal box blur of odd length `len` with replicated edges.
fn box_blur_h(img: &Image, len: usize) -> Image {
    let r = (len / 2) as isize;
    let w = img.width as isize;
    Image::from_fn(img.height, img.width, img.channels, |y, x, c| {
        let s: f32 = (-r..=r).map(|d| img.at(y, (x as isize + d).clamp(0, w - 1) as usize, c)).sum();
        s / len as f32
    })
}

/// 3×3 binomial blur with replicated edges.
fn binomial_blur(img: &Image) -> Image {
    let (h, w) = (img.height as isize, img.width as isize);
    let k = [1.0f32, 2.0, 1.0];
    Image::from_fn(img.height, img.width, img.channels, |y, x, c| {
        let mut s = 0.0;
        for (dy, ky) in (-1..=1).zip(k) {
            for (dx, kx) in (-1..=1).zip(k) {
                let yy = (y as isize + dy).clamp(0, h - 1) as usize;
                let xx = (x as isize + dx).clamp(0, w - 1) as usize;
                s += ky * kx * img.at(yy, xx, c);
            }
        }
        s / 16.0
    })
}

/// Deterministic corruption at `severity ∈ 1..=5`.
pub fn corrupt(img: &Image, kind: Corruption, severity: u8, seed: u64) -> Result<Image> {
    if !(1..=5).contains(&severity) {
        return Err(Error::Invalid(format!("severity {severity} outside 1..=5")));
    }
    img.check_unit_range()?;
    let s = severity as f64;
    let ch = img.channels;
    let mut out = match kind {
        Corruption::GaussianNoise => {
            let sigma = 0.02 * s;
            let mut out = img.clone();
            for (i, v) in out.data.iter_mut().enumerate() {
                *v += (sigma * normal_at(seed, i as u64)) as f32;
            }
            out
        }
        Corruption::Brightness => {
            let mut out = img.clone();
            out.data.iter_mut().for_each(|v| *v += (0.1 * s) as f32);
            out
        }
        Corruption::Fog => {
            let a = (0.1 * s) as f32;
            let mut out = img.clone();
            out.data.iter_mut().for_each(|v| *v = (1.0 - a) * *v + a);
            out
        }
        Corruption::Snow => {
            // speckle sets are nested across severities: same draw, rising threshold
            let density = 0.01 * s;
            let mut out = img.clone();
            for p in 0..img.height * img.width {
                if uniform_at(seed, p as u64) < density {
                    out.data[p * ch..(p + 1) * ch].iter_mut().for_each(|v| *v = 1.0);
                }
            }
            binomial_blur(&out)
        }
        Corruption::MotionBlur => box_blur_h(img, 2 * severity as usize + 1),
    };
    out.clamp_unit();
    Ok(out)
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: usize,
    pub geometry_seed: u64,
    pub style_seed: u64,
    pub brightness: f64,
    pub tint: [f64; 3],
    pub noise_sigma: f64,
    pub roads: usize,
    pub buildings: usize,
}

pub const MANIFEST: &str = "manifest.jsonl";

/// Geometry seed of sample `index` in a dataset generated from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    derive(seed, index as u64)
}

pub fn sample_paths(dir: &Path, id: usize) -> [PathBuf; 3] {
    ["street", "aerial", "bev"].map(|k| dir.join(format!("{id:06}_{k}.png")))
}

/// Writes `count` pairs and the manifest into `dir`.
pub fn generate_dataset(dir: &Path, count: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<ManifestRecord>> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join(MANIFEST);
    let file = File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut out = BufWriter::new(file);
    let mut records = Vec::with_capacity(count);
    for id in 0..count {
        let spec = generate_scene(sample_seed(seed, id));
        let pair = render_pair(&spec, cfg, id)?;
        let [sp, ap, bp] = sample_paths(dir, id);
        pair.street.save_png(&sp)?;
        pair.aerial.save_png(&ap)?;
        pair.bev_gt.save_png(&bp)?;
        let rec = ManifestRecord {
            id,
            geometry_seed: spec.geometry_seed,
            style_seed: spec.style_seed,
            brightness: spec.style.brightness,
            tint: spec.style.tint,
            noise_sigma: spec.style.noise_sigma,
            roads: spec.roads.len(),
            buildings: spec.buildings.len(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Invalid(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(&manifest_path, e))?;
        records.push(rec);
    }
    out.flush().map_err(|e| Error::io(&manifest_path, e))?;
    Ok(records)
}

/// Parses a manifest and checks that every referenced image exists.
pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let path = dir.join(MANIFEST);
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.clone(),
            reason: format!("line {}: {e}", n + 1),
        })?;
        for p in sample_paths(dir, rec.id) {
            if !p.is_file() {
                return Err(Error::Format {
                    path: path.clone(),
                    reason: format!("sample {} is missing {}", rec.id, p.display()),
                });
            }
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::Format {
            path,
            reason: "manifest lists no samples".into(),
        });
    }
    Ok(records)
}
