//! Interleaved float images and 8-bit PNG interchange.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

/// Row-major H×W×C image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height * width * channels != data.len() || height == 0 || width == 0 || channels == 0 {
            return Err(Error::Invalid(format!(
                "image {height}x{width}x{channels} with {} values",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, color: &[f32]) -> Self {
        let data = (0..height * width).flat_map(|_| color.iter().copied()).collect();
        Image {
            height,
            width,
            channels: color.len(),
            data,
        }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Image {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Extracts one channel as an H×W plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(self.channels).map(|&v| v as f64).collect()
    }

    pub fn set_channel(&mut self, c: usize, plane: &[f64]) {
        for (i, &v) in plane.iter().enumerate() {
            self.data[i * self.channels + c] = v as f32;
        }
    }

    pub fn check_unit_range(&self) -> Result<()> {
        match self.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            Some(v) => Err(Error::Invalid(format!("pixel value {v} outside [0, 1]"))),
            None => Ok(()),
        }
    }

    pub fn clamp_unit(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.dims(), other.dims());
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs() as f64).sum();
        s / self.data.len() as f64
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers sit at
    /// `+0.5`). Rows clamp at the border; columns wrap when `wrap_x`.
    pub fn sample_bilinear(&self, u: f64, v: f64, wrap_x: bool, out: &mut [f32]) {
        let fx = u - 0.5;
        let fy = (v - 0.5).clamp(0.0, (self.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let ty = (fy - y0 as f64) as f32;
        let (x0, x1, tx) = if wrap_x {
            let w = self.width as f64;
            let fx = fx.rem_euclid(w);
            let x0 = (fx.floor() as usize).min(self.width - 1);
            (x0, (x0 + 1) % self.width, (fx - x0 as f64) as f32)
        } else {
            let fx = fx.clamp(0.0, (self.width - 1) as f64);
            let x0 = fx.floor() as usize;
            (x0, (x0 + 1).min(self.width - 1), (fx - x0 as f64) as f32)
        };
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            let a = self.at(y0, x0, c) * (1.0 - tx) + self.at(y0, x1, c) * tx;
            let b = self.at(y1, x0, c) * (1.0 - tx) + self.at(y1, x1, c) * tx;
            *o = a * (1.0 - ty) + b * ty;
        }
    }

    /// Resamples to `height × width`: block averaging when both factors are
    /// integral shrinks, bilinear otherwise.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        if self.height % height == 0 && self.width % width == 0 {
            let (fy, fx) = (self.height / height, self.width / width);
            let norm = 1.0 / (fy * fx) as f32;
            return Image::from_fn(height, width, self.channels, |y, x, c| {
                let mut s = 0.0;
                for dy in 0..fy {
                    for dx in 0..fx {
                        s += self.at(y * fy + dy, x * fx + dx, c);
                    }
                }
                s * norm
            });
        }
        let mut px = vec![0.0; self.channels];
        let (sy, sx) = (self.height as f64 / height as f64, self.width as f64 / width as f64);
        let mut out = Image::filled(height, width, &vec![0.0; self.channels]);
        for y in 0..height {
            for x in 0..width {
                self.sample_bilinear((x as f64 + 0.5) * sx, (y as f64 + 0.5) * sy, false, &mut px);
                for c in 0..self.channels {
                    out.set(y, x, c, px[c]);
                }
            }
        }
        out
    }

    /// Rotates a square image 90° clockwise as displayed (row 0 on top).
    pub fn rotate90_cw(&self) -> Image {
        let n = self.height;
        assert_eq!(n, self.width, "rotation needs a square image");
        Image::from_fn(n, n, self.channels, |i, j, c| self.at(n - 1 - j, i, c))
    }

    /// Cyclic shift of the columns by `k` to the right.
    pub fn shift_columns(&self, k: usize) -> Image {
        let w = self.width;
        Image::from_fn(self.height, w, self.channels, |y, x, c| self.at(y, (x + w - k % w) % w, c))
    }

    /// C×H×W tensor view of the image.
    pub fn to_chw<T: Real>(&self) -> Tensor<T> {
        let (h, w, c) = self.dims();
        Tensor::from_fn(&[c, h, w], |i| {
            let (ch, rest) = (i / (h * w), i % (h * w));
            T::from_f64(self.data[rest * c + ch] as f64)
        })
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let fmt = |e: png::DecodingError| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        };
        let mut reader = decoder.read_info().map_err(fmt)?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(fmt)?;
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Indexed => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: "unexpanded palette image".into(),
                })
            }
        };
        let (w, h) = (info.width as usize, info.height as usize);
        let bytes = &buf[..info.buffer_size()];
        // Alpha is dropped; the pipeline works on opaque images.
        let keep = if channels == 2 || channels == 4 { channels - 1 } else { channels };
        let data = bytes
            .chunks(channels)
            .flat_map(|px| px[..keep].iter().map(|&b| b as f32 / 255.0))
            .collect();
        Image::new(h, w, keep, data)
    }

    /// Writes an 8-bit PNG (gray or RGB), rounding to the nearest level.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            c => return Err(Error::Invalid(format!("cannot write a {c}-channel PNG"))),
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        let fmt = |e: png::EncodingError| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        };
        let mut writer = encoder.write_header().map_err(fmt)?;
        writer.write_image_data(&self.to_bytes()).map_err(fmt)?;
        writer.finish().map_err(fmt)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }
}
