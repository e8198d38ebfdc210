use crate::error::{Error, Result};

/// Frequency region of a DCT coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Region {
    /// `[0, r1)`, contains DC.
    Low = 0,
    /// `[r1, r2)`, passed through untouched.
    Causal = 1,
    /// `[r2, r3)`.
    MidHigh = 2,
    /// `[r3, 1]`.
    High = 3,
}

/// Per-coefficient region labels of an H×W spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<Region>,
}

impl RegionMask {
    pub fn at(&self, u: usize, v: usize) -> Region {
        self.labels[u * self.width + v]
    }

    pub fn counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }
}

/// Normalized radial frequency of coefficient `(u, v)`: 0 at DC, 1 at the
/// far corner. Axes of length 1 contribute nothing.
pub fn normalized_radius(u: usize, v: usize, height: usize, width: usize) -> f64 {
    let axis = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    let (a, b) = (axis(u, height), axis(v, width));
    (a * a + b * b).sqrt() / std::f64::consts::SQRT_2
}

pub fn build_mask(height: usize, width: usize, radii: [f64; 3]) -> Result<RegionMask> {
    let [r1, r2, r3] = radii;
    if !(0.0 < r1 && r1 < r2 && r2 < r3 && r3 <= 1.0) {
        return Err(Error::Config(format!("mask radii {radii:?} must satisfy 0 < r1 < r2 < r3 <= 1")));
    }
    if height == 0 || width == 0 {
        return Err(Error::Invalid("empty mask".into()));
    }
    let mut labels = Vec::with_capacity(height * width);
    for u in 0..height {
        for v in 0..width {
            let rho = normalized_radius(u, v, height, width);
            labels.push(if rho < r1 {
                Region::Low
            } else if rho < r2 {
                Region::Causal
            } else if rho < r3 {
                Region::MidHigh
            } else {
                Region::High
            });
        }
    }
    Ok(RegionMask { height, width, labels })
}
