//! Orthonormal separable 2-D DCT-II and its inverse.

use crate::autodiff::Real;
use crate::error::{Error, Result};

/// An H×W plane of 64-bit values (pixels or DCT coefficients, DC at (0,0)).
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Invalid("empty plane".into()));
        }
        if data.len() != height * width {
            return Err(Error::shape("plane", &[height, width], &[data.len()]));
        }
        Ok(Plane { height, width, data })
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.data[u * self.width + v]
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Orthonormal DCT-II basis as an N×N row-major matrix: row k holds
/// `a(k) cos(pi (2n + 1) k / 2N)`.
pub fn dct_matrix(n: usize) -> Vec<f64> {
    let nf = n as f64;
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let a = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        for i in 0..n {
            m[k * n + i] = a * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2.0 * nf)).cos();
        }
    }
    m
}

fn separable(plane: &Plane, inverse: bool) -> Result<Plane> {
    let (h, w) = (plane.height, plane.width);
    if h == 0 || w == 0 || plane.data.len() != h * w {
        return Err(Error::Invalid("empty plane".into()));
    }
    if plane.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "dct2" });
    }
    let (ch, cw) = (dct_matrix(h), dct_matrix(w));
    // forward: C_h · X · C_wᵀ ; inverse: C_hᵀ · X · C_w
    let mut tmp = vec![0.0; h * w];
    f64::gemm(h, h, w, &ch, inverse, &plane.data, false, &mut tmp, false);
    let mut out = vec![0.0; h * w];
    f64::gemm(h, w, w, &tmp, false, &cw, !inverse, &mut out, false);
    Plane::new(h, w, out)
}

pub fn dct2(plane: &Plane) -> Result<Plane> {
    separable(plane, false)
}

pub fn idct2(spectrum: &Plane) -> Result<Plane> {
    separable(spectrum, true)
}
