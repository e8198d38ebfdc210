//! im2col convolution kernels shared by the tape's conv op.

use super::tensor::Real;

/// Geometry of one 2-D convolution over a single C×H×W image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn cin_per_group(&self) -> usize {
        self.cin / self.groups
    }

    pub fn cout_per_group(&self) -> usize {
        self.cout / self.groups
    }

    /// Rows of the column matrix that belong to one group.
    fn col_rows_per_group(&self) -> usize {
        self.cin_per_group() * self.kh * self.kw
    }

    pub fn macs(&self) -> usize {
        self.cin_per_group() * self.kh * self.kw * self.cout * self.out_h() * self.out_w()
    }
}

/// Unfolds `x` into a `(cin·kh·kw) × (out_h·out_w)` matrix with zero padding.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let mut cols = vec![T::ZERO; g.cin * g.kh * g.kw * p];
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..oh {
                    let y = (oi * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let src = &plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for oj in 0..ow {
                        let xx = (oj * g.stride + kj) as isize - g.pad as isize;
                        if xx >= 0 && (xx as usize) < g.w {
                            dst[oi * ow + oj] = src[xx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..oh {
                    let y = (oi * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for oj in 0..ow {
                        let xx = (oj * g.stride + kj) as isize - g.pad as isize;
                        if xx >= 0 && (xx as usize) < g.w {
                            dst[xx as usize] += src[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. Returns the output and the column matrix.
pub fn conv_forward<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let cols = im2col(x, g);
    let p = g.out_h() * g.out_w();
    let (cog, rows) = (g.cout_per_group(), g.col_rows_per_group());
    let mut out = vec![T::ZERO; g.cout * p];
    for grp in 0..g.groups {
        T::gemm(
            cog,
            rows,
            p,
            &w[grp * cog * rows..(grp + 1) * cog * rows],
            false,
            &cols[grp * rows * p..(grp + 1) * rows * p],
            false,
            &mut out[grp * cog * p..(grp + 1) * cog * p],
            false,
        );
    }
    if let Some(b) = b {
        for (o, &bias) in out.chunks_mut(p).zip(b) {
            o.iter_mut().for_each(|v| *v += bias);
        }
    }
    (out, cols)
}

/// Gradient with respect to the weights, accumulated into `dw`.
pub fn conv_backward_weight<T: Real>(dy: &[T], cols: &[T], g: &ConvGeom, dw: &mut [T]) {
    let p = g.out_h() * g.out_w();
    let (cog, rows) = (g.cout_per_group(), g.col_rows_per_group());
    for grp in 0..g.groups {
        T::gemm(
            cog,
            p,
            rows,
            &dy[grp * cog * p..(grp + 1) * cog * p],
            false,
            &cols[grp * rows * p..(grp + 1) * rows * p],
            true,
            &mut dw[grp * cog * rows..(grp + 1) * cog * rows],
            true,
        );
    }
}

/// Gradient with respect to the input, accumulated into `dx`.
pub fn conv_backward_input<T: Real>(dy: &[T], w: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.out_h() * g.out_w();
    let (cog, rows) = (g.cout_per_group(), g.col_rows_per_group());
    let mut dcols = vec![T::ZERO; g.cin * g.kh * g.kw * p];
    for grp in 0..g.groups {
        T::gemm(
            rows,
            cog,
            p,
            &w[grp * cog * rows..(grp + 1) * cog * rows],
            true,
            &dy[grp * cog * p..(grp + 1) * cog * p],
            false,
            &mut dcols[grp * rows * p..(grp + 1) * rows * p],
            false,
        );
    }
    col2im(&dcols, g, dx);
}
