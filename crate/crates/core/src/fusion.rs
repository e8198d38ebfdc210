//! Geometric topology fusion: street features attend to BEV features.
//!
//! Both streams first pass a residual depthwise projection. Tokens are
//! reduced by an overlapping strided conv (kernel 3, stride 2) plus a
//! stride-2 subsampled skip, layer-normalized and projected per head. The
//! attended output is upsampled back and merged with the street stream by a
//! dual dynamic gate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{orthogonal_init, param_struct};

const LN_EPS: f64 = 1e-5;

param_struct! {
    /// Learned parameters of one fusion block.
    pub struct FusionParams {
        dw_s_w, dw_s_b, dw_b_w, dw_b_b,
        osr_q_w, osr_q_b, osr_kv_w, osr_kv_b,
        ln_q_g, ln_q_b, ln_kv_g, ln_kv_b,
        /// `[C, C]`; head `h` owns columns `h·d .. (h+1)·d`.
        wq, wk, wv, wo,
        /// `[heads, (2·rh−1)·(2·rw−1)]` over relative offsets of the reduced grid.
        bias_table,
        ddf_gamma_w, ddf_gamma_b, ddf_adapt_w, ddf_adapt_b, ddf_fuse_w, ddf_fuse_b,
    }
}

/// Initial bias at zero relative offset; `e^6 ≈ 400` times the weight of
/// any other key.
const ALIGNED_BIAS: f64 = 6.0;

/// Static geometry of a fusion block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionConfig {
    pub channels: usize,
    pub heads: usize,
    /// Spatial size of the feature maps entering the block.
    pub feature_hw: (usize, usize),
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads must divide {} channels",
                self.heads, self.channels
            )));
        }
        if self.feature_hw.0 < 2 || self.feature_hw.1 < 2 {
            return Err(Error::Config(format!("feature map {:?} too small to reduce", self.feature_hw)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Token grid after the stride-2 reduction.
    pub fn reduced_hw(&self) -> (usize, usize) {
        (self.feature_hw.0.div_ceil(2), self.feature_hw.1.div_ceil(2))
    }

    pub fn bias_len(&self) -> usize {
        let (rh, rw) = self.reduced_hw();
        (2 * rh - 1) * (2 * rw - 1)
    }

    pub fn shapes(&self) -> FusionParams<Vec<usize>> {
        let c = self.channels;
        FusionParams {
            dw_s_w: vec![c, 1, 3, 3],
            dw_s_b: vec![c],
            dw_b_w: vec![c, 1, 3, 3],
            dw_b_b: vec![c],
            osr_q_w: vec![c, c, 3, 3],
            osr_q_b: vec![c],
            osr_kv_w: vec![c, c, 3, 3],
            osr_kv_b: vec![c],
            ln_q_g: vec![c],
            ln_q_b: vec![c],
            ln_kv_g: vec![c],
            ln_kv_b: vec![c],
            wq: vec![c, c],
            wk: vec![c, c],
            wv: vec![c, c],
            wo: vec![c, c],
            bias_table: vec![self.heads, self.bias_len()],
            ddf_gamma_w: vec![c, c],
            ddf_gamma_b: vec![c],
            ddf_adapt_w: vec![c, c, 1, 1],
            ddf_adapt_b: vec![c],
            ddf_fuse_w: vec![c, 2 * c, 3, 3],
            ddf_fuse_b: vec![c],
        }
    }

    /// Geometry-start initialization: the block begins as
    /// `Xs + DDF(Xs, Z)` with `Z` the layer-normed BEV feature at the same
    /// grid position. Depthwise and OSR convs are zero, so tokens are plain
    /// subsamples; each head's bias table peaks at zero offset; `wv` and
    /// `wo` are identities and `wq`, `wk` small orthogonal maps; the fusion
    /// conv passes the geometry half through its centre tap. DDF linears are
    /// Gaussian with variance `1/C`.
    pub fn init<T: Real>(&self, seed: u64) -> Result<FusionParams<Tensor<T>>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = self.channels;
        let (rh, rw) = self.reduced_hw();
        let centre = (rh - 1) * (2 * rw - 1) + rw - 1;
        let slots = self.bias_len();
        self.shapes().try_map(|name, shape| {
            Ok::<_, Error>(match name {
                "ln_q_g" | "ln_kv_g" => Tensor::ones(shape),
                "wq" | "wk" => orthogonal_init(c, c, 0.02, &mut rng),
                "wv" | "wo" => Tensor::from_fn(shape, |i| if i / c == i % c { T::ONE } else { T::ZERO }),
                "bias_table" => Tensor::from_fn(shape, |i| {
                    if i % slots == centre {
                        T::from_f64(ALIGNED_BIAS)
                    } else {
                        T::ZERO
                    }
                }),
                "ddf_fuse_w" => Tensor::from_fn(shape, |i| {
                    let (o, ci, k) = (i / (2 * c * 9), (i / 9) % (2 * c), i % 9);
                    if k == 4 && ci == c + o {
                        T::ONE
                    } else {
                        T::ZERO
                    }
                }),
                "ddf_gamma_w" | "ddf_adapt_w" => crate::params::normal_init(shape, (1.0 / c as f64).sqrt(), &mut rng),
                _ => Tensor::zeros(shape),
            })
        })
    }

    pub fn param_count(&self) -> usize {
        self.shapes().fields().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// `X + depthwise3x3(X)`.
pub fn dw_proj<T: Real>(tape: &Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let c = tape.shape(x)[0];
    let ws = tape.shape(w);
    if ws != [c, 1, 3, 3] {
        return Err(Error::shape("dw_proj", &tape.shape(x), &ws));
    }
    let y = tape.conv2d(x, w, Some(b), 1, 1, c)?;
    tape.add(x, y)
}

/// Overlapping reduction: conv(k3, s2, p1), channel preserving.
pub fn osr<T: Real>(tape: &Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() != 3 || s[1] < 2 || s[2] < 2 {
        return Err(Error::Invalid(format!("reduction needs a C×H×W map with H, W >= 2, got {s:?}")));
    }
    tape.conv2d(x, w, Some(b), 2, 1, 1)
}

/// Stride-2 subsampling `X[:, ::2, ::2]`, expressed as an identity 1×1
/// depthwise conv so it stays inside the op set.
pub fn subsample2<T: Real>(tape: &Tape<T>, x: Var) -> Result<Var> {
    let c = tape.shape(x)[0];
    let ones = tape.constant(Tensor::ones(&[c, 1, 1, 1]))?;
    tape.conv2d(x, ones, None, 2, 0, c)
}

/// `C×H×W -> [H·W, C]` token matrix.
fn to_tokens<T: Real>(tape: &Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    let m = tape.reshape(x, &[s[0], s[1] * s[2]])?;
    tape.transpose(m)
}

/// Layer norm over channels followed by the affine map.
fn ln_affine<T: Real>(tape: &Tape<T>, tokens: Var, g: Var, b: Var) -> Result<Var> {
    let n = tape.layer_norm(tokens, LN_EPS)?;
    let n = tape.mul(n, g)?;
    tape.add(n, b)
}

/// Tokens of `LN(OSR(X) + subsample(X))`.
pub fn reduce_tokens<T: Real>(tape: &Tape<T>, x: Var, w: Var, b: Var, ln_g: Var, ln_b: Var) -> Result<Var> {
    let r = osr(tape, x, w, b)?;
    let skip = subsample2(tape, x)?;
    let r = tape.add(r, skip)?;
    let t = to_tokens(tape, r)?;
    ln_affine(tape, t, ln_g, ln_b)
}

/// `softmax(Q Kᵀ / √d + B) V` for one head: `q [Tq,d]`, `k, v [Tk,d]`,
/// `bias [Tq,Tk]`.
pub fn attend<T: Real>(tape: &Tape<T>, q: Var, k: Var, v: Var, bias: Var) -> Result<Var> {
    let a = attention_weights(tape, q, k, bias)?;
    tape.matmul(a, v)
}

/// The softmax weights `[Tq, Tk]` of one head.
pub fn attention_weights<T: Real>(tape: &Tape<T>, q: Var, k: Var, bias: Var) -> Result<Var> {
    let d = tape.shape(q)[1];
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.mul_scalar(logits, 1.0 / (d as f64).sqrt())?;
    let bs = tape.shape(bias);
    if bs != tape.shape(logits) {
        return Err(Error::shape("attention bias", &tape.shape(logits), &bs));
    }
    let logits = tape.add(logits, bias)?;
    tape.softmax(logits)
}

/// One-hot map `[R, Tq·Tk]` from bias-table slots to (query, key) pairs of
/// two `grid` token grids, for a table built over a `table` grid.
pub fn relative_index_matrix<T: Real>(grid: (usize, usize), table: (usize, usize)) -> Tensor<T> {
    let ((rh, rw), (th, tw)) = (grid, table);
    let t = rh * rw;
    let cols = 2 * tw - 1;
    let slots = (2 * th - 1) * cols;
    let mut m = Tensor::zeros(&[slots, t * t]);
    for qi in 0..t {
        for ki in 0..t {
            let dr = (qi / rw) as isize - (ki / rw) as isize + th as isize - 1;
            let dc = (qi % rw) as isize - (ki % rw) as isize + tw as isize - 1;
            let slot = dr as usize * cols + dc as usize;
            m.data_mut()[slot * t * t + qi * t + ki] = T::ONE;
        }
    }
    m
}

/// Column selector `[n, width]` picking columns `start .. start+width`.
fn column_selector<T: Real>(n: usize, start: usize, width: usize) -> Tensor<T> {
    Tensor::from_fn(&[n, width], |i| if i / width == start + i % width { T::ONE } else { T::ZERO })
}

/// Row selector `[1, n]` picking row `r`.
fn row_selector<T: Real>(n: usize, r: usize) -> Tensor<T> {
    Tensor::from_fn(&[1, n], |i| if i == r { T::ONE } else { T::ZERO })
}

/// 1-D linear interpolation weights `[n_in, n_out]` with half-pixel centers
/// (align-corners off) and edge clamping.
fn interp_1d(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_in * n_out];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        let t = src - i0 as f64;
        m[i0 * n_out + o] += 1.0 - t;
        m[i1 * n_out + o] += t;
    }
    m
}

/// Bilinear upsampling matrix `[h·w, H·W]` so that `X [C, h·w] · U` is the
/// resized `C × H·W` map.
pub fn upsample_matrix<T: Real>(from: (usize, usize), to: (usize, usize)) -> Tensor<T> {
    let my = interp_1d(from.0, to.0);
    let mx = interp_1d(from.1, to.1);
    let (tw, th) = (to.1, to.0);
    Tensor::from_fn(&[from.0 * from.1, th * tw], |i| {
        let (src, dst) = (i / (th * tw), i % (th * tw));
        let (sy, sx) = (src / from.1, src % from.1);
        let (dy, dx) = (dst / tw, dst % tw);
        T::from_f64(my[sy * th + dy] * mx[sx * tw + dx])
    })
}

/// Multi-head cross-attention with street queries and BEV keys/values,
/// returning a map of the street input's shape.
pub fn cross_attention<T: Real>(
    tape: &Tape<T>,
    xs: Var,
    xb: Var,
    p: &FusionParams<Var>,
    cfg: &FusionConfig,
) -> Result<Var> {
    let (ss, sb) = (tape.shape(xs), tape.shape(xb));
    if ss.len() != 3 || ss != sb || ss[0] != cfg.channels {
        return Err(Error::shape("cross_attention", &ss, &sb));
    }
    let (h, w) = (ss[1], ss[2]);
    if h > cfg.feature_hw.0 || w > cfg.feature_hw.1 {
        return Err(Error::Invalid(format!(
            "bias table built for {:?} features cannot cover {h}x{w}",
            cfg.feature_hw
        )));
    }
    let (rh, rw) = (h.div_ceil(2), w.div_ceil(2));
    let tq = reduce_tokens(tape, xs, p.osr_q_w, p.osr_q_b, p.ln_q_g, p.ln_q_b)?;
    let tkv = reduce_tokens(tape, xb, p.osr_kv_w, p.osr_kv_b, p.ln_kv_g, p.ln_kv_b)?;
    let q = tape.matmul(tq, p.wq)?;
    let k = tape.matmul(tkv, p.wk)?;
    let v = tape.matmul(tkv, p.wv)?;

    // relative-position bias for every head at once: [heads, Tq·Tk]
    let t = rh * rw;
    let index = relative_index_matrix::<T>((rh, rw), cfg.reduced_hw());
    let index = tape.constant(index)?;
    let bias_all = tape.matmul(p.bias_table, index)?;

    let d = cfg.head_dim();
    let c = cfg.channels;
    let mut heads = Vec::with_capacity(cfg.heads);
    for hd in 0..cfg.heads {
        let sel = tape.constant(column_selector(c, hd * d, d))?;
        let (qh, kh, vh) = (tape.matmul(q, sel)?, tape.matmul(k, sel)?, tape.matmul(v, sel)?);
        let row = tape.constant(row_selector(cfg.heads, hd))?;
        let bh = tape.matmul(row, bias_all)?;
        let bh = tape.reshape(bh, &[t, t])?;
        heads.push(attend(tape, qh, kh, vh, bh)?);
    }
    let z = tape.concat(&heads, 1)?;
    let z = tape.matmul(z, p.wo)?;
    let z = tape.transpose(z)?;
    let up = tape.constant(upsample_matrix((rh, rw), (h, w)))?;
    let z = tape.matmul(z, up)?;
    tape.reshape(z, &[c, h, w])
}

/// Dual dynamic fusion of street features `fs` with geometry features `fg`.
pub fn ddf<T: Real>(tape: &Tape<T>, fs: Var, fg: Var, p: &FusionParams<Var>) -> Result<Var> {
    let (ss, sg) = (tape.shape(fs), tape.shape(fg));
    if ss != sg || ss.len() != 3 {
        return Err(Error::shape("ddf", &ss, &sg));
    }
    let c = ss[0];
    let sum = tape.add(fs, fg)?;
    let pooled = tape.global_avg_pool(sum)?;
    let pooled = tape.reshape(pooled, &[1, c])?;
    let wlin = tape.matmul(pooled, p.ddf_gamma_w)?;
    let wlin = tape.add(wlin, p.ddf_gamma_b)?;
    let wgt = tape.sigmoid(wlin)?;
    let wgt = tape.reshape(wgt, &[c, 1, 1])?;
    let inv = tape.neg(wgt)?;
    let inv = tape.add_scalar(inv, 1.0)?;
    let a = tape.mul(wgt, fs)?;
    let b = tape.mul(inv, fg)?;
    let pair = tape.concat(&[a, b], 0)?;
    let mix = tape.conv2d(pair, p.ddf_fuse_w, Some(p.ddf_fuse_b), 1, 1, 1)?;
    let g = tape.global_avg_pool(mix)?;
    let g = tape.reshape(g, &[c, 1, 1])?;
    let g = tape.conv2d(g, p.ddf_adapt_w, Some(p.ddf_adapt_b), 1, 0, 1)?;
    let g = tape.sigmoid(g)?;
    tape.mul(g, mix)
}

/// Full block: `DDF(Xs, Z) + Xs` with `Z` the cross-attention of the
/// projected streams.
pub fn gt_fusion_forward<T: Real>(
    tape: &Tape<T>,
    xs: Var,
    xb: Var,
    p: &FusionParams<Var>,
    cfg: &FusionConfig,
) -> Result<Var> {
    let (ss, sb) = (tape.shape(xs), tape.shape(xb));
    if ss != sb {
        return Err(Error::shape("gt_fusion", &ss, &sb));
    }
    let xs_p = dw_proj(tape, xs, p.dw_s_w, p.dw_s_b)?;
    let xb_p = dw_proj(tape, xb, p.dw_b_w, p.dw_b_b)?;
    let z = cross_attention(tape, xs_p, xb_p, p, cfg)?;
    let fused = ddf(tape, xs, z, p)?;
    tape.add(fused, xs)
}

/// Forward MACs of one block at its configured feature size.
pub fn fusion_macs(cfg: &FusionConfig) -> usize {
    let c = cfg.channels;
    let (h, w) = cfg.feature_hw;
    let (rh, rw) = cfg.reduced_hw();
    let (n, t) = (h * w, rh * rw);
    let dw = 2 * c * 9 * n;
    let osr = 2 * (c * c * 9 * t + c * t);
    let proj = 3 * t * c * c;
    let attn = 2 * t * t * c;
    let out = t * c * c + c * t * n;
    let ddf = c * c + 2 * c * 9 * c * n + c * c;
    dw + osr + proj + attn + out + ddf
}

#[cfg(test)]
mod tests;
