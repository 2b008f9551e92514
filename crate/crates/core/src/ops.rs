//! Forward and backward kernels on raw tensors. The tape in [`crate::autodiff`]
//! wires these together; they are also usable directly for inference.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gemm::{gemm, MatRef};
use crate::tensor::{Scalar, Shape, Tensor};

static PARALLEL: AtomicBool = AtomicBool::new(false);

/// Enables rayon parallelism over batch items inside the kernels. Results are
/// bit-identical either way: every reduction runs in a fixed order.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

/// Number of worker threads the kernels use right now.
pub fn kernel_threads() -> usize {
    if parallel_enabled() {
        rayon::current_num_threads()
    } else {
        1
    }
}

/// Runs `f(item, chunk, scratch)` over the `per`-sized chunks, in parallel when
/// enabled. The scratch buffer holds `scratch` elements and is reused across the
/// items handled by one thread.
fn for_each_item_scratch<T: Scalar>(
    chunks: &mut [T],
    per: usize,
    scratch: usize,
    f: impl Fn(usize, &mut [T], &mut [T]) + Sync + Send,
) {
    if per == 0 {
        return;
    }
    if parallel_enabled() {
        chunks
            .par_chunks_mut(per)
            .enumerate()
            .for_each_init(|| vec![T::zero(); scratch], |buf, (i, c)| f(i, c, buf));
    } else {
        let mut buf = vec![T::zero(); scratch];
        chunks.chunks_mut(per).enumerate().for_each(|(i, c)| f(i, c, &mut buf));
    }
}

// ---------------------------------------------------------------------------
// convolution

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
}

impl Default for ConvGeom {
    fn default() -> Self {
        ConvGeom {
            stride: (1, 1),
            dilation: (1, 1),
            padding: (0, 0),
        }
    }
}

impl ConvGeom {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        ConvGeom {
            stride: (stride, stride),
            dilation: (dilation, dilation),
            padding: (padding, padding),
        }
    }

    /// Square kernel with `d·(k−1)/2` zero padding.
    pub fn same(kernel: usize, stride: usize, dilation: usize) -> Self {
        Self::new(stride, dilation, dilation * (kernel - 1) / 2)
    }

    /// `floor((n + 2p − d·(k−1) − 1)/s) + 1`, or `None` when that is below one.
    pub fn out_dim(input: usize, kernel: usize, stride: usize, dilation: usize, padding: usize) -> Option<usize> {
        let span = dilation * (kernel.max(1) - 1) + 1;
        let padded = input + 2 * padding;
        if kernel == 0 || stride == 0 || padded < span {
            return None;
        }
        Some((padded - span) / stride + 1)
    }

    fn validate(&self) -> Result<()> {
        if self.stride.0 == 0 || self.stride.1 == 0 || self.dilation.0 == 0 || self.dilation.1 == 0 {
            return Err(Error::InvalidArgument(format!(
                "stride and dilation must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
    fn is_pointwise(&self, g: &ConvGeom) -> bool {
        self.kh == 1 && self.kw == 1 && g.stride == (1, 1) && g.padding == (0, 0)
    }
}

fn conv_dims<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Result<ConvDims> {
    g.validate()?;
    let [n, cin, h, wd] = x.shape().0;
    let [cout, wcin, kh, kw] = w.shape().0;
    if wcin != cin {
        return Err(Error::Shape(format!(
            "conv2d: input has {cin} channels (dim 1 of {}) but weight expects Cin={wcin} (dim 1 of {})",
            x.shape(),
            w.shape()
        )));
    }
    if let Some(b) = bias {
        if b.numel() != cout {
            return Err(Error::Shape(format!(
                "conv2d: bias has {} elements, expected Cout={cout}",
                b.numel()
            )));
        }
    }
    let ho = ConvGeom::out_dim(h, kh, g.stride.0, g.dilation.0, g.padding.0).ok_or_else(|| {
        Error::Shape(format!(
            "conv2d: output height < 1 (H={h}, kernel={kh}, stride={}, dilation={}, padding={})",
            g.stride.0, g.dilation.0, g.padding.0
        ))
    })?;
    let wo = ConvGeom::out_dim(wd, kw, g.stride.1, g.dilation.1, g.padding.1).ok_or_else(|| {
        Error::Shape(format!(
            "conv2d: output width < 1 (W={wd}, kernel={kw}, stride={}, dilation={}, padding={})",
            g.stride.1, g.dilation.1, g.padding.1
        ))
    })?;
    Ok(ConvDims { n, cin, h, w: wd, cout, kh, kw, ho, wo })
}

/// Output index range `[lo, hi)` whose input index `o·s + off − p` lies in `[0, len)`.
fn valid_range(len: usize, out: usize, s: usize, off: usize, p: usize) -> (usize, usize) {
    // o·s + off >= p  and  o·s + off < len + p
    let lo = if off >= p { 0 } else { (p - off).div_ceil(s) };
    let hi = if len + p > off { ((len + p - off - 1) / s + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], d: &ConvDims, g: &ConvGeom, col: &mut [T]) {
    let plane = d.out_plane();
    let (sh, sw) = g.stride;
    let (dh, dw) = g.dilation;
    let (ph, pw) = g.padding;
    for ci in 0..d.cin {
        let xc = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            let (ylo, yhi) = valid_range(d.h, d.ho, sh, ky * dh, ph);
            for kx in 0..d.kw {
                let (xlo, xhi) = valid_range(d.w, d.wo, sw, kx * dw, pw);
                let row = ((ci * d.kh + ky) * d.kw + kx) * plane;
                let dst = &mut col[row..row + plane];
                for oy in 0..d.ho {
                    let out = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if oy < ylo || oy >= yhi || xlo >= xhi {
                        out.fill(T::zero());
                        continue;
                    }
                    let iy = oy * sh + ky * dh - ph;
                    let src = &xc[iy * d.w..(iy + 1) * d.w];
                    out[..xlo].fill(T::zero());
                    out[xhi..].fill(T::zero());
                    let ix0 = xlo * sw + kx * dw - pw;
                    if sw == 1 {
                        out[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for (j, o) in out[xlo..xhi].iter_mut().enumerate() {
                            *o = src[ix0 + j * sw];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], d: &ConvDims, g: &ConvGeom, dx: &mut [T]) {
    let plane = d.out_plane();
    let (sh, sw) = g.stride;
    let (dh, dw) = g.dilation;
    let (ph, pw) = g.padding;
    for ci in 0..d.cin {
        let xc = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            let (ylo, yhi) = valid_range(d.h, d.ho, sh, ky * dh, ph);
            for kx in 0..d.kw {
                let (xlo, xhi) = valid_range(d.w, d.wo, sw, kx * dw, pw);
                if xlo >= xhi {
                    continue;
                }
                let row = ((ci * d.kh + ky) * d.kw + kx) * plane;
                let src = &col[row..row + plane];
                for oy in ylo..yhi {
                    let iy = oy * sh + ky * dh - ph;
                    let dst = &mut xc[iy * d.w..(iy + 1) * d.w];
                    let ix0 = xlo * sw + kx * dw - pw;
                    for (j, &v) in src[oy * d.wo + xlo..oy * d.wo + xhi].iter().enumerate() {
                        dst[ix0 + j * sw] += v;
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with zero padding. Each output element is
/// `sum over (ci, ky, kx) of w·x` accumulated in that order, then `+ bias`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeom,
) -> Result<Tensor<T>> {
    let d = conv_dims(x, w, bias, &g)?;
    let out_shape = Shape::new(d.n, d.cout, d.ho, d.wo);
    let mut out = Tensor::zeros(out_shape);
    let in_per = d.cin * d.h * d.w;
    let out_per = d.cout * d.out_plane();
    let k = d.k();
    let plane = d.out_plane();
    let pointwise = d.is_pointwise(&g);
    let xd = x.data();
    let wd = w.data();
    let scratch = if pointwise { 0 } else { k * plane };
    for_each_item_scratch(out.data_mut(), out_per, scratch, |n, y, col| {
        let xn = &xd[n * in_per..(n + 1) * in_per];
        if pointwise {
            gemm(d.cout, plane, k, MatRef::row_major(wd, k), MatRef::row_major(xn, plane), y, plane, false);
        } else {
            im2col(xn, &d, &g, col);
            gemm(d.cout, plane, k, MatRef::row_major(wd, k), MatRef::row_major(col, plane), y, plane, false);
        }
        if let Some(b) = bias {
            for (co, row) in y.chunks_mut(plane).enumerate() {
                let bv = b.data()[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: ConvGeom,
    dy: &Tensor<T>,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let d = conv_dims(x, w, None, &g)?;
    let k = d.k();
    let plane = d.out_plane();
    let in_per = d.cin * d.h * d.w;
    let out_per = d.cout * plane;
    let pointwise = d.is_pointwise(&g);
    let xd = x.data();
    let dyd = dy.data();

    let input = need.0.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        let wd = w.data();
        let scratch = if pointwise { 0 } else { k * plane };
        for_each_item_scratch(dx.data_mut(), in_per, scratch, |n, dxn, dcol| {
            let dyn_ = &dyd[n * out_per..(n + 1) * out_per];
            if pointwise {
                gemm(k, plane, d.cout, MatRef::transposed(wd, k), MatRef::row_major(dyn_, plane), dxn, plane, false);
            } else {
                gemm(k, plane, d.cout, MatRef::transposed(wd, k), MatRef::row_major(dyn_, plane), dcol, plane, false);
                col2im(dcol, &d, &g, dxn);
            }
        });
        dx
    });

    let weight = need.1.then(|| {
        let mut dw = Tensor::zeros(w.shape());
        let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * plane] };
        for n in 0..d.n {
            let xn = &xd[n * in_per..(n + 1) * in_per];
            let dyn_ = &dyd[n * out_per..(n + 1) * out_per];
            let b = if pointwise {
                MatRef::transposed(xn, plane)
            } else {
                im2col(xn, &d, &g, &mut col);
                MatRef::transposed(&col, plane)
            };
            gemm(d.cout, k, plane, MatRef::row_major(dyn_, plane), b, dw.data_mut(), k, n > 0);
        }
        dw
    });

    let bias = need.2.then(|| {
        let mut db = vec![T::zero(); d.cout];
        for n in 0..d.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let row = &dyd[n * out_per + co * plane..n * out_per + (co + 1) * plane];
                *acc += row.iter().copied().sum::<T>();
            }
        }
        Tensor::vector(db)
    });

    Ok(ConvGrads { input, weight, bias })
}

// ---------------------------------------------------------------------------
// batch normalization

/// Per-channel batch statistics (biased variance) over N·H·W.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

pub fn batch_stats<T: Scalar>(x: &Tensor<T>) -> Result<BatchStats> {
    let [n, c, h, w] = x.shape().0;
    let count = n * h * w;
    if count == 0 {
        return Err(Error::Shape(format!(
            "batchnorm2d: zero batch·spatial extent for input {}",
            x.shape()
        )));
    }
    let plane = h * w;
    let data = x.data();
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for i in 0..n {
            let off = (i * c + ch) * plane;
            s += data[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = s / count as f64;
        let mut ss = 0.0f64;
        for i in 0..n {
            let off = (i * c + ch) * plane;
            ss += data[off..off + plane]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = ss / count as f64;
    }
    Ok(BatchStats { mean, var, count })
}

fn check_bn_params<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    let c = x.shape().c();
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.numel() != c {
            return Err(Error::Shape(format!(
                "batchnorm2d: {name} has {} elements, input has C={c}",
                t.numel()
            )));
        }
    }
    Ok(())
}

/// `y = gamma·(x − mean)·inv_std + beta`, per channel.
pub fn bn_apply<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
) -> Result<Tensor<T>> {
    check_bn_params(x, gamma, beta)?;
    let [_, c, h, w] = x.shape().0;
    let plane = h * w;
    let mut y = x.clone();
    for (i, chunk) in y.data_mut().chunks_mut(plane.max(1)).enumerate() {
        let ch = i % c;
        let (m, s, g, b) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
        chunk.iter_mut().for_each(|v| *v = (*v - m) * s * g + b);
    }
    Ok(y)
}

pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Backward of [`bn_apply`]. With `batch_mode` the mean and variance are
/// functions of the input (training mode), otherwise constants.
pub fn bn_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    dy: &Tensor<T>,
    batch_mode: bool,
) -> BnGrads<T> {
    let [n, c, h, w] = x.shape().0;
    let plane = h * w;
    let count = T::of((n * plane) as f64);
    let xd = x.data();
    let dyd = dy.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * plane;
            let (m, s) = (mean[ch], inv_std[ch]);
            let (mut sg, mut sb) = (T::zero(), T::zero());
            for (xv, gv) in xd[off..off + plane].iter().zip(&dyd[off..off + plane]) {
                sg += *gv * (*xv - m) * s;
                sb += *gv;
            }
            dgamma[ch] += sg;
            dbeta[ch] += sb;
        }
    }
    let mut dx = Tensor::zeros(x.shape());
    let dxd = dx.data_mut();
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * plane;
            let (m, s, g) = (mean[ch], inv_std[ch], gamma.data()[ch]);
            let scale = g * s;
            for j in off..off + plane {
                dxd[j] = if batch_mode {
                    let xhat = (xd[j] - m) * s;
                    scale / count * (count * dyd[j] - dbeta[ch] - xhat * dgamma[ch])
                } else {
                    scale * dyd[j]
                };
            }
        }
    }
    BnGrads {
        input: dx,
        gamma: Tensor::vector(dgamma),
        beta: Tensor::vector(dbeta),
    }
}

pub fn inv_std<T: Scalar>(var: &[T], eps: T) -> Vec<T> {
    var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect()
}

// ---------------------------------------------------------------------------
// pooling, upsampling, elementwise

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Max pooling with implicit −∞ padding. Returns the output and, for each
/// output element, the flat index of the winning input element.
pub fn max_pool2d<T: Scalar>(x: &Tensor<T>, p: PoolGeom) -> Result<(Tensor<T>, Vec<u32>)> {
    let [n, c, h, w] = x.shape().0;
    if p.kernel == 0 || p.stride == 0 || p.padding * 2 > p.kernel {
        return Err(Error::InvalidArgument(format!("invalid pooling geometry {p:?}")));
    }
    let ho = ConvGeom::out_dim(h, p.kernel, p.stride, 1, p.padding)
        .ok_or_else(|| Error::Shape(format!("max_pool2d: output height < 1 for {}", x.shape())))?;
    let wo = ConvGeom::out_dim(w, p.kernel, p.stride, 1, p.padding)
        .ok_or_else(|| Error::Shape(format!("max_pool2d: output width < 1 for {}", x.shape())))?;
    let mut out = Tensor::zeros(Shape::new(n, c, ho, wo));
    let mut arg = vec![0u32; n * c * ho * wo];
    let xd = x.data();
    let od = out.data_mut();
    for plane_idx in 0..n * c {
        let base = plane_idx * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..p.kernel {
                    let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..p.kernel {
                        let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best_i == usize::MAX || xd[idx] > best {
                            best = xd[idx];
                            best_i = idx;
                        }
                    }
                }
                let o = (plane_idx * ho + oy) * wo + ox;
                od[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool2d_backward<T: Scalar>(input_shape: Shape, argmax: &[u32], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let dxd = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        dxd[i as usize] += g;
    }
    dx
}

/// Per-axis bilinear taps for half-pixel centers: output `i` samples the input
/// at `(i + 0.5)/factor − 0.5`, clamped to the valid range.
fn bilinear_taps(len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len * factor)
        .map(|i| {
            let src = ((i as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let lambda = if i0 == len - 1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, lambda)
        })
        .collect()
}

pub fn upsample_bilinear<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor < 1 {
        return Err(Error::InvalidArgument(format!(
            "upsample factor must be >= 1, got {factor}"
        )));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let [n, c, h, w] = x.shape().0;
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Tensor::zeros(Shape::new(n, c, ho, wo));
    if h == 0 || w == 0 {
        return Ok(out);
    }
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let xd = x.data();
    let od = out.data_mut();
    for p in 0..n * c {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut od[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::of(ly);
            let (r0, r1) = (&src[y0 * w..(y0 + 1) * w], &src[y1 * w..(y1 + 1) * w]);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::of(lx);
                let top = r0[x0] + (r0[x1] - r0[x0]) * lx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * lx;
                dst[oy * wo + ox] = top + (bot - top) * ly;
            }
        }
    }
    Ok(out)
}

pub fn upsample_bilinear_backward<T: Scalar>(input_shape: Shape, factor: usize, dy: &Tensor<T>) -> Tensor<T> {
    if factor == 1 {
        return dy.clone();
    }
    let [n, c, h, w] = input_shape.0;
    let (ho, wo) = (h * factor, w * factor);
    let mut dx = Tensor::zeros(input_shape);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let dyd = dy.data();
    let dxd = dx.data_mut();
    for p in 0..n * c {
        let g = &dyd[p * ho * wo..(p + 1) * ho * wo];
        let d = &mut dxd[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::of(ly);
            let one = T::one();
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::of(lx);
                let v = g[oy * wo + ox];
                d[y0 * w + x0] += v * (one - ly) * (one - lx);
                d[y0 * w + x1] += v * (one - ly) * lx;
                d[y1 * w + x0] += v * ly * (one - lx);
                d[y1 * w + x1] += v * ly * lx;
            }
        }
    }
    dx
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("add: shape {} vs {}", a.shape(), b.shape())));
    }
    let mut out = a.clone();
    out.data_mut().iter_mut().zip(b.data()).for_each(|(o, &v)| *o += v);
    Ok(out)
}

// ---------------------------------------------------------------------------
// losses and gates

/// Mean over non-ignored pixels of `logsumexp(logits) − logits[target]`.
///
/// Returns the loss and the number of contributing pixels.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[u8],
    ignore: Option<u8>,
) -> Result<(T, usize)> {
    let [n, c, h, w] = logits.shape().0;
    let plane = h * w;
    if targets.len() != n * plane {
        return Err(Error::Shape(format!(
            "cross-entropy: {} targets for logits {}",
            targets.len(),
            logits.shape()
        )));
    }
    let ld = logits.data();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for i in 0..n {
        for p in 0..plane {
            let t = targets[i * plane + p];
            if Some(t) == ignore {
                continue;
            }
            if t as usize >= c {
                return Err(Error::InvalidArgument(format!(
                    "cross-entropy: target {t} outside [0, {c})"
                )));
            }
            let at = |k: usize| ld[(i * c + k) * plane + p].as_f64();
            let m = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..c).map(|k| (at(k) - m).exp()).sum::<f64>().ln();
            total += lse - at(t as usize);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument(
            "cross-entropy: no contributing pixels (all ignored)".into(),
        ));
    }
    Ok((T::of(total / count as f64), count))
}

pub fn softmax_cross_entropy_backward<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[u8],
    ignore: Option<u8>,
    count: usize,
    dloss: T,
) -> Tensor<T> {
    let [n, c, h, w] = logits.shape().0;
    let plane = h * w;
    let ld = logits.data();
    let mut dl = Tensor::zeros(logits.shape());
    let scale = dloss.as_f64() / count as f64;
    let dd = dl.data_mut();
    let mut e = vec![0.0f64; c];
    for i in 0..n {
        for p in 0..plane {
            let t = targets[i * plane + p];
            if Some(t) == ignore {
                continue;
            }
            let idx = |k: usize| (i * c + k) * plane + p;
            let m = (0..c).map(|k| ld[idx(k)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (k, ek) in e.iter_mut().enumerate() {
                *ek = (ld[idx(k)].as_f64() - m).exp();
                z += *ek;
            }
            for (k, ek) in e.iter().enumerate() {
                let onehot = if k == t as usize { 1.0 } else { 0.0 };
                dd[idx(k)] = T::of((ek / z - onehot) * scale);
            }
        }
    }
    dl
}

/// `softmax((logits + noise) / tau)` over a vector.
pub fn gumbel_softmax<T: Scalar>(logits: &[T], noise: &[T], tau: T) -> Result<Vec<T>> {
    if !(tau > T::zero()) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
    }
    if logits.len() != noise.len() || logits.is_empty() {
        return Err(Error::Shape(format!(
            "gumbel softmax: {} logits vs {} noise values",
            logits.len(),
            noise.len()
        )));
    }
    let s: Vec<T> = logits.iter().zip(noise).map(|(&l, &g)| (l + g) / tau).collect();
    Ok(softmax(&s))
}

pub fn softmax<T: Scalar>(v: &[T]) -> Vec<T> {
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = v.iter().map(|&x| (x - m).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|x| x / z).collect()
}
