//! Direct nested-loop convolution reference.

use super::{randn_f32, rng};
use lightseg::ops::{conv2d, ConvGeom};
use lightseg::{Shape, Tensor};
use rand::Rng;

/// Direct loop: for each output element, sum over (ci, ky, kx) in that order
/// starting from zero, then add the bias.
pub fn naive_conv(x: &Tensor<f32>, w: &Tensor<f32>, b: Option<&Tensor<f32>>, s: usize, d: usize, p: usize) -> Tensor<f32> {
    let [n, cin, h, wd] = x.shape().0;
    let [cout, _, kh, kw] = w.shape().0;
    let ho = (h + 2 * p - d * (kh - 1) - 1) / s + 1;
    let wo = (wd + 2 * p - d * (kw - 1) - 1) / s + 1;
    let mut out = Tensor::zeros(Shape::new(n, cout, ho, wo));
    for b_ in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f32;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * s + ky * d) as isize - p as isize;
                                let ix = (ox * s + kx * d) as isize - p as isize;
                                let xv = if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    0.0
                                } else {
                                    x.at(b_, ci, iy as usize, ix as usize)
                                };
                                acc += w.at(co, ci, ky, kx) * xv;
                            }
                        }
                    }
                    if let Some(bias) = b {
                        acc += bias.data()[co];
                    }
                    out.set(b_, co, oy, ox, acc);
                }
            }
        }
    }
    out
}

/// Kernel with `d − 1` zeros inserted between taps.
pub fn expand_kernel(w: &Tensor<f32>, d: usize) -> Tensor<f32> {
    let [co, ci, kh, kw] = w.shape().0;
    let (eh, ew) = ((kh - 1) * d + 1, (kw - 1) * d + 1);
    let mut out = Tensor::zeros(Shape::new(co, ci, eh, ew));
    for o in 0..co {
        for i in 0..ci {
            for y in 0..kh {
                for x in 0..kw {
                    out.set(o, i, y * d, x * d, w.at(o, i, y, x));
                }
            }
        }
    }
    out
}

/// Compares `conv2d` with the reference bit for bit on `count` random cases
/// drawn from kernel {1,3,7}, stride {1,2}, dilation {1,2,4}.
pub fn random_cases(count: usize) -> Result<usize, String> {
    let mut checked = 0;
    let mut seed = 0;
    while checked < count {
        seed += 1;
        let mut r = rng(seed);
        let k: usize = [1, 3, 7][r.random_range(0..3)];
        let s = r.random_range(1..=2);
        let d = [1, 2, 4][r.random_range(0..3)];
        let p = r.random_range(0..=(k / 2) * d);
        let span = d * (k - 1) + 1;
        let h = r.random_range(1..=12) + span.saturating_sub(2 * p);
        let w = r.random_range(1..=12) + span.saturating_sub(2 * p);
        if h + 2 * p < span || w + 2 * p < span {
            continue;
        }
        let n = r.random_range(1..=2);
        let cin = r.random_range(1..=4);
        let cout = r.random_range(1..=5);
        let x = randn_f32(Shape::new(n, cin, h, w), &mut r);
        let wt = randn_f32(Shape::new(cout, cin, k, k), &mut r);
        let bias = randn_f32(Shape::new(cout, 1, 1, 1), &mut r);
        let use_bias = r.random_bool(0.5);
        let b = use_bias.then_some(&bias);
        let got = conv2d(&x, &wt, b, ConvGeom::new(s, d, p)).unwrap();
        let want = naive_conv(&x, &wt, b, s, d, p);
        if got.shape() != want.shape() || got.data().iter().zip(want.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(format!("case {seed}: k={k} s={s} d={d} p={p} h={h} w={w}"));
        }
        checked += 1;
    }
    Ok(checked)
}
