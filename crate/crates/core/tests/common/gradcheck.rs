//! Finite-difference checks of every differentiable tape operation in f64.

use super::{away_from_zero, distinct, randn, rng};
use lightseg::autodiff::{BnMode, Tape, Var};
use lightseg::ops::{ConvGeom, PoolGeom};
use lightseg::{Shape, Tensor};
use rand::Rng;

pub const CASES: u64 = 20;
pub const H: f64 = 1e-6;
pub const SMOOTH_TOL: f64 = 1e-4;
pub const PIECEWISE_TOL: f64 = 1e-2;

/// Largest normwise relative error `|a − n| / max(|a|, |n|)` over the inputs in `wrt`.
pub fn grad_error(inputs: &[Tensor<f64>], wrt: &[usize], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.leaf(t.clone(), wrt.contains(&i)))
        .collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();

    let eval = |ins: &[Tensor<f64>]| {
        let mut t = Tape::new();
        let v: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let l = f(&mut t, &v);
        t.value(l).item()
    };

    let mut worst: f64 = 0.0;
    for &i in wrt {
        let analytic = grads.get_or_zeros(vars[i], inputs[i].shape());
        let mut ins = inputs.to_vec();
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            ins[i].data_mut()[j] = x0 + H;
            let up = eval(&ins);
            ins[i].data_mut()[j] = x0 - H;
            let down = eval(&ins);
            ins[i].data_mut()[j] = x0;
            let num = (up - down) / (2.0 * H);
            let a = analytic.data()[j];
            diff += (a - num) * (a - num);
            na += a * a;
            nn += num * num;
        }
        let scale = na.sqrt().max(nn.sqrt());
        let err = if scale < 1e-12 { diff.sqrt() } else { diff.sqrt() / scale };
        worst = worst.max(err);
    }
    worst
}

/// Errors of one op over its random cases.
pub struct Check {
    pub name: &'static str,
    pub errs: Vec<f64>,
    pub tol: f64,
}

impl Check {
    pub fn worst(&self) -> f64 {
        self.errs.iter().copied().fold(0.0, f64::max)
    }

    pub fn ok(&self) -> bool {
        self.errs.len() >= CASES as usize && self.worst() < self.tol
    }

    pub fn assert_ok(&self) {
        assert!(
            self.ok(),
            "{}: {} cases, worst relative error {:.3e} (tolerance {:.0e}), all: {:?}",
            self.name,
            self.errs.len(),
            self.worst(),
            self.tol,
            self.errs
        );
    }
}

pub fn shape(r: &mut impl Rng, n: (usize, usize), c: (usize, usize), hw: (usize, usize)) -> Shape {
    Shape::new(
        r.random_range(n.0..=n.1),
        r.random_range(c.0..=c.1),
        r.random_range(hw.0..=hw.1),
        r.random_range(hw.0..=hw.1),
    )
}

pub fn conv2d_gradients() -> Check {
    let mut errs = Vec::new();
    for seed in 0..CASES {
        let mut r = rng(seed);
        let k = [1, 3][r.random_range(0..2)];
        let stride = r.random_range(1..=2);
        let dilation = r.random_range(1..=2);
        let padding = r.random_range(0..=(k / 2) * dilation);
        let xs = shape(&mut r, (1, 2), (1, 3), (5, 8));
        let cout = r.random_range(1..=3);
        let x = randn(xs, &mut r);
        let w = randn(Shape::new(cout, xs.c(), k, k), &mut r);
        let b = randn(Shape::new(cout, 1, 1, 1), &mut r);
        let g = ConvGeom::new(stride, dilation, padding);
        let ho = ConvGeom::out_dim(xs.h(), k, stride, dilation, padding).unwrap();
        let wo = ConvGeom::out_dim(xs.w(), k, stride, dilation, padding).unwrap();
        let proj = randn(Shape::new(xs.n(), cout, ho, wo), &mut r);
        let with_bias = seed % 2 == 0;
        errs.push(grad_error(&[x, w, b], &[0, 1, 2], |t, v| {
            let y = t.conv2d(v[0], v[1], with_bias.then_some(v[2]), g).unwrap();
            t.dot(y, &proj).unwrap()
        }));
    }
    Check { name: "conv2d", errs, tol: SMOOTH_TOL }
}

pub fn batch_norm_train_gradients() -> Check {
    let mut errs = Vec::new();
    for seed in 0..CASES {
        let mut r = rng(100 + seed);
        let xs = shape(&mut r, (2, 3), (1, 3), (2, 4));
        let x = randn(xs, &mut r);
        let gamma = randn(Shape::new(xs.c(), 1, 1, 1), &mut r);
        let beta = randn(Shape::new(xs.c(), 1, 1, 1), &mut r);
        let proj = randn(xs, &mut r);
        errs.push(grad_error(&[x, gamma, beta], &[0, 1, 2], |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], BnMode::Train, 1e-5).unwrap();
            t.dot(y, &proj).unwrap()
        }));
    }
    Check { name: "batch_norm(train)", errs, tol: SMOOTH_TOL }
}

pub fn batch_norm_infer_gradients() -> Check {
    let mut errs = Vec::new();
    for seed in 0..CASES {
        let mut r = rng(200 + seed);
        let xs = shape(&mut r, (1, 3), (1, 4), (2, 4));
        let c = xs.c();
        let x = randn(xs, &mut r);
        let gamma = randn(Shape::new(c, 1, 1, 1), &mut r);
        let beta = randn(Shape::new(c, 1, 1, 1), &mut r);
        let mean: Vec<f64> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..c).map(|_| r.random_range(0.2..2.0)).collect();
        let proj = randn(xs, &mut r);
        errs.push(grad_error(&[x, gamma, beta], &[0, 1, 2], |t, v| {
            let mode = BnMode::Infer { mean: &mean, var: &var };
            let (y, _) = t.batch_norm(v[0], v[1], v[2], mode, 1e-5).unwrap();
            t.dot(y, &proj).unwrap()
        }));
    }
    Check { name: "batch_norm(infer)", errs, tol: SMOOTH_TOL }
}

pub fn relu_gradients() -> Check {
    let mut errs = Vec::new();
    for seed in 0..CASES {
        let mut r = rng(300 + seed);
        let xs = shape(&mut r, (1, 2), (1, 3), (2, 6));
        let x = away_from_zero(xs, 1e-3, &mut r);
        let proj = randn(xs, &mut r);
        errs.push(grad_error(&[x], &[0], |t, v| {
            let y = t.relu(v[0]);
            t.dot(y, &proj).unwrap()
        }));
    }
    Check { name: "relu", errs, tol: PIECEWISE_TOL }
}

pub fn add_gradients() -> Check {
    let mut errs = Vec::new();
    for seed in 0..CASES {
        let mut r = rng(400 + seed);
        let xs = shape(&mut r, (1, 2), (1, 3), (2, 6));
        let a = randn(xs, &mut r);
        let b = randn(xs, &mut r);
        let proj = randn(xs, &mut r);
        errs.push(grad_error(&[a, b], &[0, 1], |t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            t.dot(y, &proj).unwrap()
        }));
    }
    Check { name: "add", errs, tol: SMOOTH_TOL }
}

pub fn max_pool_gradients() -> Check {
    let mut errs = Vec::new();
    for seed in 0..CASES {
        let mut r = rng(500 + seed);
        let xs = shape(&mut r, (1, 2), (1, 3), (4, 8));
        let geom = if seed % 2 == 0 {
            PoolGeom { kernel: 3, stride: 2, padding: 1 }
        } else {
            PoolGeom { kernel: 2, stride: 2, padding: 0 }
        };
        let x = distinct(xs, 1e-2, &mut r);
        let probe = lightseg::ops::max_pool2d(&x, geom).unwrap().0;
        let proj = randn(probe.shape(), &mut r);
        errs.push(grad_error(&[x], &[0], |t, v| {
            let y = t.max_pool2d(v[0], geom).unwrap();
            t.dot(y, &proj).unwrap()
        }));
    }
    Check { name: "max_pool2d", errs, tol: PIECEWISE_TOL }
}

pub fn upsample_gradients() -> Check {
    let mut errs = Vec::new();
    for seed in 0..CASES {
        let mut r = rng(600 + seed);
        let xs = shape(&mut r, (1, 2), (1, 3), (1, 4));
        let factor = [2, 4, 8][r.random_range(0..3)];
        let x = randn(xs, &mut r);
        let proj = randn(Shape::new(xs.n(), xs.c(), xs.h() * factor, xs.w() * factor), &mut r);
        errs.push(grad_error(&[x], &[0], |t, v| {
            let y = t.upsample_bilinear(v[0], factor).unwrap();
            t.dot(y, &proj).unwrap()
        }));
    }
    Check { name: "upsample_bilinear", errs, tol: SMOOTH_TOL }
}

pub fn cross_entropy_gradients() -> Check {
    let mut errs = Vec::new();
    for seed in 0..CASES {
        let mut r = rng(700 + seed);
        let xs = shape(&mut r, (1, 2), (2, 4), (2, 5));
        let x = randn(xs, &mut r);
        let n_pix = xs.n() * xs.h() * xs.w();
        let mut targets: Vec<u8> = (0..n_pix)
            .map(|_| if r.random_bool(0.2) { 255 } else { r.random_range(0..xs.c() as u8) })
            .collect();
        targets[0] = 0;
        errs.push(grad_error(&[x], &[0], |t, v| t.softmax_cross_entropy(v[0], &targets, Some(255)).unwrap()));
    }
    Check { name: "softmax_cross_entropy", errs, tol: SMOOTH_TOL }
}

pub fn gumbel_softmax_gradients() -> Check {
    let mut errs = Vec::new();
    for seed in 0..CASES {
        let mut r = rng(800 + seed);
        let n = r.random_range(2..=6);
        let logits = randn(Shape::new(n, 1, 1, 1), &mut r);
        let noise: Vec<f64> = lightseg::gate::gumbel_sample(n, &mut r);
        let tau = r.random_range(0.3..2.0);
        let proj = randn(Shape::new(n, 1, 1, 1), &mut r);
        errs.push(grad_error(&[logits], &[0], |t, v| {
            let z = t.gumbel_softmax(v[0], &noise, tau).unwrap();
            t.dot(z, &proj).unwrap()
        }));
    }
    Check { name: "gumbel_softmax", errs, tol: SMOOTH_TOL }
}

pub fn weighted_sum_gradients() -> Check {
    let mut errs = Vec::new();
    for seed in 0..CASES {
        let mut r = rng(900 + seed);
        let xs = shape(&mut r, (1, 2), (1, 3), (2, 5));
        let k = r.random_range(1..=4);
        let mut inputs: Vec<Tensor<f64>> = (0..k).map(|_| randn(xs, &mut r)).collect();
        inputs.push(randn(Shape::new(k, 1, 1, 1), &mut r));
        let proj = randn(xs, &mut r);
        let wrt: Vec<usize> = (0..=k).collect();
        errs.push(grad_error(&inputs, &wrt, |t, v| {
            let y = t.weighted_sum(&v[..k], v[k]).unwrap();
            t.dot(y, &proj).unwrap()
        }));
    }
    Check { name: "weighted_sum", errs, tol: SMOOTH_TOL }
}

pub fn sum_and_dot_gradients() -> Check {
    let mut errs = Vec::new();
    for seed in 0..CASES {
        let mut r = rng(1000 + seed);
        let xs = shape(&mut r, (1, 2), (1, 3), (1, 5));
        let x = randn(xs, &mut r);
        let proj = randn(xs, &mut r);
        errs.push(grad_error(&[x.clone()], &[0], |t, v| {
            let y = t.dot(v[0], &proj).unwrap();
            let s = t.sum(v[0]);
            t.add(y, s).unwrap()
        }));
    }
    Check { name: "sum/dot", errs, tol: SMOOTH_TOL }
}

pub fn all() -> Vec<Check> {
    vec![
        conv2d_gradients(),
        batch_norm_train_gradients(),
        batch_norm_infer_gradients(),
        relu_gradients(),
        add_gradients(),
        max_pool_gradients(),
        upsample_gradients(),
        cross_entropy_gradients(),
        gumbel_softmax_gradients(),
        weighted_sum_gradients(),
        sum_and_dot_gradients(),
    ]
}
