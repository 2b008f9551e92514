#![allow(dead_code)]

pub mod features;
pub mod gradcheck;
pub mod oracle;

use lightseg::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: Shape, rng: &mut impl Rng) -> Tensor<f64> {
    let v: Vec<f64> = (0..shape.numel())
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    Tensor::from_vec(shape, v).unwrap()
}

pub fn randn_f32(shape: Shape, rng: &mut impl Rng) -> Tensor<f32> {
    randn(shape, rng).cast()
}

/// Values with magnitude at least `gap`, random sign.
pub fn away_from_zero(shape: Shape, gap: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let v: Vec<f64> = (0..shape.numel())
        .map(|_| {
            let m = gap + rng.random::<f64>();
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, v).unwrap()
}

/// A random permutation of `0..n` scaled by `step`, so every pair of values differs by at least `step`.
pub fn distinct(shape: Shape, step: f64, rng: &mut impl Rng) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let mut v: Vec<f64> = (0..shape.numel()).map(|i| i as f64 * step).collect();
    v.shuffle(rng);
    Tensor::from_vec(shape, v).unwrap()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}
