//! Shared helpers for comparing network features.

use super::rng;
use lightseg::model::{forward_segmentation, NormMode, Session};
use lightseg::params::ParamKind;
use lightseg::{NetworkSpec, ParamStore, Tensor};
use rand::Rng;

/// Parameters with non-trivial running statistics so infer-mode BN is a real affine map.
pub fn random_params(spec: &NetworkSpec, seed: u64) -> ParamStore<f32> {
    let mut p = ParamStore::init(spec, seed);
    let mut r = rng(seed ^ 0xabc);
    let names: Vec<(String, ParamKind)> = p.iter().map(|(n, k, _)| (n.to_string(), k)).collect();
    for (name, kind) in names {
        let t = p.get_mut(&name).unwrap();
        match kind {
            ParamKind::RunningMean => t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.2..0.2)),
            ParamKind::RunningVar => t.data_mut().iter_mut().for_each(|v| *v = r.random_range(0.5..2.0)),
            ParamKind::Gamma => t.data_mut().iter_mut().for_each(|v| *v = r.random_range(0.5..1.5)),
            ParamKind::Beta => t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.2..0.2)),
            _ => {}
        }
    }
    p
}

pub fn stage_features(spec: &NetworkSpec, params: &ParamStore<f32>, image: &Tensor<f32>) -> Vec<Tensor<f32>> {
    let mut s = Session::new(params, NormMode::Infer, false);
    let x = s.input(image.clone());
    let out = forward_segmentation(spec, &mut s, x, &[]).unwrap();
    out.features.iter().map(|&v| s.tape.value(v).clone()).collect()
}

/// Largest |conv[k·i, k·j] − plain[i, j]| over the plain grid.
pub fn subsampled_diff(conv: &Tensor<f32>, plain: &Tensor<f32>, k: usize) -> f32 {
    let [n, c, h, w] = plain.shape().0;
    let mut worst = 0.0f32;
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    worst = worst.max((conv.at(b, ch, k * y, k * x) - plain.at(b, ch, y, x)).abs());
                }
            }
        }
    }
    worst
}
