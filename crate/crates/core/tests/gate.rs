mod common;

use common::{argmax, entropy, randn, rng};
use lightseg::convert::convert_to_dilated;
use lightseg::data::{gen_planted_dilation, GenConfig, Task};
use lightseg::gate::{
    decode_gates, gumbel_sample, gumbel_softmax_sample, search_from, GateState, SearchConfig, DEFAULT_CANDIDATES,
};
use lightseg::model::{forward_segmentation, NormMode, Session};
use lightseg::ops;
use lightseg::params::{branch_prefix, unit_prefix};
use lightseg::train::{train_from, TrainConfig};
use lightseg::{NetworkSpec, ParamStore, Shape, Var};
use rand::Rng;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

#[test]
fn gumbel_mean_is_euler_gamma() {
    let g = gumbel_sample(1_000_000, &mut rng(11));
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    assert!((mean - EULER_GAMMA).abs() < 0.01, "mean {mean}");
}

#[test]
fn gumbel_max_frequencies_follow_softmax() {
    let log_alpha = vec![0.3, -1.0, 1.2, 0.0, -0.4];
    let p = ops::softmax(&log_alpha);
    let samples = 10_000;
    for tau in [1.0, 0.1] {
        let state = GateState {
            log_alpha: log_alpha.clone(),
            tau,
            candidates: DEFAULT_CANDIDATES.to_vec(),
            rng_seed: 3,
        };
        let mut r = rng(3);
        let mut counts = [0usize; 5];
        for _ in 0..samples {
            counts[argmax(&gumbel_softmax_sample(&state, &mut r).unwrap())] += 1;
        }
        for i in 0..5 {
            let f = counts[i] as f64 / samples as f64;
            let sigma = (p[i] * (1.0 - p[i]) / samples as f64).sqrt();
            assert!((f - p[i]).abs() < 3.0 * sigma, "tau {tau}, candidate {i}: {f} vs {}", p[i]);
        }
    }
}

#[test]
fn two_way_gate_frequency() {
    for tau in [5.0, 1.0, 0.2] {
        let state = GateState {
            log_alpha: vec![2f64.ln(), 0.0],
            tau,
            candidates: vec![1, 2],
            rng_seed: 0,
        };
        let mut r = rng(21);
        let wins = (0..10_000)
            .filter(|_| argmax(&gumbel_softmax_sample(&state, &mut r).unwrap()) == 0)
            .count();
        let f = wins as f64 / 10_000.0;
        assert!((f - 2.0 / 3.0).abs() < 0.02, "tau {tau}: {f}");
    }
}

#[test]
fn sample_entropy_falls_with_temperature() {
    let log_alpha = vec![0.5, 0.1, -0.3, 0.2, 0.0];
    let mut prev = f64::INFINITY;
    for tau in [5.0, 1.0, 0.5, 0.1] {
        let state = GateState {
            log_alpha: log_alpha.clone(),
            tau,
            candidates: DEFAULT_CANDIDATES.to_vec(),
            rng_seed: 0,
        };
        let mut r = rng(8);
        let n = 2000;
        let mean = (0..n)
            .map(|_| entropy(&gumbel_softmax_sample(&state, &mut r).unwrap()))
            .sum::<f64>()
            / n as f64;
        assert!(mean < prev, "tau {tau}: entropy {mean} not below {prev}");
        prev = mean;
    }
}

#[test]
fn samples_are_distributions_and_sharpen() {
    let mut r = rng(5);
    for _ in 0..200 {
        let n = r.random_range(1..=6);
        let log_alpha: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let g = gumbel_sample(n, &mut r);
        for tau in [10.0, 1.0, 0.1] {
            let z = ops::gumbel_softmax(&log_alpha, &g, tau).unwrap();
            assert!(z.iter().all(|&v| v >= 0.0));
            assert!((z.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let perturbed: Vec<f64> = log_alpha.iter().zip(&g).map(|(a, b)| a + b).collect();
        let hard = ops::gumbel_softmax(&log_alpha, &g, 1e-4).unwrap();
        assert!(hard[argmax(&perturbed)] > 0.999 || n == 1 || {
            // near-ties between the two largest perturbed logits do not sharpen
            let mut s = perturbed.clone();
            s.sort_by(|a, b| b.partial_cmp(a).unwrap());
            s[0] - s[1] < 1e-3
        });
    }
    let uniform = ops::gumbel_softmax(&[0.7f64; 5], &[0.0; 5], 0.3).unwrap();
    assert!(uniform.iter().all(|&v| (v - 0.2).abs() < 1e-15));
}

#[test]
fn decode_uses_logits_not_noise() {
    let states: Vec<GateState> = [[0.0, 0.0, 0.0, 3.0, 0.0], [0.0; 5], [-1.0, -1.0, 2.0, 2.0, -1.0]]
        .iter()
        .map(|la| GateState {
            log_alpha: la.to_vec(),
            tau: 0.1,
            candidates: DEFAULT_CANDIDATES.to_vec(),
            rng_seed: 0,
        })
        .collect();
    assert_eq!(decode_gates(&states).0, vec![8, 1, 4]);
}

fn tiny_gated(candidates: &[usize]) -> (NetworkSpec, NetworkSpec) {
    let plain = convert_to_dilated(&NetworkSpec::with_plan(4, [4, 4, 4, 4], 2).unwrap()).unwrap();
    let gated = plain.with_gated_tail(candidates, 4).unwrap();
    (plain, gated)
}

/// Loss of a gated network as a function of all four gate-logit vectors, at fixed noise.
fn gated_loss(
    spec: &NetworkSpec,
    params: &ParamStore<f64>,
    image: &lightseg::Tensor<f64>,
    targets: &[u8],
    noise: &[Vec<f64>],
    tau: f64,
) -> (f64, Vec<Vec<f64>>) {
    let mut s = Session::new(params, NormMode::Train, true);
    let x = s.input(image.clone());
    let mut gates = Vec::new();
    let mut logit_vars: Vec<Var> = Vec::new();
    for ((st, u), g) in spec.gated_units().into_iter().zip(noise) {
        let la = s.param(&format!("{}.gate.log_alpha", unit_prefix(st, u))).unwrap();
        logit_vars.push(la);
        gates.push(s.tape.gumbel_softmax(la, g, tau).unwrap());
    }
    let out = forward_segmentation(spec, &mut s, x, &gates).unwrap();
    let loss = s.tape.softmax_cross_entropy(out.logits, targets, Some(255)).unwrap();
    let value = s.tape.value(loss).item();
    let grads = s.tape.backward(loss).unwrap();
    let g = logit_vars.iter().map(|&v| grads.get(v).unwrap().data().to_vec()).collect();
    (value, g)
}

#[test]
fn gate_logit_gradient_matches_finite_differences() {
    let (_, gated) = tiny_gated(&DEFAULT_CANDIDATES);
    let mut params: ParamStore<f64> = ParamStore::<f32>::init(&gated, 4).cast();
    let mut r = rng(6);
    for (s, u) in gated.gated_units() {
        let la = params.get_mut(&format!("{}.gate.log_alpha", unit_prefix(s, u))).unwrap();
        la.data_mut().iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
    }
    let image = randn(Shape::new(2, 3, 32, 32), &mut r);
    let targets: Vec<u8> = (0..2 * 32 * 32).map(|_| r.random_range(0..2)).collect();
    let noise: Vec<Vec<f64>> = (0..4).map(|_| gumbel_sample(5, &mut r)).collect();
    let tau = 0.7;
    let (_, analytic) = gated_loss(&gated, &params, &image, &targets, &noise, tau);
    let h = 1e-6;
    for (gi, (s, u)) in gated.gated_units().into_iter().enumerate() {
        let name = format!("{}.gate.log_alpha", unit_prefix(s, u));
        let (mut diff, mut norm) = (0.0, 0.0);
        for i in 0..5 {
            let x0 = params.get(&name).unwrap().data()[i];
            params.get_mut(&name).unwrap().data_mut()[i] = x0 + h;
            let up = gated_loss(&gated, &params, &image, &targets, &noise, tau).0;
            params.get_mut(&name).unwrap().data_mut()[i] = x0 - h;
            let down = gated_loss(&gated, &params, &image, &targets, &noise, tau).0;
            params.get_mut(&name).unwrap().data_mut()[i] = x0;
            let num = (up - down) / (2.0 * h);
            diff += (num - analytic[gi][i]).powi(2);
            norm += num * num;
        }
        let rel = diff.sqrt() / norm.sqrt().max(1e-12);
        assert!(rel < 1e-3, "{name}: relative error {rel:.3e}");
    }
}

/// With a single candidate the gate is constant 1, so search is ordinary training.
#[test]
fn single_candidate_search_is_plain_training() {
    let (plain, gated) = tiny_gated(&[1]);
    let data = gen_planted_dilation(&GenConfig {
        task: Task::PlantedDilation,
        height: 32,
        width: 64,
        num_classes: 2,
        count: 8,
        seed: 1,
        planted_offset: Some(2),
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        total_steps: 6,
        batch_size: 2,
        crop_size: None,
        seed: 3,
        recompute_samples: 0,
        ..Default::default()
    };
    let plain_spec = plain.with_tail_dilations(&[1, 1, 1, 1]).unwrap();
    let pparams = ParamStore::init(&plain_spec, 9);
    let mut gparams = ParamStore::init(&gated, 9);
    let tail: Vec<String> = gated.gated_units().iter().map(|&(s, u)| unit_prefix(s, u)).collect();
    for (name, kind, t) in pparams.iter() {
        let mapped = tail
            .iter()
            .find(|p| name.starts_with(&format!("{p}.")) && !name.starts_with(&format!("{p}.proj")))
            .map(|p| format!("{}{}", branch_prefix(p, Some(0)), &name[p.len()..]))
            .unwrap_or_else(|| name.to_string());
        gparams.insert(&mapped, kind, t.clone());
    }
    let searched = search_from(
        &gated,
        gparams,
        &data,
        &SearchConfig {
            train: cfg.clone(),
            candidates: vec![1],
            ..Default::default()
        },
    )
    .unwrap();
    let trained = train_from(&plain_spec, pparams, &data, &cfg, None).unwrap();
    assert_eq!(searched.assignment.0, vec![1, 1, 1, 1]);
    assert_eq!(searched.log.losses(), trained.log.losses());
    for row in &searched.log.rows {
        for p in &row.gate_probs {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn search_trace_is_reported_per_step() {
    let (_, gated) = tiny_gated(&DEFAULT_CANDIDATES);
    let data = gen_planted_dilation(&GenConfig {
        task: Task::PlantedDilation,
        height: 32,
        width: 64,
        num_classes: 2,
        count: 8,
        seed: 2,
        planted_offset: Some(2),
        ..Default::default()
    })
    .unwrap();
    let cfg = SearchConfig {
        train: TrainConfig {
            total_steps: 5,
            batch_size: 2,
            crop_size: None,
            recompute_samples: 0,
            ..Default::default()
        },
        ..Default::default()
    };
    let out = search_from(&gated, ParamStore::init(&gated, 1), &data, &cfg).unwrap();
    assert_eq!(out.log.rows.len(), 5);
    let csv = out.log.to_csv();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("step,lr,tau,loss,"), "{header}");
    assert_eq!(header.split(',').count(), 4 + 4 * 5);
    let taus: Vec<f64> = out.log.rows.iter().map(|r| r.tau.unwrap()).collect();
    assert!(taus.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(taus[0], 5.0);
    assert!(out.decoded.units().all(|u| !u.is_gated()));
    assert_eq!(out.decoded.parameter_count(), gated.with_tail_dilations(&[1; 4]).unwrap().parameter_count());
}
