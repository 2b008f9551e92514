//! Training loop, poly schedule, cropping, BN-statistics recompute and IoU evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SegSample, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::gate::{anneal_temperature, gumbel_sample, AnnealSchedule};
use crate::model::{argmax_classes, forward_segmentation, NormMode, Session};
use crate::network::{NetworkSpec, Variant};
use crate::ops::{self, BatchStats};
use crate::optim::{Adam, AdamConfig};
use crate::params::{unit_prefix, ParamStore};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub lr_power: f64,
    pub batch_size: usize,
    /// Square crop side; `None` trains on full images.
    pub crop_size: Option<usize>,
    /// Pads crops up to the next multiple of the output stride (image zeros,
    /// mask ignored) instead of rejecting them.
    pub pad_crop: bool,
    pub total_steps: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub variant: Variant,
    pub convert: bool,
    pub dilations: Option<Vec<usize>>,
    pub bn_momentum: f64,
    pub adam: AdamConfig,
    /// Samples used for the BN-statistics recompute after training; 0 skips it.
    pub recompute_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-3,
            lr_power: 0.9,
            batch_size: 8,
            crop_size: Some(96),
            pad_crop: false,
            total_steps: 2000,
            num_classes: 2,
            seed: 0,
            variant: Variant::LightV1,
            convert: true,
            dilations: None,
            bn_momentum: 0.1,
            adam: AdamConfig::default(),
            recompute_samples: 32,
        }
    }
}

impl TrainConfig {
    /// Paper-scale settings: batch 32, crop 800.
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 32,
            crop_size: Some(800),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self, output_stride: usize) -> Result<()> {
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::InvalidArgument("batch_size and total_steps must be >= 1".into()));
        }
        if let Some(c) = self.crop_size {
            if c == 0 || (c % output_stride != 0 && !self.pad_crop) {
                return Err(Error::InvalidArgument(format!(
                    "crop size {c} is not a multiple of the output stride {output_stride} \
                     (set pad_crop to pad it up to {})",
                    c.div_ceil(output_stride) * output_stride
                )));
            }
        }
        if !(self.base_lr >= 0.0) || !(self.lr_power > 0.0) {
            return Err(Error::InvalidArgument("base_lr must be >= 0 and lr_power > 0".into()));
        }
        Ok(())
    }

    /// Network this configuration describes: variant, optional conversion,
    /// optional tail dilations.
    pub fn build_spec(&self) -> Result<NetworkSpec> {
        let mut spec = crate::network::build_network(self.variant, self.num_classes)?;
        if self.convert {
            spec = crate::convert::convert_to_dilated(&spec)?;
        }
        if let Some(d) = &self.dilations {
            spec = spec.with_tail_dilations(d)?;
        }
        Ok(spec)
    }
}

/// `base_lr · (1 − step/total)^power`.
pub fn poly_lr(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond total_steps {}",
            cfg.total_steps
        )));
    }
    let frac = 1.0 - step as f64 / cfg.total_steps as f64;
    Ok(cfg.base_lr * frac.powf(cfg.lr_power))
}

/// Square crop at an offset drawn uniformly; image and mask share the offset.
pub fn random_crop<R: Rng + ?Sized>(sample: &SegSample, crop: usize, rng: &mut R) -> Result<SegSample> {
    let (h, w) = (sample.height(), sample.width());
    if h < crop || w < crop {
        return Err(Error::InvalidArgument(format!(
            "{}: image {w}x{h} smaller than crop {crop}",
            sample.id
        )));
    }
    let dy = rng.random_range(0..=h - crop);
    let dx = rng.random_range(0..=w - crop);
    Ok(crop_at(sample, dy, dx, crop, crop))
}

pub fn crop_at(sample: &SegSample, dy: usize, dx: usize, ch: usize, cw: usize) -> SegSample {
    let (h, w) = (sample.height(), sample.width());
    let src = sample.image.data();
    let mut image = Vec::with_capacity(3 * ch * cw);
    for c in 0..3 {
        for y in dy..dy + ch {
            let off = c * h * w + y * w;
            image.extend_from_slice(&src[off + dx..off + dx + cw]);
        }
    }
    let mut mask = Vec::with_capacity(ch * cw);
    for y in dy..dy + ch {
        mask.extend_from_slice(&sample.mask[y * w + dx..y * w + dx + cw]);
    }
    SegSample {
        id: sample.id.clone(),
        image: Tensor::from_vec(Shape::new(1, 3, ch, cw), image).expect("crop size"),
        mask,
    }
}

fn pad_to(sample: &SegSample, size: usize) -> SegSample {
    let (h, w) = (sample.height(), sample.width());
    let mut image = vec![0f32; 3 * size * size];
    let mut mask = vec![IGNORE_LABEL; size * size];
    let src = sample.image.data();
    for y in 0..h {
        for c in 0..3 {
            let s = c * h * w + y * w;
            let d = c * size * size + y * size;
            image[d..d + w].copy_from_slice(&src[s..s + w]);
        }
        mask[y * size..y * size + w].copy_from_slice(&sample.mask[y * w..y * w + w]);
    }
    SegSample {
        id: sample.id.clone(),
        image: Tensor::from_vec(Shape::new(1, 3, size, size), image).expect("pad size"),
        mask,
    }
}

// ---------------------------------------------------------------------------
// metrics

/// Global confusion matrix, `counts[target · C + pred]`. Ignored pixels are skipped.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Confusion {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, pred: &[u8], target: &[u8]) -> Result<()> {
        if pred.len() != target.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, target {}",
                pred.len(),
                target.len()
            )));
        }
        let c = self.num_classes;
        for (&p, &t) in pred.iter().zip(target) {
            if t == IGNORE_LABEL {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= c || t >= c {
                return Err(Error::InvalidArgument(format!(
                    "label {} outside [0, {c})",
                    p.max(t)
                )));
            }
            self.counts[t * c + p] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// IoU per class; `None` for classes absent from both prediction and target.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.counts[k * c + k];
                let target: u64 = (0..c).map(|j| self.counts[k * c + j]).sum();
                let pred: u64 = (0..c).map(|j| self.counts[j * c + k]).sum();
                let union = target + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn mean_iou(&self) -> Option<f64> {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

pub fn mean_iou(pred: &[u8], target: &[u8], num_classes: usize) -> Result<f64> {
    let mut cm = Confusion::new(num_classes);
    cm.add(pred, target)?;
    cm.mean_iou()
        .ok_or_else(|| Error::InvalidArgument("mean IoU of empty masks".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_classes: usize,
    pub samples: usize,
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    /// Target pixels per class.
    pub pixel_counts: Vec<u64>,
    pub confusion: Confusion,
    /// Whether BN running statistics were estimated for this network geometry.
    pub bn_stats_fresh: bool,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

const EVAL_BATCH: usize = 4;

/// Infer-mode argmax predictions over the whole dataset, one global confusion matrix.
pub fn evaluate(spec: &NetworkSpec, params: &ParamStore<f32>, data: &Dataset) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation dataset is empty".into()));
    }
    let mut cm = Confusion::new(spec.num_classes);
    for chunk in batches_of_equal_size(&data.samples, EVAL_BATCH) {
        let images: Vec<Tensor<f32>> = chunk.iter().map(|s| s.image.clone()).collect();
        let x = Tensor::stack(&images)?;
        let logits = crate::model::predict(spec, params, &x)?;
        let pred = argmax_classes(&logits);
        let target: Vec<u8> = chunk.iter().flat_map(|s| s.mask.iter().copied()).collect();
        cm.add(&pred, &target)?;
    }
    let c = spec.num_classes;
    let pixel_counts = (0..c).map(|k| (0..c).map(|j| cm.counts[k * c + j]).sum()).collect();
    Ok(EvalReport {
        num_classes: c,
        samples: data.len(),
        per_class_iou: cm.per_class_iou(),
        mean_iou: cm.mean_iou().unwrap_or(0.0),
        pixel_counts,
        confusion: cm,
        bn_stats_fresh: params.stats_fresh(spec),
    })
}

/// Consecutive runs of at most `n` samples that share a spatial size.
fn batches_of_equal_size(samples: &[SegSample], n: usize) -> Vec<&[SegSample]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=samples.len() {
        let split = i == samples.len()
            || i - start == n
            || samples[i].image.shape() != samples[start].image.shape();
        if split {
            out.push(&samples[start..i]);
            start = i;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// BN statistics

/// Pools per-batch statistics into statistics over their union.
fn pool_stats(parts: &[BatchStats]) -> BatchStats {
    let c = parts[0].mean.len();
    let total: usize = parts.iter().map(|p| p.count).sum();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for k in 0..c {
        let m = parts.iter().map(|p| p.mean[k] * p.count as f64).sum::<f64>() / total as f64;
        let ss: f64 = parts
            .iter()
            .map(|p| p.count as f64 * (p.var[k] + (p.mean[k] - m).powi(2)))
            .sum();
        mean[k] = m;
        var[k] = ss / total as f64;
    }
    BatchStats { mean, var, count: total }
}

/// Replaces running means/variances with statistics of `images` as seen by a
/// train-mode pass over all of them at once.
///
/// Each pass runs the network in infer mode and sets every BN layer's running
/// statistics to the pooled (biased) statistics of its input. A layer's input
/// only depends on the layers before it, so after `passes` ≥ BN depth the
/// statistics no longer change. Weights are untouched.
pub fn recompute_bn_stats(
    spec: &NetworkSpec,
    params: &mut ParamStore<f32>,
    images: &[Tensor<f32>],
    passes: usize,
) -> Result<()> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("BN recompute needs at least one image".into()));
    }
    if !spec.gated_units().is_empty() {
        return Err(Error::InvalidArgument("BN recompute runs on plain (decoded) networks".into()));
    }
    for _ in 0..passes {
        let mut per_layer: BTreeMap<String, Vec<BatchStats>> = BTreeMap::new();
        for chunk in images.chunks(EVAL_BATCH) {
            let x = Tensor::stack(chunk)?;
            let mut s = Session::new(params, NormMode::Collect, false);
            let xv = s.input(x);
            forward_segmentation(spec, &mut s, xv, &[])?;
            for (name, st) in s.bn_stats {
                per_layer.entry(name).or_default().push(st);
            }
        }
        for (prefix, parts) in per_layer {
            let st = pool_stats(&parts);
            set_running(params, &prefix, &st.mean, &st.var)?;
        }
    }
    params.stats_geometry = Some(spec.geometry_key());
    Ok(())
}

fn set_running(params: &mut ParamStore<f32>, prefix: &str, mean: &[f64], var: &[f64]) -> Result<()> {
    let rm = params.get_mut(&format!("{prefix}.running_mean"))?;
    rm.data_mut().iter_mut().zip(mean).for_each(|(r, &m)| *r = m as f32);
    let rv = params.get_mut(&format!("{prefix}.running_var"))?;
    rv.data_mut().iter_mut().zip(var).for_each(|(r, &v)| *r = v as f32);
    Ok(())
}

fn ema_running(params: &mut ParamStore<f32>, prefix: &str, st: &BatchStats, momentum: f64) -> Result<()> {
    let m = momentum as f32;
    let rm = params.get_mut(&format!("{prefix}.running_mean"))?;
    for (r, &v) in rm.data_mut().iter_mut().zip(&st.mean) {
        *r = (1.0 - m) * *r + m * v as f32;
    }
    let rv = params.get_mut(&format!("{prefix}.running_var"))?;
    for (r, &v) in rv.data_mut().iter_mut().zip(&st.var) {
        *r = (1.0 - m) * *r + m * v as f32;
    }
    Ok(())
}

/// Sequential BN layers along the deepest path (stem, then two per unit).
pub fn bn_depth(spec: &NetworkSpec) -> usize {
    1 + 2 * spec.unit_count()
}

// ---------------------------------------------------------------------------
// training loop

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub tau: Option<f64>,
    pub loss: f32,
    /// softmax(log_alpha) per gated unit after the step's update.
    pub gate_probs: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    /// `step,lr,[tau,]loss[,g{u}_p{i}...]`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let first = self.rows.first();
        let searching = first.is_some_and(|r| r.tau.is_some());
        out.push_str("step,lr");
        if searching {
            out.push_str(",tau");
        }
        out.push_str(",loss");
        if let Some(r) = first {
            for (u, probs) in r.gate_probs.iter().enumerate() {
                for i in 0..probs.len() {
                    let _ = write!(out, ",g{u}_p{i}");
                }
            }
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.step, r.lr);
            if let Some(t) = r.tau {
                let _ = write!(out, ",{t}");
            }
            let _ = write!(out, ",{}", r.loss);
            for p in r.gate_probs.iter().flatten() {
                let _ = write!(out, ",{p}");
            }
            out.push('\n');
        }
        out
    }

    pub fn losses(&self) -> Vec<f32> {
        self.rows.iter().map(|r| r.loss).collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore<f32>,
    pub log: TrainLog,
}

/// Trains a freshly initialized network.
pub fn train(spec: &NetworkSpec, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_from(spec, ParamStore::init(spec, cfg.seed), data, cfg, None)
}

struct BatchSource<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl<'a> BatchSource<'a> {
    fn next_batch(&mut self, cfg: &TrainConfig, output_stride: usize) -> Result<(Tensor<f32>, Vec<u8>)> {
        let mut images = Vec::with_capacity(cfg.batch_size);
        let mut masks = Vec::new();
        for _ in 0..cfg.batch_size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let s = &self.data.samples[self.order[self.pos]];
            self.pos += 1;
            let s = match cfg.crop_size {
                Some(c) => {
                    let cropped = random_crop(s, c, &mut self.rng)?;
                    let padded = c.div_ceil(output_stride) * output_stride;
                    if padded != c {
                        pad_to(&cropped, padded)
                    } else {
                        cropped
                    }
                }
                None => s.clone(),
            };
            masks.extend_from_slice(&s.mask);
            images.push(s.image);
        }
        Ok((Tensor::stack(&images)?, masks))
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Trains from the given parameters. With `anneal`, gated units sample
/// Gumbel-Softmax gate weights each step and the gate logits are trained
/// with everything else.
pub fn train_from(
    spec: &NetworkSpec,
    mut params: ParamStore<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    anneal: Option<&AnnealSchedule>,
) -> Result<TrainOutcome> {
    let os = spec.output_stride();
    cfg.validate(os)?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    if data.num_classes != spec.num_classes {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, network {}",
            data.num_classes, spec.num_classes
        )));
    }
    params.check_against(spec)?;
    let gated: Vec<(String, usize)> = spec
        .gated_units()
        .into_iter()
        .map(|(s, u)| {
            let n = match &spec.stages[s][u].kind {
                crate::network::UnitKind::Gated { candidates } => candidates.len(),
                crate::network::UnitKind::Plain => 0,
            };
            (format!("{}.gate.log_alpha", unit_prefix(s, u)), n)
        })
        .collect();
    if !gated.is_empty() && anneal.is_none() {
        return Err(Error::InvalidArgument("gated network needs an annealing schedule".into()));
    }
    let mut batches = BatchSource {
        data,
        order: (0..data.len()).collect(),
        pos: data.len(),
        rng: stream_rng(cfg.seed, 1),
    };
    let mut gumbel_rng = stream_rng(cfg.seed, 2);
    let mut adam = Adam::new(cfg.adam);
    let mut log = TrainLog::default();
    for step in 0..cfg.total_steps {
        let lr = poly_lr(step, cfg)?;
        let tau = anneal.map(|a| anneal_temperature(step, a)).transpose()?;
        let (x, masks) = batches.next_batch(cfg, os)?;
        let mut s = Session::new(&params, NormMode::Train, true);
        let xv = s.input(x);
        let mut gates = Vec::with_capacity(gated.len());
        for (name, n) in &gated {
            let la = s.param(name)?;
            let noise: Vec<f32> = gumbel_sample(*n, &mut gumbel_rng).into_iter().map(|g| g as f32).collect();
            gates.push(s.tape.gumbel_softmax(la, &noise, tau.expect("gated") as f32)?);
        }
        let out = forward_segmentation(spec, &mut s, xv, &gates)?;
        let loss_var = s.tape.softmax_cross_entropy(out.logits, &masks, Some(IGNORE_LABEL))?;
        let loss = s.tape.value(loss_var).item();
        if !loss.is_finite() {
            log.rows.push(LogRow {
                step,
                lr,
                tau,
                loss,
                gate_probs: Vec::new(),
            });
            return Err(Error::Diverged {
                step,
                trace: log.to_csv(),
            });
        }
        let grads = s.tape.backward(loss_var)?;
        let vars = s.param_vars().clone();
        let stats = std::mem::take(&mut s.bn_stats);
        drop(s);
        for (name, var) in vars {
            if let Some(g) = grads.get(var) {
                match adam.step(&name, params.get_mut(&name)?, g, lr) {
                    Err(Error::NonFinite(_)) => {
                        log.rows.push(LogRow { step, lr, tau, loss, gate_probs: Vec::new() });
                        return Err(Error::Diverged { step, trace: log.to_csv() });
                    }
                    r => r?,
                }
            }
        }
        for (prefix, st) in &stats {
            ema_running(&mut params, prefix, st, cfg.bn_momentum)?;
        }
        let gate_probs = gated
            .iter()
            .map(|(name, _)| {
                let la: Vec<f64> = params.get(name)?.data().iter().map(|&v| f64::from(v)).collect();
                Ok(ops::softmax(&la))
            })
            .collect::<Result<_>>()?;
        log.rows.push(LogRow {
            step,
            lr,
            tau,
            loss,
            gate_probs,
        });
    }
    params.stats_geometry = Some(spec.geometry_key());
    if cfg.recompute_samples > 0 && gated.is_empty() {
        let images = recompute_images(data, cfg, os)?;
        recompute_bn_stats(spec, &mut params, &images, bn_depth(spec))?;
    }
    Ok(TrainOutcome { params, log })
}

/// Deterministic recompute set: the first samples, center-cropped like training inputs.
fn recompute_images(data: &Dataset, cfg: &TrainConfig, os: usize) -> Result<Vec<Tensor<f32>>> {
    data.samples
        .iter()
        .take(cfg.recompute_samples)
        .map(|s| {
            let s = match cfg.crop_size {
                Some(c) if s.height() >= c && s.width() >= c => {
                    let cropped = crop_at(s, (s.height() - c) / 2, (s.width() - c) / 2, c, c);
                    let padded = c.div_ceil(os) * os;
                    if padded != c {
                        pad_to(&cropped, padded)
                    } else {
                        cropped
                    }
                }
                _ => s.clone(),
            };
            Ok(s.image)
        })
        .collect()
}
