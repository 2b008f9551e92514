//! Analytic FLOP counting, latency measurement, mask overlays, report tables.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::predict;
use crate::network::{NetworkSpec, UnitKind};
use crate::ops::{self, ConvGeom};
use crate::params::{branch_prefix, unit_prefix, ParamStore};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub name: String,
    pub kind: String,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub total: u64,
    pub layers: Vec<LayerFlops>,
}

impl FlopReport {
    /// Conv MACs of layers whose name starts with `prefix` (e.g. `"layer4."`).
    pub fn conv_macs(&self, prefix: &str) -> u64 {
        self.layers
            .iter()
            .filter(|l| l.kind == "conv" && l.name.starts_with(prefix))
            .map(|l| l.macs)
            .sum()
    }
}

struct Counter {
    n: u64,
    layers: Vec<LayerFlops>,
}

impl Counter {
    fn conv(&mut self, name: String, cin: usize, cout: usize, k: usize, h: usize, w: usize) {
        let macs = self.n * (cout * cin * k * k * h * w) as u64;
        self.layers.push(LayerFlops { name, kind: "conv".into(), macs });
    }

    fn bn(&mut self, name: String, c: usize, h: usize, w: usize) {
        let macs = self.n * (c * h * w) as u64;
        self.layers.push(LayerFlops { name, kind: "bn".into(), macs });
    }
}

fn out_hw(h: usize, w: usize, k: usize, stride: usize, dilation: usize, pad: usize) -> Result<(usize, usize)> {
    let oh = ConvGeom::out_dim(h, k, stride, dilation, pad);
    let ow = ConvGeom::out_dim(w, k, stride, dilation, pad);
    oh.zip(ow)
        .ok_or_else(|| Error::Shape(format!("input {h}x{w} too small for the network")))
}

/// Multiply-accumulates of every conv (`Cout·Cin·kh·kw·H'·W'`) and BN layer
/// (`C·H·W`) for an input of `input_shape`. Gated units count every branch.
pub fn flop_count(spec: &NetworkSpec, input_shape: Shape) -> Result<FlopReport> {
    let [n, _, h, w] = input_shape.0;
    let mut c = Counter {
        n: n as u64,
        layers: Vec::new(),
    };
    let st = &spec.stem;
    let (mut h, mut w) = out_hw(h, w, st.kernel, st.stride, 1, (st.kernel - 1) / 2)?;
    c.conv("stem.conv".into(), st.in_channels, st.channels, st.kernel, h, w);
    c.bn("stem.bn".into(), st.channels, h, w);
    (h, w) = out_hw(h, w, st.pool_kernel, st.pool_stride, 1, st.pool_kernel / 2)?;
    for (si, units) in spec.stages.iter().enumerate() {
        for (ui, unit) in units.iter().enumerate() {
            let prefix = unit_prefix(si, ui);
            let (oh, ow) = out_hw(h, w, 3, unit.stride, 1, 1)?;
            let branches: Vec<Option<usize>> = match &unit.kind {
                UnitKind::Plain => vec![None],
                UnitKind::Gated { candidates } => (0..candidates.len()).map(Some).collect(),
            };
            for b in branches {
                let p = branch_prefix(&prefix, b);
                c.conv(format!("{p}.conv1"), unit.in_channels, unit.out_channels, 3, oh, ow);
                c.bn(format!("{p}.bn1"), unit.out_channels, oh, ow);
                c.conv(format!("{p}.conv2"), unit.out_channels, unit.out_channels, 3, oh, ow);
                c.bn(format!("{p}.bn2"), unit.out_channels, oh, ow);
            }
            if unit.has_projection {
                c.conv(format!("{prefix}.proj.conv"), unit.in_channels, unit.out_channels, 1, oh, ow);
                c.bn(format!("{prefix}.proj.bn"), unit.out_channels, oh, ow);
            }
            (h, w) = (oh, ow);
        }
    }
    c.conv("head.conv".into(), spec.head.in_channels, spec.num_classes, 1, h, w);
    let total = c.layers.iter().map(|l| l.macs).sum();
    Ok(FlopReport {
        total,
        layers: c.layers,
    })
}

pub const MIN_REPORT_ITERS: usize = 30;
pub const MIN_WARMUP: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub variant: String,
    pub input_shape: [usize; 4],
    pub warmup: usize,
    pub iters: usize,
    pub times_ms: Vec<f64>,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub fps: f64,
    pub flops: u64,
    pub threads: usize,
    /// What one timed iteration covers.
    pub scope: String,
}

impl LatencyReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Median (mean of the middle pair for even counts) and nearest-rank p95.
pub fn summarize(times: &[f64]) -> (f64, f64, f64, f64) {
    let mut s = times.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    };
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    let mean = s.iter().sum::<f64>() / n as f64;
    (mean, median, s[rank - 1], s[0])
}

/// Times `iters` infer-mode forward passes (including the upsampling head) on
/// one seeded random input, after `warmup` untimed passes.
pub fn benchmark(
    spec: &NetworkSpec,
    params: &ParamStore<f32>,
    input_shape: Shape,
    warmup: usize,
    iters: usize,
    seed: u64,
) -> Result<LatencyReport> {
    Ok(benchmark_all(&[(spec, params)], input_shape, warmup, iters, seed)?.remove(0))
}

/// Like [`benchmark`] for several networks, but the timed passes are
/// interleaved, rotating the order each round, so load drift on the machine hits every network
/// alike and the relative ordering is stable.
pub fn benchmark_all(
    nets: &[(&NetworkSpec, &ParamStore<f32>)],
    input_shape: Shape,
    warmup: usize,
    iters: usize,
    seed: u64,
) -> Result<Vec<LatencyReport>> {
    if iters < MIN_REPORT_ITERS {
        return Err(Error::InvalidArgument(format!(
            "a latency report needs at least {MIN_REPORT_ITERS} timed iterations, got {iters}"
        )));
    }
    if warmup < MIN_WARMUP {
        return Err(Error::InvalidArgument(format!(
            "warmup must be at least {MIN_WARMUP}, got {warmup}"
        )));
    }
    for (spec, _) in nets {
        spec.check_input(input_shape)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..input_shape.numel()).map(|_| rng.random::<f32>()).collect();
    let x = Tensor::from_vec(input_shape, data)?;
    for (spec, params) in nets {
        for _ in 0..warmup {
            predict(spec, params, &x)?;
        }
    }
    let mut times = vec![Vec::with_capacity(iters); nets.len()];
    for i in 0..iters {
        // rotate the order so no network always runs on the cache left by the same predecessor
        for j in (0..nets.len()).map(|j| (j + i) % nets.len()) {
            let (spec, params) = nets[j];
            let t = Instant::now();
            let y = predict(spec, params, &x)?;
            times[j].push(t.elapsed().as_secs_f64() * 1e3);
            if !y.all_finite() {
                return Err(Error::NonFinite(format!("benchmark iteration {i}: non-finite logits")));
            }
        }
    }
    nets.iter()
        .zip(times)
        .map(|((spec, _), times)| {
            let (mean, median, p95, min) = summarize(&times);
            Ok(LatencyReport {
                variant: spec.variant.to_string(),
                input_shape: input_shape.0,
                warmup,
                iters,
                times_ms: times,
                mean_ms: mean,
                median_ms: median,
                p95_ms: p95,
                min_ms: min,
                fps: 1000.0 / median,
                flops: flop_count(spec, input_shape)?.total,
                threads: ops::kernel_threads(),
                scope: "single infer-mode forward incl. 1x1 head and bilinear upsampling, CPU".into(),
            })
        })
        .collect()
}

/// Class colors; class 0 (background) is left unpainted.
pub const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [255, 0, 0],
    [0, 255, 0],
    [255, 255, 0],
    [0, 128, 255],
    [255, 0, 255],
    [0, 255, 255],
    [255, 128, 0],
];

pub const OVERLAY_ALPHA: f64 = 0.5;

pub fn class_color(class: u8) -> [u8; 3] {
    PALETTE[class as usize % PALETTE.len()]
}

/// Alpha-blends class colors over the image; background pixels keep the image.
pub fn overlay_rgb(image: &Tensor<f32>, mask: &[u8]) -> Result<image::RgbImage> {
    let [n, c, h, w] = image.shape().0;
    if n != 1 || c != 3 || mask.len() != h * w {
        return Err(Error::Shape(format!(
            "overlay needs a (1,3,H,W) image and H·W mask, got {} and {} pixels",
            image.shape(),
            mask.len()
        )));
    }
    let mut rgb = crate::data::image_to_rgb8(image);
    for (i, px) in rgb.pixels_mut().enumerate() {
        let k = mask[i];
        if k == 0 || k == crate::data::IGNORE_LABEL {
            continue;
        }
        let col = class_color(k);
        for ch in 0..3 {
            let v = (1.0 - OVERLAY_ALPHA) * f64::from(px.0[ch]) + OVERLAY_ALPHA * f64::from(col[ch]);
            px.0[ch] = v.round() as u8;
        }
    }
    Ok(rgb)
}

pub fn render_overlay(image: &Tensor<f32>, mask: &[u8], path: impl AsRef<Path>) -> Result<()> {
    overlay_rgb(image, mask)?.save(path)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub iou: Option<f64>,
    pub time_ms: Option<f64>,
}

/// Aligned `Model | IOU | Time` table.
pub fn format_table(rows: &[TableRow]) -> String {
    let cells: Vec<[String; 3]> = rows
        .iter()
        .map(|r| {
            [
                r.model.clone(),
                r.iou.map_or("-".into(), |v| format!("{v:.3}")),
                r.time_ms.map_or("-".into(), |v| format!("{v:.1} ms")),
            ]
        })
        .collect();
    let header = ["Model".to_string(), "IOU".to_string(), "Time".to_string()];
    let mut width = [0usize; 3];
    for row in std::iter::once(&header).chain(&cells) {
        for (i, c) in row.iter().enumerate() {
            width[i] = width[i].max(c.chars().count());
        }
    }
    let line = |r: &[String; 3]| {
        format!(
            "{:<w0$} | {:>w1$} | {:>w2$}\n",
            r[0],
            r[1],
            r[2],
            w0 = width[0],
            w1 = width[1],
            w2 = width[2]
        )
    };
    let mut out = line(&header);
    out.push_str(&format!(
        "{}-+-{}-+-{}\n",
        "-".repeat(width[0]),
        "-".repeat(width[1]),
        "-".repeat(width[2])
    ));
    for r in &cells {
        out.push_str(&line(r));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convert::convert_to_dilated;
    use crate::network::{build_network, Variant};

    #[test]
    fn single_mac_conv() {
        let mut c = Counter { n: 1, layers: Vec::new() };
        c.conv("x".into(), 1, 1, 1, 1, 1);
        assert_eq!(c.layers[0].macs, 1);
    }

    #[test]
    fn converted_stage4_is_16x() {
        let s = build_network(Variant::Standard, 2).unwrap();
        let c = convert_to_dilated(&s).unwrap();
        let shape = Shape::new(1, 3, 256, 320);
        let a = flop_count(&s, shape).unwrap();
        let b = flop_count(&c, shape).unwrap();
        assert_eq!(b.conv_macs("layer4."), 16 * a.conv_macs("layer4."));
        assert_eq!(b.conv_macs("layer3."), 4 * a.conv_macs("layer3."));
        assert_eq!(flop_count(&c, shape).unwrap(), b);
    }

    #[test]
    fn summary_order() {
        let t: Vec<f64> = (1..=40).map(f64::from).collect();
        let (mean, med, p95, min) = summarize(&t);
        assert_eq!((mean, med, p95, min), (20.5, 20.5, 38.0, 1.0));
    }

    #[test]
    fn overlay_blend() {
        let blue = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![0.0, 0.0, 1.0]).unwrap();
        let px = overlay_rgb(&blue, &[1]).unwrap().get_pixel(0, 0).0;
        assert_eq!(px, [128, 0, 128]);
        let bg = overlay_rgb(&blue, &[0]).unwrap().get_pixel(0, 0).0;
        assert_eq!(bg, [0, 0, 255]);
        assert!(overlay_rgb(&blue, &[0, 1]).is_err());
    }

    #[test]
    fn table_layout() {
        let t = format_table(&[
            TableRow { model: "light_v2".into(), iou: Some(0.8), time_ms: Some(11.8) },
            TableRow { model: "standard".into(), iou: None, time_ms: Some(126.0) },
        ]);
        let lines: Vec<_> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines.iter().all(|l| l.len() == lines[0].len()));
        assert!(lines[2].contains("0.800"));
    }
}
