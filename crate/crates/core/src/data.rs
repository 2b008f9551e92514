//! Synthetic segmentation datasets and PNG image/mask directories.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Mask value for pixels that carry no label; skipped by the loss and by IoU.
pub const IGNORE_LABEL: u8 = 255;

/// Planted-task cell size in pixels; equals the output stride of a converted network.
pub const PLANTED_CELL: usize = 8;

pub const PLANTED_OFFSETS: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    /// (1, 3, H, W), values in [0, 1].
    pub image: Tensor<f32>,
    /// H·W class ids, row-major.
    pub mask: Vec<u8>,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.image.shape().h()
    }

    pub fn width(&self) -> usize {
        self.image.shape().w()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let s = self.image.shape();
        if s.n() != 1 || s.c() != 3 {
            return Err(Error::Shape(format!("{}: image shape {s}, expected (1,3,H,W)", self.id)));
        }
        if self.mask.len() != s.plane() {
            return Err(Error::Shape(format!(
                "{}: mask has {} pixels, image has {}x{}",
                self.id,
                self.mask.len(),
                s.h(),
                s.w()
            )));
        }
        if let Some(&bad) = self
            .mask
            .iter()
            .find(|&&v| v as usize >= num_classes && v != IGNORE_LABEL)
        {
            return Err(Error::InvalidArgument(format!(
                "{}: mask value {bad} outside [0, {num_classes})",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Blobs,
    PlantedDilation,
    /// Loaded from disk without a generator.
    External,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub task: Task,
    pub seed: u64,
    pub samples: Vec<SegSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// First `n` samples, and the rest.
    pub fn split(mut self, n: usize) -> (Dataset, Dataset) {
        let rest = self.samples.split_off(n.min(self.samples.len()));
        let tail = Dataset {
            samples: rest,
            ..self.clone()
        };
        (self, tail)
    }
}

/// Appearance of the blob task; sizes are fractions of min(H, W).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobParams {
    /// Value-noise lattice cells across the shorter image side.
    pub noise_cells: usize,
    pub half_length: (f64, f64),
    pub radius: (f64, f64),
    /// Capsule center range, as a fraction of each image dimension.
    pub center: (f64, f64),
    pub pixel_noise: f64,
}

impl Default for BlobParams {
    fn default() -> Self {
        BlobParams {
            noise_cells: 6,
            half_length: (0.22, 0.36),
            radius: (0.07, 0.12),
            center: (0.35, 0.65),
            pixel_noise: 0.04,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub task: Task,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub count: usize,
    pub seed: u64,
    pub planted_offset: Option<usize>,
    pub blobs: BlobParams,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            task: Task::Blobs,
            height: 96,
            width: 96,
            num_classes: 2,
            count: 256,
            seed: 0,
            planted_offset: None,
            blobs: BlobParams::default(),
        }
    }
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinearly interpolated random lattice, smoothstep-eased, values in [0, 1].
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cells: usize) -> Vec<f64> {
    let cell = (h.min(w) as f64 / cells.max(1) as f64).max(1.0);
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>()).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 / cell;
        let (y0, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..w {
            let fx = x as f64 / cell;
            let (x0, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
            let bot = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Per-part base colors: background tissue is drawn separately.
const PART_COLORS: [[f64; 3]; 4] = [
    [0.0, 0.0, 0.0],
    [0.62, 0.64, 0.68],
    [0.80, 0.78, 0.70],
    [0.45, 0.50, 0.62],
];

fn blob_sample(cfg: &GenConfig, index: usize) -> SegSample {
    let (h, w) = (cfg.height, cfg.width);
    let p = &cfg.blobs;
    let mut rng = sample_rng(cfg.seed, index);
    let n1 = value_noise(&mut rng, h, w, p.noise_cells);
    let n2 = value_noise(&mut rng, h, w, p.noise_cells * 2);
    let side = h.min(w) as f64;
    let cy = uniform(&mut rng, p.center) * h as f64;
    let cx = uniform(&mut rng, p.center) * w as f64;
    let theta = rng.random::<f64>() * std::f64::consts::PI;
    let half = uniform(&mut rng, p.half_length) * side;
    let radius = uniform(&mut rng, p.radius) * side;
    let (dy, dx) = (theta.sin(), theta.cos());
    // Segment from the shaft end (t = 0) to the jaw tip (t = 1).
    let (ay, ax) = (cy - dy * half, cx - dx * half);
    let len = 2.0 * half;
    let mut image = vec![0f32; 3 * h * w];
    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (py, px) = (y as f64 + 0.5 - ay, x as f64 + 0.5 - ax);
            let t = ((py * dy + px * dx) / len).clamp(0.0, 1.0);
            let (qy, qx) = (py - t * len * dy, px - t * len * dx);
            let inside = qy * qy + qx * qx <= radius * radius;
            let grain = (rng.random::<f64>() - 0.5) * 2.0 * p.pixel_noise;
            let rgb = if inside {
                let class = if cfg.num_classes == 2 {
                    1
                } else {
                    1 + ((t * 3.0) as usize).min(2)
                };
                mask[i] = class as u8;
                let base = PART_COLORS[if cfg.num_classes == 2 { 1 } else { class }];
                let shade = 0.85 + 0.3 * n2[i];
                [base[0] * shade, base[1] * shade, base[2] * shade]
            } else {
                let a = n1[i];
                let b = n2[i];
                [0.45 + 0.35 * a, 0.12 + 0.2 * b, 0.10 + 0.15 * a * b]
            };
            for (c, v) in rgb.iter().enumerate() {
                image[c * h * w + i] = (v + grain).clamp(0.0, 1.0) as f32;
            }
        }
    }
    SegSample {
        id: format!("{index:04}"),
        image: Tensor::from_vec(Shape::new(1, 3, h, w), image).expect("sized"),
        mask,
    }
}

fn check_gen(cfg: &GenConfig) -> Result<()> {
    if cfg.height == 0 || cfg.width == 0 {
        return Err(Error::InvalidArgument("image dims must be positive".into()));
    }
    if cfg.count == 0 {
        return Err(Error::InvalidArgument("count must be >= 1".into()));
    }
    Ok(())
}

/// Textured background with a rotated capsule "instrument". With C = 4 the
/// capsule is split lengthwise into shaft, wrist and jaws.
pub fn gen_blobs(cfg: &GenConfig) -> Result<Dataset> {
    check_gen(cfg)?;
    if cfg.num_classes != 2 && cfg.num_classes != 4 {
        return Err(Error::InvalidArgument(format!(
            "blob task supports C = 2 or 4, got {}",
            cfg.num_classes
        )));
    }
    let samples: Vec<SegSample> = (0..cfg.count)
        .into_par_iter()
        .map(|i| blob_sample(cfg, i))
        .collect();
    for s in &samples {
        s.validate(cfg.num_classes)?;
    }
    Ok(Dataset {
        num_classes: cfg.num_classes,
        task: Task::Blobs,
        seed: cfg.seed,
        samples,
    })
}

/// Probability that a cell carries a marker. Makes both labels equally likely:
/// P(neither partner marked) = (1 − p)² = 1/2.
pub const PLANTED_MARK_PROB: f64 = 0.292_893_218_813_452_5;

/// Cell-level reference labeler: 1 if the cell `offset` to the left or to the
/// right is marked, 0 if both are unmarked, [`IGNORE_LABEL`] if either lies
/// outside the grid.
pub fn planted_reference_labels(marks: &[bool], rows: usize, cols: usize, offset: usize) -> Vec<u8> {
    let mut out = vec![IGNORE_LABEL; rows * cols];
    for r in 0..rows {
        for c in offset..cols.saturating_sub(offset) {
            let on = marks[r * cols + c - offset] || marks[r * cols + c + offset];
            out[r * cols + c] = u8::from(on);
        }
    }
    out
}

fn planted_sample(cfg: &GenConfig, offset: usize, index: usize) -> SegSample {
    let (h, w) = (cfg.height, cfg.width);
    let (rows, cols) = (h / PLANTED_CELL, w / PLANTED_CELL);
    let mut rng = sample_rng(cfg.seed, index);
    let marks: Vec<bool> = (0..rows * cols).map(|_| rng.random::<f64>() < PLANTED_MARK_PROB).collect();
    let labels = planted_reference_labels(&marks, rows, cols, offset);
    let mut image = vec![0f32; 3 * h * w];
    let mut mask = vec![0u8; h * w];
    let q = PLANTED_CELL / 4;
    for y in 0..h {
        for x in 0..w {
            let (r, c) = (y / PLANTED_CELL, x / PLANTED_CELL);
            let (iy, ix) = (y % PLANTED_CELL, x % PLANTED_CELL);
            let in_square = (q..PLANTED_CELL - q).contains(&iy) && (q..PLANTED_CELL - q).contains(&ix);
            let lit = marks[r * cols + c] && in_square;
            for ch in 0..3 {
                let bg = 0.1 + 0.3 * rng.random::<f64>();
                image[ch * h * w + y * w + x] = if lit { 0.95 } else { bg as f32 } as f32;
            }
            mask[y * w + x] = labels[r * cols + c];
        }
    }
    SegSample {
        id: format!("{index:04}"),
        image: Tensor::from_vec(Shape::new(1, 3, h, w), image).expect("sized"),
        mask,
    }
}

/// Grid of 8×8-pixel cells, some carrying a bright marker. A cell's label says
/// whether the cell `planted_offset` cells away along its row, on either side,
/// is marked; its own content is irrelevant. Cells whose partner would fall
/// outside the image are unlabeled.
pub fn gen_planted_dilation(cfg: &GenConfig) -> Result<Dataset> {
    check_gen(cfg)?;
    let offset = cfg.planted_offset.ok_or_else(|| {
        Error::InvalidArgument("planted task needs planted_offset".into())
    })?;
    if !PLANTED_OFFSETS.contains(&offset) {
        return Err(Error::InvalidArgument(format!(
            "planted_offset must be one of {PLANTED_OFFSETS:?}, got {offset}"
        )));
    }
    if cfg.num_classes != 2 {
        return Err(Error::InvalidArgument("planted task is binary (C = 2)".into()));
    }
    if cfg.height % PLANTED_CELL != 0 || cfg.width % PLANTED_CELL != 0 {
        return Err(Error::InvalidArgument(format!(
            "planted task dims must be multiples of {PLANTED_CELL}, got {}x{}",
            cfg.height, cfg.width
        )));
    }
    let cols = cfg.width / PLANTED_CELL;
    if 2 * offset >= cols {
        return Err(Error::InvalidArgument(format!(
            "planted offset {offset} cells ({} px) leaves no labeled cell in a {}-px-wide image",
            offset * PLANTED_CELL,
            cfg.width
        )));
    }
    let samples: Vec<SegSample> = (0..cfg.count)
        .into_par_iter()
        .map(|i| planted_sample(cfg, offset, i))
        .collect();
    for s in &samples {
        s.validate(2)?;
    }
    Ok(Dataset {
        num_classes: 2,
        task: Task::PlantedDilation,
        seed: cfg.seed,
        samples,
    })
}

pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    match cfg.task {
        Task::Blobs => gen_blobs(cfg),
        Task::PlantedDilation => gen_planted_dilation(cfg),
        Task::External => Err(Error::InvalidArgument("external datasets are loaded, not generated".into())),
    }
}

#[derive(Serialize, Deserialize, Debug)]
struct Manifest {
    num_classes: usize,
    count: usize,
    task: Task,
    seed: u64,
}

pub fn image_to_rgb8(image: &Tensor<f32>) -> image::RgbImage {
    let [_, _, h, w] = image.shape().0;
    let d = image.data();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |c: usize| (d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([q(0), q(1), q(2)])
    })
}

/// Writes `images/NNNN.png`, `masks/NNNN.png` (8-bit grayscale class ids) and `dataset.json`.
pub fn save_dataset(ds: &Dataset, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("masks"))?;
    for s in &ds.samples {
        image_to_rgb8(&s.image).save(root.join("images").join(format!("{}.png", s.id)))?;
        let mask = image::GrayImage::from_raw(s.width() as u32, s.height() as u32, s.mask.clone())
            .ok_or_else(|| Error::Shape(format!("{}: mask size", s.id)))?;
        mask.save(root.join("masks").join(format!("{}.png", s.id)))?;
    }
    let manifest = Manifest {
        num_classes: ds.num_classes,
        count: ds.samples.len(),
        task: ds.task,
        seed: ds.seed,
    };
    fs::write(root.join("dataset.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Reads an 8-bit single-channel mask, keeping palette indices as class ids.
fn read_mask(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::data(path, e.to_string()))?;
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| Error::data(path, e.to_string()))?;
    let (color, depth) = reader.output_color_type();
    if depth != png::BitDepth::Eight || !matches!(color, png::ColorType::Grayscale | png::ColorType::Indexed) {
        return Err(Error::data(
            path,
            format!("mask must be 8-bit grayscale or indexed, found {color:?} {depth:?}"),
        ));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::data(path, "mask too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::data(path, e.to_string()))?;
    buf.truncate(info.buffer_size());
    Ok((info.height as usize, info.width as usize, buf))
}

fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::data(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = f32::from(px.0[c]) / 255.0;
        }
    }
    Tensor::from_vec(Shape::new(1, 3, h, w), data)
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::data(dir, e.to_string()))? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                out.push(stem.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Loads `root/images/*.png` with matching `root/masks/*.png`. The class count
/// comes from `num_classes` or, failing that, from `root/dataset.json`.
pub fn load_dataset(root: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Dataset> {
    let root = root.as_ref();
    let manifest_path = root.join("dataset.json");
    let manifest: Option<Manifest> = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path)?;
        Some(serde_json::from_str(&text).map_err(|e| Error::data(&manifest_path, e.to_string()))?)
    } else {
        None
    };
    let num_classes = num_classes
        .or(manifest.as_ref().map(|m| m.num_classes))
        .ok_or_else(|| Error::data(root, "no dataset.json; the class count must be given"))?;
    let (img_dir, mask_dir) = (root.join("images"), root.join("masks"));
    let images = png_stems(&img_dir)?;
    let masks = png_stems(&mask_dir)?;
    if let Some(orphan) = masks.iter().find(|m| images.binary_search(m).is_err()) {
        return Err(Error::data(mask_dir.join(format!("{orphan}.png")), "mask has no matching image"));
    }
    if images.is_empty() {
        return Err(Error::data(&img_dir, "no PNG images found"));
    }
    let samples: Vec<SegSample> = images
        .par_iter()
        .map(|stem| -> Result<SegSample> {
            let ipath = img_dir.join(format!("{stem}.png"));
            let mpath: PathBuf = mask_dir.join(format!("{stem}.png"));
            if !mpath.exists() {
                return Err(Error::data(&mpath, "missing mask"));
            }
            let image = read_image(&ipath)?;
            let (mh, mw, mask) = read_mask(&mpath)?;
            let s = image.shape();
            if (mh, mw) != (s.h(), s.w()) {
                return Err(Error::data(
                    &mpath,
                    format!("mask is {mw}x{mh}, image is {}x{}", s.w(), s.h()),
                ));
            }
            let sample = SegSample {
                id: stem.clone(),
                image,
                mask,
            };
            sample.validate(num_classes).map_err(|e| Error::data(&mpath, e.to_string()))?;
            Ok(sample)
        })
        .collect::<Result<_>>()?;
    let (task, seed) = manifest.map_or((Task::External, 0), |m| (m.task, m.seed));
    Ok(Dataset {
        num_classes,
        task,
        seed,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: Task, c: usize) -> GenConfig {
        GenConfig {
            task,
            height: 64,
            width: 64,
            num_classes: c,
            count: 6,
            seed: 11,
            planted_offset: (task == Task::PlantedDilation).then_some(2),
            ..GenConfig::default()
        }
    }

    #[test]
    fn blobs_deterministic_and_binary() {
        let a = gen_blobs(&small(Task::Blobs, 2)).unwrap();
        let b = gen_blobs(&small(Task::Blobs, 2)).unwrap();
        assert_eq!(a, b);
        assert!(a.samples.iter().all(|s| s.mask.iter().all(|&v| v <= 1)));
        assert!(gen_blobs(&small(Task::Blobs, 3)).is_err());
    }

    #[test]
    fn planted_labels_follow_reference() {
        let marks = [true, false, false, false, true, false];
        // offset 1: cells 1..5 labeled
        let l = planted_reference_labels(&marks, 1, 6, 1);
        assert_eq!(l, vec![IGNORE_LABEL, 1, 0, 1, 0, IGNORE_LABEL]);
        let ds = gen_planted_dilation(&small(Task::PlantedDilation, 2)).unwrap();
        assert_eq!(ds, gen_planted_dilation(&small(Task::PlantedDilation, 2)).unwrap());
    }

    #[test]
    fn planted_rejects_bad_offsets() {
        let mut cfg = small(Task::PlantedDilation, 2);
        cfg.planted_offset = Some(3);
        assert!(gen_planted_dilation(&cfg).is_err());
        cfg.planted_offset = Some(8);
        let err = gen_planted_dilation(&cfg).unwrap_err();
        assert!(err.to_string().contains("offset"), "{err}");
    }

    #[test]
    fn mark_probability_balances_labels() {
        let p = PLANTED_MARK_PROB;
        assert!(((1.0 - p) * (1.0 - p) - 0.5).abs() < 1e-15);
    }
}
