//! Deterministic synthetic detection scenes: filled discs, filled triangles
//! and rectangle outlines on a noisy background.
//!
//! Image `i` of a dataset with seed `s` is drawn from
//! `ChaCha8Rng::seed_from_u64(splitmix64(s ^ i))`, so any image can be
//! regenerated on its own.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detect::{iou, GroundTruth};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 3] = ["disc", "triangle", "rect"];
pub const IMAGE_MAGIC: &[u8; 4] = b"BWDI";
pub const IMAGE_HEADER_LEN: usize = 16;

const PLACEMENT_ATTEMPTS: usize = 1000;
/// Minimum L1 distance between an object's color and the background base.
const MIN_CONTRAST: f64 = 0.6;
const OUTLINE_PX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub noise: f64,
    pub color_jitter: f64,
    pub max_overlap: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 96,
            width: 96,
            min_objects: 1,
            max_objects: 4,
            min_size: 12,
            max_size: 40,
            noise: 0.1,
            color_jitter: 0.1,
            max_overlap: 0.3,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn channels(&self) -> usize {
        3
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive".into());
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad(format!("object count range {}..={} is empty or zero", self.min_objects, self.max_objects));
        }
        if self.min_size < 4 || self.min_size > self.max_size || self.max_size > self.height.min(self.width) {
            return bad(format!("object size range {}..={} does not fit the image", self.min_size, self.max_size));
        }
        if !(0.0..=0.5).contains(&self.noise) || !(0.0..=0.5).contains(&self.color_jitter) {
            return bad("noise and color jitter must lie in [0, 0.5]".into());
        }
        if !(0.0..=1.0).contains(&self.max_overlap) {
            return bad(format!("max_overlap {} outside [0,1]", self.max_overlap));
        }
        Ok(())
    }
}

/// One image (row-major HWC bytes) and its boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<GroundTruth>,
}

impl Sample {
    /// Pixels scaled to `[0,1]` in CHW order.
    pub fn to_chw(&self) -> Vec<f32> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for k in 0..c {
                    out[(k * h + y) * w + x] = f32::from(self.pixels[(y * w + x) * c + k]) / 255.0;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the given samples into an `[N, C, H, W]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<Vec<GroundTruth>>)> {
        let first = self.samples.get(*indices.first().ok_or_else(|| Error::invalid("empty batch"))?);
        let first = first.ok_or_else(|| Error::invalid("batch index out of range"))?;
        let (h, w, c) = (first.height, first.width, first.channels);
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self.samples.get(i).ok_or_else(|| Error::invalid(format!("batch index {i} out of range")))?;
            if (s.height, s.width, s.channels) != (h, w, c) {
                return Err(Error::shape("samples in a batch differ in size"));
            }
            data.extend(s.to_chw());
            labels.push(s.labels.clone());
        }
        Ok((Tensor::new(&[indices.len(), c, h, w], data)?, labels))
    }

    /// Object counts per class.
    pub fn class_histogram(&self, classes: usize) -> Vec<usize> {
        let mut hist = vec![0; classes];
        for g in self.samples.iter().flat_map(|s| &s.labels) {
            if let Some(slot) = hist.get_mut(g.class_id) {
                *slot += 1;
            }
        }
        hist
    }
}

/// SplitMix64 finalizer, used to derive per-image seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn image_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ index)
}

#[derive(Debug, Clone, Copy)]
struct Placed {
    class_id: usize,
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
}

impl Placed {
    fn contains(&self, px: f64, py: f64) -> bool {
        let (x1, y1) = (self.x0 + self.w, self.y0 + self.h);
        if px < self.x0 || px > x1 || py < self.y0 || py > y1 {
            return false;
        }
        match self.class_id {
            0 => {
                let (cx, cy, r) = (self.x0 + self.w / 2.0, self.y0 + self.h / 2.0, self.w / 2.0);
                (px - cx).powi(2) + (py - cy).powi(2) <= r * r
            }
            1 => {
                // apex at top center, base along the bottom edge
                let t = (py - self.y0) / self.h;
                let half = t * self.w / 2.0;
                let cx = self.x0 + self.w / 2.0;
                (px - cx).abs() <= half
            }
            _ => px - self.x0 < OUTLINE_PX || x1 - px < OUTLINE_PX || py - self.y0 < OUTLINE_PX || y1 - py < OUTLINE_PX,
        }
    }

    fn nominal(&self, width: f64, height: f64) -> GroundTruth {
        GroundTruth {
            class_id: self.class_id,
            cx: (self.x0 + self.w / 2.0) / width,
            cy: (self.y0 + self.h / 2.0) / height,
            w: self.w / width,
            h: self.h / height,
        }
    }
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]
}

fn place(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Option<Vec<Placed>> {
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let (fw, fh) = (cfg.width as f64, cfg.height as f64);
    let mut placed: Vec<Placed> = Vec::with_capacity(count);
    let mut attempts = 0;
    while placed.len() < count {
        attempts += 1;
        if attempts > PLACEMENT_ATTEMPTS {
            return None;
        }
        let class_id = rng.random_range(0..CLASS_NAMES.len());
        let size = rng.random_range(cfg.min_size..=cfg.max_size) as f64;
        let (w, h) = match class_id {
            2 => (size, (size * rng.random_range(0.6..=1.0)).round().max(cfg.min_size as f64)),
            _ => (size, size),
        };
        let x0 = rng.random_range(0..=cfg.width - w as usize) as f64;
        let y0 = rng.random_range(0..=cfg.height - h as usize) as f64;
        let cand = Placed { class_id, x0, y0, w, h };
        let g = cand.nominal(fw, fh);
        if placed.iter().all(|p| iou(&p.nominal(fw, fh), &g) <= cfg.max_overlap) {
            placed.push(cand);
        }
    }
    Some(placed)
}

fn render(cfg: &SceneConfig, rng: &mut ChaCha8Rng, objects: &[Placed]) -> Sample {
    let (h, w) = (cfg.height, cfg.width);
    let base = random_color(rng);
    let mut img = vec![0.0f64; h * w * 3];
    for px in img.chunks_exact_mut(3) {
        for (k, v) in px.iter_mut().enumerate() {
            *v = base[k] + rng.random_range(-cfg.noise..=cfg.noise);
        }
    }
    let mut labels = Vec::with_capacity(objects.len());
    for obj in objects {
        let color = loop {
            let c = random_color(rng);
            if c.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum::<f64>() >= MIN_CONTRAST {
                break c;
            }
        };
        let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
        let (xs, ys) = (obj.x0 as usize, obj.y0 as usize);
        for y in ys..(ys + obj.h as usize).min(h) {
            for x in xs..(xs + obj.w as usize).min(w) {
                if !obj.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    continue;
                }
                let px = &mut img[(y * w + x) * 3..(y * w + x) * 3 + 3];
                for (k, v) in px.iter_mut().enumerate() {
                    *v = color[k] + rng.random_range(-cfg.color_jitter..=cfg.color_jitter);
                }
                bx0 = bx0.min(x);
                by0 = by0.min(y);
                bx1 = bx1.max(x + 1);
                by1 = by1.max(y + 1);
            }
        }
        if bx0 == usize::MAX {
            continue;
        }
        let (fw, fh) = (w as f64, h as f64);
        labels.push(GroundTruth {
            class_id: obj.class_id,
            cx: round6((bx0 + bx1) as f64 / 2.0 / fw),
            cy: round6((by0 + by1) as f64 / 2.0 / fh),
            w: round6((bx1 - bx0) as f64 / fw),
            h: round6((by1 - by0) as f64 / fh),
        });
    }
    let pixels = img.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    Sample { height: h, width: w, channels: 3, pixels, labels }
}

/// Generates image `index` of the dataset described by `cfg`.
pub fn generate_one(cfg: &SceneConfig, index: u64) -> Sample {
    let mut sub = image_seed(cfg.seed, index);
    loop {
        let mut rng = ChaCha8Rng::seed_from_u64(sub);
        if let Some(objects) = place(cfg, &mut rng) {
            return render(cfg, &mut rng, &objects);
        }
        warn!("image {index}: placement failed after {PLACEMENT_ATTEMPTS} attempts, reseeding");
        sub = splitmix64(sub);
    }
}

pub fn generate(cfg: &SceneConfig, count: usize) -> Result<Dataset> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::Config("dataset count must be at least 1".into()));
    }
    Ok(Dataset { samples: (0..count as u64).map(|i| generate_one(cfg, i)).collect() })
}

pub fn encode_image(sample: &Sample) -> Vec<u8> {
    let mut out = Vec::with_capacity(IMAGE_HEADER_LEN + sample.pixels.len());
    out.extend_from_slice(IMAGE_MAGIC);
    for v in [sample.height, sample.width, sample.channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&sample.pixels);
    out
}

pub fn decode_image(bytes: &[u8], origin: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    if bytes.len() < IMAGE_HEADER_LEN {
        return Err(Error::format(origin, format!("{} bytes is shorter than the image header", bytes.len())));
    }
    if &bytes[..4] != IMAGE_MAGIC {
        return Err(Error::format(origin, "bad magic, expected BWDI"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let want = h.checked_mul(w).and_then(|v| v.checked_mul(c));
    match want {
        Some(n) if n > 0 && bytes.len() - IMAGE_HEADER_LEN == n => Ok((h, w, c, bytes[IMAGE_HEADER_LEN..].to_vec())),
        _ => Err(Error::format(
            origin,
            format!("header says {h}x{w}x{c} but payload has {} bytes", bytes.len() - IMAGE_HEADER_LEN),
        )),
    }
}

pub fn format_labels(labels: &[GroundTruth]) -> String {
    labels.iter().map(|g| format!("{} {:.6} {:.6} {:.6} {:.6}\n", g.class_id, g.cx, g.cy, g.w, g.h)).collect()
}

pub fn parse_labels(text: &str, origin: &Path) -> Result<Vec<GroundTruth>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::format(origin, format!("line {}: expected `class cx cy w h`", ln + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        out.push(GroundTruth {
            class_id: f[0].parse().map_err(|_| bad())?,
            cx: num(f[1])?,
            cy: num(f[2])?,
            w: num(f[3])?,
            h: num(f[4])?,
        });
    }
    Ok(out)
}

fn stem(i: usize) -> String {
    format!("{i:06}")
}

/// Writes `NNNNNN.bwdi` / `NNNNNN.txt` pairs into `dir`, creating it.
pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in data.samples.iter().enumerate() {
        let img = dir.join(format!("{}.bwdi", stem(i)));
        fs::write(&img, encode_image(s)).map_err(|e| Error::io(&img, e))?;
        let lbl = dir.join(format!("{}.txt", stem(i)));
        fs::write(&lbl, format_labels(&s.labels)).map_err(|e| Error::io(&lbl, e))?;
    }
    Ok(())
}

/// Reads a directory written by [`save_dataset`]. Indices must be contiguous
/// from zero and every image needs a label file.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut images: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "bwdi") {
            images.push(path);
        }
    }
    images.sort();
    let mut samples = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let expected = dir.join(format!("{}.bwdi", stem(i)));
        if *img != expected {
            return Err(Error::format(
                dir,
                format!("expected {} in sequence, found {}", expected.display(), img.display()),
            ));
        }
        let bytes = fs::read(img).map_err(|e| Error::io(img, e))?;
        let (height, width, channels, pixels) = decode_image(&bytes, img)?;
        let lbl = img.with_extension("txt");
        let text = fs::read_to_string(&lbl).map_err(|e| Error::io(&lbl, e))?;
        samples.push(Sample { height, width, channels, pixels, labels: parse_labels(&text, &lbl)? });
    }
    Ok(Dataset { samples })
}
