//! Datasets: deterministic synthetic shapes and the CIFAR binary format.
//!
//! The synthetic task is three shape classes (filled square, circle,
//! triangle) at jittered position and scale over a noise background,
//! rendered with pure arithmetic so a seed fixes every byte. Export uses the
//! CIFAR record layout (1 label byte + 3072 pixel bytes) for cross-tool
//! reuse.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IMG: usize = 32;
pub const CHANNELS: usize = 3;
pub const PIXELS: usize = CHANNELS * IMG * IMG;
const RECORD_BYTES: usize = PIXELS + 1;

#[derive(Debug, Clone)]
pub struct LabeledImage {
    /// C x H x W, row-major, values in [0, 1].
    pub pixels: Vec<f32>,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Per-channel normalization constants computed from a training split.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        NormStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn from_dataset(data: &Dataset) -> Self {
        let plane = IMG * IMG;
        let mut mean = vec![0.0f64; CHANNELS];
        let mut sq = vec![0.0f64; CHANNELS];
        let n = (data.len() * plane) as f64;
        for img in &data.images {
            for c in 0..CHANNELS {
                for &v in &img.pixels[c * plane..(c + 1) * plane] {
                    mean[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
        }
        for c in 0..CHANNELS {
            mean[c] /= n;
            sq[c] = (sq[c] / n - mean[c] * mean[c]).max(1e-12).sqrt();
        }
        NormStats { mean, std: sq }
    }

    pub fn apply(&self, pixels: &[f32]) -> Vec<f32> {
        let plane = pixels.len() / self.mean.len();
        let mut out = Vec::with_capacity(pixels.len());
        for c in 0..self.mean.len() {
            let (m, s) = (self.mean[c] as f32, self.std[c] as f32);
            for &v in &pixels[c * plane..(c + 1) * plane] {
                out.push((v - m) / s);
            }
        }
        out
    }
}

fn fill_noise(rng: &mut ChaCha8Rng, pixels: &mut [f32]) {
    for v in pixels.iter_mut() {
        *v = rng.gen_range(0.05..0.30);
    }
}

/// Paint `value` into all three channels where `inside(x, y)`.
fn paint(pixels: &mut [f32], value: f32, inside: impl Fn(i32, i32) -> bool) {
    let plane = IMG * IMG;
    for y in 0..IMG as i32 {
        for x in 0..IMG as i32 {
            if inside(x, y) {
                let i = (y as usize) * IMG + x as usize;
                for c in 0..CHANNELS {
                    pixels[c * plane + i] = value;
                }
            }
        }
    }
}

/// Deterministic, class-balanced synthetic dataset: class 0 squares,
/// class 1 circles, class 2 triangles.
pub fn gen_synthetic(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("empty synthetic dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 3;
        let mut pixels = vec![0.0f32; PIXELS];
        fill_noise(&mut rng, &mut pixels);
        let half = rng.gen_range(5..=8) as i32;
        let cx = 16 + rng.gen_range(-5..=5);
        let cy = 16 + rng.gen_range(-5..=5);
        let fg: f32 = rng.gen_range(0.75..0.95);
        match label {
            0 => paint(&mut pixels, fg, |x, y| {
                (x - cx).abs() <= half && (y - cy).abs() <= half
            }),
            1 => paint(&mut pixels, fg, |x, y| {
                (x - cx) * (x - cx) + (y - cy) * (y - cy) <= half * half
            }),
            _ => paint(&mut pixels, fg, |x, y| {
                // upward triangle: apex (cx, cy-half), base y = cy+half
                let dy = y - (cy - half);
                if dy < 0 || dy > 2 * half {
                    return false;
                }
                // width grows linearly from 0 at the apex to half at the base
                let w = (dy * half) / (2 * half);
                (x - cx).abs() <= w
            }),
        }
        images.push(LabeledImage { pixels, label });
    }
    Ok(Dataset { images, num_classes: 3 })
}

/// Quantize to the CIFAR byte layout: label byte then R, G, B planes.
pub fn save_cifar_format(data: &Dataset, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * RECORD_BYTES);
    for img in &data.images {
        bytes.push(img.label as u8);
        for &v in &img.pixels {
            bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn parse_records(bytes: &[u8], label_bytes: usize, num_classes: usize) -> Result<Dataset> {
    let record = label_bytes + PIXELS;
    if bytes.len() % record != 0 {
        let offset = (bytes.len() / record) * record;
        return Err(Error::Format {
            detail: "truncated record".to_string(),
            offset: offset as u64,
        });
    }
    let mut images = Vec::with_capacity(bytes.len() / record);
    for (idx, chunk) in bytes.chunks_exact(record).enumerate() {
        // fine label is the last label byte (CIFAR-100 stores coarse first)
        let label = chunk[label_bytes - 1] as usize;
        if label >= num_classes {
            return Err(Error::Format {
                detail: format!("label byte {} out of range (max {})", label, num_classes - 1),
                offset: (idx * record) as u64,
            });
        }
        let pixels = chunk[label_bytes..]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        images.push(LabeledImage { pixels, label });
    }
    Ok(Dataset { images, num_classes })
}

/// CIFAR-10 binary file: records of 1 label byte + 3072 pixel bytes.
pub fn load_cifar10_binary(path: &Path) -> Result<Dataset> {
    parse_records(&fs::read(path)?, 1, 10)
}

/// CIFAR-100 binary file: coarse + fine label bytes; the fine label is used.
pub fn load_cifar100_binary(path: &Path) -> Result<Dataset> {
    parse_records(&fs::read(path)?, 2, 100)
}

/// Load an exported synthetic file (CIFAR-10 layout, 3 classes).
pub fn load_synthetic_binary(path: &Path) -> Result<Dataset> {
    let mut d = parse_records(&fs::read(path)?, 1, 10)?;
    d.num_classes = 3;
    Ok(d)
}

/// Seeded epoch shuffle: batches of indices, last partial batch retained.
pub fn make_batches(len: usize, batch: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return Err(Error::Config("empty dataset".into()));
    }
    if batch == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    for i in (1..len).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    Ok(idx.chunks(batch).map(|c| c.to_vec()).collect())
}
