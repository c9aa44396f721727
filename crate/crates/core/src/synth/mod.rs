//! Deterministic synthetic "lesion" images with hidden ground-truth boxes.
//!
//! Each image is a smooth textured background plus, for every class drawn
//! positive, one lesion with a class-specific shape. Boxes are kept for
//! evaluation only: every read through [`Sample::boxes`] is counted so tests
//! can prove training never looks at them.

mod io;
mod split;

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{load_dataset, read_pgm16, save_dataset, write_pgm16, write_pgm8, DatasetFiles};
pub use split::{split_by_subject, DatasetSplit, Part};

/// Lesion shapes, indexed by class id.
pub const ARCHETYPES: [&str; 8] = [
    "bright-disc",
    "dark-disc",
    "ring",
    "bar",
    "checker",
    "gradient-blob",
    "speckle",
    "cross",
];

pub const PIXEL_LEVELS: f64 = 65535.0;

/// Axis-aligned box in pixel coordinates, half-open: `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LesionBox {
    pub class_id: usize,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl LesionBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

#[derive(Debug)]
pub struct Sample {
    pub id: usize,
    pub subject_id: usize,
    /// `[H, W, 1]`, values in `[0, 1]` on a 16-bit grid.
    pub image: Tensor,
    /// Observed (possibly noisy) image-level labels.
    pub labels: Vec<u8>,
    boxes: Vec<LesionBox>,
    box_reads: AtomicUsize,
}

impl Clone for Sample {
    fn clone(&self) -> Self {
        Self {
            id: self.id,
            subject_id: self.subject_id,
            image: self.image.clone(),
            labels: self.labels.clone(),
            boxes: self.boxes.clone(),
            box_reads: AtomicUsize::new(self.box_reads()),
        }
    }
}

impl PartialEq for Sample {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.subject_id == other.subject_id
            && self.image == other.image
            && self.labels == other.labels
            && self.boxes == other.boxes
    }
}

impl Sample {
    pub fn new(id: usize, subject_id: usize, image: Tensor, labels: Vec<u8>, boxes: Vec<LesionBox>) -> Result<Self> {
        let [h, w, 1] = *image.shape() else {
            return Err(Error::Dataset(format!("sample {id}: image must be [H,W,1], got {:?}", image.shape())));
        };
        if let Some(b) = boxes.iter().find(|b| b.x0 >= b.x1 || b.y0 >= b.y1 || b.x1 > w || b.y1 > h) {
            return Err(Error::Dataset(format!("sample {id}: box {b:?} outside {w}x{h} image")));
        }
        if let Some(b) = boxes.iter().find(|b| b.class_id >= labels.len()) {
            return Err(Error::Dataset(format!("sample {id}: box class {} >= {}", b.class_id, labels.len())));
        }
        Ok(Self { id, subject_id, image, labels, boxes, box_reads: AtomicUsize::new(0) })
    }

    /// Ground-truth boxes. Every call is counted.
    pub fn boxes(&self) -> &[LesionBox] {
        self.box_reads.fetch_add(1, Ordering::Relaxed);
        &self.boxes
    }

    pub fn box_reads(&self) -> usize {
        self.box_reads.load(Ordering::Relaxed)
    }

    /// Noise-free labels: class `c` is positive iff a box of class `c` exists.
    pub fn true_labels(&self) -> Vec<u8> {
        let mut out = vec![0; self.labels.len()];
        for b in self.boxes() {
            out[b.class_id] = 1;
        }
        out
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    pub fn image_size(&self) -> usize {
        self.image.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub samples: usize,
    pub classes: usize,
    pub image_size: usize,
    /// Positive rate per class (a single entry applies to all classes).
    pub class_prior: Vec<f64>,
    pub images_per_subject: usize,
    /// Per-label flip probability applied to the observed labels only.
    pub label_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            samples: 2000,
            classes: 4,
            image_size: 64,
            class_prior: vec![0.3],
            images_per_subject: 3,
            label_noise: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn prior(&self, class: usize) -> f64 {
        if self.class_prior.len() == 1 {
            self.class_prior[0]
        } else {
            self.class_prior[class]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > ARCHETYPES.len() {
            return Err(Error::Config(format!("classes must be in 1..={}, got {}", ARCHETYPES.len(), self.classes)));
        }
        if self.class_prior.len() != 1 && self.class_prior.len() != self.classes {
            return Err(Error::Config(format!(
                "class_prior needs 1 or {} entries, got {}",
                self.classes,
                self.class_prior.len()
            )));
        }
        if self.class_prior.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("class_prior entries must lie in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config("label_noise must lie in [0,1]".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!("image_size must be at least 16, got {}", self.image_size)));
        }
        if self.images_per_subject == 0 || self.samples == 0 {
            return Err(Error::Config("samples and images_per_subject must be positive".into()));
        }
        Ok(())
    }
}

/// Generates the dataset; sample `i` uses stream `i` of the seeded ChaCha
/// generator, so the result does not depend on the worker count.
pub fn generate_dataset(config: &SynthConfig) -> Result<Vec<Sample>> {
    config.validate()?;
    (0..config.samples)
        .into_par_iter()
        .map(|i| generate_sample(config, i))
        .collect()
}

fn generate_sample(config: &SynthConfig, index: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let size = config.image_size;
    let mut pixels = background(size, &mut rng);

    let mut boxes = Vec::new();
    for class in 0..config.classes {
        if rng.random::<f64>() < config.prior(class) {
            boxes.push(draw_lesion(&mut pixels, size, class, &mut rng));
        }
    }
    let clean: Vec<u8> = (0..config.classes).map(|c| boxes.iter().any(|b| b.class_id == c) as u8).collect();
    let labels = clean
        .iter()
        .map(|&y| if rng.random::<f64>() < config.label_noise { 1 - y } else { y })
        .collect();

    let values = pixels
        .into_iter()
        .map(|v| (v.clamp(0.0, 1.0) * PIXEL_LEVELS).round() / PIXEL_LEVELS)
        .collect();
    let image = Tensor::new([size, size, 1], values)?;
    Sample::new(index, index / config.images_per_subject, image, labels, boxes)
}

/// Smooth random field: a few low-frequency cosine waves plus faint pixel noise.
fn background(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let fx = rng.random_range(0.5..2.5) * std::f64::consts::TAU / size as f64;
            let fy = rng.random_range(0.5..2.5) * std::f64::consts::TAU / size as f64;
            (fx, fy, rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.02..0.06))
        })
        .collect();
    let base = rng.random_range(0.35..0.55);
    let noise = Normal::new(0.0, 0.02).unwrap();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let mut v = base;
            for &(fx, fy, phase, amp) in &waves {
                v += amp * (fx * x as f64 + fy * y as f64 + phase).cos();
            }
            out.push(v + noise.sample(rng));
        }
    }
    out
}

fn draw_lesion(pixels: &mut [f64], size: usize, class: usize, rng: &mut ChaCha8Rng) -> LesionBox {
    let scale = size as f64 / 64.0;
    let r = ((rng.random_range(4.0..7.5) * scale).round() as usize).max(2);
    let cx = rng.random_range(r..size - r);
    let cy = rng.random_range(r..size - r);
    let (x0, y0, x1, y1) = (cx - r, cy - r, cx + r + 1, cy + r + 1);
    let rf = r as f64;
    let vertical = rng.random_bool(0.5);
    let speckles: Vec<(f64, f64)> = (0..10)
        .map(|_| {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let d = rng.random_range(0.0..rf - 1.0);
            (cx as f64 + d * a.cos(), cy as f64 + d * a.sin())
        })
        .collect();
    for y in y0..y1 {
        for x in x0..x1 {
            let (dx, dy) = (x as f64 - cx as f64, y as f64 - cy as f64);
            let d = (dx * dx + dy * dy).sqrt();
            let delta = match class {
                0 => 0.35 * soft_disc(d, rf),
                1 => -0.3 * soft_disc(d, rf),
                2 => 0.35 * ((d - (rf - 1.5)).abs() <= 1.0) as u8 as f64,
                3 => {
                    let (along, across) = if vertical { (dy, dx) } else { (dx, dy) };
                    0.35 * (along.abs() <= rf && across.abs() <= (rf / 3.0).max(1.0)) as u8 as f64
                }
                4 => {
                    if ((x - x0) / 2 + (y - y0) / 2) % 2 == 0 { 0.25 } else { -0.25 }
                }
                5 => 0.4 * (dx + rf) / (2.0 * rf) * soft_disc(d, rf),
                6 => {
                    let hit = speckles.iter().any(|&(sx, sy)| (x as f64 - sx).abs() <= 0.75 && (y as f64 - sy).abs() <= 0.75);
                    0.4 * hit as u8 as f64
                }
                _ => 0.35 * ((dx.abs() <= 1.0 || dy.abs() <= 1.0) && d <= rf) as u8 as f64,
            };
            pixels[y * size + x] += delta;
        }
    }
    LesionBox { class_id: class, x0, y0, x1, y1 }
}

fn soft_disc(d: f64, r: f64) -> f64 {
    (r + 0.5 - d).clamp(0.0, 1.0)
}

/// Per-channel mean and standard deviation of a training set.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const MIN_STD: f64 = 1e-8;

impl ChannelNorm {
    /// Statistics over every pixel of the given images; `std` is clamped to [`MIN_STD`].
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut channels = 0;
        let mut sum = Vec::new();
        let mut count = 0usize;
        let images: Vec<&Tensor> = images.into_iter().collect();
        for img in &images {
            let c = *img.shape().last().unwrap();
            if channels == 0 {
                channels = c;
                sum = vec![0.0; c];
            } else if c != channels {
                return Err(Error::Dataset("images disagree on channel count".into()));
            }
            for px in img.values().chunks_exact(c) {
                sum.iter_mut().zip(px).for_each(|(s, v)| *s += v);
            }
            count += img.numel() / c;
        }
        if count == 0 {
            return Err(Error::Dataset("cannot normalize an empty training set".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; channels];
        for img in &images {
            for px in img.values().chunks_exact(channels) {
                for ((s, v), m) in sq.iter_mut().zip(px).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = sq.iter().map(|s| (s / count as f64).sqrt().max(MIN_STD)).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, image: &Tensor) -> Tensor {
        let c = self.mean.len();
        let mut out = image.clone();
        for px in out.values_mut().chunks_exact_mut(c) {
            for ((v, m), s) in px.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }
}
