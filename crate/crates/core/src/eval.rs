//! Classification and localization metrics: per-class ROC-AUC over ten-crop
//! averaged predictions, class heatmaps and the pointing game.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;

use crate::backbone::{Mode, Model};
use crate::error::{Error, Result};
use crate::synth::{write_pgm8, ChannelNorm, LesionBox, Sample};
use crate::tensor::{Tape, Tensor};
use crate::train::{crop, hflip, lookup, stack};

const PREDICT_CHUNK: usize = 8;

/// Probability that a random positive outscores a random negative, ties
/// counting one half. `None` unless both classes are present.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "roc_auc: scores and labels differ in length");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let positives = labels.iter().filter(|&&l| l != 0).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    // twice the Mann-Whitney U: each positive gets 2 per lower negative, 1 per tied negative
    let mut twice_u = 0u64;
    let mut below = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        let pos = group.iter().filter(|&&k| labels[k] != 0).count() as u64;
        let neg = group.len() as u64 - pos;
        twice_u += pos * (2 * below + neg);
        below += neg;
        i = j;
    }
    Some(twice_u as f64 / (2 * positives * negatives) as f64)
}

/// Top-left offsets of the four corner crops and the centre crop.
pub fn ten_crop_offsets(size: usize, crop_size: usize) -> [(usize, usize); 5] {
    let far = size - crop_size;
    let mid = far / 2;
    [(0, 0), (0, far), (far, 0), (far, far), (mid, mid)]
}

fn ten_crops(image: &Tensor, crop_size: usize) -> Result<Vec<Tensor>> {
    let size = image.shape()[0];
    if crop_size > size || image.shape()[1] != size {
        return Err(Error::shape("ten_crop_predict", format!("crop {crop_size} on image {:?}", image.shape())));
    }
    let mut out = Vec::with_capacity(10);
    for (top, left) in ten_crop_offsets(size, crop_size) {
        let c = crop(image, top, left, crop_size)?;
        out.push(hflip(&c));
        out.push(c);
    }
    Ok(out)
}

fn average_crops(probs: &[f64], classes: usize) -> Vec<f64> {
    let mut mean = vec![0.0; classes];
    for crop in probs.chunks_exact(classes) {
        mean.iter_mut().zip(crop).for_each(|(m, p)| *m += p);
    }
    mean.iter_mut().for_each(|m| *m /= (probs.len() / classes) as f64);
    mean
}

/// Mean eval-mode probabilities over the ten crops of a normalized `[S,S,1]` image.
pub fn ten_crop_predict(model: &Model, image: &Tensor, crop_size: usize) -> Result<Vec<f64>> {
    let probs = model.predict(stack(&ten_crops(image, crop_size)?)?)?;
    Ok(average_crops(&probs, model.config.head.classes))
}

/// [`ten_crop_predict`] over many images, batched and run in parallel.
pub fn ten_crop_predict_many(model: &Model, images: &[Tensor], crop_size: usize) -> Result<Vec<Vec<f64>>> {
    let classes = model.config.head.classes;
    let chunks = images
        .par_chunks(PREDICT_CHUNK)
        .map(|chunk| {
            let mut crops = Vec::with_capacity(chunk.len() * 10);
            for img in chunk {
                crops.extend(ten_crops(img, crop_size)?);
            }
            let probs = model.predict(stack(&crops)?)?;
            Ok(probs.chunks_exact(10 * classes).map(|p| average_crops(p, classes)).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// One class's pre-pooling map and its bilinear upsampling to input size.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `[h, w]` at backbone resolution.
    pub low: Tensor,
    /// `[H, W]` at input resolution.
    pub full: Tensor,
}

impl Heatmap {
    pub fn from_low(low: Tensor, height: usize, width: usize) -> Result<Self> {
        let full = bilinear_upsample(&low, height, width)?;
        Ok(Self { low, full })
    }

    /// Min-max normalized 8-bit rendering of the upsampled map.
    pub fn render(&self) -> Vec<u8> {
        let v = self.full.values();
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        v.iter()
            .map(|x| if range > 0.0 { ((x - lo) / range * 255.0).round() as u8 } else { 0 })
            .collect()
    }

    /// Row-major first maximum of the upsampled map as `(x, y)`.
    pub fn argmax(&self) -> (usize, usize) {
        let w = self.full.shape()[1];
        let mut best = 0;
        for (i, &v) in self.full.values().iter().enumerate() {
            if v > self.full.values()[best] {
                best = i;
            }
        }
        (best % w, best / w)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let [h, w] = *self.full.shape() else { unreachable!("heatmaps are rank 2") };
        write_pgm8(path, w, h, &self.render())
    }
}

/// Bilinear resize of a `[h, w]` map with pixel-centre alignment and edge clamping.
pub fn bilinear_upsample(map: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let [h, w] = *map.shape() else {
        return Err(Error::shape("bilinear_upsample", format!("expected [h,w], got {:?}", map.shape())));
    };
    let src = |dst: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let p = ((dst as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = p.floor() as usize;
        (i0, (i0 + 1).min(inp - 1), p - i0 as f64)
    };
    let v = map.values();
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = src(y, height, h);
        for x in 0..width {
            let (x0, x1, fx) = src(x, width, w);
            let top = v[y0 * w + x0] * (1.0 - fx) + v[y0 * w + x1] * fx;
            let bottom = v[y1 * w + x0] * (1.0 - fx) + v[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::new([height, width], out)
}

/// Class-averaged transfer maps of a normalized `[H,W,1]` image, one per class.
pub fn class_heatmaps(model: &Model, image: &Tensor) -> Result<Vec<Heatmap>> {
    let [height, width, _] = *image.shape() else {
        return Err(Error::shape("class_heatmaps", format!("expected [H,W,C], got {:?}", image.shape())));
    };
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let pass = model.forward(&mut tape, x, Mode::Eval)?;
    let maps = tape.tensor(pass.head.class_maps);
    let [h, w, classes] = *maps.shape() else { unreachable!("single image gives rank-3 maps") };
    (0..classes)
        .map(|c| {
            let low = Tensor::new([h, w], maps.values().iter().skip(c).step_by(classes).copied().collect())?;
            Heatmap::from_low(low, height, width)
        })
        .collect()
}

/// `Some(hit)` when the image has a box of `class_id`; `None` otherwise.
pub fn pointing_game(heatmap: &Heatmap, boxes: &[LesionBox], class_id: usize) -> Option<bool> {
    let mut of_class = boxes.iter().filter(|b| b.class_id == class_id).peekable();
    of_class.peek()?;
    let (x, y) = heatmap.argmax();
    Some(of_class.any(|b| b.contains(x, y)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub class_id: usize,
    pub auc: Option<f64>,
    pub pointing_acc: Option<f64>,
    pub chance: Option<f64>,
    pub positives: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    /// Mean over classes with a defined AUC.
    pub mean_auc: Option<f64>,
    pub mean_pointing_acc: Option<f64>,
    pub mean_chance: Option<f64>,
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.classes {
            writeln!(f, "{},{},{},{}", c.class_id, fmt_opt(c.auc), fmt_opt(c.pointing_acc), fmt_opt(c.chance))?;
        }
        writeln!(
            f,
            "mean,{},{},{}",
            fmt_opt(self.mean_auc),
            fmt_opt(self.mean_pointing_acc),
            fmt_opt(self.mean_chance)
        )
    }
}

/// Scores the samples listed in `ids`. AUC is measured against the
/// noise-free labels implied by the boxes; localization uses every
/// image that contains a box of the class.
pub fn evaluate(model: &Model, norm: &ChannelNorm, samples: &[Sample], ids: &[usize], crop_size: usize) -> Result<EvalReport> {
    let set = lookup(samples, ids)?;
    if set.is_empty() {
        return Err(Error::Dataset("evaluation part is empty".into()));
    }
    let classes = model.config.head.classes;
    if set[0].classes() != classes {
        return Err(Error::Config(format!("dataset has {} classes, model expects {classes}", set[0].classes())));
    }
    let images: Vec<Tensor> = set.iter().map(|s| norm.apply(&s.image)).collect();
    let probs = ten_crop_predict_many(model, &images, crop_size)?;
    let heatmaps = images.par_iter().map(|img| class_heatmaps(model, img)).collect::<Result<Vec<_>>>()?;

    let mut reports = Vec::with_capacity(classes);
    for c in 0..classes {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let labels: Vec<u8> = set.iter().map(|s| s.true_labels()[c]).collect();
        let (mut hits, mut tried, mut area) = (0usize, 0usize, 0.0);
        for (s, maps) in set.iter().zip(&heatmaps) {
            let boxes = s.boxes();
            if let Some(hit) = pointing_game(&maps[c], boxes, c) {
                tried += 1;
                hits += hit as usize;
                area += box_area_fraction(boxes, c, s.image.shape()[0], s.image.shape()[1]);
            }
        }
        reports.push(ClassReport {
            class_id: c,
            auc: roc_auc(&scores, &labels),
            pointing_acc: (tried > 0).then(|| hits as f64 / tried as f64),
            chance: (tried > 0).then(|| area / tried as f64),
            positives: tried,
        });
    }
    Ok(EvalReport {
        mean_auc: mean_present(reports.iter().map(|r| r.auc)),
        mean_pointing_acc: mean_present(reports.iter().map(|r| r.pointing_acc)),
        mean_chance: mean_present(reports.iter().map(|r| r.chance)),
        classes: reports,
    })
}

/// Fraction of the image covered by the union of the class's boxes.
pub fn box_area_fraction(boxes: &[LesionBox], class_id: usize, height: usize, width: usize) -> f64 {
    let of_class: Vec<&LesionBox> = boxes.iter().filter(|b| b.class_id == class_id).collect();
    let mut covered = 0usize;
    for y in 0..height {
        for x in 0..width {
            covered += of_class.iter().any(|b| b.contains(x, y)) as usize;
        }
    }
    covered as f64 / (height * width) as f64
}
