//! Weakly-supervised training: BCE on image-level labels, Adam, plateau
//! learning-rate decay, random crop + flip augmentation and selection of the
//! parameters with the lowest validation loss.

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::{Mode, Model};
use crate::error::{Error, Result};
use crate::synth::{ChannelNorm, DatasetSplit, Sample};
use crate::tensor::{Tape, Tensor};

const SHUFFLE_SALT: u64 = 0x5348_5546;
const AUGMENT_SALT: u64 = 0x4155_474d;
const EVAL_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    pub lr_decay_factor: f64,
    pub max_epochs: usize,
    pub crop_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr0: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            plateau_patience: 5,
            plateau_min_delta: 1e-4,
            lr_decay_factor: 0.1,
            max_epochs: 16,
            crop_size: 56,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0,1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return bad(format!("lr_decay_factor must lie in (0,1), got {}", self.lr_decay_factor));
        }
        if !(self.adam_eps > 0.0) || !(self.plateau_min_delta >= 0.0) {
            return bad("adam_eps must be positive and plateau_min_delta non-negative".into());
        }
        if self.batch_size == 0 || self.crop_size == 0 {
            return bad("batch_size and crop_size must be positive".into());
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params.into_iter().map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()])).unzip();
        Self { m, v, t: 0 }
    }
}

/// One bias-corrected Adam update from each tensor's gradient buffer. Tensors
/// without `requires_grad` are skipped. Non-finite gradients reject the whole
/// step and leave parameters and state untouched.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    state: &mut AdamState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    let mut params: Vec<&mut Tensor> = params.into_iter().collect();
    if params.len() != state.m.len() || params.iter().zip(&state.m).any(|(p, m)| p.numel() != m.len()) {
        return Err(Error::shape("adam_step", "optimizer state does not match parameters"));
    }
    if params.iter().any(|p| p.requires_grad() && p.grad().iter().any(|g| !g.is_finite())) {
        return Err(Error::NonFinite("gradient in adam_step".into()));
    }
    state.t += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powf(state.t as f64);
    let c2 = 1.0 - b2.powf(state.t as f64);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if !p.requires_grad() {
            continue;
        }
        let grad = p.grad().to_vec();
        for (((x, g), m), v) in p.values_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *x -= lr * (*m / c1) / ((*v / c2).sqrt() + config.adam_eps);
        }
    }
    Ok(())
}

/// Reduce-on-plateau state. An epoch improves when its loss beats the best so
/// far by strictly more than `min_delta`; after `patience` consecutive epochs
/// without improvement the rate decays and the counter restarts.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    best: f64,
    stale: usize,
    decays: u32,
}

impl Default for Plateau {
    fn default() -> Self {
        Self { best: f64::INFINITY, stale: 0, decays: 0 }
    }
}

impl Plateau {
    /// Records one epoch's validation loss; returns whether it improved.
    pub fn observe(&mut self, loss: f64, config: &TrainConfig) -> bool {
        if loss < self.best - config.plateau_min_delta {
            self.best = loss;
            self.stale = 0;
            return true;
        }
        self.stale += 1;
        if self.stale >= config.plateau_patience {
            self.decays += 1;
            self.stale = 0;
        }
        false
    }

    pub fn lr(&self, config: &TrainConfig) -> f64 {
        config.lr0 * config.lr_decay_factor.powi(self.decays as i32)
    }

    pub fn decays(&self) -> u32 {
        self.decays
    }
}

/// Learning rate after observing `history`.
pub fn plateau_schedule(history: &[f64], config: &TrainConfig) -> f64 {
    let mut p = Plateau::default();
    for &loss in history {
        p.observe(loss, config);
    }
    p.lr(config)
}

/// `[S, S, C]` → `[size, size, C]` window with top-left corner `(top, left)`.
pub fn crop(image: &Tensor, top: usize, left: usize, size: usize) -> Result<Tensor> {
    let [h, w, c] = *image.shape() else {
        return Err(Error::shape("crop", format!("expected [H,W,C], got {:?}", image.shape())));
    };
    if top + size > h || left + size > w {
        return Err(Error::shape("crop", format!("{size}x{size} at ({top},{left}) exceeds {h}x{w}")));
    }
    let mut out = Vec::with_capacity(size * size * c);
    for y in top..top + size {
        let row = (y * w + left) * c;
        out.extend_from_slice(&image.values()[row..row + size * c]);
    }
    Tensor::new([size, size, c], out)
}

pub fn hflip(image: &Tensor) -> Tensor {
    let [_, w, c] = *image.shape() else { panic!("hflip expects [H,W,C]") };
    let mut out = image.clone();
    for (src, dst) in image.values().chunks_exact(w * c).zip(out.values_mut().chunks_exact_mut(w * c)) {
        for x in 0..w {
            dst[x * c..(x + 1) * c].copy_from_slice(&src[(w - 1 - x) * c..(w - x) * c]);
        }
    }
    out
}

pub fn center_crop(image: &Tensor, size: usize) -> Result<Tensor> {
    let s = image.shape()[0];
    let off = s.saturating_sub(size) / 2;
    crop(image, off, (image.shape()[1].saturating_sub(size)) / 2, size)
}

/// Uniform random crop followed by a horizontal flip with probability 0.5.
pub fn augment<R: Rng>(image: &Tensor, crop_size: usize, rng: &mut R) -> Result<Tensor> {
    let [h, w, _] = *image.shape() else {
        return Err(Error::shape("augment", format!("expected [H,W,C], got {:?}", image.shape())));
    };
    if crop_size > h || crop_size > w {
        return Err(Error::shape("augment", format!("crop {crop_size} larger than {h}x{w}")));
    }
    let top = rng.random_range(0..=h - crop_size);
    let left = rng.random_range(0..=w - crop_size);
    let out = crop(image, top, left, crop_size)?;
    Ok(if rng.random_bool(0.5) { hflip(&out) } else { out })
}

/// Stacks equally shaped `[H,W,C]` images into `[N,H,W,C]`.
pub fn stack(images: &[Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("cannot stack zero images".into()))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut values = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::shape("stack", "images differ in shape"));
        }
        values.extend_from_slice(img.values());
    }
    Tensor::new(shape, values)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.epoch, self.train_loss, self.val_loss, self.lr)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: Model,
    pub norm: ChannelNorm,
    pub log: Vec<EpochRecord>,
    /// 1-based epoch of the returned snapshot, 0 if no epoch finished.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Set when a non-finite loss or gradient stopped training early.
    pub diverged: bool,
}

/// Index of samples by id, checking that every split id exists.
pub(crate) fn lookup<'a>(samples: &'a [Sample], ids: &[usize]) -> Result<Vec<&'a Sample>> {
    let by_id: HashMap<usize, &Sample> = samples.iter().map(|s| (s.id, s)).collect();
    ids.iter()
        .map(|id| by_id.get(id).copied().ok_or_else(|| Error::Dataset(format!("split refers to missing sample {id}"))))
        .collect()
}

fn targets(batch: &[&Sample]) -> Vec<f64> {
    batch.iter().flat_map(|s| s.labels.iter().map(|&l| l as f64)).collect()
}

/// Checks that the dataset fits the model and training configuration.
pub fn check_compatible(model: &Model, samples: &[Sample], config: &TrainConfig) -> Result<()> {
    config.validate()?;
    let first = samples.first().ok_or_else(|| Error::Dataset("empty dataset".into()))?;
    let classes = model.config.head.classes;
    if first.classes() != classes {
        return Err(Error::Config(format!("dataset has {} classes, model expects {classes}", first.classes())));
    }
    let size = first.image_size();
    if config.crop_size > size {
        return Err(Error::Config(format!("crop_size {} exceeds image size {size}", config.crop_size)));
    }
    if model.config.backbone.input_channels != 1 {
        return Err(Error::Config("synthetic images have one channel".into()));
    }
    model.config.backbone.check_input(config.crop_size, config.crop_size)?;
    Ok(())
}

/// Mean BCE over `samples` using eval-mode statistics on centre crops.
pub fn validation_loss(model: &Model, samples: &[&Sample], norm: &ChannelNorm, crop_size: usize) -> Result<f64> {
    let sums = samples
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let crops = chunk.iter().map(|s| center_crop(&norm.apply(&s.image), crop_size)).collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::new();
            let x = tape.constant(stack(&crops)?);
            let pass = model.forward(&mut tape, x, Mode::Eval)?;
            let loss = tape.bce_with_logits(pass.head.logits, &targets(chunk))?;
            Ok(tape.value(loss)[0] * chunk.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(sums.iter().sum::<f64>() / samples.len() as f64)
}

/// [`train_with`] without a per-epoch callback.
pub fn train(model: Model, samples: &[Sample], split: &DatasetSplit, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, samples, split, config, |_| Ok(()))
}

/// Trains on `split.train`, selecting on `split.val`. `on_epoch` sees each log
/// record as soon as the epoch finishes. Only image-level labels are read.
pub fn train_with(
    mut model: Model,
    samples: &[Sample],
    split: &DatasetSplit,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    check_compatible(&model, samples, config)?;
    let train_set = lookup(samples, &split.train)?;
    let val_set = lookup(samples, &split.val)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Dataset("train and validation parts must be non-empty".into()));
    }
    let norm = ChannelNorm::fit(train_set.iter().map(|s| &s.image))?;
    let train_images: Vec<Tensor> = train_set.iter().map(|s| norm.apply(&s.image)).collect();

    let mut adam = AdamState::new(model.params.tensors().iter().map(|t| &t.tensor));
    let mut plateau = Plateau::default();
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut log = Vec::new();
    let mut diverged = false;

    'epochs: for epoch in 0..config.max_epochs {
        let lr = plateau.lr(config);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT);
        shuffle_rng.set_stream(epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let crops = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ AUGMENT_SALT);
                    rng.set_stream(((epoch as u64) << 32) | train_set[i].id as u64);
                    augment(&train_images[i], config.crop_size, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let members: Vec<&Sample> = batch.iter().map(|&i| train_set[i]).collect();

            let mut tape = Tape::new();
            let x = tape.constant(stack(&crops)?);
            let pass = model.forward(&mut tape, x, Mode::Train)?;
            let loss = tape.bce_with_logits(pass.head.logits, &targets(&members))?;
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                diverged = true;
                break 'epochs;
            }
            tape.backward(loss)?;
            model.params.zero_grads();
            model.accumulate_grads(&tape, &pass);
            let params = model.params.tensors_mut().iter_mut().map(|t| &mut t.tensor);
            if let Err(Error::NonFinite(_)) = adam_step(params, &mut adam, lr, config) {
                diverged = true;
                break 'epochs;
            }
            model.update_running_stats(&tape, &pass);
            loss_sum += value * batch.len() as f64;
        }
        if !model.params.is_finite() {
            diverged = true;
            break;
        }

        let val_loss = validation_loss(&model, &val_set, &norm, config.crop_size)?;
        if !val_loss.is_finite() {
            diverged = true;
            break;
        }
        let record = EpochRecord { epoch: epoch + 1, train_loss: loss_sum / train_set.len() as f64, val_loss, lr };
        on_epoch(&record)?;
        log.push(record);
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch + 1;
            best = model.clone();
        }
        plateau.observe(val_loss, config);
    }
    best.params.zero_grads();
    Ok(TrainOutcome { model: best, norm, log, best_epoch, best_val_loss: best_val, diverged })
}
