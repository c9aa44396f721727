//! Finite-difference gradient checks for every differentiable operator and
//! the full model at small shapes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::{BackboneConfig, Mode, Model, ModelConfig};
use crate::blocks::{class_wise_avg, multi_map_transfer, se_block, HeadConfig, HeadVars, SeVars};
use crate::error::Result;
use crate::tensor::{grad_check_many, BnMode, Tape, Tensor, Var};

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub const OPERATORS: [&str; 13] = [
    "conv2d",
    "avg_pool2d",
    "batchnorm_train",
    "dense",
    "relu",
    "sigmoid",
    "se_block",
    "multi_map_transfer",
    "class_wise_avg",
    "max_min_pool",
    "bce",
    "bce_with_logits",
    "full_model",
];

#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub op: &'static str,
    pub seed: u64,
    pub max_relative_error: f64,
}

impl GradRow {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = Normal::new(0.0, 1.0).unwrap();
    let count = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..count).map(|_| n.sample(rng)).collect()).unwrap()
}

/// Normal draws pushed at least `gap` away from zero, so ReLU kinks stay out of reach.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = normal(shape, rng);
    for v in t.values_mut() {
        *v += gap * v.signum();
    }
    t
}

/// Distinct values with spacing 0.1 in random order, so sorted selections are stable under `EPS`.
fn untied(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let count: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..count).map(|i| i as f64 * 0.1 - count as f64 * 0.05).collect();
    values.shuffle(rng);
    Tensor::new(shape.to_vec(), values).unwrap()
}

/// `sum(y ⊙ r)` with a fixed random `r`, so every output coordinate matters.
fn project(tape: &mut Tape, y: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let r = normal(tape.shape(y), &mut rng);
    let r = tape.constant(r);
    let yr = tape.mul(y, r)?;
    tape.sum(yr)
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            stem_channels: 4,
            num_blocks: 2,
            layers_per_block: 2,
            growth_rate: 3,
            se_reduction: 2,
            ..BackboneConfig::default()
        },
        head: HeadConfig { maps_per_class: 2, classes: 2, ..HeadConfig::default() },
    }
}

/// Maximum relative error of one operator at one seed.
pub fn check_operator(op: &'static str, seed: u64) -> Result<GradRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ps = seed ^ 0x9e37_79b9;
    let report = match op {
        "conv2d" => {
            let stride = 1 + (seed % 2) as usize;
            let x = normal(&[2, 5, 5, 2], &mut rng);
            let k = normal(&[3, 3, 2, 3], &mut rng);
            let b = normal(&[3], &mut rng);
            grad_check_many(
                |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), stride, 1)?;
                    project(t, y, ps)
                },
                &[x, k, b],
                EPS,
            )?
        }
        "avg_pool2d" => grad_check_many(
            |t, v| {
                let y = t.avg_pool2d(v[0], 2, 2)?;
                project(t, y, ps)
            },
            &[normal(&[2, 4, 6, 3], &mut rng)],
            EPS,
        )?,
        "batchnorm_train" => {
            let x = normal(&[2, 3, 3, 3], &mut rng);
            let g = normal(&[3], &mut rng);
            let b = normal(&[3], &mut rng);
            grad_check_many(
                |t, v| {
                    let y = t.batchnorm(v[0], v[1], v[2], BnMode::Train)?;
                    project(t, y, ps)
                },
                &[x, g, b],
                EPS,
            )?
        }
        "dense" => {
            let x = normal(&[3, 4], &mut rng);
            let w = normal(&[5, 4], &mut rng);
            let b = normal(&[5], &mut rng);
            grad_check_many(
                |t, v| {
                    let y = t.dense(v[0], v[1], Some(v[2]))?;
                    project(t, y, ps)
                },
                &[x, w, b],
                EPS,
            )?
        }
        "relu" => grad_check_many(
            |t, v| {
                let y = t.relu(v[0])?;
                project(t, y, ps)
            },
            &[away_from_zero(&[3, 3, 2], 0.05, &mut rng)],
            EPS,
        )?,
        "sigmoid" => grad_check_many(
            |t, v| {
                let y = t.sigmoid(v[0])?;
                project(t, y, ps)
            },
            &[normal(&[3, 3, 2], &mut rng)],
            EPS,
        )?,
        "se_block" => {
            let u = away_from_zero(&[2, 3, 3, 6], 0.05, &mut rng);
            let w1 = normal(&[3, 6], &mut rng);
            let w2 = normal(&[6, 3], &mut rng);
            grad_check_many(
                |t, v| {
                    let y = se_block(t, v[0], SeVars { w1: v[1], w2: v[2] })?;
                    project(t, y, ps)
                },
                &[u, w1, w2],
                EPS,
            )?
        }
        "multi_map_transfer" => {
            let cfg = HeadConfig { maps_per_class: 3, classes: 2, ..HeadConfig::default() };
            let f = normal(&[2, 3, 3, 4], &mut rng);
            let w = normal(&[1, 1, 4, 6], &mut rng);
            let b = normal(&[6], &mut rng);
            grad_check_many(
                |t, v| {
                    let y = multi_map_transfer(t, v[0], HeadVars { weight: v[1], bias: v[2] }, &cfg)?;
                    project(t, y, ps)
                },
                &[f, w, b],
                EPS,
            )?
        }
        "class_wise_avg" => {
            let cfg = HeadConfig { maps_per_class: 3, classes: 2, ..HeadConfig::default() };
            grad_check_many(
                |t, v| {
                    let y = class_wise_avg(t, v[0], &cfg)?;
                    project(t, y, ps)
                },
                &[normal(&[2, 3, 3, 6], &mut rng)],
                EPS,
            )?
        }
        "max_min_pool" => {
            let k_plus = rng.random_range(1..=4);
            let k_minus = rng.random_range(0..=4);
            let alpha = [0.0, 0.7, 1.3][rng.random_range(0..3)];
            grad_check_many(
                |t, v| {
                    let y = t.max_min_pool(v[0], k_plus, k_minus, alpha)?;
                    project(t, y, ps)
                },
                &[untied(&[2, 3, 3, 2], &mut rng)],
                EPS,
            )?
        }
        "bce" => {
            let targets: Vec<f64> = (0..6).map(|_| rng.random_range(0..2) as f64).collect();
            grad_check_many(
                |t, v| {
                    let p = t.sigmoid(v[0])?;
                    t.bce(p, &targets)
                },
                &[normal(&[2, 3], &mut rng)],
                EPS,
            )?
        }
        "bce_with_logits" => {
            let targets: Vec<f64> = (0..6).map(|_| rng.random_range(0..2) as f64).collect();
            grad_check_many(|t, v| t.bce_with_logits(v[0], &targets), &[normal(&[2, 3], &mut rng)], EPS)?
        }
        "full_model" => {
            let model = Model::new(tiny_model(), seed)?;
            let mut inputs = vec![normal(&[2, 8, 8, 1], &mut rng)];
            inputs.extend(model.params.tensors().iter().map(|t| t.tensor.clone()));
            let targets: Vec<f64> = (0..4).map(|_| rng.random_range(0..2) as f64).collect();
            grad_check_many(
                |t, v| {
                    let pass = model.forward_bound(t, v[0], Mode::Train, v[1..].to_vec())?;
                    t.bce(pass.head.probs, &targets)
                },
                &inputs,
                EPS,
            )?
        }
        _ => return Err(crate::Error::InvalidArgument(format!("unknown operator {op:?}"))),
    };
    Ok(GradRow { op, seed, max_relative_error: report.max_relative_error })
}

/// Every operator at every seed.
pub fn run(seeds: &[u64]) -> Result<Vec<GradRow>> {
    let mut rows = Vec::new();
    for op in OPERATORS {
        for &seed in seeds {
            rows.push(check_operator(op, seed)?);
        }
    }
    Ok(rows)
}
