//! Multi-map transfer layer, class-wise averaging and max-min spatial pooling.
//!
//! The transfer layer is a 1×1 convolution producing `M` maps per class in
//! class-major channel order: channels `c*M .. c*M+M-1` belong to class `c`.
//! Each class's maps are averaged into `zbar_c`, and the class score is
//! `mean(top k+ of zbar_c) + alpha * mean(bottom k- of zbar_c)`.

use rand::Rng;

use super::se::he_tensor;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub maps_per_class: usize,
    pub classes: usize,
    pub k_plus: usize,
    pub k_minus: usize,
    pub alpha: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { maps_per_class: 12, classes: 4, k_plus: 1, k_minus: 1, alpha: 0.7 }
    }
}

impl HeadConfig {
    pub fn total_maps(&self) -> usize {
        self.maps_per_class * self.classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.maps_per_class == 0 || self.classes == 0 || self.k_plus == 0 {
            return Err(Error::Config("M, C and k+ must be positive".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Transfer-layer weights `[1, 1, D, M*C]` and bias `[M*C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl HeadParams {
    pub fn init<R: Rng>(features: usize, config: &HeadConfig, rng: &mut R) -> Self {
        let maps = config.total_maps();
        Self {
            weight: he_tensor(&[1, 1, features, maps], features, rng),
            bias: Tensor::param([maps], vec![0.0; maps]).unwrap(),
        }
    }

    pub fn zeros(features: usize, config: &HeadConfig) -> Self {
        let maps = config.total_maps();
        Self {
            weight: Tensor::param([1, 1, features, maps], vec![0.0; features * maps]).unwrap(),
            bias: Tensor::param([maps], vec![0.0; maps]).unwrap(),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> HeadVars {
        HeadVars { weight: tape.leaf(&self.weight), bias: tape.leaf(&self.bias) }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

/// Pre-sigmoid class scores and their probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    pub logits: Tensor,
    pub probs: Tensor,
}

/// Nodes produced by [`head_forward`].
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub maps: Var,
    pub class_maps: Var,
    pub logits: Var,
    pub probs: Var,
}

impl HeadOutput {
    pub fn scores(&self, tape: &Tape) -> ClassScores {
        ClassScores { logits: tape.tensor(self.logits), probs: tape.tensor(self.probs) }
    }
}

pub fn multi_map_transfer(tape: &mut Tape, features: Var, head: HeadVars, config: &HeadConfig) -> Result<Var> {
    let out = *tape.shape(head.weight).last().unwrap_or(&0);
    if out != config.total_maps() {
        return Err(Error::shape(
            "multi_map_transfer",
            format!("weights produce {out} maps, config needs M*C = {}", config.total_maps()),
        ));
    }
    tape.conv2d(features, head.weight, Some(head.bias), 1, 0)
}

pub fn class_wise_avg(tape: &mut Tape, maps: Var, config: &HeadConfig) -> Result<Var> {
    let channels = *tape.shape(maps).last().unwrap_or(&0);
    if channels != config.total_maps() {
        return Err(Error::shape(
            "class_wise_avg",
            format!("{channels} channels, expected M*C = {}", config.total_maps()),
        ));
    }
    tape.class_wise_avg(maps, config.maps_per_class)
}

pub fn max_min_pool(tape: &mut Tape, class_maps: Var, config: &HeadConfig) -> Result<Var> {
    tape.max_min_pool(class_maps, config.k_plus, config.k_minus, config.alpha)
}

pub fn head_forward(tape: &mut Tape, features: Var, head: HeadVars, config: &HeadConfig) -> Result<HeadOutput> {
    let maps = multi_map_transfer(tape, features, head, config)?;
    let class_maps = class_wise_avg(tape, maps, config)?;
    let logits = max_min_pool(tape, class_maps, config)?;
    let probs = tape.sigmoid(logits)?;
    Ok(HeadOutput { maps, class_maps, logits, probs })
}

/// Single-map reference head: 1×1 conv, global spatial max per class, sigmoid.
/// Returns `(logits, probs)` with shape `[C]` or `[N, C]` flattened.
pub fn global_max_reference(tape: &mut Tape, features: Var, head: HeadVars) -> Result<(Vec<f64>, Vec<f64>)> {
    let maps = tape.conv2d(features, head.weight, Some(head.bias), 1, 0)?;
    let shape = tape.shape(maps).to_vec();
    let c = *shape.last().unwrap();
    let per_sample = shape[shape.len() - 3] * shape[shape.len() - 2] * c;
    let values = tape.value(maps);
    let mut logits = Vec::new();
    for sample in values.chunks_exact(per_sample) {
        for ch in 0..c {
            let max = sample.iter().skip(ch).step_by(c).copied().fold(f64::NEG_INFINITY, f64::max);
            logits.push(max);
        }
    }
    let lv = tape.constant(Tensor::new([logits.len()], logits.clone())?);
    let probs = tape.sigmoid(lv)?;
    Ok((logits, tape.value(probs).to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_many;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(m: usize, c: usize, kp: usize, km: usize, alpha: f64) -> HeadConfig {
        HeadConfig { maps_per_class: m, classes: c, k_plus: kp, k_minus: km, alpha }
    }

    #[test]
    fn transfer_zero_weights_gives_bias() {
        let cfg = config(2, 2, 1, 1, 0.7);
        let mut params = HeadParams::zeros(3, &cfg);
        params.bias.values_mut().copy_from_slice(&[0.1, 0.2, 0.3, 0.4]);
        let mut tape = Tape::new();
        let hv = params.bind(&mut tape);
        let f = tape.constant(Tensor::full([2, 2, 3], 9.0));
        let maps = multi_map_transfer(&mut tape, f, hv, &cfg).unwrap();
        for px in tape.value(maps).chunks(4) {
            assert_eq!(px, &[0.1, 0.2, 0.3, 0.4]);
        }
    }

    #[test]
    fn transfer_two_maps_one_class() {
        let cfg = config(2, 1, 1, 0, 0.0);
        let mut tape = Tape::new();
        let hv = HeadVars {
            weight: tape.constant(Tensor::new([1, 1, 1, 2], vec![2.0, 3.0]).unwrap()),
            bias: tape.constant(Tensor::zeros([2])),
        };
        let f = tape.constant(Tensor::full([3, 3, 1], 1.0));
        let maps = multi_map_transfer(&mut tape, f, hv, &cfg).unwrap();
        for px in tape.value(maps).chunks(2) {
            assert_eq!(px, &[2.0, 3.0]);
        }
        let bad = config(3, 1, 1, 0, 0.0);
        assert!(multi_map_transfer(&mut tape, f, hv, &bad).is_err());
    }

    #[test]
    fn single_map_transfer_has_class_count_channels() {
        let cfg = config(1, 5, 1, 0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = HeadParams::init(7, &cfg, &mut rng);
        let mut tape = Tape::new();
        let hv = params.bind(&mut tape);
        let f = tape.constant(Tensor::full([4, 4, 7], 0.5));
        let maps = multi_map_transfer(&mut tape, f, hv, &cfg).unwrap();
        assert_eq!(tape.shape(maps), &[4, 4, 5]);
        let zbar = class_wise_avg(&mut tape, maps, &cfg).unwrap();
        assert_eq!(tape.value(zbar), tape.value(maps));
    }

    #[test]
    fn class_wise_avg_is_invariant_to_map_order_within_class() {
        let cfg = config(3, 2, 1, 0, 0.0);
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..24).map(|i| (i as f64 * 1.3).cos()).collect();
        let mut permuted = vals.clone();
        for px in permuted.chunks_mut(6) {
            px[..3].reverse();
            px[3..].rotate_left(1);
        }
        let a = tape.constant(Tensor::new([2, 2, 6], vals).unwrap());
        let b = tape.constant(Tensor::new([2, 2, 6], permuted).unwrap());
        let za = class_wise_avg(&mut tape, a, &cfg).unwrap();
        let zb = class_wise_avg(&mut tape, b, &cfg).unwrap();
        for (x, y) in tape.value(za).iter().zip(tape.value(zb)) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn max_min_pool_examples_and_errors() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new([2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let r = max_min_pool(&mut tape, z, &config(1, 1, 1, 1, 0.7)).unwrap();
        assert_eq!(tape.value(r), &[4.0 + 0.7 * 1.0]);
        let r = max_min_pool(&mut tape, z, &config(1, 1, 2, 2, 0.7)).unwrap();
        assert!((tape.value(r)[0] - 4.55).abs() < 1e-12);
        let r = max_min_pool(&mut tape, z, &config(1, 1, 1, 1, 0.0)).unwrap();
        assert_eq!(tape.value(r), &[4.0]);
        assert!(max_min_pool(&mut tape, z, &config(1, 1, 5, 0, 0.7)).is_err());
        assert!(max_min_pool(&mut tape, z, &config(1, 1, 1, 5, 0.7)).is_err());
    }

    #[test]
    fn zero_head_gives_half() {
        let cfg = HeadConfig::default();
        let params = HeadParams::zeros(10, &cfg);
        let mut tape = Tape::new();
        let hv = params.bind(&mut tape);
        let f = tape.constant(Tensor::full([2, 4, 4, 10], 3.0));
        let out = head_forward(&mut tape, f, hv, &cfg).unwrap();
        let s = out.scores(&tape);
        assert_eq!(s.logits.shape(), &[2, 4]);
        assert!(s.logits.values().iter().all(|&v| v == 0.0));
        assert!(s.probs.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn head_gradient() {
        let cfg = config(3, 2, 2, 1, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = HeadParams::init(4, &cfg, &mut rng);
        let f = he_tensor(&[2, 3, 3, 4], 2, &mut rng);
        let report = grad_check_many(
            |tape, v| {
                let out = head_forward(tape, v[0], HeadVars { weight: v[1], bias: v[2] }, &cfg)?;
                tape.bce(out.probs, &[1.0, 0.0, 0.0, 1.0])
            },
            &[f, params.weight.clone(), params.bias.clone()],
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}
