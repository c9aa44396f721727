//! Squeeze-and-excitation channel recalibration.
//!
//! `z = mean_{i,j} U[i,j,:]`, `s = sigmoid(W2 · relu(W1 · z))`, `out = s ⊙ U`
//! with `s` broadcast over the spatial axes. The gate has no bias terms.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Bottleneck gate weights `W1: [hidden, C]`, `W2: [C, hidden]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeParams {
    pub w1: Tensor,
    pub w2: Tensor,
    pub reduction: usize,
}

impl SeParams {
    /// `max(1, floor(channels / reduction))`.
    pub fn hidden_width(channels: usize, reduction: usize) -> usize {
        (channels / reduction.max(1)).max(1)
    }

    pub fn new(w1: Tensor, w2: Tensor, reduction: usize) -> Result<Self> {
        let (&[hidden, c], &[c2, hidden2]) = (w1.shape(), w2.shape()) else {
            return Err(Error::shape("se_params", "W1 and W2 must be rank 2"));
        };
        if c != c2 || hidden != hidden2 || hidden != Self::hidden_width(c, reduction) {
            return Err(Error::shape(
                "se_params",
                format!("W1 {:?} / W2 {:?} inconsistent with reduction {reduction}", w1.shape(), w2.shape()),
            ));
        }
        Ok(Self { w1, w2, reduction })
    }

    /// He-initialized gate weights.
    pub fn init<R: Rng>(channels: usize, reduction: usize, rng: &mut R) -> Self {
        let hidden = Self::hidden_width(channels, reduction);
        let w1 = he_tensor(&[hidden, channels], channels, rng);
        let w2 = he_tensor(&[channels, hidden], hidden, rng);
        Self { w1, w2, reduction }
    }

    pub fn channels(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape) -> SeVars {
        SeVars { w1: tape.leaf(&self.w1), w2: tape.leaf(&self.w2) }
    }
}

pub(crate) fn he_tensor<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    let n = shape.iter().product();
    let values = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::param(shape.to_vec(), values).expect("shape product matches")
}

/// Gate weights registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SeVars {
    pub w1: Var,
    pub w2: Var,
}

/// Channel attention coefficients, each strictly inside `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateVector(Vec<f64>);

impl GateVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::InvalidArgument(format!("gate value {v} outside (0,1)")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Spatial mean of every channel.
pub fn squeeze(tape: &mut Tape, u: Var) -> Result<Var> {
    tape.global_avg_pool(u)
}

/// `sigmoid(W2 · relu(W1 · z))`.
pub fn excite(tape: &mut Tape, z: Var, se: SeVars) -> Result<Var> {
    let hidden = tape.dense(z, se.w1, None)?;
    let hidden = tape.relu(hidden)?;
    let logits = tape.dense(hidden, se.w2, None)?;
    tape.sigmoid(logits)
}

/// Scales channel `c` of `u` by `s[c]`.
pub fn recalibrate(tape: &mut Tape, u: Var, s: Var) -> Result<Var> {
    tape.mul(u, s)
}

pub fn se_block(tape: &mut Tape, u: Var, se: SeVars) -> Result<Var> {
    let z = squeeze(tape, u)?;
    let s = excite(tape, z, se)?;
    recalibrate(tape, u, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_many;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gate(z: Vec<f64>, w1: Tensor, w2: Tensor) -> Vec<f64> {
        let mut tape = Tape::new();
        let zv = tape.constant(Tensor::new([z.len()], z).unwrap());
        let se = SeVars { w1: tape.constant(w1), w2: tape.constant(w2) };
        let s = excite(&mut tape, zv, se).unwrap();
        tape.value(s).to_vec()
    }

    #[test]
    fn hidden_width_clamps() {
        assert_eq!(SeParams::hidden_width(64, 16), 4);
        assert_eq!(SeParams::hidden_width(20, 16), 1);
        assert_eq!(SeParams::hidden_width(4, 16), 1);
    }

    #[test]
    fn zero_w1_gives_half() {
        let s = gate(vec![3.0, -2.0, 0.5], Tensor::zeros([1, 3]), Tensor::full([3, 1], 4.0));
        assert_eq!(s, vec![0.5; 3]);
    }

    #[test]
    fn two_channel_example() {
        let s = gate(
            vec![1.0, 1.0],
            Tensor::new([1, 2], vec![1.0, 1.0]).unwrap(),
            Tensor::new([2, 1], vec![1.0, 1.0]).unwrap(),
        );
        let want = 1.0 / (1.0 + (-2.0f64).exp());
        assert_eq!(s, vec![want, want]);
        assert!((s[0] - 0.880797).abs() < 1e-6);
    }

    #[test]
    fn relu_kills_negative_hidden() {
        let s = gate(
            vec![1.0, 1.0],
            Tensor::new([1, 2], vec![-1.0, -1.0]).unwrap(),
            Tensor::new([2, 1], vec![5.0, -5.0]).unwrap(),
        );
        assert_eq!(s, vec![0.5, 0.5]);
    }

    #[test]
    fn recalibrate_examples() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::full([2, 2, 1], 4.0));
        let s = tape.constant(Tensor::new([1], vec![0.5]).unwrap());
        let y = recalibrate(&mut tape, u, s).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 2.0));

        let uv: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin() + 1.5).collect();
        let u = tape.constant(Tensor::new([2, 2, 3], uv.clone()).unwrap());
        let ones = tape.constant(Tensor::full([3], 1.0));
        let y = recalibrate(&mut tape, u, ones).unwrap();
        assert_eq!(tape.value(y), uv.as_slice());

        let gates = [0.2, 0.9, 0.55];
        let s = tape.constant(Tensor::new([3], gates.to_vec()).unwrap());
        let y = recalibrate(&mut tape, u, s).unwrap();
        for (i, (o, x)) in tape.value(y).iter().zip(&uv).enumerate() {
            assert!((o / x - gates[i % 3]).abs() < 1e-14);
        }
        let bad = tape.constant(Tensor::full([2], 1.0));
        assert!(recalibrate(&mut tape, u, bad).is_err());
    }

    #[test]
    fn zero_input_stays_zero_and_shape_is_kept() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = SeParams::init(5, 2, &mut rng);
        let mut tape = Tape::new();
        let se = params.bind(&mut tape);
        let u = tape.constant(Tensor::zeros([3, 4, 5]));
        let y = se_block(&mut tape, u, se).unwrap();
        assert_eq!(tape.shape(y), &[3, 4, 5]);
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
        let ub = tape.constant(Tensor::full([2, 3, 4, 5], 1.0));
        let y = se_block(&mut tape, ub, se).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 4, 5]);
    }

    #[test]
    fn se_block_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = SeParams::init(6, 2, &mut rng);
        let u = he_tensor(&[2, 3, 3, 6], 4, &mut rng);
        let report = grad_check_many(
            |tape, v| {
                let y = se_block(tape, v[0], SeVars { w1: v[1], w2: v[2] })?;
                let y = tape.mul(y, y)?;
                tape.mean(y)
            },
            &[u, params.w1.clone(), params.w2.clone()],
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn gate_vector_rejects_closed_bounds() {
        assert!(GateVector::new(vec![0.5, 1.0]).is_err());
        assert!(GateVector::new(vec![0.0]).is_err());
        assert_eq!(GateVector::new(vec![0.25]).unwrap().values(), &[0.25]);
    }
}
