mod common;

use proptest::prelude::*;
use weakmap::blocks::{max_min_score, squeeze};
use weakmap::config::RunConfig;
use weakmap::eval::roc_auc;
use weakmap::tensor::{Tape, Tensor};
use weakmap::train::{adam_step, plateau_schedule, AdamState, TrainConfig};

use common::{brute_force_max_min, pairwise_auc};

fn map_and_ks() -> impl Strategy<Value = (Vec<f64>, usize, usize, f64)> {
    (1usize..=9).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0f64..5.0, n),
            1..=n.min(4),
            0..=n.min(4),
            prop::sample::select(vec![0.0, 0.7, 1.3]),
        )
    })
}

proptest! {
    #[test]
    fn pooling_matches_mask_enumeration((map, kp, km, alpha) in map_and_ks()) {
        prop_assert_eq!(max_min_score(&map, kp, km, alpha), brute_force_max_min(&map, kp, km, alpha));
    }

    #[test]
    fn pooling_is_monotone((map, kp, km, alpha) in map_and_ks(), idx in 0usize..9, bump in 0.0f64..3.0) {
        let mut raised = map.clone();
        let i = idx % map.len();
        raised[i] += bump;
        prop_assert!(max_min_score(&raised, kp, km, alpha) >= max_min_score(&map, kp, km, alpha) - 1e-12);
    }

    #[test]
    fn pooling_shift_equivariance((map, kp, km, alpha) in map_and_ks(), t in -3.0f64..3.0) {
        let shifted: Vec<f64> = map.iter().map(|v| v + t).collect();
        let gain = if km == 0 { 1.0 } else { 1.0 + alpha };
        let want = max_min_score(&map, kp, km, alpha) + t * gain;
        prop_assert!((max_min_score(&shifted, kp, km, alpha) - want).abs() < 1e-9);
    }

    #[test]
    fn pooling_permutation_invariance((map, kp, km, alpha) in map_and_ks(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut perm = map.clone();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let a = max_min_score(&map, kp, km, alpha);
        let b = max_min_score(&perm, kp, km, alpha);
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn top_mean_within_range((map, kp, _km, _alpha) in map_and_ks()) {
        let top = max_min_score(&map, kp, 0, 0.0);
        let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(top >= lo - 1e-12 && top <= hi + 1e-12);
    }

    #[test]
    fn auc_matches_pairwise_oracle(
        pairs in prop::collection::vec((0u8..6, 0u8..2), 2..200)
    ) {
        // small score alphabet forces many ties
        let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64 * 0.25).collect();
        let labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        prop_assert_eq!(roc_auc(&scores, &labels), pairwise_auc(&scores, &labels));
    }

    #[test]
    fn auc_of_negated_scores_complements(
        scores in prop::collection::hash_set(-1000i32..1000, 2..100),
        bits in prop::collection::vec(0u8..2, 100)
    ) {
        let scores: Vec<f64> = scores.into_iter().map(|s| s as f64).collect();
        let labels: Vec<u8> = bits[..scores.len()].to_vec();
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        if let (Some(a), Some(b)) = (roc_auc(&scores, &labels), roc_auc(&neg, &labels)) {
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_rank_invariance(pairs in prop::collection::vec((-10.0f64..10.0, 0u8..2), 2..150)) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        let transformed: Vec<f64> = scores.iter().map(|s| (s / 3.0).exp() * 2.0 + 1.0).collect();
        prop_assert_eq!(roc_auc(&scores, &labels), roc_auc(&transformed, &labels));
    }

    #[test]
    fn squeeze_is_linear(
        x in prop::collection::vec(-2.0f64..2.0, 24),
        y in prop::collection::vec(-2.0f64..2.0, 24),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let pool = |v: Vec<f64>| {
            let mut tape = Tape::new();
            let u = tape.constant(Tensor::new([2, 3, 4], v).unwrap());
            let z = squeeze(&mut tape, u).unwrap();
            tape.value(z).to_vec()
        };
        let mixed: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let (px, py, pm) = (pool(x), pool(y), pool(mixed));
        for c in 0..4 {
            prop_assert!((pm[c] - (a * px[c] + b * py[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_stays_open_unit(x in prop::collection::vec(-30.0f64..30.0, 1..20)) {
        let mut tape = Tape::new();
        let n = x.len();
        let v = tape.constant(Tensor::new([n], x).unwrap());
        let s = tape.sigmoid(v).unwrap();
        prop_assert!(tape.value(s).iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn bce_is_non_negative(
        logits in prop::collection::vec(-20.0f64..20.0, 1..12),
        bits in prop::collection::vec(0u8..2, 12),
    ) {
        let n = logits.len();
        let targets: Vec<f64> = bits[..n].iter().map(|&b| b as f64).collect();
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::new([n], logits).unwrap());
        let l = tape.bce_with_logits(r, &targets).unwrap();
        prop_assert!(tape.value(l)[0] >= 0.0);
        let p = tape.sigmoid(r).unwrap();
        let l = tape.bce(p, &targets).unwrap();
        prop_assert!(tape.value(l)[0] >= 0.0);
    }

    #[test]
    fn sigmoid_bce_gradient_is_residual(
        logits in prop::collection::vec(-8.0f64..8.0, 1..10),
        bits in prop::collection::vec(0u8..2, 10),
    ) {
        let c = logits.len();
        let targets: Vec<f64> = bits[..c].iter().map(|&b| b as f64).collect();
        let expected: Vec<f64> = logits
            .iter()
            .zip(&targets)
            .map(|(r, y)| (1.0 / (1.0 + (-r).exp()) - y) / c as f64)
            .collect();
        for fused in [false, true] {
            let mut tape = Tape::new();
            let r = tape.leaf(&Tensor::param([c], logits.clone()).unwrap());
            let loss = if fused {
                tape.bce_with_logits(r, &targets).unwrap()
            } else {
                let p = tape.sigmoid(r).unwrap();
                tape.bce(p, &targets).unwrap()
            };
            tape.backward(loss).unwrap();
            let grad = tape.grad(r).unwrap();
            for (g, e) in grad.iter().zip(&expected) {
                prop_assert!((g - e).abs() < 1e-10, "fused {fused}: {g} vs {e}");
            }
        }
    }

    #[test]
    fn adam_with_zero_lr_is_identity(
        values in prop::collection::vec(-5.0f64..5.0, 1..10),
        grads in prop::collection::vec(-5.0f64..5.0, 10),
        steps in 1usize..5,
    ) {
        let n = values.len();
        let mut p = Tensor::param([n], values.clone()).unwrap();
        p.grad_mut().copy_from_slice(&grads[..n]);
        let mut state = AdamState::new([&p]);
        for _ in 0..steps {
            adam_step([&mut p], &mut state, 0.0, &TrainConfig::default()).unwrap();
        }
        prop_assert_eq!(p.values(), values.as_slice());
        prop_assert_eq!(state.t, steps as u64);
        prop_assert!(state.v[0].iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn plateau_lr_only_decreases(history in prop::collection::vec(0.0f64..1.0, 0..30)) {
        let cfg = TrainConfig::default();
        let mut last = cfg.lr0;
        for i in 0..=history.len() {
            let lr = plateau_schedule(&history[..i], &cfg);
            prop_assert!(lr <= last);
            last = lr;
        }
    }

    #[test]
    fn config_round_trips(
        seed in any::<u64>(),
        alpha in 0.0f64..2.0,
        lr in 1e-6f64..1e-1,
        m in 1usize..16,
        prior in prop::collection::vec(0.0f64..1.0, 4),
        use_se in any::<bool>(),
    ) {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.model.head.alpha = alpha;
        cfg.model.head.maps_per_class = m;
        cfg.model.backbone.use_se = use_se;
        cfg.train.lr0 = lr;
        cfg.synth.class_prior = prior;
        cfg.sync_seeds();
        prop_assert_eq!(RunConfig::parse_str(&cfg.to_string()).unwrap(), cfg);
    }
}
