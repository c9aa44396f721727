#![allow(dead_code)]

/// Best mean over every subset of exactly `k` positions, scanning all binary masks.
pub fn best_subset_mean(map: &[f64], k: usize, largest: bool) -> f64 {
    let n = map.len();
    let mut best = if largest { f64::NEG_INFINITY } else { f64::INFINITY };
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let mut sum = 0.0;
        for (i, v) in map.iter().enumerate() {
            if mask & (1 << i) != 0 {
                sum += v;
            }
        }
        let mean = sum / k as f64;
        best = if largest { best.max(mean) } else { best.min(mean) };
    }
    best
}

/// Max-min pooling score by exhaustive mask enumeration.
pub fn brute_force_max_min(map: &[f64], k_plus: usize, k_minus: usize, alpha: f64) -> f64 {
    let top = best_subset_mean(map, k_plus, true);
    if k_minus == 0 {
        top
    } else {
        top + alpha * best_subset_mean(map, k_minus, false)
    }
}

/// AUC from all positive/negative pairs, ties counted as one half.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] == 0 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}
