//! Class-wise averaging of multi-maps and max-min spatial pooling kernels.

use crate::error::{Error, Result};

pub(crate) fn class_wise_shape(shape: &[usize], maps_per_class: usize) -> Result<Vec<usize>> {
    let channels = *shape
        .last()
        .ok_or_else(|| Error::shape("class_wise_avg", "rank-0 input"))?;
    if maps_per_class == 0 || channels % maps_per_class != 0 {
        return Err(Error::shape(
            "class_wise_avg",
            format!("{channels} channels not divisible by M={maps_per_class}"),
        ));
    }
    let mut out = shape.to_vec();
    *out.last_mut().unwrap() = channels / maps_per_class;
    Ok(out)
}

/// Averages each class-major block of `maps_per_class` channels.
pub(crate) fn class_wise_avg(x: &[f64], maps_per_class: usize) -> Vec<f64> {
    let m = maps_per_class as f64;
    x.chunks_exact(maps_per_class)
        .map(|block| block.iter().sum::<f64>() / m)
        .collect()
}

pub(crate) fn class_wise_avg_backward(g: &[f64], maps_per_class: usize) -> Vec<f64> {
    let m = maps_per_class as f64;
    g.iter()
        .flat_map(|&v| std::iter::repeat_n(v / m, maps_per_class))
        .collect()
}

pub(crate) fn check_k(positions: usize, k_plus: usize, k_minus: usize) -> Result<()> {
    if k_plus == 0 {
        return Err(Error::InvalidArgument("k+ must be at least 1".into()));
    }
    if k_plus > positions || k_minus > positions {
        return Err(Error::InvalidArgument(format!(
            "k+={k_plus}, k-={k_minus} exceed the {positions} spatial positions"
        )));
    }
    Ok(())
}

/// Positions of the `k` largest (or smallest) entries, returned in ascending
/// position order. Ties go to the lower row-major position.
pub(crate) fn extreme_positions(map: &[f64], k: usize, largest: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..map.len()).collect();
    order.sort_by(|&i, &j| {
        let by_value = if largest {
            map[j].total_cmp(&map[i])
        } else {
            map[i].total_cmp(&map[j])
        };
        by_value.then(i.cmp(&j))
    });
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Score of one class map: mean of its `k_plus` largest entries plus `alpha`
/// times the mean of its `k_minus` smallest entries (omitted when `k_minus == 0`).
/// Selected entries are summed in row-major order.
pub fn max_min_score(map: &[f64], k_plus: usize, k_minus: usize, alpha: f64) -> f64 {
    let top = extreme_positions(map, k_plus, true);
    let mut score = top.iter().map(|&p| map[p]).sum::<f64>() / k_plus as f64;
    if k_minus > 0 {
        let bottom = extreme_positions(map, k_minus, false);
        score += alpha * (bottom.iter().map(|&p| map[p]).sum::<f64>() / k_minus as f64);
    }
    score
}

/// Max-min pooling over `[n, positions, c]` channels-last data.
/// Returns the `[n, c]` scores and the flat input indices of the selections.
pub(crate) fn max_min_forward(
    x: &[f64],
    n: usize,
    positions: usize,
    c: usize,
    k_plus: usize,
    k_minus: usize,
    alpha: f64,
) -> (Vec<f64>, Vec<usize>, Vec<usize>) {
    let mut out = Vec::with_capacity(n * c);
    let mut top = Vec::with_capacity(n * c * k_plus);
    let mut bottom = Vec::with_capacity(n * c * k_minus);
    let mut map = vec![0.0; positions];
    for s in 0..n {
        let base = s * positions * c;
        for ch in 0..c {
            for (p, v) in map.iter_mut().enumerate() {
                *v = x[base + p * c + ch];
            }
            let hi = extreme_positions(&map, k_plus, true);
            let mut score = hi.iter().map(|&p| map[p]).sum::<f64>() / k_plus as f64;
            top.extend(hi.iter().map(|&p| base + p * c + ch));
            if k_minus > 0 {
                let lo = extreme_positions(&map, k_minus, false);
                score += alpha * (lo.iter().map(|&p| map[p]).sum::<f64>() / k_minus as f64);
                bottom.extend(lo.iter().map(|&p| base + p * c + ch));
            }
            out.push(score);
        }
    }
    (out, top, bottom)
}

pub(crate) fn max_min_backward(
    dx: &mut [f64],
    g: &[f64],
    top: &[usize],
    bottom: &[usize],
    k_plus: usize,
    k_minus: usize,
    alpha: f64,
) {
    for (j, &gj) in g.iter().enumerate() {
        for &i in &top[j * k_plus..(j + 1) * k_plus] {
            dx[i] += gj / k_plus as f64;
        }
        if k_minus > 0 {
            for &i in &bottom[j * k_minus..(j + 1) * k_minus] {
                dx[i] += gj * alpha / k_minus as f64;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        let map = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(max_min_score(&map, 1, 1, 0.7), 4.0 + 0.7 * 1.0);
        assert!((max_min_score(&map, 2, 2, 0.7) - 4.55).abs() < 1e-12);
        assert_eq!(max_min_score(&map, 1, 1, 0.0), 4.0);
        assert_eq!(max_min_score(&map, 1, 0, 0.7), 4.0);
    }

    #[test]
    fn ties_pick_lower_position() {
        assert_eq!(extreme_positions(&[2.0, 5.0, 5.0, 1.0], 1, true), vec![1]);
        assert_eq!(extreme_positions(&[0.0, 5.0, 0.0], 2, false), vec![0, 2]);
    }

    #[test]
    fn class_wise_avg_examples() {
        // M=2, C=1: maps constant 1 and 3 at two positions
        assert_eq!(class_wise_avg(&[1.0, 3.0, 1.0, 3.0], 2), vec![2.0, 2.0]);
        let x = [0.3, -1.2, 5.0];
        assert_eq!(class_wise_avg(&x, 1), x.to_vec());
        assert!(class_wise_shape(&[2, 2, 5], 2).is_err());
        assert_eq!(class_wise_shape(&[2, 2, 6], 3).unwrap(), vec![2, 2, 2]);
    }

    #[test]
    fn k_validation() {
        assert!(check_k(4, 0, 0).is_err());
        assert!(check_k(4, 5, 0).is_err());
        assert!(check_k(4, 1, 5).is_err());
        assert!(check_k(4, 4, 4).is_ok());
    }
}
