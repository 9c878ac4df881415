//! Small numeric helpers shared across modules.

/// Pairwise summation with a fixed recursion structure. Deterministic for a
/// given slice and more accurate than a left fold on long vectors.
pub fn sum_pairwise(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    sum_pairwise(&xs[..mid]) + sum_pairwise(&xs[mid..])
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    sum_pairwise(xs) / xs.len() as f64
}

/// Index of the maximum, ties broken by the lowest index. `None` on empty
/// input. Values are assumed finite.
pub fn argmax_first(xs: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in xs.iter().enumerate() {
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// log(sum(exp(xs))) with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + xs.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln()
}

/// Numerically stable ln(1 + e^x).
pub fn ln_1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Probabilities proportional to exp(logits / lambda).
pub fn softmax(logits: &[f64], lambda: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&z| z / lambda).collect();
    let mx = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scaled.iter().map(|&z| (z - mx).exp()).collect();
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    out
}

/// Draw an index from a probability vector using one uniform variate.
pub fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Shannon entropy in nats of a probability vector (0 log 0 := 0).
pub fn entropy(probs: &[f64]) -> f64 {
    probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// Median of a slice; averages the two middle elements on even length.
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn pairwise_sum_matches_fold_on_small_input() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let naive: f64 = xs.iter().sum();
        assert_abs_diff_eq!(sum_pairwise(&xs), naive, epsilon = 1e-9);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax_first(&[1.0, 3.0, 3.0, 2.0]), Some(1));
        assert_eq!(argmax_first(&[5.0, 5.0]), Some(0));
        assert_eq!(argmax_first(&[]), None);
    }

    #[test]
    fn softmax_is_normalized_and_ordered() {
        let p = softmax(&[1.0, 2.0, 3.0], 1.0);
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(p[0] < p[1] && p[1] < p[2]);
    }

    #[test]
    fn two_way_softmax_is_sigmoid() {
        // softmax([1, 2]) = (sigmoid(-1), sigmoid(1))
        let p = softmax(&[1.0, 2.0], 1.0);
        assert_abs_diff_eq!(p[0], 0.2689414213699951, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.7310585786300049, epsilon = 1e-12);
    }

    #[test]
    fn categorical_sampling_covers_edges() {
        let probs = [0.25, 0.5, 0.25];
        assert_eq!(sample_categorical(&probs, 0.0), 0);
        assert_eq!(sample_categorical(&probs, 0.3), 1);
        assert_eq!(sample_categorical(&probs, 0.999999), 2);
    }

    #[test]
    fn median_handles_even_and_odd() {
        assert_abs_diff_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_abs_diff_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn ln_1p_exp_is_stable() {
        assert_abs_diff_eq!(ln_1p_exp(0.0), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(ln_1p_exp(-10.0), 4.539889921686465e-5, epsilon = 1e-15);
        assert!(ln_1p_exp(800.0).is_finite());
    }
}
