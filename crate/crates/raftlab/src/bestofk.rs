//! Exact and sampled evaluation of the induced best-of-K policy.
//!
//! Drawing K responses and keeping the highest-reward one defines the
//! best-of-K policy. For enumerable spaces its expected reward has a closed
//! form through the order statistics of the reward distribution, and for
//! rewards spanning a range of width `B` the expectation is squeezed by
//!
//! ```text
//! mean <= E[best-of-K] <= mean + sqrt(B^2 / 2 * ln K)
//! ```
//!
//! `bound_check` verifies both inequalities exactly; a violation means an
//! exact computation is broken, so it surfaces as a hard error.

use std::fmt::Write as _;

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::generator::Policy;
use crate::reward::RewardFn;
use crate::util::sum_pairwise;

/// One exact bound verification.
#[derive(Debug, Clone, PartialEq)]
pub struct BestOfKReport {
    pub prompt: usize,
    pub k: usize,
    /// Exact mean reward of a single draw.
    pub mean: f64,
    /// Exact expected reward of the best of K i.i.d. draws.
    pub exact_best_of_k: f64,
    /// `mean + sqrt(B^2 / 2 * ln K)`.
    pub upper_bound: f64,
    /// `upper_bound - exact_best_of_k`; non-negative when the bound holds.
    pub slack: f64,
}

/// Draw K responses at temperature `lambda` and keep the one with the
/// highest reward; ties go to the earliest draw.
pub fn best_of_k_sample(
    policy: &Policy,
    reward: &dyn RewardFn,
    x: usize,
    k: usize,
    lambda: f64,
    seed: u64,
) -> Result<(usize, f64)> {
    if k == 0 {
        return Err(Error::config("K must be at least 1"));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut best: Option<(usize, f64)> = None;
    for _ in 0..k {
        let y = policy.sample_one(x, lambda, &mut rng)?;
        let r = reward.score_pair(x, y)?;
        match best {
            Some((_, br)) if r <= br => {}
            _ => best = Some((y, r)),
        }
    }
    Ok(best.expect("k >= 1"))
}

/// Exact `E[max of K i.i.d. draws]` through the discrete order-statistic
/// identity: with distinct reward values `r_(1) < ... < r_(J)` and CDF `F`,
///
/// ```text
/// E = sum_i r_(i) * (F(r_(i))^K - F(r_(i-1))^K),    F(r_(0))^K := 0.
/// ```
pub fn expected_best_of_k_exact(
    policy: &Policy,
    reward: &dyn RewardFn,
    x: usize,
    k: usize,
    lambda: f64,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::config("K must be at least 1"));
    }
    let probs = policy.exact_distribution(x, lambda)?;
    let rewards = crate::par::try_indexed_map(probs.len(), |y| reward.score_pair(x, y))?;

    // Group identical reward values into atoms of the reward distribution.
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| rewards[a].partial_cmp(&rewards[b]).expect("finite rewards"));
    let mut atoms: Vec<(f64, f64)> = Vec::new(); // (reward value, probability mass)
    for &y in &order {
        match atoms.last_mut() {
            Some((r, p)) if *r == rewards[y] => *p += probs[y],
            _ => atoms.push((rewards[y], probs[y])),
        }
    }

    let mut expectation = 0.0;
    let mut cdf_prev_pow = 0.0;
    let mut cdf = 0.0;
    for &(r, p) in &atoms {
        cdf += p;
        let cdf_pow = cdf.min(1.0).powi(k as i32);
        expectation += r * (cdf_pow - cdf_prev_pow);
        cdf_prev_pow = cdf_pow;
    }
    Ok(expectation)
}

/// Exact single-draw mean reward at temperature `lambda`.
pub fn expected_reward_exact(
    policy: &Policy,
    reward: &dyn RewardFn,
    x: usize,
    lambda: f64,
) -> Result<f64> {
    let probs = policy.exact_distribution(x, lambda)?;
    let rewards = crate::par::try_indexed_map(probs.len(), |y| reward.score_pair(x, y))?;
    let terms: Vec<f64> = probs.iter().zip(&rewards).map(|(p, r)| p * r).collect();
    Ok(sum_pairwise(&terms))
}

/// Verify `mean <= E[best-of-K] <= mean + sqrt(B^2 / 2 * ln K)` at
/// temperature 1. `bound_b` defaults to the reward's declared range bound.
pub fn bound_check(
    policy: &Policy,
    reward: &dyn RewardFn,
    x: usize,
    k: usize,
    bound_b: Option<f64>,
) -> Result<BestOfKReport> {
    let b = bound_b.unwrap_or_else(|| reward.bound());
    if !(b >= 0.0) {
        return Err(Error::config(format!("reward bound must be non-negative, got {b}")));
    }
    let mean = expected_reward_exact(policy, reward, x, 1.0)?;
    let exact = expected_best_of_k_exact(policy, reward, x, k, 1.0)?;
    let upper = mean + (b * b / 2.0 * (k as f64).ln()).sqrt();
    // Tolerate only rounding noise; a genuine violation is an implementation bug.
    let tol = 1e-9 * (1.0 + b.abs() + mean.abs());
    if exact < mean - tol || exact > upper + tol {
        return Err(Error::BoundViolated { k, mean, exact, upper });
    }
    Ok(BestOfKReport {
        prompt: x,
        k,
        mean,
        exact_best_of_k: exact,
        upper_bound: upper,
        slack: upper - exact,
    })
}

/// Run [`bound_check`] over a grid of prompts and K values.
pub fn bound_check_batch(
    policy: &Policy,
    reward: &dyn RewardFn,
    prompts: &[usize],
    ks: &[usize],
    bound_b: Option<f64>,
) -> Result<Vec<BestOfKReport>> {
    let grid: Vec<(usize, usize)> =
        prompts.iter().flat_map(|&x| ks.iter().map(move |&k| (x, k))).collect();
    crate::par::try_indexed_map(grid.len(), |i| {
        let (x, k) = grid[i];
        bound_check(policy, reward, x, k, bound_b)
    })
}

/// Marginal gains `E[best-of-2K] - E[best-of-K]` along a doubling ladder.
/// Reported as a statistic; the sqrt(ln K) envelope is the only certified
/// shape.
pub fn marginal_gains(
    policy: &Policy,
    reward: &dyn RewardFn,
    x: usize,
    max_k: usize,
) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    let mut k = 1;
    while 2 * k <= max_k {
        let lo = expected_best_of_k_exact(policy, reward, x, k, 1.0)?;
        let hi = expected_best_of_k_exact(policy, reward, x, 2 * k, 1.0)?;
        out.push((k, hi - lo));
        k *= 2;
    }
    Ok(out)
}

/// CSV with columns `x,K,mean,exact_bok,bound,slack`.
pub fn reports_to_csv(reports: &[BestOfKReport]) -> String {
    let mut out = String::from("x,K,mean,exact_bok,bound,slack\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.prompt, r.k, r.mean, r.exact_best_of_k, r.upper_bound, r.slack
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::BanditPolicy;
    use crate::reward::RewardTable;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn coin_policy() -> (Policy, RewardTable) {
        // Two outcomes with probability 1/2 each, rewards {0, 1}.
        let policy = Policy::Bandit(BanditPolicy::uniform(1, 2).unwrap());
        let reward = RewardTable::new(1, 2, vec![0.0, 1.0], 1.0).unwrap();
        (policy, reward)
    }

    #[test]
    fn coin_best_of_two_matches_brute_force() {
        // Enumerating the 4 equiprobable outcome pairs: E[max] = 3/4.
        let (policy, reward) = coin_policy();
        let exact = expected_best_of_k_exact(&policy, &reward, 0, 2, 1.0).unwrap();
        let brute: f64 = [(0.0f64, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)]
            .iter()
            .map(|&(a, b)| 0.25 * a.max(b))
            .sum();
        assert_abs_diff_eq!(exact, brute, epsilon = 1e-12);
        assert_abs_diff_eq!(exact, 0.75, epsilon = 1e-12);
    }

    #[test]
    fn k_equal_one_is_the_single_draw_mean() {
        let policy = Policy::Bandit(
            BanditPolicy::from_logits(1, 4, vec![0.0, 0.5, -0.3, 1.0]).unwrap(),
        );
        let reward = RewardTable::random(1, 4, 1.0, 5).unwrap();
        let mean = expected_reward_exact(&policy, &reward, 0, 1.0).unwrap();
        let bok1 = expected_best_of_k_exact(&policy, &reward, 0, 1, 1.0).unwrap();
        assert_abs_diff_eq!(bok1, mean, epsilon = 1e-12);

        let report = bound_check(&policy, &reward, 0, 1, None).unwrap();
        // ln 1 = 0: both sides collapse onto the mean.
        assert_abs_diff_eq!(report.upper_bound, report.mean, epsilon = 1e-12);
        assert_abs_diff_eq!(report.slack, report.mean - report.exact_best_of_k, epsilon = 1e-12);
    }

    #[test]
    fn coin_bound_has_the_textbook_value() {
        // 0.75 <= 0.5 + sqrt(0.5 ln 2) ~ 1.0889.
        let (policy, reward) = coin_policy();
        let report = bound_check(&policy, &reward, 0, 2, None).unwrap();
        assert_abs_diff_eq!(report.exact_best_of_k, 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(
            report.upper_bound,
            0.5 + (0.5 * 2.0f64.ln()).sqrt(),
            epsilon = 1e-12
        );
        assert!(report.slack > 0.0);
    }

    #[test]
    fn deterministic_policy_always_returns_its_response() {
        let policy =
            Policy::Bandit(BanditPolicy::from_logits(1, 3, vec![0.0, 40.0, 0.0]).unwrap());
        let reward = RewardTable::new(1, 3, vec![0.9, 0.1, 0.5], 1.0).unwrap();
        for k in [1usize, 4, 16] {
            let (y, r) = best_of_k_sample(&policy, &reward, 0, k, 1.0, 7).unwrap();
            assert_eq!(y, 1);
            assert_abs_diff_eq!(r, 0.1);
        }
    }

    #[test]
    fn k_equal_one_sampling_is_the_single_draw() {
        let policy = Policy::Bandit(BanditPolicy::uniform(1, 5).unwrap());
        let reward = RewardTable::random(1, 5, 1.0, 9).unwrap();
        let cfg = crate::generator::SamplingConfig::new(1.0, 1, 123);
        let direct = policy.sample_responses(0, &cfg).unwrap()[0];
        let (y, _) = best_of_k_sample(&policy, &reward, 0, 1, 1.0, 123).unwrap();
        assert_eq!(y, direct);
    }

    #[test]
    fn sampled_mean_matches_the_exact_expectation() {
        let policy = Policy::Bandit(
            BanditPolicy::from_logits(1, 6, vec![0.2, -0.5, 0.9, 0.0, 0.4, -1.0]).unwrap(),
        );
        let reward = RewardTable::random(1, 6, 1.0, 13).unwrap();
        let k = 4;
        let exact = expected_best_of_k_exact(&policy, &reward, 0, k, 1.0).unwrap();
        let trials = 100_000;
        let total: f64 = (0..trials)
            .map(|i| best_of_k_sample(&policy, &reward, 0, k, 1.0, 1000 + i).unwrap().1)
            .sum();
        let empirical = total / trials as f64;
        // Rewards live in [0, 1]; 3 sigma with a conservative variance bound.
        let sigma = 0.5 / (trials as f64).sqrt();
        assert!(
            (empirical - exact).abs() < 3.0 * sigma,
            "empirical {empirical} vs exact {exact}"
        );
    }

    #[test]
    fn expectation_is_monotone_in_k_and_bounded_by_the_support() {
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..50 {
            let n = rng.random_range(2..24);
            let logits: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let policy = Policy::Bandit(BanditPolicy::from_logits(1, n, logits).unwrap());
            let reward = RewardTable::random(1, n, 1.0, rng.random()).unwrap();
            let max_support =
                (0..n).map(|y| reward.score_pair(0, y).unwrap()).fold(f64::MIN, f64::max);
            let mean = expected_reward_exact(&policy, &reward, 0, 1.0).unwrap();
            let mut prev = f64::MIN;
            for k in 1..=64usize {
                let e = expected_best_of_k_exact(&policy, &reward, 0, k, 1.0).unwrap();
                assert!(e >= prev - 1e-12, "E[bok] fell at K={k}");
                assert!(e >= mean - 1e-12 && e <= max_support + 1e-12);
                prev = e;
            }
        }
    }

    #[test]
    fn marginal_gains_are_reported_up_to_max_k() {
        let (policy, reward) = coin_policy();
        let gains = marginal_gains(&policy, &reward, 0, 8).unwrap();
        assert_eq!(gains.len(), 3); // 1->2, 2->4, 4->8
        assert!(gains.iter().all(|&(_, g)| g >= 0.0));
    }

    #[test]
    fn csv_export_has_one_row_per_report() {
        let (policy, reward) = coin_policy();
        let reports = bound_check_batch(&policy, &reward, &[0], &[1, 2, 4], None).unwrap();
        let csv = reports_to_csv(&reports);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("x,K,mean,exact_bok,bound,slack\n"));
    }
}
