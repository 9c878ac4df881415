use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::*;
use crate::reward::RewardTable;

fn random_bandit(m: usize, n: usize, seed: u64) -> Policy {
    let mut rng = StdRng::seed_from_u64(seed);
    let logits = (0..m * n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
    Policy::Bandit(BanditPolicy::from_logits(m, n, logits).unwrap())
}

fn random_seq(m: usize, v: usize, l: usize, seed: u64) -> Policy {
    let mut rng = StdRng::seed_from_u64(seed);
    let logits = (0..m * l * v * v).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    Policy::Seq(SeqPolicy::from_logits(m, v, l, logits).unwrap())
}

#[test]
fn symmetric_logits_sample_uniformly() {
    // theta[x] = [0, 0, 0], lambda = 1, K = 3: three draws from uniform{0,1,2}.
    let policy = Policy::Bandit(BanditPolicy::uniform(1, 3).unwrap());
    let cfg = SamplingConfig::new(1.0, 3, 99);
    let draws = policy.sample_responses(0, &cfg).unwrap();
    assert_eq!(draws.len(), 3);
    assert!(draws.iter().all(|&y| y < 3));
    let dist = policy.exact_distribution(0, 1.0).unwrap();
    for &p in &dist {
        assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-12);
    }
}

#[test]
fn huge_temperature_flattens_any_policy() {
    // lambda = 1e6 pushes the sampling distribution within 1e-4 total
    // variation of uniform.
    for policy in [random_bandit(2, 16, 5), random_seq(1, 3, 3, 6)] {
        let n = policy.space_size();
        let dist = policy.exact_distribution(0, 1e6).unwrap();
        let tv: f64 = dist.iter().map(|p| (p - 1.0 / n as f64).abs()).sum::<f64>() / 2.0;
        assert!(tv < 1e-4, "total variation {tv}");
    }
}

#[test]
fn skewed_bandit_frequencies_match_softmax_within_binomial_bounds() {
    // theta[x] = [0, ln 3]: exact probabilities (0.25, 0.75); check the
    // empirical rate over 1e5 draws within 3 sigma.
    let policy =
        Policy::Bandit(BanditPolicy::from_logits(1, 2, vec![0.0, 3.0f64.ln()]).unwrap());
    let trials = 100_000;
    let cfg = SamplingConfig::new(1.0, trials, 2024);
    let draws = policy.sample_responses(0, &cfg).unwrap();
    let ones = draws.iter().filter(|&&y| y == 1).count() as f64;
    let sigma = (0.75f64 * 0.25 * trials as f64).sqrt();
    assert!((ones - 0.75 * trials as f64).abs() < 3.0 * sigma);
}

#[test]
fn sampling_errors_are_typed() {
    let policy = Policy::Bandit(BanditPolicy::uniform(2, 3).unwrap());
    let bad_prompt = policy.sample_responses(5, &SamplingConfig::new(1.0, 1, 0));
    assert!(matches!(bad_prompt, Err(crate::Error::Domain(_))));
    let bad_temp = policy.sample_responses(0, &SamplingConfig::new(0.0, 1, 0));
    assert!(matches!(bad_temp, Err(crate::Error::Config(_))));
    let bad_temp = policy.sample_responses(0, &SamplingConfig::new(-1.0, 1, 0));
    assert!(matches!(bad_temp, Err(crate::Error::Config(_))));
}

#[test]
fn identical_seeds_give_identical_sample_streams() {
    for policy in [random_bandit(3, 8, 7), random_seq(2, 4, 3, 8)] {
        let cfg = SamplingConfig::new(0.85, 64, 31);
        assert_eq!(
            policy.sample_responses(1, &cfg).unwrap(),
            policy.sample_responses(1, &cfg).unwrap()
        );
        let other = SamplingConfig::new(0.85, 64, 32);
        assert_ne!(
            policy.sample_responses(1, &cfg).unwrap(),
            policy.sample_responses(1, &other).unwrap()
        );
    }
}

#[test]
fn exact_distribution_refuses_spaces_above_the_cap() {
    let policy = random_seq(1, 4, 4, 9); // space 256
    assert!(policy.exact_distribution_capped(0, 1.0, 255).is_err());
    assert!(policy.exact_distribution_capped(0, 1.0, 256).is_ok());
}

#[test]
fn log_prob_matches_exact_distribution() {
    for policy in [random_bandit(2, 8, 11), random_seq(1, 3, 4, 12)] {
        let dist = policy.exact_distribution(0, 1.0).unwrap();
        for y in 0..policy.space_size() {
            assert_abs_diff_eq!(
                policy.log_prob(0, y).unwrap(),
                dist[y].ln(),
                epsilon = 1e-9
            );
        }
    }
}

#[test]
fn one_sft_step_raises_the_trained_response() {
    for policy in [random_bandit(2, 6, 13), random_seq(2, 3, 3, 14)] {
        let before = policy.log_prob(1, 2).unwrap();
        let after = policy.sft_update(&[(1, 2)], 0.3, 1).unwrap().log_prob(1, 2).unwrap();
        assert!(after > before, "log prob should strictly increase, {before} -> {after}");
    }
}

#[test]
fn repeated_sft_on_one_pair_drives_its_probability_to_one() {
    // Convex objective: the loss decreases every step until the optimum.
    let mut policy = random_bandit(1, 5, 15);
    let batch = [(0usize, 3usize)];
    let mut last = policy.nll_and_grad(&batch).unwrap().0;
    for _ in 0..400 {
        policy = policy.sft_update(&batch, 0.5, 1).unwrap();
        let now = policy.nll_and_grad(&batch).unwrap().0;
        assert!(now <= last + 1e-12, "loss rose from {last} to {now}");
        last = now;
    }
    let p = policy.exact_distribution(0, 1.0).unwrap()[3];
    assert!(p > 0.99, "p = {p}");
    assert!(last < 1e-2);
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let policy = random_seq(1, 3, 2, 16);
    let updated = policy.sft_update(&[(0, 1), (0, 4)], 0.0, 3).unwrap();
    let before = policy.params();
    let after = updated.params();
    assert_eq!(before.len(), after.len());
    for (a, b) in before.iter().zip(after) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn empty_batch_is_rejected() {
    let policy = random_bandit(1, 3, 17);
    assert!(matches!(policy.sft_update(&[], 0.1, 1), Err(crate::Error::EmptyBatch)));
}

#[test]
fn analytic_gradient_matches_central_finite_differences() {
    // Random 4x5 logits, h = 1e-5, relative error below 1e-6.
    let m = 4;
    let n = 5;
    let mut rng = StdRng::seed_from_u64(18);
    let logits: Vec<f64> = (0..m * n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let batch: Vec<(usize, usize)> =
        (0..12).map(|_| (rng.random_range(0..m), rng.random_range(0..n))).collect();
    let h = 1e-5;
    let loss_at = |logits: &[f64]| {
        Policy::Bandit(BanditPolicy::from_logits(m, n, logits.to_vec()).unwrap())
            .nll_and_grad(&batch)
            .unwrap()
            .0
    };
    let policy = Policy::Bandit(BanditPolicy::from_logits(m, n, logits.clone()).unwrap());
    let (_, grad) = policy.nll_and_grad(&batch).unwrap();
    let mut fd = vec![0.0; logits.len()];
    for i in 0..logits.len() {
        let mut plus = logits.clone();
        let mut minus = logits.clone();
        plus[i] += h;
        minus[i] -= h;
        fd[i] = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
    }
    let num: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    assert!(num / den < 1e-6, "relative gradient error {}", num / den);
}

#[test]
fn seq_gradient_matches_finite_differences_too() {
    let (m, v, l) = (2, 3, 2);
    let mut rng = StdRng::seed_from_u64(19);
    let logits: Vec<f64> = (0..m * l * v * v).map(|_| rng.random::<f64>() - 0.5).collect();
    let batch: Vec<(usize, usize)> = vec![(0, 1), (1, 7), (0, 4)];
    let h = 1e-5;
    let loss_at = |logits: &[f64]| {
        Policy::Seq(SeqPolicy::from_logits(m, v, l, logits.to_vec()).unwrap())
            .nll_and_grad(&batch)
            .unwrap()
            .0
    };
    let policy = Policy::Seq(SeqPolicy::from_logits(m, v, l, logits.clone()).unwrap());
    let (_, grad) = policy.nll_and_grad(&batch).unwrap();
    for i in 0..logits.len() {
        let mut plus = logits.clone();
        let mut minus = logits.clone();
        plus[i] += h;
        minus[i] -= h;
        let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        assert!(
            (grad[i] - fd).abs() <= 1e-6 * fd.abs().max(1e-3),
            "param {i}: analytic {} vs fd {fd}",
            grad[i]
        );
    }
}

#[test]
fn greedy_optimal_picks_the_argmax_with_low_tie() {
    let table = RewardTable::new(1, 3, vec![0.1, 0.9, 0.4], 1.0).unwrap();
    assert_eq!(greedy_optimal(&table, 0, 3).unwrap(), (1, 0.9));

    let constant = RewardTable::new(1, 4, vec![0.3; 4], 1.0).unwrap();
    assert_eq!(greedy_optimal(&constant, 0, 4).unwrap(), (0, 0.3));
}

#[test]
fn greedy_optimal_respects_the_enumeration_cap() {
    let table = RewardTable::new(1, 8, vec![0.5; 8], 1.0).unwrap();
    assert!(matches!(
        greedy_optimal_capped(&table, 0, 8, 4),
        Err(crate::Error::SpaceTooLarge { .. })
    ));
}

#[test]
fn greedy_optimal_on_hamming_reward_is_the_target() {
    let space = PromptSpace::random_targets(3, 3, 4, 42).unwrap();
    let reward = crate::reward::HammingReward::from_space(&space, 3, 4).unwrap();
    for x in space.prompts() {
        let (y, r) = greedy_optimal(&reward, x, 81).unwrap();
        assert_eq!(decode_tokens(3, 4, y), space.target(x).unwrap());
        assert_abs_diff_eq!(r, 1.0);
    }
}

#[test]
fn prompt_space_validates_targets() {
    assert!(PromptSpace::with_targets(vec![vec![0, 1], vec![0]], 2, 2).is_err());
    assert!(PromptSpace::with_targets(vec![vec![0, 5]], 2, 2).is_err());
    assert!(PromptSpace::plain(0).is_err());
    let s = PromptSpace::random_targets(4, 2, 3, 1).unwrap();
    assert_eq!(s.num_prompts(), 4);
    assert_eq!(s.target(0).unwrap().len(), 3);
}

#[test]
fn policy_checkpoints_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    for (name, policy, binary) in [
        ("bandit.bin", random_bandit(3, 9, 20), true),
        ("bandit.txt", random_bandit(3, 9, 20), false),
        ("seq.bin", random_seq(2, 4, 3, 21), true),
        ("seq.txt", random_seq(2, 4, 3, 21), false),
    ] {
        let path = dir.path().join(name);
        policy.save(&path, binary).unwrap();
        let loaded = Policy::load(&path).unwrap();
        assert_eq!(policy.params().len(), loaded.params().len());
        for (a, b) in policy.params().iter().zip(loaded.params()) {
            assert_eq!(a.to_bits(), b.to_bits(), "mismatch in {name}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_distribution_sums_to_one(
        seed in 0u64..1024,
        lambda in 0.1f64..10.0,
        bandit in proptest::bool::ANY,
    ) {
        let policy = if bandit {
            random_bandit(2, 12, seed)
        } else {
            random_seq(2, 3, 4, seed)
        };
        for x in 0..2 {
            let dist = policy.exact_distribution(x, lambda).unwrap();
            let total: f64 = dist.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9, "sum {total}");
            prop_assert!(dist.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn entropy_is_nondecreasing_in_temperature(
        seed in 0u64..1024,
        l1 in 0.2f64..5.0,
        scale in 0.2f64..3.0,
    ) {
        let policy = random_bandit(1, 10, seed);
        let l2 = l1 * (1.0 + scale);
        let h1 = policy.response_entropy(0, l1).unwrap();
        let h2 = policy.response_entropy(0, l2).unwrap();
        prop_assert!(h2 >= h1 - 1e-10, "entropy fell from {h1} to {h2}");
    }

    #[test]
    fn log_prob_never_disagrees_with_the_distribution(
        seed in 0u64..256,
        y in 0usize..27,
    ) {
        let policy = random_seq(1, 3, 3, seed);
        let dist = policy.exact_distribution(0, 1.0).unwrap();
        let lp = policy.log_prob(0, y).unwrap();
        prop_assert!((lp - dist[y].ln()).abs() < 1e-9);
    }
}
