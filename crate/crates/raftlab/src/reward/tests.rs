use approx::assert_abs_diff_eq;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::*;
use crate::generator::encode_tokens;

#[test]
fn hamming_reward_is_the_match_fraction() {
    let reward = HammingReward::new(vec![vec![1, 2, 0]], 3, 3).unwrap();
    let exact = encode_tokens(3, &[1, 2, 0]);
    assert_abs_diff_eq!(reward.score_pair(0, exact).unwrap(), 1.0);
    // Disagree everywhere.
    let miss = encode_tokens(3, &[0, 0, 1]);
    assert_abs_diff_eq!(reward.score_pair(0, miss).unwrap(), 0.0);
    // Two of three positions.
    let part = encode_tokens(3, &[1, 2, 2]);
    assert_abs_diff_eq!(reward.score_pair(0, part).unwrap(), 2.0 / 3.0);
}

#[test]
fn hamming_is_one_only_on_the_target() {
    let reward = HammingReward::new(vec![vec![0, 1]], 2, 2).unwrap();
    for y in 0..4 {
        let r = reward.score_pair(0, y).unwrap();
        assert!((0.0..=1.0).contains(&r));
        assert_eq!(r == 1.0, y == encode_tokens(2, &[0, 1]));
    }
}

#[test]
fn table_lookup_returns_the_stored_entry() {
    let table = RewardTable::new(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 1.0).unwrap();
    assert_abs_diff_eq!(table.score_pair(1, 2).unwrap(), 0.6);
    assert!(table.score_pair(2, 0).is_err());
    assert!(table.score_pair(0, 3).is_err());
}

#[test]
fn table_entries_must_respect_the_bound() {
    assert!(RewardTable::new(1, 2, vec![0.5, 1.5], 1.0).is_err());
    assert!(RewardTable::new(1, 2, vec![-0.1, 0.5], 1.0).is_err());
    assert!(RewardTable::new(1, 2, vec![0.5, 0.9], 1.0).is_ok());
}

#[test]
fn equal_gold_rewards_label_either_order_half_the_time() {
    let table = RewardTable::new(1, 4, vec![0.5; 4], 1.0).unwrap();
    let data = generate_comparisons(&table, 1, 4, 40_000, 3, LabelMode::Probabilistic).unwrap();
    // Count how often the lower index wins; sigma for p = 0.5.
    let low_wins = data.records().iter().filter(|r| r.y_w < r.y_l).count() as f64;
    let n = data.len() as f64;
    let sigma = (0.25 * n).sqrt();
    assert!((low_wins - 0.5 * n).abs() < 3.0 * sigma);
}

#[test]
fn label_rate_tracks_the_bradley_terry_probability() {
    // Gap +4: the better response wins with probability sigmoid(4) ~ 0.9820.
    let table = RewardTable::new(1, 2, vec![4.0, 0.0], 4.0).unwrap();
    let n = 100_000;
    let data = generate_comparisons(&table, 1, 2, n, 7, LabelMode::Probabilistic).unwrap();
    let better_wins = data.records().iter().filter(|r| r.y_w == 0).count() as f64;
    let p = 1.0 / (1.0 + (-4.0f64).exp());
    let sigma = (p * (1.0 - p) * n as f64).sqrt();
    assert!((better_wins - p * n as f64).abs() < 3.0 * sigma);
}

#[test]
fn comparison_generation_is_deterministic_and_validated() {
    let table = RewardTable::random(4, 8, 1.0, 11).unwrap();
    let a = generate_comparisons(&table, 4, 8, 500, 13, LabelMode::Probabilistic).unwrap();
    let b = generate_comparisons(&table, 4, 8, 500, 13, LabelMode::Probabilistic).unwrap();
    assert_eq!(a, b);
    assert!(a.records().iter().all(|r| r.y_w != r.y_l));

    let single = RewardTable::new(1, 1, vec![0.5], 1.0).unwrap();
    assert!(generate_comparisons(&single, 1, 1, 10, 0, LabelMode::Probabilistic).is_err());
}

#[test]
fn deterministic_labels_always_pick_the_higher_reward() {
    let table = RewardTable::random(4, 8, 1.0, 17).unwrap();
    let data = generate_comparisons(&table, 4, 8, 2_000, 19, LabelMode::Deterministic).unwrap();
    for r in data.records() {
        assert!(
            table.score_pair(r.x, r.y_w).unwrap() >= table.score_pair(r.x, r.y_l).unwrap()
        );
    }
}

#[test]
fn comparison_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let table = RewardTable::random(3, 5, 1.0, 23).unwrap();
    let data = generate_comparisons(&table, 3, 5, 64, 29, LabelMode::Probabilistic).unwrap();
    let path = dir.path().join("pairs.csv");
    data.save_csv(&path).unwrap();
    let loaded = ComparisonDataset::load_csv(&path, 3, 5).unwrap();
    assert_eq!(data, loaded);
}

#[test]
fn bt_loss_closed_forms() {
    let model = BtRewardModel::zeros(2, 4, BtCapacity::Full).unwrap();
    let data = ComparisonDataset::new(
        2,
        4,
        vec![ComparisonRecord { x: 0, y_w: 1, y_l: 2 }, ComparisonRecord { x: 1, y_w: 3, y_l: 0 }],
    )
    .unwrap();
    // All margins zero: loss = ln 2.
    assert_abs_diff_eq!(bt_loss(&model, &data).unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);

    // Single record with margin +10: loss = -ln sigmoid(10) ~ 4.54e-5.
    let mut confident = BtRewardModel::zeros(1, 2, BtCapacity::Full).unwrap();
    confident.params_mut()[0] = 10.0;
    let one = ComparisonDataset::new(1, 2, vec![ComparisonRecord { x: 0, y_w: 0, y_l: 1 }])
        .unwrap();
    assert_abs_diff_eq!(bt_loss(&confident, &one).unwrap(), 4.539889921686465e-5, epsilon = 1e-12);

    let empty = ComparisonDataset::new(1, 2, vec![]).unwrap();
    assert!(bt_loss(&model, &empty).is_err());
}

#[test]
fn bt_training_reduces_the_loss_monotonically_on_separable_data() {
    let gold = RewardTable::random(4, 8, 1.0, 31).unwrap();
    let data = generate_comparisons(&gold, 4, 8, 2_000, 37, LabelMode::Deterministic).unwrap();
    let mut model = BtRewardModel::zeros(4, 8, BtCapacity::Full).unwrap();
    let mut last = bt_loss(&model, &data).unwrap();
    for _ in 0..60 {
        let (_, grad) = model.nll_and_grad(data.records()).unwrap();
        for (p, g) in model.params_mut().iter_mut().zip(&grad) {
            *p -= 20.0 * g;
        }
        let now = bt_loss(&model, &data).unwrap();
        assert!(now < last, "loss should fall strictly, {last} -> {now}");
        last = now;
    }
}

#[test]
fn bt_gradients_match_finite_differences_for_both_capacities() {
    let mut rng = StdRng::seed_from_u64(41);
    let gold = RewardTable::random(3, 6, 1.0, 43).unwrap();
    let data = generate_comparisons(&gold, 3, 6, 200, 47, LabelMode::Probabilistic).unwrap();
    for capacity in [BtCapacity::Full, BtCapacity::Factorized] {
        let mut model = BtRewardModel::zeros(3, 6, capacity).unwrap();
        for p in model.params_mut() {
            *p = rng.random::<f64>() - 0.5;
        }
        let (_, grad) = model.nll_and_grad(data.records()).unwrap();
        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        for i in 0..model.params().len() {
            let mut plus = model.clone();
            plus.params_mut()[i] += h;
            let mut minus = model.clone();
            minus.params_mut()[i] -= h;
            let fd = (bt_loss(&plus, &data).unwrap() - bt_loss(&minus, &data).unwrap())
                / (2.0 * h);
            let denom = fd.abs().max(1e-3);
            max_rel = max_rel.max((grad[i] - fd).abs() / denom);
        }
        assert!(max_rel < 1e-6, "{capacity:?}: max relative error {max_rel}");
    }
}

#[test]
fn zero_learning_rate_leaves_the_model_untouched() {
    let gold = RewardTable::random(2, 4, 1.0, 53).unwrap();
    let data = generate_comparisons(&gold, 2, 4, 100, 59, LabelMode::Probabilistic).unwrap();
    let model = BtRewardModel::zeros(2, 4, BtCapacity::Full).unwrap();
    let (fitted, _) = train_bt(&model, &data, 0.0, 25, 0.1).unwrap();
    for (a, b) in model.params().iter().zip(fitted.params()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn degenerate_datasets_are_flagged_not_rejected() {
    let records = vec![
        ComparisonRecord { x: 0, y_w: 1, y_l: 0 },
        ComparisonRecord { x: 0, y_w: 0, y_l: 1 },
        ComparisonRecord { x: 0, y_w: 1, y_l: 0 },
    ];
    let data = ComparisonDataset::new(1, 2, records).unwrap();
    let model = BtRewardModel::zeros(1, 2, BtCapacity::Full).unwrap();
    let (_, report) = train_bt(&model, &data, 1.0, 10, 0.0).unwrap();
    assert!(report.degenerate);
    assert_eq!(report.holdout_size, 0);
    assert!(report.holdout_accuracy.is_nan());
}

#[test]
fn gold_capacity_accuracy_is_nondecreasing_in_training_size() {
    // Averaged over 5 seeds, accuracy on a fixed fresh evaluation set must
    // not fall as the training set grows through 1k, 10k, 50k pairs.
    let sizes = [1_000usize, 10_000, 50_000];
    let mut avg = [0.0f64; 3];
    for seed in 0..5u64 {
        let gold = RewardTable::random(8, 32, 1.0, 1000 + seed).unwrap();
        let eval =
            generate_comparisons(&gold, 8, 32, 20_000, 2000 + seed, LabelMode::Probabilistic)
                .unwrap();
        let pool =
            generate_comparisons(&gold, 8, 32, 50_000, 3000 + seed, LabelMode::Probabilistic)
                .unwrap();
        for (i, &size) in sizes.iter().enumerate() {
            let model = BtRewardModel::zeros(8, 32, BtCapacity::Full).unwrap();
            let (fitted, _) = train_bt(&model, &pool.truncated(size), 40.0, 120, 0.0).unwrap();
            avg[i] += fitted.accuracy(eval.records()) / 5.0;
        }
    }
    assert!(avg[0] <= avg[1] + 1e-9 && avg[1] <= avg[2] + 1e-9, "accuracies {avg:?}");
}

#[test]
fn calibration_of_the_zero_model_sits_in_the_half_bin() {
    let gold = RewardTable::new(1, 4, vec![0.5; 4], 1.0).unwrap();
    let data = generate_comparisons(&gold, 1, 4, 5_000, 61, LabelMode::Probabilistic).unwrap();
    let model = BtRewardModel::zeros(1, 4, BtCapacity::Full).unwrap();
    let bins = calibration_curve(&model, &data, 10).unwrap();
    assert_eq!(bins[0].count, data.len());
    assert!(bins[1..].iter().all(|b| b.count == 0));
    assert_abs_diff_eq!(bins[0].mean_predicted, 0.5, epsilon = 1e-12);
    // Ties count one half, and the base rate of "correct" is exactly 0.5.
    assert_abs_diff_eq!(bins[0].empirical_accuracy, 0.5, epsilon = 1e-12);
}

#[test]
fn calibration_bins_match_a_hand_computation() {
    // Margins +0.1, -0.4, +2.0, 0.0 with 10 bins of width 0.05 on [0.5, 1]:
    //   sigmoid(0.1) = 0.5250 -> bin 0, correct
    //   sigmoid(0.4) = 0.5987 -> bin 1, wrong (margin negative)
    //   sigmoid(2.0) = 0.8808 -> bin 7, correct
    //   sigmoid(0.0) = 0.5    -> bin 0, half credit
    let mut model = BtRewardModel::zeros(1, 5, BtCapacity::Full).unwrap();
    model.params_mut().copy_from_slice(&[0.1, 0.0, -0.4, 2.0, 0.0]);
    let data = ComparisonDataset::new(
        1,
        5,
        vec![
            ComparisonRecord { x: 0, y_w: 0, y_l: 1 }, // margin +0.1
            ComparisonRecord { x: 0, y_w: 2, y_l: 1 }, // margin -0.4
            ComparisonRecord { x: 0, y_w: 3, y_l: 1 }, // margin +2.0
            ComparisonRecord { x: 0, y_w: 4, y_l: 1 }, // margin 0.0
        ],
    )
    .unwrap();
    let bins = calibration_curve(&model, &data, 10).unwrap();
    assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), 4);
    assert_eq!(bins[0].count, 2);
    assert_eq!(bins[1].count, 1);
    assert_eq!(bins[7].count, 1);
    assert_abs_diff_eq!(bins[0].empirical_accuracy, 0.75, epsilon = 1e-12);
    assert_abs_diff_eq!(bins[1].empirical_accuracy, 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(bins[7].empirical_accuracy, 1.0, epsilon = 1e-12);
    let s = |m: f64| 1.0 / (1.0 + (-m.abs()).exp());
    assert_abs_diff_eq!(bins[0].mean_predicted, (s(0.1) + 0.5) / 2.0, epsilon = 1e-12);
    assert_abs_diff_eq!(bins[7].mean_predicted, s(2.0), epsilon = 1e-12);

    assert!(calibration_curve(&model, &data, 1).is_err());
}

#[test]
fn noise_free_configs_are_the_identity() {
    let gold = RewardTable::random(4, 8, 1.0, 67).unwrap();
    for mode in 1..=3u8 {
        let mut cfg = NoiseConfig::new(mode, 71);
        cfg.std = 0.0;
        cfg.corruption_p = 0.0;
        let noisy = apply_noise(Box::new(gold.clone()), cfg).unwrap();
        for x in 0..4 {
            for y in 0..8 {
                let q = RewardQuery { x, y, stage: 3, draw: 9 };
                assert_eq!(noisy.score(&q).unwrap(), gold.score(&q).unwrap());
            }
        }
    }
}

#[test]
fn mode_two_with_zero_std_shifts_whole_prompts_by_a_constant() {
    let gold = RewardTable::random(16, 8, 1.0, 73).unwrap();
    let mut cfg = NoiseConfig::new(2, 79);
    cfg.std = 0.0;
    cfg.corruption_p = 0.5;
    let noisy = apply_noise(Box::new(gold.clone()), cfg.clone()).unwrap();
    let mut corrupted = 0;
    for stage in [0u64, 1, 5] {
        for x in 0..16 {
            let shifts: Vec<f64> = (0..8)
                .map(|y| {
                    let q = RewardQuery { x, y, stage, draw: y as u64 };
                    noisy.score(&q).unwrap() - gold.score(&q).unwrap()
                })
                .collect();
            // One constant shift for the whole prompt.
            for &s in &shifts {
                assert_abs_diff_eq!(s, shifts[0], epsilon = 1e-15);
            }
            match noisy.prompt_offset(stage, x) {
                Some(a) => {
                    corrupted += 1;
                    assert_abs_diff_eq!(shifts[0], a, epsilon = 1e-15);
                    assert!(cfg.offsets.contains(&a));
                }
                None => assert_abs_diff_eq!(shifts[0], 0.0),
            }
        }
    }
    assert!(corrupted > 0, "expected some corrupted prompts at p = 0.5");
}

#[test]
fn mode_one_noise_has_the_right_moments() {
    let gold = RewardTable::random(2, 4, 1.0, 83).unwrap();
    let noisy = apply_noise(Box::new(gold.clone()), NoiseConfig::new(1, 89)).unwrap();
    let n = 100_000u64;
    let mut deltas = Vec::with_capacity(n as usize);
    for draw in 0..n {
        let q = RewardQuery { x: (draw % 2) as usize, y: (draw % 4) as usize, stage: 1, draw };
        deltas.push(noisy.score(&q).unwrap() - gold.score(&q).unwrap());
    }
    let mean: f64 = deltas.iter().sum::<f64>() / n as f64;
    let var: f64 = deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
    let sigma_mean = 1.0 / (n as f64).sqrt();
    assert!(mean.abs() < 3.0 * sigma_mean, "mean {mean}");
    assert!((0.97..=1.03).contains(&var), "variance {var}");
}

#[test]
fn noise_is_deterministic_per_query_and_fresh_per_draw() {
    let gold = RewardTable::random(2, 4, 1.0, 97).unwrap();
    let noisy = apply_noise(Box::new(gold), NoiseConfig::new(1, 101)).unwrap();
    let q = RewardQuery { x: 1, y: 2, stage: 4, draw: 7 };
    assert_eq!(noisy.score(&q).unwrap(), noisy.score(&q).unwrap());
    let other = RewardQuery { draw: 8, ..q };
    assert_ne!(noisy.score(&q).unwrap(), noisy.score(&other).unwrap());
    assert!(noisy.is_stochastic());
}

#[test]
fn unknown_noise_modes_are_config_errors() {
    let gold = RewardTable::random(1, 2, 1.0, 103).unwrap();
    for bad in [0u8, 4, 9] {
        let res = apply_noise(Box::new(gold.clone()), NoiseConfig::new(bad, 0));
        assert!(matches!(res, Err(crate::Error::Config(_))));
    }
}

#[test]
fn recentering_shifts_every_score() {
    let gold = RewardTable::random(3, 5, 1.0, 107).unwrap();
    let zero = recenter(Box::new(gold.clone()), 0.0);
    let shifted = recenter(Box::new(gold.clone()), 4.82);
    for x in 0..3 {
        for y in 0..5 {
            let base = gold.score_pair(x, y).unwrap();
            assert_eq!(zero.score_pair(x, y).unwrap(), base);
            assert_abs_diff_eq!(shifted.score_pair(x, y).unwrap(), base - 4.82, epsilon = 1e-15);
        }
    }
    assert_abs_diff_eq!(shifted.bound(), gold.bound());
}

#[test]
fn bt_checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = StdRng::seed_from_u64(109);
    for capacity in [BtCapacity::Full, BtCapacity::Factorized] {
        let mut model = BtRewardModel::zeros(3, 5, capacity).unwrap();
        for p in model.params_mut() {
            *p = rng.random::<f64>() * 10.0 - 5.0;
        }
        let path = dir.path().join(format!("{capacity:?}.ckpt"));
        model.save(&path, true).unwrap();
        let loaded = BtRewardModel::load(&path).unwrap();
        assert_eq!(model, loaded);
    }
}

#[test]
fn reward_table_checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let table = RewardTable::random(5, 7, 2.5, 113).unwrap();
    let path = dir.path().join("table.ckpt");
    table.save(&path, false).unwrap();
    let loaded = RewardTable::load(&path).unwrap();
    assert_eq!(table, loaded);
    assert_abs_diff_eq!(loaded.bound(), 2.5);
}
