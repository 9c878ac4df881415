//! The invariant suite behind the `selftest` CLI verb: quick, deterministic
//! checks of every load-bearing property, runnable in seconds.

use std::sync::Arc;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::bestofk;
use crate::generator::{BanditPolicy, Policy, PromptSpace, SeqPolicy};
use crate::metrics;
use crate::raft::{
    self, collect, converged, rank_global, rank_local, RaftConfig, RaftRun, RankingMode,
    RewardSet,
};
use crate::reward::{HammingReward, RewardFn, RewardTable};
use crate::util::entropy;
use crate::Result;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(
    out: &mut Vec<CheckResult>,
    name: &'static str,
    run: impl FnOnce() -> Result<String>,
) {
    match run() {
        Ok(detail) => out.push(CheckResult { name, passed: true, detail }),
        Err(e) => out.push(CheckResult { name, passed: false, detail: e.to_string() }),
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(crate::Error::Domain(msg.into()))
    }
}

fn random_bandit(m: usize, n: usize, seed: u64) -> Policy {
    let mut rng = StdRng::seed_from_u64(seed);
    let logits = (0..m * n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
    Policy::Bandit(BanditPolicy::from_logits(m, n, logits).expect("valid logits"))
}

fn random_seq(m: usize, v: usize, l: usize, seed: u64) -> Policy {
    let mut rng = StdRng::seed_from_u64(seed);
    let logits = (0..m * l * v * v).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    Policy::Seq(SeqPolicy::from_logits(m, v, l, logits).expect("valid logits"))
}

/// Run the whole invariant suite; every entry reports pass/fail.
pub fn run_selftest() -> Vec<CheckResult> {
    let mut out = Vec::new();

    check(&mut out, "exact distributions sum to one", || {
        for seed in 0..20 {
            for policy in [random_bandit(2, 16, seed), random_seq(1, 3, 4, seed)] {
                for lambda in [0.3, 1.0, 4.0] {
                    let d = policy.exact_distribution(0, lambda)?;
                    let s: f64 = d.iter().sum();
                    ensure((s - 1.0).abs() < 1e-9, format!("sum {s}"))?;
                }
            }
        }
        Ok("60 policies x 3 temperatures".into())
    });

    check(&mut out, "entropy nondecreasing in temperature", || {
        for seed in 0..50 {
            let policy = random_bandit(1, 12, seed);
            let mut last = -1.0;
            for lambda in [0.25, 0.5, 1.0, 2.0, 4.0, 8.0] {
                let h = entropy(&policy.exact_distribution(0, lambda)?);
                ensure(h >= last - 1e-10, format!("entropy fell at lambda {lambda}"))?;
                last = h;
            }
        }
        Ok("50 random policies".into())
    });

    check(&mut out, "log_prob consistent with exact distribution", || {
        let policy = random_seq(1, 3, 3, 7);
        let dist = policy.exact_distribution(0, 1.0)?;
        for (y, &p) in dist.iter().enumerate() {
            ensure((policy.log_prob(0, y)? - p.ln()).abs() < 1e-9, "log_prob mismatch")?;
        }
        Ok("27 sequence ids".into())
    });

    check(&mut out, "SFT loss non-increasing at reference step sizes", || {
        for (policy, lr) in [(random_bandit(2, 8, 9), 0.5), (random_seq(2, 3, 3, 9), 0.2)] {
            let batch = vec![(0, 1), (1, 2), (0, 4)];
            let mut p = policy;
            let mut last = p.nll_and_grad(&batch)?.0;
            for _ in 0..50 {
                p = p.sft_update(&batch, lr, 1)?;
                let now = p.nll_and_grad(&batch)?.0;
                ensure(now <= last + 1e-12, format!("loss rose {last} -> {now}"))?;
                last = now;
            }
        }
        Ok("bandit lr 0.5, sequence lr 0.2, 50 steps each".into())
    });

    check(&mut out, "KL nonnegative and zero on itself", || {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..300 {
            let n = rng.random_range(2..10);
            let p = random_bandit(1, n, rng.random());
            let q = random_bandit(1, n, rng.random());
            let kl = metrics::kl_to_reference(&p, &q, &[0])?.nats;
            ensure(kl >= -1e-12, format!("negative KL {kl}"))?;
            let zero = metrics::kl_to_reference(&p, &p, &[0])?.nats;
            ensure(zero.abs() < 1e-12, "KL(p, p) != 0")?;
        }
        Ok("300 random pairs".into())
    });

    check(&mut out, "sequence chain routes match enumeration", || {
        let p = random_seq(1, 3, 4, 13);
        let q = random_seq(1, 3, 4, 14);
        let (Policy::Seq(ps), Policy::Seq(qs)) = (&p, &q) else { unreachable!() };
        let chain = ps.kl_to(qs, 0)?;
        let dp = p.exact_distribution(0, 1.0)?;
        let dq = q.exact_distribution(0, 1.0)?;
        let brute: f64 =
            dp.iter().zip(&dq).filter(|(&a, _)| a > 0.0).map(|(&a, &b)| a * (a / b).ln()).sum();
        ensure((chain - brute).abs() < 1e-10, "chain KL != enumeration")?;

        let space = PromptSpace::random_targets(1, 3, 4, 15)?;
        let reward = HammingReward::from_space(&space, 3, 4)?;
        let fast = raft::exact_mean_reward(&p, &reward, &[0])?;
        let slow = metrics::mean_test_reward_exact(&p, &reward, &[0])?;
        ensure((fast - slow).abs() < 1e-12, "marginal route != enumeration")?;
        Ok("KL and Hamming mean, V=3 L=4".into())
    });

    check(&mut out, "perplexity of the uniform policy equals V", || {
        for v in [2usize, 5, 8] {
            let policy = Policy::Seq(SeqPolicy::uniform(1, v, 4)?);
            let ppl = metrics::perplexity(&policy, &[(0, 0)])?.value;
            ensure((ppl - v as f64).abs() < 1e-9, format!("ppl {ppl} != {v}"))?;
        }
        Ok("V in {2, 5, 8}".into())
    });

    check(&mut out, "diversity hand oracles", || {
        let r = metrics::diversity(&[vec![1, 1, 1, 1]])?;
        ensure((r.distinct_1 - 0.25).abs() < 1e-12 && r.unique_1 == 0, "aaaa oracle")?;
        let r = metrics::diversity(&[(0..100).collect()])?;
        ensure((r.msttr_100 - 1.0).abs() < 1e-12 && r.unique_1 == 100, "distinct oracle")?;
        let r = metrics::diversity(&[vec![0, 1, 0, 1]])?;
        ensure((r.distinct_2 - 2.0 / 3.0).abs() < 1e-12 && r.unique_2 == 1, "abab oracle")?;
        Ok("3 corpora".into())
    });

    check(&mut out, "best-of-K squeeze holds on random instances", || {
        let mut rng = StdRng::seed_from_u64(17);
        let mut worst_slack = f64::INFINITY;
        for _ in 0..200 {
            let n = rng.random_range(2..24);
            let policy = random_bandit(1, n, rng.random());
            let reward = RewardTable::random(1, n, 1.0, rng.random())?;
            let mut prev = f64::MIN;
            for k in [1usize, 2, 4, 8, 16, 32, 64] {
                let report = bestofk::bound_check(&policy, &reward, 0, k, None)?;
                ensure(report.exact_best_of_k >= prev - 1e-12, "not monotone in K")?;
                prev = report.exact_best_of_k;
                worst_slack = worst_slack.min(report.slack);
            }
        }
        Ok(format!("200 instances x 7 K values, min slack {worst_slack:.4}"))
    });

    check(&mut out, "diminishing marginal best-of-K gains (reported)", || {
        let policy = random_bandit(1, 16, 19);
        let reward = RewardTable::random(1, 16, 1.0, 21)?;
        let gains = bestofk::marginal_gains(&policy, &reward, 0, 64)?;
        let text: Vec<String> =
            gains.iter().map(|(k, g)| format!("{k}->{}: {g:.5}", 2 * k)).collect();
        Ok(text.join(", "))
    });

    check(&mut out, "ranking invariant under monotone transforms", || {
        let policy = random_bandit(4, 12, 23);
        let reward = RewardTable::random(4, 12, 1.0, 25)?;
        let cfg = selftest_cfg(27);
        let prompts: Vec<usize> = (0..cfg.batch_size).map(|i| i % 4).collect();
        let samples = collect(&policy, &policy, &prompts, &cfg, &reward, 1)?;
        let base = rank_local(&samples, 0.0)?;
        for f in [|r: f64| 2.0 * r + 3.0, |r: f64| r.exp()] {
            let mapped: Vec<raft::PromptSamples> = samples
                .iter()
                .map(|ps| raft::PromptSamples {
                    slot: ps.slot,
                    prompt: ps.prompt,
                    samples: ps
                        .samples
                        .iter()
                        .map(|s| raft::ScoredSample { reward: f(s.reward), ..*s })
                        .collect(),
                })
                .collect();
            ensure(rank_local(&mapped, 0.0)?.pairs() == base.pairs(), "transform changed B")?;
        }
        Ok("2r+3 and exp(r) on a 64-slot stage".into())
    });

    check(&mut out, "batch sizes match the ranking mode", || {
        let policy = random_bandit(4, 8, 29);
        let reward = RewardTable::random(4, 8, 1.0, 31)?;
        let cfg = selftest_cfg(33);
        let prompts: Vec<usize> = (0..cfg.batch_size).map(|i| i % 4).collect();
        let samples = collect(&policy, &policy, &prompts, &cfg, &reward, 1)?;
        ensure(rank_local(&samples, 0.0)?.entries.len() == cfg.batch_size, "local size != b")?;
        let global = RaftConfig { mode: RankingMode::Global, ..cfg.clone() };
        let samples = collect(&policy, &policy, &prompts, &global, &reward, 1)?;
        ensure(
            rank_global(&samples, &global)?.entries.len() == global.batch_size / global.k,
            "global size != floor(b/K)",
        )?;
        Ok(format!("b = {}, K = {}", cfg.batch_size, cfg.k))
    });

    check(&mut out, "modified reward hand case", || {
        let m = raft::modified_reward(1.0, -0.5, -1.5, 0.1);
        ensure((m - 0.9).abs() < 1e-15, format!("got {m}"))?;
        ensure(raft::modified_reward(0.7, -2.0, -9.0, 0.0) == 0.7, "beta 0 changed r")?;
        Ok("Eq-5 arithmetic".into())
    });

    check(&mut out, "selection mean dominates the policy mean exactly", || {
        let policy = random_bandit(4, 12, 35);
        let reward = RewardTable::random(4, 12, 1.0, 37)?;
        for k in [2usize, 8] {
            for x in 0..4 {
                let mean_r = bestofk::expected_reward_exact(&policy, &reward, x, 1.0)?;
                let bok = bestofk::expected_best_of_k_exact(&policy, &reward, x, k, 1.0)?;
                ensure(bok >= mean_r - 1e-12, "E[best-of-K] < mean")?;
            }
        }
        Ok("exact expectations, K in {2, 8}".into())
    });

    check(&mut out, "convergence band earliest stop", || {
        ensure(!converged(&[1.0; 3], f64::INFINITY), "stopped before stage 4")?;
        ensure(converged(&[1.0; 4], f64::INFINITY), "did not stop at stage 4")?;
        Ok("infinite band stops after stage 4".into())
    });

    check(&mut out, "full-run determinism", || {
        let reward: Arc<dyn RewardFn> = Arc::new(RewardTable::random(4, 8, 1.0, 39)?);
        let policy = Policy::Bandit(BanditPolicy::uniform(4, 8)?);
        let cfg = RaftConfig { max_stages: 5, ..selftest_cfg(41) };
        let a = RaftRun::new(policy.clone(), cfg.clone(), RewardSet::uniform(reward.clone()))?
            .run()?;
        let b = RaftRun::new(policy, cfg, RewardSet::uniform(reward))?.run()?;
        ensure(
            raft::stage_records_to_csv(&a.records) == raft::stage_records_to_csv(&b.records),
            "records differ",
        )?;
        ensure(a.policy.params() == b.policy.params(), "final policies differ")?;
        Ok("5-stage bandit run, twice".into())
    });

    check(&mut out, "checkpoint round trips are bit exact", || {
        let dir = std::env::temp_dir().join(format!("raftlab-selftest-{}", std::process::id()));
        std::fs::create_dir_all(&dir)?;
        let policy = random_seq(2, 4, 3, 43);
        for (name, binary) in [("p.bin", true), ("p.txt", false)] {
            let path = dir.join(name);
            policy.save(&path, binary)?;
            let back = Policy::load(&path)?;
            ensure(back.params() == policy.params(), "round trip changed params")?;
        }
        std::fs::remove_dir_all(&dir)?;
        Ok("binary and text".into())
    });

    check(&mut out, "mean reward agrees between exact and Monte Carlo", || {
        let policy = random_bandit(2, 10, 45);
        let reward = RewardTable::random(2, 10, 1.0, 47)?;
        let exact = metrics::mean_test_reward_exact(&policy, &reward, &[0, 1])?;
        let mc = metrics::mean_test_reward_mc(&policy, &reward, &[0, 1], 20_000, 1.0, 49)?;
        ensure((mc - exact).abs() < 0.02, format!("exact {exact} vs mc {mc}"))?;
        Ok(format!("delta {:.5}", (mc - exact).abs()))
    });

    check(&mut out, "calibration bins partition the dataset", || {
        let gold = RewardTable::random(4, 16, 1.0, 51)?;
        let data = crate::reward::generate_comparisons(
            &gold,
            4,
            16,
            4000,
            53,
            crate::reward::LabelMode::Probabilistic,
        )?;
        let model = crate::reward::BtRewardModel::zeros(4, 16, crate::reward::BtCapacity::Full)?;
        let (fitted, _) = crate::reward::train_bt(&model, &data, 20.0, 60, 0.0)?;
        let bins = crate::reward::calibration_curve(&fitted, &data, 10)?;
        let total: usize = bins.iter().map(|b| b.count).sum();
        ensure(total == data.len(), format!("bins hold {total} of {}", data.len()))?;
        Ok("10 bins over 4000 records".into())
    });

    out
}

fn selftest_cfg(seed: u64) -> RaftConfig {
    RaftConfig {
        batch_size: 64,
        k: 8,
        temperature: 1.0,
        kl_coeff: 0.0,
        mode: RankingMode::Local,
        max_stages: 3,
        lr: 0.5,
        epochs: 2,
        convergence_eps: 0.01,
        seed,
        eval_samples_per_prompt: 8,
        sft_from_initial: false,
    }
}

/// True when every check passed; prints one line per check.
pub fn print_selftest(results: &[CheckResult]) -> bool {
    let mut ok = true;
    for r in results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("[{status}] {} - {}", r.name, r.detail);
        ok &= r.passed;
    }
    ok
}
