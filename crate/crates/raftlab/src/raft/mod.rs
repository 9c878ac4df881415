//! The reward-ranked fine-tuning loop.
//!
//! Each stage alternates three steps: draw a prompt batch and sample K
//! responses per prompt from the current policy (data collection), keep the
//! highest-reward response per prompt or the top 1/K fraction across prompts
//! (data ranking), and run supervised fine-tuning on the kept set (model
//! fine-tuning). With a positive KL coefficient the ranking score is the
//! modified reward `r - beta * log(p_current / p_initial)`, which penalizes
//! drift from the frozen stage-0 policy.
//!
//! Stages are data-dependent and run sequentially; collection fans out over
//! batch slots with per-slot seed streams, so results do not depend on
//! thread count.

mod record;

pub use record::{
    parse_stage_csv, stage_records_to_csv, StageRecord, STAGE_CSV_HEADER, STAGE_METRIC_COLUMNS,
};

use std::sync::Arc;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::generator::{greedy_optimal, Policy, SamplingConfig};
use crate::metrics;
use crate::reward::{RewardFn, RewardQuery};
use crate::seeds::{self, tag};
use crate::util::{argmax_first, mean};

/// Select per prompt (best of that prompt's K samples) or across prompts
/// (top 1/K fraction of one-sample-per-prompt collection).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankingMode {
    Local,
    Global,
}

impl std::fmt::Display for RankingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RankingMode::Local => write!(f, "local"),
            RankingMode::Global => write!(f, "global"),
        }
    }
}

impl std::str::FromStr for RankingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(RankingMode::Local),
            "global" => Ok(RankingMode::Global),
            other => Err(Error::config(format!("unknown ranking mode {other}"))),
        }
    }
}

/// Where a filtered batch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    OwnPolicy,
    Teacher,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::OwnPolicy => write!(f, "own-policy"),
            Provenance::Teacher => write!(f, "teacher"),
        }
    }
}

impl std::str::FromStr for Provenance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "own-policy" => Ok(Provenance::OwnPolicy),
            "teacher" => Ok(Provenance::Teacher),
            other => Err(Error::config(format!("unknown provenance {other}"))),
        }
    }
}

/// Loop hyper-parameters: prompts per stage `b`, samples per prompt `K`,
/// sampling temperature, KL coefficient, ranking mode, stage budget, the
/// SFT schedule and the convergence band.
#[derive(Debug, Clone, PartialEq)]
pub struct RaftConfig {
    pub batch_size: usize,
    pub k: usize,
    pub temperature: f64,
    pub kl_coeff: f64,
    pub mode: RankingMode,
    pub max_stages: usize,
    pub lr: f64,
    pub epochs: usize,
    pub convergence_eps: f64,
    pub seed: u64,
    /// Evaluation draws per prompt for the diversity corpus.
    pub eval_samples_per_prompt: usize,
    /// Fine-tune from the frozen initial policy instead of the current one.
    pub sft_from_initial: bool,
}

impl RaftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size b must be at least 1"));
        }
        if self.k == 0 {
            return Err(Error::config("K must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature must be positive"));
        }
        if !(self.kl_coeff >= 0.0 && self.kl_coeff.is_finite()) {
            return Err(Error::config("KL coefficient must be non-negative"));
        }
        if self.max_stages == 0 {
            return Err(Error::config("stage budget T must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(self.convergence_eps > 0.0) {
            return Err(Error::config("convergence band must be positive"));
        }
        if self.mode == RankingMode::Global && self.batch_size / self.k == 0 {
            return Err(Error::config("global ranking needs floor(b / K) >= 1"));
        }
        if self.eval_samples_per_prompt == 0 {
            return Err(Error::config("eval_samples_per_prompt must be at least 1"));
        }
        Ok(())
    }

    /// Responses drawn per batch slot: K under local ranking, 1 under global.
    pub fn samples_per_slot(&self) -> usize {
        match self.mode {
            RankingMode::Local => self.k,
            RankingMode::Global => 1,
        }
    }
}

/// One scored response from collection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    pub response: usize,
    /// Reward as queried during collection (noisy rewards stay noisy here).
    pub reward: f64,
    pub logp_current: f64,
    pub logp_reference: f64,
}

/// All samples drawn for one batch slot.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSamples {
    pub slot: usize,
    pub prompt: usize,
    pub samples: Vec<ScoredSample>,
}

/// One selected (prompt, response) pair with the score that won the ranking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selected {
    pub prompt: usize,
    pub response: usize,
    pub score: f64,
}

/// The SFT target of a stage.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredBatch {
    pub entries: Vec<Selected>,
    pub provenance: Provenance,
}

impl FilteredBatch {
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.entries.iter().map(|e| (e.prompt, e.response)).collect()
    }

    pub fn mean_score(&self) -> f64 {
        let scores: Vec<f64> = self.entries.iter().map(|e| e.score).collect();
        mean(&scores)
    }
}

/// `r - beta * (log p_current - log p_reference)`.
pub fn modified_reward(r: f64, logp_current: f64, logp_reference: f64, beta: f64) -> f64 {
    r - beta * (logp_current - logp_reference)
}

/// Step 1: sample `cfg.samples_per_slot()` responses for every batch slot
/// and score them. Log-probabilities under the trained policy and the frozen
/// reference are recorded alongside, as the KL-modified ranking needs both.
pub fn collect(
    policy: &Policy,
    reference: &Policy,
    prompts: &[usize],
    cfg: &RaftConfig,
    ranking_reward: &dyn RewardFn,
    stage: usize,
) -> Result<Vec<PromptSamples>> {
    cfg.validate()?;
    let draws = cfg.samples_per_slot();
    crate::par::try_indexed_map(prompts.len(), |slot| {
        let x = prompts[slot];
        let sample_cfg = SamplingConfig::new(
            cfg.temperature,
            draws,
            seeds::derive(cfg.seed, &[tag::SAMPLE, stage as u64, slot as u64]),
        );
        let responses = policy.sample_responses(x, &sample_cfg)?;
        let mut samples = Vec::with_capacity(draws);
        for (j, &y) in responses.iter().enumerate() {
            let query = RewardQuery {
                x,
                y,
                stage: stage as u64,
                draw: (slot * draws + j) as u64,
            };
            samples.push(ScoredSample {
                response: y,
                reward: ranking_reward.score(&query)?,
                logp_current: policy.log_prob(x, y)?,
                logp_reference: reference.log_prob(x, y)?,
            });
        }
        Ok(PromptSamples { slot, prompt: x, samples })
    })
}

/// Step 2, local mode: per prompt, keep the argmax of the raw reward
/// (`kl_coeff = 0`) or of the modified reward, ties to the lowest sample
/// index. Output size equals the number of slots.
pub fn rank_local(samples: &[PromptSamples], kl_coeff: f64) -> Result<FilteredBatch> {
    let mut entries = Vec::with_capacity(samples.len());
    for ps in samples {
        if ps.samples.is_empty() {
            return Err(Error::domain(format!("prompt slot {} has no samples", ps.slot)));
        }
        let scores: Vec<f64> = ps
            .samples
            .iter()
            .map(|s| {
                if kl_coeff > 0.0 {
                    modified_reward(s.reward, s.logp_current, s.logp_reference, kl_coeff)
                } else {
                    s.reward
                }
            })
            .collect();
        let best = argmax_first(&scores).expect("non-empty samples");
        entries.push(Selected {
            prompt: ps.prompt,
            response: ps.samples[best].response,
            score: scores[best],
        });
    }
    Ok(FilteredBatch { entries, provenance: Provenance::OwnPolicy })
}

/// Step 2, global mode: flatten all samples in (slot, draw) order and keep
/// the `floor(b / K)` highest raw rewards; ties prefer the lowest flat
/// index. Selected entries are emitted in flat-index order.
pub fn rank_global(samples: &[PromptSamples], cfg: &RaftConfig) -> Result<FilteredBatch> {
    let keep = cfg.batch_size / cfg.k;
    if keep == 0 {
        return Err(Error::config("global ranking needs floor(b / K) >= 1"));
    }
    let mut flat: Vec<(usize, usize, f64)> = Vec::new();
    for ps in samples {
        if ps.samples.is_empty() {
            return Err(Error::domain(format!("prompt slot {} has no samples", ps.slot)));
        }
        for s in &ps.samples {
            flat.push((ps.prompt, s.response, s.reward));
        }
    }
    if flat.len() < keep {
        return Err(Error::domain(format!(
            "global ranking needs at least {keep} samples, got {}",
            flat.len()
        )));
    }
    let mut order: Vec<usize> = (0..flat.len()).collect();
    order.sort_by(|&a, &b| {
        flat[b].2.partial_cmp(&flat[a].2).expect("finite rewards").then(a.cmp(&b))
    });
    let mut chosen: Vec<usize> = order[..keep].to_vec();
    chosen.sort_unstable();
    let entries = chosen
        .into_iter()
        .map(|i| Selected { prompt: flat[i].0, response: flat[i].1, score: flat[i].2 })
        .collect();
    Ok(FilteredBatch { entries, provenance: Provenance::OwnPolicy })
}

/// The reward functions of a run. `ranking` drives selection and may be
/// noisy or a learned proxy; `eval` is the pure form of the optimized reward
/// used for the test metric; `gold` is the ground truth, reported but never
/// used for control.
#[derive(Clone)]
pub struct RewardSet {
    pub ranking: Arc<dyn RewardFn>,
    pub eval: Arc<dyn RewardFn>,
    pub gold: Arc<dyn RewardFn>,
}

impl RewardSet {
    /// One pure reward playing all three roles.
    pub fn uniform(reward: Arc<dyn RewardFn>) -> Self {
        Self { ranking: reward.clone(), eval: reward.clone(), gold: reward }
    }
}

/// Result of a full run.
#[derive(Debug, Clone)]
pub struct RaftOutcome {
    pub records: Vec<StageRecord>,
    pub policy: Policy,
    /// Stage at which the convergence band closed, if it did.
    pub converged_at: Option<usize>,
    /// Per-stage filtered batches, reusable as a distillation teacher feed.
    pub batches: Vec<FilteredBatch>,
}

/// Driver for one RAFT run.
pub struct RaftRun {
    cfg: RaftConfig,
    policy: Policy,
    initial: Policy,
    rewards: RewardSet,
    test_prompts: Vec<usize>,
    perplexity_refs: Vec<(usize, usize)>,
    teacher_batches: Option<Vec<FilteredBatch>>,
    records: Vec<StageRecord>,
    batches: Vec<FilteredBatch>,
}

impl RaftRun {
    /// Test prompts default to the whole prompt space: tabular policies
    /// cannot generalize across prompts, so held-out evaluation means exact
    /// evaluation on every prompt. Perplexity references are the
    /// gold-optimal response per test prompt.
    pub fn new(policy: Policy, cfg: RaftConfig, rewards: RewardSet) -> Result<Self> {
        let test_prompts: Vec<usize> = (0..policy.num_prompts()).collect();
        Self::with_test_prompts(policy, cfg, rewards, test_prompts)
    }

    pub fn with_test_prompts(
        policy: Policy,
        cfg: RaftConfig,
        rewards: RewardSet,
        test_prompts: Vec<usize>,
    ) -> Result<Self> {
        cfg.validate()?;
        if test_prompts.is_empty() {
            return Err(Error::config("at least one test prompt is required"));
        }
        let space = policy.space_size();
        let perplexity_refs = test_prompts
            .iter()
            .map(|&x| Ok((x, greedy_optimal(rewards.gold.as_ref(), x, space)?.0)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            initial: policy.clone(),
            policy,
            cfg,
            rewards,
            test_prompts,
            perplexity_refs,
            teacher_batches: None,
            records: Vec::new(),
            batches: Vec::new(),
        })
    }

    /// Replace collection with a recorded teacher feed: stage `t` fine-tunes
    /// on `batches[t - 1]` instead of samples from the student itself.
    pub fn with_teacher_batches(mut self, batches: Vec<FilteredBatch>) -> Result<Self> {
        if (batches.len() as u64) < self.cfg.max_stages as u64 {
            return Err(Error::config(format!(
                "teacher feed has {} batches but the run wants {} stages",
                batches.len(),
                self.cfg.max_stages
            )));
        }
        let space = self.policy.space_size();
        let prompts = self.policy.num_prompts();
        for b in &batches {
            if b.entries.iter().any(|e| e.prompt >= prompts || e.response >= space) {
                return Err(Error::config("teacher batches come from an incompatible space"));
            }
        }
        self.teacher_batches = Some(batches);
        Ok(self)
    }

    pub fn config(&self) -> &RaftConfig {
        &self.cfg
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn records(&self) -> &[StageRecord] {
        &self.records
    }

    /// Execute one stage. On error the previous policy stays in place.
    pub fn run_stage(&mut self) -> Result<&StageRecord> {
        let started = Instant::now();
        let stage = self.records.len() + 1;

        let batch = match &self.teacher_batches {
            Some(feed) => {
                let mut b = feed[stage - 1].clone();
                b.provenance = Provenance::Teacher;
                b
            }
            None => {
                let prompts = self.draw_prompts(stage);
                let samples = collect(
                    &self.policy,
                    &self.initial,
                    &prompts,
                    &self.cfg,
                    self.rewards.ranking.as_ref(),
                    stage,
                )?;
                match self.cfg.mode {
                    RankingMode::Local => rank_local(&samples, self.cfg.kl_coeff)?,
                    RankingMode::Global => rank_global(&samples, &self.cfg)?,
                }
            }
        };

        let base = if self.cfg.sft_from_initial { &self.initial } else { &self.policy };
        let updated = base.sft_update(&batch.pairs(), self.cfg.lr, self.cfg.epochs)?;
        let record = self.evaluate_stage(stage, &updated, &batch, started)?;

        self.policy = updated;
        self.batches.push(batch);
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }

    fn draw_prompts(&self, stage: usize) -> Vec<usize> {
        let mut rng = StdRng::seed_from_u64(seeds::derive(
            self.cfg.seed,
            &[tag::PROMPTS, stage as u64],
        ));
        let m = self.policy.num_prompts();
        (0..self.cfg.batch_size).map(|_| rng.random_range(0..m)).collect()
    }

    fn evaluate_stage(
        &self,
        stage: usize,
        policy: &Policy,
        batch: &FilteredBatch,
        started: Instant,
    ) -> Result<StageRecord> {
        let mut train_prompts: Vec<usize> = batch.entries.iter().map(|e| e.prompt).collect();
        train_prompts.sort_unstable();
        train_prompts.dedup();

        let train_reward =
            exact_mean_reward(policy, self.rewards.eval.as_ref(), &train_prompts)?;
        let test_reward =
            exact_mean_reward(policy, self.rewards.eval.as_ref(), &self.test_prompts)?;
        let gold_reward =
            exact_mean_reward(policy, self.rewards.gold.as_ref(), &self.test_prompts)?;
        let kl = metrics::kl_to_reference(policy, &self.initial, &self.test_prompts)?;
        let ppl = metrics::perplexity(policy, &self.perplexity_refs)?;
        let corpus = metrics::sample_corpus(
            policy,
            &self.test_prompts,
            self.cfg.eval_samples_per_prompt,
            1.0,
            seeds::derive(self.cfg.seed, &[tag::EVAL, stage as u64]),
        )?;
        let diversity = metrics::diversity(&corpus)?;

        Ok(StageRecord {
            stage,
            selection_reward: batch.mean_score(),
            train_reward,
            test_reward,
            gold_reward,
            kl_to_initial: kl.nats,
            perplexity: ppl.value,
            msttr_100: diversity.msttr_100,
            distinct_1: diversity.distinct_1,
            distinct_2: diversity.distinct_2,
            unique_1: diversity.unique_1,
            unique_2: diversity.unique_2,
            mean_length: diversity.mean_length,
            provenance: batch.provenance,
            wall_time_s: started.elapsed().as_secs_f64(),
        })
    }

    /// Run until the stage budget or the convergence band: the test reward
    /// must stay within `eps` of the trailing three-stage running mean for
    /// three consecutive stages (the band is checked from stage 2, so the
    /// earliest possible stop is stage 4).
    pub fn run(mut self) -> Result<RaftOutcome> {
        let mut converged_at = None;
        for stage in 1..=self.cfg.max_stages {
            self.run_stage()?;
            let history: Vec<f64> = self.records.iter().map(|r| r.test_reward).collect();
            if converged(&history, self.cfg.convergence_eps) {
                converged_at = Some(stage);
                break;
            }
        }
        Ok(RaftOutcome {
            records: self.records,
            policy: self.policy,
            converged_at,
            batches: self.batches,
        })
    }
}

/// Exact mean reward over `prompts`, routing sequence policies with
/// position-factorizing rewards through the O(L V^2) marginal path and
/// everything else through enumeration.
pub fn exact_mean_reward(
    policy: &Policy,
    reward: &dyn RewardFn,
    prompts: &[usize],
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::domain("no prompts to evaluate"));
    }
    if let Policy::Seq(p) = policy {
        let values = crate::par::try_indexed_map(prompts.len(), |i| {
            let x = prompts[i];
            p.check_prompt(x)?;
            match reward.expected_over_positions(x, &p.position_marginals(x, 1.0)) {
                Some(v) => Ok(Some(v)),
                None => Ok(None),
            }
        })?;
        if values.iter().all(|v| v.is_some()) {
            let vals: Vec<f64> = values.into_iter().map(|v| v.expect("checked")).collect();
            return Ok(mean(&vals));
        }
    }
    metrics::mean_test_reward_exact(policy, reward, prompts)
}

/// Convergence rule on the test-reward history (1-based stages): the band
/// `|reward(s) - mean(reward over the trailing <= 3 stages)| < eps` must
/// hold at stages `t - 2`, `t - 1` and `t`. Bands are defined from stage 2,
/// so the earliest stop is stage 4.
pub fn converged(history: &[f64], eps: f64) -> bool {
    let t = history.len();
    if t < 4 {
        return false;
    }
    (t - 2..=t).all(|s| {
        let lo = s.saturating_sub(3);
        let window = &history[lo..s];
        (history[s - 1] - mean(window)).abs() < eps
    })
}
