//! Evaluation metrics: mean test reward, perplexity, exact KL to a
//! reference policy, and the lexical diversity suite over token sequences.

use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::Serialize;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::generator::Policy;
use crate::reward::RewardFn;
use crate::util::{mean, sum_pairwise};

/// Exact mean reward of the policy over `prompts`:
/// `avg_x sum_y p(y|x) r(x, y)` at temperature 1.
pub fn mean_test_reward_exact(
    policy: &Policy,
    reward: &dyn RewardFn,
    prompts: &[usize],
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::domain("no test prompts"));
    }
    let per_prompt = crate::par::try_indexed_map(prompts.len(), |i| {
        crate::bestofk::expected_reward_exact(policy, reward, prompts[i], 1.0)
    })?;
    Ok(mean(&per_prompt))
}

/// Monte Carlo estimate of the mean reward at an evaluation temperature.
pub fn mean_test_reward_mc(
    policy: &Policy,
    reward: &dyn RewardFn,
    prompts: &[usize],
    samples_per_prompt: usize,
    lambda: f64,
    seed: u64,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::domain("no test prompts"));
    }
    if samples_per_prompt == 0 {
        return Err(Error::config("samples_per_prompt must be at least 1"));
    }
    let per_prompt = crate::par::try_indexed_map(prompts.len(), |i| {
        let x = prompts[i];
        let mut rng =
            StdRng::seed_from_u64(crate::seeds::derive(seed, &[crate::seeds::tag::EVAL, i as u64]));
        let mut total = 0.0;
        for _ in 0..samples_per_prompt {
            let y = policy.sample_one(x, lambda, &mut rng)?;
            total += reward.score_pair(x, y)?;
        }
        Ok(total / samples_per_prompt as f64)
    })?;
    Ok(mean(&per_prompt))
}

/// Perplexity of a policy on reference responses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerplexityReport {
    pub value: f64,
    /// Some reference response had probability zero; `value` is infinite.
    pub zero_probability: bool,
}

/// `exp` of the mean negative log-likelihood of the references: per token
/// for sequence policies, per response for the bandit.
pub fn perplexity(policy: &Policy, references: &[(usize, usize)]) -> Result<PerplexityReport> {
    if references.is_empty() {
        return Err(Error::domain("empty reference set"));
    }
    let mut total_nll = 0.0;
    let mut units = 0usize;
    for &(x, y) in references {
        let lp = policy.log_prob(x, y)?;
        total_nll -= lp;
        units += match policy {
            Policy::Bandit(_) => 1,
            Policy::Seq(p) => p.seq_len(),
        };
    }
    let value = (total_nll / units as f64).exp();
    Ok(PerplexityReport { value, zero_probability: !value.is_finite() })
}

/// Exact KL divergence result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KlReport {
    pub nats: f64,
    /// The reference assigns zero mass somewhere the policy does not;
    /// cannot occur for tabular softmax policies with finite logits.
    pub infinite: bool,
}

/// Mean over prompts of `KL(policy(.|x) || reference(.|x))`, current policy
/// first. Exact; enumerates the response space (sequence policies use the
/// chain-rule route, which tests pin to the enumeration).
pub fn kl_to_reference(policy: &Policy, reference: &Policy, prompts: &[usize]) -> Result<KlReport> {
    if prompts.is_empty() {
        return Err(Error::domain("no prompts"));
    }
    if policy.kind() != reference.kind()
        || policy.num_prompts() != reference.num_prompts()
        || policy.space_size() != reference.space_size()
    {
        return Err(Error::domain("policy and reference have different shapes"));
    }
    let per_prompt: Vec<f64> = match (policy, reference) {
        (Policy::Seq(p), Policy::Seq(q)) => {
            crate::par::try_indexed_map(prompts.len(), |i| p.kl_to(q, prompts[i]))?
        }
        _ => crate::par::try_indexed_map(prompts.len(), |i| {
            let x = prompts[i];
            let pp = policy.exact_distribution(x, 1.0)?;
            let qq = reference.exact_distribution(x, 1.0)?;
            let terms: Vec<f64> = pp
                .iter()
                .zip(&qq)
                .map(|(&a, &b)| if a > 0.0 { a * (a / b).ln() } else { 0.0 })
                .collect();
            Ok(sum_pairwise(&terms))
        })?,
    };
    let nats = mean(&per_prompt);
    Ok(KlReport { nats, infinite: !nats.is_finite() })
}

/// Lexical diversity statistics of a token corpus.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiversityReport {
    /// Mean type/token ratio over consecutive non-overlapping 100-token
    /// segments of the concatenated corpus; the final partial segment is
    /// dropped.
    pub msttr_100: f64,
    pub distinct_1: f64,
    pub distinct_2: f64,
    /// Number of n-grams occurring exactly once.
    pub unique_1: u64,
    pub unique_2: u64,
    pub mean_length: f64,
    /// Corpus was shorter than one segment; msttr used the whole corpus.
    pub short_corpus: bool,
}

const MSTTR_SEGMENT: usize = 100;

/// Diversity of a corpus of token sequences. N-grams never cross text
/// boundaries; a corpus with no n-grams of some order reports distinct-n 1
/// by convention.
pub fn diversity(texts: &[Vec<usize>]) -> Result<DiversityReport> {
    if texts.is_empty() {
        return Err(Error::domain("empty corpus"));
    }
    let (distinct_1, unique_1) = ngram_stats(texts, 1);
    let (distinct_2, unique_2) = ngram_stats(texts, 2);

    let stream: Vec<usize> = texts.iter().flatten().copied().collect();
    let (msttr, short) = msttr_over(&stream);

    let mean_length =
        texts.iter().map(|t| t.len() as f64).sum::<f64>() / texts.len() as f64;

    Ok(DiversityReport {
        msttr_100: msttr,
        distinct_1,
        distinct_2,
        unique_1,
        unique_2,
        mean_length,
        short_corpus: short,
    })
}

fn msttr_over(stream: &[usize]) -> (f64, bool) {
    let ttr = |seg: &[usize]| {
        let types: std::collections::HashSet<usize> = seg.iter().copied().collect();
        types.len() as f64 / seg.len() as f64
    };
    if stream.is_empty() {
        return (f64::NAN, true);
    }
    if stream.len() < MSTTR_SEGMENT {
        return (ttr(stream), true);
    }
    let ratios: Vec<f64> =
        stream.chunks_exact(MSTTR_SEGMENT).map(ttr).collect();
    (mean(&ratios), false)
}

fn ngram_stats(texts: &[Vec<usize>], n: usize) -> (f64, u64) {
    let mut counts: HashMap<&[usize], u64> = HashMap::new();
    let mut total = 0u64;
    for text in texts {
        if text.len() < n {
            continue;
        }
        for gram in text.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
            total += 1;
        }
    }
    if total == 0 {
        return (1.0, 0);
    }
    let distinct = counts.len() as f64 / total as f64;
    let unique = counts.values().filter(|&&c| c == 1).count() as u64;
    (distinct, unique)
}

/// Sample an evaluation corpus from a policy: `samples_per_prompt` responses
/// per prompt at temperature `lambda`, decoded to token sequences (bandit
/// responses become single-token texts).
pub fn sample_corpus(
    policy: &Policy,
    prompts: &[usize],
    samples_per_prompt: usize,
    lambda: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let texts = crate::par::try_indexed_map(prompts.len(), |i| {
        let x = prompts[i];
        let mut rng =
            StdRng::seed_from_u64(crate::seeds::derive(seed, &[crate::seeds::tag::EVAL, x as u64, i as u64]));
        let mut local = Vec::with_capacity(samples_per_prompt);
        for _ in 0..samples_per_prompt {
            let y = policy.sample_one(x, lambda, &mut rng)?;
            local.push(match policy {
                Policy::Bandit(_) => vec![y],
                Policy::Seq(p) => p.decode(y)?,
            });
        }
        Ok(local)
    })?;
    Ok(texts.into_iter().flatten().collect())
}

/// One evaluation row; see [`EvalReport::CSV_HEADER`] for the field order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mean_test_reward: f64,
    pub perplexity: f64,
    pub kl_to_initial: f64,
    pub msttr_100: f64,
    pub distinct_1: f64,
    pub distinct_2: f64,
    pub unique_1: u64,
    pub unique_2: u64,
    pub mean_length: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "mean_test_reward,perplexity,kl_to_initial,msttr_100,distinct_1,distinct_2,unique_1,unique_2,mean_length";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.mean_test_reward,
            self.perplexity,
            self.kl_to_initial,
            self.msttr_100,
            self.distinct_1,
            self.distinct_2,
            self.unique_1,
            self.unique_2,
            self.mean_length
        )
    }
}
