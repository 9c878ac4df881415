//! Generative-policy abstraction with two desk-scale implementations.
//!
//! Both policies expose the same surface: temperature sampling, the exact
//! response distribution, log-probabilities, and full-batch cross-entropy
//! fine-tuning. Policies are immutable values; `sft_update` returns a new
//! policy and never touches the original, so sampling may run in parallel
//! against a shared reference.

mod bandit;
mod checkpoint;
mod seq;

pub use bandit::BanditPolicy;
pub use checkpoint::{Checkpoint, CheckpointKind};
pub use seq::{decode_tokens, encode_tokens, SeqPolicy};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::reward::RewardFn;
use crate::util::argmax_first;

/// Largest response space the exact (enumerating) operations will touch.
pub const DEFAULT_ENUM_CAP: usize = 1 << 20;

/// How many responses to draw per prompt and at which temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    /// Temperature lambda; the sampling distribution is softmax(logits / lambda).
    pub temperature: f64,
    /// Samples per prompt.
    pub k: usize,
    /// Seed for this draw; see [`crate::seeds`] for stream derivation.
    pub seed: u64,
}

impl SamplingConfig {
    pub fn new(temperature: f64, k: usize, seed: u64) -> Self {
        Self { temperature, k, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        if self.k == 0 {
            return Err(Error::config("K must be at least 1"));
        }
        Ok(())
    }
}

/// The prompt universe. Prompts are integers `0..m`; in the sequence
/// environment each prompt carries a hidden target sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSpace {
    m: usize,
    targets: Option<Vec<Vec<usize>>>,
}

impl PromptSpace {
    /// Plain prompt set without targets (bandit environment).
    pub fn plain(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::config("prompt space needs m >= 1"));
        }
        Ok(Self { m, targets: None })
    }

    /// Prompt set whose prompts each hide a length-`len` target over `0..vocab`.
    pub fn with_targets(targets: Vec<Vec<usize>>, vocab: usize, len: usize) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::config("prompt space needs m >= 1"));
        }
        for (x, t) in targets.iter().enumerate() {
            if t.len() != len {
                return Err(Error::config(format!(
                    "target for prompt {x} has length {}, expected {len}",
                    t.len()
                )));
            }
            if t.iter().any(|&s| s >= vocab) {
                return Err(Error::config(format!("target for prompt {x} has symbols >= {vocab}")));
            }
        }
        Ok(Self { m: targets.len(), targets: Some(targets) })
    }

    /// Uniformly random targets, reproducible from `seed`.
    pub fn random_targets(m: usize, vocab: usize, len: usize, seed: u64) -> Result<Self> {
        if m == 0 || vocab == 0 || len == 0 {
            return Err(Error::config("prompt space needs m, V, L >= 1"));
        }
        let mut rng = StdRng::seed_from_u64(seed);
        let targets =
            (0..m).map(|_| (0..len).map(|_| rng.random_range(0..vocab)).collect()).collect();
        Self::with_targets(targets, vocab, len)
    }

    pub fn num_prompts(&self) -> usize {
        self.m
    }

    pub fn prompts(&self) -> std::ops::Range<usize> {
        0..self.m
    }

    pub fn target(&self, x: usize) -> Option<&[usize]> {
        self.targets.as_ref().and_then(|t| t.get(x)).map(|v| v.as_slice())
    }

    pub fn targets(&self) -> Option<&[Vec<usize>]> {
        self.targets.as_deref()
    }
}

/// Which environment a policy belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    Bandit,
    Seq,
}

impl std::fmt::Display for EnvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EnvKind::Bandit => write!(f, "bandit"),
            EnvKind::Seq => write!(f, "seq"),
        }
    }
}

/// A generative policy over an enumerable response space.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Bandit(BanditPolicy),
    Seq(SeqPolicy),
}

impl Policy {
    pub fn kind(&self) -> EnvKind {
        match self {
            Policy::Bandit(_) => EnvKind::Bandit,
            Policy::Seq(_) => EnvKind::Seq,
        }
    }

    pub fn num_prompts(&self) -> usize {
        match self {
            Policy::Bandit(p) => p.num_prompts(),
            Policy::Seq(p) => p.num_prompts(),
        }
    }

    /// Size of the response space of every prompt.
    pub fn space_size(&self) -> usize {
        match self {
            Policy::Bandit(p) => p.num_responses(),
            Policy::Seq(p) => p.space_size(),
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Policy::Bandit(p) => p.logits(),
            Policy::Seq(p) => p.logits(),
        }
    }

    /// Draw one response at temperature `lambda` from an already-seeded rng.
    pub fn sample_one(&self, x: usize, lambda: f64, rng: &mut StdRng) -> Result<usize> {
        match self {
            Policy::Bandit(p) => {
                p.check_prompt(x)?;
                Ok(p.sample_one(x, lambda, rng))
            }
            Policy::Seq(p) => {
                p.check_prompt(x)?;
                Ok(p.sample_one(x, lambda, rng))
            }
        }
    }

    /// `cfg.k` i.i.d. draws from the temperature-lambda distribution.
    /// Deterministic given (policy, x, cfg.seed).
    pub fn sample_responses(&self, x: usize, cfg: &SamplingConfig) -> Result<Vec<usize>> {
        cfg.validate()?;
        let mut rng = StdRng::seed_from_u64(cfg.seed);
        (0..cfg.k).map(|_| self.sample_one(x, cfg.temperature, &mut rng)).collect()
    }

    /// Probability of every response id at temperature `lambda`; sums to 1
    /// within 1e-9. Refuses spaces above [`DEFAULT_ENUM_CAP`].
    pub fn exact_distribution(&self, x: usize, lambda: f64) -> Result<Vec<f64>> {
        self.exact_distribution_capped(x, lambda, DEFAULT_ENUM_CAP)
    }

    pub fn exact_distribution_capped(
        &self,
        x: usize,
        lambda: f64,
        cap: usize,
    ) -> Result<Vec<f64>> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::config(format!("temperature must be positive, got {lambda}")));
        }
        check_cap(self.space_size(), cap)?;
        match self {
            Policy::Bandit(p) => {
                p.check_prompt(x)?;
                Ok(p.probs(x, lambda))
            }
            Policy::Seq(p) => {
                p.check_prompt(x)?;
                Ok(p.full_distribution(x, lambda))
            }
        }
    }

    /// Natural log of the (lambda = 1) probability of response `y`.
    pub fn log_prob(&self, x: usize, y: usize) -> Result<f64> {
        match self {
            Policy::Bandit(p) => p.log_prob(x, y),
            Policy::Seq(p) => p.log_prob(x, y),
        }
    }

    /// Mean negative log-likelihood of `(prompt, response)` pairs and its
    /// gradient with respect to the parameter table.
    pub fn nll_and_grad(&self, batch: &[(usize, usize)]) -> Result<(f64, Vec<f64>)> {
        match self {
            Policy::Bandit(p) => p.nll_and_grad(batch),
            Policy::Seq(p) => p.nll_and_grad(batch),
        }
    }

    /// `epochs` full passes of exact-gradient descent on the mean negative
    /// log-likelihood of `batch`. Returns the updated policy; `self` is
    /// untouched.
    pub fn sft_update(&self, batch: &[(usize, usize)], lr: f64, epochs: usize) -> Result<Policy> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be non-negative, got {lr}")));
        }
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut updated = self.clone();
        for _ in 0..epochs {
            let (_, grad) = updated.nll_and_grad(batch)?;
            match &mut updated {
                Policy::Bandit(p) => p.apply_gradient(&grad, lr),
                Policy::Seq(p) => p.apply_gradient(&grad, lr),
            }
        }
        Ok(updated)
    }

    /// Joint entropy in nats of the temperature-lambda response distribution.
    pub fn response_entropy(&self, x: usize, lambda: f64) -> Result<f64> {
        match self {
            Policy::Bandit(p) => {
                p.check_prompt(x)?;
                Ok(crate::util::entropy(&p.probs(x, lambda)))
            }
            Policy::Seq(p) => {
                p.check_prompt(x)?;
                Ok(p.sequence_entropy(x, lambda))
            }
        }
    }

    pub fn save(&self, path: &std::path::Path, binary: bool) -> Result<()> {
        Checkpoint::from_policy(self).save(path, binary)
    }

    pub fn load(path: &std::path::Path) -> Result<Policy> {
        Checkpoint::load(path)?.into_policy()
    }
}

pub(crate) fn check_cap(size: usize, cap: usize) -> Result<()> {
    if size > cap {
        return Err(Error::SpaceTooLarge { size: size as u128, cap });
    }
    Ok(())
}

/// The reward-greedy deterministic optimum for prompt `x`: the argmax
/// response (ties to the lowest id) and its reward.
pub fn greedy_optimal(reward: &dyn RewardFn, x: usize, space_size: usize) -> Result<(usize, f64)> {
    greedy_optimal_capped(reward, x, space_size, DEFAULT_ENUM_CAP)
}

pub fn greedy_optimal_capped(
    reward: &dyn RewardFn,
    x: usize,
    space_size: usize,
    cap: usize,
) -> Result<(usize, f64)> {
    check_cap(space_size, cap)?;
    if space_size == 0 {
        return Err(Error::domain("empty response space"));
    }
    let scores = crate::par::try_indexed_map(space_size, |y| reward.score_pair(x, y))?;
    let best = argmax_first(&scores).expect("non-empty space");
    Ok((best, scores[best]))
}

#[cfg(test)]
mod tests;
