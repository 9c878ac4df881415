//! Reward functions: ground-truth tables, the Hamming sequence reward,
//! Bradley-Terry reward models trained from pairwise comparisons, noise
//! wrappers and recentering.
//!
//! Rewards are pure given a query: stochastic wrappers derive their noise
//! from `(seed, stage, x, y, draw)`, so scoring the same query twice returns
//! the same value and parallel collection stays deterministic.

mod bt;

pub use bt::{
    bt_loss, calibration_curve, generate_comparisons, train_bt, BtCapacity, BtRewardModel,
    BtTrainReport, CalibrationBin, ComparisonDataset, ComparisonRecord, LabelMode,
};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::generator::{decode_tokens, Checkpoint, CheckpointKind};
use crate::seeds::{self, tag};

/// Coordinates of a reward query. Pure rewards ignore everything but
/// `(x, y)`; noisy wrappers key their draws on the full tuple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RewardQuery {
    pub x: usize,
    pub y: usize,
    pub stage: u64,
    pub draw: u64,
}

impl RewardQuery {
    /// Query outside any collection loop (stage 0, draw 0).
    pub fn pure(x: usize, y: usize) -> Self {
        Self { x, y, stage: 0, draw: 0 }
    }
}

/// Scalar map `(x, y) -> r`.
pub trait RewardFn: Send + Sync {
    fn score(&self, q: &RewardQuery) -> Result<f64>;

    /// Upper bound on the width of the reward range (`B` with values in
    /// `[0, B]` for tables). Shift-invariant, so recentering preserves it.
    fn bound(&self) -> f64;

    /// True when repeated queries at different draw coordinates may differ.
    fn is_stochastic(&self) -> bool {
        false
    }

    /// For rewards that decompose over sequence positions: the exact
    /// expected reward of prompt `x` under per-position token marginals.
    /// `None` when the reward does not factorize; callers then enumerate
    /// the response space instead. Both routes must agree exactly.
    fn expected_over_positions(&self, _x: usize, _marginals: &[Vec<f64>]) -> Option<f64> {
        None
    }

    fn score_pair(&self, x: usize, y: usize) -> Result<f64> {
        self.score(&RewardQuery::pure(x, y))
    }
}

impl<T: RewardFn + ?Sized> RewardFn for &T {
    fn score(&self, q: &RewardQuery) -> Result<f64> {
        (**self).score(q)
    }
    fn bound(&self) -> f64 {
        (**self).bound()
    }
    fn is_stochastic(&self) -> bool {
        (**self).is_stochastic()
    }
    fn expected_over_positions(&self, x: usize, marginals: &[Vec<f64>]) -> Option<f64> {
        (**self).expected_over_positions(x, marginals)
    }
}

impl<T: RewardFn + ?Sized> RewardFn for Box<T> {
    fn score(&self, q: &RewardQuery) -> Result<f64> {
        (**self).score(q)
    }
    fn bound(&self) -> f64 {
        (**self).bound()
    }
    fn is_stochastic(&self) -> bool {
        (**self).is_stochastic()
    }
    fn expected_over_positions(&self, x: usize, marginals: &[Vec<f64>]) -> Option<f64> {
        (**self).expected_over_positions(x, marginals)
    }
}

/// Ground-truth `m x n` reward table with entries in `[0, bound]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTable {
    m: usize,
    n: usize,
    values: Vec<f64>,
    bound: f64,
}

impl RewardTable {
    pub fn new(m: usize, n: usize, values: Vec<f64>, bound: f64) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::config("reward table needs m >= 1 and n >= 1"));
        }
        if values.len() != m * n {
            return Err(Error::config(format!(
                "reward table has {} entries, expected {}x{}",
                values.len(),
                m,
                n
            )));
        }
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(Error::config("reward bound must be positive and finite"));
        }
        if !values.iter().all(|v| v.is_finite() && (0.0..=bound).contains(v)) {
            return Err(Error::config("reward entries must lie in [0, bound]"));
        }
        Ok(Self { m, n, values, bound })
    }

    /// Uniformly random entries in `[0, bound]`.
    pub fn random(m: usize, n: usize, bound: f64, seed: u64) -> Result<Self> {
        let mut rng = StdRng::seed_from_u64(seed);
        let values = (0..m * n).map(|_| rng.random::<f64>() * bound).collect();
        Self::new(m, n, values, bound)
    }

    /// Mixture of a per-response column effect and a per-(prompt, response)
    /// interaction term: `column_weight * c(y) + (1 - column_weight) * i(x, y)`,
    /// both uniform on `[0, bound]`. Low `column_weight` makes the table
    /// interaction-heavy, which an additively factorized model cannot fit.
    pub fn random_interaction(
        m: usize,
        n: usize,
        bound: f64,
        column_weight: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&column_weight) {
            return Err(Error::config("column_weight must lie in [0, 1]"));
        }
        let mut rng = StdRng::seed_from_u64(seed);
        let cols: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * bound).collect();
        let values = (0..m * n)
            .map(|i| {
                column_weight * cols[i % n] + (1.0 - column_weight) * rng.random::<f64>() * bound
            })
            .collect();
        Self::new(m, n, values, bound)
    }

    pub fn num_prompts(&self) -> usize {
        self.m
    }

    pub fn num_responses(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.values[x * self.n..(x + 1) * self.n]
    }

    pub fn save(&self, path: &std::path::Path, binary: bool) -> Result<()> {
        Checkpoint::new(
            CheckpointKind::RewardTable,
            vec![self.m as u32, self.n as u32],
            Some(self.bound),
            self.values.clone(),
        )?
        .save(path, binary)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.kind != CheckpointKind::RewardTable {
            return Err(Error::config("checkpoint does not hold a reward table"));
        }
        let bound = ck.bound.ok_or_else(|| Error::config("reward table lacks a bound"))?;
        Self::new(ck.dims[0] as usize, ck.dims[1] as usize, ck.values, bound)
    }
}

impl RewardFn for RewardTable {
    fn score(&self, q: &RewardQuery) -> Result<f64> {
        if q.x >= self.m || q.y >= self.n {
            return Err(Error::domain(format!(
                "reward table lookup ({}, {}) outside {}x{}",
                q.x, q.y, self.m, self.n
            )));
        }
        Ok(self.values[q.x * self.n + q.y])
    }

    fn bound(&self) -> f64 {
        self.bound
    }
}

/// Per-position match rate against each prompt's hidden target sequence:
/// `r(x, y) = |{t : y_t = s_{x,t}}| / L`, in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HammingReward {
    targets: Vec<Vec<usize>>,
    vocab: usize,
    len: usize,
}

impl HammingReward {
    pub fn new(targets: Vec<Vec<usize>>, vocab: usize, len: usize) -> Result<Self> {
        if targets.is_empty() || vocab == 0 || len == 0 {
            return Err(Error::config("hamming reward needs targets, V >= 1, L >= 1"));
        }
        if targets.iter().any(|t| t.len() != len || t.iter().any(|&s| s >= vocab)) {
            return Err(Error::config("targets must have length L with symbols < V"));
        }
        Ok(Self { targets, vocab, len })
    }

    pub fn from_space(space: &crate::generator::PromptSpace, vocab: usize, len: usize) -> Result<Self> {
        let targets = space
            .targets()
            .ok_or_else(|| Error::config("prompt space carries no target sequences"))?;
        Self::new(targets.to_vec(), vocab, len)
    }

    pub fn target(&self, x: usize) -> &[usize] {
        &self.targets[x]
    }

    fn space_size(&self) -> usize {
        self.vocab.pow(self.len as u32)
    }
}

impl RewardFn for HammingReward {
    fn score(&self, q: &RewardQuery) -> Result<f64> {
        if q.x >= self.targets.len() {
            return Err(Error::domain(format!("unknown prompt {}", q.x)));
        }
        if q.y >= self.space_size() {
            return Err(Error::domain(format!("response id {} outside sequence space", q.y)));
        }
        let tokens = decode_tokens(self.vocab, self.len, q.y);
        let matches =
            tokens.iter().zip(&self.targets[q.x]).filter(|(a, b)| a == b).count();
        Ok(matches as f64 / self.len as f64)
    }

    fn bound(&self) -> f64 {
        1.0
    }

    fn expected_over_positions(&self, x: usize, marginals: &[Vec<f64>]) -> Option<f64> {
        // E[matches / L] = mean over positions of P(y_t = s_{x,t}).
        let target = self.targets.get(x)?;
        if marginals.len() != self.len {
            return None;
        }
        let total: f64 = target.iter().zip(marginals).map(|(&s, m)| m[s]).sum();
        Some(total / self.len as f64)
    }
}

/// The three reward-noise modes.
///
/// - mode 1: every query gets `+ N(0, std^2)`;
/// - mode 2: per prompt, with probability `p` an offset `a(x)` is drawn from
///   the menu and every query for that prompt gets `+ N(a(x), std^2)`;
/// - mode 3: as mode 2 but the corruption decision and offset are drawn per
///   `(x, y)` pair independently.
///
/// Offsets are redrawn each stage by default; set
/// `resample_offsets_per_stage = false` to freeze them for a whole run.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    pub mode: u8,
    pub corruption_p: f64,
    pub offsets: Vec<f64>,
    pub std: f64,
    pub seed: u64,
    pub resample_offsets_per_stage: bool,
}

impl NoiseConfig {
    pub fn new(mode: u8, seed: u64) -> Self {
        Self {
            mode,
            corruption_p: 0.2,
            offsets: vec![-0.75, -0.25, 0.5, 1.0],
            std: 1.0,
            seed,
            resample_offsets_per_stage: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.mode) {
            return Err(Error::config(format!("unknown noise mode {}", self.mode)));
        }
        if !(0.0..=1.0).contains(&self.corruption_p) {
            return Err(Error::config("corruption probability must lie in [0, 1]"));
        }
        if !(self.std >= 0.0 && self.std.is_finite()) {
            return Err(Error::config("noise std must be non-negative"));
        }
        if self.offsets.is_empty() {
            return Err(Error::config("offset menu must not be empty"));
        }
        Ok(())
    }
}

/// Wrap a reward with one of the noise modes; see [`NoiseConfig`].
pub fn apply_noise(inner: Box<dyn RewardFn>, cfg: NoiseConfig) -> Result<NoisyReward> {
    NoisyReward::new(inner, cfg)
}

pub struct NoisyReward {
    inner: Box<dyn RewardFn>,
    cfg: NoiseConfig,
}

impl NoisyReward {
    pub fn new(inner: Box<dyn RewardFn>, cfg: NoiseConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { inner, cfg })
    }

    fn offset_stage(&self, stage: u64) -> u64 {
        if self.cfg.resample_offsets_per_stage {
            stage
        } else {
            0
        }
    }

    /// Mode-2 offset for `(stage, x)`: `Some(a(x))` when the prompt is
    /// corrupted this stage. Exposed so runs can be compared against an
    /// explicit prompt-offset reward.
    pub fn prompt_offset(&self, stage: u64, x: usize) -> Option<f64> {
        if self.cfg.mode != 2 {
            return None;
        }
        self.draw_offset(&[tag::NOISE_OFFSET, self.offset_stage(stage), x as u64])
    }

    fn pair_offset(&self, stage: u64, x: usize, y: usize) -> Option<f64> {
        self.draw_offset(&[tag::NOISE_OFFSET, self.offset_stage(stage), x as u64, y as u64])
    }

    fn draw_offset(&self, path: &[u64]) -> Option<f64> {
        let mut rng = StdRng::seed_from_u64(seeds::derive(self.cfg.seed, path));
        if rng.random::<f64>() < self.cfg.corruption_p {
            Some(self.cfg.offsets[rng.random_range(0..self.cfg.offsets.len())])
        } else {
            None
        }
    }

    fn gaussian(&self, mean: f64, q: &RewardQuery) -> f64 {
        if self.cfg.std == 0.0 {
            return mean;
        }
        let seed = seeds::derive(
            self.cfg.seed,
            &[tag::NOISE_DRAW, q.stage, q.x as u64, q.y as u64, q.draw],
        );
        let mut rng = StdRng::seed_from_u64(seed);
        let normal = Normal::new(mean, self.cfg.std).expect("validated std");
        normal.sample(&mut rng)
    }
}

impl RewardFn for NoisyReward {
    fn score(&self, q: &RewardQuery) -> Result<f64> {
        let clean = self.inner.score(q)?;
        Ok(match self.cfg.mode {
            1 => clean + self.gaussian(0.0, q),
            2 => match self.prompt_offset(q.stage, q.x) {
                Some(a) => clean + self.gaussian(a, q),
                None => clean,
            },
            _ => match self.pair_offset(q.stage, q.x, q.y) {
                Some(a) => clean + self.gaussian(a, q),
                None => clean,
            },
        })
    }

    fn bound(&self) -> f64 {
        if self.cfg.std == 0.0 && self.cfg.corruption_p == 0.0 {
            self.inner.bound()
        } else {
            f64::INFINITY
        }
    }

    fn is_stochastic(&self) -> bool {
        true
    }
}

/// `r'(x, y) = r(x, y) - baseline`. Ranking by `r'` selects exactly what
/// ranking by `r` selects.
pub struct Recentered {
    inner: Box<dyn RewardFn>,
    baseline: f64,
}

pub fn recenter(inner: Box<dyn RewardFn>, baseline: f64) -> Recentered {
    Recentered { inner, baseline }
}

impl RewardFn for Recentered {
    fn score(&self, q: &RewardQuery) -> Result<f64> {
        Ok(self.inner.score(q)? - self.baseline)
    }

    fn bound(&self) -> f64 {
        // Range width is shift-invariant.
        self.inner.bound()
    }

    fn is_stochastic(&self) -> bool {
        self.inner.is_stochastic()
    }

    fn expected_over_positions(&self, x: usize, marginals: &[Vec<f64>]) -> Option<f64> {
        self.inner.expected_over_positions(x, marginals).map(|v| v - self.baseline)
    }
}

#[cfg(test)]
mod tests;
