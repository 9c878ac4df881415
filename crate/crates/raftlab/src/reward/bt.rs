//! Bradley-Terry reward modeling from pairwise comparisons.
//!
//! A comparison `(x, y_w, y_l)` is labeled with `y_w` preferred; the model
//! `r(x, y)` is fit by minimizing the mean negative log-sigmoid of the reward
//! margin, `-E[ln sigmoid(r(x, y_w) - r(x, y_l))]`. Two capacities:
//!
//! - full: one free parameter per `(x, y)` cell, able to represent any gold
//!   table;
//! - factorized: `r(x, y) = u[x] + v[y]`, which provably cannot represent
//!   prompt-response interaction. Note the margin cancels `u[x]`, so only
//!   `v` is identified by same-prompt comparisons.
//!
//! The factorized form is the stand-in proxy reward in the
//! over-optimization study.

use std::fmt::Write as _;
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::generator::{Checkpoint, CheckpointKind, Policy};
use crate::reward::{RewardFn, RewardQuery};
use crate::util::ln_1p_exp;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComparisonRecord {
    pub x: usize,
    pub y_w: usize,
    pub y_l: usize,
}

/// Pairwise preference dataset over an `m x n` space.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonDataset {
    m: usize,
    n: usize,
    records: Vec<ComparisonRecord>,
}

impl ComparisonDataset {
    pub fn new(m: usize, n: usize, records: Vec<ComparisonRecord>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.x >= m || r.y_w >= n || r.y_l >= n {
                return Err(Error::domain(format!("record {i} outside {m}x{n} space")));
            }
            if r.y_w == r.y_l {
                return Err(Error::domain(format!("record {i} compares a response to itself")));
            }
        }
        Ok(Self { m, n, records })
    }

    pub fn num_prompts(&self) -> usize {
        self.m
    }

    pub fn num_responses(&self) -> usize {
        self.n
    }

    pub fn records(&self) -> &[ComparisonRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// First `count` records as a new dataset; used for size sweeps.
    pub fn truncated(&self, count: usize) -> Self {
        Self { m: self.m, n: self.n, records: self.records[..count.min(self.records.len())].to_vec() }
    }

    /// All records name one unordered pair under one prompt.
    pub fn is_degenerate(&self) -> bool {
        match self.records.first() {
            None => true,
            Some(first) => {
                let key = |r: &ComparisonRecord| (r.x, r.y_w.min(r.y_l), r.y_w.max(r.y_l));
                let k0 = key(first);
                self.records.iter().all(|r| key(r) == k0)
            }
        }
    }

    /// CSV with columns `x,y_w,y_l`.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("x,y_w,y_l\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{}", r.x, r.y_w, r.y_l);
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load_csv(path: &Path, m: usize, n: usize) -> Result<Self> {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some("x,y_w,y_l") => {}
            _ => return Err(Error::format(&display, "expected header x,y_w,y_l")),
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(Error::format(&display, format!("row {i} has {} columns", cols.len())));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::format(&display, format!("bad index {s} in row {i}")))
            };
            records.push(ComparisonRecord {
                x: parse(cols[0])?,
                y_w: parse(cols[1])?,
                y_l: parse(cols[2])?,
            });
        }
        Self::new(m, n, records)
    }
}

/// How comparison labels are drawn from the gold margins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    /// Winner drawn with the Bradley-Terry probability `sigmoid(gap)`.
    Probabilistic,
    /// The higher-reward response always wins; exact ties go to the first
    /// sampled response.
    Deterministic,
}

/// Draw `n_pairs` comparisons: prompt uniform, two distinct responses
/// uniform, label per `mode` from the gold margins.
pub fn generate_comparisons(
    gold: &dyn RewardFn,
    m: usize,
    n: usize,
    n_pairs: usize,
    seed: u64,
    mode: LabelMode,
) -> Result<ComparisonDataset> {
    if n_pairs == 0 {
        return Err(Error::config("n_pairs must be at least 1"));
    }
    if n < 2 {
        return Err(Error::domain("cannot compare responses in a space of size 1"));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let x = rng.random_range(0..m);
        let y_a = rng.random_range(0..n);
        let mut y_b = rng.random_range(0..n - 1);
        if y_b >= y_a {
            y_b += 1;
        }
        records.push(label_pair(gold, x, y_a, y_b, mode, &mut rng)?);
    }
    ComparisonDataset::new(m, n, records)
}

/// Variant drawing responses from a policy instead of uniformly. Coverage
/// then follows the policy; a concentrated policy may rarely produce
/// distinct pairs, so after a bounded number of retries the second response
/// falls back to a uniform draw.
pub fn generate_comparisons_from_policy(
    gold: &dyn RewardFn,
    policy: &Policy,
    lambda: f64,
    n_pairs: usize,
    seed: u64,
    mode: LabelMode,
) -> Result<ComparisonDataset> {
    let (m, n) = (policy.num_prompts(), policy.space_size());
    if n_pairs == 0 {
        return Err(Error::config("n_pairs must be at least 1"));
    }
    if n < 2 {
        return Err(Error::domain("cannot compare responses in a space of size 1"));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let x = rng.random_range(0..m);
        let y_a = policy.sample_one(x, lambda, &mut rng)?;
        let mut y_b = y_a;
        for _ in 0..32 {
            y_b = policy.sample_one(x, lambda, &mut rng)?;
            if y_b != y_a {
                break;
            }
        }
        if y_b == y_a {
            let mut alt = rng.random_range(0..n - 1);
            if alt >= y_a {
                alt += 1;
            }
            y_b = alt;
        }
        records.push(label_pair(gold, x, y_a, y_b, mode, &mut rng)?);
    }
    ComparisonDataset::new(m, n, records)
}

fn label_pair(
    gold: &dyn RewardFn,
    x: usize,
    y_a: usize,
    y_b: usize,
    mode: LabelMode,
    rng: &mut StdRng,
) -> Result<ComparisonRecord> {
    let gap = gold.score_pair(x, y_a)? - gold.score_pair(x, y_b)?;
    let a_wins = match mode {
        LabelMode::Probabilistic => rng.random::<f64>() < sigmoid(gap),
        LabelMode::Deterministic => gap >= 0.0,
    };
    Ok(if a_wins {
        ComparisonRecord { x, y_w: y_a, y_l: y_b }
    } else {
        ComparisonRecord { x, y_w: y_b, y_l: y_a }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BtCapacity {
    /// Free parameter per `(x, y)` cell.
    Full,
    /// `r(x, y) = u[x] + v[y]`; `m + n` parameters.
    Factorized,
}

/// Trainable Bradley-Terry reward model.
#[derive(Debug, Clone, PartialEq)]
pub struct BtRewardModel {
    m: usize,
    n: usize,
    capacity: BtCapacity,
    params: Vec<f64>,
}

impl BtRewardModel {
    pub fn zeros(m: usize, n: usize, capacity: BtCapacity) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::config("BT model needs m >= 1 and n >= 1"));
        }
        let count = match capacity {
            BtCapacity::Full => m * n,
            BtCapacity::Factorized => m + n,
        };
        Ok(Self { m, n, capacity, params: vec![0.0; count] })
    }

    pub fn capacity(&self) -> BtCapacity {
        self.capacity
    }

    pub fn num_prompts(&self) -> usize {
        self.m
    }

    pub fn num_responses(&self) -> usize {
        self.n
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn r_hat(&self, x: usize, y: usize) -> f64 {
        match self.capacity {
            BtCapacity::Full => self.params[x * self.n + y],
            BtCapacity::Factorized => self.params[x] + self.params[self.m + y],
        }
    }

    pub fn margin(&self, r: &ComparisonRecord) -> f64 {
        self.r_hat(r.x, r.y_w) - self.r_hat(r.x, r.y_l)
    }

    fn check_record(&self, r: &ComparisonRecord) -> Result<()> {
        if r.x >= self.m || r.y_w >= self.n || r.y_l >= self.n {
            return Err(Error::domain(format!(
                "comparison ({}, {}, {}) outside {}x{} model",
                r.x, r.y_w, r.y_l, self.m, self.n
            )));
        }
        Ok(())
    }

    /// Mean BT loss over `records` and its gradient in parameter space.
    pub fn nll_and_grad(&self, records: &[ComparisonRecord]) -> Result<(f64, Vec<f64>)> {
        if records.is_empty() {
            return Err(Error::domain("empty comparison data"));
        }
        let inv = 1.0 / records.len() as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for r in records {
            self.check_record(r)?;
            let margin = self.margin(r);
            loss += ln_1p_exp(-margin) * inv;
            // d/d margin of -ln sigmoid(margin) = -sigmoid(-margin)
            let g = -sigmoid(-margin) * inv;
            match self.capacity {
                BtCapacity::Full => {
                    grad[r.x * self.n + r.y_w] += g;
                    grad[r.x * self.n + r.y_l] -= g;
                }
                BtCapacity::Factorized => {
                    // u[x] enters winner and loser alike and cancels.
                    grad[self.m + r.y_w] += g;
                    grad[self.m + r.y_l] -= g;
                }
            }
        }
        Ok((loss, grad))
    }

    /// Fraction of records whose margin has the correct sign; exact ties
    /// count one half. NaN on empty input.
    pub fn accuracy(&self, records: &[ComparisonRecord]) -> f64 {
        if records.is_empty() {
            return f64::NAN;
        }
        let mut score = 0.0;
        for r in records {
            let m = self.margin(r);
            if m > 0.0 {
                score += 1.0;
            } else if m == 0.0 {
                score += 0.5;
            }
        }
        score / records.len() as f64
    }

    pub fn save(&self, path: &Path, binary: bool) -> Result<()> {
        let kind = match self.capacity {
            BtCapacity::Full => CheckpointKind::BtFull,
            BtCapacity::Factorized => CheckpointKind::BtFactorized,
        };
        Checkpoint::new(kind, vec![self.m as u32, self.n as u32], None, self.params.clone())?
            .save(path, binary)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let capacity = match ck.kind {
            CheckpointKind::BtFull => BtCapacity::Full,
            CheckpointKind::BtFactorized => BtCapacity::Factorized,
            _ => return Err(Error::config("checkpoint does not hold a BT model")),
        };
        let mut model = Self::zeros(ck.dims[0] as usize, ck.dims[1] as usize, capacity)?;
        model.params = ck.values;
        Ok(model)
    }
}

impl RewardFn for BtRewardModel {
    fn score(&self, q: &RewardQuery) -> Result<f64> {
        if q.x >= self.m || q.y >= self.n {
            return Err(Error::domain(format!(
                "BT lookup ({}, {}) outside {}x{}",
                q.x, q.y, self.m, self.n
            )));
        }
        Ok(self.r_hat(q.x, q.y))
    }

    fn bound(&self) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for x in 0..self.m {
            for y in 0..self.n {
                let r = self.r_hat(x, y);
                lo = lo.min(r);
                hi = hi.max(r);
            }
        }
        hi - lo
    }
}

/// Mean negative log-sigmoid of the model's reward margins.
pub fn bt_loss(model: &BtRewardModel, data: &ComparisonDataset) -> Result<f64> {
    Ok(model.nll_and_grad(data.records())?.0)
}

/// Outcome of [`train_bt`]. Accuracies are NaN when the relevant split is
/// empty.
#[derive(Debug, Clone, PartialEq)]
pub struct BtTrainReport {
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
    pub final_train_loss: f64,
    pub train_size: usize,
    pub holdout_size: usize,
    /// All records name a single pair; the fit is valid but uninformative.
    pub degenerate: bool,
}

/// Full-batch gradient descent on the BT loss. The trailing
/// `holdout_fraction` of the dataset is held out of training and scored for
/// the report.
pub fn train_bt(
    model: &BtRewardModel,
    data: &ComparisonDataset,
    lr: f64,
    epochs: usize,
    holdout_fraction: f64,
) -> Result<(BtRewardModel, BtTrainReport)> {
    if data.is_empty() {
        return Err(Error::domain("empty comparison data"));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::config("learning rate must be non-negative"));
    }
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(Error::config("holdout fraction must lie in [0, 1)"));
    }
    let holdout_size = (data.len() as f64 * holdout_fraction).round() as usize;
    let train_size = data.len() - holdout_size;
    if train_size == 0 {
        return Err(Error::config("holdout fraction leaves no training data"));
    }
    let train = &data.records()[..train_size];
    let holdout = &data.records()[train_size..];

    let mut fitted = model.clone();
    for _ in 0..epochs {
        let (_, grad) = fitted.nll_and_grad(train)?;
        for (p, g) in fitted.params.iter_mut().zip(&grad) {
            *p -= lr * g;
        }
    }
    let loss = fitted.nll_and_grad(train)?.0;
    let report = BtTrainReport {
        train_accuracy: fitted.accuracy(train),
        holdout_accuracy: fitted.accuracy(holdout),
        final_train_loss: loss,
        train_size,
        holdout_size,
        degenerate: data.is_degenerate(),
    };
    Ok((fitted, report))
}

/// One bucket of the calibration curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    /// Mean predicted win probability of records in the bin; NaN when empty.
    pub mean_predicted: f64,
    /// Fraction of records where the model's predicted direction matches the
    /// label (ties count one half); NaN when empty.
    pub empirical_accuracy: f64,
    pub count: usize,
}

/// Bucket records by predicted probability into `n_bins` equal-width bins on
/// `[0.5, 1]`, orienting every pair so the predicted probability is at least
/// one half. Bins partition the dataset; empty bins carry count 0.
pub fn calibration_curve(
    model: &BtRewardModel,
    data: &ComparisonDataset,
    n_bins: usize,
) -> Result<Vec<CalibrationBin>> {
    if n_bins < 2 {
        return Err(Error::config("calibration needs at least 2 bins"));
    }
    let width = 0.5 / n_bins as f64;
    let mut sum_pred = vec![0.0f64; n_bins];
    let mut sum_correct = vec![0.0f64; n_bins];
    let mut counts = vec![0usize; n_bins];
    for r in data.records() {
        model.check_record(r)?;
        let margin = model.margin(r);
        let predicted = sigmoid(margin.abs());
        let correct = if margin > 0.0 {
            1.0
        } else if margin == 0.0 {
            0.5
        } else {
            0.0
        };
        let bin = (((predicted - 0.5) / width) as usize).min(n_bins - 1);
        sum_pred[bin] += predicted;
        sum_correct[bin] += correct;
        counts[bin] += 1;
    }
    Ok((0..n_bins)
        .map(|i| {
            let c = counts[i];
            CalibrationBin {
                lower: 0.5 + i as f64 * width,
                upper: 0.5 + (i + 1) as f64 * width,
                mean_predicted: if c > 0 { sum_pred[i] / c as f64 } else { f64::NAN },
                empirical_accuracy: if c > 0 { sum_correct[i] / c as f64 } else { f64::NAN },
                count: c,
            }
        })
        .collect())
}

/// Relabel an existing dataset using the model's own BT probabilities; the
/// self-consistency oracle for the calibration curve.
pub fn relabel_with_model(
    model: &BtRewardModel,
    data: &ComparisonDataset,
    seed: u64,
) -> Result<ComparisonDataset> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(data.len());
    for r in data.records() {
        model.check_record(r)?;
        let gap = model.r_hat(r.x, r.y_w) - model.r_hat(r.x, r.y_l);
        let keep = rng.random::<f64>() < sigmoid(gap);
        records.push(if keep {
            *r
        } else {
            ComparisonRecord { x: r.x, y_w: r.y_l, y_l: r.y_w }
        });
    }
    ComparisonDataset::new(data.num_prompts(), data.num_responses(), records)
}
