//! Tabular contextual bandit: one softmax over `n` responses per prompt.

use rand::rngs::StdRng;
use rand::Rng;

use crate::error::{Error, Result};
use crate::util::{log_sum_exp, sample_categorical, softmax};

/// Policy parameterized by an `m x n` logit table; the conditional response
/// distribution for prompt `x` is `softmax(logits[x])`.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditPolicy {
    m: usize,
    n: usize,
    logits: Vec<f64>,
}

impl BanditPolicy {
    /// Uniform policy (all logits zero).
    pub fn uniform(m: usize, n: usize) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::config("bandit policy needs m >= 1 and n >= 1"));
        }
        Ok(Self { m, n, logits: vec![0.0; m * n] })
    }

    pub fn from_logits(m: usize, n: usize, logits: Vec<f64>) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::config("bandit policy needs m >= 1 and n >= 1"));
        }
        if logits.len() != m * n {
            return Err(Error::config(format!(
                "logit table has {} entries, expected {}x{}",
                logits.len(),
                m,
                n
            )));
        }
        if !logits.iter().all(|z| z.is_finite()) {
            return Err(Error::config("logits must be finite"));
        }
        Ok(Self { m, n, logits })
    }

    pub fn num_prompts(&self) -> usize {
        self.m
    }

    pub fn num_responses(&self) -> usize {
        self.n
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.logits[x * self.n..(x + 1) * self.n]
    }

    pub(crate) fn check_prompt(&self, x: usize) -> Result<()> {
        if x >= self.m {
            return Err(Error::domain(format!("unknown prompt {x} (m = {})", self.m)));
        }
        Ok(())
    }

    pub(crate) fn check_response(&self, y: usize) -> Result<()> {
        if y >= self.n {
            return Err(Error::domain(format!("unknown response {y} (n = {})", self.n)));
        }
        Ok(())
    }

    /// Temperature-lambda conditional distribution, i.e. `softmax(logits / lambda)`.
    pub fn probs(&self, x: usize, lambda: f64) -> Vec<f64> {
        softmax(self.row(x), lambda)
    }

    pub(crate) fn sample_one(&self, x: usize, lambda: f64, rng: &mut StdRng) -> usize {
        let probs = self.probs(x, lambda);
        sample_categorical(&probs, rng.random::<f64>())
    }

    pub(crate) fn log_prob(&self, x: usize, y: usize) -> Result<f64> {
        self.check_prompt(x)?;
        self.check_response(y)?;
        let row = self.row(x);
        Ok(row[y] - log_sum_exp(row))
    }

    /// Mean negative log-likelihood of `batch` and its gradient with respect
    /// to the logit table.
    pub(crate) fn nll_and_grad(&self, batch: &[(usize, usize)]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let inv_b = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; self.logits.len()];
        let mut nll = 0.0;
        for &(x, y) in batch {
            self.check_prompt(x)?;
            self.check_response(y)?;
            let row = self.row(x);
            let lse = log_sum_exp(row);
            nll += (lse - row[y]) * inv_b;
            let base = x * self.n;
            for (k, &z) in row.iter().enumerate() {
                grad[base + k] += (z - lse).exp() * inv_b;
            }
            grad[base + y] -= inv_b;
        }
        Ok((nll, grad))
    }

    pub(crate) fn apply_gradient(&mut self, grad: &[f64], lr: f64) {
        for (z, g) in self.logits.iter_mut().zip(grad) {
            *z -= lr * g;
        }
    }
}
