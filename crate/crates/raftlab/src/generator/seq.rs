//! Tabular autoregressive sequence policy.
//!
//! Responses are fixed-length token sequences over a vocabulary of size `V`.
//! For every (prompt, position, previous token) the policy holds a length-`V`
//! logit vector; position 0 conditions on a virtual start token stored in the
//! `prev = 0` slot. The probability of a full sequence is the product of the
//! per-step conditional softmaxes, and a response is identified with its
//! big-endian base-`V` integer encoding so the whole space `0..V^L` can be
//! enumerated.
//!
//! Temperature acts on the per-step logits (`softmax(logits / lambda)` at
//! every position), which is the standard autoregressive reading of sampling
//! from a tempered model. For the single-step bandit this coincides exactly
//! with renormalizing `p^(1/lambda)` over the response space; for sequences
//! the per-step form is the one an autoregressive sampler actually draws
//! from, and `exact_distribution` reports that same product distribution.

use rand::rngs::StdRng;
use rand::Rng;

use crate::error::{Error, Result};
use crate::util::{entropy, log_sum_exp, sample_categorical, softmax};

/// Encode a token sequence as its big-endian base-`vocab` integer.
pub fn encode_tokens(vocab: usize, tokens: &[usize]) -> usize {
    let mut id = 0usize;
    for &t in tokens {
        id = id * vocab + t;
    }
    id
}

/// Decode a response id back into `len` tokens.
pub fn decode_tokens(vocab: usize, len: usize, id: usize) -> Vec<usize> {
    let mut tokens = vec![0usize; len];
    let mut rest = id;
    for slot in (0..len).rev() {
        tokens[slot] = rest % vocab;
        rest /= vocab;
    }
    tokens
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeqPolicy {
    m: usize,
    vocab: usize,
    len: usize,
    /// Conditional logits, indexed by `((x * len + t) * vocab + prev) * vocab + tok`.
    logits: Vec<f64>,
}

impl SeqPolicy {
    pub fn uniform(m: usize, vocab: usize, len: usize) -> Result<Self> {
        Self::validate_dims(m, vocab, len)?;
        Ok(Self { m, vocab, len, logits: vec![0.0; m * len * vocab * vocab] })
    }

    pub fn from_logits(m: usize, vocab: usize, len: usize, logits: Vec<f64>) -> Result<Self> {
        Self::validate_dims(m, vocab, len)?;
        if logits.len() != m * len * vocab * vocab {
            return Err(Error::config(format!(
                "conditional logit table has {} entries, expected {}",
                logits.len(),
                m * len * vocab * vocab
            )));
        }
        if !logits.iter().all(|z| z.is_finite()) {
            return Err(Error::config("logits must be finite"));
        }
        Ok(Self { m, vocab, len, logits })
    }

    fn validate_dims(m: usize, vocab: usize, len: usize) -> Result<()> {
        if m == 0 || vocab == 0 || len == 0 {
            return Err(Error::config("sequence policy needs m, V, L >= 1"));
        }
        // Response ids must fit in usize.
        let mut size = 1usize;
        for _ in 0..len {
            size = size
                .checked_mul(vocab)
                .ok_or_else(|| Error::config("V^L does not fit in a response id"))?;
        }
        Ok(())
    }

    pub fn num_prompts(&self) -> usize {
        self.m
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn seq_len(&self) -> usize {
        self.len
    }

    pub fn space_size(&self) -> usize {
        self.vocab.pow(self.len as u32)
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn encode(&self, tokens: &[usize]) -> Result<usize> {
        if tokens.len() != self.len || tokens.iter().any(|&t| t >= self.vocab) {
            return Err(Error::domain("invalid response shape for sequence policy"));
        }
        Ok(encode_tokens(self.vocab, tokens))
    }

    pub fn decode(&self, id: usize) -> Result<Vec<usize>> {
        self.check_response(id)?;
        Ok(decode_tokens(self.vocab, self.len, id))
    }

    pub(crate) fn check_prompt(&self, x: usize) -> Result<()> {
        if x >= self.m {
            return Err(Error::domain(format!("unknown prompt {x} (m = {})", self.m)));
        }
        Ok(())
    }

    pub(crate) fn check_response(&self, y: usize) -> Result<()> {
        if y >= self.space_size() {
            return Err(Error::domain(format!(
                "response id {y} outside space of size {}",
                self.space_size()
            )));
        }
        Ok(())
    }

    fn cond_offset(&self, x: usize, t: usize, prev: usize) -> usize {
        ((x * self.len + t) * self.vocab + prev) * self.vocab
    }

    pub(crate) fn cond_slice(&self, x: usize, t: usize, prev: usize) -> &[f64] {
        let off = self.cond_offset(x, t, prev);
        &self.logits[off..off + self.vocab]
    }

    /// Per-step conditional distribution at temperature `lambda`.
    pub fn cond_probs(&self, x: usize, t: usize, prev: usize, lambda: f64) -> Vec<f64> {
        softmax(self.cond_slice(x, t, prev), lambda)
    }

    /// All conditional rows for prompt `x`, indexed `t * vocab + prev`.
    fn cond_rows(&self, x: usize, lambda: f64) -> Vec<Vec<f64>> {
        (0..self.len * self.vocab)
            .map(|i| softmax(self.cond_slice(x, i / self.vocab, i % self.vocab), lambda))
            .collect()
    }

    pub(crate) fn sample_one(&self, x: usize, lambda: f64, rng: &mut StdRng) -> usize {
        let mut prev = 0usize;
        let mut id = 0usize;
        for t in 0..self.len {
            let probs = self.cond_probs(x, t, prev, lambda);
            let tok = sample_categorical(&probs, rng.random::<f64>());
            id = id * self.vocab + tok;
            prev = tok;
        }
        id
    }

    /// Exact probability of every sequence id, as a dynamic program over
    /// prefixes. Prefix order equals encoding order, so entry `i` is the
    /// probability of the sequence with id `i`.
    pub(crate) fn full_distribution(&self, x: usize, lambda: f64) -> Vec<f64> {
        let v = self.vocab;
        let rows = self.cond_rows(x, lambda);
        let mut level = vec![1.0f64];
        for t in 0..self.len {
            let mut next = vec![0.0f64; level.len() * v];
            for (prefix, &p) in level.iter().enumerate() {
                let prev = if t == 0 { 0 } else { prefix % v };
                let row = &rows[t * v + prev];
                let base = prefix * v;
                for (tok, &q) in row.iter().enumerate() {
                    next[base + tok] = p * q;
                }
            }
            level = next;
        }
        level
    }

    pub(crate) fn log_prob(&self, x: usize, y: usize) -> Result<f64> {
        self.check_prompt(x)?;
        let tokens = self.decode(y)?;
        let mut prev = 0usize;
        let mut lp = 0.0;
        for (t, &tok) in tokens.iter().enumerate() {
            let row = self.cond_slice(x, t, prev);
            lp += row[tok] - log_sum_exp(row);
            prev = tok;
        }
        Ok(lp)
    }

    /// Marginal token distribution at every position, `len x vocab`.
    /// O(L V^2) chain route; agrees with marginalizing `full_distribution`.
    pub(crate) fn position_marginals(&self, x: usize, lambda: f64) -> Vec<Vec<f64>> {
        let v = self.vocab;
        let mut out = Vec::with_capacity(self.len);
        let mut state = self.cond_probs(x, 0, 0, lambda);
        out.push(state.clone());
        for t in 1..self.len {
            let rows: Vec<Vec<f64>> =
                (0..v).map(|prev| self.cond_probs(x, t, prev, lambda)).collect();
            let mut next = vec![0.0f64; v];
            for prev in 0..v {
                let w = state[prev];
                if w == 0.0 {
                    continue;
                }
                for tok in 0..v {
                    next[tok] += w * rows[prev][tok];
                }
            }
            out.push(next.clone());
            state = next;
        }
        out
    }

    /// Exact KL(self(.|x) || other(.|x)) over whole sequences via the chain
    /// rule: sum over positions of the expected conditional KL under self's
    /// prefix distribution. O(L V^2); agrees with enumerating `V^L` terms.
    pub(crate) fn kl_to(&self, other: &SeqPolicy, x: usize) -> Result<f64> {
        if other.m != self.m || other.vocab != self.vocab || other.len != self.len {
            return Err(Error::domain("sequence policies have different shapes"));
        }
        self.check_prompt(x)?;
        let v = self.vocab;
        let step_kl = |p: &[f64], q: &[f64]| -> f64 {
            p.iter()
                .zip(q)
                .filter(|(&pi, _)| pi > 0.0)
                .map(|(&pi, &qi)| pi * (pi / qi).ln())
                .sum()
        };
        let p0 = self.cond_probs(x, 0, 0, 1.0);
        let q0 = other.cond_probs(x, 0, 0, 1.0);
        let mut kl = step_kl(&p0, &q0);
        let mut state = p0;
        for t in 1..self.len {
            let mut next = vec![0.0f64; v];
            for prev in 0..v {
                let w = state[prev];
                if w == 0.0 {
                    continue;
                }
                let p = self.cond_probs(x, t, prev, 1.0);
                let q = other.cond_probs(x, t, prev, 1.0);
                kl += w * step_kl(&p, &q);
                for tok in 0..v {
                    next[tok] += w * p[tok];
                }
            }
            state = next;
        }
        Ok(kl)
    }

    /// Joint sequence entropy in nats via the chain rule.
    pub(crate) fn sequence_entropy(&self, x: usize, lambda: f64) -> f64 {
        let v = self.vocab;
        let mut h = entropy(&self.cond_probs(x, 0, 0, lambda));
        let mut state = self.cond_probs(x, 0, 0, lambda);
        for t in 1..self.len {
            let mut next = vec![0.0f64; v];
            for prev in 0..v {
                let w = state[prev];
                if w == 0.0 {
                    continue;
                }
                let p = self.cond_probs(x, t, prev, lambda);
                h += w * entropy(&p);
                for tok in 0..v {
                    next[tok] += w * p[tok];
                }
            }
            state = next;
        }
        h
    }

    pub(crate) fn nll_and_grad(&self, batch: &[(usize, usize)]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let inv_b = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; self.logits.len()];
        let mut nll = 0.0;
        for &(x, y) in batch {
            self.check_prompt(x)?;
            let tokens = self.decode(y)?;
            let mut prev = 0usize;
            for (t, &tok) in tokens.iter().enumerate() {
                let off = self.cond_offset(x, t, prev);
                let row = &self.logits[off..off + self.vocab];
                let lse = log_sum_exp(row);
                nll += (lse - row[tok]) * inv_b;
                for (k, &z) in row.iter().enumerate() {
                    grad[off + k] += (z - lse).exp() * inv_b;
                }
                grad[off + tok] -= inv_b;
                prev = tok;
            }
        }
        Ok((nll, grad))
    }

    pub(crate) fn apply_gradient(&mut self, grad: &[f64], lr: f64) {
        for (z, g) in self.logits.iter_mut().zip(grad) {
            *z -= lr * g;
        }
    }
}
