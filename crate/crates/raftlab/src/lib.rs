//! Desk-scale laboratory for reward-ranked fine-tuning (RAFT) of enumerable
//! generative policies.
//!
//! The lab implements the iterated sample/rank/fine-tune loop on two toy
//! policy classes whose response spaces are small enough to enumerate — a
//! tabular contextual bandit and a tabular autoregressive token-sequence
//! model. Because every distribution is exact, the usual RLHF quantities
//! (mean reward, KL to the initial model, best-of-K expectations) can be
//! computed in closed form and checked against independent oracles.
//!
//! Module map:
//!
//! - [`generator`]: policies, temperature sampling, exact distributions,
//!   log-probabilities, cross-entropy fine-tuning, checkpoints.
//! - [`reward`]: reward tables, Hamming sequence reward, Bradley-Terry
//!   reward-model training, calibration, noise wrappers, recentering.
//! - [`raft`]: the three-step loop (collect, rank, fine-tune) with local and
//!   global ranking, KL-modified rewards, stage records and convergence.
//! - [`bestofk`]: exact and sampled best-of-K evaluation plus the
//!   `mean <= E[best-of-K] <= mean + sqrt(B^2/2 * ln K)` concentration check.
//! - [`metrics`]: mean test reward, perplexity, exact KL, lexical diversity.
//! - [`harness`]: experiment presets (K / temperature / KL sweeps, noise,
//!   over-optimization, distillation), run directories, plot-data export.
//!
//! With the default `parallel` feature, data collection, evaluation sweeps
//! and preset runs fan out over a rayon pool; without it the same code runs
//! sequentially. Results are byte-identical in both modes because every
//! random decision draws from a seed stream derived from its coordinates
//! (see [`seeds`]).

pub mod bestofk;
pub mod error;
pub mod generator;
pub mod harness;
pub mod metrics;
pub mod par;
pub mod raft;
pub mod reward;
pub mod seeds;
pub(crate) mod util;

pub use error::{Error, Result};
