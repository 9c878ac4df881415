//! Experiment orchestration: run configurations, run directories, presets,
//! the over-optimization and distillation studies, plot-data export and the
//! self-test suite.
//!
//! A run is described by a flat key-value text file with exactly these keys
//! (any subset; missing keys take profile defaults):
//!
//! ```text
//! env, m, n_or_V, L, b, K, lambda, beta, mode, T, lr, epochs, eps, seed,
//! reward, noise_mode, noise_p, teacher_ckpt
//! ```
//!
//! Every run writes a directory with `config.txt` (normalized echo),
//! `stages.csv` (one row per stage) and `summary.json` (config echo,
//! convergence stage, final metrics). Reruns with the same configuration
//! and seed produce byte-identical directories.

mod export;
mod preset;
mod selftest;
mod studies;

pub use export::{export_plotdata, write_plotdata};
pub use preset::{run_preset, ExperimentPreset, GridPoint, PresetName, PresetReport, RunStatus};
pub use selftest::{print_selftest, run_selftest, CheckResult};
pub use studies::{
    run_distill, run_overopt, DistillOptions, DistillReport, OveroptOptions, OveroptReport,
};

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::generator::{BanditPolicy, EnvKind, Policy, PromptSpace, SeqPolicy};
use crate::raft::{
    stage_records_to_csv, RaftConfig, RaftOutcome, RaftRun, RankingMode, StageRecord,
};
use crate::reward::{apply_noise, HammingReward, NoiseConfig, RewardFn, RewardTable};
use crate::seeds::{self, tag};

/// Exit code of a run that exhausted its stage budget without converging.
pub const EXIT_BUDGET_EXHAUSTED: i32 = 2;

/// Where the gold reward comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardSpec {
    /// Uniformly random table in `[0, 1]`, seeded from the run seed (bandit).
    Random,
    /// Per-prompt target-matching reward (sequence environment).
    Hamming,
    /// Random table mixing a response-column effect with per-cell
    /// interaction; the argument is the column weight in `[0, 1]` (bandit).
    Interaction(f64),
    /// Reward-table checkpoint on disk (bandit).
    File(PathBuf),
}

impl std::fmt::Display for RewardSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RewardSpec::Random => write!(f, "random"),
            RewardSpec::Hamming => write!(f, "hamming"),
            RewardSpec::Interaction(w) => write!(f, "interaction:{w}"),
            RewardSpec::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

impl std::str::FromStr for RewardSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "random" {
            return Ok(RewardSpec::Random);
        }
        if s == "hamming" {
            return Ok(RewardSpec::Hamming);
        }
        if let Some(w) = s.strip_prefix("interaction:") {
            let w: f64 = w
                .parse()
                .map_err(|_| Error::config(format!("bad interaction weight in reward = {s}")))?;
            return Ok(RewardSpec::Interaction(w));
        }
        if let Some(p) = s.strip_prefix("file:") {
            return Ok(RewardSpec::File(PathBuf::from(p)));
        }
        Err(Error::config(format!(
            "unknown reward spec {s} (expected random, hamming, interaction:<w> or file:<path>)"
        )))
    }
}

/// Default scale of a run: sub-minute desk runs or the paper's batch scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::config(format!("unknown profile {other}"))),
        }
    }
}

/// One run configuration; the file form is documented at the module level.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub env: EnvKind,
    pub m: usize,
    pub n_or_v: usize,
    pub l: usize,
    pub b: usize,
    pub k: usize,
    pub lambda: f64,
    pub beta: f64,
    pub mode: RankingMode,
    pub t: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Convergence band; `None` resolves to 1% of the gold reward bound.
    pub eps: Option<f64>,
    pub seed: u64,
    pub reward: RewardSpec,
    /// 0 disables reward noise; 1..=3 select the noise mode.
    pub noise_mode: u8,
    pub noise_p: f64,
    pub teacher_ckpt: String,
}

impl RunSpec {
    pub fn defaults(profile: Profile, env: EnvKind) -> Self {
        let desk = RunSpec {
            env,
            m: 8,
            n_or_v: match env {
                EnvKind::Bandit => 32,
                EnvKind::Seq => 8,
            },
            l: 6,
            b: 256,
            k: 8,
            lambda: 1.0,
            beta: 0.0,
            mode: RankingMode::Local,
            t: 30,
            lr: match env {
                EnvKind::Bandit => 0.5,
                EnvKind::Seq => 0.2,
            },
            epochs: 2,
            eps: None,
            seed: 0,
            reward: match env {
                EnvKind::Bandit => RewardSpec::Random,
                EnvKind::Seq => RewardSpec::Hamming,
            },
            noise_mode: 0,
            noise_p: 0.2,
            teacher_ckpt: String::new(),
        };
        match profile {
            Profile::Desk => desk,
            Profile::Paper => RunSpec { b: 2048, k: 32, ..desk },
        }
    }

    /// Parse a config file on top of profile defaults. The `env` key is read
    /// first because the other defaults depend on it.
    pub fn from_file(path: &Path, profile: Profile) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_with(&text, profile, &path.display().to_string())
    }

    pub fn from_str_with(text: &str, profile: Profile, source: &str) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::format(source, format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim().to_string();
            if pairs.iter().any(|(k, _)| *k == key) {
                return Err(Error::format(source, format!("duplicate key {key}")));
            }
            pairs.push((key, value.trim().to_string()));
        }
        let env = match pairs.iter().find(|(k, _)| k == "env") {
            Some((_, v)) => parse_env(v)?,
            None => EnvKind::Bandit,
        };
        let mut spec = Self::defaults(profile, env);
        for (key, value) in &pairs {
            spec.apply(key, value)?;
        }
        Ok(spec)
    }

    /// Set one key from its textual form.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::config(format!("bad value {value} for key {what}"));
        match key {
            "env" => self.env = parse_env(value)?,
            "m" => self.m = value.parse().map_err(|_| bad("m"))?,
            "n_or_V" => self.n_or_v = value.parse().map_err(|_| bad("n_or_V"))?,
            "L" => self.l = value.parse().map_err(|_| bad("L"))?,
            "b" => self.b = value.parse().map_err(|_| bad("b"))?,
            "K" => self.k = value.parse().map_err(|_| bad("K"))?,
            "lambda" => self.lambda = value.parse().map_err(|_| bad("lambda"))?,
            "beta" => self.beta = value.parse().map_err(|_| bad("beta"))?,
            "mode" => self.mode = value.parse()?,
            "T" => self.t = value.parse().map_err(|_| bad("T"))?,
            "lr" => self.lr = value.parse().map_err(|_| bad("lr"))?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad("epochs"))?,
            "eps" => self.eps = Some(value.parse().map_err(|_| bad("eps"))?),
            "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
            "reward" => self.reward = value.parse()?,
            "noise_mode" => self.noise_mode = value.parse().map_err(|_| bad("noise_mode"))?,
            "noise_p" => self.noise_p = value.parse().map_err(|_| bad("noise_p"))?,
            "teacher_ckpt" => self.teacher_ckpt = value.to_string(),
            other => return Err(Error::config(format!("unknown config key {other}"))),
        }
        Ok(())
    }

    /// Normalized echo with every key explicit, in schema order. `eps` is
    /// printed in its resolved form.
    pub fn echo(&self, resolved_eps: f64) -> String {
        format!(
            "env = {}\nm = {}\nn_or_V = {}\nL = {}\nb = {}\nK = {}\nlambda = {}\nbeta = {}\nmode = {}\nT = {}\nlr = {}\nepochs = {}\neps = {}\nseed = {}\nreward = {}\nnoise_mode = {}\nnoise_p = {}\nteacher_ckpt = {}\n",
            self.env,
            self.m,
            self.n_or_v,
            self.l,
            self.b,
            self.k,
            self.lambda,
            self.beta,
            self.mode,
            self.t,
            self.lr,
            self.epochs,
            resolved_eps,
            self.seed,
            self.reward,
            self.noise_mode,
            self.noise_p,
            self.teacher_ckpt,
        )
    }
}

fn parse_env(s: &str) -> Result<EnvKind> {
    match s {
        "bandit" => Ok(EnvKind::Bandit),
        "seq" => Ok(EnvKind::Seq),
        other => Err(Error::config(format!("unknown env {other}"))),
    }
}

/// JSON view of the config echo; field order matches the file schema.
#[derive(Debug, Clone, Serialize)]
pub struct ConfigEcho {
    pub env: String,
    pub m: usize,
    #[serde(rename = "n_or_V")]
    pub n_or_v: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub b: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub lambda: f64,
    pub beta: f64,
    pub mode: String,
    #[serde(rename = "T")]
    pub t: usize,
    pub lr: f64,
    pub epochs: usize,
    pub eps: f64,
    pub seed: u64,
    pub reward: String,
    pub noise_mode: u8,
    pub noise_p: f64,
    pub teacher_ckpt: String,
}

impl ConfigEcho {
    pub fn new_for(spec: &RunSpec, resolved_eps: f64) -> Self {
        Self {
            env: spec.env.to_string(),
            m: spec.m,
            n_or_v: spec.n_or_v,
            l: spec.l,
            b: spec.b,
            k: spec.k,
            lambda: spec.lambda,
            beta: spec.beta,
            mode: spec.mode.to_string(),
            t: spec.t,
            lr: spec.lr,
            epochs: spec.epochs,
            eps: resolved_eps,
            seed: spec.seed,
            reward: spec.reward.to_string(),
            noise_mode: spec.noise_mode,
            noise_p: spec.noise_p,
            teacher_ckpt: spec.teacher_ckpt.clone(),
        }
    }
}

/// JSON view of one stage record (wall time excluded by design).
#[derive(Debug, Clone, Serialize)]
pub struct StageRecordJson {
    pub stage: usize,
    pub selection_reward: f64,
    pub train_reward: f64,
    pub test_reward: f64,
    pub gold_reward: f64,
    pub kl_to_initial: f64,
    pub perplexity: f64,
    pub msttr_100: f64,
    pub distinct_1: f64,
    pub distinct_2: f64,
    pub unique_1: u64,
    pub unique_2: u64,
    pub mean_length: f64,
    pub provenance: String,
}

impl From<&StageRecord> for StageRecordJson {
    fn from(r: &StageRecord) -> Self {
        Self {
            stage: r.stage,
            selection_reward: r.selection_reward,
            train_reward: r.train_reward,
            test_reward: r.test_reward,
            gold_reward: r.gold_reward,
            kl_to_initial: r.kl_to_initial,
            perplexity: r.perplexity,
            msttr_100: r.msttr_100,
            distinct_1: r.distinct_1,
            distinct_2: r.distinct_2,
            unique_1: r.unique_1,
            unique_2: r.unique_2,
            mean_length: r.mean_length,
            provenance: r.provenance.to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub config: ConfigEcho,
    pub stages_run: usize,
    pub converged_at: Option<usize>,
    pub exit_code: i32,
    pub final_metrics: StageRecordJson,
}

/// A fully assembled run, ready to execute.
pub struct PreparedRun {
    pub policy: Policy,
    pub rewards: crate::raft::RewardSet,
    pub cfg: RaftConfig,
    pub echo: String,
    pub config_echo: ConfigEcho,
    pub teacher_batches: Option<Vec<crate::raft::FilteredBatch>>,
}

/// Build policy, prompt space and rewards from a spec. The initial policy is
/// uniform (all logits zero).
pub fn assemble(spec: &RunSpec) -> Result<PreparedRun> {
    let policy = match spec.env {
        EnvKind::Bandit => Policy::Bandit(BanditPolicy::uniform(spec.m, spec.n_or_v)?),
        EnvKind::Seq => Policy::Seq(SeqPolicy::uniform(spec.m, spec.n_or_v, spec.l)?),
    };
    let gold: Arc<dyn RewardFn> = match (&spec.reward, spec.env) {
        (RewardSpec::Random, EnvKind::Bandit) => Arc::new(RewardTable::random(
            spec.m,
            spec.n_or_v,
            1.0,
            seeds::derive(spec.seed, &[tag::REWARD]),
        )?),
        (RewardSpec::Interaction(w), EnvKind::Bandit) => Arc::new(RewardTable::random_interaction(
            spec.m,
            spec.n_or_v,
            1.0,
            *w,
            seeds::derive(spec.seed, &[tag::REWARD]),
        )?),
        (RewardSpec::File(path), EnvKind::Bandit) => {
            let table = RewardTable::load(path)?;
            if table.num_prompts() != spec.m || table.num_responses() != spec.n_or_v {
                return Err(Error::config(format!(
                    "reward table {} is {}x{}, run wants {}x{}",
                    path.display(),
                    table.num_prompts(),
                    table.num_responses(),
                    spec.m,
                    spec.n_or_v
                )));
            }
            Arc::new(table)
        }
        (RewardSpec::Hamming, EnvKind::Seq) => {
            let space = PromptSpace::random_targets(
                spec.m,
                spec.n_or_v,
                spec.l,
                seeds::derive(spec.seed, &[tag::TARGETS]),
            )?;
            Arc::new(HammingReward::from_space(&space, spec.n_or_v, spec.l)?)
        }
        (reward, env) => {
            return Err(Error::config(format!("reward = {reward} does not fit env = {env}")))
        }
    };

    let ranking: Arc<dyn RewardFn> = if spec.noise_mode == 0 {
        gold.clone()
    } else {
        let mut noise =
            NoiseConfig::new(spec.noise_mode, seeds::derive(spec.seed, &[tag::NOISE_OFFSET]));
        noise.corruption_p = spec.noise_p;
        Arc::new(apply_noise(Box::new(ArcReward(gold.clone())), noise)?)
    };

    let eps = spec.eps.unwrap_or(0.01 * gold.bound());
    let cfg = RaftConfig {
        batch_size: spec.b,
        k: spec.k,
        temperature: spec.lambda,
        kl_coeff: spec.beta,
        mode: spec.mode,
        max_stages: spec.t,
        lr: spec.lr,
        epochs: spec.epochs,
        convergence_eps: eps,
        seed: spec.seed,
        eval_samples_per_prompt: 16,
        sft_from_initial: false,
    };
    cfg.validate()?;
    Ok(PreparedRun {
        policy,
        rewards: crate::raft::RewardSet { ranking, eval: gold.clone(), gold },
        cfg,
        echo: spec.echo(eps),
        config_echo: ConfigEcho::new_for(spec, eps),
        teacher_batches: None,
    })
}

/// Adapter: an `Arc<dyn RewardFn>` as a boxable reward.
struct ArcReward(Arc<dyn RewardFn>);

impl RewardFn for ArcReward {
    fn score(&self, q: &crate::reward::RewardQuery) -> Result<f64> {
        self.0.score(q)
    }
    fn bound(&self) -> f64 {
        self.0.bound()
    }
    fn is_stochastic(&self) -> bool {
        self.0.is_stochastic()
    }
    fn expected_over_positions(&self, x: usize, marginals: &[Vec<f64>]) -> Option<f64> {
        self.0.expected_over_positions(x, marginals)
    }
}

/// Artifacts of one executed run.
pub struct RunArtifacts {
    pub outcome: RaftOutcome,
    pub summary: RunSummary,
    pub dir: PathBuf,
}

/// Execute a prepared run and write its directory: `config.txt`,
/// `stages.csv`, `summary.json`. Wall-clock time goes to stderr only.
pub fn run_prepared(prepared: PreparedRun, dir: &Path) -> Result<RunArtifacts> {
    std::fs::create_dir_all(dir)?;
    let mut run = RaftRun::new(prepared.policy, prepared.cfg, prepared.rewards)?;
    if let Some(batches) = prepared.teacher_batches {
        run = run.with_teacher_batches(batches)?;
    }
    let outcome = run.run()?;
    let total_wall: f64 = outcome.records.iter().map(|r| r.wall_time_s).sum();

    let last = outcome.records.last().ok_or_else(|| Error::domain("run produced no stages"))?;
    let summary = RunSummary {
        config: prepared.config_echo,
        stages_run: outcome.records.len(),
        converged_at: outcome.converged_at,
        exit_code: if outcome.converged_at.is_some() { 0 } else { EXIT_BUDGET_EXHAUSTED },
        final_metrics: StageRecordJson::from(last),
    };

    std::fs::write(dir.join("config.txt"), &prepared.echo)?;
    std::fs::write(dir.join("stages.csv"), stage_records_to_csv(&outcome.records))?;
    let mut json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::format(dir.display().to_string(), e.to_string()))?;
    json.push('\n');
    std::fs::write(dir.join("summary.json"), json)?;
    eprintln!(
        "run {}: {} stages, converged_at = {:?}, wall = {:.3}s",
        dir.display(),
        outcome.records.len(),
        outcome.converged_at,
        total_wall
    );
    Ok(RunArtifacts { outcome, summary, dir: dir.to_path_buf() })
}

/// Assemble and execute one spec into `dir`.
pub fn execute_run(spec: &RunSpec, dir: &Path) -> Result<RunArtifacts> {
    run_prepared(assemble(spec)?, dir)
}
