//! The two composite studies: proxy-versus-gold over-optimization and
//! teacher-to-student distillation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::generator::{EnvKind, Policy};
use crate::harness::{
    assemble, run_prepared, ConfigEcho, PresetReport, PreparedRun, RunSpec, RunStatus,
};
use crate::raft::{RaftConfig, RewardSet, StageRecord};
use crate::reward::{
    generate_comparisons, train_bt, BtCapacity, BtRewardModel, BtTrainReport, LabelMode,
    RewardTable,
};
use crate::seeds::{self, tag};
use crate::util::argmax_first;

/// Knobs of the over-optimization study. The gold table mixes a response
/// column effect with per-cell interaction; the proxy is an additively
/// factorized Bradley-Terry model trained on a deliberately modest number
/// of comparisons, so its response ranking is close to, but not equal to,
/// the gold column order.
#[derive(Debug, Clone)]
pub struct OveroptOptions {
    /// Column weight of the gold table (lower = more interaction).
    pub column_weight: f64,
    /// Comparison pairs for proxy training.
    pub comparison_pairs: usize,
    pub bt_lr: f64,
    pub bt_epochs: usize,
    pub bt_holdout: f64,
}

impl Default for OveroptOptions {
    fn default() -> Self {
        Self {
            column_weight: 0.3,
            comparison_pairs: 1500,
            bt_lr: 40.0,
            bt_epochs: 150,
            bt_holdout: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OveroptRun {
    pub seed: u64,
    pub dir: PathBuf,
    pub records: Vec<StageRecord>,
    pub proxy_report: BtTrainReport,
    /// Stage with the highest gold reward (first occurrence).
    pub gold_peak_stage: usize,
    pub final_stage: usize,
}

#[derive(Debug, Clone)]
pub struct OveroptReport {
    pub runs: Vec<std::result::Result<OveroptRun, (u64, String)>>,
}

impl OveroptReport {
    pub fn any_failed(&self) -> bool {
        self.runs.iter().any(|r| r.is_err())
    }

    pub fn into_preset_report(self) -> PresetReport {
        let runs = self
            .runs
            .iter()
            .map(|r| match r {
                Ok(run) => RunStatus {
                    label: "overopt".into(),
                    seed: run.seed,
                    dir: run.dir.clone(),
                    converged_at: None,
                    error: None,
                },
                Err((seed, msg)) => RunStatus {
                    label: "overopt".into(),
                    seed: *seed,
                    dir: PathBuf::new(),
                    converged_at: None,
                    error: Some(msg.clone()),
                },
            })
            .collect();
        PresetReport { preset: "overopt".into(), runs, any_failed: self.any_failed() }
    }
}

#[derive(Serialize)]
struct ProxyJson {
    capacity: String,
    comparison_pairs: usize,
    train_accuracy: f64,
    holdout_accuracy: f64,
    final_train_loss: f64,
    degenerate: bool,
}

/// Train a factorized proxy on comparisons labeled by an interaction-heavy
/// gold table, run RAFT against the proxy, and record the gold reward along
/// the way. Runs go to the full stage budget so the rise-then-fall of the
/// gold curve is visible; `normalized.csv` holds min-max normalized proxy
/// and gold trajectories across all seeds.
pub fn run_overopt(
    base: &RunSpec,
    seeds: &[u64],
    out: &Path,
    opts: OveroptOptions,
) -> Result<OveroptReport> {
    if base.env != EnvKind::Bandit {
        return Err(Error::config("the over-optimization study runs on the bandit environment"));
    }
    if seeds.is_empty() {
        return Err(Error::config("over-optimization study needs at least one seed"));
    }
    let column_weight = match base.reward {
        crate::harness::RewardSpec::Interaction(w) => w,
        _ => opts.column_weight,
    };

    let runs = crate::par::indexed_map(seeds.len(), |i| {
        let seed = seeds[i];
        overopt_one(base, seed, out, &opts, column_weight).map_err(|e| (seed, e.to_string()))
    });

    // Min-max normalization per metric across every run of the study.
    let mut lines = vec!["run,seed,stage,metric,value".to_string()];
    for metric in ["proxy_reward_norm", "gold_reward_norm"] {
        let pick = |r: &StageRecord| {
            if metric.starts_with("proxy") {
                r.test_reward
            } else {
                r.gold_reward
            }
        };
        let all: Vec<f64> = runs
            .iter()
            .flatten()
            .flat_map(|run| run.records.iter().map(pick))
            .collect();
        let lo = all.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        for run in runs.iter().flatten() {
            for r in &run.records {
                let mut line = String::new();
                let _ = write!(
                    line,
                    "seed{},{},{},{},{}",
                    run.seed,
                    run.seed,
                    r.stage,
                    metric,
                    (pick(r) - lo) / span
                );
                lines.push(line);
            }
        }
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("normalized.csv"), lines.join("\n") + "\n")?;

    Ok(OveroptReport { runs })
}

fn overopt_one(
    base: &RunSpec,
    seed: u64,
    out: &Path,
    opts: &OveroptOptions,
    column_weight: f64,
) -> Result<OveroptRun> {
    let mut spec = base.clone();
    spec.seed = seed;
    spec.reward = crate::harness::RewardSpec::Interaction(column_weight);

    let gold = Arc::new(RewardTable::random_interaction(
        spec.m,
        spec.n_or_v,
        1.0,
        column_weight,
        seeds::derive(seed, &[tag::REWARD]),
    )?);
    let comparisons = generate_comparisons(
        gold.as_ref(),
        spec.m,
        spec.n_or_v,
        opts.comparison_pairs,
        seeds::derive(seed, &[tag::COMPARISONS]),
        LabelMode::Probabilistic,
    )?;
    let zeros = BtRewardModel::zeros(spec.m, spec.n_or_v, BtCapacity::Factorized)?;
    let (proxy, report) =
        train_bt(&zeros, &comparisons, opts.bt_lr, opts.bt_epochs, opts.bt_holdout)?;
    let proxy: Arc<BtRewardModel> = Arc::new(proxy);

    // The study records full trajectories: convergence stopping would hide
    // the tail where the gold reward decays.
    let eps = spec.eps.unwrap_or(1e-12);
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
        seed,
        eval_samples_per_prompt: 16,
        sft_from_initial: false,
    };
    let policy = Policy::Bandit(crate::generator::BanditPolicy::uniform(spec.m, spec.n_or_v)?);
    let prepared = PreparedRun {
        policy,
        rewards: RewardSet {
            ranking: proxy.clone(),
            eval: proxy.clone(),
            gold: gold.clone(),
        },
        cfg,
        echo: spec.echo(eps),
        config_echo: ConfigEcho::new_for(&spec, eps),
        teacher_batches: None,
    };
    let dir = out.join(format!("seed{seed}"));
    let artifacts = run_prepared(prepared, &dir)?;

    proxy.save(&dir.join("proxy.ckpt"), true)?;
    let proxy_json = ProxyJson {
        capacity: "factorized".into(),
        comparison_pairs: opts.comparison_pairs,
        train_accuracy: report.train_accuracy,
        holdout_accuracy: report.holdout_accuracy,
        final_train_loss: report.final_train_loss,
        degenerate: report.degenerate,
    };
    let mut json = serde_json::to_string_pretty(&proxy_json)
        .map_err(|e| Error::format(dir.display().to_string(), e.to_string()))?;
    json.push('\n');
    std::fs::write(dir.join("proxy.json"), json)?;

    let gold_curve: Vec<f64> =
        artifacts.outcome.records.iter().map(|r| r.gold_reward).collect();
    let peak = argmax_first(&gold_curve).expect("non-empty run") + 1;
    Ok(OveroptRun {
        seed,
        dir,
        final_stage: artifacts.outcome.records.len(),
        records: artifacts.outcome.records,
        proxy_report: report,
        gold_peak_stage: peak,
    })
}

/// Knobs of the distillation study.
#[derive(Debug, Clone)]
pub struct DistillOptions {
    /// Override the teacher's K (the stock preset gives the teacher K = 32
    /// to make it strictly stronger than the student). `None` keeps the
    /// teacher spec as passed.
    pub teacher_k: Option<usize>,
}

impl Default for DistillOptions {
    fn default() -> Self {
        Self { teacher_k: Some(32) }
    }
}

#[derive(Debug, Clone)]
pub struct DistillRun {
    pub seed: u64,
    pub dir: PathBuf,
    pub teacher_records: Vec<StageRecord>,
    pub teacher_fed_records: Vec<StageRecord>,
    pub self_fed_records: Vec<StageRecord>,
}

#[derive(Debug, Clone)]
pub struct DistillReport {
    pub runs: Vec<std::result::Result<DistillRun, (u64, String)>>,
}

impl DistillReport {
    pub fn any_failed(&self) -> bool {
        self.runs.iter().any(|r| r.is_err())
    }

    pub fn into_preset_report(self) -> PresetReport {
        let runs = self
            .runs
            .iter()
            .map(|r| match r {
                Ok(run) => RunStatus {
                    label: "distill".into(),
                    seed: run.seed,
                    dir: run.dir.clone(),
                    converged_at: None,
                    error: None,
                },
                Err((seed, msg)) => RunStatus {
                    label: "distill".into(),
                    seed: *seed,
                    dir: PathBuf::new(),
                    converged_at: None,
                    error: Some(msg.clone()),
                },
            })
            .collect();
        PresetReport { preset: "distill".into(), runs, any_failed: self.any_failed() }
    }
}

/// Paired distillation runs. Per seed, three runs share one gold reward:
///
/// - `teacher/`: a RAFT run of the teacher spec (optionally starting from
///   `teacher_ckpt`), whose per-stage filtered batches are recorded;
/// - `student_teacher_fed/`: a fresh student fine-tuned on the teacher's
///   stage-t batch at stage t (batches carry the `teacher` provenance tag);
/// - `student_self_fed/`: the same fresh student running ordinary RAFT.
///
/// All three run the student's full stage budget so stages stay matched;
/// passing identical teacher and student specs (with `teacher_k: None`)
/// makes the teacher-fed and self-fed trajectories identical.
pub fn run_distill(
    teacher_base: &RunSpec,
    student_base: &RunSpec,
    seeds: &[u64],
    out: &Path,
    opts: DistillOptions,
) -> Result<DistillReport> {
    if seeds.is_empty() {
        return Err(Error::config("distillation needs at least one seed"));
    }
    if teacher_base.env != student_base.env
        || teacher_base.m != student_base.m
        || teacher_base.n_or_v != student_base.n_or_v
        || (teacher_base.env == EnvKind::Seq && teacher_base.l != student_base.l)
    {
        return Err(Error::config(
            "teacher and student specs describe incompatible response spaces",
        ));
    }
    let runs = crate::par::indexed_map(seeds.len(), |i| {
        let seed = seeds[i];
        distill_one(teacher_base, student_base, seed, out, &opts)
            .map_err(|e| (seed, e.to_string()))
    });
    Ok(DistillReport { runs })
}

fn distill_one(
    teacher_base: &RunSpec,
    student_base: &RunSpec,
    seed: u64,
    out: &Path,
    opts: &DistillOptions,
) -> Result<DistillRun> {
    let dir = out.join(format!("seed{seed}"));

    let mut teacher_spec = teacher_base.clone();
    teacher_spec.seed = seed;
    if let Some(k) = opts.teacher_k {
        teacher_spec.k = k;
    }
    // Matched stages: the teacher must produce one batch per student stage,
    // and both students run the full budget.
    teacher_spec.t = student_base.t;
    teacher_spec.eps = Some(teacher_spec.eps.unwrap_or(1e-12).min(1e-12));

    let mut student_spec = student_base.clone();
    student_spec.seed = seed;
    student_spec.eps = Some(student_spec.eps.unwrap_or(1e-12).min(1e-12));

    let mut teacher_prepared = assemble(&teacher_spec)?;
    if !teacher_spec.teacher_ckpt.is_empty() {
        let warm = Policy::load(Path::new(&teacher_spec.teacher_ckpt))?;
        if warm.kind() != teacher_prepared.policy.kind()
            || warm.num_prompts() != teacher_prepared.policy.num_prompts()
            || warm.space_size() != teacher_prepared.policy.space_size()
        {
            return Err(Error::config(format!(
                "teacher checkpoint {} does not match the run's response space",
                teacher_spec.teacher_ckpt
            )));
        }
        teacher_prepared.policy = warm;
    }
    let teacher = run_prepared(teacher_prepared, &dir.join("teacher"))?;

    let mut fed_prepared = assemble(&student_spec)?;
    fed_prepared.teacher_batches = Some(teacher.outcome.batches.clone());
    let fed = run_prepared(fed_prepared, &dir.join("student_teacher_fed"))?;

    let self_prepared = assemble(&student_spec)?;
    let selfr = run_prepared(self_prepared, &dir.join("student_self_fed"))?;

    Ok(DistillRun {
        seed,
        dir,
        teacher_records: teacher.outcome.records,
        teacher_fed_records: fed.outcome.records,
        self_fed_records: selfr.outcome.records,
    })
}
