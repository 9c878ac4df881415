//! Experiment presets: grids of config overrides crossed with seed lists.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::{execute_run, run_distill, run_overopt, RunSpec};
use crate::raft::{StageRecord, STAGE_METRIC_COLUMNS};
use crate::util::mean;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresetName {
    KSweep,
    TempSweep,
    KlSweep,
    Noise,
    Overopt,
    Distill,
    Single,
}

impl std::str::FromStr for PresetName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k_sweep" => Ok(PresetName::KSweep),
            "temp_sweep" => Ok(PresetName::TempSweep),
            "kl_sweep" => Ok(PresetName::KlSweep),
            "noise" => Ok(PresetName::Noise),
            "overopt" => Ok(PresetName::Overopt),
            "distill" => Ok(PresetName::Distill),
            "single" => Ok(PresetName::Single),
            other => Err(Error::config(format!("unknown preset {other}"))),
        }
    }
}

impl std::fmt::Display for PresetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PresetName::KSweep => "k_sweep",
            PresetName::TempSweep => "temp_sweep",
            PresetName::KlSweep => "kl_sweep",
            PresetName::Noise => "noise",
            PresetName::Overopt => "overopt",
            PresetName::Distill => "distill",
            PresetName::Single => "single",
        };
        write!(f, "{s}")
    }
}

/// One grid point: a directory label plus config-key overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

impl GridPoint {
    fn new(label: &str, overrides: &[(&str, &str)]) -> Self {
        Self {
            label: label.to_string(),
            overrides: overrides
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

/// A named grid of overrides and the seeds to cross it with.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPreset {
    pub name: PresetName,
    pub grid: Vec<GridPoint>,
    pub seeds: Vec<u64>,
}

impl ExperimentPreset {
    /// The standard study grids: K in {8, 16, 32}, temperature in
    /// {0.7, 0.85, 1.0}, KL coefficient in {0, 0.005, 0.01, 0.1}, the three
    /// noise modes against a clean arm.
    pub fn standard(name: PresetName, seeds: Vec<u64>) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::config("preset needs at least one seed"));
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return Err(Error::config("preset seeds must be distinct"));
        }
        let grid = match name {
            PresetName::KSweep => vec![
                GridPoint::new("K8", &[("K", "8")]),
                GridPoint::new("K16", &[("K", "16")]),
                GridPoint::new("K32", &[("K", "32")]),
            ],
            PresetName::TempSweep => vec![
                GridPoint::new("lambda0.7", &[("lambda", "0.7")]),
                GridPoint::new("lambda0.85", &[("lambda", "0.85")]),
                GridPoint::new("lambda1.0", &[("lambda", "1.0")]),
            ],
            PresetName::KlSweep => vec![
                GridPoint::new("beta0", &[("beta", "0")]),
                GridPoint::new("beta0.005", &[("beta", "0.005")]),
                GridPoint::new("beta0.01", &[("beta", "0.01")]),
                GridPoint::new("beta0.1", &[("beta", "0.1")]),
            ],
            PresetName::Noise => vec![
                GridPoint::new("clean", &[("noise_mode", "0")]),
                GridPoint::new("mode1", &[("noise_mode", "1")]),
                GridPoint::new("mode2", &[("noise_mode", "2")]),
                GridPoint::new("mode3", &[("noise_mode", "3")]),
            ],
            PresetName::Single => vec![GridPoint::new("run", &[])],
            PresetName::Overopt | PresetName::Distill => vec![],
        };
        Ok(Self { name, grid, seeds })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunStatus {
    pub label: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub converged_at: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PresetReport {
    pub preset: String,
    pub runs: Vec<RunStatus>,
    pub any_failed: bool,
}

#[derive(Serialize)]
struct StageStat {
    stage: usize,
    mean: f64,
    /// Population standard deviation across seeds.
    std: f64,
    count: usize,
}

#[derive(Serialize)]
struct MetricTrajectory {
    metric: String,
    stages: Vec<StageStat>,
}

#[derive(Serialize)]
struct GridAggregate {
    label: String,
    seeds: Vec<u64>,
    metrics: Vec<MetricTrajectory>,
}

#[derive(Serialize)]
struct Aggregate {
    preset: String,
    grid: Vec<GridAggregate>,
}

/// Run every (grid point, seed) of a preset under `out`, one directory per
/// run (`<label>/seed<seed>/`), then write `aggregate.json` with per-stage
/// mean and population std across seeds. Failures are recorded and the rest
/// proceed. The over-optimization and distillation presets delegate to
/// their dedicated drivers.
pub fn run_preset(
    preset: &ExperimentPreset,
    base: &RunSpec,
    out: &Path,
) -> Result<PresetReport> {
    match preset.name {
        PresetName::Overopt => {
            let report = run_overopt(base, &preset.seeds, out, Default::default())?;
            return Ok(report.into_preset_report());
        }
        PresetName::Distill => {
            let report = run_distill(base, base, &preset.seeds, out, Default::default())?;
            return Ok(report.into_preset_report());
        }
        _ => {}
    }

    let mut plan: Vec<(GridPoint, u64, RunSpec)> = Vec::new();
    for point in &preset.grid {
        for &seed in &preset.seeds {
            let mut spec = base.clone();
            for (k, v) in &point.overrides {
                spec.apply(k, v)?;
            }
            spec.seed = seed;
            plan.push((point.clone(), seed, spec));
        }
    }

    let statuses: Vec<(RunStatus, Option<Vec<StageRecord>>)> =
        crate::par::indexed_map(plan.len(), |i| {
            let (point, seed, spec) = &plan[i];
            let dir = out.join(&point.label).join(format!("seed{seed}"));
            match execute_run(spec, &dir) {
                Ok(artifacts) => (
                    RunStatus {
                        label: point.label.clone(),
                        seed: *seed,
                        dir,
                        converged_at: artifacts.outcome.converged_at,
                        error: None,
                    },
                    Some(artifacts.outcome.records),
                ),
                Err(e) => (
                    RunStatus {
                        label: point.label.clone(),
                        seed: *seed,
                        dir,
                        converged_at: None,
                        error: Some(e.to_string()),
                    },
                    None,
                ),
            }
        });

    let mut grid_aggregates = Vec::new();
    for point in &preset.grid {
        let trajectories: Vec<&Vec<StageRecord>> = statuses
            .iter()
            .filter(|(s, r)| s.label == point.label && r.is_some())
            .map(|(_, r)| r.as_ref().expect("filtered"))
            .collect();
        grid_aggregates.push(GridAggregate {
            label: point.label.clone(),
            seeds: preset.seeds.clone(),
            metrics: aggregate_metrics(&trajectories),
        });
    }
    let aggregate = Aggregate { preset: preset.name.to_string(), grid: grid_aggregates };
    std::fs::create_dir_all(out)?;
    let mut json = serde_json::to_string_pretty(&aggregate)
        .map_err(|e| Error::format(out.display().to_string(), e.to_string()))?;
    json.push('\n');
    std::fs::write(out.join("aggregate.json"), json)?;

    let runs: Vec<RunStatus> = statuses.into_iter().map(|(s, _)| s).collect();
    let any_failed = runs.iter().any(|r| r.error.is_some());
    Ok(PresetReport { preset: preset.name.to_string(), runs, any_failed })
}

/// Per-stage mean/std across runs for each metric column. Runs may stop at
/// different stages; each stage aggregates the runs that reached it.
fn aggregate_metrics(trajectories: &[&Vec<StageRecord>]) -> Vec<MetricTrajectory> {
    let max_stages = trajectories.iter().map(|t| t.len()).max().unwrap_or(0);
    STAGE_METRIC_COLUMNS
        .iter()
        .enumerate()
        .map(|(col, name)| {
            let stages = (0..max_stages)
                .map(|s| {
                    let values: Vec<f64> = trajectories
                        .iter()
                        .filter_map(|t| t.get(s))
                        .map(|r| r.metric_values()[col])
                        .collect();
                    let m = mean(&values);
                    let var = if values.is_empty() {
                        f64::NAN
                    } else {
                        values.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
                            / values.len() as f64
                    };
                    StageStat { stage: s + 1, mean: m, std: var.sqrt(), count: values.len() }
                })
                .collect();
            MetricTrajectory { metric: name.to_string(), stages }
        })
        .collect()
}
