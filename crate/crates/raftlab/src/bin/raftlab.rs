//! Command-line front end for the RAFT laboratory.
//!
//! Verbs: `run` one configuration, `sweep` a preset grid over seeds,
//! `overopt` the proxy-versus-gold study, `distill` the teacher/student
//! study, `export` plot data from a directory of runs, `selftest` the
//! invariant suite. `RAFTLAB_THREADS` caps the worker pool.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use raftlab::generator::EnvKind;
use raftlab::harness::{
    self, DistillOptions, ExperimentPreset, PresetName, Profile, RunSpec,
    EXIT_BUDGET_EXHAUSTED,
};

#[derive(Parser)]
#[command(name = "raftlab", version, about = "Reward-ranked fine-tuning laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Run configuration file (flat key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,

    /// Default scale: sub-minute desk runs or paper batch sizes.
    #[arg(long, default_value = "desk")]
    profile: String,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one run and write its directory.
    Run {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run a preset grid across seeds and aggregate.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// One of: k_sweep, temp_sweep, kl_sweep, noise, overopt, distill, single.
        #[arg(long)]
        preset: String,
        /// Comma-separated seed list.
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
    },
    /// Proxy-versus-gold over-optimization study.
    Overopt {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
    },
    /// Teacher-to-student distillation study.
    Distill {
        #[command(flatten)]
        common: CommonArgs,
        /// Teacher configuration; defaults to the student configuration
        /// with K = 32.
        #[arg(long)]
        teacher_config: Option<PathBuf>,
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
    },
    /// Export long-format plot data from a directory of completed runs.
    Export {
        /// Directory holding run directories.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Run the invariant suite; nonzero exit on any failure.
    Selftest,
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> anyhow::Result<ExitCode> {
    if let Ok(threads) = std::env::var("RAFTLAB_THREADS") {
        let n: usize = threads
            .parse()
            .with_context(|| format!("RAFTLAB_THREADS must be a number, got {threads}"))?;
        raftlab::par::configure_thread_cap(n);
    }

    let cli = Cli::parse();
    match cli.command {
        Command::Run { common } => {
            let spec = load_spec(&common, EnvKind::Bandit)?;
            let artifacts = harness::execute_run(&spec, &common.out)?;
            println!(
                "stages: {}, converged_at: {:?}, final test reward: {}",
                artifacts.summary.stages_run,
                artifacts.summary.converged_at,
                artifacts.summary.final_metrics.test_reward
            );
            Ok(exit_with(artifacts.summary.exit_code))
        }
        Command::Sweep { common, preset, seeds } => {
            let name: PresetName = preset.parse()?;
            // Presets default to the sequence environment, where the
            // diversity metrics are meaningful; overopt needs the bandit.
            let default_env = match name {
                PresetName::Overopt | PresetName::Distill => EnvKind::Bandit,
                _ => EnvKind::Seq,
            };
            let spec = load_spec(&common, default_env)?;
            let preset = ExperimentPreset::standard(name, parse_seeds(&seeds)?)?;
            let report = harness::run_preset(&preset, &spec, &common.out)?;
            for run in &report.runs {
                match &run.error {
                    None => println!(
                        "ok   {}/seed{} converged_at={:?}",
                        run.label, run.seed, run.converged_at
                    ),
                    Some(e) => println!("FAIL {}/seed{}: {e}", run.label, run.seed),
                }
            }
            if report.any_failed {
                bail!("{} runs failed", report.runs.iter().filter(|r| r.error.is_some()).count());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Overopt { common, seeds } => {
            let spec = load_spec(&common, EnvKind::Bandit)?;
            let report =
                harness::run_overopt(&spec, &parse_seeds(&seeds)?, &common.out, Default::default())?;
            for run in &report.runs {
                match run {
                    Ok(r) => println!(
                        "ok   seed{}: gold peak at stage {} of {}",
                        r.seed, r.gold_peak_stage, r.final_stage
                    ),
                    Err((seed, e)) => println!("FAIL seed{seed}: {e}"),
                }
            }
            if report.any_failed() {
                bail!("over-optimization study had failures");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Distill { common, teacher_config, seeds } => {
            let student = load_spec(&common, EnvKind::Bandit)?;
            let profile: Profile = common.profile.parse()?;
            let (teacher, opts) = match teacher_config {
                Some(path) => {
                    (RunSpec::from_file(&path, profile)?, DistillOptions { teacher_k: None })
                }
                None => (student.clone(), DistillOptions::default()),
            };
            let report = harness::run_distill(
                &teacher,
                &student,
                &parse_seeds(&seeds)?,
                &common.out,
                opts,
            )?;
            for run in &report.runs {
                match run {
                    Ok(r) => {
                        let fed = r.teacher_fed_records.last().map(|s| s.gold_reward);
                        let own = r.self_fed_records.last().map(|s| s.gold_reward);
                        println!(
                            "ok   seed{}: final gold teacher-fed {fed:?} vs self-fed {own:?}",
                            r.seed
                        );
                    }
                    Err((seed, e)) => println!("FAIL seed{seed}: {e}"),
                }
            }
            if report.any_failed() {
                bail!("distillation study had failures");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Export { out } => {
            let path = harness::write_plotdata(&out)?;
            println!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest => {
            let results = harness::run_selftest();
            let ok = harness::print_selftest(&results);
            if ok {
                println!("selftest: {} checks passed", results.len());
                Ok(ExitCode::SUCCESS)
            } else {
                bail!("selftest failed");
            }
        }
    }
}

fn load_spec(common: &CommonArgs, default_env: EnvKind) -> anyhow::Result<RunSpec> {
    let profile: Profile = common.profile.parse()?;
    Ok(match &common.config {
        Some(path) => RunSpec::from_file(path, profile)
            .with_context(|| format!("reading {}", path.display()))?,
        None => RunSpec::defaults(profile, default_env),
    })
}

fn parse_seeds(s: &str) -> anyhow::Result<Vec<u64>> {
    s.split(',')
        .map(|t| t.trim().parse::<u64>().with_context(|| format!("bad seed {t}")))
        .collect()
}

fn exit_with(code: i32) -> ExitCode {
    match code {
        0 => ExitCode::SUCCESS,
        c if c == EXIT_BUDGET_EXHAUSTED => ExitCode::from(EXIT_BUDGET_EXHAUSTED as u8),
        _ => ExitCode::FAILURE,
    }
}
