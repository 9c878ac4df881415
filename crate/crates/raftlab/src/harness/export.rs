//! Long-format plot-data export from completed run directories.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::{Profile, RunSpec};
use crate::raft::{parse_stage_csv, STAGE_METRIC_COLUMNS};

/// Walk `root` for run directories (anything holding a `config.txt`), parse
/// their stage logs and emit one long-format CSV with columns
/// `run,grid,seed,stage,metric,value`, one row per (run, stage, metric).
///
/// Runs are visited in lexicographic path order and floats are reprinted
/// from their parsed values, so re-exporting is byte-identical. Run
/// directories without a stage log abort the export, listing every absent
/// run.
pub fn export_plotdata(root: &Path) -> Result<String> {
    let mut run_dirs = Vec::new();
    discover(root, &mut run_dirs)?;
    run_dirs.sort();
    if run_dirs.is_empty() {
        return Err(Error::domain(format!("no run directories under {}", root.display())));
    }

    let missing: Vec<String> = run_dirs
        .iter()
        .filter(|d| !d.join("stages.csv").is_file())
        .map(|d| relative_label(root, d))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingLogs(missing));
    }

    let mut out = String::from("run,grid,seed,stage,metric,value\n");
    for dir in &run_dirs {
        let run_id = relative_label(root, dir);
        let grid = dir
            .parent()
            .filter(|p| *p != root)
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "-".to_string());
        let spec = RunSpec::from_file(&dir.join("config.txt"), Profile::Desk)?;
        let csv = std::fs::read_to_string(dir.join("stages.csv"))?;
        let records = parse_stage_csv(&csv, &dir.display().to_string())?;
        for record in &records {
            for (col, metric) in STAGE_METRIC_COLUMNS.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    run_id,
                    grid,
                    spec.seed,
                    record.stage,
                    metric,
                    record.metric_values()[col]
                );
            }
        }
    }
    Ok(out)
}

/// Export and write `plotdata.csv` under `root`.
pub fn write_plotdata(root: &Path) -> Result<PathBuf> {
    let csv = export_plotdata(root)?;
    let path = root.join("plotdata.csv");
    std::fs::write(&path, csv)?;
    Ok(path)
}

fn discover(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if dir.join("config.txt").is_file() {
        out.push(dir.to_path_buf());
    }
    let mut children: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    for child in children {
        discover(&child, out)?;
    }
    Ok(())
}

fn relative_label(root: &Path, dir: &Path) -> String {
    dir.strip_prefix(root)
        .unwrap_or(dir)
        .to_string_lossy()
        .replace(std::path::MAIN_SEPARATOR, "/")
}
