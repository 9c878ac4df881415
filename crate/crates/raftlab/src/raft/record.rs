//! Per-stage metrics and their CSV form.

use crate::error::{Error, Result};
use crate::raft::Provenance;

/// Everything measured after one stage. The stage CSV holds the fields in
/// declaration order; wall time is printed to the console only, because
/// output directories must be byte-identical across reruns.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub stage: usize,
    /// Mean ranking score of the filtered batch.
    pub selection_reward: f64,
    /// Exact mean of the optimized reward on the prompts trained this stage.
    pub train_reward: f64,
    /// Exact mean of the optimized reward on the test prompts.
    pub test_reward: f64,
    /// Exact mean of the gold reward on the test prompts; equals
    /// `test_reward` when no proxy is in play.
    pub gold_reward: f64,
    pub kl_to_initial: f64,
    pub perplexity: f64,
    pub msttr_100: f64,
    pub distinct_1: f64,
    pub distinct_2: f64,
    pub unique_1: u64,
    pub unique_2: u64,
    pub mean_length: f64,
    pub provenance: Provenance,
    pub wall_time_s: f64,
}

pub const STAGE_CSV_HEADER: &str = "stage,selection_reward,train_reward,test_reward,gold_reward,kl_to_initial,perplexity,msttr_100,distinct_1,distinct_2,unique_1,unique_2,mean_length,provenance";

/// Names of the numeric columns, in CSV order.
pub const STAGE_METRIC_COLUMNS: [&str; 12] = [
    "selection_reward",
    "train_reward",
    "test_reward",
    "gold_reward",
    "kl_to_initial",
    "perplexity",
    "msttr_100",
    "distinct_1",
    "distinct_2",
    "unique_1",
    "unique_2",
    "mean_length",
];

impl StageRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.stage,
            self.selection_reward,
            self.train_reward,
            self.test_reward,
            self.gold_reward,
            self.kl_to_initial,
            self.perplexity,
            self.msttr_100,
            self.distinct_1,
            self.distinct_2,
            self.unique_1,
            self.unique_2,
            self.mean_length,
            self.provenance,
        )
    }

    /// Numeric columns in [`STAGE_METRIC_COLUMNS`] order.
    pub fn metric_values(&self) -> [f64; 12] {
        [
            self.selection_reward,
            self.train_reward,
            self.test_reward,
            self.gold_reward,
            self.kl_to_initial,
            self.perplexity,
            self.msttr_100,
            self.distinct_1,
            self.distinct_2,
            self.unique_1 as f64,
            self.unique_2 as f64,
            self.mean_length,
        ]
    }
}

pub fn stage_records_to_csv(records: &[StageRecord]) -> String {
    let mut out = String::from(STAGE_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_csv_row());
        out.push('\n');
    }
    out
}

pub fn parse_stage_csv(text: &str, source: &str) -> Result<Vec<StageRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == STAGE_CSV_HEADER => {}
        _ => return Err(Error::format(source, "unexpected stage CSV header")),
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 14 {
            return Err(Error::format(source, format!("row {i} has {} columns", cols.len())));
        }
        let f = |j: usize| -> Result<f64> {
            cols[j]
                .parse()
                .map_err(|_| Error::format(source, format!("bad number {} in row {i}", cols[j])))
        };
        let u = |j: usize| -> Result<u64> {
            cols[j]
                .parse()
                .map_err(|_| Error::format(source, format!("bad count {} in row {i}", cols[j])))
        };
        records.push(StageRecord {
            stage: cols[0]
                .parse()
                .map_err(|_| Error::format(source, format!("bad stage {}", cols[0])))?,
            selection_reward: f(1)?,
            train_reward: f(2)?,
            test_reward: f(3)?,
            gold_reward: f(4)?,
            kl_to_initial: f(5)?,
            perplexity: f(6)?,
            msttr_100: f(7)?,
            distinct_1: f(8)?,
            distinct_2: f(9)?,
            unique_1: u(10)?,
            unique_2: u(11)?,
            mean_length: f(12)?,
            provenance: cols[13].parse()?,
            wall_time_s: 0.0,
        });
    }
    Ok(records)
}
