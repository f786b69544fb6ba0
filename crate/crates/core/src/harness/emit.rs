//! CSV / JSONL writers. Floats use Rust's shortest round-trip formatting and
//! missing values are empty cells, so files are byte-stable under a fixed seed.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::group::{skewed_buckets, Bucket};
use crate::{Error, Result};

use super::metrics::{CohortMetrics, StepMetrics, TransitionMatrix};
use super::run::RunOutput;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONTROLLER_FILE: &str = "controller.csv";
pub const TRANSITIONS_FILE: &str = "transitions.csv";
pub const RECORDS_FILE: &str = "run.jsonl";

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

const COHORT_FIELDS: [&str; 6] = [
    "groups",
    "valid",
    "degenerate_share",
    "target_band_share",
    "exact_half_share",
    "mean_distance",
];

pub(crate) fn cohort_header(prefix: &str) -> Vec<String> {
    COHORT_FIELDS.iter().map(|f| format!("{prefix}_{f}")).collect()
}

pub(crate) fn cohort_cells(c: &CohortMetrics) -> Vec<String> {
    vec![
        c.groups.to_string(),
        c.valid.to_string(),
        fmt_opt(c.degenerate_share),
        fmt_opt(c.target_band_share),
        fmt_opt(c.exact_half_share),
        fmt_opt(c.mean_distance),
    ]
}

fn metrics_header(buckets: &[Bucket]) -> Vec<String> {
    let mut h = vec!["step".to_string(), "valid_groups".to_string()];
    h.extend(cohort_header("fresh"));
    h.extend(cohort_header("rerollout"));
    h.extend(buckets.iter().map(|b| format!("pass_rate_{b}")));
    h.extend(
        ["surrogate_loss", "advantage_energy", "contrastive_pairs", "trainable_steps"]
            .map(String::from),
    );
    h
}

fn metrics_row(m: &StepMetrics, buckets: &[Bucket]) -> Vec<String> {
    let mut row = vec![m.step.to_string(), m.valid_groups.to_string()];
    row.extend(cohort_cells(&m.fresh));
    row.extend(cohort_cells(&m.rerollout));
    row.extend(buckets.iter().map(|b| fmt_opt(m.bucket_pass_rates.get(b).copied())));
    row.extend([
        m.audit.surrogate_loss.to_string(),
        m.audit.advantage_energy.to_string(),
        m.audit.contrastive_pairs.to_string(),
        m.audit.trainable_steps.to_string(),
    ]);
    row
}

fn transitions_header(n: u32) -> Vec<String> {
    let mut h = vec!["source_bucket".to_string(), "total".to_string()];
    h.extend((0..=n).map(|k| format!("p_{k}")));
    h.push("mean_child".into());
    h.push("target_band_share".into());
    h
}

fn write_transitions(path: &Path, t: &TransitionMatrix) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(transitions_header(t.group_size))?;
    for row in t.rows.iter().filter(|r| !r.is_empty()) {
        let mut cells = vec![row.source.label(), row.total().to_string()];
        let probs = row.probabilities().expect("nonempty row");
        cells.extend(probs.iter().map(f64::to_string));
        cells.push(fmt_opt(row.mean_child()));
        cells.push(fmt_opt(row.target_band_share()));
        w.write_record(cells)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write the four trace files into `dir`, creating it if needed.
pub fn emit_traces(out: &RunOutput, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let buckets = skewed_buckets(out.transitions.group_size)?;

    let path = dir.join(METRICS_FILE);
    let mut w = csv_writer(&path)?;
    w.write_record(metrics_header(&buckets))?;
    for m in &out.metrics {
        w.write_record(metrics_row(m, &buckets))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(CONTROLLER_FILE);
    let mut w = csv_writer(&path)?;
    w.write_record(["step", "bucket", "ratio", "ema", "cooldown_remaining"])?;
    for r in &out.controller_trace {
        w.write_record([
            r.step.to_string(),
            r.bucket.label(),
            r.ratio.to_string(),
            r.ema.to_string(),
            r.cooldown_remaining.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    write_transitions(&dir.join(TRANSITIONS_FILE), &out.transitions)?;

    let path = dir.join(RECORDS_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for r in &out.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}
