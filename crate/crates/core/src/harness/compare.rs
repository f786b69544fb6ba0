//! Matched-seed comparison of arms.

use std::path::Path;

use crate::group::{skewed_buckets, Bucket};
use crate::{Error, Result};

use super::config::{Arm, ExperimentConfig};
use super::emit::{cohort_cells, cohort_header, emit_traces, fmt_opt};
use super::metrics::{pool_cohorts, CohortMetrics};
use super::run::{run_experiment, RunOutput};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const SEED_SUMMARY_FILE: &str = "summary_by_seed.csv";

/// Whole-run aggregates of one arm under one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub arm: Arm,
    pub seed: u64,
    pub steps: u64,
    pub mean_valid_groups: Option<f64>,
    pub fresh: CohortMetrics,
    pub rerollout: CohortMetrics,
    /// `(bucket, ema, ratio)` after the last step; controlled buckets only.
    pub final_controllers: Vec<(Bucket, f64, f64)>,
}

impl RunSummary {
    pub fn from_run(arm: Arm, seed: u64, out: &RunOutput) -> Self {
        Self {
            arm,
            seed,
            steps: out.metrics.len() as u64,
            mean_valid_groups: out.mean_valid_groups(),
            fresh: pool_cohorts(out.metrics.iter().map(|m| &m.fresh)),
            rerollout: pool_cohorts(out.metrics.iter().map(|m| &m.rerollout)),
            final_controllers: out
                .final_states
                .iter()
                .map(|s| (s.bucket, s.ema, s.ratio))
                .collect(),
        }
    }

    fn controller(&self, bucket: Bucket) -> Option<(f64, f64)> {
        self.final_controllers
            .iter()
            .find(|(b, _, _)| *b == bucket)
            .map(|&(_, e, r)| (e, r))
    }
}

/// Run every arm under every seed. When `out_dir` is set, each run's traces
/// go to `<out_dir>/<arm>/seed-<seed>/` and the summaries next to them.
pub fn run_comparison(
    base: &ExperimentConfig,
    arms: &[Arm],
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<Vec<RunSummary>> {
    let mut summaries = Vec::with_capacity(arms.len() * seeds.len());
    for &arm in arms {
        for &seed in seeds {
            let cfg = ExperimentConfig {
                arm,
                seed,
                ..base.clone()
            };
            let out = run_experiment(&cfg)?;
            if let Some(dir) = out_dir {
                emit_traces(&out, dir.join(arm.name()).join(format!("seed-{seed}")))?;
            }
            summaries.push(RunSummary::from_run(arm, seed, &out));
        }
    }
    if let Some(dir) = out_dir {
        write_summaries(dir, base.group_size, &summaries)?;
    }
    Ok(summaries)
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn write_summaries(dir: &Path, group_size: u32, summaries: &[RunSummary]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let buckets = skewed_buckets(group_size)?;

    let path = dir.join(SEED_SUMMARY_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["arm".to_string(), "seed".into(), "steps".into(), "mean_valid_groups".into()];
    header.extend(cohort_header("fresh"));
    header.extend(cohort_header("rerollout"));
    for b in &buckets {
        header.push(format!("final_ema_{b}"));
        header.push(format!("final_ratio_{b}"));
    }
    w.write_record(&header)?;
    for s in summaries {
        let mut row = vec![
            s.arm.name().to_string(),
            s.seed.to_string(),
            s.steps.to_string(),
            fmt_opt(s.mean_valid_groups),
        ];
        row.extend(cohort_cells(&s.fresh));
        row.extend(cohort_cells(&s.rerollout));
        for &b in &buckets {
            let c = s.controller(b);
            row.push(fmt_opt(c.map(|x| x.0)));
            row.push(fmt_opt(c.map(|x| x.1)));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(SUMMARY_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "arm",
        "seeds",
        "mean_valid_groups",
        "fresh_degenerate_share",
        "rerollout_degenerate_share",
        "fresh_target_band_share",
        "rerollout_target_band_share",
        "fresh_mean_distance",
        "rerollout_mean_distance",
    ])?;
    let mut arms: Vec<Arm> = summaries.iter().map(|s| s.arm).collect();
    arms.dedup();
    for arm in arms {
        let runs: Vec<&RunSummary> = summaries.iter().filter(|s| s.arm == arm).collect();
        let col = |f: &dyn Fn(&RunSummary) -> Option<f64>| fmt_opt(mean(runs.iter().map(|s| f(s))));
        w.write_record([
            arm.name().to_string(),
            runs.len().to_string(),
            col(&|s| s.mean_valid_groups),
            col(&|s| s.fresh.degenerate_share),
            col(&|s| s.rerollout.degenerate_share),
            col(&|s| s.fresh.target_band_share),
            col(&|s| s.rerollout.target_band_share),
            col(&|s| s.fresh.mean_distance),
            col(&|s| s.rerollout.mean_distance),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}
