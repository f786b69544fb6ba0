//! Per-step cohort metrics and parent-to-child transition matrices.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::group::{classify_bucket, pass_count, pass_count_distance, skewed_buckets, Bucket, Origin, RolloutGroup};
use crate::{Error, Result};

/// Shape of the pass-count distribution of one cohort in one step.
///
/// Shares and the mean distance are `None` for an empty cohort.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CohortMetrics {
    pub groups: usize,
    pub valid: usize,
    pub degenerate_share: Option<f64>,
    /// Share with `k` in the balanced bucket (3..=5 at N = 8).
    pub target_band_share: Option<f64>,
    pub exact_half_share: Option<f64>,
    /// Mean `|k - N/2|`.
    pub mean_distance: Option<f64>,
}

impl CohortMetrics {
    fn from_groups<'a>(groups: impl Iterator<Item = &'a RolloutGroup>) -> Result<Self> {
        let mut m = CohortMetrics::default();
        let (mut degenerate, mut band, mut half, mut dist) = (0usize, 0usize, 0usize, 0.0);
        for g in groups {
            let (k, n) = (pass_count(g), g.size());
            let bucket = classify_bucket(k, n)?;
            m.groups += 1;
            if bucket.is_degenerate() {
                degenerate += 1;
            } else {
                m.valid += 1;
            }
            if !bucket.is_degenerate() && !bucket.is_skewed() {
                band += 1;
            }
            if 2 * k == n {
                half += 1;
            }
            dist += pass_count_distance(k, n);
        }
        if m.groups > 0 {
            let total = m.groups as f64;
            m.degenerate_share = Some(degenerate as f64 / total);
            m.target_band_share = Some(band as f64 / total);
            m.exact_half_share = Some(half as f64 / total);
            m.mean_distance = Some(dist / total);
        }
        Ok(m)
    }
}

/// Aggregate cohort metrics over many steps, weighting each step by its
/// group count.
pub fn pool_cohorts<'a>(cohorts: impl IntoIterator<Item = &'a CohortMetrics>) -> CohortMetrics {
    let mut m = CohortMetrics::default();
    let (mut deg, mut band, mut half, mut dist) = (0.0, 0.0, 0.0, 0.0);
    for c in cohorts {
        if c.groups == 0 {
            continue;
        }
        let w = c.groups as f64;
        m.groups += c.groups;
        m.valid += c.valid;
        deg += w * c.degenerate_share.unwrap_or(0.0);
        band += w * c.target_band_share.unwrap_or(0.0);
        half += w * c.exact_half_share.unwrap_or(0.0);
        dist += w * c.mean_distance.unwrap_or(0.0);
    }
    if m.groups > 0 {
        let total = m.groups as f64;
        m.degenerate_share = Some(deg / total);
        m.target_band_share = Some(band / total);
        m.exact_half_share = Some(half / total);
        m.mean_distance = Some(dist / total);
    }
    m
}

/// Loss-side audit of the mixed batch. Nothing is trained on it.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AuditMetrics {
    /// Masked surrogate summed over mixed-batch groups.
    pub surrogate_loss: f64,
    /// Mean over mixed-batch groups of `(1/N) * sum A_i^2`.
    pub advantage_energy: f64,
    /// Total `k * (N - k)` over the mixed batch.
    pub contrastive_pairs: u64,
    /// Unmasked steps contributing to the surrogate.
    pub trainable_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub fresh: CohortMetrics,
    pub rerollout: CohortMetrics,
    /// Non-degenerate groups across both cohorts, i.e. the mixed-batch size.
    pub valid_groups: usize,
    /// Mean rerollout pass rate `k/N` per parent bucket, for buckets that
    /// produced at least one rerollout this step.
    pub bucket_pass_rates: BTreeMap<Bucket, f64>,
    pub audit: AuditMetrics,
}

/// Cohort-split metrics for one step's groups. The audit block is left zero.
pub fn compute_step_metrics(step: u64, batch: &[RolloutGroup]) -> Result<StepMetrics> {
    if let Some(first) = batch.first() {
        if batch.iter().any(|g| g.size() != first.size()) {
            return Err(Error::contract("mixed group sizes in step batch"));
        }
    }
    let fresh = CohortMetrics::from_groups(batch.iter().filter(|g| g.origin() == Origin::Fresh))?;
    let rerollout = CohortMetrics::from_groups(batch.iter().filter(|g| g.origin() == Origin::Rerollout))?;

    let mut sums: BTreeMap<Bucket, (f64, usize)> = BTreeMap::new();
    for g in batch {
        if let Some(parent) = g.parent_bucket() {
            let e = sums.entry(parent).or_default();
            e.0 += f64::from(pass_count(g)) / f64::from(g.size());
            e.1 += 1;
        }
    }
    let bucket_pass_rates = sums.into_iter().map(|(b, (s, c))| (b, s / c as f64)).collect();

    Ok(StepMetrics {
        step,
        valid_groups: fresh.valid + rerollout.valid,
        fresh,
        rerollout,
        bucket_pass_rates,
        audit: AuditMetrics::default(),
    })
}

/// Child pass-count histogram for one source bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRow {
    pub source: Bucket,
    /// `counts[k]` rerollouts from `source` ended with `k` successes.
    pub counts: Vec<u64>,
}

impl TransitionRow {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn probabilities(&self) -> Option<Vec<f64>> {
        let total = self.total();
        (total > 0).then(|| self.counts.iter().map(|&c| c as f64 / total as f64).collect())
    }

    pub fn mean_child(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| {
            let s: u64 = self.counts.iter().enumerate().map(|(k, &c)| k as u64 * c).sum();
            s as f64 / total as f64
        })
    }

    /// Share of children in the balanced bucket.
    pub fn target_band_share(&self) -> Option<f64> {
        let total = self.total();
        let n = self.counts.len() as u32 - 1;
        (total > 0).then(|| {
            let band: u64 = self
                .counts
                .iter()
                .enumerate()
                .filter(|&(k, _)| {
                    let b = classify_bucket(k as u32, n).expect("k within 0..=n");
                    !b.is_degenerate() && !b.is_skewed()
                })
                .map(|(_, &c)| c)
                .sum();
            band as f64 / total as f64
        })
    }
}

/// Rows for every hard and easy bucket, in bucket order.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub group_size: u32,
    pub rows: Vec<TransitionRow>,
}

impl TransitionMatrix {
    pub fn empty(group_size: u32) -> Result<Self> {
        let rows = skewed_buckets(group_size)?
            .into_iter()
            .map(|source| TransitionRow {
                source,
                counts: vec![0; group_size as usize + 1],
            })
            .collect();
        Ok(Self { group_size, rows })
    }

    pub fn row(&self, source: Bucket) -> Option<&TransitionRow> {
        self.rows.iter().find(|r| r.source == source)
    }

    pub fn record(&mut self, source: Bucket, child: u32) -> Result<()> {
        if child > self.group_size {
            return Err(Error::domain(format!(
                "child pass count {child} exceeds group size {}",
                self.group_size
            )));
        }
        let row = self
            .rows
            .iter_mut()
            .find(|r| r.source == source)
            .ok_or_else(|| Error::contract(format!("bucket {source} is not a prefix source")))?;
        row.counts[child as usize] += 1;
        Ok(())
    }
}

pub fn compute_transition_matrix(group_size: u32, pairs: &[(Bucket, u32)]) -> Result<TransitionMatrix> {
    let mut m = TransitionMatrix::empty(group_size)?;
    for &(source, child) in pairs {
        m.record(source, child)?;
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{TaskId, TrajectoryRef};

    fn fresh(k: u32) -> RolloutGroup {
        RolloutGroup::fresh(TaskId(k), (0..8).map(|i| i < k).collect()).unwrap()
    }

    fn rerollout(k: u32, parent: u32) -> RolloutGroup {
        RolloutGroup::new(
            TaskId(100 + k),
            (0..8).map(|i| i < k).collect(),
            Origin::Rerollout,
            Some(classify_bucket(parent, 8).unwrap()),
            (0..8).map(TrajectoryRef).collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_balanced_group() {
        let m = compute_step_metrics(0, &[fresh(4)]).unwrap();
        assert_eq!(m.fresh.target_band_share, Some(1.0));
        assert_eq!(m.fresh.mean_distance, Some(0.0));
        assert_eq!(m.fresh.exact_half_share, Some(1.0));
        assert_eq!(m.valid_groups, 1);
        assert_eq!(m.rerollout.groups, 0);
        assert_eq!(m.rerollout.degenerate_share, None);
    }

    #[test]
    fn all_degenerate() {
        let m = compute_step_metrics(0, &[fresh(0), fresh(8)]).unwrap();
        assert_eq!(m.fresh.degenerate_share, Some(1.0));
        assert_eq!(m.valid_groups, 0);
    }

    #[test]
    fn ten_group_fixture_counted_by_hand() {
        // fresh k: 0 0 1 2 4 8   rerollout k (parent): 3(1) 4(2) 5(7) 8(1)
        let batch = vec![
            fresh(0),
            fresh(0),
            fresh(1),
            fresh(2),
            fresh(4),
            fresh(8),
            rerollout(3, 1),
            rerollout(4, 2),
            rerollout(5, 7),
            rerollout(8, 1),
        ];
        let m = compute_step_metrics(3, &batch).unwrap();
        assert_eq!(m.fresh.groups, 6);
        assert_eq!(m.fresh.valid, 3);
        assert_eq!(m.fresh.degenerate_share, Some(3.0 / 6.0));
        assert_eq!(m.fresh.target_band_share, Some(1.0 / 6.0));
        assert_eq!(m.fresh.exact_half_share, Some(1.0 / 6.0));
        // distances 4 4 3 2 0 4
        assert_eq!(m.fresh.mean_distance, Some(17.0 / 6.0));
        assert_eq!(m.rerollout.groups, 4);
        assert_eq!(m.rerollout.valid, 3);
        assert_eq!(m.rerollout.degenerate_share, Some(0.25));
        assert_eq!(m.rerollout.target_band_share, Some(0.75));
        assert_eq!(m.rerollout.exact_half_share, Some(0.25));
        // distances 1 0 1 4
        assert_eq!(m.rerollout.mean_distance, Some(1.5));
        assert_eq!(m.valid_groups, 6);
        let h1 = classify_bucket(1, 8).unwrap();
        let e7 = classify_bucket(7, 8).unwrap();
        assert_eq!(m.bucket_pass_rates[&h1], (3.0 / 8.0 + 1.0) / 2.0);
        assert_eq!(m.bucket_pass_rates[&e7], 5.0 / 8.0);
        assert!(!m.bucket_pass_rates.contains_key(&classify_bucket(6, 8).unwrap()));
    }

    #[test]
    fn pooling_weights_by_groups() {
        let a = compute_step_metrics(0, &[fresh(0), fresh(4)]).unwrap().fresh;
        let b = compute_step_metrics(1, &[fresh(8)]).unwrap().fresh;
        let empty = CohortMetrics::default();
        let p = pool_cohorts([&a, &b, &empty]);
        assert_eq!(p.groups, 3);
        assert_eq!(p.valid, 1);
        assert!((p.degenerate_share.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.mean_distance.unwrap() - 8.0 / 3.0).abs() < 1e-12);
        assert_eq!(pool_cohorts([&empty]).degenerate_share, None);
    }

    #[test]
    fn shares_partition() {
        let batch: Vec<_> = (0..=8).map(fresh).collect();
        let m = compute_step_metrics(0, &batch).unwrap();
        let skewed = 4.0 / 9.0;
        let total = m.fresh.degenerate_share.unwrap() + m.fresh.target_band_share.unwrap() + skewed;
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn transition_examples() {
        let h1 = classify_bucket(1, 8).unwrap();
        let m = compute_transition_matrix(8, &[(h1, 4)]).unwrap();
        let row = m.row(h1).unwrap();
        let mut point = vec![0.0; 9];
        point[4] = 1.0;
        assert_eq!(row.probabilities(), Some(point));
        assert_eq!(row.mean_child(), Some(4.0));
        assert_eq!(row.target_band_share(), Some(1.0));

        let m = compute_transition_matrix(8, &[]).unwrap();
        assert_eq!(m.rows.len(), 4);
        for row in &m.rows {
            assert!(row.is_empty());
            assert_eq!(row.mean_child(), None);
            assert_eq!(row.target_band_share(), None);
        }

        let bal = classify_bucket(4, 8).unwrap();
        assert!(compute_transition_matrix(8, &[(bal, 4)]).is_err());
        assert!(compute_transition_matrix(8, &[(h1, 9)]).is_err());
    }

    #[test]
    fn rows_sum_to_one() {
        let h2 = classify_bucket(2, 8).unwrap();
        let pairs: Vec<_> = (0..57u32).map(|i| (h2, (i * 7) % 9)).collect();
        let m = compute_transition_matrix(8, &pairs).unwrap();
        let sum: f64 = m.row(h2).unwrap().probabilities().unwrap().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
}
