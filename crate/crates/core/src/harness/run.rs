//! Closed-loop experiment driver.
//!
//! Each step: draw a batch of tasks, sample fresh groups (in parallel),
//! route them by pass count, save prefixes from skewed groups, replay the
//! due prefixes one at a time in `(task, bucket)` order while updating the
//! bucket controllers, then audit the mixed batch and record metrics.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::advantage::{masked_grpo_loss, rloo_advantages, TokenTrajectory, ToyPolicy};
use crate::controller::{replay_boundary, select_prefix, ControllerBank, PrefixPool};
use crate::env::{make_task_population, sample_fresh_group, sample_rerollout_group, stream_rng, GroupSample, Stream};
use crate::group::{classify_bucket, pass_count, skewed_buckets, Bucket, GroupRecord, Origin, RolloutGroup};
use crate::signal::{contrastive_pair_count, rloo_advantage_energy};
use crate::Result;

use super::config::{ExperimentConfig, RatioSource, RerolloutTiming};
use super::metrics::{compute_step_metrics, AuditMetrics, StepMetrics, TransitionMatrix};

const AUDIT_CONTEXTS: usize = 4;
const AUDIT_VOCAB: usize = 16;
const AUDIT_POSITIONS_PER_CONTEXT: usize = 8;

/// Controller state of one bucket at the end of a step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControllerTraceRow {
    pub step: u64,
    pub bucket: Bucket,
    pub ratio: f64,
    pub ema: f64,
    pub cooldown_remaining: u32,
}

/// One line of `run.jsonl`: a group plus the shape of its trajectories.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    #[serde(flatten)]
    pub group: GroupRecord,
    pub lengths: Vec<usize>,
    /// Replayed steps per trajectory; absent for fresh groups.
    pub replay_boundary: Option<usize>,
    /// Ratio that produced the boundary; absent for fresh groups.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub metrics: Vec<StepMetrics>,
    pub controller_trace: Vec<ControllerTraceRow>,
    pub transitions: TransitionMatrix,
    pub records: Vec<RunRecord>,
    /// Controller states after the last step, in bucket order.
    pub final_states: Vec<ControllerTraceRow>,
}

impl RunOutput {
    /// Mean rerollout pass rate of `bucket` over groups from steps `>= from_step`.
    pub fn bucket_mean_pass_rate(&self, bucket: Bucket, from_step: u64) -> Option<f64> {
        let rates: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.group.step >= from_step && r.group.parent_bucket == Some(bucket))
            .map(|r| {
                let k: u32 = r.group.rewards.iter().map(|&x| u32::from(x)).sum();
                f64::from(k) / r.group.rewards.len() as f64
            })
            .collect();
        (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
    }

    pub fn mean_valid_groups(&self) -> Option<f64> {
        (!self.metrics.is_empty()).then(|| {
            self.metrics.iter().map(|m| m.valid_groups as f64).sum::<f64>() / self.metrics.len() as f64
        })
    }
}

fn audit_policy(seed: u64) -> Result<ToyPolicy> {
    let mut rng = stream_rng(seed, Stream::AuditPolicy, 0, 0, 0);
    let logits = (0..AUDIT_CONTEXTS * AUDIT_VOCAB)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    ToyPolicy::new(AUDIT_CONTEXTS, AUDIT_VOCAB, AUDIT_POSITIONS_PER_CONTEXT, logits)
}

fn audit(samples: &[&GroupSample], policy: &ToyPolicy, cfg: &ExperimentConfig) -> Result<AuditMetrics> {
    let mut out = AuditMetrics::default();
    if samples.is_empty() {
        return Ok(out);
    }
    let n = cfg.group_size;
    for s in samples {
        let k = pass_count(&s.group);
        let advantages = rloo_advantages(s.group.rewards())?;
        let trajectories = s
            .group
            .trajectory_refs()
            .iter()
            .map(|&h| {
                let t = s.trajectory(h).expect("sample owns its trajectories");
                let tokens = t.steps().iter().map(|id| (id.0 % AUDIT_VOCAB as u64) as u32).collect();
                TokenTrajectory::new(tokens, t.replay_boundary())
            })
            .collect::<Result<Vec<_>>>()?;
        out.trainable_steps += trajectories.iter().map(|t| t.trainable_tokens() as u64).sum::<u64>();
        out.surrogate_loss += masked_grpo_loss(&trajectories, &advantages, policy, cfg.loss)?;
        out.advantage_energy += rloo_advantage_energy(k, n)?;
        out.contrastive_pairs += contrastive_pair_count(k, n)?;
    }
    out.advantage_energy /= samples.len() as f64;
    Ok(out)
}

fn trace_rows(step: u64, bank: &ControllerBank) -> Vec<ControllerTraceRow> {
    bank.states()
        .map(|s| ControllerTraceRow {
            step,
            bucket: s.bucket,
            ratio: s.ratio,
            ema: s.ema,
            cooldown_remaining: s.cooldown_remaining,
        })
        .collect()
}

fn record(sample: &GroupSample, step: u64, ratio: Option<f64>) -> RunRecord {
    let boundary = match sample.group.origin() {
        Origin::Fresh => None,
        Origin::Rerollout => sample.trajectories.first().map(|t| t.replay_boundary()),
    };
    RunRecord {
        group: sample.group.record(step),
        lengths: sample.trajectories.iter().map(|t| t.len()).collect(),
        replay_boundary: boundary,
        ratio,
    }
}

/// Run one arm for `cfg.steps` steps. Deterministic in `cfg`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let n = cfg.group_size;
    let population = make_task_population(&cfg.population.spec(), cfg.seed)?;
    let controlled: Vec<Bucket> = skewed_buckets(n)?
        .into_iter()
        .filter(|&b| cfg.arm.replays(b))
        .collect();
    let mut bank = ControllerBank::new(cfg.effective_controller(), controlled)?;
    let policy = audit_policy(cfg.seed)?;
    let mut pool = PrefixPool::new();
    let mut transitions = TransitionMatrix::empty(n)?;
    let mut metrics = Vec::with_capacity(cfg.steps as usize);
    let mut controller_trace = Vec::new();
    let mut records = Vec::new();

    for step in 0..cfg.steps {
        let mut rng = stream_rng(cfg.seed, Stream::Batch, step, 0, 0);
        let mut picked = rand::seq::index::sample(&mut rng, population.len(), cfg.batch_size).into_vec();
        picked.sort_unstable();

        let fresh: Vec<GroupSample> = picked
            .par_iter()
            .map(|&i| sample_fresh_group(&population[i], n, cfg.seed, step))
            .collect::<Result<_>>()?;

        let mut due = match cfg.rerollout {
            RerolloutTiming::NextStep => pool.drain(),
            RerolloutTiming::SameStep => Vec::new(),
        };
        for s in &fresh {
            let bucket = classify_bucket(pass_count(&s.group), n)?;
            if cfg.arm.replays(bucket) {
                if let Some(prefix) = select_prefix(&s.group, &s.trajectories)? {
                    pool.insert(prefix);
                }
            }
        }
        if cfg.rerollout == RerolloutTiming::SameStep {
            due = pool.drain();
        }

        let snapshot: BTreeMap<Bucket, f64> = bank.states().map(|s| (s.bucket, s.ratio)).collect();
        let mut rerollouts = Vec::with_capacity(due.len());
        for prefix in due {
            let bucket = prefix.source_bucket();
            let ratio = match cfg.ratio_source {
                RatioSource::Live => bank.ratio(bucket),
                RatioSource::Snapshot => snapshot.get(&bucket).copied(),
            }
            .expect("prefixes only come from controlled buckets");
            let Some(m) = replay_boundary(ratio, prefix.len()) else {
                continue;
            };
            let task = &population[prefix.task_id().0 as usize];
            let sample = sample_rerollout_group(task, &prefix, m, n, cfg.seed, step)?;
            let k = pass_count(&sample.group);
            bank.observe(bucket, f64::from(k) / f64::from(n))?;
            transitions.record(bucket, k)?;
            rerollouts.push((sample, ratio));
        }
        bank.tick_step();

        let mut groups: Vec<RolloutGroup> = fresh.iter().map(|s| s.group.clone()).collect();
        groups.extend(rerollouts.iter().map(|(s, _)| s.group.clone()));
        let mut step_metrics = compute_step_metrics(step, &groups)?;

        let mixed: Vec<&GroupSample> = fresh
            .iter()
            .chain(rerollouts.iter().map(|(s, _)| s))
            .filter(|s| !s.group.is_degenerate())
            .collect();
        step_metrics.audit = audit(&mixed, &policy, cfg)?;
        metrics.push(step_metrics);

        records.extend(fresh.iter().map(|s| record(s, step, None)));
        records.extend(rerollouts.iter().map(|(s, r)| record(s, step, Some(*r))));
        controller_trace.extend(trace_rows(step, &bank));
    }

    Ok(RunOutput {
        metrics,
        controller_trace,
        transitions,
        records,
        final_states: trace_rows(cfg.steps, &bank),
    })
}
