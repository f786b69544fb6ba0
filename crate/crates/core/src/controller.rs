//! Prefix selection, the prefix pool and the per-bucket ratio controller.
//!
//! Hard groups save a successful trajectory as a prefix, easy groups save a
//! failing one. Each hard/easy bucket owns a prefix ratio `r_b`; the replay
//! boundary of a `T`-step prefix is `M = floor(r_b * T)`. After every
//! rerollout group from bucket `b` completes, its pass rate feeds an EMA
//! `p̂_b`, and when `p̂_b` leaves the deadzone around the target, `r_b` moves
//! one step toward the target and a cooldown starts.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::env::{StepId, Trajectory};
use crate::group::{classify_bucket, pass_count, Bucket, Origin, RolloutGroup, TaskId};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
}

/// A saved trajectory eligible for replay.
///
/// Hard-bucket prefixes are always successes and easy-bucket prefixes are
/// always failures.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixRecord {
    task_id: TaskId,
    source_bucket: Bucket,
    outcome: Outcome,
    steps: Vec<StepId>,
}

impl PrefixRecord {
    pub fn new(task_id: TaskId, source_bucket: Bucket, outcome: Outcome, steps: Vec<StepId>) -> Result<Self> {
        let expected = if source_bucket.is_hard() {
            Outcome::Success
        } else if source_bucket.is_easy() {
            Outcome::Failure
        } else {
            return Err(Error::contract(format!(
                "bucket {source_bucket} does not seed prefixes"
            )));
        };
        if outcome != expected {
            return Err(Error::contract(format!(
                "bucket {source_bucket} must save a {expected:?} prefix, got {outcome:?}"
            )));
        }
        if steps.is_empty() {
            return Err(Error::contract("prefix has no steps"));
        }
        Ok(Self {
            task_id,
            source_bucket,
            outcome,
            steps,
        })
    }

    pub fn task_id(&self) -> TaskId {
        self.task_id
    }

    pub fn source_bucket(&self) -> Bucket {
        self.source_bucket
    }

    pub fn outcome(&self) -> Outcome {
        self.outcome
    }

    pub fn steps(&self) -> &[StepId] {
        &self.steps
    }

    /// Prefix length `T`.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Pick the prefix a fresh, non-degenerate group contributes, if any.
///
/// Among eligible trajectories the lowest rollout index wins.
pub fn select_prefix(group: &RolloutGroup, trajectories: &[Trajectory]) -> Result<Option<PrefixRecord>> {
    if group.origin() == Origin::Rerollout {
        return Err(Error::contract("rerollout groups do not seed prefixes"));
    }
    let bucket = classify_bucket(pass_count(group), group.size())?;
    let (want, outcome) = if bucket.is_hard() {
        (true, Outcome::Success)
    } else if bucket.is_easy() {
        (false, Outcome::Failure)
    } else if bucket.is_degenerate() {
        return Err(Error::contract("degenerate groups do not seed prefixes"));
    } else {
        return Ok(None);
    };
    let idx = group
        .rewards()
        .iter()
        .position(|&r| r == want)
        .expect("skewed group has both outcomes");
    let handle = group.trajectory_refs()[idx];
    let traj = trajectories
        .get(handle.0 as usize)
        .ok_or_else(|| Error::contract(format!("dangling trajectory handle {}", handle.0)))?;
    if traj.success() != want {
        return Err(Error::contract("trajectory outcome disagrees with group reward"));
    }
    PrefixRecord::new(group.task_id(), bucket, outcome, traj.steps().to_vec()).map(Some)
}

/// Replay boundary `M = floor(ratio * len)`, clamped to `[1, len - 1]` so the
/// rerollout both replays and generates at least one step. Prefixes shorter
/// than two steps are not replayed.
pub fn replay_boundary(ratio: f64, len: usize) -> Option<usize> {
    if len < 2 {
        return None;
    }
    let m = (ratio * len as f64).floor().max(0.0) as usize;
    Some(m.clamp(1, len - 1))
}

/// What a cooldown is counted in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CooldownUnit {
    /// Controller updates of the same bucket.
    #[default]
    Updates,
    /// Training steps.
    Steps,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerParams {
    pub alpha: f64,
    pub deadzone: f64,
    pub step: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub cooldown: u32,
    pub cooldown_unit: CooldownUnit,
    pub initial_ratio: f64,
    pub initial_ema: f64,
    pub target: f64,
}

impl Default for ControllerParams {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            deadzone: 0.03,
            step: 0.05,
            min_ratio: 0.05,
            max_ratio: 0.95,
            cooldown: 5,
            cooldown_unit: CooldownUnit::Updates,
            initial_ratio: 0.5,
            initial_ema: 0.5,
            target: 0.5,
        }
    }
}

impl ControllerParams {
    /// Returns `(field, message)` for the first invalid field.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        let unit = |name, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err((name, format!("{v} outside [0, 1]")))
            }
        };
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(("alpha", format!("{} outside (0, 1]", self.alpha)));
        }
        unit("deadzone", self.deadzone)?;
        unit("step", self.step)?;
        unit("min_ratio", self.min_ratio)?;
        unit("max_ratio", self.max_ratio)?;
        unit("initial_ema", self.initial_ema)?;
        unit("target", self.target)?;
        if self.min_ratio > self.max_ratio {
            return Err(("min_ratio", "exceeds max_ratio".into()));
        }
        if !(self.min_ratio..=self.max_ratio).contains(&self.initial_ratio) {
            return Err(("initial_ratio", format!("{} outside ratio bounds", self.initial_ratio)));
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|(field, msg)| Error::domain(format!("controller {field}: {msg}")))
    }
}

/// Controller state of one hard or easy bucket.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketControllerState {
    pub bucket: Bucket,
    pub ratio: f64,
    pub ema: f64,
    pub cooldown_remaining: u32,
    pub updates_seen: u64,
}

impl BucketControllerState {
    pub fn new(bucket: Bucket, params: &ControllerParams) -> Result<Self> {
        params.validate()?;
        if !bucket.is_skewed() {
            return Err(Error::contract(format!("bucket {bucket} has no controller")));
        }
        Ok(Self {
            bucket,
            ratio: params.initial_ratio,
            ema: params.initial_ema,
            cooldown_remaining: 0,
            updates_seen: 0,
        })
    }

    /// Fold in one completed rerollout's pass rate.
    pub fn update(&self, p_new: f64, params: &ControllerParams) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_new) {
            return Err(Error::domain(format!("observed pass rate {p_new} outside [0, 1]")));
        }
        let mut next = self.clone();
        next.updates_seen += 1;
        next.ema = (1.0 - params.alpha) * self.ema + params.alpha * p_new;

        if next.cooldown_remaining > 0 {
            if params.cooldown_unit == CooldownUnit::Updates {
                next.cooldown_remaining -= 1;
            }
            return Ok(next);
        }

        // +1 means "raise the pass rate". Hard buckets raise it by replaying
        // more of a success, easy buckets by replaying less of a failure.
        let push = if next.ema > params.target + params.deadzone {
            -1.0
        } else if next.ema < params.target - params.deadzone {
            1.0
        } else {
            return Ok(next);
        };
        let dir = if self.bucket.is_hard() { push } else { -push };
        let ratio = (self.ratio + dir * params.step).clamp(params.min_ratio, params.max_ratio);
        if ratio != self.ratio {
            next.ratio = ratio;
            next.cooldown_remaining = params.cooldown;
        }
        Ok(next)
    }

    /// End-of-step hook; only counts down when cooldowns are in steps.
    pub fn tick_step(&self, params: &ControllerParams) -> Self {
        let mut next = self.clone();
        if params.cooldown_unit == CooldownUnit::Steps {
            next.cooldown_remaining = next.cooldown_remaining.saturating_sub(1);
        }
        next
    }
}

pub fn update_controller(
    state: &BucketControllerState,
    p_new: f64,
    params: &ControllerParams,
) -> Result<BucketControllerState> {
    state.update(p_new, params)
}

/// The set of independent per-bucket controllers used by one run.
#[derive(Debug, Clone)]
pub struct ControllerBank {
    params: ControllerParams,
    states: BTreeMap<Bucket, BucketControllerState>,
}

impl ControllerBank {
    pub fn new(params: ControllerParams, buckets: impl IntoIterator<Item = Bucket>) -> Result<Self> {
        let states = buckets
            .into_iter()
            .map(|b| BucketControllerState::new(b, &params).map(|s| (b, s)))
            .collect::<Result<_>>()?;
        Ok(Self { params, states })
    }

    pub fn params(&self) -> &ControllerParams {
        &self.params
    }

    pub fn get(&self, bucket: Bucket) -> Option<&BucketControllerState> {
        self.states.get(&bucket)
    }

    pub fn ratio(&self, bucket: Bucket) -> Option<f64> {
        self.states.get(&bucket).map(|s| s.ratio)
    }

    pub fn is_controlled(&self, bucket: Bucket) -> bool {
        self.states.contains_key(&bucket)
    }

    /// Update one bucket. Other buckets are not touched.
    pub fn observe(&mut self, bucket: Bucket, p_new: f64) -> Result<()> {
        let state = self
            .states
            .get_mut(&bucket)
            .ok_or_else(|| Error::contract(format!("no controller for bucket {bucket}")))?;
        *state = state.update(p_new, &self.params)?;
        Ok(())
    }

    pub fn tick_step(&mut self) {
        for state in self.states.values_mut() {
            *state = state.tick_step(&self.params);
        }
    }

    /// States in bucket order.
    pub fn states(&self) -> impl Iterator<Item = &BucketControllerState> {
        self.states.values()
    }
}

/// Saved prefixes awaiting replay: one per `(task, bucket)`, newest wins,
/// removed once consumed.
#[derive(Debug, Clone, Default)]
pub struct PrefixPool {
    records: BTreeMap<(TaskId, Bucket), PrefixRecord>,
}

impl PrefixPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Store `record`, returning the one it replaced.
    pub fn insert(&mut self, record: PrefixRecord) -> Option<PrefixRecord> {
        self.records
            .insert((record.task_id(), record.source_bucket()), record)
    }

    pub fn take(&mut self, task: TaskId, bucket: Bucket) -> Option<PrefixRecord> {
        self.records.remove(&(task, bucket))
    }

    /// Consume every stored prefix in `(task, bucket)` order.
    pub fn drain(&mut self) -> Vec<PrefixRecord> {
        std::mem::take(&mut self.records).into_values().collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

pub const BYTES_PER_TOKEN: f64 = 4.0;
pub const MIB: f64 = 1024.0 * 1024.0;

/// Upper bound in bytes on a text prefix pool holding one maximal prefix per
/// batch entry: `batch * (max_prompt + 0.95 * max_response)` int32 token ids.
pub fn prefix_pool_memory_bound(batch_size: u64, max_prompt: u64, max_response: u64) -> f64 {
    batch_size as f64 * (max_prompt as f64 + 0.95 * max_response as f64) * BYTES_PER_TOKEN
}
