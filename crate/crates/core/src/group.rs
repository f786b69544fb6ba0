//! Rollout groups and pass-count routing.
//!
//! A group is routed by its pass count `k` into one of four classes. For
//! `N = 8` the partition is `{0, 8}` degenerate, `{1, 2}` hard, `{3, 4, 5}`
//! balanced and `{6, 7}` easy. Other even group sizes scale the hard and easy
//! bands by quarters: hard is `1..=ceil(N/4)`, easy is its mirror image.

use std::fmt;

use serde::{Serialize, Serializer};

use crate::{Error, Result};

/// Identifier of a task in the synthetic population.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct TaskId(pub u32);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Opaque handle to a trajectory owned by the environment's group sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TrajectoryRef(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Fresh,
    Rerollout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BucketClass {
    Degenerate,
    Hard,
    Balanced,
    Easy,
}

/// A pass-count bucket. For `N = 8` the variants are `degenerate0`, `hard1`,
/// `hard2`, `balanced{3,4,5}`, `easy6`, `easy7` and `degenerate8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Bucket {
    class: BucketClass,
    pass_count: u32,
}

impl Bucket {
    pub fn class(&self) -> BucketClass {
        self.class
    }

    pub fn pass_count(&self) -> u32 {
        self.pass_count
    }

    pub fn is_degenerate(&self) -> bool {
        self.class == BucketClass::Degenerate
    }

    pub fn is_hard(&self) -> bool {
        self.class == BucketClass::Hard
    }

    pub fn is_easy(&self) -> bool {
        self.class == BucketClass::Easy
    }

    /// Hard and easy buckets seed prefixes and carry a controller.
    pub fn is_skewed(&self) -> bool {
        self.is_hard() || self.is_easy()
    }

    /// Stable lowercase label, e.g. `hard1` or `easy7`.
    pub fn label(&self) -> String {
        let class = match self.class {
            BucketClass::Degenerate => "degenerate",
            BucketClass::Hard => "hard",
            BucketClass::Balanced => "balanced",
            BucketClass::Easy => "easy",
        };
        format!("{class}{}", self.pass_count)
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl Serialize for Bucket {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.label())
    }
}

/// Width of the hard (and easy) band for an even group size.
fn skew_width(n: u32) -> u32 {
    n.div_ceil(4)
}

/// Route a pass count to its bucket. `n` must be even and at least 4.
pub fn classify_bucket(k: u32, n: u32) -> Result<Bucket> {
    if n < 4 || !n.is_multiple_of(2) {
        return Err(Error::domain(format!(
            "bucket routing needs an even group size >= 4, got {n}"
        )));
    }
    if k > n {
        return Err(Error::domain(format!("pass count {k} exceeds group size {n}")));
    }
    let q = skew_width(n);
    let class = if k == 0 || k == n {
        BucketClass::Degenerate
    } else if k <= q {
        BucketClass::Hard
    } else if k >= n - q {
        BucketClass::Easy
    } else {
        BucketClass::Balanced
    };
    Ok(Bucket {
        class,
        pass_count: k,
    })
}

/// The hard and easy buckets for group size `n`, in pass-count order.
pub fn skewed_buckets(n: u32) -> Result<Vec<Bucket>> {
    let mut out = Vec::new();
    for k in 0..=n {
        let b = classify_bucket(k, n)?;
        if b.is_skewed() {
            out.push(b);
        }
    }
    Ok(out)
}

/// `|k - N/2|`. Odd `N` gives a half-integer target.
pub fn pass_count_distance(k: u32, n: u32) -> f64 {
    (f64::from(k) - f64::from(n) / 2.0).abs()
}

/// One task's `N` binary-reward rollouts plus where they came from.
///
/// Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    task_id: TaskId,
    rewards: Vec<bool>,
    origin: Origin,
    parent_bucket: Option<Bucket>,
    trajectory_refs: Vec<TrajectoryRef>,
}

impl RolloutGroup {
    pub fn new(
        task_id: TaskId,
        rewards: Vec<bool>,
        origin: Origin,
        parent_bucket: Option<Bucket>,
        trajectory_refs: Vec<TrajectoryRef>,
    ) -> Result<Self> {
        if rewards.is_empty() {
            return Err(Error::contract("a rollout group needs at least one reward"));
        }
        if trajectory_refs.len() != rewards.len() {
            return Err(Error::contract(format!(
                "{} trajectory refs for {} rewards",
                trajectory_refs.len(),
                rewards.len()
            )));
        }
        match (origin, parent_bucket) {
            (Origin::Fresh, None) => {}
            (Origin::Rerollout, Some(b)) if b.is_skewed() => {}
            (Origin::Rerollout, Some(b)) => {
                return Err(Error::contract(format!(
                    "rerollout parent bucket {b} is not a hard or easy bucket"
                )))
            }
            (Origin::Fresh, Some(_)) => {
                return Err(Error::contract("fresh groups carry no parent bucket"))
            }
            (Origin::Rerollout, None) => {
                return Err(Error::contract("rerollout groups need a parent bucket"))
            }
        }
        Ok(Self {
            task_id,
            rewards,
            origin,
            parent_bucket,
            trajectory_refs,
        })
    }

    /// A fresh group whose trajectory handles are the rollout indices.
    pub fn fresh(task_id: TaskId, rewards: Vec<bool>) -> Result<Self> {
        let refs = (0..rewards.len() as u32).map(TrajectoryRef).collect();
        Self::new(task_id, rewards, Origin::Fresh, None, refs)
    }

    pub fn task_id(&self) -> TaskId {
        self.task_id
    }

    pub fn rewards(&self) -> &[bool] {
        &self.rewards
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn parent_bucket(&self) -> Option<Bucket> {
        self.parent_bucket
    }

    pub fn trajectory_refs(&self) -> &[TrajectoryRef] {
        &self.trajectory_refs
    }

    pub fn size(&self) -> u32 {
        self.rewards.len() as u32
    }

    pub fn is_degenerate(&self) -> bool {
        let k = pass_count(self);
        k == 0 || k == self.size()
    }

    /// JSONL audit record for this group at training step `step`.
    pub fn record(&self, step: u64) -> GroupRecord {
        GroupRecord {
            task_id: self.task_id,
            rewards: self.rewards.iter().map(|&r| u8::from(r)).collect(),
            origin: self.origin,
            parent_bucket: self.parent_bucket,
            step,
        }
    }
}

pub fn pass_count(group: &RolloutGroup) -> u32 {
    group.rewards.iter().filter(|&&r| r).count() as u32
}

/// Split a batch into non-degenerate (`0 < k < N`) and degenerate groups,
/// preserving relative order in both halves.
pub fn filter_groups(batch: Vec<RolloutGroup>) -> Result<(Vec<RolloutGroup>, Vec<RolloutGroup>)> {
    if let Some(first) = batch.first() {
        let n = first.size();
        if let Some(bad) = batch.iter().find(|g| g.size() != n) {
            return Err(Error::contract(format!(
                "mixed group sizes in batch: {n} and {}",
                bad.size()
            )));
        }
    }
    Ok(batch.into_iter().partition(|g| !g.is_degenerate()))
}

/// Serialized form of a group: one line of `run.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRecord {
    pub task_id: TaskId,
    pub rewards: Vec<u8>,
    pub origin: Origin,
    pub parent_bucket: Option<Bucket>,
    pub step: u64,
}
