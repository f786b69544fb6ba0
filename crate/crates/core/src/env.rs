//! Synthetic environment standing in for policy rollouts.
//!
//! Each task has a base logit `b` (fresh pass probability `logistic(b)`) and a
//! prefix sensitivity `s >= 0`. Replaying the first `M` of `T` steps of a saved
//! trajectory shifts the continuation logit by `+s*M/T` for a successful
//! prefix and `-s*M/T` for a failing one. That monotone response is the only
//! assumption the prefix controller relies on.
//!
//! Randomness is split into independent ChaCha streams keyed by
//! `(seed, purpose, task, step, rollout)`, so groups can be sampled in any
//! order or in parallel and still come out bit-identical.

use std::ops::RangeInclusive;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::controller::{Outcome, PrefixRecord};
use crate::group::{Origin, RolloutGroup, TaskId, TrajectoryRef};
use crate::{Error, Result};

/// Opaque identifier of one environment-interaction step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StepId(pub u64);

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of [`logistic`]; `0` and `1` map to `-inf` and `+inf`.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Purpose tags keeping the random streams of different consumers disjoint.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub(crate) enum Stream {
    Fresh = 1,
    Rerollout = 2,
    Batch = 3,
    Population = 4,
    AuditPolicy = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for one `(seed, purpose, a, b, c)` coordinate.
pub(crate) fn stream_rng(seed: u64, stream: Stream, a: u64, b: u64, c: u64) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for part in [stream as u64, a, b, c] {
        h = splitmix64(h ^ part);
    }
    ChaCha8Rng::seed_from_u64(h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    id: TaskId,
    base_logit: f64,
    sensitivity: f64,
    length_range: RangeInclusive<u32>,
}

impl SyntheticTask {
    pub fn new(
        id: TaskId,
        base_logit: f64,
        sensitivity: f64,
        length_range: RangeInclusive<u32>,
    ) -> Result<Self> {
        if base_logit.is_nan() {
            return Err(Error::domain("base logit is NaN"));
        }
        if !(sensitivity >= 0.0 && sensitivity.is_finite()) {
            return Err(Error::domain(format!("prefix sensitivity {sensitivity} must be >= 0")));
        }
        if length_range.is_empty() || *length_range.start() < 2 {
            return Err(Error::domain(format!(
                "trajectory length range {length_range:?} must be nonempty with minimum >= 2"
            )));
        }
        Ok(Self {
            id,
            base_logit,
            sensitivity,
            length_range,
        })
    }

    /// Build from a fresh pass probability instead of a logit.
    pub fn from_pass_probability(
        id: TaskId,
        p0: f64,
        sensitivity: f64,
        length_range: RangeInclusive<u32>,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&p0) {
            return Err(Error::domain(format!("pass probability {p0} outside [0, 1]")));
        }
        Self::new(id, logit(p0), sensitivity, length_range)
    }

    pub fn id(&self) -> TaskId {
        self.id
    }

    pub fn base_logit(&self) -> f64 {
        self.base_logit
    }

    pub fn sensitivity(&self) -> f64 {
        self.sensitivity
    }

    pub fn length_range(&self) -> RangeInclusive<u32> {
        self.length_range.clone()
    }

    /// Fresh pass probability `p0 = logistic(b)`.
    pub fn pass_probability(&self) -> f64 {
        logistic(self.base_logit)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    steps: Vec<StepId>,
    success: bool,
    replay_boundary: usize,
}

impl Trajectory {
    pub fn steps(&self) -> &[StepId] {
        &self.steps
    }

    pub fn success(&self) -> bool {
        self.success
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Number of leading steps copied from a saved prefix; 0 for fresh rollouts.
    pub fn replay_boundary(&self) -> usize {
        self.replay_boundary
    }
}

/// A sampled group together with the trajectories its handles point into.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSample {
    pub group: RolloutGroup,
    pub trajectories: Vec<Trajectory>,
}

impl GroupSample {
    pub fn trajectory(&self, handle: TrajectoryRef) -> Option<&Trajectory> {
        self.trajectories.get(handle.0 as usize)
    }
}

fn fresh_steps(rng: &mut ChaCha8Rng, len: u32) -> impl Iterator<Item = StepId> + '_ {
    (0..len).map(move |_| StepId(rng.random()))
}

fn refs(n: u32) -> Vec<TrajectoryRef> {
    (0..n).map(TrajectoryRef).collect()
}

/// `N` independent fresh rollouts of `task` at training step `step`.
pub fn sample_fresh_group(task: &SyntheticTask, n: u32, seed: u64, step: u64) -> Result<GroupSample> {
    if n < 2 {
        return Err(Error::domain("group size must be at least 2"));
    }
    let p0 = task.pass_probability();
    let trajectories: Vec<Trajectory> = (0..n)
        .map(|i| {
            let mut rng = stream_rng(seed, Stream::Fresh, u64::from(task.id.0), step, u64::from(i));
            let success = rng.random_bool(p0);
            let len = rng.random_range(task.length_range.clone());
            let steps = fresh_steps(&mut rng, len).collect();
            Trajectory {
                steps,
                success,
                replay_boundary: 0,
            }
        })
        .collect();
    let rewards = trajectories.iter().map(|t| t.success).collect();
    let group = RolloutGroup::new(task.id, rewards, Origin::Fresh, None, refs(n))?;
    Ok(GroupSample {
        group,
        trajectories,
    })
}

/// Continuation pass probability after replaying a fraction `ratio` of a
/// prefix with the given outcome.
pub fn conditioned_pass_probability(task: &SyntheticTask, outcome: Outcome, ratio: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::domain(format!("prefix ratio {ratio} outside [0, 1]")));
    }
    let shift = task.sensitivity * ratio;
    let x = match outcome {
        Outcome::Success => task.base_logit + shift,
        Outcome::Failure => task.base_logit - shift,
    };
    Ok(logistic(x))
}

/// `N` rollouts that each replay the first `m` steps of `prefix` and then
/// continue with fresh steps.
pub fn sample_rerollout_group(
    task: &SyntheticTask,
    prefix: &PrefixRecord,
    m: usize,
    n: u32,
    seed: u64,
    step: u64,
) -> Result<GroupSample> {
    if n < 2 {
        return Err(Error::domain("group size must be at least 2"));
    }
    if prefix.task_id() != task.id {
        return Err(Error::contract(format!(
            "prefix of task {} replayed on task {}",
            prefix.task_id(),
            task.id
        )));
    }
    let t = prefix.len();
    if m < 1 || m >= t {
        return Err(Error::contract(format!(
            "replay boundary {m} outside [1, {t}) for a {t}-step prefix"
        )));
    }
    let q = conditioned_pass_probability(task, prefix.outcome(), m as f64 / t as f64)?;
    let head = &prefix.steps()[..m];
    let trajectories: Vec<Trajectory> = (0..n)
        .map(|i| {
            let mut rng =
                stream_rng(seed, Stream::Rerollout, u64::from(task.id.0), step, u64::from(i));
            let success = rng.random_bool(q);
            let len = rng.random_range(task.length_range.clone());
            let mut steps = Vec::with_capacity(m + len as usize);
            steps.extend_from_slice(head);
            steps.extend(fresh_steps(&mut rng, len));
            Trajectory {
                steps,
                success,
                replay_boundary: m,
            }
        })
        .collect();
    let rewards = trajectories.iter().map(|t| t.success).collect();
    let group = RolloutGroup::new(
        task.id,
        rewards,
        Origin::Rerollout,
        Some(prefix.source_bucket()),
        refs(n),
    )?;
    Ok(GroupSample {
        group,
        trajectories,
    })
}

/// One mode of the population's difficulty mixture, in logit space.
#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyComponent {
    pub weight: f64,
    pub base_logit_mean: f64,
    pub base_logit_sd: f64,
}

/// Distribution the task population is drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSpec {
    pub size: usize,
    pub components: Vec<DifficultyComponent>,
    pub sensitivity_mean: f64,
    pub sensitivity_sd: f64,
    pub length_range: RangeInclusive<u32>,
    /// Negate every base logit, i.e. swap `p0` and `1 - p0`.
    pub mirror: bool,
}

impl PopulationSpec {
    /// Mostly hard tasks plus a smaller easy cluster: about half of fresh
    /// groups are degenerate and few land in the 3/8–5/8 band, while every
    /// hard and easy bucket still sees steady traffic.
    pub fn hard_skewed(size: usize) -> Self {
        Self {
            size,
            components: vec![
                DifficultyComponent {
                    weight: 0.60,
                    base_logit_mean: -2.5,
                    base_logit_sd: 0.25,
                },
                DifficultyComponent {
                    weight: 0.35,
                    base_logit_mean: 2.5,
                    base_logit_sd: 0.25,
                },
                DifficultyComponent {
                    weight: 0.05,
                    base_logit_mean: 0.0,
                    base_logit_sd: 0.5,
                },
            ],
            sensitivity_mean: 3.5,
            sensitivity_sd: 0.0,
            length_range: 8..=32,
            mirror: false,
        }
    }

    /// Every task shares fresh pass probability `p0` and sensitivity `s`.
    pub fn point(size: usize, p0: f64, sensitivity: f64) -> Self {
        Self {
            size,
            components: vec![DifficultyComponent {
                weight: 1.0,
                base_logit_mean: logit(p0),
                base_logit_sd: 0.0,
            }],
            sensitivity_mean: sensitivity,
            sensitivity_sd: 0.0,
            length_range: 8..=32,
            mirror: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.size == 0 || self.components.is_empty() {
            return Err(Error::domain("population spec is empty"));
        }
        for c in &self.components {
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::domain(format!("component weight {} must be > 0", c.weight)));
            }
            if c.base_logit_mean.is_nan() || !(c.base_logit_sd >= 0.0 && c.base_logit_sd.is_finite()) {
                return Err(Error::domain("component logit mean/sd invalid"));
            }
        }
        if !(self.sensitivity_mean >= 0.0 && self.sensitivity_mean.is_finite())
            || !(self.sensitivity_sd >= 0.0 && self.sensitivity_sd.is_finite())
        {
            return Err(Error::domain("sensitivity mean/sd must be finite and >= 0"));
        }
        if self.length_range.is_empty() || *self.length_range.start() < 2 {
            return Err(Error::domain("length range must be nonempty with minimum >= 2"));
        }
        Ok(())
    }
}

fn draw_normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return mean;
    }
    Normal::new(mean, sd).expect("validated sd").sample(rng)
}

/// Draw the task population. Task `i` gets id `i` and its own random stream.
pub fn make_task_population(spec: &PopulationSpec, seed: u64) -> Result<Vec<SyntheticTask>> {
    spec.validate()?;
    let weights = WeightedIndex::new(spec.components.iter().map(|c| c.weight))
        .map_err(|e| Error::domain(format!("component weights: {e}")))?;
    (0..spec.size)
        .map(|i| {
            let mut rng = stream_rng(seed, Stream::Population, i as u64, 0, 0);
            let comp = &spec.components[weights.sample(&mut rng)];
            let mut b = draw_normal(&mut rng, comp.base_logit_mean, comp.base_logit_sd);
            if spec.mirror {
                b = -b;
            }
            let s = draw_normal(&mut rng, spec.sensitivity_mean, spec.sensitivity_sd).max(0.0);
            SyntheticTask::new(TaskId(i as u32), b, s, spec.length_range.clone())
        })
        .collect()
}
