//! Rollout pass-rate control and prefix sampling for grouped binary-reward RL.
//!
//! The crate is organised bottom-up:
//!
//! - [`signal`]: closed-form signal quantities of a binary-reward group
//!   (reward entropy, survival under group filtering, RLOO advantage energy,
//!   contrastive pair counts).
//! - [`group`]: rollout groups, pass-count buckets, group filtering and the
//!   distance-to-balance metric.
//! - [`advantage`]: RLOO / mean-centred advantages, prefix masking and the
//!   masked policy-gradient surrogate on a small differentiable toy policy.
//! - [`controller`]: prefix selection, the prefix pool, replay boundaries and
//!   the per-bucket EMA controller that steers rerollout pass rates to 0.5.
//! - [`env`]: a synthetic environment whose prefix-conditioned pass rate
//!   responds monotonically to the replayed prefix.
//! - [`harness`]: the closed-loop experiment driver, metrics, configuration
//!   and trace emission used by the `prefix-sampling` CLI.

pub mod advantage;
pub mod controller;
pub mod env;
mod error;
pub mod group;
pub mod harness;
pub mod signal;

pub use error::{Error, Result};
