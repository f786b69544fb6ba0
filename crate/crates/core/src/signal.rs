//! Reward-side signal carried by a group of `N` binary-reward rollouts.
//!
//! Two families of quantities live here: ones parameterised by the pass
//! probability `p` before sampling (entropy, survival, expected pair count),
//! and ones parameterised by the observed pass count `k` (RLOO energy,
//! contrastive pairs, mean-centred variance). All of them peak at `p = 0.5`
//! or `k = N/2`.

use serde::Serialize;

use crate::{Error, Result};

fn check_probability(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::domain(format!("probability {p} outside [0, 1]")))
    }
}

fn check_count(k: u32, n: u32) -> Result<()> {
    if k <= n {
        Ok(())
    } else {
        Err(Error::domain(format!("pass count {k} exceeds group size {n}")))
    }
}

/// Bernoulli entropy in bits, with `0 * log2(0) = 0`.
pub fn reward_entropy(p: f64) -> Result<f64> {
    check_probability(p)?;
    let term = |x: f64| if x > 0.0 { -x * x.log2() } else { 0.0 };
    Ok(term(p) + term(1.0 - p))
}

/// Probability that a group of `n` Bernoulli(`p`) rollouts is neither
/// all-fail nor all-pass: `1 - (1-p)^n - p^n`.
pub fn group_survival_probability(p: f64, n: u32) -> Result<f64> {
    check_probability(p)?;
    if n < 1 {
        return Err(Error::domain("group size must be at least 1"));
    }
    // A single rollout is always degenerate.
    if n == 1 {
        return Ok(0.0);
    }
    let n = n as i32;
    Ok((1.0 - (1.0 - p).powi(n) - p.powi(n)).max(0.0))
}

/// Mean squared leave-one-out advantage of a group with `k` successes:
/// `k(N-k)/(N-1)^2`.
pub fn rloo_advantage_energy(k: u32, n: u32) -> Result<f64> {
    if n < 2 {
        return Err(Error::domain("RLOO needs a group size of at least 2"));
    }
    check_count(k, n)?;
    let denom = f64::from(n - 1);
    Ok(f64::from(k) * f64::from(n - k) / (denom * denom))
}

/// Number of success/failure pairs in a group: `k(N-k)`.
pub fn contrastive_pair_count(k: u32, n: u32) -> Result<u64> {
    check_count(k, n)?;
    Ok(u64::from(k) * u64::from(n - k))
}

/// Largest attainable pair count for group size `n` (at `k = floor(n/2)`).
pub fn max_pair_count(n: u32) -> u64 {
    let lo = u64::from(n / 2);
    lo * (u64::from(n) - lo)
}

/// `E[K(N-K)]` for `K ~ Binomial(N, p)`, which is `N(N-1)p(1-p)`.
pub fn expected_pair_count(p: f64, n: u32) -> Result<f64> {
    check_probability(p)?;
    if n < 2 {
        return Err(Error::domain("expected pair count needs a group size of at least 2"));
    }
    let n = f64::from(n);
    Ok(n * (n - 1.0) * p * (1.0 - p))
}

/// Within-group variance of mean-centred advantages: `p̂(1-p̂)` with `p̂ = k/N`.
pub fn mean_centered_advantage_variance(k: u32, n: u32) -> Result<f64> {
    if n < 1 {
        return Err(Error::domain("group size must be at least 1"));
    }
    check_count(k, n)?;
    let p_hat = f64::from(k) / f64::from(n);
    Ok(p_hat * (1.0 - p_hat))
}

/// All signal quantities for one observed group. Entropy and survival are
/// evaluated at the empirical pass rate `k/N`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignalReport {
    pub pass_count: u32,
    pub group_size: u32,
    pub entropy_bits: f64,
    pub survival_prob: f64,
    pub rloo_energy: f64,
    pub pair_count: u64,
    pub pair_count_relative: f64,
}

pub fn signal_report(k: u32, n: u32) -> Result<SignalReport> {
    if n < 2 {
        return Err(Error::domain("signal report needs a group size of at least 2"));
    }
    check_count(k, n)?;
    let p_hat = f64::from(k) / f64::from(n);
    let pair_count = contrastive_pair_count(k, n)?;
    Ok(SignalReport {
        pass_count: k,
        group_size: n,
        entropy_bits: reward_entropy(p_hat)?,
        survival_prob: group_survival_probability(p_hat, n)?,
        rloo_energy: rloo_advantage_energy(k, n)?,
        pair_count,
        pair_count_relative: pair_count as f64 / max_pair_count(n) as f64,
    })
}
