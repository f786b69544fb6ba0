//! Group advantages, prefix masking and the masked policy-gradient surrogate.
//!
//! The surrogate for one group is
//!
//! ```text
//! L = -sum_i A_i * sum_{t >= t_cont(i)} log pi(a_{i,t} | s_{i,t})
//! ```
//!
//! so replayed prefix tokens shape the context but never receive gradient.
//! `pi` here is a [`ToyPolicy`]: one softmax over a small vocabulary per
//! position-bucketed context class, which keeps the gradient exact and cheap
//! to check against finite differences.

use crate::{Error, Result};

/// Leave-one-out advantages: `(N-k)/(N-1)` for successes, `-k/(N-1)` for failures.
pub fn rloo_advantages(rewards: &[bool]) -> Result<Vec<f64>> {
    let n = rewards.len();
    if n < 2 {
        return Err(Error::domain("RLOO advantages need at least 2 rollouts"));
    }
    let k = rewards.iter().filter(|&&r| r).count() as f64;
    let n = n as f64;
    let success = (n - k) / (n - 1.0);
    let failure = -k / (n - 1.0);
    Ok(rewards
        .iter()
        .map(|&r| if r { success } else { failure })
        .collect())
}

/// Mean-centred advantages `r_i - k/N`.
pub fn mean_centered_advantages(rewards: &[bool]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let p_hat = rewards.iter().filter(|&&r| r).count() as f64 / rewards.len() as f64;
    rewards
        .iter()
        .map(|&r| if r { 1.0 - p_hat } else { -p_hat })
        .collect()
}

/// A token sequence with its replay boundary and response mask.
///
/// Invariant: `response_mask[t]` is false for `t < t_cont` and true after.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenTrajectory {
    token_ids: Vec<u32>,
    t_cont: usize,
    response_mask: Vec<bool>,
}

impl TokenTrajectory {
    pub fn new(token_ids: Vec<u32>, t_cont: usize) -> Result<Self> {
        if t_cont > token_ids.len() {
            return Err(Error::domain(format!(
                "replay boundary {t_cont} past trajectory length {}",
                token_ids.len()
            )));
        }
        let response_mask = (0..token_ids.len()).map(|t| t >= t_cont).collect();
        Ok(Self {
            token_ids,
            t_cont,
            response_mask,
        })
    }

    /// An on-policy trajectory with nothing replayed.
    pub fn unmasked(token_ids: Vec<u32>) -> Self {
        let response_mask = vec![true; token_ids.len()];
        Self {
            token_ids,
            t_cont: 0,
            response_mask,
        }
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    pub fn t_cont(&self) -> usize {
        self.t_cont
    }

    pub fn response_mask(&self) -> &[bool] {
        &self.response_mask
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of positions that contribute to the loss.
    pub fn trainable_tokens(&self) -> usize {
        self.response_mask.iter().filter(|&&m| m).count()
    }

    fn trainable(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.token_ids
            .iter()
            .enumerate()
            .zip(&self.response_mask)
            .filter(|(_, &m)| m)
            .map(|((t, &tok), _)| (t, tok))
    }
}

/// Re-mask `trajectory` so that positions before `t_cont` are excluded.
/// Idempotent.
pub fn apply_prefix_mask(trajectory: &TokenTrajectory, t_cont: usize) -> Result<TokenTrajectory> {
    TokenTrajectory::new(trajectory.token_ids.clone(), t_cont)
}

/// Categorical policy with one logit row per context class.
///
/// Position `t` maps to context `min(t / positions_per_context, n_contexts - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    n_contexts: usize,
    vocab: usize,
    positions_per_context: usize,
    logits: Vec<f64>,
}

impl ToyPolicy {
    pub fn new(
        n_contexts: usize,
        vocab: usize,
        positions_per_context: usize,
        logits: Vec<f64>,
    ) -> Result<Self> {
        if n_contexts == 0 || vocab == 0 || positions_per_context == 0 {
            return Err(Error::domain("toy policy dimensions must be positive"));
        }
        if logits.len() != n_contexts * vocab {
            return Err(Error::domain(format!(
                "expected {} logits, got {}",
                n_contexts * vocab,
                logits.len()
            )));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::domain("toy policy logits must be finite"));
        }
        Ok(Self {
            n_contexts,
            vocab,
            positions_per_context,
            logits,
        })
    }

    pub fn uniform(n_contexts: usize, vocab: usize, positions_per_context: usize) -> Result<Self> {
        Self::new(
            n_contexts,
            vocab,
            positions_per_context,
            vec![0.0; n_contexts * vocab],
        )
    }

    pub fn n_contexts(&self) -> usize {
        self.n_contexts
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logit(&self, context: usize, token: usize) -> f64 {
        self.logits[context * self.vocab + token]
    }

    pub fn set_logit(&mut self, context: usize, token: usize, value: f64) {
        self.logits[context * self.vocab + token] = value;
    }

    pub fn context_of(&self, position: usize) -> usize {
        (position / self.positions_per_context).min(self.n_contexts - 1)
    }

    /// Softmax probabilities of one context row.
    pub fn probs(&self, context: usize) -> Vec<f64> {
        let row = &self.logits[context * self.vocab..(context + 1) * self.vocab];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exp.iter().sum();
        exp.into_iter().map(|e| e / z).collect()
    }

    pub fn log_prob(&self, position: usize, token: u32) -> f64 {
        let c = self.context_of(position);
        let row = &self.logits[c * self.vocab..(c + 1) * self.vocab];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        row[token as usize] - lse
    }
}

/// How per-token log-probabilities are normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LengthNormalization {
    /// Plain token sum.
    #[default]
    None,
    /// Divide by the group's total number of unmasked tokens.
    UnmaskedTokens,
}

/// How per-trajectory terms are combined across the group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GroupReduction {
    #[default]
    Sum,
    /// Average over trajectories with at least one unmasked token.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LossOptions {
    pub normalization: LengthNormalization,
    pub reduction: GroupReduction,
}

/// Gradient with respect to every logit of a [`ToyPolicy`], same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGradient {
    n_contexts: usize,
    vocab: usize,
    values: Vec<f64>,
}

impl LogitGradient {
    fn zeros(policy: &ToyPolicy) -> Self {
        Self {
            n_contexts: policy.n_contexts,
            vocab: policy.vocab,
            values: vec![0.0; policy.logits.len()],
        }
    }

    pub fn get(&self, context: usize, token: usize) -> f64 {
        self.values[context * self.vocab + token]
    }

    /// Gradient entries of one context class.
    pub fn block(&self, context: usize) -> &[f64] {
        &self.values[context * self.vocab..(context + 1) * self.vocab]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_contexts(&self) -> usize {
        self.n_contexts
    }

    /// Elementwise sum, for accumulating gradients across groups.
    pub fn add(&mut self, other: &LogitGradient) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }
}

/// Scale applied to every `A_i * sum log pi` term, or `None` when the group
/// has no trainable tokens at all.
fn term_weight(trajectories: &[TokenTrajectory], options: LossOptions) -> Option<f64> {
    let counts: Vec<usize> = trajectories.iter().map(|t| t.trainable_tokens()).collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return None;
    }
    let mut weight = 1.0;
    if options.normalization == LengthNormalization::UnmaskedTokens {
        weight /= total as f64;
    }
    if options.reduction == GroupReduction::Mean {
        weight /= counts.iter().filter(|&&c| c > 0).count() as f64;
    }
    Some(weight)
}

fn check_inputs(
    trajectories: &[TokenTrajectory],
    advantages: &[f64],
    policy: &ToyPolicy,
) -> Result<()> {
    if trajectories.is_empty() {
        return Err(Error::domain("empty group"));
    }
    if trajectories.len() != advantages.len() {
        return Err(Error::domain(format!(
            "{} trajectories but {} advantages",
            trajectories.len(),
            advantages.len()
        )));
    }
    let vocab = policy.vocab as u32;
    if let Some(bad) = trajectories
        .iter()
        .flat_map(|t| t.token_ids.iter())
        .find(|&&tok| tok >= vocab)
    {
        return Err(Error::domain(format!("token {bad} outside vocabulary of {vocab}")));
    }
    Ok(())
}

/// Masked GRPO surrogate for one group. Fully masked trajectories add nothing.
pub fn masked_grpo_loss(
    trajectories: &[TokenTrajectory],
    advantages: &[f64],
    policy: &ToyPolicy,
    options: LossOptions,
) -> Result<f64> {
    check_inputs(trajectories, advantages, policy)?;
    let Some(weight) = term_weight(trajectories, options) else {
        return Ok(0.0);
    };
    let mut loss = 0.0;
    for (traj, &adv) in trajectories.iter().zip(advantages) {
        let log_lik: f64 = traj.trainable().map(|(t, tok)| policy.log_prob(t, tok)).sum();
        loss -= adv * log_lik;
    }
    Ok(weight * loss)
}

/// Analytic gradient of [`masked_grpo_loss`] with respect to the logits.
///
/// `d log pi(a | c) / d logit[c][v] = [v == a] - pi(v | c)`.
pub fn loss_gradient(
    trajectories: &[TokenTrajectory],
    advantages: &[f64],
    policy: &ToyPolicy,
    options: LossOptions,
) -> Result<LogitGradient> {
    check_inputs(trajectories, advantages, policy)?;
    let mut grad = LogitGradient::zeros(policy);
    let Some(weight) = term_weight(trajectories, options) else {
        return Ok(grad);
    };
    let probs: Vec<Vec<f64>> = (0..policy.n_contexts).map(|c| policy.probs(c)).collect();
    let vocab = policy.vocab;
    for (traj, &adv) in trajectories.iter().zip(advantages) {
        if adv == 0.0 {
            continue;
        }
        let scale = -weight * adv;
        for (t, tok) in traj.trainable() {
            let c = policy.context_of(t);
            let row = &mut grad.values[c * vocab..(c + 1) * vocab];
            for (v, g) in row.iter_mut().enumerate() {
                *g -= scale * probs[c][v];
            }
            row[tok as usize] += scale;
        }
    }
    Ok(grad)
}
