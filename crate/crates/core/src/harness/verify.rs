//! Self-checks run by the `verify` subcommand: closed forms against known
//! values, brute-force and Monte Carlo oracles, finite-difference gradients
//! and randomized controller invariants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

use crate::advantage::{
    loss_gradient, masked_grpo_loss, mean_centered_advantages, rloo_advantages, GroupReduction,
    LengthNormalization, LossOptions, TokenTrajectory, ToyPolicy,
};
use crate::controller::{prefix_pool_memory_bound, BucketControllerState, ControllerParams, MIB};
use crate::group::classify_bucket;
use crate::signal::{
    contrastive_pair_count, expected_pair_count, group_survival_probability, mean_centered_advantage_variance,
    reward_entropy, rloo_advantage_energy,
};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name,
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    pub monte_carlo_groups: u64,
    pub gradient_instances: usize,
    pub controller_sequences: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 20_240_601,
            monte_carlo_groups: 1_000_000,
            gradient_instances: 50,
            controller_sequences: 10_000,
        }
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn landmarks() -> Result<Check> {
    let mut bad = Vec::new();
    let mut expect = |label: &str, got: f64, want: f64, tol: f64| {
        if !close(got, want, tol) {
            bad.push(format!("{label}: got {got}, want {want}"));
        }
    };
    expect("H(0.5)", reward_entropy(0.5)?, 1.0, 1e-12);
    expect("H(0.25)", reward_entropy(0.25)?, 0.8113, 1e-4);
    expect("H(0.125)", reward_entropy(0.125)?, 0.5436, 1e-4);
    expect("S(0.5)", group_survival_probability(0.5, 8)?, 0.9922, 1e-4);
    expect("S(0.25)", group_survival_probability(0.25, 8)?, 0.8999, 1e-4);
    expect("S(0.125)", group_survival_probability(0.125, 8)?, 0.6564, 1e-4);
    expect("E(4)", rloo_advantage_energy(4, 8)?, 16.0 / 49.0, 1e-12);
    expect("E(2)", rloo_advantage_energy(2, 8)?, 12.0 / 49.0, 1e-12);
    expect("E(1)", rloo_advantage_energy(1, 8)?, 7.0 / 49.0, 1e-12);
    let pairs = (0..=8).map(|k| contrastive_pair_count(k, 8)).collect::<Result<Vec<_>>>()?;
    if pairs != [0, 7, 12, 15, 16, 15, 12, 7, 0] {
        bad.push(format!("pair counts {pairs:?}"));
    }
    Ok(Check::new("signal landmarks", bad.is_empty(), bad.join("; ")))
}

fn advantage_oracles() -> Result<Vec<Check>> {
    let (mut worst_energy, mut worst_var) = (0.0f64, 0.0f64);
    for n in 2..=12u32 {
        for k in 0..=n {
            let rewards: Vec<bool> = (0..n).map(|i| i < k).collect();
            let a = rloo_advantages(&rewards)?;
            let energy = a.iter().map(|x| x * x).sum::<f64>() / f64::from(n);
            worst_energy = worst_energy.max((energy - rloo_advantage_energy(k, n)?).abs());
            let c = mean_centered_advantages(&rewards);
            let var = c.iter().map(|x| x * x).sum::<f64>() / f64::from(n);
            worst_var = worst_var.max((var - mean_centered_advantage_variance(k, n)?).abs());
        }
    }
    Ok(vec![
        Check::new(
            "RLOO energy oracle",
            worst_energy <= 1e-12,
            format!("max abs error {worst_energy:e}"),
        ),
        Check::new(
            "mean-centred variance oracle",
            worst_var <= 1e-12,
            format!("max abs error {worst_var:e}"),
        ),
    ])
}

fn monte_carlo(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let groups = opts.monte_carlo_groups;
    for (i, p) in [0.125, 0.25, 0.5].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(i as u64));
        let dist = Binomial::new(8, p).expect("valid binomial");
        let (mut alive, mut pairs) = (0u64, 0u64);
        for _ in 0..groups {
            let k = dist.sample(&mut rng);
            if k != 0 && k != 8 {
                alive += 1;
            }
            pairs += k * (8 - k);
        }
        let frac = alive as f64 / groups as f64;
        let s = group_survival_probability(p, 8)?;
        let se = (s * (1.0 - s) / groups as f64).sqrt();
        out.push(Check::new(
            "Monte Carlo survival",
            (frac - s).abs() <= 3.0 * se,
            format!("p={p}: empirical {frac:.5}, closed form {s:.5}, 3se {:.5}", 3.0 * se),
        ));
        let mean_pairs = pairs as f64 / groups as f64;
        let want = expected_pair_count(p, 8)?;
        out.push(Check::new(
            "Monte Carlo pair count",
            (mean_pairs - want).abs() <= 0.05,
            format!("p={p}: empirical {mean_pairs:.4}, closed form {want}"),
        ));
    }
    Ok(out)
}

fn random_instance(rng: &mut ChaCha8Rng) -> Result<(Vec<TokenTrajectory>, Vec<f64>, ToyPolicy, LossOptions)> {
    let (contexts, vocab, ppc) = (rng.random_range(2..5), rng.random_range(2..7), rng.random_range(1..4));
    let logits = (0..contexts * vocab).map(|_| rng.random_range(-2.0..2.0)).collect();
    let policy = ToyPolicy::new(contexts, vocab, ppc, logits)?;
    let g = rng.random_range(1..6);
    let mut trajs = Vec::with_capacity(g);
    for _ in 0..g {
        let len = rng.random_range(0..14);
        let tokens = (0..len).map(|_| rng.random_range(0..vocab as u32)).collect();
        let t_cont = rng.random_range(0..=len);
        trajs.push(TokenTrajectory::new(tokens, t_cont)?);
    }
    let advs = (0..g).map(|_| rng.random_range(-1.5..1.5)).collect();
    let opts = LossOptions {
        normalization: if rng.random_bool(0.5) {
            LengthNormalization::UnmaskedTokens
        } else {
            LengthNormalization::None
        },
        reduction: if rng.random_bool(0.5) {
            GroupReduction::Mean
        } else {
            GroupReduction::Sum
        },
    };
    Ok((trajs, advs, policy, opts))
}

fn gradients(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6772_6164);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..opts.gradient_instances {
        let (trajs, advs, policy, lo) = random_instance(&mut rng)?;
        let grad = loss_gradient(&trajs, &advs, &policy, lo)?;
        for c in 0..policy.n_contexts() {
            for v in 0..policy.vocab() {
                let mut plus = policy.clone();
                plus.set_logit(c, v, policy.logit(c, v) + h);
                let mut minus = policy.clone();
                minus.set_logit(c, v, policy.logit(c, v) - h);
                let fd = (masked_grpo_loss(&trajs, &advs, &plus, lo)?
                    - masked_grpo_loss(&trajs, &advs, &minus, lo)?)
                    / (2.0 * h);
                let a = grad.get(c, v);
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                worst = worst.max(rel);
            }
        }
    }

    // Context 0 is only ever reached by replayed positions.
    let mut prefix_only_ok = true;
    for _ in 0..opts.gradient_instances {
        let ppc = 3;
        let policy = ToyPolicy::new(
            3,
            4,
            ppc,
            (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )?;
        let trajs = (0..4)
            .map(|_| {
                let len = rng.random_range(ppc..12);
                let tokens = (0..len).map(|_| rng.random_range(0..4)).collect();
                TokenTrajectory::new(tokens, rng.random_range(ppc..=len))
            })
            .collect::<Result<Vec<_>>>()?;
        let advs: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grad = loss_gradient(&trajs, &advs, &policy, LossOptions::default())?;
        prefix_only_ok &= grad.block(0).iter().all(|&g| g == 0.0);
    }

    Ok(vec![
        Check::new(
            "finite-difference gradient",
            worst <= 1e-4,
            format!("{} instances, worst relative error {worst:e}", opts.gradient_instances),
        ),
        Check::new(
            "prefix-only context has zero gradient",
            prefix_only_ok,
            format!("{} instances", opts.gradient_instances),
        ),
    ])
}

fn controller(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let params = ControllerParams::default();
    let hard = classify_bucket(1, 8)?;
    let mut s = BucketControllerState::new(hard, &params)?;
    s.ema = 1.0;
    let mut crossing = None;
    for i in 1..=40 {
        s = s.update(0.0, &params)?;
        if crossing.is_none() && s.ema < 0.5 {
            crossing = Some(i);
        }
    }
    let mut out = vec![Check::new(
        "EMA half-crossing",
        crossing == Some(14),
        format!("first below 0.5 after update {crossing:?}"),
    )];

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6374_726c);
    let mut violations = Vec::new();
    for k in [1, 2, 6, 7] {
        let bucket = classify_bucket(k, 8)?;
        for _ in 0..opts.controller_sequences {
            let mut s = BucketControllerState::new(bucket, &params)?;
            let mut since_change: Option<u32> = None;
            let bias = rng.random_range(0.0..1.0);
            for _ in 0..60 {
                let p_new = if rng.random_bool(0.8) { bias } else { rng.random_range(0.0..=1.0) };
                let next = s.update(p_new, &params)?;
                if !(params.min_ratio..=params.max_ratio).contains(&next.ratio) {
                    violations.push(format!("{bucket}: ratio {} out of bounds", next.ratio));
                }
                if next.ratio != s.ratio {
                    if since_change.is_some_and(|g| g < params.cooldown) {
                        violations.push(format!("{bucket}: ratio changed within cooldown"));
                    }
                    since_change = Some(0);
                    let inside = (next.ema - params.target).abs() <= params.deadzone;
                    let over = next.ema > params.target;
                    let up = next.ratio > s.ratio;
                    if inside || up != (bucket.is_hard() != over) {
                        violations.push(format!("{bucket}: wrong move at ema {}", next.ema));
                    }
                } else if let Some(g) = since_change.as_mut() {
                    *g += 1;
                }
                s = next;
            }
        }
    }
    violations.truncate(5);
    out.push(Check::new(
        "controller invariants",
        violations.is_empty(),
        if violations.is_empty() {
            format!("{} sequences per bucket", opts.controller_sequences)
        } else {
            violations.join("; ")
        },
    ));
    Ok(out)
}

fn memory() -> Check {
    let rows = [((128, 2048, 16384), 8.6), ((64, 4096, 32768), 8.6), ((64, 4096, 65536), 16.2)];
    let mut bad = Vec::new();
    for ((b, p, r), want) in rows {
        let got = prefix_pool_memory_bound(b, p, r) / MIB;
        if (got - want).abs() > 0.05 {
            bad.push(format!("({b}, {p}, {r}) -> {got:.3} MiB, want {want}"));
        }
    }
    Check::new("prefix pool memory bound", bad.is_empty(), bad.join("; "))
}

pub fn run_checks(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut checks = vec![landmarks()?];
    checks.extend(advantage_oracles()?);
    checks.extend(monte_carlo(opts)?);
    checks.extend(gradients(opts)?);
    checks.extend(controller(opts)?);
    checks.push(memory());
    Ok(checks)
}
