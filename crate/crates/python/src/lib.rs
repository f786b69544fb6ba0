//! Python bindings: signal math, advantages and masking, the bucket
//! controller and the closed-loop simulator.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use prefix_sampling::advantage::{self, GroupReduction, LengthNormalization, LossOptions, TokenTrajectory, ToyPolicy};
use prefix_sampling::controller::{self, BucketControllerState, ControllerParams, MIB};
use prefix_sampling::group;
use prefix_sampling::harness::{self, verify, ExperimentConfig, RunOutput};
use prefix_sampling::signal;
use prefix_sampling::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

type Res<T> = PyResult<T>;

#[pyfunction]
fn reward_entropy(p: f64) -> Res<f64> {
    signal::reward_entropy(p).map_err(py_err)
}

#[pyfunction]
fn group_survival_probability(p: f64, n: u32) -> Res<f64> {
    signal::group_survival_probability(p, n).map_err(py_err)
}

#[pyfunction]
fn rloo_advantage_energy(k: u32, n: u32) -> Res<f64> {
    signal::rloo_advantage_energy(k, n).map_err(py_err)
}

#[pyfunction]
fn contrastive_pair_count(k: u32, n: u32) -> Res<u64> {
    signal::contrastive_pair_count(k, n).map_err(py_err)
}

#[pyfunction]
fn expected_pair_count(p: f64, n: u32) -> Res<f64> {
    signal::expected_pair_count(p, n).map_err(py_err)
}

#[pyfunction]
fn mean_centered_advantage_variance(k: u32, n: u32) -> Res<f64> {
    signal::mean_centered_advantage_variance(k, n).map_err(py_err)
}

/// Signal quantities of a group with `k` successes out of `n`, as a dict.
#[pyfunction]
fn signal_report<'py>(py: Python<'py>, k: u32, n: u32) -> Res<Bound<'py, PyDict>> {
    let r = signal::signal_report(k, n).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("pass_count", r.pass_count)?;
    d.set_item("group_size", r.group_size)?;
    d.set_item("entropy_bits", r.entropy_bits)?;
    d.set_item("survival_prob", r.survival_prob)?;
    d.set_item("rloo_energy", r.rloo_energy)?;
    d.set_item("pair_count", r.pair_count)?;
    d.set_item("pair_count_relative", r.pair_count_relative)?;
    Ok(d)
}

/// Bucket label for pass count `k`, e.g. `"hard2"` or `"balanced4"`.
#[pyfunction]
fn classify_bucket(k: u32, n: u32) -> Res<String> {
    group::classify_bucket(k, n).map(|b| b.label()).map_err(py_err)
}

#[pyfunction]
fn pass_count_distance(k: u32, n: u32) -> f64 {
    group::pass_count_distance(k, n)
}

#[pyfunction]
fn rloo_advantages(rewards: Vec<bool>) -> Res<Vec<f64>> {
    advantage::rloo_advantages(&rewards).map_err(py_err)
}

#[pyfunction]
fn mean_centered_advantages(rewards: Vec<bool>) -> Vec<f64> {
    advantage::mean_centered_advantages(&rewards)
}

#[pyfunction]
fn replay_boundary(ratio: f64, length: usize) -> Option<usize> {
    controller::replay_boundary(ratio, length)
}

/// Prefix-pool upper bound in MiB.
#[pyfunction]
fn prefix_pool_memory_mib(batch_size: u64, max_prompt: u64, max_response: u64) -> f64 {
    controller::prefix_pool_memory_bound(batch_size, max_prompt, max_response) / MIB
}

fn loss_inputs(
    tokens: Vec<Vec<u32>>,
    t_cont: Vec<usize>,
    logits: Vec<Vec<f64>>,
    positions_per_context: usize,
    normalization: &str,
    reduction: &str,
) -> Res<(Vec<TokenTrajectory>, ToyPolicy, LossOptions)> {
    if tokens.len() != t_cont.len() {
        return Err(PyValueError::new_err("tokens and t_cont differ in length"));
    }
    let trajs = tokens
        .into_iter()
        .zip(t_cont)
        .map(|(t, c)| TokenTrajectory::new(t, c))
        .collect::<Result<Vec<_>, _>>()
        .map_err(py_err)?;
    let vocab = logits.first().map_or(0, Vec::len);
    if logits.iter().any(|row| row.len() != vocab) {
        return Err(PyValueError::new_err("logit rows differ in length"));
    }
    let policy = ToyPolicy::new(logits.len(), vocab, positions_per_context, logits.concat()).map_err(py_err)?;
    let normalization = match normalization {
        "none" => LengthNormalization::None,
        "unmasked-tokens" => LengthNormalization::UnmaskedTokens,
        other => return Err(PyValueError::new_err(format!("unknown normalization `{other}`"))),
    };
    let reduction = match reduction {
        "sum" => GroupReduction::Sum,
        "mean" => GroupReduction::Mean,
        other => return Err(PyValueError::new_err(format!("unknown reduction `{other}`"))),
    };
    Ok((trajs, policy, LossOptions { normalization, reduction }))
}

/// Masked surrogate of one group. `logits[c][v]` is the toy policy.
#[pyfunction]
#[pyo3(signature = (tokens, t_cont, advantages, logits, positions_per_context, normalization = "none", reduction = "sum"))]
fn masked_grpo_loss(
    tokens: Vec<Vec<u32>>,
    t_cont: Vec<usize>,
    advantages: Vec<f64>,
    logits: Vec<Vec<f64>>,
    positions_per_context: usize,
    normalization: &str,
    reduction: &str,
) -> Res<f64> {
    let (trajs, policy, opts) = loss_inputs(tokens, t_cont, logits, positions_per_context, normalization, reduction)?;
    advantage::masked_grpo_loss(&trajs, &advantages, &policy, opts).map_err(py_err)
}

/// Gradient of [`masked_grpo_loss`] with the same shape as `logits`.
#[pyfunction]
#[pyo3(signature = (tokens, t_cont, advantages, logits, positions_per_context, normalization = "none", reduction = "sum"))]
fn loss_gradient(
    tokens: Vec<Vec<u32>>,
    t_cont: Vec<usize>,
    advantages: Vec<f64>,
    logits: Vec<Vec<f64>>,
    positions_per_context: usize,
    normalization: &str,
    reduction: &str,
) -> Res<Vec<Vec<f64>>> {
    let (trajs, policy, opts) = loss_inputs(tokens, t_cont, logits, positions_per_context, normalization, reduction)?;
    let g = advantage::loss_gradient(&trajs, &advantages, &policy, opts).map_err(py_err)?;
    Ok((0..g.n_contexts()).map(|c| g.block(c).to_vec()).collect())
}

/// EMA ratio controller of one hard or easy bucket, with default parameters.
#[pyclass(name = "BucketController")]
struct PyBucketController {
    state: BucketControllerState,
    params: ControllerParams,
}

#[pymethods]
impl PyBucketController {
    #[new]
    #[pyo3(signature = (pass_count, group_size = 8))]
    fn new(pass_count: u32, group_size: u32) -> Res<Self> {
        let bucket = group::classify_bucket(pass_count, group_size).map_err(py_err)?;
        let params = ControllerParams::default();
        let state = BucketControllerState::new(bucket, &params).map_err(py_err)?;
        Ok(Self { state, params })
    }

    /// Fold in one rerollout pass rate; returns the new ratio.
    fn update(&mut self, pass_rate: f64) -> Res<f64> {
        self.state = self.state.update(pass_rate, &self.params).map_err(py_err)?;
        Ok(self.state.ratio)
    }

    #[getter]
    fn bucket(&self) -> String {
        self.state.bucket.label()
    }

    #[getter]
    fn ratio(&self) -> f64 {
        self.state.ratio
    }

    #[getter]
    fn ema(&self) -> f64 {
        self.state.ema
    }

    #[getter]
    fn cooldown_remaining(&self) -> u32 {
        self.state.cooldown_remaining
    }

    #[getter]
    fn updates_seen(&self) -> u64 {
        self.state.updates_seen
    }

    fn __repr__(&self) -> String {
        format!(
            "BucketController(bucket={}, ratio={}, ema={}, cooldown_remaining={})",
            self.state.bucket, self.state.ratio, self.state.ema, self.state.cooldown_remaining
        )
    }
}

/// Outcome of [`simulate`].
#[pyclass(name = "Simulation")]
struct PySimulation {
    output: RunOutput,
}

#[pymethods]
impl PySimulation {
    #[getter]
    fn steps(&self) -> usize {
        self.output.metrics.len()
    }

    fn mean_valid_groups(&self) -> Option<f64> {
        self.output.mean_valid_groups()
    }

    /// `{bucket: (ema, ratio)}` after the last step.
    fn final_controllers(&self) -> BTreeMap<String, (f64, f64)> {
        self.output
            .final_states
            .iter()
            .map(|s| (s.bucket.label(), (s.ema, s.ratio)))
            .collect()
    }

    /// Mean rerollout pass rate of a bucket label over steps `>= from_step`.
    #[pyo3(signature = (bucket, from_step = 0))]
    fn bucket_mean_pass_rate(&self, bucket: &str, from_step: u64) -> Option<f64> {
        let b = group::skewed_buckets(self.output.transitions.group_size)
            .ok()?
            .into_iter()
            .find(|b| b.label() == bucket)?;
        self.output.bucket_mean_pass_rate(b, from_step)
    }

    /// Per-step `(valid_groups, fresh_degenerate_share, rerollout_degenerate_share)`.
    fn valid_and_degenerate(&self) -> Vec<(usize, Option<f64>, Option<f64>)> {
        self.output
            .metrics
            .iter()
            .map(|m| (m.valid_groups, m.fresh.degenerate_share, m.rerollout.degenerate_share))
            .collect()
    }

    /// `{bucket: mean child pass count}` for nonempty transition rows.
    fn transition_means(&self) -> BTreeMap<String, f64> {
        self.output
            .transitions
            .rows
            .iter()
            .filter_map(|r| r.mean_child().map(|m| (r.source.label(), m)))
            .collect()
    }

    /// Write the trace files into `out_dir`.
    fn emit(&self, out_dir: PathBuf) -> Res<()> {
        harness::emit_traces(&self.output, out_dir).map_err(py_err)
    }
}

/// Run one experiment from configuration text (same format as the CLI).
#[pyfunction]
#[pyo3(signature = (config = ""))]
fn simulate(py: Python<'_>, config: &str) -> Res<PySimulation> {
    let cfg = ExperimentConfig::parse(config).map_err(py_err)?;
    let output = py.detach(|| harness::run_experiment(&cfg)).map_err(py_err)?;
    Ok(PySimulation { output })
}

/// Built-in oracle checks as `(name, passed, detail)` tuples.
#[pyfunction]
#[pyo3(signature = (quick = true))]
fn run_checks(py: Python<'_>, quick: bool) -> Res<Vec<(String, bool, String)>> {
    let opts = if quick {
        verify::VerifyOptions {
            monte_carlo_groups: 100_000,
            gradient_instances: 10,
            controller_sequences: 500,
            ..Default::default()
        }
    } else {
        verify::VerifyOptions::default()
    };
    let checks = py.detach(|| verify::run_checks(&opts)).map_err(py_err)?;
    Ok(checks
        .into_iter()
        .map(|c| (c.name.to_string(), c.passed, c.detail))
        .collect())
}

#[pymodule(name = "prefix_sampling")]
fn py_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(reward_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(group_survival_probability, m)?)?;
    m.add_function(wrap_pyfunction!(rloo_advantage_energy, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_pair_count, m)?)?;
    m.add_function(wrap_pyfunction!(expected_pair_count, m)?)?;
    m.add_function(wrap_pyfunction!(mean_centered_advantage_variance, m)?)?;
    m.add_function(wrap_pyfunction!(signal_report, m)?)?;
    m.add_function(wrap_pyfunction!(classify_bucket, m)?)?;
    m.add_function(wrap_pyfunction!(pass_count_distance, m)?)?;
    m.add_function(wrap_pyfunction!(rloo_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(mean_centered_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(replay_boundary, m)?)?;
    m.add_function(wrap_pyfunction!(prefix_pool_memory_mib, m)?)?;
    m.add_function(wrap_pyfunction!(masked_grpo_loss, m)?)?;
    m.add_function(wrap_pyfunction!(loss_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_checks, m)?)?;
    m.add_class::<PyBucketController>()?;
    m.add_class::<PySimulation>()?;
    Ok(())
}
