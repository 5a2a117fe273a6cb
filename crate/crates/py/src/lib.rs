//! Python bindings for the coherent-risk crate: risk evaluation, saddle
//! points, static gradient estimators, finite MDPs with dynamic gradients,
//! and the asset benchmark.
//!
//! Risk measures are named by `(kind, alpha)`: `("expectation", _)`,
//! `("cvar", alpha)` or `("msd", alpha)`.

// The pyfunction macro expands to PyErr-to-PyErr conversions.
#![allow(clippy::useless_conversion)]

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use coherent_risk::dynrisk::{grad_dynamic_exact, solve_value_exact};
use coherent_risk::envelope::{
    evaluate_risk, make_cvar, make_expectation, make_msd, RiskEnvelope, SolverOpts,
};
use coherent_risk::error::RiskError;
use coherent_risk::harness::{cmd_bench_assets, ExperimentConfig};
use coherent_risk::mdp::{simulate, FeatureMap, Mdp, SoftmaxPolicy};
use coherent_risk::probspace::{stream, CostVariable, Draw, FiniteDist, SampleBatch};
use coherent_risk::staticgrad::{
    grad_cvar_sampled, grad_gmsd, grad_meanstd_baseline, grad_saddle_exact,
};
use nalgebra::DMatrix;

fn pyerr(e: RiskError) -> PyErr {
    match e.exit_code() {
        1 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn envelope(kind: &str, alpha: f64) -> PyResult<RiskEnvelope> {
    match kind {
        "expectation" => Ok(make_expectation()),
        "cvar" => make_cvar(alpha).map_err(pyerr),
        "msd" => make_msd(alpha).map_err(pyerr),
        other => Err(PyValueError::new_err(format!(
            "unknown risk kind {other:?}; use expectation, cvar or msd"
        ))),
    }
}

fn dist_and_cost(probs: Vec<f64>, z: Vec<f64>) -> PyResult<(FiniteDist, CostVariable)> {
    Ok((
        FiniteDist::new(probs).map_err(pyerr)?,
        CostVariable::new(z).map_err(pyerr)?,
    ))
}

fn batch_from(costs: Vec<f64>, scores: Vec<Vec<f64>>) -> PyResult<SampleBatch> {
    if costs.len() != scores.len() {
        return Err(PyValueError::new_err("costs and scores lengths differ"));
    }
    let draws = costs
        .into_iter()
        .zip(scores)
        .map(|(cost, score)| Draw {
            outcome: 0,
            cost,
            score,
        })
        .collect();
    Ok(SampleBatch { draws, seed: 0 })
}

/// Risk value of a cost vector under a finite distribution.
#[pyfunction]
fn risk_value(kind: &str, alpha: f64, probs: Vec<f64>, z: Vec<f64>) -> PyResult<f64> {
    let env = envelope(kind, alpha)?;
    let (dist, cost) = dist_and_cost(probs, z)?;
    let (rho, _) = evaluate_risk(&env, &dist, &cost, &SolverOpts::default()).map_err(pyerr)?;
    Ok(rho)
}

/// Risk value plus saddle data `(rho, xi, lam_p)`.
#[pyfunction]
fn risk_saddle(
    kind: &str,
    alpha: f64,
    probs: Vec<f64>,
    z: Vec<f64>,
) -> PyResult<(f64, Vec<f64>, f64)> {
    let env = envelope(kind, alpha)?;
    let (dist, cost) = dist_and_cost(probs, z)?;
    let (rho, sp) = evaluate_risk(&env, &dist, &cost, &SolverOpts::default()).map_err(pyerr)?;
    Ok((rho, sp.xi.iter().copied().collect(), sp.lam_p))
}

/// Exact gradient of the risk with respect to the sampling-model parameter,
/// given per-outcome score rows (`d log P / d theta_k`).
#[pyfunction]
fn static_gradient(
    kind: &str,
    alpha: f64,
    probs: Vec<f64>,
    scores: Vec<Vec<f64>>,
    z: Vec<f64>,
) -> PyResult<Vec<f64>> {
    let env = envelope(kind, alpha)?;
    if scores.len() != probs.len() {
        return Err(PyValueError::new_err(
            "scores must have one row per outcome",
        ));
    }
    let k = scores.first().map_or(0, |r| r.len());
    let m = DMatrix::from_fn(scores.len(), k, |i, j| scores[i][j]);
    let dist = FiniteDist::with_scores(probs, Some(m)).map_err(pyerr)?;
    let cost = CostVariable::new(z).map_err(pyerr)?;
    let (_, sp) = evaluate_risk(&env, &dist, &cost, &SolverOpts::default()).map_err(pyerr)?;
    let g = grad_saddle_exact(&dist, &cost, &sp, &env).map_err(pyerr)?;
    Ok(g.grad.iter().copied().collect())
}

/// Sampled CVaR gradient from (cost, score) draws.
#[pyfunction]
fn cvar_gradient(costs: Vec<f64>, scores: Vec<Vec<f64>>, alpha: f64) -> PyResult<Vec<f64>> {
    let batch = batch_from(costs, scores)?;
    let g = grad_cvar_sampled(&batch, alpha).map_err(pyerr)?;
    Ok(g.grad.iter().copied().collect())
}

/// Sampled mean-semideviation gradient from (cost, score) draws.
#[pyfunction]
fn gmsd_gradient(costs: Vec<f64>, scores: Vec<Vec<f64>>, alpha: f64) -> PyResult<Vec<f64>> {
    let batch = batch_from(costs, scores)?;
    let g = grad_gmsd(&batch, alpha).map_err(pyerr)?;
    Ok(g.grad.iter().copied().collect())
}

/// Sampled mean-standard-deviation gradient from (cost, score) draws.
#[pyfunction]
fn meanstd_gradient(costs: Vec<f64>, scores: Vec<Vec<f64>>, c: f64) -> PyResult<Vec<f64>> {
    let batch = batch_from(costs, scores)?;
    let g = grad_meanstd_baseline(&batch, c).map_err(pyerr)?;
    Ok(g.grad.iter().copied().collect())
}

/// Runs the three-asset benchmark from a JSON config string and returns the
/// selection-probability trace as CSV.
#[pyfunction]
#[pyo3(signature = (config_json, seed=None))]
fn bench_assets(config_json: &str, seed: Option<u64>) -> PyResult<String> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(pyerr)?;
    cmd_bench_assets(&cfg, seed).map_err(pyerr)
}

/// Finite MDP with a softmax policy over one-hot state-action features.
#[pyclass]
struct FiniteMdp {
    mdp: Mdp,
    features: FeatureMap,
}

#[pymethods]
impl FiniteMdp {
    /// Loads the MDP from the crate's JSON document format.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let (mdp, features) = Mdp::from_json(text).map_err(pyerr)?;
        let features =
            features.unwrap_or_else(|| FeatureMap::one_hot(mdp.n_states(), mdp.n_actions()));
        Ok(FiniteMdp { mdp, features })
    }

    fn n_states(&self) -> usize {
        self.mdp.n_states()
    }

    fn n_actions(&self) -> usize {
        self.mdp.n_actions()
    }

    fn theta_dim(&self) -> usize {
        self.features.dim()
    }

    /// Risk-sensitive value function (tabular) for the policy `theta`.
    fn value(&self, kind: &str, alpha: f64, theta: Vec<f64>) -> PyResult<Vec<f64>> {
        let env = envelope(kind, alpha)?;
        let policy = SoftmaxPolicy::new(theta, self.features.clone()).map_err(pyerr)?;
        let (v, _) = solve_value_exact(&self.mdp, &policy, &env, 1e-10, &SolverOpts::default())
            .map_err(pyerr)?;
        Ok(v.to_tabular(self.mdp.n_states()).iter().copied().collect())
    }

    /// Exact gradient of the dynamic risk at the initial state.
    fn dynamic_gradient(&self, kind: &str, alpha: f64, theta: Vec<f64>) -> PyResult<Vec<f64>> {
        let env = envelope(kind, alpha)?;
        let policy = SoftmaxPolicy::new(theta, self.features.clone()).map_err(pyerr)?;
        let g = grad_dynamic_exact(&self.mdp, &policy, &env, 1e-10, &SolverOpts::default())
            .map_err(pyerr)?;
        Ok(g.grad.iter().copied().collect())
    }

    /// Seeded trajectory as `(state, action, cost)` triples.
    fn simulate(
        &self,
        theta: Vec<f64>,
        horizon: usize,
        seed: u64,
    ) -> PyResult<Vec<(usize, usize, f64)>> {
        let policy = SoftmaxPolicy::new(theta, self.features.clone()).map_err(pyerr)?;
        let mut rng = stream(seed, 0);
        Ok(simulate(&self.mdp, &policy, horizon, &mut rng, None).steps)
    }
}

#[pymodule]
fn coherent_risk_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(risk_value, m)?)?;
    m.add_function(wrap_pyfunction!(risk_saddle, m)?)?;
    m.add_function(wrap_pyfunction!(static_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(cvar_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(gmsd_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(meanstd_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(bench_assets, m)?)?;
    m.add_class::<FiniteMdp>()?;
    Ok(())
}
