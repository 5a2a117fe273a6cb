//! Dynamic Markov coherent risk: the risk-sensitive Bellman operator, exact
//! value iteration, a projected value-iteration critic with linear features,
//! stage-wise costs and the dynamic policy gradient (exact enumeration and
//! the two-phase sampling estimator).
//!
//! The per-state envelope problems are solved with the discounted next-state
//! value `Z = gamma V`, so the stored saddle multipliers plug directly into
//! the stage-wise cost
//!
//! ```text
//! h(x, a) = C(x, a) + sum_x' P(x'|x, a) xi*_x(x')
//!           [ gamma V(x') - lam_p_x - sum_i lam_i df_i/dp(x')
//!                                   - sum_e lam_e dg_e/dp(x') ]
//! ```
//!
//! (the density and the measure-derivative terms are invariant under the
//! positive scaling, the multipliers scale linearly).

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envelope::{evaluate_risk, RiskEnvelope, SaddlePoint, SolverOpts};
use crate::error::RiskError;
use crate::mdp::{induced_kernel, simulate, Mdp, SoftmaxPolicy, Trajectory};
use crate::probspace::{sample_index, CostVariable, FiniteDist};
use crate::staticgrad::{GradDiagnostics, GradEstimate};

/// Risk-sensitive value function: tabular values or linear feature weights.
#[derive(Debug, Clone)]
pub enum ValueFn {
    Tabular(DVector<f64>),
    Linear {
        weights: DVector<f64>,
        /// One feature row per state.
        features: DMatrix<f64>,
    },
}

impl ValueFn {
    pub fn value(&self, x: usize) -> f64 {
        match self {
            ValueFn::Tabular(v) => v[x],
            ValueFn::Linear { weights, features } => features.row(x).transpose().dot(weights),
        }
    }

    /// Evaluates on every state.
    pub fn to_tabular(&self, n_states: usize) -> DVector<f64> {
        DVector::from_fn(n_states, |x, _| self.value(x))
    }

    pub fn to_json(&self) -> String {
        let doc = match self {
            ValueFn::Tabular(v) => ValueFnDoc {
                mode: "tabular".into(),
                values: Some(v.iter().copied().collect()),
                weights: None,
                features: None,
            },
            ValueFn::Linear { weights, features } => ValueFnDoc {
                mode: "linear".into(),
                values: None,
                weights: Some(weights.iter().copied().collect()),
                features: Some(
                    (0..features.nrows())
                        .map(|x| features.row(x).iter().copied().collect())
                        .collect(),
                ),
            },
        };
        serde_json::to_string_pretty(&doc).expect("value function serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, RiskError> {
        let doc: ValueFnDoc = serde_json::from_str(text)?;
        match doc.mode.as_str() {
            "tabular" => {
                let v = doc
                    .values
                    .ok_or_else(|| RiskError::InvalidConfig("missing values".into()))?;
                Ok(ValueFn::Tabular(DVector::from_vec(v)))
            }
            "linear" => {
                let w = doc
                    .weights
                    .ok_or_else(|| RiskError::InvalidConfig("missing weights".into()))?;
                let f = doc
                    .features
                    .ok_or_else(|| RiskError::InvalidConfig("missing features".into()))?;
                let rows = f.len();
                let cols = f.first().map_or(0, |r| r.len());
                Ok(ValueFn::Linear {
                    weights: DVector::from_vec(w),
                    features: DMatrix::from_fn(rows, cols, |i, j| f[i][j]),
                })
            }
            other => Err(RiskError::InvalidConfig(format!("unknown mode {other}"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ValueFnDoc {
    mode: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    values: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    features: Option<Vec<Vec<f64>>>,
}

/// Per-state saddle points of the envelope problem at the induced kernel
/// rows with `Z = gamma V`.
#[derive(Debug, Clone)]
pub struct StateSaddles {
    pub saddles: Vec<SaddlePoint>,
}

fn dist_from_row(row: &DVector<f64>) -> Result<FiniteDist, RiskError> {
    FiniteDist::new(row.iter().copied().collect())
}

/// Policy-averaged stage cost `C_theta(x) = sum_a mu(a|x) C(x, a)`.
fn policy_cost(mdp: &Mdp, policy: &SoftmaxPolicy, x: usize) -> f64 {
    let probs = policy.probs(x);
    (0..mdp.n_actions())
        .map(|a| probs[a] * mdp.cost(x, a))
        .sum()
}

/// One sweep of the risk-sensitive Bellman operator:
/// `T[V](x) = C_theta(x) + rho_x(gamma V)` with the per-state envelope
/// problem solved at the induced kernel row. Also returns the saddles.
pub fn bellman_apply(
    mdp: &Mdp,
    policy: &SoftmaxPolicy,
    env: &RiskEnvelope,
    v: &DVector<f64>,
    opts: &SolverOpts,
) -> Result<(DVector<f64>, StateSaddles), RiskError> {
    let kernel = induced_kernel(mdp, policy);
    let z = CostVariable::new((v * mdp.gamma()).iter().copied().collect())?;
    let mut out = DVector::zeros(mdp.n_states());
    let mut saddles = Vec::with_capacity(mdp.n_states());
    for x in 0..mdp.n_states() {
        let dist = dist_from_row(&kernel.row(x).transpose()).map_err(|e| RiskError::AtState {
            state: x,
            source: Box::new(e),
        })?;
        let (rho, sp) = evaluate_risk(env, &dist, &z, opts).map_err(|e| RiskError::AtState {
            state: x,
            source: Box::new(e),
        })?;
        out[x] = policy_cost(mdp, policy, x) + rho;
        saddles.push(sp);
    }
    Ok((out, StateSaddles { saddles }))
}

/// Fixed-point iteration of the Bellman operator from `V = 0` until
/// `||V_{k+1} - V_k||_inf < tol (1 - gamma) / gamma`, which bounds the
/// distance to the fixed point by `tol`. Returns the value function and the
/// saddles recomputed at the converged iterate.
pub fn solve_value_exact(
    mdp: &Mdp,
    policy: &SoftmaxPolicy,
    env: &RiskEnvelope,
    tol: f64,
    opts: &SolverOpts,
) -> Result<(ValueFn, StateSaddles), RiskError> {
    if tol <= 0.0 {
        return Err(RiskError::InvalidConfig("tol must be positive".into()));
    }
    let gamma = mdp.gamma();
    let stop = tol * (1.0 - gamma) / gamma;
    let cmax = mdp.cost_bound().max(tol);
    let cap = ((tol * (1.0 - gamma) / (2.0 * cmax)).ln() / gamma.ln()).ceil() as usize + 60;
    let mut v = DVector::zeros(mdp.n_states());
    for _ in 0..cap {
        let (next, _) = bellman_apply(mdp, policy, env, &v, opts)?;
        let delta = (&next - &v).amax();
        v = next;
        if delta < stop {
            let (_, saddles) = bellman_apply(mdp, policy, env, &v, opts)?;
            return Ok((ValueFn::Tabular(v), saddles));
        }
    }
    Err(RiskError::ValueIterationCap(cap))
}

/// Kernel source for the critic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelSource {
    /// Per-pair empirical transition counts from the trajectory, weighted by
    /// the policy and renormalized over the observed action support.
    Empirical,
    /// The true induced kernel of the MDP.
    Exact,
}

/// Critic configuration.
#[derive(Debug, Clone)]
pub struct PrsviConfig {
    pub k_iters: usize,
    /// L2 regularization of the inner problems; `None` uses `1/(2N)`.
    pub reg: Option<f64>,
    pub kernel: KernelSource,
    /// Early-stop threshold on the weight update.
    pub tol: f64,
    pub solver: SolverOpts,
}

impl Default for PrsviConfig {
    fn default() -> Self {
        PrsviConfig {
            k_iters: 200,
            reg: None,
            kernel: KernelSource::Empirical,
            tol: 1e-10,
            solver: SolverOpts::default(),
        }
    }
}

/// Projected risk-sensitive value iteration with linear features:
///
/// `v_{k+1} = (sum phi phi^T)^{-1} [ sum phi C_theta + gamma sum phi
/// rho_x(Phi v_k) ]`, sums running over the trajectory visits and the inner
/// risk evaluated on the (empirical or exact) kernel rows.
pub fn prsvi(
    mdp: &Mdp,
    policy: &SoftmaxPolicy,
    env: &RiskEnvelope,
    trajectory: &Trajectory,
    features: &DMatrix<f64>,
    cfg: &PrsviConfig,
) -> Result<DVector<f64>, RiskError> {
    if trajectory.is_empty() {
        return Err(RiskError::NoSamples);
    }
    if features.nrows() != mdp.n_states() {
        return Err(RiskError::LengthMismatch {
            expected: mdp.n_states(),
            got: features.nrows(),
        });
    }
    let n = trajectory.len();
    let kdim = features.ncols();
    let gamma = mdp.gamma();

    // Contraction pre-check: the envelope's density bound times gamma must
    // stay below one (for CVaR this is gamma / alpha < 1).
    let kernel_rows: Vec<DVector<f64>> = match cfg.kernel {
        KernelSource::Exact => {
            let k = induced_kernel(mdp, policy);
            (0..mdp.n_states()).map(|x| k.row(x).transpose()).collect()
        }
        KernelSource::Empirical => empirical_rows(mdp, policy, trajectory)?,
    };
    for row in &kernel_rows {
        if row.sum() == 0.0 {
            continue;
        }
        let d = FiniteDist::new(row.iter().copied().collect())?;
        let product = gamma * env.density_bound(d.probs());
        if product >= 1.0 {
            return Err(RiskError::ContractionFails { product });
        }
    }

    // Gram matrix and cost target over visits; states whose kernel row is
    // unobserved (possible only for a terminal visit) are dropped from both.
    let mut gram = DMatrix::zeros(kdim, kdim);
    let mut cost_target = DVector::zeros(kdim);
    let mut visits: HashMap<usize, usize> = HashMap::new();
    for &(x, _, _) in &trajectory.steps {
        if kernel_rows[x].sum() == 0.0 {
            continue;
        }
        let phi = features.row(x).transpose();
        gram += &phi * phi.transpose();
        cost_target += &phi * policy_cost(mdp, policy, x);
        *visits.entry(x).or_insert(0) += 1;
    }
    gram /= n as f64;
    cost_target /= n as f64;
    let gram_inv = gram.lu();
    if !gram_inv.is_invertible() {
        return Err(RiskError::SingularGram);
    }

    let reg = cfg.reg.unwrap_or(1.0 / (2.0 * n as f64));
    let mut solver = cfg.solver;
    solver.reg = reg;
    solver.force_numeric = reg > 0.0;

    let mut v = DVector::zeros(kdim);
    for _ in 0..cfg.k_iters {
        let values = features * &v;
        let z = CostVariable::new((values * gamma).iter().copied().collect())?;
        let mut target = cost_target.clone();
        for (&x, &count) in &visits {
            let dist = FiniteDist::new(kernel_rows[x].iter().copied().collect())?;
            let (rho, _) =
                evaluate_risk(env, &dist, &z, &solver).map_err(|e| RiskError::AtState {
                    state: x,
                    source: Box::new(e),
                })?;
            // rho was evaluated at gamma * Phi v, absorbing the discount.
            target += features.row(x).transpose() * (rho * count as f64 / n as f64);
        }
        let next = gram_inv.solve(&target).ok_or(RiskError::SingularGram)?;
        let delta = (&next - &v).amax();
        v = next;
        if delta < cfg.tol {
            break;
        }
    }
    Ok(v)
}

/// Empirical state-to-state rows: per-pair transition frequencies weighted
/// by the policy, renormalized over the action mass actually observed.
fn empirical_rows(
    mdp: &Mdp,
    policy: &SoftmaxPolicy,
    trajectory: &Trajectory,
) -> Result<Vec<DVector<f64>>, RiskError> {
    let n_states = mdp.n_states();
    let n_actions = mdp.n_actions();
    let mut counts: HashMap<(usize, usize), (Vec<f64>, f64)> = HashMap::new();
    for w in trajectory.steps.windows(2) {
        let (x, a, _) = w[0];
        let (y, _, _) = w[1];
        let entry = counts
            .entry((x, a))
            .or_insert_with(|| (vec![0.0; n_states], 0.0));
        entry.0[y] += 1.0;
        entry.1 += 1.0;
    }
    let mut rows = Vec::with_capacity(n_states);
    for x in 0..n_states {
        let probs = policy.probs(x);
        let mut row = DVector::zeros(n_states);
        let mut covered = 0.0;
        for a in 0..n_actions {
            if let Some((c, total)) = counts.get(&(x, a)) {
                covered += probs[a];
                for y in 0..n_states {
                    row[y] += probs[a] * c[y] / total;
                }
            }
        }
        if covered > 0.0 {
            row /= covered;
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Exact stage-wise cost by full enumeration over next states.
///
/// The measure-derivative correction enters per next state without the
/// density weight: `h = C(x,a) + sum_x' P(x'|x,a) [ xi*(x') (gamma V(x') -
/// lam_p) - corr(x') ]`. (Carrying the correction inside the density weight
/// instead fails the finite-difference check for measure-dependent
/// constraints; for CVaR and expectation the correction vanishes and the
/// two placements coincide.)
pub fn stage_cost_h_exact(
    mdp: &Mdp,
    env: &RiskEnvelope,
    v: &DVector<f64>,
    x: usize,
    a: usize,
    sp: &SaddlePoint,
    dist_x: &FiniteDist,
) -> f64 {
    let corr = env.dp_correction(&sp.primal, dist_x.probs(), &sp.lam_e, &sp.lam_i);
    let row = mdp.kernel_row(x, a);
    let gamma = mdp.gamma();
    let mut h = mdp.cost(x, a);
    for y in 0..mdp.n_states() {
        if row[y] > 0.0 {
            h += row[y] * (sp.xi[y] * (gamma * v[y] - sp.lam_p) - corr[y]);
        }
    }
    h
}

/// Sample-average stage-wise cost from drawn next states.
#[allow(clippy::too_many_arguments)]
pub fn stage_cost_h_sampled(
    mdp: &Mdp,
    env: &RiskEnvelope,
    v: &DVector<f64>,
    x: usize,
    a: usize,
    sp: &SaddlePoint,
    dist_x: &FiniteDist,
    samples: &[usize],
) -> f64 {
    let corr = env.dp_correction(&sp.primal, dist_x.probs(), &sp.lam_e, &sp.lam_i);
    let gamma = mdp.gamma();
    let mut acc = 0.0;
    for &y in samples {
        acc += sp.xi[y] * (gamma * v[y] - sp.lam_p) - corr[y];
    }
    mdp.cost(x, a) + acc / samples.len() as f64
}

/// Exact dynamic gradient by enumeration: the discounted state occupancy of
/// the density-weighted chain, times the policy scores weighted by the
/// stage-wise costs.
pub fn grad_dynamic_exact(
    mdp: &Mdp,
    policy: &SoftmaxPolicy,
    env: &RiskEnvelope,
    tol: f64,
    opts: &SolverOpts,
) -> Result<GradEstimate, RiskError> {
    if mdp.n_states() * mdp.n_actions() > 10_000 {
        return Err(RiskError::InvalidConfig(
            "exact dynamic gradient needs n_states * n_actions <= 10000".into(),
        ));
    }
    let (vf, saddles) = solve_value_exact(mdp, policy, env, tol, opts)?;
    let v = vf.to_tabular(mdp.n_states());
    let kernel = induced_kernel(mdp, policy);
    let n = mdp.n_states();

    // Density-weighted chain and its (unnormalized) discounted occupancy.
    let mut pxi = DMatrix::zeros(n, n);
    for x in 0..n {
        for y in 0..n {
            pxi[(x, y)] = kernel[(x, y)] * saddles.saddles[x].xi[y];
        }
    }
    let mut sys = DMatrix::identity(n, n) - pxi.transpose() * mdp.gamma();
    let mut e0 = DVector::zeros(n);
    e0[mdp.x0()] = 1.0;
    let occupancy = sys.clone().lu().solve(&e0).ok_or_else(|| {
        sys.fill(0.0);
        RiskError::InvalidMdp("occupancy system is singular".into())
    })?;

    let mut grad = DVector::zeros(policy.theta_dim());
    for x in 0..n {
        if occupancy[x] == 0.0 {
            continue;
        }
        let dist_x = dist_from_row(&kernel.row(x).transpose())?;
        let probs = policy.probs(x);
        for a in 0..mdp.n_actions() {
            let h = stage_cost_h_exact(mdp, env, &v, x, a, &saddles.saddles[x], &dist_x);
            grad += policy.score(x, a) * (occupancy[x] * probs[a] * h);
        }
    }
    Ok(GradEstimate {
        grad,
        n_samples: 0,
        diagnostics: GradDiagnostics::default(),
    })
}

/// Two-phase sampling estimator of the dynamic gradient.
///
/// Phase 1 rolls `n_traj` trajectories under the density-weighted kernel;
/// phase 2 estimates the stage-wise cost of each encountered state-action
/// pair from `n_inner` next-state draws (cached per pair, as are the
/// per-state saddles).
#[allow(clippy::too_many_arguments)]
pub fn grad_dynamic_twophase(
    mdp: &Mdp,
    policy: &SoftmaxPolicy,
    env: &RiskEnvelope,
    vf: &ValueFn,
    n_traj: usize,
    n_inner: Option<usize>,
    horizon: usize,
    rng: &mut ChaCha8Rng,
    opts: &SolverOpts,
) -> Result<GradEstimate, RiskError> {
    if n_traj == 0 || horizon == 0 {
        return Err(RiskError::NoSamples);
    }
    let n_inner = n_inner.unwrap_or(n_traj);
    let n = mdp.n_states();
    let gamma = mdp.gamma();
    let v = vf.to_tabular(n);
    let kernel = induced_kernel(mdp, policy);
    let z = CostVariable::new((&v * gamma).iter().copied().collect())?;

    // Saddles once per state at the critic's value function.
    let mut saddles = Vec::with_capacity(n);
    let mut dists = Vec::with_capacity(n);
    for x in 0..n {
        let dist = dist_from_row(&kernel.row(x).transpose())?;
        let (_, sp) = evaluate_risk(env, &dist, &z, opts).map_err(|e| RiskError::AtState {
            state: x,
            source: Box::new(e),
        })?;
        saddles.push(sp);
        dists.push(dist);
    }
    let mut pxi = DMatrix::zeros(n, n);
    for x in 0..n {
        for y in 0..n {
            pxi[(x, y)] = kernel[(x, y)] * saddles[x].xi[y];
        }
    }

    let mut h_cache: HashMap<(usize, usize), f64> = HashMap::new();
    let mut grad = DVector::zeros(policy.theta_dim());
    for _ in 0..n_traj {
        let traj = simulate(mdp, policy, horizon, rng, Some(&pxi));
        let mut disc = 1.0;
        for &(x, a, _) in &traj.steps {
            let h = *h_cache.entry((x, a)).or_insert_with(|| {
                let row = mdp.kernel_row(x, a);
                let samples: Vec<usize> = (0..n_inner).map(|_| sample_index(&row, rng)).collect();
                stage_cost_h_sampled(mdp, env, &v, x, a, &saddles[x], &dists[x], &samples)
            });
            grad += policy.score(x, a) * (disc * h);
            disc *= gamma;
        }
    }
    grad /= n_traj as f64;
    Ok(GradEstimate {
        grad,
        n_samples: n_traj,
        diagnostics: GradDiagnostics {
            horizon_truncated: horizon < mdp.horizon_for(1e-6),
            ..Default::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::{make_cvar, make_expectation, make_msd};
    use crate::mdp::{Cost, FeatureMap};
    use crate::probspace::stream;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random_mdp(n_states: usize, n_actions: usize, gamma: f64, rng: &mut ChaCha8Rng) -> Mdp {
        let kernel = (0..n_actions)
            .map(|_| {
                DMatrix::from_fn(n_states, n_states, |_, _| rng.gen::<f64>() + 0.1).normalize_rows()
            })
            .collect();
        let cost = Cost::StateAction(DMatrix::from_fn(n_states, n_actions, |_, _| {
            rng.gen::<f64>() * 2.0 - 1.0
        }));
        Mdp::new(cost, kernel, gamma, 0).unwrap()
    }

    trait NormalizeRows {
        fn normalize_rows(self) -> Self;
    }
    impl NormalizeRows for DMatrix<f64> {
        fn normalize_rows(mut self) -> Self {
            for mut row in self.row_iter_mut() {
                let s: f64 = row.iter().sum();
                row /= s;
            }
            self
        }
    }

    fn random_policy(mdp: &Mdp, rng: &mut ChaCha8Rng) -> SoftmaxPolicy {
        let dim = mdp.n_states() * mdp.n_actions();
        let theta: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect();
        SoftmaxPolicy::new(theta, FeatureMap::one_hot(mdp.n_states(), mdp.n_actions())).unwrap()
    }

    #[test]
    fn bellman_expectation_is_classical_backup() {
        let mut rng = stream(1, 0);
        let mdp = random_mdp(4, 2, 0.7, &mut rng);
        let pol = random_policy(&mdp, &mut rng);
        let env = make_expectation();
        let v = DVector::from_fn(4, |i, _| i as f64 - 1.5);
        let (tv, _) = bellman_apply(&mdp, &pol, &env, &v, &SolverOpts::default()).unwrap();
        let k = induced_kernel(&mdp, &pol);
        for x in 0..4 {
            let expect = policy_cost(&mdp, &pol, x) + 0.7 * k.row(x).transpose().dot(&v);
            assert_abs_diff_eq!(tv[x], expect, epsilon = 1e-10);
        }
    }

    #[test]
    fn bellman_zero_value_gives_stage_cost() {
        let mut rng = stream(2, 0);
        let mdp = random_mdp(3, 2, 0.9, &mut rng);
        let pol = random_policy(&mdp, &mut rng);
        let env = make_cvar(0.6).unwrap();
        let v = DVector::zeros(3);
        let (tv, _) = bellman_apply(&mdp, &pol, &env, &v, &SolverOpts::default()).unwrap();
        for x in 0..3 {
            assert_abs_diff_eq!(tv[x], policy_cost(&mdp, &pol, x), epsilon = 1e-12);
        }
    }

    #[test]
    fn bellman_cvar_matches_tail_fill_oracle() {
        // Independent check of the per-state maximization via the greedy
        // tail fill over the box polytope.
        let mut rng = stream(3, 0);
        let mdp = random_mdp(2, 2, 0.8, &mut rng);
        let pol = random_policy(&mdp, &mut rng);
        let alpha = 0.5;
        let env = make_cvar(alpha).unwrap();
        let v = DVector::from_vec(vec![1.0, -2.0]);
        let (tv, _) = bellman_apply(&mdp, &pol, &env, &v, &SolverOpts::default()).unwrap();
        let k = induced_kernel(&mdp, &pol);
        for x in 0..2 {
            let p: Vec<f64> = k.row(x).iter().copied().collect();
            let z: Vec<f64> = v.iter().map(|&vi| 0.8 * vi).collect();
            let mut idx: Vec<usize> = vec![0, 1];
            idx.sort_by(|&a, &b| z[b].total_cmp(&z[a]));
            let mut mass = alpha;
            let mut rho = 0.0;
            for &i in &idx {
                let take = p[i].min(mass);
                rho += take * z[i];
                mass -= take;
                if mass <= 0.0 {
                    break;
                }
            }
            rho /= alpha;
            assert_abs_diff_eq!(tv[x], policy_cost(&mdp, &pol, x) + rho, epsilon = 1e-10);
        }
    }

    #[test]
    fn bellman_is_gamma_contraction_and_monotone() {
        let mut rng = stream(4, 0);
        let mdp = random_mdp(4, 2, 0.8, &mut rng);
        let pol = random_policy(&mdp, &mut rng);
        let envs = [make_cvar(0.4).unwrap(), make_msd(0.7).unwrap()];
        let opts = SolverOpts::default();
        for _ in 0..100 {
            let v1 = DVector::from_fn(4, |_, _| rng.gen::<f64>() * 4.0 - 2.0);
            let v2 = DVector::from_fn(4, |_, _| rng.gen::<f64>() * 4.0 - 2.0);
            for env in &envs {
                let (t1, _) = bellman_apply(&mdp, &pol, env, &v1, &opts).unwrap();
                let (t2, _) = bellman_apply(&mdp, &pol, env, &v2, &opts).unwrap();
                let lhs = (&t1 - &t2).amax();
                let rhs = 0.8 * (&v1 - &v2).amax();
                assert!(lhs <= rhs + 1e-9, "contraction: {lhs} > {rhs}");

                // Monotonicity: T[min] <= T[max] elementwise.
                let lo = v1.zip_map(&v2, f64::min);
                let hi = v1.zip_map(&v2, f64::max);
                let (tlo, _) = bellman_apply(&mdp, &pol, env, &lo, &opts).unwrap();
                let (thi, _) = bellman_apply(&mdp, &pol, env, &hi, &opts).unwrap();
                for x in 0..4 {
                    assert!(tlo[x] <= thi[x] + 1e-9);
                }
            }
        }
    }

    #[test]
    fn value_iteration_expectation_matches_linear_solve() {
        let mut rng = stream(5, 0);
        let mdp = random_mdp(5, 2, 0.85, &mut rng);
        let pol = random_policy(&mdp, &mut rng);
        let env = make_expectation();
        let (vf, _) = solve_value_exact(&mdp, &pol, &env, 1e-10, &SolverOpts::default()).unwrap();
        let v = vf.to_tabular(5);
        // (I - gamma P) V = C_theta
        let k = induced_kernel(&mdp, &pol);
        let sys = DMatrix::identity(5, 5) - k * 0.85;
        let c = DVector::from_fn(5, |x, _| policy_cost(&mdp, &pol, x));
        let direct = sys.lu().solve(&c).unwrap();
        assert!((v - direct).amax() < 1e-9);
    }

    #[test]
    fn tiny_gamma_gives_stage_cost() {
        let k = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        let mdp = Mdp::new(
            Cost::State(DVector::from_vec(vec![1.0, -1.0])),
            vec![k],
            1e-9,
            0,
        )
        .unwrap();
        let pol = SoftmaxPolicy::new(vec![0.0, 0.0], FeatureMap::one_hot(2, 1)).unwrap();
        let env = make_cvar(0.7).unwrap();
        let (vf, _) = solve_value_exact(&mdp, &pol, &env, 1e-12, &SolverOpts::default()).unwrap();
        let v = vf.to_tabular(2);
        assert_abs_diff_eq!(v[0], 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(v[1], -1.0, epsilon = 1e-8);
    }

    #[test]
    fn value_iteration_self_consistent_on_worst_case_kernel() {
        // Policy evaluation on the density-weighted kernel frozen at
        // convergence must reproduce the value function.
        let mut rng = stream(6, 0);
        let mdp = random_mdp(4, 2, 0.75, &mut rng);
        let pol = random_policy(&mdp, &mut rng);
        let env = make_cvar(0.8).unwrap();
        let (vf, saddles) =
            solve_value_exact(&mdp, &pol, &env, 1e-10, &SolverOpts::default()).unwrap();
        let v = vf.to_tabular(4);
        let k = induced_kernel(&mdp, &pol);
        let mut pxi = DMatrix::zeros(4, 4);
        for x in 0..4 {
            for y in 0..4 {
                pxi[(x, y)] = k[(x, y)] * saddles.saddles[x].xi[y];
            }
        }
        let sys = DMatrix::identity(4, 4) - pxi * 0.75;
        let c = DVector::from_fn(4, |x, _| policy_cost(&mdp, &pol, x));
        let veval = sys.lu().solve(&c).unwrap();
        assert!((v - veval).amax() < 1e-6);
    }

    #[test]
    fn fixed_point_unique_from_both_ends() {
        let mut rng = stream(7, 0);
        let mdp = random_mdp(4, 2, 0.8, &mut rng);
        let pol = random_policy(&mdp, &mut rng);
        let env = make_cvar(0.9).unwrap();
        let opts = SolverOpts::default();
        let tol = 1e-9;
        // From V = 0.
        let (v_lo, _) = solve_value_exact(&mdp, &pol, &env, tol, &opts).unwrap();
        // From V = Cmax / (1 - gamma).
        let hi = mdp.cost_bound() / (1.0 - mdp.gamma());
        let mut v = DVector::from_element(4, hi);
        let stop = tol * (1.0 - mdp.gamma()) / mdp.gamma();
        for _ in 0..2000 {
            let (next, _) = bellman_apply(&mdp, &pol, &env, &v, &opts).unwrap();
            let delta = (&next - &v).amax();
            v = next;
            if delta < stop {
                break;
            }
        }
        assert!((v_lo.to_tabular(4) - v).amax() < 2.0 * tol);
    }

    #[test]
    fn xi_weighted_kernel_rows_are_stochastic() {
        let mut rng = stream(8, 0);
        let mdp = random_mdp(5, 2, 0.6, &mut rng);
        let pol = random_policy(&mdp, &mut rng);
        for env in [make_cvar(0.7).unwrap(), make_msd(0.9).unwrap()] {
            let (_, saddles) =
                solve_value_exact(&mdp, &pol, &env, 1e-9, &SolverOpts::default()).unwrap();
            let k = induced_kernel(&mdp, &pol);
            for x in 0..5 {
                let mass: f64 = (0..5).map(|y| k[(x, y)] * saddles.saddles[x].xi[y]).sum();
                assert!((mass - 1.0).abs() < 1e-8, "row {x} mass {mass}");
            }
        }
    }

    #[test]
    fn prsvi_tabular_exact_kernel_matches_value_iteration() {
        let mut rng = stream(9, 0);
        let mdp = random_mdp(3, 2, 0.5, &mut rng);
        let pol = random_policy(&mdp, &mut rng);
        let env = make_cvar(0.8).unwrap();
        let (vf, _) = solve_value_exact(&mdp, &pol, &env, 1e-12, &SolverOpts::default()).unwrap();
        // Trajectory covering all states; transitions are irrelevant in
        // exact-kernel mode.
        let traj = simulate(&mdp, &pol, 300, &mut stream(10, 0), None);
        let visited: std::collections::HashSet<usize> = traj.steps.iter().map(|s| s.0).collect();
        assert_eq!(visited.len(), 3, "trajectory must cover all states");
        let cfg = PrsviConfig {
            reg: Some(0.0),
            kernel: KernelSource::Exact,
            k_iters: 500,
            ..Default::default()
        };
        let v = prsvi(&mdp, &pol, &env, &traj, &DMatrix::identity(3, 3), &cfg).unwrap();
        assert!((v - vf.to_tabular(3)).amax() < 1e-8);
    }

    #[test]
    fn prsvi_expectation_identity_features_is_td_fixed_point() {
        let mut rng = stream(11, 0);
        let mdp = random_mdp(3, 2, 0.7, &mut rng);
        let pol = random_policy(&mdp, &mut rng);
        let env = make_expectation();
        let traj = simulate(&mdp, &pol, 300, &mut stream(12, 0), None);
        let cfg = PrsviConfig {
            reg: Some(0.0),
            kernel: KernelSource::Exact,
            k_iters: 500,
            ..Default::default()
        };
        let v = prsvi(&mdp, &pol, &env, &traj, &DMatrix::identity(3, 3), &cfg).unwrap();
        let k = induced_kernel(&mdp, &pol);
        let sys = DMatrix::identity(3, 3) - k * 0.7;
        let c = DVector::from_fn(3, |x, _| policy_cost(&mdp, &pol, x));
        let direct = sys.lu().solve(&c).unwrap();
        assert!((v - direct).amax() < 1e-8);
    }

    #[test]
    fn prsvi_constant_feature_constant_cost() {
        let k = DMatrix::from_row_slice(2, 2, &[0.3, 0.7, 0.6, 0.4]);
        let mdp = Mdp::new(
            Cost::State(DVector::from_vec(vec![2.0, 2.0])),
            vec![k],
            0.5,
            0,
        )
        .unwrap();
        let pol = SoftmaxPolicy::new(vec![0.0, 0.0], FeatureMap::one_hot(2, 1)).unwrap();
        let env = make_expectation();
        let traj = simulate(&mdp, &pol, 100, &mut stream(13, 0), None);
        let features = DMatrix::from_element(2, 1, 1.0);
        let cfg = PrsviConfig {
            reg: Some(0.0),
            kernel: KernelSource::Exact,
            ..Default::default()
        };
        let v = prsvi(&mdp, &pol, &env, &traj, &features, &cfg).unwrap();
        assert_abs_diff_eq!(v[0], 2.0 / 0.5, epsilon = 1e-9);
    }

    #[test]
    fn prsvi_rejects_contraction_violation() {
        let mut rng = stream(14, 0);
        let mdp = random_mdp(3, 2, 0.9, &mut rng);
        let pol = random_policy(&mdp, &mut rng);
        // gamma / alpha = 0.9 / 0.5 = 1.8 >= 1.
        let env = make_cvar(0.5).unwrap();
        let traj = simulate(&mdp, &pol, 100, &mut stream(15, 0), None);
        let cfg = PrsviConfig::default();
        assert!(matches!(
            prsvi(&mdp, &pol, &env, &traj, &DMatrix::identity(3, 3), &cfg),
            Err(RiskError::ContractionFails { .. })
        ));
    }

    #[test]
    fn stage_cost_expectation_structure() {
        // h = C(x, a) + gamma E_{P(.|x,a)}[V] - lam_p, with lam_p the
        // state's expected discounted next value.
        let mut rng = stream(16, 0);
        let mdp = random_mdp(3, 2, 0.8, &mut rng);
        let pol = random_policy(&mdp, &mut rng);
        let env = make_expectation();
        let (vf, saddles) =
            solve_value_exact(&mdp, &pol, &env, 1e-10, &SolverOpts::default()).unwrap();
        let v = vf.to_tabular(3);
        let k = induced_kernel(&mdp, &pol);
        for x in 0..3 {
            let dist = dist_from_row(&k.row(x).transpose()).unwrap();
            for a in 0..2 {
                let h = stage_cost_h_exact(&mdp, &env, &v, x, a, &saddles.saddles[x], &dist);
                let row = mdp.kernel_row(x, a);
                let expect =
                    mdp.cost(x, a) + 0.8 * row.dot(&v) - 0.8 * k.row(x).transpose().dot(&v);
                assert_abs_diff_eq!(h, expect, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn stage_cost_cvar_matches_manual_enumeration() {
        let mut rng = stream(17, 0);
        let mdp = random_mdp(3, 2, 0.6, &mut rng);
        let pol = random_policy(&mdp, &mut rng);
        let env = make_cvar(0.7).unwrap();
        let (vf, saddles) =
            solve_value_exact(&mdp, &pol, &env, 1e-10, &SolverOpts::default()).unwrap();
        let v = vf.to_tabular(3);
        let k = induced_kernel(&mdp, &pol);
        for x in 0..3 {
            let dist = dist_from_row(&k.row(x).transpose()).unwrap();
            let sp = &saddles.saddles[x];
            for a in 0..2 {
                let h = stage_cost_h_exact(&mdp, &env, &v, x, a, sp, &dist);
                // Manual term-by-term sum (CVaR has no dp correction).
                let row = mdp.kernel_row(x, a);
                let mut expect = mdp.cost(x, a);
                for y in 0..3 {
                    expect += row[y] * sp.xi[y] * (0.6 * v[y] - sp.lam_p);
                }
                assert_abs_diff_eq!(h, expect, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn stage_cost_sampled_converges_to_exact() {
        let mut rng = stream(18, 0);
        let mdp = random_mdp(3, 2, 0.6, &mut rng);
        let pol = random_policy(&mdp, &mut rng);
        let env = make_cvar(0.8).unwrap();
        let (vf, saddles) =
            solve_value_exact(&mdp, &pol, &env, 1e-10, &SolverOpts::default()).unwrap();
        let v = vf.to_tabular(3);
        let k = induced_kernel(&mdp, &pol);
        let x = 1;
        let a = 0;
        let dist = dist_from_row(&k.row(x).transpose()).unwrap();
        let sp = &saddles.saddles[x];
        let exact = stage_cost_h_exact(&mdp, &env, &v, x, a, sp, &dist);
        let mut ok = 0;
        for seed in 0..20u64 {
            let mut r = stream(seed, 4);
            let row = mdp.kernel_row(x, a);
            let samples: Vec<usize> = (0..10_000).map(|_| sample_index(&row, &mut r)).collect();
            let est = stage_cost_h_sampled(&mdp, &env, &v, x, a, sp, &dist, &samples);
            if (est - exact).abs() / (1.0 + exact.abs()) < 0.02 {
                ok += 1;
            }
        }
        assert!(ok >= 19, "only {ok}/20 within 2%");
    }

    fn fd_dynamic_gradient(
        mdp: &Mdp,
        policy: &SoftmaxPolicy,
        env: &RiskEnvelope,
        h: f64,
    ) -> DVector<f64> {
        let opts = SolverOpts::default();
        DVector::from_fn(policy.theta_dim(), |k, _| {
            let mut up: Vec<f64> = policy.theta().iter().copied().collect();
            up[k] += h;
            let mut dn: Vec<f64> = policy.theta().iter().copied().collect();
            dn[k] -= h;
            let (vu, _) =
                solve_value_exact(mdp, &policy.with_theta(&up).unwrap(), env, 1e-11, &opts)
                    .unwrap();
            let (vd, _) =
                solve_value_exact(mdp, &policy.with_theta(&dn).unwrap(), env, 1e-11, &opts)
                    .unwrap();
            (vu.value(mdp.x0()) - vd.value(mdp.x0())) / (2.0 * h)
        })
    }

    #[test]
    fn dynamic_exact_expectation_matches_finite_differences() {
        let mut rng = stream(19, 0);
        let mdp = random_mdp(3, 2, 0.6, &mut rng);
        let pol = random_policy(&mdp, &mut rng);
        let env = make_expectation();
        let g = grad_dynamic_exact(&mdp, &pol, &env, 1e-11, &SolverOpts::default())
            .unwrap()
            .grad;
        let fd = fd_dynamic_gradient(&mdp, &pol, &env, 1e-6);
        let rel = (&g - &fd).amax() / (1.0 + fd.amax());
        assert!(rel < 1e-5, "rel err {rel}");
    }

    #[test]
    fn dynamic_exact_expectation_equals_classical_policy_gradient() {
        // Independent oracle: occupancy of the plain induced chain times
        // score-weighted Q values.
        let mut rng = stream(24, 0);
        let mdp = random_mdp(4, 2, 0.7, &mut rng);
        let pol = random_policy(&mdp, &mut rng);
        let env = make_expectation();
        let g = grad_dynamic_exact(&mdp, &pol, &env, 1e-12, &SolverOpts::default())
            .unwrap()
            .grad;

        let n = mdp.n_states();
        let k = induced_kernel(&mdp, &pol);
        let sys = DMatrix::identity(n, n) - k.clone() * mdp.gamma();
        let c = DVector::from_fn(n, |x, _| policy_cost(&mdp, &pol, x));
        let v = sys.clone().lu().solve(&c).unwrap();
        let mut e0 = DVector::zeros(n);
        e0[mdp.x0()] = 1.0;
        let occ = (DMatrix::identity(n, n) - k.transpose() * mdp.gamma())
            .lu()
            .solve(&e0)
            .unwrap();
        let mut classical = DVector::zeros(pol.theta_dim());
        for x in 0..n {
            let probs = pol.probs(x);
            for a in 0..mdp.n_actions() {
                let q = mdp.cost(x, a) + mdp.gamma() * mdp.kernel_row(x, a).dot(&v);
                classical += pol.score(x, a) * (occ[x] * probs[a] * q);
            }
        }
        assert!(
            (g - classical).amax() < 1e-8,
            "exact dynamic gradient differs from the classical policy gradient"
        );
    }

    #[test]
    fn dynamic_exact_single_action_gradient_is_zero() {
        let k = DMatrix::from_row_slice(2, 2, &[0.4, 0.6, 0.3, 0.7]);
        let mdp = Mdp::new(
            Cost::State(DVector::from_vec(vec![1.0, -1.0])),
            vec![k],
            0.7,
            0,
        )
        .unwrap();
        let pol = SoftmaxPolicy::new(vec![0.1, -0.2], FeatureMap::one_hot(2, 1)).unwrap();
        let env = make_cvar(0.9).unwrap();
        let g = grad_dynamic_exact(&mdp, &pol, &env, 1e-10, &SolverOpts::default()).unwrap();
        assert!(g.grad.amax() < 1e-12);
    }

    #[test]
    fn dynamic_exact_cvar_matches_finite_differences() {
        let mut rng = stream(20, 0);
        for trial in 0..3 {
            let mdp = random_mdp(3, 2, 0.5, &mut rng);
            let pol = random_policy(&mdp, &mut rng);
            let env = make_cvar(0.8).unwrap();
            let g = grad_dynamic_exact(&mdp, &pol, &env, 1e-11, &SolverOpts::default())
                .unwrap()
                .grad;
            let fd = fd_dynamic_gradient(&mdp, &pol, &env, 1e-6);
            let rel = (&g - &fd).amax() / (1.0 + fd.amax());
            assert!(rel < 1e-4, "trial {trial}: rel err {rel}");
        }
    }

    #[test]
    fn dynamic_exact_msd_matches_finite_differences() {
        // Exercises the measure-derivative correction terms in h.
        let mut rng = stream(21, 0);
        let mdp = random_mdp(3, 2, 0.5, &mut rng);
        let pol = random_policy(&mdp, &mut rng);
        let env = make_msd(0.6).unwrap();
        let g = grad_dynamic_exact(&mdp, &pol, &env, 1e-11, &SolverOpts::default())
            .unwrap()
            .grad;
        let fd = fd_dynamic_gradient(&mdp, &pol, &env, 1e-6);
        let rel = (&g - &fd).amax() / (1.0 + fd.amax());
        assert!(rel < 1e-4, "rel err {rel}");
    }

    #[test]
    fn twophase_zero_cost_gradient_is_zero() {
        let k = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        let mdp = Mdp::new(Cost::State(DVector::zeros(2)), vec![k], 0.5, 0).unwrap();
        let pol = SoftmaxPolicy::new(vec![0.0, 0.0], FeatureMap::one_hot(2, 1)).unwrap();
        let env = make_cvar(0.8).unwrap();
        let (vf, _) = solve_value_exact(&mdp, &pol, &env, 1e-10, &SolverOpts::default()).unwrap();
        let g = grad_dynamic_twophase(
            &mdp,
            &pol,
            &env,
            &vf,
            50,
            None,
            10,
            &mut stream(22, 0),
            &SolverOpts::default(),
        )
        .unwrap();
        assert!(g.grad.amax() < 1e-12);
    }

    #[test]
    fn twophase_consistent_with_exact_on_expectation() {
        let mut rng = stream(25, 0);
        let mdp = random_mdp(3, 2, 0.5, &mut rng);
        let pol = random_policy(&mdp, &mut rng);
        let env = make_expectation();
        let opts = SolverOpts::default();
        let exact = grad_dynamic_exact(&mdp, &pol, &env, 1e-11, &opts)
            .unwrap()
            .grad;
        let (vf, _) = solve_value_exact(&mdp, &pol, &env, 1e-11, &opts).unwrap();
        let horizon = mdp.horizon_for(1e-6);
        let mut ok = 0;
        for seed in 0..10u64 {
            let g = grad_dynamic_twophase(
                &mdp,
                &pol,
                &env,
                &vf,
                10_000,
                None,
                horizon,
                &mut stream(seed, 6),
                &opts,
            )
            .unwrap();
            if (&g.grad - &exact).amax() / (1.0 + exact.amax()) < 0.05 {
                ok += 1;
            }
        }
        assert!(ok >= 9, "only {ok}/10 seeds within 5%");
    }

    #[test]
    fn twophase_consistent_with_exact_on_cvar() {
        let mut rng = stream(23, 0);
        let mdp = random_mdp(3, 2, 0.5, &mut rng);
        let pol = random_policy(&mdp, &mut rng);
        let env = make_cvar(0.8).unwrap();
        let opts = SolverOpts::default();
        let exact = grad_dynamic_exact(&mdp, &pol, &env, 1e-11, &opts)
            .unwrap()
            .grad;
        let (vf, _) = solve_value_exact(&mdp, &pol, &env, 1e-11, &opts).unwrap();
        let horizon = mdp.horizon_for(1e-6);
        let mut ok = 0;
        for seed in 0..10u64 {
            let g = grad_dynamic_twophase(
                &mdp,
                &pol,
                &env,
                &vf,
                5000,
                None,
                horizon,
                &mut stream(seed, 5),
                &opts,
            )
            .unwrap();
            let rel = (&g.grad - &exact).amax() / (1.0 + exact.amax());
            if rel < 0.1 {
                ok += 1;
            }
        }
        assert!(ok >= 9, "only {ok}/10 seeds within 10%");
    }

    #[test]
    fn value_fn_json_round_trip() {
        let v = ValueFn::Tabular(DVector::from_vec(vec![1.0, -2.5, 0.25]));
        let text = v.to_json();
        let back = ValueFn::from_json(&text).unwrap();
        assert_eq!(back.to_tabular(3), v.to_tabular(3));

        let lin = ValueFn::Linear {
            weights: DVector::from_vec(vec![0.5, 1.5]),
            features: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
        };
        let back = ValueFn::from_json(&lin.to_json()).unwrap();
        assert_eq!(back.to_tabular(2), lin.to_tabular(2));
    }
}
