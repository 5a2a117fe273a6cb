//! Risk envelopes in canonical constraint form, risk evaluation, and analytic
//! saddle points for the built-in measures.
//!
//! A coherent risk measure is represented by its envelope: the set of
//! reweighting densities `xi` with `sum_w P(w) xi(w) = 1`, `xi >= 0`, affine
//! equality constraints `g_e(xi, p) = 0` and convex inequality constraints
//! `f_i(xi, p) <= 0`. The risk value is the maximal `xi`-weighted expectation
//! over the envelope.
//!
//! Built-ins:
//! - expectation: the single density `xi = 1`;
//! - CVaR(alpha): the box `0 <= xi <= 1/alpha`;
//! - mean-semideviation(alpha): handled in the lifted form `xi' = 1 +
//!   alpha*(w - E[w])` with `||w||_{2,P} <= 1`, `w >= 0`. The solver variable
//!   is `w`; the density is recovered through the affine map. The inequality
//!   constraints of this form depend on `p` (the weighted norm), so their
//!   per-outcome `p`-derivatives enter the gradient formulas; they are
//!   `d f_ball / d p(w) = w(w)^2`, verified against finite differences in the
//!   tests.
//!
//! Custom envelopes supply the constraint callbacks directly in density
//! space; that is the extension point for measures we do not ship (e.g.
//! spectral risk measures).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::RiskError;
use crate::probspace::{CostVariable, FiniteDist};
use crate::saddle::{self, EnvelopeProgram};

/// Primal optimizer and KKT multipliers of the envelope Lagrangian.
#[derive(Debug, Clone)]
pub struct SaddlePoint {
    /// Maximizing density; `sum_w P(w) xi(w) = 1`.
    pub xi: DVector<f64>,
    /// Solver variable; equals `xi` except for envelopes with a lifted form.
    pub primal: DVector<f64>,
    /// Multiplier of the normalization constraint.
    pub lam_p: f64,
    /// Multipliers of the affine equality constraints.
    pub lam_e: DVector<f64>,
    /// Multipliers of the convex inequality constraints; nonnegative.
    pub lam_i: DVector<f64>,
    /// Risk value at the saddle.
    pub objective: f64,
}

/// Constraint values at `(xi, p)` as a vector.
pub type ConstraintFn = Box<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
/// Constraint Jacobian at `(xi, p)`: one row per constraint.
pub type JacobianFn = Box<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
/// Weighted Hessian sum `sum_i weights[i] * hess f_i(xi)` at
/// `(weights, xi, p)`.
pub type WeightedHessFn =
    Box<dyn Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
/// A strictly feasible density for a given `p`.
pub type FeasiblePointFn = Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Callback-defined envelope in density space.
///
/// All callbacks take `(xi, p)`. Equality constraints must be affine in `xi`,
/// inequality constraints convex in `xi`; both twice differentiable in `p`
/// with per-outcome derivatives bounded by `bound_m`.
pub struct CustomEnvelope {
    pub n_eq: usize,
    pub n_ineq: usize,
    pub eval_g: ConstraintFn,
    pub eval_f: ConstraintFn,
    /// Jacobian of `g` in `xi`: `n_eq x n`.
    pub grad_g: JacobianFn,
    /// Jacobian of `f` in `xi`: `n_ineq x n`.
    pub grad_f: JacobianFn,
    /// `None` when every `f_i` is affine.
    pub hess_f: Option<WeightedHessFn>,
    /// Per-outcome derivatives `d g_e / d p(w)`: `n_eq x n`.
    pub dg_dp: JacobianFn,
    /// Per-outcome derivatives `d f_i / d p(w)`: `n_ineq x n`.
    pub df_dp: JacobianFn,
    /// Uniform bound on the `p`-derivatives above.
    pub bound_m: f64,
    pub feasible: FeasiblePointFn,
}

pub(crate) enum EnvelopeKind {
    Expectation,
    Cvar { alpha: f64 },
    Msd { alpha: f64 },
    Custom(CustomEnvelope),
}

/// Canonical representation of a coherent risk measure.
pub struct RiskEnvelope {
    kind: EnvelopeKind,
}

impl std::fmt::Debug for RiskEnvelope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RiskEnvelope({})", self.label())
    }
}

/// The trivial envelope whose only density is `xi = 1`; the risk is the
/// plain expectation.
pub fn make_expectation() -> RiskEnvelope {
    RiskEnvelope {
        kind: EnvelopeKind::Expectation,
    }
}

/// CVaR at level `alpha` in `(0, 1]`: box constraints `0 <= xi <= 1/alpha`.
pub fn make_cvar(alpha: f64) -> Result<RiskEnvelope, RiskError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(RiskError::InvalidAlpha(alpha));
    }
    Ok(RiskEnvelope {
        kind: EnvelopeKind::Cvar { alpha },
    })
}

/// Mean-semideviation with trade-off `alpha` in `[0, 1]`:
/// `rho(Z) = E[Z] + alpha * (E[(Z - E[Z])_+^2])^(1/2)`.
pub fn make_msd(alpha: f64) -> Result<RiskEnvelope, RiskError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(RiskError::InvalidAlpha(alpha));
    }
    Ok(RiskEnvelope {
        kind: EnvelopeKind::Msd { alpha },
    })
}

/// Wraps user-supplied envelope callbacks.
pub fn make_custom(c: CustomEnvelope) -> RiskEnvelope {
    RiskEnvelope {
        kind: EnvelopeKind::Custom(c),
    }
}

impl RiskEnvelope {
    pub(crate) fn kind(&self) -> &EnvelopeKind {
        &self.kind
    }

    pub fn label(&self) -> String {
        match &self.kind {
            EnvelopeKind::Expectation => "expectation".into(),
            EnvelopeKind::Cvar { alpha } => format!("cvar({alpha})"),
            EnvelopeKind::Msd { alpha } => format!("msd({alpha})"),
            EnvelopeKind::Custom(_) => "custom".into(),
        }
    }

    pub fn n_eq(&self, n: usize) -> usize {
        match &self.kind {
            EnvelopeKind::Expectation => n,
            EnvelopeKind::Cvar { .. } | EnvelopeKind::Msd { .. } => 0,
            EnvelopeKind::Custom(c) => c.n_eq,
        }
    }

    pub fn n_ineq(&self, n: usize) -> usize {
        match &self.kind {
            EnvelopeKind::Expectation => 0,
            EnvelopeKind::Cvar { .. } => 2 * n,
            EnvelopeKind::Msd { .. } => 1 + n,
            EnvelopeKind::Custom(c) => c.n_ineq,
        }
    }

    /// Equality constraint values at `(w, p)`.
    pub fn eval_g(&self, w: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            EnvelopeKind::Expectation => w.map(|v| v - 1.0),
            EnvelopeKind::Cvar { .. } | EnvelopeKind::Msd { .. } => DVector::zeros(0),
            EnvelopeKind::Custom(c) => (c.eval_g)(w, p),
        }
    }

    /// Inequality constraint values at `(w, p)`.
    pub fn eval_f(&self, w: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            EnvelopeKind::Expectation => DVector::zeros(0),
            EnvelopeKind::Cvar { alpha } => {
                let n = w.len();
                let cap = 1.0 / alpha;
                let mut f = DVector::zeros(2 * n);
                for i in 0..n {
                    f[i] = -w[i];
                    f[n + i] = w[i] - cap;
                }
                f
            }
            EnvelopeKind::Msd { .. } => {
                let n = w.len();
                let mut f = DVector::zeros(1 + n);
                f[0] = (0..n).map(|i| p[i] * w[i] * w[i]).sum::<f64>() - 1.0;
                for i in 0..n {
                    f[1 + i] = -w[i];
                }
                f
            }
            EnvelopeKind::Custom(c) => (c.eval_f)(w, p),
        }
    }

    /// Dense Jacobian of the equality constraints in the solver variable.
    pub fn grad_g(&self, w: &DVector<f64>, p: &DVector<f64>) -> DMatrix<f64> {
        match &self.kind {
            EnvelopeKind::Expectation => DMatrix::identity(w.len(), w.len()),
            EnvelopeKind::Cvar { .. } | EnvelopeKind::Msd { .. } => DMatrix::zeros(0, w.len()),
            EnvelopeKind::Custom(c) => (c.grad_g)(w, p),
        }
    }

    /// Dense Jacobian of the inequality constraints in the solver variable.
    pub fn grad_f(&self, w: &DVector<f64>, p: &DVector<f64>) -> DMatrix<f64> {
        match &self.kind {
            EnvelopeKind::Expectation => DMatrix::zeros(0, w.len()),
            EnvelopeKind::Cvar { .. } => {
                let n = w.len();
                let mut m = DMatrix::zeros(2 * n, n);
                for i in 0..n {
                    m[(i, i)] = -1.0;
                    m[(n + i, i)] = 1.0;
                }
                m
            }
            EnvelopeKind::Msd { .. } => {
                let n = w.len();
                let mut m = DMatrix::zeros(1 + n, n);
                for i in 0..n {
                    m[(0, i)] = 2.0 * p[i] * w[i];
                    m[(1 + i, i)] = -1.0;
                }
                m
            }
            EnvelopeKind::Custom(c) => (c.grad_f)(w, p),
        }
    }

    /// `grad_f(w, p)^T * lam` without materializing the Jacobian.
    pub fn grad_f_t_mul(
        &self,
        w: &DVector<f64>,
        p: &DVector<f64>,
        lam: &DVector<f64>,
    ) -> DVector<f64> {
        let n = w.len();
        match &self.kind {
            EnvelopeKind::Expectation => DVector::zeros(n),
            EnvelopeKind::Cvar { .. } => DVector::from_fn(n, |i, _| -lam[i] + lam[n + i]),
            EnvelopeKind::Msd { .. } => {
                DVector::from_fn(n, |i, _| lam[0] * 2.0 * p[i] * w[i] - lam[1 + i])
            }
            EnvelopeKind::Custom(c) => (c.grad_f)(w, p).transpose() * lam,
        }
    }

    /// `grad_g(w, p)^T * lam` without materializing the Jacobian.
    pub fn grad_g_t_mul(
        &self,
        w: &DVector<f64>,
        p: &DVector<f64>,
        lam: &DVector<f64>,
    ) -> DVector<f64> {
        match &self.kind {
            EnvelopeKind::Expectation => lam.clone(),
            EnvelopeKind::Cvar { .. } | EnvelopeKind::Msd { .. } => DVector::zeros(w.len()),
            EnvelopeKind::Custom(c) => (c.grad_g)(w, p).transpose() * lam,
        }
    }

    /// Per-outcome derivatives `d g_e / d p(w)`, one row per constraint.
    pub fn dg_dp(&self, w: &DVector<f64>, p: &DVector<f64>) -> DMatrix<f64> {
        match &self.kind {
            EnvelopeKind::Expectation => DMatrix::zeros(w.len(), w.len()),
            EnvelopeKind::Cvar { .. } | EnvelopeKind::Msd { .. } => DMatrix::zeros(0, w.len()),
            EnvelopeKind::Custom(c) => (c.dg_dp)(w, p),
        }
    }

    /// Per-outcome derivatives `d f_i / d p(w)`, one row per constraint.
    pub fn df_dp(&self, w: &DVector<f64>, p: &DVector<f64>) -> DMatrix<f64> {
        let n = w.len();
        match &self.kind {
            EnvelopeKind::Expectation => DMatrix::zeros(0, n),
            EnvelopeKind::Cvar { .. } => DMatrix::zeros(2 * n, n),
            EnvelopeKind::Msd { .. } => {
                let mut m = DMatrix::zeros(1 + n, n);
                for i in 0..n {
                    m[(0, i)] = w[i] * w[i];
                }
                m
            }
            EnvelopeKind::Custom(c) => (c.df_dp)(w, p),
        }
    }

    /// The combined multiplier-weighted `p`-derivative
    /// `sum_e lam_e(e) dg_e/dp(w) + sum_i lam_i(i) df_i/dp(w)` as a vector
    /// over outcomes. This is the correction term of the gradient formulas.
    pub fn dp_correction(
        &self,
        w: &DVector<f64>,
        p: &DVector<f64>,
        lam_e: &DVector<f64>,
        lam_i: &DVector<f64>,
    ) -> DVector<f64> {
        let n = w.len();
        match &self.kind {
            EnvelopeKind::Expectation | EnvelopeKind::Cvar { .. } => DVector::zeros(n),
            EnvelopeKind::Msd { .. } => DVector::from_fn(n, |i, _| lam_i[0] * w[i] * w[i]),
            EnvelopeKind::Custom(c) => {
                let dg = (c.dg_dp)(w, p);
                let df = (c.df_dp)(w, p);
                dg.transpose() * lam_e + df.transpose() * lam_i
            }
        }
    }

    /// Advertised uniform bound on the `p`-derivatives.
    pub fn bound_m(&self, p: &DVector<f64>) -> f64 {
        match &self.kind {
            EnvelopeKind::Expectation | EnvelopeKind::Cvar { .. } => 0.0,
            EnvelopeKind::Msd { .. } => {
                // On the feasible set, w(i)^2 <= 1 / p(i) over the support.
                let pmin = p
                    .iter()
                    .cloned()
                    .filter(|v| *v > 0.0)
                    .fold(f64::INFINITY, f64::min);
                1.0 / pmin
            }
            EnvelopeKind::Custom(c) => c.bound_m,
        }
    }

    /// Whether the solver variable is the density itself.
    pub fn density_is_identity(&self) -> bool {
        !matches!(self.kind, EnvelopeKind::Msd { .. })
    }

    /// Density corresponding to a solver variable.
    pub fn density(&self, w: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            EnvelopeKind::Msd { alpha } => {
                let mean = p.dot(w);
                w.map(|v| 1.0 + alpha * (v - mean))
            }
            _ => w.clone(),
        }
    }

    /// Linear objective `c0 + c . w` equal to `sum_w P(w) density(w) Z(w)`.
    pub fn objective_coeffs(&self, p: &DVector<f64>, z: &DVector<f64>) -> (f64, DVector<f64>) {
        match &self.kind {
            EnvelopeKind::Msd { alpha } => {
                let m = p.dot(z);
                let c = DVector::from_fn(p.len(), |i, _| alpha * p[i] * (z[i] - m));
                (m, c)
            }
            _ => (0.0, DVector::from_fn(p.len(), |i, _| p[i] * z[i])),
        }
    }

    /// Whether the normalization `sum P w = 1` is an explicit constraint of
    /// the solver variable (it is implied by the density map otherwise).
    pub fn has_normalization_row(&self) -> bool {
        self.density_is_identity()
    }

    /// Normalization multiplier for envelopes without an explicit
    /// normalization row. Derived so that the saddle-point gradient formula
    /// reproduces the true gradient.
    pub fn derived_lam_p(&self, p: &DVector<f64>, z: &DVector<f64>) -> Option<f64> {
        match &self.kind {
            EnvelopeKind::Msd { .. } => Some(p.dot(z)),
            _ => None,
        }
    }

    /// A strictly feasible solver-variable start for the barrier method.
    pub fn feasible_start(&self, p: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            EnvelopeKind::Expectation | EnvelopeKind::Cvar { .. } => {
                DVector::from_element(p.len(), 1.0)
            }
            EnvelopeKind::Msd { .. } => DVector::from_element(p.len(), 0.5),
            EnvelopeKind::Custom(c) => (c.feasible)(p),
        }
    }

    /// Upper bound on achievable density values; used by the critic's
    /// contraction pre-check.
    pub fn density_bound(&self, p: &DVector<f64>) -> f64 {
        match &self.kind {
            EnvelopeKind::Expectation => 1.0,
            EnvelopeKind::Cvar { alpha } => 1.0 / alpha,
            EnvelopeKind::Msd { alpha } => {
                let pmin = p
                    .iter()
                    .cloned()
                    .filter(|v| *v > 0.0)
                    .fold(f64::INFINITY, f64::min);
                1.0 + alpha / pmin.sqrt()
            }
            EnvelopeKind::Custom(_) => f64::INFINITY,
        }
    }

    /// Closed-form saddle point, if this envelope has one.
    pub fn analytic_saddle(
        &self,
        dist: &FiniteDist,
        z: &CostVariable,
    ) -> Option<Result<SaddlePoint, RiskError>> {
        match &self.kind {
            EnvelopeKind::Expectation => Some(analytic_saddle_expectation(dist, z)),
            EnvelopeKind::Cvar { alpha } => Some(analytic_saddle_cvar(dist, z, *alpha)),
            EnvelopeKind::Msd { alpha } => Some(analytic_saddle_msd(dist, z, *alpha)),
            EnvelopeKind::Custom(_) => None,
        }
    }

    /// Spot-checks the canonical-form requirements: affinity of `g`,
    /// convexity of `f` and the `p`-derivative bound, on random points.
    pub fn check_structure(&self, p: &DVector<f64>, rng: &mut ChaCha8Rng) -> Result<(), RiskError> {
        let n = p.len();
        let rand_w = |rng: &mut ChaCha8Rng| DVector::from_fn(n, |_, _| rng.gen::<f64>() * 2.0);
        for _ in 0..20 {
            let w1 = rand_w(rng);
            let w2 = rand_w(rng);
            let a: f64 = rng.gen();
            let mix = &w1 * a + &w2 * (1.0 - a);
            if self.n_eq(n) > 0 {
                let lhs = self.eval_g(&mix, p);
                let rhs = self.eval_g(&w1, p) * a + self.eval_g(&w2, p) * (1.0 - a);
                if (lhs - rhs).amax() > 1e-10 {
                    return Err(RiskError::EmptyEnvelope(
                        "equality constraints are not affine".into(),
                    ));
                }
            }
            if self.n_ineq(n) > 0 {
                let mid = (&w1 + &w2) * 0.5;
                let fm = self.eval_f(&mid, p);
                let fa = (self.eval_f(&w1, p) + self.eval_f(&w2, p)) * 0.5;
                for i in 0..fm.len() {
                    if fm[i] > fa[i] + 1e-10 {
                        return Err(RiskError::EmptyEnvelope(
                            "inequality constraints are not convex".into(),
                        ));
                    }
                }
                let m = self.bound_m(p);
                let feas = self.feasible_start(p);
                let dp_bound = self
                    .df_dp(&feas, p)
                    .iter()
                    .chain(self.dg_dp(&feas, p).iter())
                    .fold(0.0f64, |acc, v| acc.max(v.abs()));
                if dp_bound > m + 1e-10 {
                    return Err(RiskError::EmptyEnvelope(
                        "p-derivatives exceed the advertised bound".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Solver options shared by `evaluate_risk` and the interior-point solver.
#[derive(Debug, Clone, Copy)]
pub struct SolverOpts {
    /// Skip analytic routines and use the numeric solver.
    pub force_numeric: bool,
    /// KKT tolerance.
    pub tol: f64,
    /// Total Newton step cap.
    pub max_iter: usize,
    /// L2 regularization coefficient on the measure `P xi` (0 disables).
    pub reg: f64,
}

impl Default for SolverOpts {
    fn default() -> Self {
        SolverOpts {
            force_numeric: false,
            tol: 1e-8,
            max_iter: 200,
            reg: 0.0,
        }
    }
}

/// Evaluates the risk of `z` under `dist`, returning the value and a saddle
/// point. Uses the analytic routine when the envelope has one, otherwise the
/// interior-point solver.
pub fn evaluate_risk(
    env: &RiskEnvelope,
    dist: &FiniteDist,
    z: &CostVariable,
    opts: &SolverOpts,
) -> Result<(f64, SaddlePoint), RiskError> {
    if dist.len() != z.len() {
        return Err(RiskError::LengthMismatch {
            expected: dist.len(),
            got: z.len(),
        });
    }
    if !opts.force_numeric {
        if let Some(res) = env.analytic_saddle(dist, z) {
            let sp = res?;
            let rho = sp.objective;
            return Ok((rho, sp));
        }
    }
    let prog = EnvelopeProgram {
        dist: dist.clone(),
        z: z.clone(),
        reg: opts.reg,
        tol: opts.tol,
        max_iter: opts.max_iter,
    };
    let report = saddle::solve_envelope_program(env, &prog).map_err(|e| match e {
        RiskError::Infeasible(msg) => RiskError::EmptyEnvelope(msg),
        other => other,
    })?;
    Ok((report.sp.objective, report.sp))
}

/// Saddle of the expectation envelope: `xi = 1`, equality multipliers chosen
/// to satisfy stationarity exactly, `lam_p = E[Z]`.
pub fn analytic_saddle_expectation(
    dist: &FiniteDist,
    z: &CostVariable,
) -> Result<SaddlePoint, RiskError> {
    let n = dist.len();
    let p = dist.probs();
    let zv = z.values();
    let mean = p.dot(zv);
    let xi = DVector::from_element(n, 1.0);
    let lam_e = DVector::from_fn(n, |i, _| p[i] * zv[i] - mean * p[i]);
    Ok(SaddlePoint {
        primal: xi.clone(),
        xi,
        lam_p: mean,
        lam_e,
        lam_i: DVector::zeros(0),
        objective: mean,
    })
}

/// Analytic CVaR saddle: density `1/alpha` strictly above the quantile, zero
/// strictly below, fractional on the quantile atom so the weighted mass is
/// exactly one.
///
/// `lam_p` is the smallest `(1-alpha)`-quantile; when the tail mass hits
/// `alpha` exactly on an atom boundary the quantile drops to the next
/// distinct value below (value and gradient are invariant to the choice).
pub fn analytic_saddle_cvar(
    dist: &FiniteDist,
    z: &CostVariable,
    alpha: f64,
) -> Result<SaddlePoint, RiskError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(RiskError::InvalidAlpha(alpha));
    }
    let n = dist.len();
    let p = dist.probs();
    let zv = z.values();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| zv[b].total_cmp(&zv[a]).then(a.cmp(&b)));

    let mut xi = DVector::zeros(n);
    let mut remaining = 1.0f64;
    let mut rho = 0.0;
    let mut any = false;
    for &j in &order {
        if p[j] <= 0.0 {
            continue;
        }
        if remaining <= 0.0 {
            break;
        }
        let cap = p[j] / alpha;
        let y = cap.min(remaining);
        xi[j] = y / p[j];
        rho += y * zv[j];
        remaining -= y;
        any = true;
        if remaining <= 1e-15 {
            remaining = 0.0;
        }
    }
    if !any {
        return Err(RiskError::EmptyEnvelope(
            "distribution has no positive-mass atom".into(),
        ));
    }
    let lam_p = cvar_smallest_quantile(p, zv, alpha)
        .ok_or_else(|| RiskError::EmptyEnvelope("distribution has no positive-mass atom".into()))?;
    let lam_i = cvar_box_multipliers(p, zv, lam_p);
    Ok(SaddlePoint {
        primal: xi.clone(),
        xi,
        lam_p,
        lam_e: DVector::zeros(0),
        lam_i,
        objective: rho,
    })
}

/// The smallest `(1-alpha)`-quantile of `z` under `p`, under the tail-fill
/// convention: when the cumulative tail mass hits `alpha` exactly on an atom
/// boundary, the quantile drops to the next distinct value below.
pub(crate) fn cvar_smallest_quantile(
    p: &DVector<f64>,
    z: &DVector<f64>,
    alpha: f64,
) -> Option<f64> {
    let n = p.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    let mut remaining = 1.0f64;
    let mut last: Option<usize> = None;
    let mut filled_full = true;
    let mut pos_of_last = 0usize;
    for (pos, &j) in order.iter().enumerate() {
        if p[j] <= 0.0 {
            continue;
        }
        if remaining <= 0.0 {
            break;
        }
        let cap = p[j] / alpha;
        filled_full = remaining >= cap * (1.0 - 1e-12);
        remaining -= cap.min(remaining);
        last = Some(j);
        pos_of_last = pos;
        if remaining <= 1e-15 {
            remaining = 0.0;
        }
    }
    let last = last?;
    if filled_full {
        Some(
            order[pos_of_last + 1..]
                .iter()
                .copied()
                .find(|&j| p[j] > 0.0 && z[j] < z[last])
                .map_or(z[last], |j| z[j]),
        )
    } else {
        Some(z[last])
    }
}

/// Box multipliers satisfying stationarity for a given quantile value:
/// lower rows first, then upper rows.
pub(crate) fn cvar_box_multipliers(p: &DVector<f64>, z: &DVector<f64>, lam_p: f64) -> DVector<f64> {
    let n = p.len();
    let mut lam_i = DVector::zeros(2 * n);
    for i in 0..n {
        let resid = p[i] * (z[i] - lam_p);
        if resid > 0.0 {
            lam_i[n + i] = resid;
        } else {
            lam_i[i] = -resid;
        }
    }
    lam_i
}

/// Analytic mean-semideviation saddle via the contact point
/// `w = (Z - E[Z])_+ / SD(Z)`; `w = 0` when the semideviation vanishes.
pub fn analytic_saddle_msd(
    dist: &FiniteDist,
    z: &CostVariable,
    alpha: f64,
) -> Result<SaddlePoint, RiskError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(RiskError::InvalidAlpha(alpha));
    }
    let n = dist.len();
    let p = dist.probs();
    let zv = z.values();
    let mean = p.dot(zv);
    let dev = DVector::from_fn(n, |i, _| (zv[i] - mean).max(0.0));
    let sd = (0..n).map(|i| p[i] * dev[i] * dev[i]).sum::<f64>().sqrt();

    let w = if sd > 0.0 {
        DVector::from_fn(n, |i, _| if p[i] > 0.0 { dev[i] / sd } else { 0.0 })
    } else {
        DVector::zeros(n)
    };
    let mean_w = p.dot(&w);
    let xi = DVector::from_fn(n, |i, _| 1.0 + alpha * (w[i] - mean_w));
    let mut lam_i = DVector::zeros(1 + n);
    lam_i[0] = alpha * sd / 2.0;
    for i in 0..n {
        lam_i[1 + i] = alpha * p[i] * (mean - zv[i]).max(0.0);
    }
    Ok(SaddlePoint {
        xi,
        primal: w,
        lam_p: mean,
        lam_e: DVector::zeros(0),
        lam_i,
        objective: mean + alpha * sd,
    })
}
