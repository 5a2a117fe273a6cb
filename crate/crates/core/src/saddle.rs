//! Small-scale convex solver for the sample-average envelope program and its
//! L2-regularized variant, returning the primal optimizer and KKT
//! multipliers.
//!
//! The method is a log-barrier interior point with damped Newton steps:
//! barrier parameter schedule `t <- 10 t` starting from `t = 1`, terminating
//! when `m / t < tol` (`m` = number of inequality constraints). Inequality
//! multipliers come for free from the barrier, `lam_i = 1 / (t (-f_i))`;
//! equality multipliers from the Newton KKT system. Built-in envelopes get
//! structured Newton solves (diagonal or diagonal-plus-rank-one Hessians);
//! custom envelopes take a dense path with a phase-I feasibility solve.
//!
//! Atoms with zero probability are excluded from the variable set; their
//! density is reported as zero (box envelopes) or through the density map.

use nalgebra::{DMatrix, DVector};

use crate::envelope::{EnvelopeKind, RiskEnvelope, SaddlePoint};
use crate::error::RiskError;
use crate::probspace::{CostVariable, FiniteDist};

/// Stall floor on the Newton decrement: below this no further progress is
/// possible in floating point. On the final barrier stage the primary stop is
/// the raw stationarity residual, which multiplier recovery needs.
const NEWTON_TOL: f64 = 1e-16;
/// Newton decrement tolerance for intermediate barrier stages, where only
/// adequate centering matters; the final stage polishes to full accuracy.
const CENTER_TOL: f64 = 1e-5;
/// Newton decrement tolerance for the phase-I solve, where multiplier
/// accuracy is irrelevant.
const PHASE1_NEWTON_TOL: f64 = 1e-10;
/// Barrier parameter multiplier per stage.
const BARRIER_MU: f64 = 10.0;

/// One envelope maximization instance.
#[derive(Debug, Clone)]
pub struct EnvelopeProgram {
    /// Measure of the program (typically an empirical distribution).
    pub dist: FiniteDist,
    pub z: CostVariable,
    /// L2 regularization coefficient on the measure `P xi`; `0` disables,
    /// `1/(2N)` gives the strictly concave empirical variant.
    pub reg: f64,
    /// KKT tolerance.
    pub tol: f64,
    /// Cap on total Newton steps.
    pub max_iter: usize,
}

impl EnvelopeProgram {
    pub fn new(dist: FiniteDist, z: CostVariable) -> Self {
        EnvelopeProgram {
            dist,
            z,
            reg: 0.0,
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

/// Solver output: saddle point plus convergence diagnostics.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub sp: SaddlePoint,
    pub iterations: usize,
    pub kkt_residual: f64,
    /// `(t, m/t)` per barrier stage.
    pub barrier_path: Vec<(f64, f64)>,
}

/// KKT residuals of a saddle point against the envelope Lagrangian.
#[derive(Debug, Clone, Copy)]
pub struct KktReport {
    /// Max violation of normalization and equality constraints.
    pub primal_eq: f64,
    /// Max positive part of the inequality constraints.
    pub primal_ineq: f64,
    /// Max negative part of the inequality multipliers.
    pub dual_feas: f64,
    /// Max `|lam_i * f_i|`.
    pub comp_slack: f64,
    /// Sup-norm of the Lagrangian stationarity residual.
    pub stationarity: f64,
}

impl KktReport {
    pub fn max_residual(&self) -> f64 {
        self.primal_eq
            .max(self.primal_ineq)
            .max(self.dual_feas)
            .max(self.comp_slack)
            .max(self.stationarity)
    }
}

/// Solves the envelope program, returning the saddle and diagnostics.
pub fn solve_envelope_program(
    env: &RiskEnvelope,
    prog: &EnvelopeProgram,
) -> Result<SolveReport, RiskError> {
    if prog.dist.len() != prog.z.len() {
        return Err(RiskError::LengthMismatch {
            expected: prog.dist.len(),
            got: prog.z.len(),
        });
    }
    if prog.reg < 0.0 {
        return Err(RiskError::InvalidConfig("reg must be nonnegative".into()));
    }
    if prog.reg > 0.0 && !env.density_is_identity() {
        return Err(RiskError::InvalidConfig(
            "regularization is only supported for envelopes whose solver variable is the density"
                .into(),
        ));
    }
    match env.kind() {
        EnvelopeKind::Expectation => solve_expectation(env, prog),
        EnvelopeKind::Cvar { alpha } => solve_cvar_barrier(env, prog, *alpha),
        EnvelopeKind::Msd { alpha } => solve_msd_barrier(env, prog, *alpha),
        EnvelopeKind::Custom(_) => solve_dense_barrier(env, prog),
    }
}

/// Reports primal/dual feasibility, complementary slackness and stationarity
/// residuals of the (unregularized) envelope Lagrangian. Diagnostic only.
pub fn kkt_verify(
    env: &RiskEnvelope,
    dist: &FiniteDist,
    z: &CostVariable,
    sp: &SaddlePoint,
) -> KktReport {
    let p = dist.probs();
    let zv = z.values();
    let w = &sp.primal;
    let (_, c) = env.objective_coeffs(p, zv);

    let norm_gap = (p.dot(&sp.xi) - 1.0).abs();
    let g = env.eval_g(w, p);
    let primal_eq = norm_gap.max(g.amax_or_zero());

    let f = env.eval_f(w, p);
    let primal_ineq = f.iter().cloned().fold(0.0f64, |a, v| a.max(v.max(0.0)));
    let dual_feas = sp
        .lam_i
        .iter()
        .cloned()
        .fold(0.0f64, |a, v| a.max((-v).max(0.0)));
    let comp_slack = f
        .iter()
        .zip(sp.lam_i.iter())
        .fold(0.0f64, |a, (fi, li)| a.max((fi * li).abs()));

    let mut resid = c;
    if env.has_normalization_row() {
        resid -= p * sp.lam_p;
    }
    resid -= env.grad_g_t_mul(w, p, &sp.lam_e);
    resid -= env.grad_f_t_mul(w, p, &sp.lam_i);
    let stationarity = resid.amax_or_zero();

    KktReport {
        primal_eq,
        primal_ineq,
        dual_feas,
        comp_slack,
        stationarity,
    }
}

trait AmaxOrZero {
    fn amax_or_zero(&self) -> f64;
}

impl AmaxOrZero for DVector<f64> {
    fn amax_or_zero(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.amax()
        }
    }
}

/// Support restriction of a program: indices, probabilities and costs of the
/// positive-mass atoms.
struct Support {
    idx: Vec<usize>,
    p: DVector<f64>,
    z: DVector<f64>,
}

fn support_of(prog: &EnvelopeProgram) -> Result<Support, RiskError> {
    let idx = prog.dist.support();
    if idx.is_empty() {
        return Err(RiskError::EmptyEnvelope(
            "distribution has no positive-mass atom".into(),
        ));
    }
    let p = DVector::from_fn(idx.len(), |i, _| prog.dist.prob(idx[i]));
    let z = DVector::from_fn(idx.len(), |i, _| prog.z.value(idx[i]));
    Ok(Support { idx, p, z })
}

fn expand(idx: &[usize], n: usize, v: &DVector<f64>, fill: f64) -> DVector<f64> {
    let mut out = DVector::from_element(n, fill);
    for (i, &j) in idx.iter().enumerate() {
        out[j] = v[i];
    }
    out
}

/// Expectation envelope: the feasible set is the single density `xi = 1`
/// (over the support), so no barrier is needed.
fn solve_expectation(env: &RiskEnvelope, prog: &EnvelopeProgram) -> Result<SolveReport, RiskError> {
    let n = prog.dist.len();
    let s = support_of(prog)?;
    let p = prog.dist.probs();
    let zv = prog.z.values();
    let mean = p.dot(zv);
    let xi = DVector::from_element(n, 1.0);
    // Stationarity with the gradient of the (possibly regularized) objective.
    let grad = DVector::from_fn(n, |i, _| p[i] * zv[i] - 2.0 * prog.reg * p[i] * p[i]);
    let lam_e = DVector::from_fn(n, |i, _| grad[i] - mean * p[i]);
    let objective = mean - prog.reg * s.p.iter().map(|v| v * v).sum::<f64>();
    let sp = SaddlePoint {
        primal: xi.clone(),
        xi,
        lam_p: mean,
        lam_e,
        lam_i: DVector::zeros(0),
        objective,
    };
    let residual = kkt_verify(env, &prog.dist, &prog.z, &sp).max_residual();
    Ok(SolveReport {
        sp,
        iterations: 0,
        kkt_residual: residual,
        barrier_path: vec![],
    })
}

/// CVaR: box constraints give a diagonal barrier Hessian; the normalization
/// row is handled by a one-dimensional Schur complement.
#[allow(unused_assignments)] // nu's seed value is provably dead
fn solve_cvar_barrier(
    env: &RiskEnvelope,
    prog: &EnvelopeProgram,
    alpha: f64,
) -> Result<SolveReport, RiskError> {
    let s = support_of(prog)?;
    let ns = s.idx.len();
    let cap = 1.0 / alpha;
    let m = 2 * ns;
    let c = DVector::from_fn(ns, |i, _| s.p[i] * s.z[i]);
    let reg = prog.reg;
    let p2 = DVector::from_fn(ns, |i, _| s.p[i] * s.p[i]);

    let mut w = DVector::from_element(ns, 1.0);
    // Strict interior requires cap > 1; at alpha = 1 the box degenerates to
    // the single point xi = 1 and Slater fails.
    if cap - 1.0 < 1e-8 {
        return Err(RiskError::Infeasible(
            "no strictly feasible interior point (alpha = 1)".into(),
        ));
    }

    let feasible = |w: &DVector<f64>| w.iter().all(|&v| v > 0.0 && v < cap);

    let mut t = 1.0;
    let mut steps = 0usize;
    let mut nu = None;
    let mut path = Vec::new();
    loop {
        let mut prev_res = f64::INFINITY;
        loop {
            let g = DVector::from_fn(ns, |i, _| {
                -t * (c[i] - 2.0 * reg * p2[i] * w[i]) - 1.0 / w[i] + 1.0 / (cap - w[i])
            });
            let hd = DVector::from_fn(ns, |i, _| {
                t * 2.0 * reg * p2[i] + 1.0 / (w[i] * w[i]) + 1.0 / ((cap - w[i]) * (cap - w[i]))
            });
            let hinv_g = g.component_div(&hd);
            let hinv_a = s.p.component_div(&hd);
            let nu_k = -s.p.dot(&hinv_g) / s.p.dot(&hinv_a);
            nu = Some(nu_k);
            let r = DVector::from_fn(ns, |i, _| g[i] + nu_k * s.p[i]);
            let mut dw = DVector::from_fn(ns, |i, _| -r[i] / hd[i]);
            // Kill the first-order equality leakage: nu scales with t, so
            // even eps-level p.dw cancellation noise would dominate the
            // directional derivative.
            let leak = s.p.dot(&dw) / s.p.dot(&hinv_a);
            for i in 0..ns {
                dw[i] -= hinv_a[i] * leak;
            }
            // dw^T H dw as an explicit sum of squares: -g.dot(dw) suffers
            // catastrophic cancellation at large t.
            let dec = (0..ns).map(|i| hd[i] * dw[i] * dw[i]).sum::<f64>();
            // Multiplier recovery needs the raw stationarity residual small,
            // not just the Newton decrement.
            let res = r.amax() / t;
            let final_stage = (m as f64) / t < prog.tol;
            let lambda = dec.sqrt();
            if final_stage {
                if res < prog.tol * 0.5 || dec / 2.0 < NEWTON_TOL {
                    break;
                }
            } else if dec / 2.0 < CENTER_TOL {
                break;
            }
            // In the quadratic regime the residual should square per step; a
            // failure to even halve means the floating-point noise floor of
            // the constraint values has been reached.
            if lambda <= 0.25 && res >= prev_res * 0.5 {
                break;
            }
            prev_res = res;
            let merit = |w: &DVector<f64>| -> f64 {
                (0..ns)
                    .map(|i| {
                        -t * (c[i] * w[i] - reg * p2[i] * w[i] * w[i])
                            - w[i].ln()
                            - (cap - w[i]).ln()
                    })
                    .sum()
            };
            if !take_newton_step(&mut w, &dw, dec, feasible, merit) {
                break;
            }
            steps += 1;
            if steps > prog.max_iter {
                return Err(RiskError::DidNotConverge {
                    residual: m as f64 / t,
                    iterations: steps,
                });
            }
        }
        path.push((t, m as f64 / t));
        if m as f64 / t < prog.tol {
            break;
        }
        t *= BARRIER_MU;
    }

    let n = prog.dist.len();
    let p_full = prog.dist.probs();
    let z_full = prog.z.values();
    let (lam_p, lam_i) = if reg == 0.0 {
        // On instances where the tail mass hits alpha exactly the dual
        // optimum is a whole interval of quantiles and the central path lands
        // on its analytic center. Report the deterministic smallest-quantile
        // convention instead, with the box multipliers that make
        // stationarity exact; away from such boundaries this agrees with the
        // barrier multiplier nu/t in the tolerance limit.
        let lam_p =
            crate::envelope::cvar_smallest_quantile(p_full, z_full, alpha).ok_or_else(|| {
                RiskError::EmptyEnvelope("distribution has no positive-mass atom".into())
            })?;
        (
            lam_p,
            crate::envelope::cvar_box_multipliers(p_full, z_full, lam_p),
        )
    } else {
        // Regularized program: the barrier multipliers are the KKT
        // multipliers of the problem actually solved.
        let lam_p = nu.expect("at least one Newton iteration runs") / t;
        let mut lam_i = DVector::zeros(2 * n);
        for (i, &j) in s.idx.iter().enumerate() {
            lam_i[j] = 1.0 / (t * w[i]);
            lam_i[n + j] = 1.0 / (t * (cap - w[i]));
        }
        (lam_p, lam_i)
    };
    let xi = expand(&s.idx, n, &w, 0.0);
    let objective = c.dot(&w) - reg * (0..ns).map(|i| p2[i] * w[i] * w[i]).sum::<f64>();
    let sp = SaddlePoint {
        primal: xi.clone(),
        xi,
        lam_p,
        lam_e: DVector::zeros(0),
        lam_i,
        objective,
    };
    finish_report(env, prog, sp, steps, path)
}

/// Mean-semideviation in the lifted form: one quadratic ball row plus
/// nonnegativity, so the barrier Hessian is diagonal plus rank one.
fn solve_msd_barrier(
    env: &RiskEnvelope,
    prog: &EnvelopeProgram,
    alpha: f64,
) -> Result<SolveReport, RiskError> {
    let s = support_of(prog)?;
    let ns = s.idx.len();
    let m = 1 + ns;
    let mean = s.p.dot(&s.z);
    let c = DVector::from_fn(ns, |i, _| alpha * s.p[i] * (s.z[i] - mean));

    let ball =
        |w: &DVector<f64>| -> f64 { (0..ns).map(|i| s.p[i] * w[i] * w[i]).sum::<f64>() - 1.0 };
    let mut w = DVector::from_element(ns, 0.5);
    let mut t = 1.0;
    let mut steps = 0usize;
    let mut path = Vec::new();
    loop {
        let mut prev_res = f64::INFINITY;
        loop {
            let fb = ball(&w);
            let u = DVector::from_fn(ns, |i, _| 2.0 * s.p[i] * w[i] / (-fb));
            let g = DVector::from_fn(ns, |i, _| -t * c[i] + u[i] - 1.0 / w[i]);
            let hd = DVector::from_fn(ns, |i, _| 2.0 * s.p[i] / (-fb) + 1.0 / (w[i] * w[i]));
            // H = diag(hd) + u u^T; Sherman-Morrison solve of H dw = -g.
            let dinv_g = g.component_div(&hd);
            let dinv_u = u.component_div(&hd);
            let denom = 1.0 + u.dot(&dinv_u);
            let coeff = u.dot(&dinv_g) / denom;
            let dw = DVector::from_fn(ns, |i, _| -(dinv_g[i] - coeff * dinv_u[i]));
            let udw = u.dot(&dw);
            let dec = (0..ns).map(|i| hd[i] * dw[i] * dw[i]).sum::<f64>() + udw * udw;
            let res = g.amax() / t;
            let final_stage = (m as f64) / t < prog.tol;
            let lambda = dec.sqrt();
            if final_stage {
                if res < prog.tol * 0.5 || dec / 2.0 < NEWTON_TOL {
                    break;
                }
            } else if dec / 2.0 < CENTER_TOL {
                break;
            }
            if lambda <= 0.25 && res >= prev_res * 0.5 {
                break;
            }
            prev_res = res;
            let feasible = |w: &DVector<f64>| w.iter().all(|&v| v > 0.0) && ball(w) < 0.0;
            let merit = |w: &DVector<f64>| -> f64 {
                -t * c.dot(w) - (-ball(w)).ln() - w.iter().map(|v| v.ln()).sum::<f64>()
            };
            if !take_newton_step(&mut w, &dw, dec, feasible, merit) {
                break;
            }
            steps += 1;
            if steps > prog.max_iter {
                return Err(RiskError::DidNotConverge {
                    residual: m as f64 / t,
                    iterations: steps,
                });
            }
        }
        path.push((t, m as f64 / t));
        if m as f64 / t < prog.tol {
            break;
        }
        t *= BARRIER_MU;
    }

    let fb = ball(&w);
    let n = prog.dist.len();
    let w_full = expand(&s.idx, n, &w, 0.0);
    let p = prog.dist.probs();
    let xi = env.density(&w_full, p);
    let mut lam_i = DVector::zeros(1 + n);
    lam_i[0] = 1.0 / (t * (-fb));
    for (i, &j) in s.idx.iter().enumerate() {
        lam_i[1 + j] = 1.0 / (t * w[i]);
    }
    let objective = mean + c.dot(&w);
    let sp = SaddlePoint {
        xi,
        primal: w_full,
        lam_p: env.derived_lam_p(p, prog.z.values()).unwrap_or(mean),
        lam_e: DVector::zeros(0),
        lam_i,
        objective,
    };
    finish_report(env, prog, sp, steps, path)
}

/// Dense barrier for callback-defined envelopes, solved over the full
/// outcome set. Runs a phase-I feasibility program when the supplied start
/// is not strictly interior.
#[allow(unused_assignments)] // nu's seed value is provably dead
fn solve_dense_barrier(
    env: &RiskEnvelope,
    prog: &EnvelopeProgram,
) -> Result<SolveReport, RiskError> {
    let n = prog.dist.len();
    if n > 2000 {
        return Err(RiskError::InvalidConfig(
            "custom envelopes use a dense solver; support above 2000 atoms is not supported".into(),
        ));
    }
    let p = prog.dist.probs().clone();
    let zv = prog.z.values();
    let (c0, c) = env.objective_coeffs(&p, zv);
    let reg = prog.reg;
    let p2 = DVector::from_fn(n, |i, _| p[i] * p[i]);

    let mut w = env.feasible_start(&p);
    // Affine equalities: Jacobian is constant; extract the offset from the
    // start point. First row is the normalization.
    let n_eq = env.n_eq(n);
    let gj = env.grad_g(&w, &p);
    let g0 = env.eval_g(&w, &p);
    let mut a = DMatrix::zeros(1 + n_eq, n);
    a.row_mut(0).copy_from(&p.transpose());
    let mut b = DVector::zeros(1 + n_eq);
    b[0] = 1.0;
    for r in 0..n_eq {
        a.row_mut(1 + r).copy_from(&gj.row(r));
        b[1 + r] = gj.row(r).dot(&w.transpose()) - g0[r];
    }

    // Project the start onto the equality manifold if needed.
    let eq_gap = (&a * &w - &b).amax_or_zero();
    if eq_gap > 1e-10 {
        let aat = &a * a.transpose();
        let rhs = &b - &a * &w;
        let corr =
            aat.clone().lu().solve(&rhs).ok_or_else(|| {
                RiskError::Infeasible("equality constraints are degenerate".into())
            })?;
        w += a.transpose() * corr;
        if (&a * &w - &b).amax_or_zero() > 1e-8 {
            return Err(RiskError::Infeasible(
                "could not satisfy equality constraints".into(),
            ));
        }
    }

    let m = env.n_ineq(n);
    let mut steps = 0usize;
    if m == 0 {
        return Err(RiskError::InvalidConfig(
            "custom envelopes without inequality constraints are not supported".into(),
        ));
    }

    let margin = env.eval_f(&w, &p).max();
    if margin >= -1e-8 {
        w = phase_one(env, &p, &a, &b, w, prog, &mut steps)?;
    }

    let objective = |w: &DVector<f64>| -> f64 {
        c.dot(w) - reg * (0..n).map(|i| p2[i] * w[i] * w[i]).sum::<f64>()
    };
    let strictly_feasible =
        |w: &DVector<f64>| -> bool { env.eval_f(w, &p).iter().all(|&v| v < 0.0) };

    let mut t = 1.0;
    let mut nu: Option<DVector<f64>> = None;
    let mut path = Vec::new();
    loop {
        let mut prev_res = f64::INFINITY;
        loop {
            let f = env.eval_f(&w, &p);
            let jf = env.grad_f(&w, &p);
            let mut grad = DVector::from_fn(n, |i, _| -t * (c[i] - 2.0 * reg * p2[i] * w[i]));
            let mut h = DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| t * 2.0 * reg * p2[i]));
            for r in 0..m {
                let row = jf.row(r).transpose();
                grad += &row / (-f[r]);
                h += &row * row.transpose() / (f[r] * f[r]);
            }
            if let EnvelopeKind::Custom(cb) = env.kind() {
                if let Some(hf) = &cb.hess_f {
                    let weights = DVector::from_fn(m, |r, _| 1.0 / (-f[r]));
                    h += hf(&weights, &w, &p);
                }
            }
            let (dw, nu_new) = solve_eq_newton(&h, &a, &grad)?;
            let res = (&grad + a.transpose() * &nu_new).amax() / t;
            nu = Some(nu_new);
            let dec = (&h * &dw).dot(&dw).max(0.0);
            let final_stage = (m as f64) / t < prog.tol;
            let lambda = dec.sqrt();
            if final_stage {
                if res < prog.tol * 0.5 || dec / 2.0 < NEWTON_TOL {
                    break;
                }
            } else if dec / 2.0 < CENTER_TOL {
                break;
            }
            if lambda <= 0.25 && res >= prev_res * 0.5 {
                break;
            }
            prev_res = res;
            let merit = |w: &DVector<f64>| -> f64 {
                let fv = env.eval_f(w, &p);
                -t * objective(w) - fv.iter().map(|&v| (-v).ln()).sum::<f64>()
            };
            if !take_newton_step(&mut w, &dw, dec, strictly_feasible, merit) {
                break;
            }
            steps += 1;
            if steps > prog.max_iter {
                return Err(RiskError::DidNotConverge {
                    residual: m as f64 / t,
                    iterations: steps,
                });
            }
        }
        path.push((t, m as f64 / t));
        if m as f64 / t < prog.tol {
            break;
        }
        t *= BARRIER_MU;
    }

    let f = env.eval_f(&w, &p);
    let lam_i = DVector::from_fn(m, |r, _| 1.0 / (t * (-f[r])));
    let nu = nu.expect("at least one Newton iteration runs");
    let lam_p = nu[0] / t;
    let lam_e = DVector::from_fn(n_eq, |r, _| nu[1 + r] / t);
    let sp = SaddlePoint {
        xi: env.density(&w, &p),
        primal: w.clone(),
        lam_p,
        lam_e,
        lam_i,
        objective: c0 + objective(&w),
    };
    finish_report(env, prog, sp, steps, path)
}

/// Takes one Newton step: Armijo backtracking on the merit function in the
/// damped phase (`lambda > 1/4`, where merit decreases are far above ULP
/// noise), a plain full step with a feasibility backtrack in the quadratic
/// phase (where a line search is unnecessary and merit comparisons drown in
/// rounding at large barrier parameters). Returns `false` when no
/// representable progress was possible.
fn take_newton_step(
    w: &mut DVector<f64>,
    dw: &DVector<f64>,
    dec: f64,
    feasible: impl Fn(&DVector<f64>) -> bool,
    merit: impl Fn(&DVector<f64>) -> f64,
) -> bool {
    let lambda = dec.sqrt();
    if lambda > 0.25 {
        let base = merit(w);
        let mut step = 1.0f64;
        while step >= 1e-18 {
            let wn = &*w + dw * step;
            if feasible(&wn) && merit(&wn) <= base - 0.25 * step * dec {
                let moved = wn != *w;
                *w = wn;
                return moved;
            }
            step *= 0.5;
        }
        // Merit search failed; fall back to the guaranteed damped step.
        let wn = &*w + dw * (1.0 / (1.0 + lambda));
        if feasible(&wn) {
            let moved = wn != *w;
            *w = wn;
            return moved;
        }
        false
    } else {
        let mut step = 1.0f64;
        while step >= 1e-18 {
            let wn = &*w + dw * step;
            if feasible(&wn) {
                let moved = wn != *w;
                *w = wn;
                return moved;
            }
            step *= 0.5;
        }
        false
    }
}

/// Equality-constrained Newton step: solves `[H A^T; A 0] [dw; nu] = [-g; 0]`
/// by eliminating `dw` through a Cholesky factorization of the Jacobi-scaled
/// Hessian and a small Schur complement for `nu`. The Hessian diagonal spans
/// many orders of magnitude at large barrier parameters; a joint LU of the
/// KKT matrix loses the direction entirely there.
fn solve_eq_newton(
    h: &DMatrix<f64>,
    a: &DMatrix<f64>,
    g: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), RiskError> {
    let n = h.nrows();
    let me = a.nrows();
    let d = DVector::from_fn(n, |i, _| h[(i, i)].abs().max(1e-300).sqrt());
    let mut hs = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            hs[(i, j)] = h[(i, j)] / (d[i] * d[j]);
        }
    }
    let mut ridge = 0.0;
    let chol = loop {
        let mut m = hs.clone();
        if ridge > 0.0 {
            for i in 0..n {
                m[(i, i)] += ridge;
            }
        }
        match m.cholesky() {
            Some(c) => break c,
            None if ridge < 1e-4 => ridge = (ridge * 10.0).max(1e-12),
            None => return Err(RiskError::Infeasible("singular Newton system".into())),
        }
    };
    let solve_h = |v: &DVector<f64>| -> DVector<f64> {
        let scaled = DVector::from_fn(n, |i, _| v[i] / d[i]);
        let y = chol.solve(&scaled);
        DVector::from_fn(n, |i, _| y[i] / d[i])
    };
    let hinv_g = solve_h(g);
    if me == 0 {
        return Ok((-hinv_g, DVector::zeros(0)));
    }
    let mut hinv_at = DMatrix::zeros(n, me);
    for r in 0..me {
        let col = solve_h(&a.row(r).transpose());
        hinv_at.column_mut(r).copy_from(&col);
    }
    let mut schur = a * &hinv_at;
    let rhs = -(a * &hinv_g);
    let mut schur_lu = schur.clone().lu();
    if !schur_lu.is_invertible() {
        for i in 0..me {
            schur[(i, i)] += 1e-12;
        }
        schur_lu = schur.lu();
    }
    let nu = schur_lu.solve(&rhs);
    let nu = nu.ok_or_else(|| RiskError::Infeasible("degenerate equality constraints".into()))?;
    let mut dw = -(hinv_g + &hinv_at * &nu);
    // Kill first-order equality leakage with an H-weighted correction: the
    // multipliers scale with the barrier parameter, so eps-level A dw noise
    // would dominate the directional derivative, while a Euclidean
    // projection would dump the correction onto stiff coordinates.
    let adw = a * &dw;
    if adw.amax() > 0.0 {
        if let Some(y) = schur_lu.solve(&adw) {
            dw -= &hinv_at * y;
        }
    }
    Ok((dw, nu))
}

/// Phase-I: minimize `s` subject to `f_i(w) <= s`, `A w = b`, stopping as
/// soon as a strictly feasible `w` appears.
fn phase_one(
    env: &RiskEnvelope,
    p: &DVector<f64>,
    a: &DMatrix<f64>,
    _b: &DVector<f64>,
    w0: DVector<f64>,
    prog: &EnvelopeProgram,
    steps: &mut usize,
) -> Result<DVector<f64>, RiskError> {
    let n = w0.len();
    let m = env.n_ineq(n);
    let me = a.nrows();
    let mut w = w0;
    let mut sl = env.eval_f(&w, p).max() + 1.0;

    // Augmented equality Jacobian: s is unconstrained by the equalities.
    let mut a_aug = DMatrix::zeros(me, n + 1);
    a_aug.view_mut((0, 0), (me, n)).copy_from(a);

    let mut t = 1.0;
    loop {
        loop {
            let f = env.eval_f(&w, p);
            if f.max() < -1e-7 {
                return Ok(w);
            }
            let jf = env.grad_f(&w, p);
            let mut grad = DVector::zeros(n + 1);
            grad[n] = t;
            let mut h = DMatrix::zeros(n + 1, n + 1);
            for r in 0..m {
                let gap = sl - f[r];
                let mut row = DVector::zeros(n + 1);
                for i in 0..n {
                    row[i] = jf[(r, i)];
                }
                row[n] = -1.0;
                grad += &row / gap;
                h += &row * row.transpose() / (gap * gap);
            }
            if let EnvelopeKind::Custom(cb) = env.kind() {
                if let Some(hf) = &cb.hess_f {
                    let weights = DVector::from_fn(m, |r, _| 1.0 / (sl - f[r]));
                    let hw = hf(&weights, &w, p);
                    h.view_mut((0, 0), (n, n)).add_assign(&hw);
                }
            }
            let (d, _) = solve_eq_newton(&h, &a_aug, &grad)?;
            let dec = (&h * &d).dot(&d).max(0.0);
            if dec / 2.0 < PHASE1_NEWTON_TOL {
                break;
            }
            let mut v = DVector::zeros(n + 1);
            v.rows_mut(0, n).copy_from(&w);
            v[n] = sl;
            let feasible = |v: &DVector<f64>| {
                let f = env.eval_f(&v.rows(0, n).into(), p);
                f.iter().all(|&fi| fi - v[n] < 0.0)
            };
            let merit = |v: &DVector<f64>| -> f64 {
                let f = env.eval_f(&v.rows(0, n).into(), p);
                t * v[n] - f.iter().map(|&fi| (v[n] - fi).ln()).sum::<f64>()
            };
            if !take_newton_step(&mut v, &d, dec, feasible, merit) {
                break;
            }
            w = v.rows(0, n).into();
            sl = v[n];
            *steps += 1;
            if *steps > prog.max_iter {
                return Err(RiskError::Infeasible(format!(
                    "phase-I did not find an interior point (slack {sl:.3e})"
                )));
            }
        }
        if (m as f64) / t < prog.tol || sl < -1e-7 {
            break;
        }
        t *= BARRIER_MU;
    }
    if env.eval_f(&w, p).max() < -1e-12 {
        Ok(w)
    } else {
        Err(RiskError::Infeasible(format!(
            "no strictly feasible point (best slack {sl:.3e})"
        )))
    }
}

use std::ops::AddAssign;

fn finish_report(
    env: &RiskEnvelope,
    prog: &EnvelopeProgram,
    sp: SaddlePoint,
    iterations: usize,
    barrier_path: Vec<(f64, f64)>,
) -> Result<SolveReport, RiskError> {
    let mut report = kkt_verify(env, &prog.dist, &prog.z, &sp);
    // Stationarity of the regularized objective differs from the plain
    // Lagrangian by the regularization gradient; discount it.
    if prog.reg > 0.0 {
        report.stationarity =
            (report.stationarity - 2.0 * prog.reg * prog.dist.probs().amax_or_zero()).max(0.0);
    }
    let kkt_residual = report.max_residual();
    if kkt_residual > prog.tol * 100.0 {
        return Err(RiskError::DidNotConverge {
            residual: kkt_residual,
            iterations,
        });
    }
    Ok(SolveReport {
        sp,
        iterations,
        kkt_residual,
        barrier_path,
    })
}
