//! Gradient estimators for static coherent risk.
//!
//! The exact route evaluates the saddle-point gradient formula by full
//! enumeration over the support:
//!
//! ```text
//! grad rho = E_{xi*}[ score (Z - lam_p) ]
//!            - sum_e lam_e(e) grad_theta g_e(xi*; P)
//!            - sum_i lam_i(i) grad_theta f_i(xi*; P)
//! ```
//!
//! with `grad_theta g_e = sum_w (dg_e/dp(w)) P(w) score(w)` by the chain
//! rule. The sampled routes are the closed-form CVaR tail estimator, the
//! mean-semideviation estimator built from sample moments, the general
//! sample-average estimator (empirical distribution + envelope program +
//! the formula above under the empirical measure), and a mean-standard-
//! deviation baseline.

use nalgebra::DVector;

use crate::envelope::{RiskEnvelope, SaddlePoint};
use crate::error::RiskError;
use crate::probspace::{empirical_from_samples, CostVariable, FiniteDist, SampleBatch};
use crate::saddle::{self, EnvelopeProgram};

/// KKT residual bound above which a saddle point is rejected as stale.
pub const SADDLE_TOL: f64 = 1e-6;

/// A gradient estimate with bookkeeping for diagnostics.
#[derive(Debug, Clone)]
pub struct GradEstimate {
    pub grad: DVector<f64>,
    pub n_samples: usize,
    pub diagnostics: GradDiagnostics,
}

#[derive(Debug, Clone, Default)]
pub struct GradDiagnostics {
    /// KKT residual of the saddle used, when one was involved.
    pub saddle_residual: Option<f64>,
    /// Number of strict-tail samples (CVaR estimator).
    pub tail_count: Option<usize>,
    /// Set when the empirical spread (semideviation or variance) vanished
    /// and only the mean-gradient term was returned.
    pub degenerate_spread: bool,
    /// Fraction of probability mass on the quantile atom (CVaR), a warning
    /// signal for nondifferentiable configurations.
    pub quantile_atom_mass: Option<f64>,
    /// Set when a trajectory horizon was shorter than the discount tail
    /// bound requires.
    pub horizon_truncated: bool,
}

/// Exact saddle-point gradient by enumeration over the support.
pub fn grad_saddle_exact(
    dist: &FiniteDist,
    z: &CostVariable,
    sp: &SaddlePoint,
    env: &RiskEnvelope,
) -> Result<GradEstimate, RiskError> {
    let scores = dist.scores().ok_or(RiskError::MissingScores)?;
    let residual = saddle::kkt_verify(env, dist, z, sp).max_residual();
    if residual > SADDLE_TOL {
        return Err(RiskError::InvalidSaddle {
            residual,
            tol: SADDLE_TOL,
        });
    }
    let n = dist.len();
    let k = scores.ncols();
    let p = dist.probs();
    let zv = z.values();
    let corr = env.dp_correction(&sp.primal, p, &sp.lam_e, &sp.lam_i);
    let mut grad = DVector::zeros(k);
    for w in 0..n {
        let weight = p[w] * (sp.xi[w] * (zv[w] - sp.lam_p) - corr[w]);
        if weight != 0.0 {
            for j in 0..k {
                grad[j] += weight * scores[(w, j)];
            }
        }
    }
    Ok(GradEstimate {
        grad,
        n_samples: 0,
        diagnostics: GradDiagnostics {
            saddle_residual: Some(residual),
            ..Default::default()
        },
    })
}

fn require_scores(batch: &SampleBatch) -> Result<usize, RiskError> {
    if batch.is_empty() {
        return Err(RiskError::NoSamples);
    }
    let k = batch.theta_dim();
    if k == 0 {
        return Err(RiskError::MissingScores);
    }
    Ok(k)
}

/// Closed-form sampled CVaR gradient: empirical `(1-alpha)`-quantile `q`,
/// then `sum_{tail} score (Z - q) / (alpha N)` over the strict-tail draws.
///
/// The `alpha N` normalization is the sample version of the saddle-point
/// formula (density `1/alpha` on the tail) and stays consistent for atomic
/// distributions, where the strict-tail count converges to `P(Z > q) N`,
/// not `alpha N`; for continuous costs the two coincide and the estimate is
/// the plain tail average.
///
/// At `alpha = 1` the quantile drops to the sample minimum and every draw is
/// in the tail, recovering the likelihood-ratio gradient of the mean.
pub fn grad_cvar_sampled(batch: &SampleBatch, alpha: f64) -> Result<GradEstimate, RiskError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(RiskError::InvalidAlpha(alpha));
    }
    let k = require_scores(batch)?;
    let n = batch.len();
    if (n as f64) * alpha < 10.0 {
        return Err(RiskError::InvalidConfig(format!(
            "need N * alpha >= 10 tail samples in expectation, got N = {n}, alpha = {alpha}"
        )));
    }
    let mut costs: Vec<f64> = batch.draws.iter().map(|d| d.cost).collect();
    costs.sort_by(f64::total_cmp);
    let q = if alpha >= 1.0 {
        costs[0]
    } else {
        // Smallest order statistic with cumulative mass >= 1 - alpha.
        let rank = (((1.0 - alpha) * n as f64).ceil() as usize).clamp(1, n);
        costs[rank - 1]
    };
    let in_tail = |c: f64| if alpha >= 1.0 { true } else { c > q };

    let mut grad = DVector::zeros(k);
    let mut tail = 0usize;
    for d in &batch.draws {
        if in_tail(d.cost) {
            tail += 1;
            for j in 0..k {
                grad[j] += d.score[j] * (d.cost - q);
            }
        }
    }
    if tail == 0 {
        // Only possible when the quantile equals the sample maximum. With
        // every cost tied the gradient is exactly zero; otherwise the tail
        // carries no usable sample.
        if costs.iter().all(|&c| c == costs[0]) {
            return Ok(GradEstimate {
                grad,
                n_samples: n,
                diagnostics: GradDiagnostics {
                    tail_count: Some(0),
                    degenerate_spread: true,
                    ..Default::default()
                },
            });
        }
        return Err(RiskError::NoTailSamples { alpha, n });
    }
    grad /= alpha * n as f64;
    let atom_mass = costs.iter().filter(|&&c| c == q).count() as f64 / n as f64;
    Ok(GradEstimate {
        grad,
        n_samples: n,
        diagnostics: GradDiagnostics {
            tail_count: Some(tail),
            quantile_atom_mass: Some(atom_mass),
            ..Default::default()
        },
    })
}

/// Sampled mean-semideviation gradient from sample moments:
/// mean, semideviation, mean gradient, then the combination
/// `dmean + (alpha / sd) * avg[(z - mean)_+ (score (z - mean) - dmean)]`.
///
/// A vanishing sample semideviation returns the mean-gradient term alone,
/// flagged in the diagnostics.
pub fn grad_gmsd(batch: &SampleBatch, alpha: f64) -> Result<GradEstimate, RiskError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(RiskError::InvalidAlpha(alpha));
    }
    let k = require_scores(batch)?;
    let n = batch.len();
    if n < 2 {
        return Err(RiskError::InvalidConfig("need at least 2 samples".into()));
    }
    let nf = n as f64;
    let mean: f64 = batch.draws.iter().map(|d| d.cost).sum::<f64>() / nf;
    let sd = (batch
        .draws
        .iter()
        .map(|d| (d.cost - mean).max(0.0).powi(2))
        .sum::<f64>()
        / nf)
        .sqrt();
    let mut dmean = DVector::zeros(k);
    for d in &batch.draws {
        for j in 0..k {
            dmean[j] += d.score[j] * d.cost;
        }
    }
    dmean /= nf;

    if sd == 0.0 {
        return Ok(GradEstimate {
            grad: dmean,
            n_samples: n,
            diagnostics: GradDiagnostics {
                degenerate_spread: true,
                ..Default::default()
            },
        });
    }
    let mut semi = DVector::zeros(k);
    for d in &batch.draws {
        let dev = (d.cost - mean).max(0.0);
        if dev > 0.0 {
            for j in 0..k {
                semi[j] += dev * (d.score[j] * (d.cost - mean) - dmean[j]);
            }
        }
    }
    semi *= alpha / (sd * nf);
    Ok(GradEstimate {
        grad: dmean + semi,
        n_samples: n,
        diagnostics: GradDiagnostics::default(),
    })
}

/// Sample-average estimator: build the empirical distribution, solve the
/// envelope program on it, and evaluate the saddle-point formula under the
/// empirical measure (including the constraint correction terms).
///
/// With `support = Some(n)` draws are aggregated by outcome id (costs and
/// scores must be functions of the id). With `support = None` every draw is
/// its own atom of mass `1/N`, which accommodates continuous costs.
pub fn grad_saa(
    env: &RiskEnvelope,
    batch: &SampleBatch,
    support: Option<usize>,
) -> Result<GradEstimate, RiskError> {
    let k = require_scores(batch)?;
    let n = batch.len();
    let (dist, z) = match support {
        Some(size) => {
            let dist = empirical_from_samples(batch, size)?;
            let mut costs = vec![0.0; size];
            for d in &batch.draws {
                costs[d.outcome] = d.cost;
            }
            (dist, CostVariable::new(costs)?)
        }
        None => {
            let probs = vec![1.0 / n as f64; n];
            let mut scores = nalgebra::DMatrix::zeros(n, k);
            for (i, d) in batch.draws.iter().enumerate() {
                for j in 0..k {
                    scores[(i, j)] = d.score[j];
                }
            }
            (
                FiniteDist::with_scores(probs, Some(scores))?,
                CostVariable::new(batch.draws.iter().map(|d| d.cost).collect())?,
            )
        }
    };
    let prog = EnvelopeProgram::new(dist, z);
    let report = saddle::solve_envelope_program(env, &prog)?;
    let mut est = grad_saddle_exact(&prog.dist, &prog.z, &report.sp, env)?;
    est.n_samples = n;
    Ok(est)
}

/// Likelihood-ratio gradient of `E[Z] + c * sqrt(Var[Z])`, assembled from
/// sample estimates of the first two moments and their gradients.
pub fn grad_meanstd_baseline(batch: &SampleBatch, c: f64) -> Result<GradEstimate, RiskError> {
    let k = require_scores(batch)?;
    let n = batch.len();
    if n < 2 {
        return Err(RiskError::InvalidConfig("need at least 2 samples".into()));
    }
    let nf = n as f64;
    let mean: f64 = batch.draws.iter().map(|d| d.cost).sum::<f64>() / nf;
    let m2: f64 = batch.draws.iter().map(|d| d.cost * d.cost).sum::<f64>() / nf;
    let var = (m2 - mean * mean).max(0.0);
    let mut dmean = DVector::zeros(k);
    let mut dm2 = DVector::zeros(k);
    for d in &batch.draws {
        for j in 0..k {
            dmean[j] += d.score[j] * d.cost;
            dm2[j] += d.score[j] * d.cost * d.cost;
        }
    }
    dmean /= nf;
    dm2 /= nf;
    if var == 0.0 {
        return Ok(GradEstimate {
            grad: dmean,
            n_samples: n,
            diagnostics: GradDiagnostics {
                degenerate_spread: true,
                ..Default::default()
            },
        });
    }
    let dstd = (dm2 - &dmean * (2.0 * mean)) / (2.0 * var.sqrt());
    Ok(GradEstimate {
        grad: dmean + dstd * c,
        n_samples: n,
        diagnostics: GradDiagnostics::default(),
    })
}
