//! Stochastic gradient descent over the policy parameter, with step
//! schedules, optional gradient clipping and per-iteration trace logging.
//!
//! Minimization convention throughout: costs are minimized; benchmarks that
//! maximize returns negate them at ingestion.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use crate::error::RiskError;
use crate::probspace::stream;
use crate::staticgrad::GradEstimate;

/// Gradient estimator driven by the loop: parameter and a per-iteration
/// seed stream in, estimate out.
pub type GradFn<'a> = dyn FnMut(&[f64], &mut ChaCha8Rng) -> Result<GradEstimate, RiskError> + 'a;
/// Objective estimator with the same contract.
pub type ObjFn<'a> = dyn FnMut(&[f64], &mut ChaCha8Rng) -> Result<f64, RiskError> + 'a;

/// Step-size schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSchedule {
    Constant(f64),
    /// `a / k` (with `k` starting at 1).
    InvK {
        a: f64,
    },
    /// `a / (b + k)`.
    Decay {
        a: f64,
        b: f64,
    },
}

impl StepSchedule {
    pub fn at(&self, k: usize) -> f64 {
        match *self {
            StepSchedule::Constant(a) => a,
            StepSchedule::InvK { a } => a / (k + 1) as f64,
            StepSchedule::Decay { a, b } => a / (b + k as f64),
        }
    }

    fn valid(&self) -> bool {
        match *self {
            StepSchedule::Constant(a) | StepSchedule::InvK { a } => a > 0.0,
            StepSchedule::Decay { a, b } => a > 0.0 && b >= 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SgdConfig {
    pub schedule: StepSchedule,
    pub iters: usize,
    pub theta0: Vec<f64>,
    /// Max gradient norm; steps are rescaled above it.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl SgdConfig {
    pub fn new(theta0: Vec<f64>, iters: usize) -> Self {
        SgdConfig {
            schedule: StepSchedule::Decay { a: 1.0, b: 10.0 },
            iters,
            theta0,
            grad_clip: None,
            seed: 0,
        }
    }
}

/// One recorded iterate.
#[derive(Debug, Clone)]
pub struct TracePoint {
    pub iter: usize,
    pub theta: Vec<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    pub wall_time_s: f64,
}

/// Iterate log: `iters + 1` rows (initial point included).
#[derive(Debug, Clone)]
pub struct RunTrace {
    pub points: Vec<TracePoint>,
    /// Set when the run aborted on a non-finite gradient.
    pub aborted: Option<String>,
}

impl RunTrace {
    pub fn final_theta(&self) -> &[f64] {
        &self.points.last().expect("trace is never empty").theta
    }

    /// CSV rows `iter,theta_0..theta_K,objective,grad_norm`.
    pub fn to_csv(&self) -> String {
        let dim = self.points.first().map_or(0, |p| p.theta.len());
        let mut out = String::from("iter");
        for k in 0..dim {
            out.push_str(&format!(",theta_{k}"));
        }
        out.push_str(",objective,grad_norm\n");
        for p in &self.points {
            out.push_str(&p.iter.to_string());
            for v in &p.theta {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{},{}\n", p.objective, p.grad_norm));
        }
        out
    }
}

/// Runs `theta_{k+1} = theta_k - alpha_k g_k` for `cfg.iters` steps.
///
/// Each iteration draws its gradient and objective estimates from dedicated
/// seed streams, so runs are reproducible. A non-finite gradient aborts the
/// loop; the trace collected so far is returned with the `aborted` marker
/// set.
pub fn sgd_minimize(
    grad_fn: &mut GradFn,
    obj_fn: &mut ObjFn,
    cfg: &SgdConfig,
) -> Result<RunTrace, RiskError> {
    if cfg.iters == 0 {
        return Err(RiskError::InvalidConfig("iters must be >= 1".into()));
    }
    if !cfg.schedule.valid() {
        return Err(RiskError::InvalidConfig(
            "step sizes must be positive".into(),
        ));
    }
    let start = Instant::now();
    let mut theta = cfg.theta0.clone();
    let mut points = Vec::with_capacity(cfg.iters + 1);
    let mut last_norm = 0.0;
    for k in 0..cfg.iters {
        let mut grad_rng = stream(cfg.seed, 2 * k as u64);
        let mut obj_rng = stream(cfg.seed, 2 * k as u64 + 1);
        let est = grad_fn(&theta, &mut grad_rng)?;
        let objective = obj_fn(&theta, &mut obj_rng)?;
        let mut g: Vec<f64> = est.grad.iter().copied().collect();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            points.push(TracePoint {
                iter: k,
                theta: theta.clone(),
                objective,
                grad_norm: norm,
                wall_time_s: start.elapsed().as_secs_f64(),
            });
            return Ok(RunTrace {
                points,
                aborted: Some(format!("non-finite gradient at iteration {k}")),
            });
        }
        if let Some(clip) = cfg.grad_clip {
            if norm > clip {
                let scale = clip / norm;
                for v in &mut g {
                    *v *= scale;
                }
            }
        }
        points.push(TracePoint {
            iter: k,
            theta: theta.clone(),
            objective,
            grad_norm: norm,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        let alpha = cfg.schedule.at(k);
        for (t, gi) in theta.iter_mut().zip(&g) {
            *t -= alpha * gi;
        }
        last_norm = norm;
    }
    let mut obj_rng = stream(cfg.seed, 2 * cfg.iters as u64 + 1);
    let objective = obj_fn(&theta, &mut obj_rng)?;
    points.push(TracePoint {
        iter: cfg.iters,
        theta,
        objective,
        grad_norm: last_norm,
        wall_time_s: start.elapsed().as_secs_f64(),
    });
    Ok(RunTrace {
        points,
        aborted: None,
    })
}
