//! Experiment configuration, the three-asset selection benchmark,
//! gradient-check and optimization drivers, and result emission. The `crisk`
//! binary is a thin argument-parsing layer over this module.
//!
//! Config files are JSON:
//!
//! ```json
//! {
//!   "objective": {"risk": "msd", "alpha": 1.0},
//!   "model": {"assets": true},
//!   "estimator": "gmsd",
//!   "samples_per_iter": 10000,
//!   "sgd": {"schedule": {"kind": "decay", "a": 10.0, "b": 10.0},
//!           "iters": 300, "theta0": [0.0, 0.0, 0.0], "seed": 1},
//!   "output": "trace.csv"
//! }
//! ```
//!
//! Models: `{"assets": true}` (the benchmark), `{"atoms": {"costs": [...],
//! "features": [[...]]}}` (finite softmax selection; features optional,
//! one-hot by default) or `{"mdp_file": "mdp.json"}`. The reward convention
//! is cost = -return; benchmark returns are negated at ingestion.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynrisk::{
    grad_dynamic_exact, grad_dynamic_twophase, prsvi, solve_value_exact, KernelSource, PrsviConfig,
    ValueFn,
};
use crate::envelope::{
    evaluate_risk, make_cvar, make_expectation, make_msd, RiskEnvelope, SolverOpts,
};
use crate::error::RiskError;
use crate::mdp::{simulate, FeatureMap, Mdp, SoftmaxPolicy};
use crate::optimizer::{sgd_minimize, RunTrace, SgdConfig, StepSchedule};
use crate::probspace::{
    sample_index, softmax, stream, CostVariable, Draw, FiniteDist, ParamModel, SampleBatch,
    SoftmaxAtoms,
};
use crate::staticgrad::{
    grad_cvar_sampled, grad_gmsd, grad_meanstd_baseline, grad_saa, grad_saddle_exact, GradEstimate,
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Risk objective named in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "risk", rename_all = "lowercase")]
pub enum Objective {
    Expectation,
    Cvar { alpha: f64 },
    Msd { alpha: f64 },
    Meanstd { c: f64 },
}

impl Objective {
    /// The coherent envelope behind the objective; the mean-std baseline has
    /// none.
    pub fn envelope(&self) -> Result<Option<RiskEnvelope>, RiskError> {
        Ok(match *self {
            Objective::Expectation => Some(make_expectation()),
            Objective::Cvar { alpha } => Some(make_cvar(alpha)?),
            Objective::Msd { alpha } => Some(make_msd(alpha)?),
            Objective::Meanstd { .. } => None,
        })
    }

    pub fn label(&self) -> String {
        match *self {
            Objective::Expectation => "expectation".into(),
            Objective::Cvar { alpha } => format!("cvar({alpha})"),
            Objective::Msd { alpha } => format!("msd({alpha})"),
            Objective::Meanstd { c } => format!("meanstd({c})"),
        }
    }

    /// Empirical value of the objective on a cost sample.
    pub fn empirical_value(&self, costs: &[f64]) -> f64 {
        let n = costs.len() as f64;
        let mean = costs.iter().sum::<f64>() / n;
        match *self {
            Objective::Expectation => mean,
            Objective::Cvar { alpha } => {
                let mut sorted: Vec<f64> = costs.to_vec();
                sorted.sort_by(|a, b| b.total_cmp(a));
                let mut mass = alpha;
                let mut acc = 0.0;
                let w = 1.0 / n;
                for &z in &sorted {
                    if mass <= 0.0 {
                        break;
                    }
                    let take = w.min(mass);
                    acc += take * z;
                    mass -= take;
                }
                acc / alpha
            }
            Objective::Msd { alpha } => {
                let sd = (costs
                    .iter()
                    .map(|z| (z - mean).max(0.0).powi(2))
                    .sum::<f64>()
                    / n)
                    .sqrt();
                mean + alpha * sd
            }
            Objective::Meanstd { c } => {
                let var = costs.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / n;
                mean + c * var.sqrt()
            }
        }
    }

    /// Exact value on an enumerable distribution.
    pub fn exact_value(&self, dist: &FiniteDist, z: &CostVariable) -> Result<f64, RiskError> {
        match *self {
            Objective::Meanstd { c } => {
                let mean = dist.expectation(z)?;
                let m2: f64 = (0..dist.len())
                    .map(|i| dist.prob(i) * z.value(i) * z.value(i))
                    .sum();
                Ok(mean + c * (m2 - mean * mean).max(0.0).sqrt())
            }
            _ => {
                let env = self.envelope()?.expect("coherent objective");
                let (rho, _) = evaluate_risk(&env, dist, z, &SolverOpts::default())?;
                Ok(rho)
            }
        }
    }
}

/// Gradient estimator named in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    SaddleExact,
    Cvar,
    Gmsd,
    Saa,
    Meanstd,
    DynamicExact,
    DynamicTwophase,
}

impl Estimator {
    pub fn is_dynamic(&self) -> bool {
        matches!(self, Estimator::DynamicExact | Estimator::DynamicTwophase)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelConfig {
    /// The three-asset selection benchmark.
    Assets(serde_json::Value),
    /// Finite softmax atom selection.
    Atoms {
        costs: Vec<f64>,
        #[serde(default)]
        features: Option<Vec<Vec<f64>>>,
    },
    /// Path to an MDP JSON document.
    MdpFile(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ScheduleConfig {
    pub kind: String,
    #[serde(default)]
    pub a: Option<f64>,
    #[serde(default)]
    pub b: Option<f64>,
}

impl ScheduleConfig {
    fn build(&self) -> Result<StepSchedule, RiskError> {
        let a = self.a.unwrap_or(1.0);
        match self.kind.as_str() {
            "constant" => Ok(StepSchedule::Constant(a)),
            "inv-k" => Ok(StepSchedule::InvK { a }),
            "decay" => Ok(StepSchedule::Decay {
                a,
                b: self.b.unwrap_or(10.0),
            }),
            other => Err(RiskError::InvalidConfig(format!(
                "unknown schedule kind {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SgdSection {
    #[serde(default)]
    pub schedule: Option<ScheduleConfig>,
    #[serde(default = "default_iters")]
    pub iters: usize,
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_iters() -> usize {
    300
}

impl Default for SgdSection {
    fn default() -> Self {
        SgdSection {
            schedule: None,
            iters: default_iters(),
            theta0: None,
            grad_clip: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct CriticConfig {
    pub kind: String,
    #[serde(default = "default_traj_len")]
    pub trajectory_len: usize,
    #[serde(default = "default_k_iters")]
    pub k_iters: usize,
    #[serde(default)]
    pub reg: Option<f64>,
}

fn default_traj_len() -> usize {
    1000
}

fn default_k_iters() -> usize {
    200
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            kind: "exact".into(),
            trajectory_len: default_traj_len(),
            k_iters: default_k_iters(),
            reg: None,
        }
    }
}

/// Top-level experiment configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub objective: Objective,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    pub estimator: Estimator,
    #[serde(default = "default_samples")]
    pub samples_per_iter: usize,
    #[serde(default)]
    pub sgd: SgdSection,
    #[serde(default)]
    pub critic: Option<CriticConfig>,
    /// Trajectory horizon for the two-phase estimator; default is the
    /// discount tail bound at 1e-6.
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default)]
    pub output: Option<String>,
    /// Inline probabilities and costs for `eval-risk`.
    #[serde(default)]
    pub dist: Option<Vec<f64>>,
    #[serde(default)]
    pub z: Option<Vec<f64>>,
    /// Force the numeric solver in `eval-risk`.
    #[serde(default)]
    pub numeric: bool,
}

fn default_samples() -> usize {
    10_000
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, RiskError> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), RiskError> {
        if self.samples_per_iter < 1 {
            return Err(RiskError::InvalidConfig(
                "samples_per_iter must be >= 1".into(),
            ));
        }
        let ok = match (self.objective, self.estimator) {
            (_, Estimator::DynamicExact | Estimator::DynamicTwophase) => {
                !matches!(self.objective, Objective::Meanstd { .. })
            }
            (Objective::Expectation, Estimator::SaddleExact | Estimator::Saa | Estimator::Gmsd) => {
                true
            }
            (Objective::Cvar { .. }, Estimator::SaddleExact | Estimator::Saa | Estimator::Cvar) => {
                true
            }
            (Objective::Msd { .. }, Estimator::SaddleExact | Estimator::Saa | Estimator::Gmsd) => {
                true
            }
            (Objective::Meanstd { .. }, Estimator::Meanstd) => true,
            _ => false,
        };
        if !ok {
            return Err(RiskError::InvalidConfig(format!(
                "estimator {:?} is not applicable to objective {}",
                self.estimator,
                self.objective.label()
            )));
        }
        if self.estimator == Estimator::Saa && self.samples_per_iter > 2000 {
            return Err(RiskError::InvalidConfig(
                "saa solves a program over one atom per sample; keep samples_per_iter <= 2000"
                    .into(),
            ));
        }
        // Envelope parameter validation.
        self.objective.envelope()?;
        Ok(())
    }

    fn sgd_config(&self, dim: usize, seed_override: Option<u64>) -> Result<SgdConfig, RiskError> {
        let theta0 = match &self.sgd.theta0 {
            Some(t) => {
                if t.len() != dim {
                    return Err(RiskError::InvalidConfig(format!(
                        "theta0 has length {}, model needs {dim}",
                        t.len()
                    )));
                }
                t.clone()
            }
            None => vec![0.0; dim],
        };
        let schedule = match &self.sgd.schedule {
            Some(s) => s.build()?,
            // Benchmark-calibrated default; see the asset benchmark notes.
            None => StepSchedule::Decay { a: 10.0, b: 10.0 },
        };
        Ok(SgdConfig {
            schedule,
            iters: self.sgd.iters,
            theta0,
            grad_clip: self.sgd.grad_clip,
            seed: seed_override.unwrap_or(self.sgd.seed),
        })
    }
}

// ---------------------------------------------------------------------------
// The three-asset benchmark model
// ---------------------------------------------------------------------------

/// Asset-return sampler: A1 ~ Normal(1, 1), A2 ~ Normal(4, 6),
/// A3 ~ Pareto(shape 1.5, scale 1). Selection is softmax over three logits;
/// returns do not depend on theta, so the draw's score is the selection
/// score alone.
#[derive(Debug, Clone, Copy, Default)]
pub struct AssetModel;

/// Pareto shape parameter of the third asset.
pub const PARETO_SHAPE: f64 = 1.5;
/// True means of the three asset returns.
pub const ASSET_MEANS: [f64; 3] = [1.0, 4.0, 3.0];

impl AssetModel {
    pub fn n_assets(&self) -> usize {
        3
    }

    /// One return draw for an asset.
    pub fn sample_return(&self, asset: usize, rng: &mut ChaCha8Rng) -> f64 {
        match asset {
            0 => Normal::new(1.0, 1.0).unwrap().sample(rng),
            1 => Normal::new(4.0, 6.0).unwrap().sample(rng),
            2 => {
                // Inverse CDF: z = u^{-1/shape} on u in (0, 1].
                let u: f64 = 1.0 - rng.gen::<f64>();
                u.powf(-1.0 / PARETO_SHAPE)
            }
            _ => panic!("asset index out of range"),
        }
    }

    pub fn selection_probs(&self, theta: &[f64]) -> DVector<f64> {
        softmax(&DVector::from_column_slice(theta))
    }

    /// Draws `n` (asset, cost = -return, score) records.
    pub fn sample_batch(&self, theta: &[f64], n: usize, rng: &mut ChaCha8Rng) -> SampleBatch {
        let probs = self.selection_probs(theta);
        let mut draws = Vec::with_capacity(n);
        for _ in 0..n {
            let asset = sample_index(&probs, rng);
            let ret = self.sample_return(asset, rng);
            let score: Vec<f64> = (0..3)
                .map(|k| {
                    if k == asset {
                        1.0 - probs[k]
                    } else {
                        -probs[k]
                    }
                })
                .collect();
            draws.push(Draw {
                outcome: asset,
                cost: -ret,
                score,
            });
        }
        SampleBatch { draws, seed: 0 }
    }
}

// ---------------------------------------------------------------------------
// Shared estimator plumbing
// ---------------------------------------------------------------------------

fn sampled_gradient(
    objective: Objective,
    estimator: Estimator,
    batch: &SampleBatch,
    support: Option<usize>,
) -> Result<GradEstimate, RiskError> {
    match (objective, estimator) {
        (Objective::Cvar { alpha }, Estimator::Cvar) => {
            let est = grad_cvar_sampled(batch, alpha)?;
            // The estimator is set-valued where the quantile atom carries
            // mass; surface that once per process.
            if est.diagnostics.quantile_atom_mass.unwrap_or(0.0) > 0.1 {
                use std::sync::atomic::{AtomicBool, Ordering};
                static WARNED: AtomicBool = AtomicBool::new(false);
                if !WARNED.swap(true, Ordering::Relaxed) {
                    eprintln!(
                        "warning: more than 10% of the sample mass sits on the CVaR quantile \
                         atom; the gradient is set-valued there"
                    );
                }
            }
            Ok(est)
        }
        (Objective::Msd { alpha }, Estimator::Gmsd) => grad_gmsd(batch, alpha),
        (Objective::Expectation, Estimator::Gmsd) => grad_gmsd(batch, 0.0),
        (Objective::Meanstd { c }, Estimator::Meanstd) => grad_meanstd_baseline(batch, c),
        (obj, Estimator::Saa) => {
            let env = obj
                .envelope()?
                .ok_or_else(|| RiskError::InvalidConfig("saa needs a coherent objective".into()))?;
            grad_saa(&env, batch, support)
        }
        _ => Err(RiskError::InvalidConfig(format!(
            "estimator {estimator:?} is not a sampled estimator for {}",
            objective.label()
        ))),
    }
}

fn atoms_model(costs: &[f64], features: &Option<Vec<Vec<f64>>>) -> Result<SoftmaxAtoms, RiskError> {
    match features {
        None => Ok(SoftmaxAtoms::one_hot(costs.to_vec())),
        Some(rows) => {
            let k = rows.first().map_or(0, |r| r.len());
            let m = DMatrix::from_fn(rows.len(), k, |i, j| rows[i][j]);
            SoftmaxAtoms::new(costs.to_vec(), m)
        }
    }
}

fn load_mdp(cfg: &ExperimentConfig) -> Result<(Mdp, FeatureMap), RiskError> {
    match &cfg.model {
        Some(ModelConfig::MdpFile(path)) => {
            let text = std::fs::read_to_string(path)?;
            let (mdp, features) = Mdp::from_json(&text)?;
            let features =
                features.unwrap_or_else(|| FeatureMap::one_hot(mdp.n_states(), mdp.n_actions()));
            Ok((mdp, features))
        }
        _ => Err(RiskError::InvalidConfig(
            "this command needs model = {\"mdp_file\": \"...\"}".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// Runs the asset-selection benchmark and returns the per-iteration
/// selection probabilities as CSV (`iter,p_a1,p_a2,p_a3`).
pub fn cmd_bench_assets(
    cfg: &ExperimentConfig,
    seed_override: Option<u64>,
) -> Result<String, RiskError> {
    if !matches!(cfg.model, Some(ModelConfig::Assets(_)) | None) {
        return Err(RiskError::InvalidConfig(
            "bench-assets runs on the asset model".into(),
        ));
    }
    if cfg.estimator == Estimator::SaddleExact || cfg.estimator.is_dynamic() {
        return Err(RiskError::InvalidConfig(
            "bench-assets needs a sampled estimator (returns are continuous)".into(),
        ));
    }
    let model = AssetModel;
    let n = cfg.samples_per_iter;
    let objective = cfg.objective;
    let estimator = cfg.estimator;
    let sgd = cfg.sgd_config(3, seed_override)?;

    let mut grad_fn = |theta: &[f64], rng: &mut ChaCha8Rng| {
        let batch = model.sample_batch(theta, n, rng);
        sampled_gradient(objective, estimator, &batch, None)
    };
    // Objective estimates only annotate the trace; a smaller batch is fine.
    let n_obj = n.min(2000);
    let mut obj_fn = |theta: &[f64], rng: &mut ChaCha8Rng| {
        let batch = model.sample_batch(theta, n_obj, rng);
        let costs: Vec<f64> = batch.draws.iter().map(|d| d.cost).collect();
        Ok(objective.empirical_value(&costs))
    };
    let trace = sgd_minimize(&mut grad_fn, &mut obj_fn, &sgd)?;

    let mut out = String::from("iter,p_a1,p_a2,p_a3\n");
    for p in &trace.points {
        let probs = model.selection_probs(&p.theta);
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.iter, probs[0], probs[1], probs[2]
        ));
    }
    Ok(out)
}

/// Gradient-check report entry.
#[derive(Debug, Serialize)]
pub struct GradCheckReport {
    pub objective: String,
    pub estimator: String,
    pub tol: f64,
    pub max_rel_dev: f64,
    pub pass: bool,
    pub per_theta: Vec<f64>,
}

/// Compares the configured exact estimator against central finite
/// differences of the exactly computed objective, at 5 seeded random
/// parameter points. Static checks run `grad_saddle_exact` on an atom model;
/// dynamic checks run the exact dynamic gradient on an MDP.
pub fn cmd_grad_check(
    cfg: &ExperimentConfig,
    seed_override: Option<u64>,
) -> Result<GradCheckReport, RiskError> {
    let seed = seed_override.unwrap_or(cfg.sgd.seed);
    let h = 1e-6;
    let opts = SolverOpts::default();

    let (tol, per_theta): (f64, Vec<f64>) = if cfg.estimator.is_dynamic() {
        let (mdp, features) = match &cfg.model {
            Some(ModelConfig::MdpFile(_)) => load_mdp(cfg)?,
            None => builtin_mdp(),
            _ => {
                return Err(RiskError::InvalidConfig(
                    "dynamic check needs an MDP".into(),
                ))
            }
        };
        let env = cfg.objective.envelope()?.ok_or_else(|| {
            RiskError::InvalidConfig("dynamic check needs a coherent objective".into())
        })?;
        let mut rng = stream(seed, 0);
        let mut devs = Vec::new();
        for _ in 0..5 {
            let theta: Vec<f64> = (0..features.dim())
                .map(|_| rng.gen::<f64>() - 0.5)
                .collect();
            let policy = SoftmaxPolicy::new(theta, features.clone())?;
            let g = grad_dynamic_exact(&mdp, &policy, &env, 1e-11, &opts)?.grad;
            let fd = DVector::from_fn(policy.theta_dim(), |k, _| {
                let mut up: Vec<f64> = policy.theta().iter().copied().collect();
                up[k] += h;
                let mut dn = up.clone();
                dn[k] -= 2.0 * h;
                let vu = solve_value_exact(
                    &mdp,
                    &policy.with_theta(&up).expect("dim"),
                    &env,
                    1e-11,
                    &opts,
                )
                .map(|(v, _)| v.value(mdp.x0()))
                .unwrap_or(f64::NAN);
                let vd = solve_value_exact(
                    &mdp,
                    &policy.with_theta(&dn).expect("dim"),
                    &env,
                    1e-11,
                    &opts,
                )
                .map(|(v, _)| v.value(mdp.x0()))
                .unwrap_or(f64::NAN);
                (vu - vd) / (2.0 * h)
            });
            devs.push((g - &fd).amax() / (1.0 + fd.amax()));
        }
        (1e-3, devs)
    } else {
        let model = match &cfg.model {
            Some(ModelConfig::Atoms { costs, features }) => atoms_model(costs, features)?,
            None => builtin_atoms(),
            _ => {
                return Err(RiskError::InvalidConfig(
                    "static grad-check needs an atom model (returns must be enumerable)".into(),
                ))
            }
        };
        let mut rng = stream(seed, 0);
        let mut devs = Vec::new();
        for _ in 0..5 {
            let theta: Vec<f64> = (0..model.theta_dim())
                .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
                .collect();
            let dist = model.dist(&theta);
            let z = model.cost();
            let g = match cfg.objective {
                Objective::Meanstd { .. } => {
                    return Err(RiskError::InvalidConfig(
                        "grad-check of the mean-std baseline is sampled-only".into(),
                    ))
                }
                obj => {
                    let env = obj.envelope()?.expect("coherent objective");
                    let (_, sp) = evaluate_risk(&env, &dist, &z, &opts)?;
                    grad_saddle_exact(&dist, &z, &sp, &env)?.grad
                }
            };
            let fd = DVector::from_fn(model.theta_dim(), |k, _| {
                let mut up = theta.clone();
                up[k] += h;
                let mut dn = theta.clone();
                dn[k] -= h;
                let fu = cfg
                    .objective
                    .exact_value(&model.dist(&up), &model.cost())
                    .unwrap_or(f64::NAN);
                let fdn = cfg
                    .objective
                    .exact_value(&model.dist(&dn), &model.cost())
                    .unwrap_or(f64::NAN);
                (fu - fdn) / (2.0 * h)
            });
            devs.push((g - &fd).amax() / (1.0 + fd.amax()));
        }
        let tol = if matches!(cfg.objective, Objective::Expectation) {
            1e-6
        } else {
            1e-4
        };
        (tol, devs)
    };

    let max_rel_dev = per_theta.iter().cloned().fold(0.0f64, f64::max);
    let estimator = serde_json::to_value(cfg.estimator)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_else(|| format!("{:?}", cfg.estimator));
    Ok(GradCheckReport {
        objective: cfg.objective.label(),
        estimator,
        tol,
        max_rel_dev,
        pass: max_rel_dev < tol,
        per_theta,
    })
}

/// Canned 8-atom model for static checks when no model is configured.
fn builtin_atoms() -> SoftmaxAtoms {
    let mut rng = stream(1718, 0);
    let costs: Vec<f64> = (0..8).map(|_| rng.gen::<f64>() * 6.0 - 3.0).collect();
    SoftmaxAtoms::one_hot(costs)
}

/// Canned 3-state, 2-action MDP (gamma = 0.5) for dynamic checks.
fn builtin_mdp() -> (Mdp, FeatureMap) {
    let mut rng = stream(2024, 0);
    let mut kernel = Vec::new();
    for _ in 0..2 {
        let mut k = DMatrix::from_fn(3, 3, |_, _| rng.gen::<f64>() + 0.1);
        for mut row in k.row_iter_mut() {
            let s: f64 = row.iter().sum();
            row /= s;
        }
        kernel.push(k);
    }
    let cost =
        crate::mdp::Cost::StateAction(DMatrix::from_fn(3, 2, |_, _| rng.gen::<f64>() * 2.0 - 1.0));
    let mdp = Mdp::new(cost, kernel, 0.5, 0).expect("valid built-in MDP");
    let features = FeatureMap::one_hot(3, 2);
    (mdp, features)
}

/// Optimization result: the iterate trace and the final parameter.
pub struct OptimizeResult {
    pub trace: RunTrace,
    pub final_theta: Vec<f64>,
}

/// Full SGD pipeline for static (atoms or assets) and dynamic (MDP) models.
pub fn cmd_optimize(
    cfg: &ExperimentConfig,
    seed_override: Option<u64>,
) -> Result<OptimizeResult, RiskError> {
    match (&cfg.model, cfg.estimator.is_dynamic()) {
        (Some(ModelConfig::MdpFile(_)), true) => optimize_dynamic(cfg, seed_override),
        (Some(ModelConfig::Atoms { costs, features }), false) => {
            let model = atoms_model(costs, features)?;
            optimize_static_atoms(cfg, &model, seed_override)
        }
        (Some(ModelConfig::Assets(_)) | None, false) => optimize_assets(cfg, seed_override),
        _ => Err(RiskError::InvalidConfig(
            "estimator and model kind do not match".into(),
        )),
    }
}

fn optimize_static_atoms(
    cfg: &ExperimentConfig,
    model: &SoftmaxAtoms,
    seed_override: Option<u64>,
) -> Result<OptimizeResult, RiskError> {
    let sgd = cfg.sgd_config(model.theta_dim(), seed_override)?;
    let objective = cfg.objective;
    let estimator = cfg.estimator;
    let n = cfg.samples_per_iter;
    let support = model.support_size();

    let mut grad_fn = |theta: &[f64], rng: &mut ChaCha8Rng| match estimator {
        Estimator::SaddleExact => {
            let env = objective.envelope()?.ok_or_else(|| {
                RiskError::InvalidConfig("the exact estimator needs a coherent objective".into())
            })?;
            let dist = model.dist(theta);
            let z = model.cost();
            let (_, sp) = evaluate_risk(&env, &dist, &z, &SolverOpts::default())?;
            grad_saddle_exact(&dist, &z, &sp, &env)
        }
        _ => {
            let batch = model.sample(theta, n, rng);
            sampled_gradient(objective, estimator, &batch, Some(support))
        }
    };
    let mut obj_fn = |theta: &[f64], _rng: &mut ChaCha8Rng| {
        objective.exact_value(&model.dist(theta), &model.cost())
    };
    let trace = sgd_minimize(&mut grad_fn, &mut obj_fn, &sgd)?;
    let final_theta = trace.final_theta().to_vec();
    Ok(OptimizeResult { trace, final_theta })
}

fn optimize_assets(
    cfg: &ExperimentConfig,
    seed_override: Option<u64>,
) -> Result<OptimizeResult, RiskError> {
    if cfg.estimator == Estimator::SaddleExact {
        return Err(RiskError::InvalidConfig(
            "the exact estimator needs an enumerable model; asset returns are continuous".into(),
        ));
    }
    let model = AssetModel;
    let sgd = cfg.sgd_config(3, seed_override)?;
    let objective = cfg.objective;
    let estimator = cfg.estimator;
    let n = cfg.samples_per_iter;
    let mut grad_fn = |theta: &[f64], rng: &mut ChaCha8Rng| {
        let batch = model.sample_batch(theta, n, rng);
        sampled_gradient(objective, estimator, &batch, None)
    };
    let n_obj = n.min(2000);
    let mut obj_fn = |theta: &[f64], rng: &mut ChaCha8Rng| {
        let batch = model.sample_batch(theta, n_obj, rng);
        let costs: Vec<f64> = batch.draws.iter().map(|d| d.cost).collect();
        Ok(objective.empirical_value(&costs))
    };
    let trace = sgd_minimize(&mut grad_fn, &mut obj_fn, &sgd)?;
    let final_theta = trace.final_theta().to_vec();
    Ok(OptimizeResult { trace, final_theta })
}

fn optimize_dynamic(
    cfg: &ExperimentConfig,
    seed_override: Option<u64>,
) -> Result<OptimizeResult, RiskError> {
    let (mdp, features) = load_mdp(cfg)?;
    let env = cfg.objective.envelope()?.ok_or_else(|| {
        RiskError::InvalidConfig("dynamic optimization needs a coherent objective".into())
    })?;
    let sgd = cfg.sgd_config(features.dim(), seed_override)?;
    let opts = SolverOpts::default();
    let critic = cfg.critic.clone().unwrap_or_default();
    let estimator = cfg.estimator;
    let horizon = cfg.horizon.unwrap_or_else(|| mdp.horizon_for(1e-6));
    let n_traj = cfg.samples_per_iter;

    let mut grad_fn = |theta: &[f64], rng: &mut ChaCha8Rng| {
        let policy = SoftmaxPolicy::new(theta.to_vec(), features.clone())?;
        match estimator {
            Estimator::DynamicExact => grad_dynamic_exact(&mdp, &policy, &env, 1e-9, &opts),
            Estimator::DynamicTwophase => {
                let vf = dynamic_critic(&mdp, &policy, &env, &critic, &opts, rng)?;
                grad_dynamic_twophase(&mdp, &policy, &env, &vf, n_traj, None, horizon, rng, &opts)
            }
            _ => unreachable!("validated"),
        }
    };
    let mut obj_fn = |theta: &[f64], _rng: &mut ChaCha8Rng| {
        let policy = SoftmaxPolicy::new(theta.to_vec(), features.clone())?;
        let (v, _) = solve_value_exact(&mdp, &policy, &env, 1e-9, &opts)?;
        Ok(v.value(mdp.x0()))
    };
    let trace = sgd_minimize(&mut grad_fn, &mut obj_fn, &sgd)?;
    let final_theta = trace.final_theta().to_vec();
    Ok(OptimizeResult { trace, final_theta })
}

fn dynamic_critic(
    mdp: &Mdp,
    policy: &SoftmaxPolicy,
    env: &RiskEnvelope,
    critic: &CriticConfig,
    opts: &SolverOpts,
    rng: &mut ChaCha8Rng,
) -> Result<ValueFn, RiskError> {
    match critic.kind.as_str() {
        "exact" => {
            let (v, _) = solve_value_exact(mdp, policy, env, 1e-9, opts)?;
            Ok(v)
        }
        "prsvi" => {
            let traj = simulate(mdp, policy, critic.trajectory_len, rng, None);
            let features = DMatrix::identity(mdp.n_states(), mdp.n_states());
            let cfg = PrsviConfig {
                k_iters: critic.k_iters,
                reg: critic.reg,
                kernel: KernelSource::Empirical,
                tol: 1e-10,
                solver: *opts,
            };
            let w = prsvi(mdp, policy, env, &traj, &features, &cfg)?;
            Ok(ValueFn::Linear {
                weights: w,
                features,
            })
        }
        other => Err(RiskError::InvalidConfig(format!(
            "unknown critic kind {other}"
        ))),
    }
}

/// Computes the critic's value function for the configured policy parameter
/// and returns it as JSON.
pub fn cmd_critic(cfg: &ExperimentConfig, seed_override: Option<u64>) -> Result<String, RiskError> {
    let (mdp, features) = load_mdp(cfg)?;
    let env = cfg
        .objective
        .envelope()?
        .ok_or_else(|| RiskError::InvalidConfig("the critic needs a coherent objective".into()))?;
    let theta = match &cfg.sgd.theta0 {
        Some(t) => t.clone(),
        None => vec![0.0; features.dim()],
    };
    let policy = SoftmaxPolicy::new(theta, features)?;
    let critic = cfg.critic.clone().unwrap_or_default();
    let mut rng = stream(seed_override.unwrap_or(cfg.sgd.seed), 0);
    let vf = dynamic_critic(
        &mdp,
        &policy,
        &env,
        &critic,
        &SolverOpts::default(),
        &mut rng,
    )?;
    Ok(vf.to_json())
}

/// Risk evaluation report for `eval-risk`.
#[derive(Debug, Serialize)]
pub struct EvalRiskReport {
    pub objective: String,
    pub rho: f64,
    pub lam_p: Option<f64>,
    pub xi: Option<Vec<f64>>,
}

/// Evaluates the configured risk measure on an inline distribution.
pub fn cmd_eval_risk(cfg: &ExperimentConfig) -> Result<EvalRiskReport, RiskError> {
    let probs = cfg
        .dist
        .clone()
        .ok_or_else(|| RiskError::InvalidConfig("eval-risk needs \"dist\"".into()))?;
    let zvals = cfg
        .z
        .clone()
        .ok_or_else(|| RiskError::InvalidConfig("eval-risk needs \"z\"".into()))?;
    let dist = FiniteDist::new(probs)?;
    let z = CostVariable::new(zvals)?;
    match cfg.objective {
        Objective::Meanstd { .. } => Ok(EvalRiskReport {
            objective: cfg.objective.label(),
            rho: cfg.objective.exact_value(&dist, &z)?,
            lam_p: None,
            xi: None,
        }),
        obj => {
            let env = obj.envelope()?.expect("coherent objective");
            let opts = SolverOpts {
                force_numeric: cfg.numeric,
                ..SolverOpts::default()
            };
            let (rho, sp) = evaluate_risk(&env, &dist, &z, &opts)?;
            Ok(EvalRiskReport {
                objective: obj.label(),
                rho,
                lam_p: Some(sp.lam_p),
                xi: Some(sp.xi.iter().copied().collect()),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pareto_sampler_mean_and_median() {
        let model = AssetModel;
        let mut rng = stream(60, 0);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            let z = model.sample_return(2, &mut rng);
            sum += z;
            vals.push(z);
        }
        // Heavy tail: check the median instead of the (infinite-variance)
        // mean; the true median is 2^(1/shape).
        vals.sort_by(f64::total_cmp);
        let median = vals[n / 2];
        assert!(
            (median - 2f64.powf(1.0 / PARETO_SHAPE)).abs() < 0.01,
            "median {median}"
        );
        let mean = sum / n as f64;
        assert!((mean - 3.0).abs() < 0.5, "mean {mean}");
    }

    #[test]
    fn gaussian_asset_means() {
        let model = AssetModel;
        for (asset, mean, sd) in [(0usize, 1.0, 1.0), (1, 4.0, 6.0)] {
            let mut rng = stream(61, asset as u64);
            let n = 1_000_000;
            let m = (0..n)
                .map(|_| model.sample_return(asset, &mut rng))
                .sum::<f64>()
                / n as f64;
            let se = sd / (n as f64).sqrt();
            assert!((m - mean).abs() < 3.0 * se, "asset {asset}: {m} vs {mean}");
        }
    }

    #[test]
    fn pareto_inverse_cdf_passes_ks_test() {
        let model = AssetModel;
        let mut rng = stream(62, 0);
        let n = 100_000;
        let mut vals: Vec<f64> = (0..n).map(|_| model.sample_return(2, &mut rng)).collect();
        vals.sort_by(f64::total_cmp);
        let mut d: f64 = 0.0;
        for (i, z) in vals.iter().enumerate() {
            let cdf = 1.0 - z.powf(-PARETO_SHAPE);
            let emp_hi = (i + 1) as f64 / n as f64;
            let emp_lo = i as f64 / n as f64;
            d = d.max((emp_hi - cdf).abs()).max((cdf - emp_lo).abs());
        }
        // Kolmogorov-Smirnov critical value at level 0.01.
        let crit = 1.628 / (n as f64).sqrt();
        assert!(d < crit, "KS statistic {d} >= {crit}");
    }

    #[test]
    fn config_parses_and_validates() {
        let text = r#"{
            "objective": {"risk": "cvar", "alpha": 0.1},
            "model": {"assets": true},
            "estimator": "cvar",
            "samples_per_iter": 500,
            "sgd": {"iters": 5, "seed": 3}
        }"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        assert_eq!(cfg.objective, Objective::Cvar { alpha: 0.1 });
        assert_eq!(cfg.samples_per_iter, 500);
    }

    #[test]
    fn config_rejects_incompatible_estimator() {
        let text = r#"{
            "objective": {"risk": "meanstd", "c": 1.0},
            "estimator": "gmsd"
        }"#;
        assert!(matches!(
            ExperimentConfig::from_json(text),
            Err(RiskError::InvalidConfig(_))
        ));
    }

    #[test]
    fn config_rejects_bad_alpha() {
        let text = r#"{
            "objective": {"risk": "cvar", "alpha": 1.7},
            "estimator": "cvar"
        }"#;
        assert!(ExperimentConfig::from_json(text).is_err());
    }

    #[test]
    fn bench_csv_is_deterministic() {
        let text = r#"{
            "objective": {"risk": "expectation"},
            "estimator": "gmsd",
            "samples_per_iter": 200,
            "sgd": {"iters": 10, "seed": 11}
        }"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        let a = cmd_bench_assets(&cfg, None).unwrap();
        let b = cmd_bench_assets(&cfg, None).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with("iter,p_a1,p_a2,p_a3\n"));
        assert_eq!(a.trim().lines().count(), 12);
    }

    #[test]
    fn grad_check_static_cvar_passes() {
        let text = r#"{
            "objective": {"risk": "cvar", "alpha": 0.3},
            "estimator": "saddle-exact",
            "sgd": {"seed": 5}
        }"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        let report = cmd_grad_check(&cfg, None).unwrap();
        assert!(report.pass, "max dev {}", report.max_rel_dev);
    }

    #[test]
    fn grad_check_expectation_tight() {
        let text = r#"{
            "objective": {"risk": "expectation"},
            "estimator": "saddle-exact"
        }"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        let report = cmd_grad_check(&cfg, None).unwrap();
        assert!(report.pass && report.tol == 1e-6, "{report:?}");
    }

    #[test]
    fn eval_risk_cvar_inline() {
        let text = r#"{
            "objective": {"risk": "cvar", "alpha": 0.5},
            "estimator": "cvar",
            "dist": [0.25, 0.25, 0.25, 0.25],
            "z": [1.0, 2.0, 3.0, 4.0]
        }"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        let report = cmd_eval_risk(&cfg).unwrap();
        assert!((report.rho - 3.5).abs() < 1e-12);
        assert_eq!(report.lam_p, Some(2.0));
    }

    #[test]
    fn optimize_atoms_reaches_cheapest() {
        let text = r#"{
            "objective": {"risk": "expectation"},
            "model": {"atoms": {"costs": [3.0, 1.0, 2.0]}},
            "estimator": "saddle-exact",
            "sgd": {"iters": 500, "schedule": {"kind": "constant", "a": 0.5}}
        }"#;
        let cfg = ExperimentConfig::from_json(text).unwrap();
        let result = cmd_optimize(&cfg, None).unwrap();
        let probs = softmax(&DVector::from_column_slice(&result.final_theta));
        assert!(probs[1] > 0.99, "{probs:?}");
    }
}
