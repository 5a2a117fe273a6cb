//! Finite MDPs, softmax policies with score functions, and trajectory
//! simulation.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::RiskError;
use crate::probspace::{sample_index, softmax};

/// Cost signature: state-dependent or state-action-dependent. A state-only
/// cost exposes `C(x, a) = C(x)`.
#[derive(Debug, Clone)]
pub enum Cost {
    State(DVector<f64>),
    StateAction(DMatrix<f64>),
}

/// A finite MDP with row-stochastic kernel, discount in `(0, 1)` and a fixed
/// initial state.
#[derive(Debug, Clone)]
pub struct Mdp {
    n_states: usize,
    n_actions: usize,
    cost: Cost,
    /// One `n_states x n_states` transition matrix per action.
    kernel: Vec<DMatrix<f64>>,
    gamma: f64,
    x0: usize,
}

impl Mdp {
    pub fn new(
        cost: Cost,
        kernel: Vec<DMatrix<f64>>,
        gamma: f64,
        x0: usize,
    ) -> Result<Self, RiskError> {
        let n_actions = kernel.len();
        if n_actions == 0 {
            return Err(RiskError::InvalidMdp("no actions".into()));
        }
        let n_states = kernel[0].nrows();
        if n_states == 0 || x0 >= n_states {
            return Err(RiskError::InvalidMdp("bad state count or x0".into()));
        }
        if !(0.0 < gamma && gamma < 1.0) {
            return Err(RiskError::InvalidMdp(format!(
                "gamma = {gamma} not in (0, 1)"
            )));
        }
        for (a, k) in kernel.iter().enumerate() {
            if k.nrows() != n_states || k.ncols() != n_states {
                return Err(RiskError::InvalidMdp(format!("kernel {a} has wrong shape")));
            }
            for x in 0..n_states {
                let row_sum: f64 = k.row(x).iter().sum();
                if (row_sum - 1.0).abs() > 1e-12 || k.row(x).iter().any(|&v| v < 0.0) {
                    return Err(RiskError::InvalidMdp(format!(
                        "kernel row ({x}, {a}) is not a distribution (sum {row_sum})"
                    )));
                }
            }
        }
        match &cost {
            Cost::State(c) => {
                if c.len() != n_states {
                    return Err(RiskError::InvalidMdp("cost length != n_states".into()));
                }
            }
            Cost::StateAction(c) => {
                if c.nrows() != n_states || c.ncols() != n_actions {
                    return Err(RiskError::InvalidMdp("cost shape mismatch".into()));
                }
            }
        }
        Ok(Mdp {
            n_states,
            n_actions,
            cost,
            kernel,
            gamma,
            x0,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn x0(&self) -> usize {
        self.x0
    }

    pub fn cost(&self, x: usize, a: usize) -> f64 {
        match &self.cost {
            Cost::State(c) => c[x],
            Cost::StateAction(c) => c[(x, a)],
        }
    }

    /// Transition row `P(. | x, a)`.
    pub fn kernel_row(&self, x: usize, a: usize) -> DVector<f64> {
        self.kernel[a].row(x).transpose()
    }

    pub fn cost_bound(&self) -> f64 {
        match &self.cost {
            Cost::State(c) => c.amax(),
            Cost::StateAction(c) => c.amax(),
        }
    }

    /// Horizon after which the discounted tail is below `eps`:
    /// `gamma^T * C_max / (1 - gamma) <= eps`.
    pub fn horizon_for(&self, eps: f64) -> usize {
        let cmax = self.cost_bound();
        if cmax == 0.0 {
            return 1;
        }
        let t = ((eps * (1.0 - self.gamma) / cmax).ln() / self.gamma.ln()).ceil();
        t.max(1.0) as usize
    }

    /// Loads an MDP and optional feature map from a JSON document.
    pub fn from_json(text: &str) -> Result<(Self, Option<FeatureMap>), RiskError> {
        let doc: MdpDoc = serde_json::from_str(text)?;
        let kernel: Vec<DMatrix<f64>> = (0..doc.n_actions)
            .map(|a| DMatrix::from_fn(doc.n_states, doc.n_states, |x, y| doc.kernel[x][a][y]))
            .collect();
        if doc.kernel.len() != doc.n_states
            || doc.kernel.iter().any(|row| {
                row.len() != doc.n_actions || row.iter().any(|k| k.len() != doc.n_states)
            })
        {
            return Err(RiskError::InvalidMdp("kernel shape mismatch".into()));
        }
        let cost = match doc.cost {
            CostDoc::State(v) => Cost::State(DVector::from_vec(v)),
            CostDoc::StateAction(m) => {
                let rows = m.len();
                let cols = m.first().map_or(0, |r| r.len());
                Cost::StateAction(DMatrix::from_fn(rows, cols, |x, a| m[x][a]))
            }
        };
        let mdp = Mdp::new(cost, kernel, doc.gamma, doc.x0)?;
        let features = match doc.features {
            Some(f) => Some(FeatureMap::from_nested(&f)?),
            None => None,
        };
        Ok((mdp, features))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MdpDoc {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    x0: usize,
    cost: CostDoc,
    /// Indexed `kernel[x][a][x']`.
    kernel: Vec<Vec<Vec<f64>>>,
    /// Indexed `features[x][a][k]`.
    features: Option<Vec<Vec<Vec<f64>>>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum CostDoc {
    State(Vec<f64>),
    StateAction(Vec<Vec<f64>>),
}

/// Feature vectors per state-action pair.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    data: Vec<DVector<f64>>,
    n_states: usize,
    n_actions: usize,
    dim: usize,
}

impl FeatureMap {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        data: Vec<DVector<f64>>,
    ) -> Result<Self, RiskError> {
        if data.len() != n_states * n_actions {
            return Err(RiskError::LengthMismatch {
                expected: n_states * n_actions,
                got: data.len(),
            });
        }
        let dim = data.first().map_or(0, |v| v.len());
        if data.iter().any(|v| v.len() != dim) {
            return Err(RiskError::InvalidMdp("ragged feature vectors".into()));
        }
        Ok(FeatureMap {
            data,
            n_states,
            n_actions,
            dim,
        })
    }

    /// One-hot indicator features: `theta` has one coordinate per pair.
    pub fn one_hot(n_states: usize, n_actions: usize) -> Self {
        let dim = n_states * n_actions;
        let data = (0..dim)
            .map(|i| {
                let mut v = DVector::zeros(dim);
                v[i] = 1.0;
                v
            })
            .collect();
        FeatureMap {
            data,
            n_states,
            n_actions,
            dim,
        }
    }

    fn from_nested(f: &[Vec<Vec<f64>>]) -> Result<Self, RiskError> {
        let n_states = f.len();
        let n_actions = f.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n_states * n_actions);
        for row in f {
            if row.len() != n_actions {
                return Err(RiskError::InvalidMdp("ragged feature table".into()));
            }
            for v in row {
                data.push(DVector::from_vec(v.clone()));
            }
        }
        FeatureMap::new(n_states, n_actions, data)
    }

    pub fn get(&self, x: usize, a: usize) -> &DVector<f64> {
        &self.data[x * self.n_actions + a]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
}

/// Stationary Markov policy `mu(a | x) = exp(theta . phi(x, a)) / Z(x)`.
#[derive(Debug, Clone)]
pub struct SoftmaxPolicy {
    theta: DVector<f64>,
    features: FeatureMap,
}

impl SoftmaxPolicy {
    pub fn new(theta: Vec<f64>, features: FeatureMap) -> Result<Self, RiskError> {
        if theta.len() != features.dim() {
            return Err(RiskError::LengthMismatch {
                expected: features.dim(),
                got: theta.len(),
            });
        }
        Ok(SoftmaxPolicy {
            theta: DVector::from_vec(theta),
            features,
        })
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn theta_dim(&self) -> usize {
        self.theta.len()
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn with_theta(&self, theta: &[f64]) -> Result<Self, RiskError> {
        SoftmaxPolicy::new(theta.to_vec(), self.features.clone())
    }

    /// Action distribution at state `x`.
    pub fn probs(&self, x: usize) -> DVector<f64> {
        let logits = DVector::from_fn(self.features.n_actions(), |a, _| {
            self.theta.dot(self.features.get(x, a))
        });
        softmax(&logits)
    }

    /// Score function `grad log mu(a | x) = phi(x, a) - E_mu[phi(x, .)]`.
    pub fn score(&self, x: usize, a: usize) -> DVector<f64> {
        let probs = self.probs(x);
        let mut mean = DVector::zeros(self.theta.len());
        for b in 0..self.features.n_actions() {
            mean += self.features.get(x, b) * probs[b];
        }
        self.features.get(x, a) - mean
    }
}

/// One sampled episode: `(state, action, cost)` per step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<(usize, usize, f64)>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Discounted cost sum over the recorded steps.
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        self.steps
            .iter()
            .enumerate()
            .map(|(t, &(_, _, c))| gamma.powi(t as i32) * c)
            .sum()
    }
}

/// Samples a trajectory of `horizon` steps from `x0` under the policy.
///
/// With `kernel_override` the next state is drawn from the supplied
/// state-to-state matrix instead of `P(. | x, a)`; actions are still drawn
/// from the policy and recorded (the density-weighted chains of the dynamic
/// gradient estimator transition state-to-state).
pub fn simulate(
    mdp: &Mdp,
    policy: &SoftmaxPolicy,
    horizon: usize,
    rng: &mut ChaCha8Rng,
    kernel_override: Option<&DMatrix<f64>>,
) -> Trajectory {
    if let Some(k) = kernel_override {
        for x in 0..mdp.n_states() {
            let s: f64 = k.row(x).iter().sum();
            assert!(
                (s - 1.0).abs() < 1e-8 && k.row(x).iter().all(|&v| v >= -1e-12),
                "kernel override row {x} is not a distribution (sum {s})"
            );
        }
    }
    let mut steps = Vec::with_capacity(horizon);
    let mut x = mdp.x0();
    for _ in 0..horizon {
        let a = sample_index(&policy.probs(x), rng);
        steps.push((x, a, mdp.cost(x, a)));
        let row = match kernel_override {
            Some(k) => k.row(x).transpose(),
            None => mdp.kernel_row(x, a),
        };
        x = sample_index(&row, rng);
    }
    Trajectory { steps }
}

/// State-to-state kernel induced by the policy:
/// `P(x' | x) = sum_a P(x' | x, a) mu(a | x)`.
pub fn induced_kernel(mdp: &Mdp, policy: &SoftmaxPolicy) -> DMatrix<f64> {
    let n = mdp.n_states();
    let mut k = DMatrix::zeros(n, n);
    for x in 0..n {
        let probs = policy.probs(x);
        for a in 0..mdp.n_actions() {
            for y in 0..n {
                k[(x, y)] += probs[a] * mdp.kernel[a][(x, y)];
            }
        }
    }
    k
}

/// Score of the policy at a state-action pair.
pub fn policy_score(policy: &SoftmaxPolicy, x: usize, a: usize) -> DVector<f64> {
    policy.score(x, a)
}
