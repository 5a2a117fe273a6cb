//! Finite probability spaces, parameterized sampling models, empirical
//! distributions and score-function machinery shared by the gradient
//! estimators.
//!
//! Sample spaces are dense index sets `0..n`. Continuous quantities (e.g.
//! benchmark asset returns) never appear as explicit spaces; they enter only
//! through [`SampleBatch`] records carrying a cost value and a score vector
//! per draw.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::RiskError;

/// Tolerance for "probabilities sum to one" checks.
pub const PROB_SUM_TOL: f64 = 1e-12;

/// A single point of a finite sample space.
///
/// `id` indexes into `0..support_size`; `payload` is opaque application data
/// (e.g. an asset index).
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub id: usize,
    pub payload: Option<String>,
}

impl Outcome {
    pub fn new(id: usize) -> Self {
        Outcome { id, payload: None }
    }
}

/// A finite probability distribution, optionally with per-outcome score
/// vectors (the gradient of the log-probability with respect to the model
/// parameter).
#[derive(Debug, Clone)]
pub struct FiniteDist {
    probs: DVector<f64>,
    /// Row per outcome; column per parameter coordinate.
    scores: Option<DMatrix<f64>>,
}

impl FiniteDist {
    /// Builds a distribution, checking nonnegativity and normalization.
    pub fn new(probs: Vec<f64>) -> Result<Self, RiskError> {
        Self::with_scores(probs, None)
    }

    /// Builds a distribution with score rows. Scores must be finite.
    pub fn with_scores(probs: Vec<f64>, scores: Option<DMatrix<f64>>) -> Result<Self, RiskError> {
        let sum: f64 = probs.iter().sum();
        if !(sum - 1.0).abs().le(&PROB_SUM_TOL) || probs.iter().any(|p| *p < 0.0 || !p.is_finite())
        {
            return Err(RiskError::InvalidDistribution { sum });
        }
        if let Some(s) = &scores {
            if s.nrows() != probs.len() {
                return Err(RiskError::LengthMismatch {
                    expected: probs.len(),
                    got: s.nrows(),
                });
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(RiskError::NonFinite { what: "scores" });
            }
        }
        Ok(FiniteDist {
            probs: DVector::from_vec(probs),
            scores,
        })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &DVector<f64> {
        &self.probs
    }

    pub fn prob(&self, id: usize) -> f64 {
        self.probs[id]
    }

    pub fn scores(&self) -> Option<&DMatrix<f64>> {
        self.scores.as_ref()
    }

    /// Indices of outcomes with strictly positive mass.
    pub fn support(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.probs[i] > 0.0).collect()
    }

    /// Plain expectation of a cost variable.
    pub fn expectation(&self, z: &CostVariable) -> Result<f64, RiskError> {
        if z.len() != self.len() {
            return Err(RiskError::LengthMismatch {
                expected: self.len(),
                got: z.len(),
            });
        }
        Ok(self.probs.dot(&z.values))
    }
}

/// A real-valued cost per outcome; smaller is better.
#[derive(Debug, Clone)]
pub struct CostVariable {
    values: DVector<f64>,
}

impl CostVariable {
    pub fn new(values: Vec<f64>) -> Result<Self, RiskError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RiskError::NonFinite {
                what: "cost values",
            });
        }
        Ok(CostVariable {
            values: DVector::from_vec(values),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn value(&self, id: usize) -> f64 {
        self.values[id]
    }
}

/// One i.i.d. draw: outcome id, realized cost and the score vector of the
/// sampling model at that outcome.
#[derive(Debug, Clone)]
pub struct Draw {
    pub outcome: usize,
    pub cost: f64,
    pub score: Vec<f64>,
}

/// A batch of i.i.d. draws, tagged with the seed that produced it.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub draws: Vec<Draw>,
    pub seed: u64,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn theta_dim(&self) -> usize {
        self.draws.first().map_or(0, |d| d.score.len())
    }

    /// Per-draw costs as a vector.
    pub fn costs(&self) -> DVector<f64> {
        DVector::from_fn(self.len(), |i, _| self.draws[i].cost)
    }

    /// Per-draw score rows as a matrix.
    pub fn score_matrix(&self) -> DMatrix<f64> {
        let k = self.theta_dim();
        DMatrix::from_fn(self.len(), k, |i, j| self.draws[i].score[j])
    }
}

/// Deterministic stream splitting: one master seed, one generator per stream.
///
/// Every stochastic operation in the crate takes either an explicit seed or a
/// generator derived through this function, so runs are bit-reproducible.
pub fn stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Builds the empirical distribution of a batch over `0..support_size`.
///
/// Mass is `count / n` per observed id; unobserved atoms get zero. Score rows
/// are copied from the first draw observed at each atom (scores are a
/// function of the outcome, so duplicates agree).
pub fn empirical_from_samples(
    batch: &SampleBatch,
    support_size: usize,
) -> Result<FiniteDist, RiskError> {
    if batch.is_empty() {
        return Err(RiskError::NoSamples);
    }
    let n = batch.len() as f64;
    let dim = batch.theta_dim();
    let mut counts = vec![0usize; support_size];
    let mut scores = DMatrix::zeros(support_size, dim);
    let mut seen = vec![false; support_size];
    for d in &batch.draws {
        if d.outcome >= support_size {
            return Err(RiskError::LengthMismatch {
                expected: support_size,
                got: d.outcome + 1,
            });
        }
        counts[d.outcome] += 1;
        if !seen[d.outcome] {
            for (k, s) in d.score.iter().enumerate() {
                scores[(d.outcome, k)] = *s;
            }
            seen[d.outcome] = true;
        }
    }
    let probs: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    FiniteDist::with_scores(probs, Some(scores))
}

/// The `xi`-weighted expectation `sum_w P(w) xi(w) Z(w)`.
pub fn weighted_expectation(
    dist: &FiniteDist,
    xi: &DVector<f64>,
    z: &CostVariable,
) -> Result<f64, RiskError> {
    if xi.len() != dist.len() || z.len() != dist.len() {
        return Err(RiskError::LengthMismatch {
            expected: dist.len(),
            got: xi.len().max(z.len()),
        });
    }
    if let Some((i, v)) = xi.iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(RiskError::NegativeDensity {
            index: i,
            value: *v,
        });
    }
    Ok((0..dist.len())
        .map(|i| dist.prob(i) * xi[i] * z.value(i))
        .sum())
}

/// A sampling model over a finite space, parameterized by `theta`.
///
/// The model must be enumerable: it exposes its exact distribution (with
/// scores) at any parameter, which is what the exact gradient routines and
/// the finite-difference oracles consume.
pub trait ParamModel {
    fn theta_dim(&self) -> usize;
    fn support_size(&self) -> usize;
    /// Exact distribution at `theta`, scores included.
    fn dist(&self, theta: &[f64]) -> FiniteDist;
    /// Per-outcome cost.
    fn cost(&self) -> CostVariable;

    /// Draws `n` i.i.d. outcomes at `theta`.
    fn sample(&self, theta: &[f64], n: usize, rng: &mut ChaCha8Rng) -> SampleBatch {
        let dist = self.dist(theta);
        let cost = self.cost();
        let scores = dist.scores().expect("ParamModel::dist must attach scores");
        let mut draws = Vec::with_capacity(n);
        for _ in 0..n {
            let id = sample_index(dist.probs(), rng);
            draws.push(Draw {
                outcome: id,
                cost: cost.value(id),
                score: scores.row(id).iter().copied().collect(),
            });
        }
        SampleBatch { draws, seed: 0 }
    }
}

/// Inverse-CDF draw from a finite distribution.
pub fn sample_index(probs: &DVector<f64>, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen::<f64>();
    let mut cum = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    // Guard against cum < 1 from rounding: return the last positive atom.
    (0..probs.len())
        .rev()
        .find(|&i| probs[i] > 0.0)
        .unwrap_or(0)
}

/// Softmax selection over a fixed set of atoms with per-atom cost.
///
/// `P(w) ∝ exp(theta · phi(w))`; the score is `phi(w) - E[phi]`.
#[derive(Debug, Clone)]
pub struct SoftmaxAtoms {
    costs: DVector<f64>,
    /// One feature row per atom.
    features: DMatrix<f64>,
}

impl SoftmaxAtoms {
    pub fn new(costs: Vec<f64>, features: DMatrix<f64>) -> Result<Self, RiskError> {
        if features.nrows() != costs.len() {
            return Err(RiskError::LengthMismatch {
                expected: costs.len(),
                got: features.nrows(),
            });
        }
        Ok(SoftmaxAtoms {
            costs: DVector::from_vec(costs),
            features,
        })
    }

    /// One-hot features: `theta` has one coordinate per atom.
    pub fn one_hot(costs: Vec<f64>) -> Self {
        let n = costs.len();
        SoftmaxAtoms {
            costs: DVector::from_vec(costs),
            features: DMatrix::identity(n, n),
        }
    }
}

/// Softmax probabilities of `logits`, computed with the max shifted out.
pub fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e: DVector<f64> = logits.map(|v| (v - m).exp());
    let s = e.sum();
    e /= s;
    e
}

impl ParamModel for SoftmaxAtoms {
    fn theta_dim(&self) -> usize {
        self.features.ncols()
    }

    fn support_size(&self) -> usize {
        self.costs.len()
    }

    fn dist(&self, theta: &[f64]) -> FiniteDist {
        let th = DVector::from_column_slice(theta);
        let logits = &self.features * &th;
        let probs = softmax(&logits);
        let mean_feat = self.features.transpose() * &probs; // K-vector
        let mut scores = self.features.clone();
        for mut row in scores.row_iter_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v -= mean_feat[k];
            }
        }
        FiniteDist::with_scores(probs.iter().copied().collect(), Some(scores))
            .expect("softmax probabilities are a valid distribution")
    }

    fn cost(&self) -> CostVariable {
        CostVariable {
            values: self.costs.clone(),
        }
    }
}

/// Checks a model's scores against central finite differences of
/// `log P_theta(w)` and returns the worst absolute deviation.
pub fn score_selfcheck(model: &dyn ParamModel, theta: &[f64], h: f64) -> Result<f64, RiskError> {
    let base = model.dist(theta);
    let scores = base.scores().ok_or(RiskError::MissingScores)?;
    let mut worst: f64 = 0.0;
    for k in 0..model.theta_dim() {
        let mut up = theta.to_vec();
        up[k] += h;
        let mut dn = theta.to_vec();
        dn[k] -= h;
        let dp = model.dist(&up);
        let dm = model.dist(&dn);
        for w in 0..model.support_size() {
            if base.prob(w) <= 0.0 || dp.prob(w) <= 0.0 || dm.prob(w) <= 0.0 {
                return Err(RiskError::ScoreAtNullAtom { index: w });
            }
            let fd = (dp.prob(w).ln() - dm.prob(w).ln()) / (2.0 * h);
            worst = worst.max((scores[(w, k)] - fd).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn batch_on(ids: &[usize]) -> SampleBatch {
        SampleBatch {
            draws: ids
                .iter()
                .map(|&i| Draw {
                    outcome: i,
                    cost: i as f64,
                    score: vec![0.0],
                })
                .collect(),
            seed: 0,
        }
    }

    #[test]
    fn empirical_counts() {
        let d = empirical_from_samples(&batch_on(&[0, 0, 1, 2]), 3).unwrap();
        assert_eq!(d.probs().as_slice(), &[0.5, 0.25, 0.25]);
    }

    #[test]
    fn empirical_degenerate() {
        let d = empirical_from_samples(&batch_on(&[0, 0, 0, 0]), 2).unwrap();
        assert_eq!(d.probs().as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn empirical_rejects_empty() {
        let b = SampleBatch {
            draws: vec![],
            seed: 0,
        };
        assert!(matches!(
            empirical_from_samples(&b, 2),
            Err(RiskError::NoSamples)
        ));
    }

    #[test]
    fn empirical_close_to_truth_at_large_n() {
        // 1e5 draws from (0.3, 0.7): L1 distance below 0.02 is a > 6 sigma
        // event to violate, so all seeds must pass.
        for seed in 0..20u64 {
            let mut rng = stream(seed, 0);
            let probs = DVector::from_vec(vec![0.3, 0.7]);
            let mut c0 = 0usize;
            let n = 100_000;
            for _ in 0..n {
                if sample_index(&probs, &mut rng) == 0 {
                    c0 += 1;
                }
            }
            let p0 = c0 as f64 / n as f64;
            let l1 = 2.0 * (p0 - 0.3).abs();
            assert!(l1 < 0.02, "seed {seed}: L1 = {l1}");
        }
    }

    #[test]
    fn empirical_l1_shrinks_with_n() {
        let probs = DVector::from_vec(vec![0.15, 0.25, 0.6]);
        let mut medians = Vec::new();
        for n in [100usize, 1000, 10_000] {
            let mut errs: Vec<f64> = (0..20u64)
                .map(|seed| {
                    let mut rng = stream(seed, 7);
                    let mut counts = [0usize; 3];
                    for _ in 0..n {
                        counts[sample_index(&probs, &mut rng)] += 1;
                    }
                    (0..3)
                        .map(|i| (counts[i] as f64 / n as f64 - probs[i]).abs())
                        .sum()
                })
                .collect();
            errs.sort_by(f64::total_cmp);
            medians.push(errs[10]);
        }
        assert!(
            medians[0] > medians[1] && medians[1] > medians[2],
            "{medians:?}"
        );
    }

    #[test]
    fn weighted_expectation_identity_density() {
        let d = FiniteDist::new(vec![0.25, 0.75]).unwrap();
        let z = CostVariable::new(vec![1.0, 2.0]).unwrap();
        let ones = DVector::from_element(2, 1.0);
        let e = weighted_expectation(&d, &ones, &z).unwrap();
        assert_abs_diff_eq!(e, 1.75, epsilon = 1e-15);
    }

    #[test]
    fn weighted_expectation_mass_on_one_atom() {
        let d = FiniteDist::new(vec![0.5, 0.5]).unwrap();
        let z = CostVariable::new(vec![10.0, 99.0]).unwrap();
        let xi = DVector::from_vec(vec![2.0, 0.0]);
        assert_abs_diff_eq!(weighted_expectation(&d, &xi, &z).unwrap(), 10.0);
    }

    #[test]
    fn weighted_expectation_direct_sum() {
        let d = FiniteDist::new(vec![0.25, 0.75]).unwrap();
        let z = CostVariable::new(vec![1.0, 2.0]).unwrap();
        let xi = DVector::from_vec(vec![2.0, 2.0 / 3.0]);
        assert_abs_diff_eq!(
            weighted_expectation(&d, &xi, &z).unwrap(),
            1.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn weighted_expectation_rejects_mismatch() {
        let d = FiniteDist::new(vec![0.5, 0.5]).unwrap();
        let z = CostVariable::new(vec![1.0]).unwrap();
        let xi = DVector::from_vec(vec![1.0, 1.0]);
        assert!(weighted_expectation(&d, &xi, &z).is_err());
    }

    #[test]
    fn weighted_expectation_within_range_for_valid_densities() {
        // For any density with sum P xi = 1 the value lies in [min Z, max Z].
        let mut rng = stream(3, 0);
        for _ in 0..100 {
            let n = 5;
            let raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 0.01).collect();
            let s: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let d = FiniteDist::new(probs.clone()).unwrap();
            let z =
                CostVariable::new((0..n).map(|_| rng.gen::<f64>() * 10.0 - 5.0).collect()).unwrap();
            // Random density normalized against P.
            let rawxi: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let mass: f64 = rawxi.iter().zip(&probs).map(|(x, p)| x * p).sum();
            let xi = DVector::from_vec(rawxi.iter().map(|x| x / mass).collect::<Vec<_>>());
            let e = weighted_expectation(&d, &xi, &z).unwrap();
            let lo = z.values().min();
            let hi = z.values().max();
            assert!(e >= lo - 1e-12 && e <= hi + 1e-12);
        }
    }

    #[test]
    fn softmax_scores_match_finite_differences() {
        let m = SoftmaxAtoms::one_hot(vec![1.0, 2.0, 3.0]);
        let dev = score_selfcheck(&m, &[0.3, -0.2, 0.5], 1e-5).unwrap();
        assert!(dev < 1e-6, "deviation {dev}");
    }

    #[test]
    fn theta_independent_model_has_zero_scores() {
        struct Fixed;
        impl ParamModel for Fixed {
            fn theta_dim(&self) -> usize {
                2
            }
            fn support_size(&self) -> usize {
                2
            }
            fn dist(&self, _theta: &[f64]) -> FiniteDist {
                FiniteDist::with_scores(vec![0.4, 0.6], Some(DMatrix::zeros(2, 2))).unwrap()
            }
            fn cost(&self) -> CostVariable {
                CostVariable::new(vec![0.0, 1.0]).unwrap()
            }
        }
        let dev = score_selfcheck(&Fixed, &[0.0, 0.0], 1e-5).unwrap();
        assert_eq!(dev, 0.0);
    }

    #[test]
    fn logistic_two_point_scores() {
        // p(theta) = e^theta / (1 + e^theta); scores are (1-p, -p).
        struct TwoPoint;
        impl ParamModel for TwoPoint {
            fn theta_dim(&self) -> usize {
                1
            }
            fn support_size(&self) -> usize {
                2
            }
            fn dist(&self, theta: &[f64]) -> FiniteDist {
                let p = theta[0].exp() / (1.0 + theta[0].exp());
                let scores = DMatrix::from_row_slice(2, 1, &[1.0 - p, -p]);
                FiniteDist::with_scores(vec![p, 1.0 - p], Some(scores)).unwrap()
            }
            fn cost(&self) -> CostVariable {
                CostVariable::new(vec![0.0, 1.0]).unwrap()
            }
        }
        let dev = score_selfcheck(&TwoPoint, &[0.4], 1e-5).unwrap();
        assert!(dev < 1e-6, "deviation {dev}");
    }

    #[test]
    fn selfcheck_errors_on_null_atom() {
        struct Null;
        impl ParamModel for Null {
            fn theta_dim(&self) -> usize {
                1
            }
            fn support_size(&self) -> usize {
                2
            }
            fn dist(&self, _theta: &[f64]) -> FiniteDist {
                FiniteDist::with_scores(vec![1.0, 0.0], Some(DMatrix::zeros(2, 1))).unwrap()
            }
            fn cost(&self) -> CostVariable {
                CostVariable::new(vec![0.0, 1.0]).unwrap()
            }
        }
        assert!(matches!(
            score_selfcheck(&Null, &[0.0], 1e-5),
            Err(RiskError::ScoreAtNullAtom { index: 1 })
        ));
    }

    #[test]
    fn scores_have_zero_expectation() {
        let m = SoftmaxAtoms::one_hot(vec![5.0, -1.0, 2.0, 0.0]);
        let d = m.dist(&[0.1, 0.9, -0.4, 0.2]);
        let s = d.scores().unwrap();
        for k in 0..4 {
            let e: f64 = (0..4).map(|w| d.prob(w) * s[(w, k)]).sum();
            assert!(e.abs() < 1e-8);
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let m = SoftmaxAtoms::one_hot(vec![1.0, 2.0, 3.0]);
        let b1 = m.sample(&[0.0, 0.1, 0.2], 50, &mut stream(9, 1));
        let b2 = m.sample(&[0.0, 0.1, 0.2], 50, &mut stream(9, 1));
        let ids1: Vec<usize> = b1.draws.iter().map(|d| d.outcome).collect();
        let ids2: Vec<usize> = b2.draws.iter().map(|d| d.outcome).collect();
        assert_eq!(ids1, ids2);
    }
}
