//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by construction, evaluation, solving and estimation.
#[derive(Debug, Error)]
pub enum RiskError {
    #[error("no samples")]
    NoSamples,

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("probabilities must be nonnegative and sum to 1 (sum = {sum})")]
    InvalidDistribution { sum: f64 },

    #[error("negative density at outcome {index}: {value}")]
    NegativeDensity { index: usize, value: f64 },

    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },

    #[error("score undefined at null atom {index}")]
    ScoreAtNullAtom { index: usize },

    #[error("risk level alpha = {0} out of range")]
    InvalidAlpha(f64),

    #[error("empty risk envelope: {0}")]
    EmptyEnvelope(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("did not converge: kkt residual {residual:.3e} after {iterations} Newton steps")]
    DidNotConverge { residual: f64, iterations: usize },

    #[error("scores missing from distribution")]
    MissingScores,

    #[error("saddle point invalid: kkt residual {residual:.3e} exceeds tolerance {tol:.3e}")]
    InvalidSaddle { residual: f64, tol: f64 },

    #[error("no tail samples at alpha = {alpha} (n = {n})")]
    NoTailSamples { alpha: f64, n: usize },

    #[error("feature Gram matrix is singular")]
    SingularGram,

    #[error("contraction condition fails: gamma * density bound = {product:.4} >= 1")]
    ContractionFails { product: f64 },

    #[error("solver failed at state {state}: {source}")]
    AtState {
        state: usize,
        #[source]
        source: Box<RiskError>,
    },

    #[error("value iteration exceeded {0} sweeps")]
    ValueIterationCap(usize),

    #[error("non-finite gradient at iteration {iter}")]
    NonFiniteGradient { iter: usize },

    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("tolerance breach: {0}")]
    ToleranceBreach(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl RiskError {
    /// Process exit code used by the CLI: 1 config, 2 numerical, 3 tolerance.
    pub fn exit_code(&self) -> i32 {
        match self {
            RiskError::InvalidConfig(_) | RiskError::Json(_) | RiskError::Io(_) => 1,
            RiskError::ToleranceBreach(_) => 3,
            _ => 2,
        }
    }
}
