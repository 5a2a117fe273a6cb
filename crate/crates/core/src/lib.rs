//! Policy-gradient estimation and optimization for coherent risk measures.
//!
//! The crate covers the static case (risk of a random cost whose distribution
//! depends on a policy parameter) and the dynamic case (Markov coherent risk
//! of a discounted MDP):
//!
//! - [`probspace`]: finite probability spaces, sampling models, empirical
//!   distributions and score functions.
//! - [`envelope`]: risk envelopes in canonical constraint form, risk
//!   evaluation, analytic saddle points for CVaR, mean-semideviation and
//!   plain expectation.
//! - [`saddle`]: a log-barrier interior-point solver for the envelope
//!   program and its KKT diagnostics.
//! - [`staticgrad`]: gradient estimators for static coherent risk (the
//!   saddle-point formula, closed-form CVaR and mean-semideviation
//!   estimators, the sample-average estimator, a mean-std baseline).
//! - [`mdp`]: finite MDPs, softmax policies, simulation.
//! - [`dynrisk`]: the risk-sensitive Bellman operator, exact value iteration,
//!   a projected value-iteration critic with linear features, and dynamic
//!   gradients (exact and two-phase sampled).
//! - [`optimizer`]: a small SGD loop with step schedules and trace logging.
//! - [`harness`]: experiment configuration, the three-asset selection
//!   benchmark, and the implementations behind the `crisk` CLI.

pub mod dynrisk;
pub mod envelope;
pub mod error;
pub mod harness;
pub mod mdp;
pub mod optimizer;
pub mod probspace;
pub mod saddle;
pub mod staticgrad;

pub use error::RiskError;
