//! Federated policy gradient with drift correction on tabular MDPs.
//!
//! Agents share a transition kernel but not a reward table. Each round they
//! take local policy-gradient steps corrected by a per-agent anchor and a
//! shared global direction, then the server averages their parameter changes.
//! Around that runtime the crate provides exact oracles (values, Q-functions,
//! occupancy measures and exact gradients by dense linear solves), the
//! truncated sampled estimator with its enumerated expectation, and an
//! experiment harness for sweeps and analyses.

pub mod error;
pub mod grad;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod mdp;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod runtime;
pub mod sampler;

pub use error::{Error, Result};
pub use grad::{GradVector, Provenance};
pub use mdp::{
    apply_regret_transform, build_average_mdp, generate_random_env, validate_mdp, Dynamics,
    EnvGenerator, FederatedEnv, TabularMdp, ValidationReport,
};
pub use policy::{action_distribution, log_policy_gradient, sample_action, PolicyParams};
pub use rng::{derive_stream, Purpose, RngStream, StreamKey};
pub use runtime::{
    run_centralized, run_round, run_training, AlgoConfig, Algorithm, FederatedProblem,
    GradientSource, RoundHistory, RoundMetrics, Trainer,
};
