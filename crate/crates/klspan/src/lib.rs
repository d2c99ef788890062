//! Simulation library for KL-regularized alignment with linear softmax
//! policies.
//!
//! The library is organized around three layers:
//!
//! - **Worlds**: enumerable contextual-bandit instances ([`instance`]),
//!   finite-horizon token MDPs with reset access ([`mdp`]), and DNF
//!   hardness embeddings ([`dnf`]), all accessed by learners through
//!   query-counted oracles ([`oracle`]).
//! - **Learners**: spanner-based inference-time exploration ([`spanner`]),
//!   the rejection-sampling subroutine it is built on ([`rejection`]),
//!   passive/active baselines ([`baselines`]), and the multi-turn
//!   core-set learner for MDPs ([`mtss`]).
//! - **Ground truth**: brute-force exact oracles for softmax
//!   distributions, optimal regularized policies, coverage coefficients
//!   ([`exact`]) and soft Bellman dynamic programming ([`softdp`]),
//!   used to validate everything else.
//!
//! All randomness flows through named [`rng`] streams so that runs are
//! reproducible independent of interleaving.

pub mod baselines;
pub mod dnf;
pub mod exact;
pub mod instance;
pub mod linalg;
pub mod mdp;
pub mod metrics;
pub mod mtss;
pub mod numeric;
pub mod oracle;
pub mod rejection;
pub mod rng;
pub mod serialize;
pub mod softdp;
pub mod spanner;
