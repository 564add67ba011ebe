//! Learn POMDP models from continuous multivariate time series.
//!
//! The crate covers the full model-learning pipeline: nonparametric discovery
//! of hidden states shared across several time series ([`bnp`]), construction
//! of a discrete observation function from the learned Gaussian emissions via
//! the maximum-likelihood decision rule ([`obsfn`]), sample-mean transition
//! estimation with Chernoff-bound sample-size guarantees ([`transest`]),
//! exact finite-horizon planning and policy evaluation ([`planner`]), and an
//! empirical harness for the optimality-loss bounds that tie model accuracy
//! to control performance ([`bounds`]). [`simgen`] generates ground-truth
//! synthetic scenarios so every learning stage has an oracle.

pub mod bnp;
pub mod bounds;
pub mod formats;
pub mod gaussian;
pub mod model;
pub mod obsfn;
pub mod planner;
pub mod rng;
pub mod simgen;
pub mod transest;

pub use model::{Belief, GaussianEmission, PolicyTree, PomdpModel, TimeSeries};
