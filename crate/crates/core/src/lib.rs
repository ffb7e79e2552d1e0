//! Adaptive policies for the correlated stochastic knapsack problem with a
//! monotone lattice-submodular objective and a partition matroid.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`model`]: items are expanded into size-capped copies, one partition
//!    per original item.
//! 2. [`polytope`]: a time-indexed LP over per-item Markov chains
//!    (start node, forced-continuation nodes) bounds what any adaptive
//!    policy can achieve.
//! 3. [`cgreedy`]: stochastic continuous greedy maximizes the multilinear
//!    extension of the lifted objective over that polytope, stopping at
//!    time `b = 1/2`.
//! 4. [`rounding`]: start pairs are sampled independently, sorted by slot
//!    with random tie-breaking, and pruned with phantom items so that the
//!    pruning is a monotone contention resolution scheme.
//!
//! [`verify`] holds the exact dynamic program and the Monte-Carlo suites
//! used to check the guarantees at small scale.

pub mod cgreedy;
pub mod gen;
pub mod io;
pub mod model;
pub mod objective;
pub mod polytope;
pub mod rng;
pub mod rounding;
pub mod verify;

pub use model::{Instance, Reward, Size};
pub use objective::{Estimate, Objective, ObjectiveSpec};
