//! Simulator for federated composite optimization: minimize
//! `(1/M) Σ_m F_m(w) + ψ(w)` across `M` simulated clients, where `ψ` is a
//! non-smooth regularizer or constraint characteristic.
//!
//! The crate provides FedMid and FedDualAvg (plus their server-only-proximal
//! variants and subgradient FedAvg), exact composite mirror maps, synthetic
//! heterogeneous datasets with known ground truth, sequential and
//! centralized baselines, recovery metrics and theory probes, and a
//! configuration-driven experiment harness.

pub mod algorithms;
pub mod baselines;
pub mod diagnostics;
pub mod error;
pub mod exec;
pub mod harness;
pub mod math;
pub mod problems;
pub mod regularizers;
pub mod rng;

pub use algorithms::{
    run, Algorithm, BatchSampler, FullBatch, HyperParams, LocalWork, RoundContext, RoundTrace, RunOptions, RunResult,
    ServerState, ShuffledEpochs, TraceLevel,
};
pub use error::{FcoError, Result};
pub use exec::Execution;
pub use math::{bregman_divergence, dual_norm_sq, generalized_bregman, DistanceGen, ParamState, Shape};
pub use problems::{FederatedDataset, GeneratorSpec, Task};
pub use regularizers::{composite_mirror_map, subgradient, Regularizer};
