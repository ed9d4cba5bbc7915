//! Simulator for differentially private federated AdamW.
//!
//! Clients run DP local AdamW steps on clipped, noised mini-batch gradients.
//! The server aggregates parameter deltas, optionally block means of the
//! second moment (used to warm-start the next round) and a global descent
//! direction that clients blend into their local steps. The noise variance
//! injected into the second moment is removed before preconditioning. An RDP
//! accountant tracks the privacy cost.
//!
//! Baselines: DP-LocalAdamW (no sharing of optimizer state, no correction)
//! and DP-FedAvg with local SGD.
//!
//! Randomness is keyed per `(seed, purpose, round, client, step)`, so runs are
//! reproducible and parallel execution matches sequential execution exactly.

pub mod accountant;
pub mod diagnostics;
pub mod dp;
pub mod error;
pub mod exec;
pub mod federation;
pub mod model;
pub mod optim;
pub mod param;
pub mod partition;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
pub use exec::Execution;
pub use federation::{Aggregation, Federation, FederationConfig, RoundState};
pub use model::{Model, ModelKind, Sample};
pub use optim::{AdamWHyper, AdamWOptions, DPAdamWState, OptimizerVariant};
pub use param::{BlockLayout, BlockStats, ParamVector};
pub use runner::{RunConfig, RunSummary};
