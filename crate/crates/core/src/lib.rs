//! Federated learning simulation with complement sparsification: the server
//! keeps a magnitude-pruned global model, clients return only the weights it
//! pruned, and the server folds the amplified client complements back in.
//! A FedAvg baseline, a byte-exact wire format, and a training-FLOPs model
//! come along for comparison.

pub mod data;
pub mod error;
pub mod exec;
pub mod fl;
pub mod metrics;
pub mod nn;
pub mod runner;
pub mod sparsify;
pub mod wire;

pub use error::{Error, Result, WireError};
pub use exec::Execution;
pub use fl::{
    aggregate_cs, aggregate_initial, client_update, run_experiment, run_round, ClientResult,
    ExperimentConfig, Mode, RoundMetrics, ServerState,
};
pub use nn::{Architecture, Hyperparams, ModelParams, Optimizer, Tensor};
pub use sparsify::{apply_mask, derive_mask, invert_mask, prune, sparsity, Mask};
