//! Federated training loop.
//!
//! Each round the server broadcasts the global shared-branch parameters and
//! the global representation table; every client adopts them, trains both
//! branches locally, and uploads its shared-branch parameters, the posterior
//! means of its shared representations per user, and its training-set size.
//! The server averages both, weighted by training-set size. Exclusive
//! branches, predictors and critics never leave their client.

mod client;
mod config;
mod optim;
mod protocol;
mod run;

pub use client::{build_clients, client_update, initial_predictor, initial_shared, ClientState};
pub use config::{ModelConfig, TrainConfig, Variant};
pub use optim::Adam;
pub use protocol::{
    aggregate_params, aggregate_representations, aggregation_weights, privacy_violations, DownMessage, GlobalState,
    RoundMessage, UpMessage,
};
pub use run::{
    initial_global, restore_checkpoint, run_federated, save_checkpoint, train_standalone, HistoryRecord, RunOptions,
    RunOutcome, CHECKPOINT_VERSION,
};
