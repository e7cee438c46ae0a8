//! Client training, aggregation and the round orchestrator.

mod aggregate;
mod client;
mod config;
mod round;

use thiserror::Error;

use crate::data::DataError;
use crate::nn::NnError;
use crate::wire::WireError;

pub use aggregate::{aggregate, ClientUpdate};
pub use client::{local_train, ClientNode, LocalTraining};
pub use config::{
    independent_seed, Aggregation, Algorithm, BatchSize, FederationConfig, FederationMask, InitPolicy, MaskMode,
    Transport,
};
pub use round::{
    run_experiment, run_experiment_with, run_round, select_clients, Evaluator, Exchange, ExperimentOutcome, Federation, GlobalModel,
    SimExchange,
};

#[derive(Debug, Error)]
pub enum FedError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("round {round} timed out waiting for clients {missing:?}")]
    RoundTimeout { round: u32, missing: Vec<u32> },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("peer reported error {code}: {reason}")]
    Remote { code: u16, reason: String },
    #[error("cannot connect to {address}: {source}")]
    Connect {
        address: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}
