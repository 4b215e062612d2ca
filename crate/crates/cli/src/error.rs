//! Failure classes with stable process exit codes.

use std::path::PathBuf;

use fedgnn::dataset::DatasetError;
use fedgnn::federation::FederationError;
use fedgnn::transport::TransportError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("broker unreachable: {0}")]
    BrokerUnreachable(String),
    #[error("invalid configuration: {0}")]
    Schema(String),
    #[error("dataset not found at {}", .0.display())]
    DatasetMissing(PathBuf),
    #[error("join rejected: {0}")]
    JoinRejected(String),
}

pub mod exit {
    pub const FAILURE: u8 = 1;
    pub const BROKER_UNREACHABLE: u8 = 2;
    pub const SCHEMA: u8 = 3;
    pub const DATASET_MISSING: u8 = 4;
    pub const JOIN_REJECTED: u8 = 5;
    /// Malformed command line.
    pub const USAGE: u8 = 64;
}

fn transport_code(e: &TransportError) -> Option<u8> {
    match e {
        TransportError::Unreachable(_) => Some(exit::BROKER_UNREACHABLE),
        TransportError::InvalidId(_) => Some(exit::SCHEMA),
        _ => None,
    }
}

/// Exit code for an error, looking through its whole source chain.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::BrokerUnreachable(_) => exit::BROKER_UNREACHABLE,
                CliError::Schema(_) => exit::SCHEMA,
                CliError::DatasetMissing(_) => exit::DATASET_MISSING,
                CliError::JoinRejected(_) => exit::JOIN_REJECTED,
            };
        }
        if let Some(e) = cause.downcast_ref::<FederationError>() {
            let code = match e {
                FederationError::JoinRejected(_) => Some(exit::JOIN_REJECTED),
                FederationError::Config(_) => Some(exit::SCHEMA),
                FederationError::Transport(t) => transport_code(t),
                _ => None,
            };
            if let Some(c) = code {
                return c;
            }
        }
        if let Some(c) = cause.downcast_ref::<TransportError>().and_then(transport_code) {
            return c;
        }
        if let Some(DatasetError::Io { source, .. }) = cause.downcast_ref::<DatasetError>() {
            if source.kind() == std::io::ErrorKind::NotFound {
                return exit::DATASET_MISSING;
            }
        }
    }
    exit::FAILURE
}
