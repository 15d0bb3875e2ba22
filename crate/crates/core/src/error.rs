use thiserror::Error;

use crate::{kinematics, metrics, models, neural, protocols, signal, simulator, sono, storage};

/// Crate-wide error, wrapping the per-module error types.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Signal(#[from] signal::SignalError),
    #[error(transparent)]
    Kinematics(#[from] kinematics::KinematicsError),
    #[error(transparent)]
    Neural(#[from] neural::NeuralError),
    #[error(transparent)]
    Model(#[from] models::ModelError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Simulator(#[from] simulator::SimError),
    #[error(transparent)]
    Protocol(#[from] protocols::ProtocolError),
    #[error(transparent)]
    Sono(#[from] sono::SonoError),
    #[error(transparent)]
    Storage(#[from] storage::StorageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
