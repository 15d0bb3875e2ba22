//! Streaming myographic movement-regression engine.
//!
//! The crate decodes seven simultaneous, normalized hand and wrist degrees of
//! freedom from 16-channel surface EMG sampled at 2 kHz. The pipeline is
//!
//! ```text
//! EmgFrame stream -> causal TD5 windows -> FeatureSequence -> Regressor -> DofVector
//! ```
//!
//! with three regressors (a temporal convolutional network, an LSTM and a
//! per-DoF RBF support vector regressor), the cued "standard" and freeform
//! reinforcement experiment protocols, fidelity/latency/significance metrics,
//! a seeded synthetic subject that stands in for recorded data, and the
//! sonomyography preprocessing chain.
//!
//! Everything is deterministic given a seed; all numerics are `f64`.

pub mod kinematics;
pub mod metrics;
pub mod models;
pub mod neural;
pub mod protocols;
pub mod signal;
pub mod simulator;
pub mod sono;
pub mod storage;

mod error;

pub use error::{Error, Result};
pub use kinematics::{CalibrationMap, DofCalibration, DofVector};
pub use metrics::MetricsReport;
pub use models::{ModelKind, Regressor, SequenceSet, TrainReport};
pub use protocols::{SessionLog, TrialMetrics};
pub use signal::{EmgFrame, FeatureSequence, FeatureVector, Standardizer};
pub use storage::RunConfig;

/// Number of EMG channels recorded by the armband.
pub const CHANNELS: usize = 16;

/// EMG sampling rate.
pub const SAMPLE_RATE_HZ: u32 = 2000;

/// Spacing between consecutive EMG samples.
pub const SAMPLE_PERIOD_US: i64 = 1_000_000 / SAMPLE_RATE_HZ as i64;

/// Prediction time-step (25 ms).
pub const STEP_US: i64 = 25_000;

/// EMG samples per prediction step.
pub const SAMPLES_PER_STEP: usize = (STEP_US / SAMPLE_PERIOD_US) as usize;

/// Degrees of freedom decoded simultaneously.
pub const DOF: usize = 7;

/// TD5 features per channel (MAV, WL, VAR, SSC, ZC).
pub const FEATURES_PER_CHANNEL: usize = 5;
