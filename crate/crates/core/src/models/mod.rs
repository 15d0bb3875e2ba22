//! The three regressors behind one [`Regressor`] interface: a temporal
//! convolutional network and an LSTM over feature sequences, and a per-DoF
//! RBF support vector regressor over single frames.

mod lstm;
mod svr;
mod tcn;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::DofVector;
use crate::neural::{AdamConfig, NeuralError, Param, Tensor2};
use crate::signal::{FeatureSequence, FeatureVector, SignalError, Standardizer};
use crate::storage::checkpoint::{self, ByteReader, ByteWriter, CheckpointError, Decoded};
use crate::DOF;

pub use lstm::{LstmConfig, LstmNet, LstmRegressor};
pub use svr::{
    dual_objective, kkt_violation, rbf_kernel, svr_fit, GramMatrix, SvrConfig, SvrMachine, SvrRegressor,
};
pub use tcn::{TcnBlock, TcnConfig, TcnNet, TcnRegressor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("input does not match model spec: {0}")]
    SpecMismatch(String),
    #[error("model has not been trained")]
    NotTrained,
    #[error("training set is empty")]
    EmptyDataset,
    #[error("target {value} for DoF {dof} lies outside [0, 1]")]
    TargetOutOfRange { dof: usize, value: f64 },
    #[error("SMO did not converge within {0} iterations")]
    NoConvergence(usize),
    #[error("{0} does not support incremental updates")]
    UnsupportedModel(ModelKind),
    #[error("checkpoint holds {found}, expected {expected}")]
    VersionMismatch { expected: String, found: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

impl From<CheckpointError> for ModelError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::VersionMismatch { supported, found } => ModelError::VersionMismatch {
                expected: format!("format version {supported}"),
                found: format!("format version {found}"),
            },
            other => ModelError::CorruptCheckpoint(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Tcn,
    Lstm,
    Svr,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Tcn, ModelKind::Lstm, ModelKind::Svr];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Tcn => "tcn",
            ModelKind::Lstm => "lstm",
            ModelKind::Svr => "svr",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            ModelKind::Tcn => 1,
            ModelKind::Lstm => 2,
            ModelKind::Svr => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }

    pub fn is_sequential(self) -> bool {
        !matches!(self, ModelKind::Svr)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tcn" => Ok(ModelKind::Tcn),
            "lstm" => Ok(ModelKind::Lstm),
            "svr" => Ok(ModelKind::Svr),
            other => Err(format!("unknown model kind `{other}` (expected tcn, lstm or svr)")),
        }
    }
}

/// What a model consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub window_ms: u32,
    pub seq_len: usize,
    pub feature_dim: usize,
}

impl InputSpec {
    pub fn check(&self, seq: &FeatureSequence) -> Result<(), ModelError> {
        if seq.len() != self.seq_len || seq.dim() != self.feature_dim {
            return Err(ModelError::SpecMismatch(format!(
                "expected {} steps x {} features, got {} x {}",
                self.seq_len,
                self.feature_dim,
                seq.len(),
                seq.dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { epochs: 1, batch_size: 24, seed: 0, adam: AdamConfig::default() }
    }
}

/// Mean training loss of every epoch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub samples: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_loss.last().copied()
    }
}

/// Training pairs `(FeatureSequence, DofVector)` stored without duplicating
/// the overlapping history: each sample is a run of `seq_len` consecutive
/// rows of one shared feature timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSet {
    seq_len: usize,
    dim: usize,
    rows: Arc<[f64]>,
    starts: Vec<usize>,
    targets: Vec<DofVector>,
}

impl SequenceSet {
    pub fn empty(seq_len: usize, dim: usize) -> Self {
        Self { seq_len, dim, rows: Arc::from(Vec::new()), starts: Vec::new(), targets: Vec::new() }
    }

    /// One sample for every step of `features` that has `seq_len - 1`
    /// predecessors, targeting the ground truth at that step.
    pub fn from_timeline(
        features: &[FeatureVector],
        targets: &[DofVector],
        seq_len: usize,
    ) -> Result<Self, ModelError> {
        Self::from_timeline_steps(features, targets, seq_len, seq_len.saturating_sub(1)..features.len())
    }

    /// Like [`Self::from_timeline`] but only for the given end steps.
    pub fn from_timeline_steps<I>(
        features: &[FeatureVector],
        targets: &[DofVector],
        seq_len: usize,
        ends: I,
    ) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = usize>,
    {
        if features.len() != targets.len() {
            return Err(ModelError::SpecMismatch(format!(
                "{} feature steps vs {} targets",
                features.len(),
                targets.len()
            )));
        }
        if seq_len == 0 {
            return Err(ModelError::InvalidConfig("sequence length 0".into()));
        }
        let dim = features.first().map_or(0, |f| f.values.len());
        let mut rows = Vec::with_capacity(features.len() * dim);
        for f in features {
            if f.values.len() != dim {
                return Err(ModelError::SpecMismatch("ragged feature timeline".into()));
            }
            rows.extend_from_slice(&f.values);
        }
        let mut set = Self { seq_len, dim, rows: Arc::from(rows), starts: Vec::new(), targets: Vec::new() };
        for end in ends {
            if end + 1 < seq_len || end >= features.len() {
                return Err(ModelError::SpecMismatch(format!("step {end} lacks {seq_len} steps of history")));
            }
            set.starts.push(end + 1 - seq_len);
            set.targets.push(targets[end]);
        }
        Ok(set)
    }

    pub fn from_pairs(pairs: &[(FeatureSequence, DofVector)]) -> Result<Self, ModelError> {
        let Some((first, _)) = pairs.first() else {
            return Err(ModelError::EmptyDataset);
        };
        let (seq_len, dim) = (first.len(), first.dim());
        let mut set = Self::empty(seq_len, dim);
        let mut rows = Vec::with_capacity(pairs.len() * seq_len * dim);
        for (seq, target) in pairs {
            if seq.len() != seq_len || seq.dim() != dim {
                return Err(ModelError::SpecMismatch("pairs of differing shape".into()));
            }
            set.starts.push(rows.len() / dim);
            for step in seq.steps() {
                rows.extend_from_slice(&step.values);
            }
            set.targets.push(*target);
        }
        set.rows = Arc::from(rows);
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Sample `i` as `seq_len x dim` row-major values.
    pub fn sequence(&self, i: usize) -> &[f64] {
        let s = self.starts[i] * self.dim;
        &self.rows[s..s + self.seq_len * self.dim]
    }

    pub fn target(&self, i: usize) -> &DofVector {
        &self.targets[i]
    }

    pub fn targets(&self) -> &[DofVector] {
        &self.targets
    }

    /// Every `every`-th sample (and at most `max` of them, evenly spaced).
    pub fn thinned(&self, every: usize, max: Option<usize>) -> Self {
        let every = every.max(1);
        let mut idx: Vec<usize> = (0..self.len()).step_by(every).collect();
        if let Some(max) = max {
            if idx.len() > max && max > 0 {
                idx = (0..max).map(|k| idx[k * idx.len() / max]).collect();
            }
        }
        self.select(&idx)
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            seq_len: self.seq_len,
            dim: self.dim,
            rows: Arc::clone(&self.rows),
            starts: idx.iter().map(|&i| self.starts[i]).collect(),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
        }
    }

    /// Sample `i` as a [`FeatureSequence`] with synthetic step timestamps.
    pub fn feature_sequence(&self, i: usize) -> FeatureSequence {
        let steps = self
            .sequence(i)
            .chunks(self.dim)
            .enumerate()
            .map(|(t, v)| FeatureVector { t_us: t as i64 * crate::STEP_US, values: v.to_vec() })
            .collect();
        FeatureSequence::new(steps).expect("rows are one step apart")
    }

    fn check_targets(&self) -> Result<(), ModelError> {
        for t in &self.targets {
            for (dof, &v) in t.phi.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(ModelError::TargetOutOfRange { dof, value: v });
                }
            }
        }
        Ok(())
    }

    /// Timeline rows passed through `std` (or copied when it is unfitted).
    fn standardized_rows(&self, std: &Standardizer) -> Result<Vec<f64>, ModelError> {
        let mut rows = self.rows.to_vec();
        if std.is_fitted() {
            for r in rows.chunks_mut(self.dim.max(1)) {
                std.apply_in_place(r)?;
            }
        }
        Ok(rows)
    }

    /// Rows referenced by at least one sample.
    fn used_rows(&self) -> Vec<&[f64]> {
        let n_rows = self.rows.len() / self.dim.max(1);
        let mut used = vec![false; n_rows];
        for &s in &self.starts {
            used[s..s + self.seq_len].iter_mut().for_each(|u| *u = true);
        }
        used.iter()
            .enumerate()
            .filter(|(_, &u)| u)
            .map(|(r, _)| &self.rows[r * self.dim..(r + 1) * self.dim])
            .collect()
    }
}

/// A movement decoder.
///
/// Prediction is read-only; training and updates need exclusive access.
pub trait Regressor: Send + Sync + std::fmt::Debug {
    fn kind(&self) -> ModelKind;

    fn input_spec(&self) -> InputSpec;

    /// Predicts normalized positions in `[0, 1]^7` from one sequence.
    fn predict(&self, seq: &FeatureSequence) -> Result<DofVector, ModelError>;

    /// Predicts every sample of `set`, in order.
    fn predict_set(&self, set: &SequenceSet) -> Result<Vec<DofVector>, ModelError>;

    /// Fits the model. The first call also fits (and freezes) the input
    /// standardizer on the training rows.
    fn train(&mut self, data: &SequenceSet, opts: &TrainOptions) -> Result<TrainReport, ModelError>;

    /// Fine-tunes on one trial's data only; the standardizer stays frozen.
    fn reinforce_update(
        &mut self,
        trial: &SequenceSet,
        epochs: usize,
        opts: &TrainOptions,
    ) -> Result<TrainReport, ModelError>;

    fn standardizer(&self) -> &Standardizer;

    fn checkpoint_save(&self) -> Vec<u8>;

    fn box_clone(&self) -> Box<dyn Regressor>;
}

impl Clone for Box<dyn Regressor> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

/// Restores any model from checkpoint bytes.
pub fn checkpoint_load(bytes: &[u8]) -> Result<Box<dyn Regressor>, ModelError> {
    let (tag, _) = checkpoint::decode(bytes)?;
    match ModelKind::from_tag(tag) {
        Some(ModelKind::Tcn) => Ok(Box::new(TcnRegressor::checkpoint_load(bytes)?)),
        Some(ModelKind::Lstm) => Ok(Box::new(LstmRegressor::checkpoint_load(bytes)?)),
        Some(ModelKind::Svr) => Ok(Box::new(SvrRegressor::checkpoint_load(bytes)?)),
        None => Err(ModelError::CorruptCheckpoint(format!("unknown model tag {tag}"))),
    }
}

/// Opens a checkpoint that must hold `kind`.
pub(crate) fn open_checkpoint(bytes: &[u8], kind: ModelKind) -> Result<Decoded<'_>, ModelError> {
    let (tag, blocks) = checkpoint::decode(bytes)?;
    if tag != kind.tag() {
        let found = ModelKind::from_tag(tag).map_or_else(|| format!("tag {tag}"), |k| k.name().to_string());
        return Err(ModelError::VersionMismatch { expected: kind.name().into(), found });
    }
    Ok(blocks)
}

pub(crate) fn write_standardizer(w: &mut ByteWriter, s: &Standardizer) {
    w.put_u8(u8::from(s.is_fitted()));
    w.put_f64s(s.mean());
    w.put_f64s(s.std());
}

pub(crate) fn read_standardizer(r: &mut ByteReader<'_>) -> Result<Standardizer, ModelError> {
    let fitted = r.get_u8()? != 0;
    let mean = r.get_f64s()?;
    let std = r.get_f64s()?;
    Ok(if fitted { Standardizer::from_parts(mean, std) } else { Standardizer::default() })
}

pub(crate) fn write_params(w: &mut ByteWriter, params: &[&Param]) {
    w.put_u64(params.len() as u64);
    for p in params {
        w.put_f64s(&p.value);
    }
}

pub(crate) fn read_params(r: &mut ByteReader<'_>, params: &mut [&mut Param]) -> Result<(), ModelError> {
    let n = r.get_u64()? as usize;
    if n != params.len() {
        return Err(ModelError::CorruptCheckpoint(format!("{n} parameter tensors, expected {}", params.len())));
    }
    for p in params.iter_mut() {
        let v = r.get_f64s()?;
        if v.len() != p.value.len() {
            return Err(ModelError::CorruptCheckpoint(format!(
                "tensor of {} values, expected {}",
                v.len(),
                p.value.len()
            )));
        }
        **p = Param::new(v);
    }
    Ok(())
}

/// A fixed batch for gradient audits: inputs, targets and sequence length.
#[derive(Debug, Clone)]
pub struct NetBatch {
    pub x: Tensor2,
    pub y: Tensor2,
    pub len: usize,
}

impl NetBatch {
    /// Batch of the given samples, standardized with `std` when fitted.
    pub fn from_set(set: &SequenceSet, std: &Standardizer, idx: &[usize]) -> Result<Self, ModelError> {
        let rows = set.standardized_rows(std)?;
        let (x, y) = gather_batch(&rows, set, idx);
        Ok(Self { x, y, len: set.seq_len })
    }
}

/// A batched sequence network trained with MSE on sigmoid outputs.
pub(crate) trait SequenceNet: Send + Sync {
    /// Inference: `x` is `(batch * len) x dim`, returns `batch x 7`.
    fn forward(&self, x: &Tensor2, len: usize) -> Result<Tensor2, NeuralError>;

    /// Training step on one batch: accumulates gradients, returns the loss.
    fn train_batch(
        &mut self,
        x: &Tensor2,
        y: &Tensor2,
        len: usize,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<f64, NeuralError>;

    fn params_mut(&mut self) -> Vec<&mut Param>;
}

fn gather_batch(rows: &[f64], set: &SequenceSet, idx: &[usize]) -> (Tensor2, Tensor2) {
    let (len, dim) = (set.seq_len, set.dim);
    let mut x = Tensor2::zeros(idx.len() * len, dim);
    let mut y = Tensor2::zeros(idx.len(), DOF);
    for (b, &i) in idx.iter().enumerate() {
        let s = set.starts[i] * dim;
        x.data[b * len * dim..(b + 1) * len * dim].copy_from_slice(&rows[s..s + len * dim]);
        y.row_mut(b).copy_from_slice(&set.targets[i].phi);
    }
    (x, y)
}

/// Mini-batch Adam training over shuffled samples.
pub(crate) fn fit_sequence_net<N: SequenceNet>(
    net: &mut N,
    std: &Standardizer,
    data: &SequenceSet,
    epochs: usize,
    opts: &TrainOptions,
) -> Result<TrainReport, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    data.check_targets()?;
    let rows = data.standardized_rows(std)?;
    let batch = opts.batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport { epoch_loss: Vec::with_capacity(epochs), samples: data.len() };
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let (x, y) = gather_batch(&rows, data, chunk);
            for p in net.params_mut() {
                p.zero_grad();
            }
            let loss = net.train_batch(&x, &y, data.seq_len, Some(&mut rng))?;
            if !loss.is_finite() {
                return Err(NeuralError::NonFiniteLoss(loss).into());
            }
            for p in net.params_mut() {
                p.adam(&opts.adam);
            }
            total += loss * chunk.len() as f64;
        }
        report.epoch_loss.push(total / data.len() as f64);
    }
    Ok(report)
}

/// Inference over every sample of `set` in fixed-size chunks.
pub(crate) fn predict_sequence_net<N: SequenceNet>(
    net: &N,
    std: &Standardizer,
    spec: &InputSpec,
    set: &SequenceSet,
) -> Result<Vec<DofVector>, ModelError> {
    if set.seq_len != spec.seq_len || (set.dim != spec.feature_dim && !set.is_empty()) {
        return Err(ModelError::SpecMismatch(format!(
            "set of {} x {} for model expecting {} x {}",
            set.seq_len, set.dim, spec.seq_len, spec.feature_dim
        )));
    }
    const CHUNK: usize = 64;
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::with_capacity(set.len());
    let rows = set.standardized_rows(std)?;
    for chunk in idx.chunks(CHUNK) {
        let (x, _) = gather_batch(&rows, set, chunk);
        let y = net.forward(&x, set.seq_len)?;
        for b in 0..chunk.len() {
            out.push(to_dof(y.row(b)));
        }
    }
    Ok(out)
}

pub(crate) fn sequence_tensor(
    std: &Standardizer,
    spec: &InputSpec,
    seq: &FeatureSequence,
) -> Result<Tensor2, ModelError> {
    spec.check(seq)?;
    let mut x = Tensor2::zeros(seq.len(), seq.dim());
    for (t, step) in seq.steps().iter().enumerate() {
        let row = x.row_mut(t);
        row.copy_from_slice(&step.values);
        if std.is_fitted() {
            std.apply_in_place(row)?;
        }
    }
    Ok(x)
}

pub(crate) fn to_dof(row: &[f64]) -> DofVector {
    let mut phi = [0.0; DOF];
    phi.copy_from_slice(&row[..DOF]);
    DofVector::clipped(phi)
}

pub(crate) fn fit_standardizer_once(std: &mut Standardizer, data: &SequenceSet) -> Result<(), ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if !std.is_fitted() {
        *std = Standardizer::fit(data.used_rows())?;
    }
    Ok(())
}
