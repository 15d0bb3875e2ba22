//! The three analyses: the cued standard experiment (train on trials 1-2,
//! test on trial 3), the freeform offline 60/40 split and the online
//! freeform reinforcement loop.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{CalibrationMap, DofVector};
use crate::metrics::{self, MetricsError, MetricsReport};
use crate::models::{
    LstmRegressor, ModelError, ModelKind, Regressor, SequenceSet, SvrRegressor, TcnRegressor, TrainOptions,
    TrainReport,
};
use crate::neural::AdamConfig;
use crate::signal::{
    extract_offline, window_samples, EmgFrame, EmgRecording, FeatureHistory, FeatureVector, SignalError,
    StreamingExtractor, Td5Thresholds,
};
use crate::sono::UltrasoundImage;
use crate::storage::{self, RunConfig, StorageError};
use crate::{CHANNELS, DOF, FEATURES_PER_CHANNEL, SAMPLES_PER_STEP, STEP_US};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("session has {found} trials, expected {expected}")]
    WrongTrialCount { expected: usize, found: usize },
    #[error("session of {found_s} s is shorter than the required {needed_s} s")]
    SessionTooShort { needed_s: f64, found_s: f64 },
    #[error("{0} cannot run the reinforcement loop")]
    UnsupportedModel(ModelKind),
    #[error("step {step} of trial {trial} took {micros} us, over the 25 ms budget")]
    BudgetExceeded { trial: usize, step: usize, micros: u64 },
    #[error("invalid session: {0}")]
    InvalidSession(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Storage(#[from] StorageError),
}

/// One recording: EMG at 2 kHz and kinematics on the 25 ms grid sharing the
/// clock origin `emg.t0_us`.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub emg: EmgRecording,
    pub kin_raw: Vec<[f64; DOF]>,
    pub kin_norm: Vec<DofVector>,
    pub calibration: CalibrationMap,
    /// Trial step ranges `[start, end)` into the kinematic streams.
    pub trials: Vec<(usize, usize)>,
    pub meta: BTreeMap<String, String>,
    pub sono: Option<Vec<UltrasoundImage>>,
}

impl SessionLog {
    pub fn steps(&self) -> usize {
        self.kin_norm.len()
    }

    pub fn duration_s(&self) -> f64 {
        self.steps() as f64 * STEP_US as f64 / 1e6
    }

    pub fn kin_t_us(&self, k: usize) -> i64 {
        self.emg.t0_us + k as i64 * STEP_US
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::InvalidSession(m));
        if self.kin_raw.len() != self.kin_norm.len() {
            return bad(format!("{} raw vs {} normalized steps", self.kin_raw.len(), self.kin_norm.len()));
        }
        if self.emg.channels == 0 || self.emg.data.len() % self.emg.channels != 0 {
            return bad("ragged EMG".into());
        }
        if self.emg.len() != self.steps() * SAMPLES_PER_STEP {
            return bad(format!("{} EMG samples do not cover {} steps", self.emg.len(), self.steps()));
        }
        if self.emg.t0_us.rem_euclid(STEP_US) != 0 {
            return bad(format!("clock origin {} us is off the step grid", self.emg.t0_us));
        }
        let mut prev_end = 0;
        for &(a, b) in &self.trials {
            if a < prev_end || b <= a || b > self.steps() {
                return bad(format!("trial [{a}, {b}) overlaps, is empty or out of range"));
            }
            prev_end = b;
        }
        if let Some(frames) = &self.sono {
            if let Some(f) = frames.first() {
                if frames.iter().any(|g| g.height != f.height || g.width != f.width) {
                    return bad("sono dimensions vary".into());
                }
            }
        }
        Ok(())
    }
}

/// Per-trial reinforcement performance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub trial: usize,
    pub rmse_deg: f64,
    pub r2: f64,
    pub delay_ms: f64,
    pub samples: usize,
    /// Wall time of the update that followed the trial.
    pub update_ms: f64,
}

/// Features of one window length over a whole recording with the targets of
/// the steps they feed. `features[i]` feeds kinematic step `first_step + i`.
#[derive(Debug, Clone)]
pub struct Timeline {
    pub features: Vec<FeatureVector>,
    pub targets: Vec<DofVector>,
    pub first_step: usize,
}

impl Timeline {
    pub fn new(session: &SessionLog, window_ms: u32, th: Td5Thresholds) -> Result<Self, ProtocolError> {
        let mut features = extract_offline(&session.emg, window_samples(window_ms), SAMPLES_PER_STEP, th)?;
        let Some(first) = features.first() else {
            return Err(ProtocolError::SessionTooShort { needed_s: window_ms as f64 / 1e3, found_s: session.duration_s() });
        };
        let first_step = ((first.t_us - session.emg.t0_us) / STEP_US) as usize;
        features.truncate(session.steps().saturating_sub(first_step));
        let targets = session.kin_norm[first_step..first_step + features.len()].to_vec();
        Ok(Self { features, targets, first_step })
    }

    /// Training pairs ending at the given kinematic steps; steps without
    /// `seq_len` features of history are skipped.
    pub fn set_for_steps<I: IntoIterator<Item = usize>>(&self, steps: I, seq_len: usize) -> Result<SequenceSet, ProtocolError> {
        let ends: Vec<usize> = steps
            .into_iter()
            .filter(|&k| k >= self.first_step + seq_len - 1 && k < self.first_step + self.features.len())
            .map(|k| k - self.first_step)
            .collect();
        Ok(SequenceSet::from_timeline_steps(&self.features, &self.targets, seq_len, ends)?)
    }
}

pub fn thresholds(cfg: &RunConfig) -> Td5Thresholds {
    Td5Thresholds { zc: cfg.signal.zc_threshold, ssc: cfg.signal.ssc_threshold }
}

pub fn feature_dim() -> usize {
    CHANNELS * FEATURES_PER_CHANNEL
}

/// Fresh model of `kind` configured from `cfg`.
pub fn build_model(kind: ModelKind, cfg: &RunConfig, seed: u64) -> Result<Box<dyn Regressor>, ProtocolError> {
    let dim = feature_dim();
    Ok(match kind {
        ModelKind::Tcn => Box::new(TcnRegressor::new(cfg.tcn.clone(), dim, seed)?),
        ModelKind::Lstm => Box::new(LstmRegressor::new(cfg.lstm.clone(), dim, seed)?),
        ModelKind::Svr => Box::new(SvrRegressor::new(cfg.svr.clone(), dim)?),
    })
}

pub fn train_options(kind: ModelKind, cfg: &RunConfig, seed: u64) -> TrainOptions {
    let epochs = match kind {
        ModelKind::Tcn => cfg.train.tcn_epochs,
        ModelKind::Lstm => cfg.train.lstm_epochs,
        ModelKind::Svr => 1,
    };
    TrainOptions {
        epochs,
        batch_size: cfg.train.batch_size,
        seed,
        adam: AdamConfig { lr: cfg.train.learning_rate, ..AdamConfig::default() },
    }
}

/// Predictions and metrics of one model on one test segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRun {
    pub kind: ModelKind,
    pub report: MetricsReport,
    pub train: TrainReport,
    pub train_pairs: usize,
    pub train_s: f64,
    /// Kinematic step of every test prediction.
    pub steps: Vec<usize>,
    pub pred: Vec<DofVector>,
    pub truth: Vec<DofVector>,
}

fn ranges(rs: &[(usize, usize)]) -> impl Iterator<Item = usize> + '_ {
    rs.iter().flat_map(|&(a, b)| a..b)
}

/// Trains `model` on the given steps (thinned by the pair stride) and
/// evaluates it on every test step.
pub fn evaluate_split(
    session: &SessionLog,
    model: &mut dyn Regressor,
    train_steps: &[usize],
    test_steps: &[usize],
    cfg: &RunConfig,
    opts: &TrainOptions,
) -> Result<ModelRun, ProtocolError> {
    let spec = model.input_spec();
    let tl = Timeline::new(session, spec.window_ms, thresholds(cfg))?;
    let stride = cfg.train.pair_stride.max(1);
    let train = tl.set_for_steps(train_steps.iter().copied().step_by(stride), spec.seq_len)?;
    let started = Instant::now();
    let report = model.train(&train, opts)?;
    let train_s = started.elapsed().as_secs_f64();

    let t = predict_steps(session, &tl, model, test_steps, cfg)?;
    Ok(ModelRun {
        kind: model.kind(),
        report: t.report,
        train: report,
        train_pairs: train.len(),
        train_s,
        steps: t.steps,
        pred: t.pred,
        truth: t.truth,
    })
}

/// Test-segment predictions of an already trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct TestOutput {
    pub steps: Vec<usize>,
    pub pred: Vec<DofVector>,
    pub truth: Vec<DofVector>,
    pub report: MetricsReport,
}

fn predict_steps(
    session: &SessionLog,
    tl: &Timeline,
    model: &dyn Regressor,
    test_steps: &[usize],
    cfg: &RunConfig,
) -> Result<TestOutput, ProtocolError> {
    let seq_len = model.input_spec().seq_len;
    let steps: Vec<usize> = test_steps
        .iter()
        .copied()
        .filter(|&k| k + 1 >= tl.first_step + seq_len && k < tl.first_step + tl.features.len())
        .collect();
    let test = tl.set_for_steps(steps.iter().copied(), seq_len)?;
    let pred = model.predict_set(&test)?;
    let truth: Vec<DofVector> = steps.iter().map(|&k| session.kin_norm[k]).collect();
    let report = MetricsReport::compute(&pred, &truth, &session.calibration, cfg.protocol.max_lag)?;
    Ok(TestOutput { steps, pred, truth, report })
}

/// Evaluates a trained model on the given steps.
pub fn evaluate_trained(
    session: &SessionLog,
    model: &dyn Regressor,
    test_steps: &[usize],
    cfg: &RunConfig,
) -> Result<TestOutput, ProtocolError> {
    let tl = Timeline::new(session, model.input_spec().window_ms, thresholds(cfg))?;
    predict_steps(session, &tl, model, test_steps, cfg)
}

/// Which offline analysis a session belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Analysis {
    Standard,
    Freeform,
}

impl Analysis {
    /// From the session's `protocol` meta entry, else from its trial count.
    pub fn of(session: &SessionLog) -> Self {
        match session.meta.get("protocol").map(String::as_str) {
            Some("standard") => Analysis::Standard,
            Some(_) => Analysis::Freeform,
            None if session.trials.len() == 3 => Analysis::Standard,
            None => Analysis::Freeform,
        }
    }
}

/// Train and test steps of the session's offline analysis.
pub fn offline_split(session: &SessionLog, cfg: &RunConfig) -> Result<(Analysis, Vec<usize>, Vec<usize>), ProtocolError> {
    match Analysis::of(session) {
        Analysis::Standard => {
            let (a, b) = standard_split(session)?;
            Ok((Analysis::Standard, a, b))
        }
        Analysis::Freeform => {
            check_freeform(session)?;
            let split = freeform_split(session, cfg.protocol.train_fraction);
            Ok((Analysis::Freeform, (0..split).collect(), (split..session.steps()).collect()))
        }
    }
}

/// The per-DoF mean of the training targets, evaluated like a model.
pub fn mean_predictor(
    session: &SessionLog,
    train_steps: &[usize],
    test_steps: &[usize],
    max_lag: usize,
) -> Result<MetricsReport, ProtocolError> {
    let train: Vec<DofVector> = train_steps.iter().map(|&k| session.kin_norm[k]).collect();
    let m = metrics::mean_pose(&train);
    let truth: Vec<DofVector> = test_steps.iter().map(|&k| session.kin_norm[k]).collect();
    let pred = vec![m; truth.len()];
    Ok(MetricsReport::compute(&pred, &truth, &session.calibration, max_lag)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardResult {
    pub runs: Vec<ModelRun>,
    pub mean_predictor: MetricsReport,
}

fn standard_split(session: &SessionLog) -> Result<(Vec<usize>, Vec<usize>), ProtocolError> {
    session.validate()?;
    if session.trials.len() != 3 {
        return Err(ProtocolError::WrongTrialCount { expected: 3, found: session.trials.len() });
    }
    Ok((ranges(&session.trials[..2]).collect(), ranges(&session.trials[2..]).collect()))
}

/// Train on trials 1-2, test on trial 3, for every requested model.
pub fn run_standard(
    session: &SessionLog,
    kinds: &[ModelKind],
    cfg: &RunConfig,
    seed: u64,
) -> Result<StandardResult, ProtocolError> {
    let (train, test) = standard_split(session)?;
    let mut runs = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let mut model = build_model(kind, cfg, seed)?;
        runs.push(evaluate_split(session, model.as_mut(), &train, &test, cfg, &train_options(kind, cfg, seed))?);
    }
    let mean_predictor = mean_predictor(session, &train, &test, cfg.protocol.max_lag)?;
    Ok(StandardResult { runs, mean_predictor })
}

/// Runs a caller-supplied model through the standard split.
pub fn run_standard_with(
    session: &SessionLog,
    model: &mut dyn Regressor,
    cfg: &RunConfig,
    opts: &TrainOptions,
) -> Result<ModelRun, ProtocolError> {
    let (train, test) = standard_split(session)?;
    evaluate_split(session, model, &train, &test, cfg, opts)
}

/// Time-ordered split point: the first test step.
pub fn freeform_split(session: &SessionLog, train_fraction: f64) -> usize {
    (session.steps() as f64 * train_fraction).floor() as usize
}

/// Minimum freeform session accepted by the offline protocol.
pub const FREEFORM_MIN_S: f64 = 300.0;

fn check_freeform(session: &SessionLog) -> Result<(), ProtocolError> {
    session.validate()?;
    if session.duration_s() + 1e-9 < FREEFORM_MIN_S {
        return Err(ProtocolError::SessionTooShort { needed_s: FREEFORM_MIN_S, found_s: session.duration_s() });
    }
    Ok(())
}

/// First 60 % trains, last 40 % tests; never shuffled.
pub fn run_freeform_offline(
    session: &SessionLog,
    kinds: &[ModelKind],
    cfg: &RunConfig,
    seed: u64,
) -> Result<StandardResult, ProtocolError> {
    check_freeform(session)?;
    let split = freeform_split(session, cfg.protocol.train_fraction);
    let train: Vec<usize> = (0..split).collect();
    let test: Vec<usize> = (split..session.steps()).collect();
    let mut runs = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let mut model = build_model(kind, cfg, seed)?;
        runs.push(evaluate_split(session, model.as_mut(), &train, &test, cfg, &train_options(kind, cfg, seed))?);
    }
    let mean_predictor = mean_predictor(session, &train, &test, cfg.protocol.max_lag)?;
    Ok(StandardResult { runs, mean_predictor })
}

/// Offline freeform evaluation of one caller-supplied model.
pub fn run_freeform_with(
    session: &SessionLog,
    model: &mut dyn Regressor,
    cfg: &RunConfig,
    opts: &TrainOptions,
) -> Result<ModelRun, ProtocolError> {
    check_freeform(session)?;
    let split = freeform_split(session, cfg.protocol.train_fraction);
    let train: Vec<usize> = (0..split).collect();
    let test: Vec<usize> = (split..session.steps()).collect();
    evaluate_split(session, model, &train, &test, cfg, opts)
}

/// Time-ordered versus shuffled split of the same session and model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeakageAudit {
    pub ordered_r2: f64,
    pub shuffled_r2: f64,
    pub flagged: bool,
}

pub const LEAKAGE_MARGIN: f64 = 0.15;

/// Evaluates fresh models from `make` on the time-ordered split and on a
/// shuffled split of the same size; a shuffled score that beats the ordered
/// one by more than [`LEAKAGE_MARGIN`] flags temporal leakage.
pub fn leakage_audit(
    session: &SessionLog,
    make: &dyn Fn() -> Box<dyn Regressor>,
    cfg: &RunConfig,
    opts: &TrainOptions,
    seed: u64,
) -> Result<LeakageAudit, ProtocolError> {
    check_freeform(session)?;
    let split = freeform_split(session, cfg.protocol.train_fraction);
    let ordered_train: Vec<usize> = (0..split).collect();
    let ordered_test: Vec<usize> = (split..session.steps()).collect();
    let ordered = evaluate_split(session, make().as_mut(), &ordered_train, &ordered_test, cfg, opts)?;

    let mut all: Vec<usize> = (0..session.steps()).collect();
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b) = all.split_at(split);
    let (mut tr, mut te) = (a.to_vec(), b.to_vec());
    tr.sort_unstable();
    te.sort_unstable();
    let shuffled = evaluate_split(session, make().as_mut(), &tr, &te, cfg, opts)?;

    let (o, s) = (ordered.report.mean_r2, shuffled.report.mean_r2);
    Ok(LeakageAudit { ordered_r2: o, shuffled_r2: s, flagged: s - o > LEAKAGE_MARGIN })
}

/// Raw data of one trial, owned by whoever holds it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialData {
    pub index: usize,
    pub emg: EmgRecording,
    pub kin: Vec<DofVector>,
}

impl TrialData {
    pub fn from_session(session: &SessionLog, index: usize, (a, b): (usize, usize)) -> Self {
        let emg = session.emg.slice(a * SAMPLES_PER_STEP, b * SAMPLES_PER_STEP);
        Self { index, emg, kin: session.kin_norm[a..b].to_vec() }
    }

    /// Kinematic step (relative to the trial) fed by a feature stamped `t_us`.
    fn step_of(&self, t_us: i64) -> Option<usize> {
        let k = (t_us - self.emg.t0_us).div_euclid(STEP_US);
        (k >= 0 && (k as usize) < self.kin.len()).then_some(k as usize)
    }
}

/// Hands out trials one at a time; the loop never asks for one twice.
pub trait TrialSource {
    fn next_trial(&mut self) -> Result<Option<TrialData>, ProtocolError>;
}

/// Trials held in memory and given away in order.
#[derive(Debug, Default)]
pub struct MemoryTrials {
    queue: VecDeque<TrialData>,
}

impl MemoryTrials {
    pub fn new(trials: Vec<TrialData>) -> Self {
        Self { queue: trials.into() }
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// The session's trials after the first (the initial segment).
    pub fn from_session(session: &SessionLog) -> Self {
        Self::new(session.trials.iter().enumerate().skip(1).map(|(i, &r)| TrialData::from_session(session, i, r)).collect())
    }
}

impl TrialSource for MemoryTrials {
    fn next_trial(&mut self) -> Result<Option<TrialData>, ProtocolError> {
        Ok(self.queue.pop_front())
    }
}

/// Splits a reinforcement session into its initial segment (returned as a
/// session of its own) and the remaining trials; the full recording is
/// consumed.
pub fn split_reinforcement(session: SessionLog) -> Result<(SessionLog, MemoryTrials), ProtocolError> {
    session.validate()?;
    let &(a, b) = session.trials.first().ok_or(ProtocolError::WrongTrialCount { expected: 2, found: 0 })?;
    let trials = MemoryTrials::from_session(&session);
    let init = TrialData::from_session(&session, 0, (a, b));
    let log = SessionLog {
        emg: init.emg,
        kin_raw: session.kin_raw[a..b].to_vec(),
        kin_norm: init.kin,
        calibration: session.calibration,
        trials: vec![(0, b - a)],
        meta: session.meta,
        sono: None,
    };
    Ok((log, trials))
}

/// Trials stored as one session directory each (`trial_01`, ...); reading a
/// trial optionally deletes its directory.
#[derive(Debug)]
pub struct DirTrials {
    root: PathBuf,
    next: usize,
    count: usize,
    delete_consumed: bool,
}

impl DirTrials {
    /// Writes every trial after the initial segment under `root`.
    pub fn write(session: &SessionLog, root: &Path) -> Result<(), ProtocolError> {
        for (i, &(a, b)) in session.trials.iter().enumerate().skip(1) {
            let data = TrialData::from_session(session, i, (a, b));
            let log = SessionLog {
                emg: data.emg,
                kin_raw: session.kin_raw[a..b].to_vec(),
                kin_norm: data.kin,
                calibration: session.calibration.clone(),
                trials: vec![(0, b - a)],
                meta: BTreeMap::from([("trial".to_string(), i.to_string())]),
                sono: None,
            };
            storage::session_write(&log, &Self::trial_dir(root, i))?;
        }
        Ok(())
    }

    pub fn open(root: &Path, count: usize, delete_consumed: bool) -> Self {
        Self { root: root.to_path_buf(), next: 1, count, delete_consumed }
    }

    pub fn trial_dir(root: &Path, index: usize) -> PathBuf {
        root.join(format!("trial_{index:02}"))
    }
}

impl TrialSource for DirTrials {
    fn next_trial(&mut self) -> Result<Option<TrialData>, ProtocolError> {
        if self.next > self.count {
            return Ok(None);
        }
        let dir = Self::trial_dir(&self.root, self.next);
        let log = storage::session_read(&dir)?;
        if self.delete_consumed {
            std::fs::remove_dir_all(&dir).map_err(|e| StorageError::io(&dir, e))?;
        }
        let data = TrialData { index: self.next, emg: log.emg, kin: log.kin_norm };
        self.next += 1;
        Ok(Some(data))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoopMode {
    /// As fast as possible, single context, deterministic.
    Replay,
    /// Producer paced at wall-clock rate feeding the decoder through a
    /// bounded queue.
    Realtime,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    pub fn from_micros(samples: &[u64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut s = samples.to_vec();
        s.sort_unstable();
        let pick = |q: f64| s[((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1] as f64 / 1e3;
        Self { count: s.len(), p50_ms: pick(0.5), p99_ms: pick(0.99), max_ms: *s.last().expect("non-empty") as f64 / 1e3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReinforcementResult {
    pub kind: ModelKind,
    pub mode: LoopMode,
    pub init_train: TrainReport,
    pub trials: Vec<TrialMetrics>,
    pub latency: LatencyStats,
    /// Largest number of raw EMG samples held at once.
    pub peak_samples_held: usize,
}

/// Streaming decoder state carried from one trial into the next: the
/// extractor's window and the last `seq_len` feature vectors.
struct Decoder {
    extractor: StreamingExtractor,
    history: FeatureHistory,
    /// Features of the current trial with the step they feed.
    trial_features: Vec<(FeatureVector, Option<usize>)>,
    /// History carried in from the previous trial.
    carried: Vec<FeatureVector>,
}

impl Decoder {
    fn new(window_ms: u32, seq_len: usize, th: Td5Thresholds) -> Result<Self, ProtocolError> {
        Ok(Self {
            extractor: StreamingExtractor::with_window_ms(CHANNELS, window_ms, th)?,
            history: FeatureHistory::new(seq_len),
            trial_features: Vec::new(),
            carried: Vec::new(),
        })
    }

    /// Starts a trial. The vector emitted at the end of the previous segment
    /// is stamped with this trial's first step; it opens the trial and, with
    /// full history, yields that step's prediction.
    fn begin_trial(
        &mut self,
        trial: &TrialData,
        model: &dyn Regressor,
    ) -> Result<Option<(usize, DofVector)>, ProtocolError> {
        let seq_len = model.input_spec().seq_len;
        self.trial_features.clear();
        let n = self.history.len().min(seq_len);
        let mut recent = if n > 0 { self.history.make_sequence(n)?.into_steps() } else { Vec::new() };
        let lead = match recent.last() {
            Some(fv) if fv.t_us == trial.emg.t0_us && !trial.kin.is_empty() => recent.pop(),
            _ => None,
        };
        if recent.len() >= seq_len {
            recent.remove(0);
        }
        self.carried = recent;
        let Some(fv) = lead else {
            return Ok(None);
        };
        self.trial_features.push((fv, Some(0)));
        match self.history.make_sequence(seq_len) {
            Ok(seq) => Ok(Some((0, model.predict(&seq)?))),
            Err(_) => Ok(None),
        }
    }

    /// Feeds one frame; returns a prediction when a step completes with full
    /// history.
    fn push(
        &mut self,
        frame: &EmgFrame,
        trial: &TrialData,
        model: &dyn Regressor,
    ) -> Result<Option<(usize, DofVector)>, ProtocolError> {
        let Some(fv) = self.extractor.push(frame)? else {
            return Ok(None);
        };
        let step = trial.step_of(fv.t_us);
        self.history.push(fv.clone());
        self.trial_features.push((fv, step));
        let seq_len = model.input_spec().seq_len;
        match (step, self.history.make_sequence(seq_len)) {
            (Some(k), Ok(seq)) => Ok(Some((k, model.predict(&seq)?))),
            _ => Ok(None),
        }
    }

    /// Pairs for every trial step that has full history.
    fn trial_set(&self, trial: &TrialData, seq_len: usize, stride: usize) -> Result<SequenceSet, ProtocolError> {
        let mut features = self.carried.clone();
        let mut targets = vec![DofVector::default(); features.len()];
        let mut ends = Vec::new();
        for (fv, step) in &self.trial_features {
            if let Some(k) = step {
                if features.len() + 1 >= seq_len {
                    ends.push(features.len());
                }
                targets.push(trial.kin[*k]);
            } else {
                targets.push(DofVector::default());
            }
            features.push(fv.clone());
        }
        let ends: Vec<usize> = ends.into_iter().step_by(stride).collect();
        Ok(SequenceSet::from_timeline_steps(&features, &targets, seq_len, ends)?)
    }
}

/// The online loop: train on the initial segment, then for every trial
/// predict it causally, score it, update on it and drop it.
pub fn run_reinforcement(
    session_init: &SessionLog,
    source: &mut dyn TrialSource,
    kind: ModelKind,
    cfg: &RunConfig,
    seed: u64,
    mode: LoopMode,
) -> Result<ReinforcementResult, ProtocolError> {
    if !kind.is_sequential() {
        return Err(ProtocolError::UnsupportedModel(kind));
    }
    let model = build_model(kind, cfg, seed)?;
    run_reinforcement_with(session_init, source, model, cfg, seed, mode)
}

/// [`run_reinforcement`] for a caller-built model.
pub fn run_reinforcement_with(
    session_init: &SessionLog,
    source: &mut dyn TrialSource,
    mut model: Box<dyn Regressor>,
    cfg: &RunConfig,
    seed: u64,
    mode: LoopMode,
) -> Result<ReinforcementResult, ProtocolError> {
    let kind = model.kind();
    if !kind.is_sequential() {
        return Err(ProtocolError::UnsupportedModel(kind));
    }
    session_init.validate()?;
    let &(init_a, init_b) = session_init
        .trials
        .first()
        .ok_or(ProtocolError::WrongTrialCount { expected: 1, found: 0 })?;
    let spec = model.input_spec();
    let th = thresholds(cfg);
    let stride = cfg.train.pair_stride.max(1);
    let opts = train_options(kind, cfg, seed);

    // Initial segment: offline pairs, identical to what streaming produces.
    let init = TrialData::from_session(session_init, 0, (init_a, init_b));
    let init_log = SessionLog {
        emg: init.emg.clone(),
        kin_raw: session_init.kin_raw[init_a..init_b].to_vec(),
        kin_norm: init.kin.clone(),
        calibration: session_init.calibration.clone(),
        trials: vec![(0, init_b - init_a)],
        meta: BTreeMap::new(),
        sono: None,
    };
    let tl = Timeline::new(&init_log, spec.window_ms, th)?;
    let set = tl.set_for_steps((0..init_log.steps()).step_by(stride), spec.seq_len)?;
    let init_train = model.train(&set, &opts)?;
    drop(set);
    drop(tl);

    // Warm the streaming state on the initial segment so the first trial
    // starts with full history, as in a continuous recording.
    let mut dec = Decoder::new(spec.window_ms, spec.seq_len, th)?;
    for f in init.emg.frames() {
        dec.extractor.push(&f)?.into_iter().for_each(|fv| dec.history.push(fv));
    }
    let mut peak = init_log.emg.len();
    drop(init_log);
    drop(init);

    let mut trials = Vec::new();
    let mut latencies = Vec::new();
    let calibration = session_init.calibration.clone();
    let update_epochs = cfg.train.update_epochs;

    while let Some(trial) = source.next_trial()? {
        peak = peak.max(trial.emg.len());
        let mut preds: Vec<(usize, DofVector)> = Vec::with_capacity(trial.kin.len());
        let mut lat = Vec::with_capacity(trial.kin.len());
        let t = Instant::now();
        if let Some(p) = dec.begin_trial(&trial, model.as_ref())? {
            lat.push(t.elapsed().as_micros() as u64);
            preds.push(p);
        }
        match mode {
            LoopMode::Replay => {
                for f in trial.emg.frames() {
                    let t = Instant::now();
                    if let Some(p) = dec.push(&f, &trial, model.as_ref())? {
                        lat.push(t.elapsed().as_micros() as u64);
                        preds.push(p);
                    }
                }
            }
            LoopMode::Realtime => {
                realtime_trial(&trial, &mut dec, model.as_ref(), &mut preds, &mut lat)?;
            }
        }
        if cfg.protocol.strict_realtime {
            if let Some((step, &us)) = lat.iter().enumerate().find(|(_, &us)| us > STEP_US as u64) {
                return Err(ProtocolError::BudgetExceeded { trial: trial.index, step, micros: us });
            }
        }
        latencies.extend_from_slice(&lat);

        let pred: Vec<DofVector> = preds.iter().map(|p| p.1).collect();
        let truth: Vec<DofVector> = preds.iter().map(|p| trial.kin[p.0]).collect();
        let m = MetricsReport::compute(&pred, &truth, &calibration, cfg.protocol.max_lag)?;

        // Update a copy while prediction is paused, then swap it in.
        let started = Instant::now();
        let set = dec.trial_set(&trial, spec.seq_len, stride)?;
        let mut next = model.clone();
        let mut opts_k = opts;
        opts_k.seed = seed.wrapping_add(trial.index as u64);
        if update_epochs > 0 {
            next.reinforce_update(&set, update_epochs, &opts_k)?;
        }
        model = next;
        let update_ms = started.elapsed().as_secs_f64() * 1e3;
        drop(set);

        trials.push(TrialMetrics {
            trial: trial.index,
            rmse_deg: m.total_rmse_deg,
            r2: m.mean_r2,
            delay_ms: m.delay_ms,
            samples: m.samples,
            update_ms,
        });
        // The trial's raw data ends here.
        drop(trial);
        dec.trial_features.clear();
        dec.carried.clear();
    }

    Ok(ReinforcementResult {
        kind,
        mode,
        init_train,
        trials,
        latency: LatencyStats::from_micros(&latencies),
        peak_samples_held: peak,
    })
}

/// One trial at wall-clock pace: a producer thread releases a step's worth
/// of frames every 25 ms into a bounded queue; this context decodes.
fn realtime_trial(
    trial: &TrialData,
    dec: &mut Decoder,
    model: &dyn Regressor,
    preds: &mut Vec<(usize, DofVector)>,
    lat: &mut Vec<u64>,
) -> Result<(), ProtocolError> {
    let (tx, rx) = mpsc::sync_channel::<Vec<EmgFrame>>(4);
    std::thread::scope(|scope| {
        let producer = scope.spawn(move || {
            let start = Instant::now();
            let frames: Vec<EmgFrame> = trial.emg.frames().collect();
            for (b, block) in frames.chunks(SAMPLES_PER_STEP).enumerate() {
                let due = start + Duration::from_micros(((b + 1) as u64) * STEP_US as u64);
                if let Some(wait) = due.checked_duration_since(Instant::now()) {
                    std::thread::sleep(wait);
                }
                if tx.send(block.to_vec()).is_err() {
                    return;
                }
            }
        });
        let mut result = Ok(());
        for block in rx.iter() {
            let t = Instant::now();
            for f in &block {
                match dec.push(f, trial, model) {
                    Ok(Some(p)) => {
                        lat.push(t.elapsed().as_micros() as u64);
                        preds.push(p);
                    }
                    Ok(None) => {}
                    Err(e) => {
                        result = Err(e);
                        break;
                    }
                }
            }
            if result.is_err() {
                break;
            }
        }
        drop(rx);
        producer.join().expect("producer thread");
        result
    })
}
