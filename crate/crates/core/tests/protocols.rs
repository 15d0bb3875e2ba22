use std::collections::HashMap;
use std::time::Duration;

use myodec::kinematics::DofVector;
use myodec::models::{InputSpec, ModelError, ModelKind, Regressor, SequenceSet, TrainOptions};
use myodec::protocols::{
    self, Analysis, DirTrials, LoopMode, MemoryTrials, ProtocolError, SessionLog, TrialData, TrialSource,
};
use myodec::signal::{StreamingExtractor, Td5Thresholds};
use myodec::simulator::{self, SimConfig, SyntheticSubject};
use myodec::{FeatureSequence, RunConfig, Standardizer, TrainReport, CHANNELS, FEATURES_PER_CHANNEL, STEP_US};

const DIM: usize = CHANNELS * FEATURES_PER_CHANNEL;

fn subject(seed: u64) -> SyntheticSubject {
    SyntheticSubject::new(seed, SimConfig::default()).unwrap()
}

fn key(row: &[f64]) -> Vec<u64> {
    row.iter().map(|v| v.to_bits()).collect()
}

/// Looks up the true position for each feature vector, computed here from a
/// streaming pass over the raw EMG. Any misalignment between features and
/// kinematic steps inside the protocol shows up as a nonzero error.
#[derive(Debug, Clone)]
struct Lookup {
    table: HashMap<Vec<u64>, DofVector>,
    window_ms: u32,
    std: Standardizer,
}

impl Lookup {
    fn new(session: &SessionLog, window_ms: u32) -> Self {
        let mut ex = StreamingExtractor::with_window_ms(CHANNELS, window_ms, Td5Thresholds::default()).unwrap();
        let mut table = HashMap::new();
        for f in session.emg.frames() {
            if let Some(fv) = ex.push(&f).unwrap() {
                let step = ((fv.t_us - session.emg.t0_us) / STEP_US) as usize;
                if step < session.steps() {
                    table.insert(key(&fv.values), session.kin_norm[step]);
                }
            }
        }
        Self { table, window_ms, std: Standardizer::default() }
    }

    fn lookup(&self, row: &[f64]) -> Result<DofVector, ModelError> {
        self.table.get(&key(row)).copied().ok_or_else(|| ModelError::SpecMismatch("unknown feature vector".into()))
    }
}

impl Regressor for Lookup {
    fn kind(&self) -> ModelKind {
        ModelKind::Svr
    }
    fn input_spec(&self) -> InputSpec {
        InputSpec { window_ms: self.window_ms, seq_len: 1, feature_dim: DIM }
    }
    fn predict(&self, seq: &FeatureSequence) -> Result<DofVector, ModelError> {
        self.lookup(&seq.latest().values)
    }
    fn predict_set(&self, set: &SequenceSet) -> Result<Vec<DofVector>, ModelError> {
        (0..set.len()).map(|i| self.lookup(set.sequence(i))).collect()
    }
    fn train(&mut self, _: &SequenceSet, _: &TrainOptions) -> Result<TrainReport, ModelError> {
        Ok(TrainReport::default())
    }
    fn reinforce_update(&mut self, _: &SequenceSet, _: usize, _: &TrainOptions) -> Result<TrainReport, ModelError> {
        Ok(TrainReport::default())
    }
    fn standardizer(&self) -> &Standardizer {
        &self.std
    }
    fn checkpoint_save(&self) -> Vec<u8> {
        Vec::new()
    }
    fn box_clone(&self) -> Box<dyn Regressor> {
        Box::new(self.clone())
    }
}

/// One-nearest-neighbour memorizer: perfect recall of what it has seen,
/// no generalization to new movement.
#[derive(Debug, Clone, Default)]
struct Memorizer {
    rows: Vec<Vec<f64>>,
    targets: Vec<DofVector>,
    std: Standardizer,
}

impl Memorizer {
    fn nearest(&self, x: &[f64]) -> DofVector {
        let d = |r: &Vec<f64>| r.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let i = (0..self.rows.len()).min_by(|&a, &b| d(&self.rows[a]).total_cmp(&d(&self.rows[b]))).unwrap();
        self.targets[i]
    }
}

impl Regressor for Memorizer {
    fn kind(&self) -> ModelKind {
        ModelKind::Svr
    }
    fn input_spec(&self) -> InputSpec {
        InputSpec { window_ms: 200, seq_len: 1, feature_dim: DIM }
    }
    fn predict(&self, seq: &FeatureSequence) -> Result<DofVector, ModelError> {
        Ok(self.nearest(&seq.latest().values))
    }
    fn predict_set(&self, set: &SequenceSet) -> Result<Vec<DofVector>, ModelError> {
        Ok((0..set.len()).map(|i| self.nearest(set.sequence(i))).collect())
    }
    fn train(&mut self, data: &SequenceSet, _: &TrainOptions) -> Result<TrainReport, ModelError> {
        self.rows = (0..data.len()).map(|i| data.sequence(i).to_vec()).collect();
        self.targets = data.targets().to_vec();
        Ok(TrainReport { epoch_loss: vec![0.0], samples: data.len() })
    }
    fn reinforce_update(&mut self, _: &SequenceSet, _: usize, _: &TrainOptions) -> Result<TrainReport, ModelError> {
        Ok(TrainReport::default())
    }
    fn standardizer(&self) -> &Standardizer {
        &self.std
    }
    fn checkpoint_save(&self) -> Vec<u8> {
        Vec::new()
    }
    fn box_clone(&self) -> Box<dyn Regressor> {
        Box::new(self.clone())
    }
}

/// Predicts the training mean, slowly.
#[derive(Debug, Clone, Default)]
struct Sluggish {
    mean: DofVector,
    std: Standardizer,
}

impl Regressor for Sluggish {
    fn kind(&self) -> ModelKind {
        ModelKind::Lstm
    }
    fn input_spec(&self) -> InputSpec {
        InputSpec { window_ms: 50, seq_len: 1, feature_dim: DIM }
    }
    fn predict(&self, _: &FeatureSequence) -> Result<DofVector, ModelError> {
        std::thread::sleep(Duration::from_millis(30));
        Ok(self.mean)
    }
    fn predict_set(&self, set: &SequenceSet) -> Result<Vec<DofVector>, ModelError> {
        Ok(vec![self.mean; set.len()])
    }
    fn train(&mut self, data: &SequenceSet, _: &TrainOptions) -> Result<TrainReport, ModelError> {
        self.mean = myodec::metrics::mean_pose(data.targets());
        Ok(TrainReport::default())
    }
    fn reinforce_update(&mut self, _: &SequenceSet, _: usize, _: &TrainOptions) -> Result<TrainReport, ModelError> {
        Ok(TrainReport::default())
    }
    fn standardizer(&self) -> &Standardizer {
        &self.std
    }
    fn checkpoint_save(&self) -> Vec<u8> {
        Vec::new()
    }
    fn box_clone(&self) -> Box<dyn Regressor> {
        Box::new(self.clone())
    }
}

#[test]
fn features_align_with_the_steps_they_feed() {
    let log = simulator::gen_standard_session(&subject(1), 3, 1).unwrap();
    let cfg = RunConfig::desk();
    for window_ms in [50, 200] {
        let mut oracle = Lookup::new(&log, window_ms);
        let run = protocols::run_standard_with(&log, &mut oracle, &cfg, &TrainOptions::default()).unwrap();
        assert_eq!(run.report.total_rmse_deg, 0.0, "window {window_ms}");
        assert_eq!(run.report.delay_steps, 0);
        assert_eq!(run.report.mean_r2, 1.0);
        // Every step of trial 3 that has a full window is scored.
        let (a, b) = log.trials[2];
        assert_eq!(run.steps, (a..b).collect::<Vec<_>>());
    }
}

#[test]
fn standard_split_trains_on_two_trials_and_tests_on_the_third() {
    let log = simulator::gen_standard_session(&subject(2), 3, 2).unwrap();
    let cfg = RunConfig::desk();
    let (analysis, train, test) = protocols::offline_split(&log, &cfg).unwrap();
    assert_eq!(analysis, Analysis::Standard);
    let in_trial = |k: usize, t: usize| (log.trials[t].0..log.trials[t].1).contains(&k);
    assert!(train.iter().all(|&k| in_trial(k, 0) || in_trial(k, 1)));
    assert!(test.iter().all(|&k| in_trial(k, 2)));
    assert_eq!(train.len(), log.trials[0].1 - log.trials[0].0 + log.trials[1].1 - log.trials[1].0);

    let mut two = log.clone();
    two.trials.pop();
    two.meta.insert("protocol".into(), "standard".into());
    assert!(matches!(
        protocols::run_standard(&two, &[ModelKind::Svr], &cfg, 0),
        Err(ProtocolError::WrongTrialCount { expected: 3, found: 2 })
    ));
}

#[test]
fn freeform_needs_five_minutes() {
    let log = simulator::gen_freeform_session(&subject(3), 120.0, 3).unwrap();
    assert!(matches!(
        protocols::run_freeform_offline(&log, &[ModelKind::Svr], &RunConfig::desk(), 0),
        Err(ProtocolError::SessionTooShort { .. })
    ));
}

#[test]
fn shuffled_split_exposes_a_memorizer() {
    let log = simulator::gen_freeform_session(&subject(4), 300.0, 4).unwrap();
    let cfg = RunConfig::desk();
    let make = || -> Box<dyn Regressor> { Box::new(Memorizer::default()) };
    let audit = protocols::leakage_audit(&log, &make, &cfg, &TrainOptions::default(), 4).unwrap();
    assert!(audit.flagged, "{audit:?}");
    assert!(audit.shuffled_r2 > audit.ordered_r2 + protocols::LEAKAGE_MARGIN);

    let honest = || -> Box<dyn Regressor> { Box::new(Sluggish::default()) };
    let audit = protocols::leakage_audit(&log, &honest, &cfg, &TrainOptions::default(), 4).unwrap();
    assert!(!audit.flagged, "{audit:?}");
}

#[test]
fn offline_runs_are_deterministic() {
    let log = simulator::gen_standard_session(&subject(5), 3, 5).unwrap();
    let mut cfg = RunConfig::desk();
    cfg.train.tcn_epochs = 2;
    let kinds = [ModelKind::Tcn, ModelKind::Svr];
    let a = protocols::run_standard(&log, &kinds, &cfg, 9).unwrap();
    let b = protocols::run_standard(&log, &kinds, &cfg, 9).unwrap();
    for (x, y) in a.runs.iter().zip(&b.runs) {
        assert_eq!(x.report, y.report);
        assert_eq!(x.pred, y.pred);
        assert_eq!(x.train.epoch_loss, y.train.epoch_loss);
    }
    let c = protocols::run_standard(&log, &kinds[..1], &cfg, 10).unwrap();
    assert_ne!(a.runs[0].pred, c.runs[0].pred);
}

fn short_reinforcement(seed: u64, trials: usize, trial_s: f64) -> SessionLog {
    simulator::gen_reinforcement_session(&subject(seed), 20.0, trials, trial_s, seed).unwrap()
}

#[test]
fn svr_cannot_run_the_online_loop() {
    let (init, mut trials) = protocols::split_reinforcement(short_reinforcement(6, 1, 2.0)).unwrap();
    assert!(matches!(
        protocols::run_reinforcement(&init, &mut trials, ModelKind::Svr, &RunConfig::desk(), 0, LoopMode::Replay),
        Err(ProtocolError::UnsupportedModel(ModelKind::Svr))
    ));
}

#[test]
fn strict_mode_rejects_a_step_over_budget() {
    let (init, mut trials) = protocols::split_reinforcement(short_reinforcement(7, 1, 1.0)).unwrap();
    let mut cfg = RunConfig::desk();
    cfg.protocol.strict_realtime = true;
    let r = protocols::run_reinforcement_with(&init, &mut trials, Box::new(Sluggish::default()), &cfg, 0, LoopMode::Replay);
    assert!(matches!(r, Err(ProtocolError::BudgetExceeded { trial: 1, micros, .. }) if micros > STEP_US as u64), "{r:?}");
}

#[test]
fn paced_and_replayed_loops_agree() {
    let mut cfg = RunConfig::desk();
    cfg.train.lstm_epochs = 1;
    cfg.train.update_epochs = 1;
    let run = |mode| {
        let (init, mut trials) = protocols::split_reinforcement(short_reinforcement(8, 2, 3.0)).unwrap();
        protocols::run_reinforcement(&init, &mut trials, ModelKind::Lstm, &cfg, 8, mode).unwrap()
    };
    let replay = run(LoopMode::Replay);
    let paced = run(LoopMode::Realtime);
    assert_eq!(replay.trials.len(), 2);
    for (a, b) in replay.trials.iter().zip(&paced.trials) {
        assert_eq!((a.rmse_deg, a.r2, a.delay_ms, a.samples), (b.rmse_deg, b.r2, b.delay_ms, b.samples));
    }
    // Every step of every trial is predicted: history carries across trials.
    assert_eq!(replay.latency.count, 2 * 120);
    assert_eq!(paced.latency.count, 2 * 120);
}

#[test]
fn trial_directories_survive_unless_consumed() {
    let log = short_reinforcement(9, 2, 1.0);
    let dir = tempfile::tempdir().unwrap();
    DirTrials::write(&log, dir.path()).unwrap();
    let mut keep = DirTrials::open(dir.path(), 2, false);
    let mut mem = MemoryTrials::from_session(&log);
    for i in 1..=2 {
        let a: TrialData = keep.next_trial().unwrap().unwrap();
        let b = mem.next_trial().unwrap().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.index, i);
        assert!(DirTrials::trial_dir(dir.path(), i).exists());
    }
    assert!(keep.next_trial().unwrap().is_none());
    assert!(mem.next_trial().unwrap().is_none());
}
