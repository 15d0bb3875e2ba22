//! Seeded synthetic subject: 7-DoF ground truth and 16-channel
//! amplitude-modulated-noise EMG generated jointly, with cue schedules for
//! the standard paradigm and smooth freeform exploration.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{self, CalibrationMap, DofVector, KinematicsError, DEFAULT_THETA};
use crate::protocols::SessionLog;
use crate::signal::EmgRecording;
use crate::{CHANNELS, DOF, SAMPLES_PER_STEP, STEP_US};

/// Flexor/extensor pair per DoF.
pub const MUSCLES: usize = 2 * DOF;

pub const MOVEMENT_COUNT: usize = 12;

pub const MOVEMENT_NAMES: [&str; MOVEMENT_COUNT] = [
    "wrist_flex",
    "wrist_extend",
    "wrist_adduct",
    "wrist_abduct",
    "thumb_flex",
    "index_flex",
    "middle_flex",
    "ring_flex",
    "little_flex",
    "fist",
    "pinch",
    "point",
];

const STEP_S: f64 = STEP_US as f64 / 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("trajectory step of {found} us does not match the {expected} us grid")]
    RateMismatch { expected: i64, found: i64 },
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("invalid simulator configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Tonic gain of the position term.
    pub kappa: f64,
    /// Gain of the velocity term, per unit of normalized position per second.
    pub velocity_gain: f64,
    /// Noise amplitude present with no activation.
    pub baseline: f64,
    pub muscles_per_channel: usize,
    pub active_s: f64,
    pub rest_s: f64,
    pub trials: usize,
    /// Nominal rest-to-pose transition time within a cue.
    pub move_s: f64,
    /// Nominal hold time at the pose and back at rest.
    pub hold_s: f64,
    /// Relative spread of transition and hold times per repetition.
    pub jitter: f64,
    pub freeform_cutoff_hz: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            kappa: 0.6,
            velocity_gain: 1.0,
            baseline: 0.05,
            muscles_per_channel: 4,
            active_s: 20.0,
            rest_s: 5.0,
            trials: 3,
            move_s: 0.8,
            hold_s: 1.2,
            jitter: 0.25,
            freeform_cutoff_hz: 0.8,
        }
    }
}

impl SimConfig {
    /// Returns the offending key and the reason on failure.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let checks: [(&str, bool, &str); 10] = [
            ("kappa", self.kappa >= 0.0 && self.kappa.is_finite(), "must be >= 0"),
            ("velocity_gain", self.velocity_gain >= 0.0 && self.velocity_gain.is_finite(), "must be >= 0"),
            ("baseline", self.baseline > 0.0 && self.baseline.is_finite(), "must be > 0"),
            ("muscles_per_channel", (1..=MUSCLES).contains(&self.muscles_per_channel), "must lie in 1..=14"),
            ("active_s", self.active_s > 0.0, "must be > 0"),
            ("rest_s", self.rest_s >= 0.0, "must be >= 0"),
            ("trials", self.trials >= 1, "must be >= 1"),
            ("move_s", self.move_s > 0.0 && self.hold_s >= 0.0, "must be > 0"),
            ("jitter", (0.0..1.0).contains(&self.jitter), "must lie in [0, 1)"),
            ("freeform_cutoff_hz", self.freeform_cutoff_hz > 0.0 && self.freeform_cutoff_hz < 20.0, "must lie in (0, 20)"),
        ];
        for (key, ok, reason) in checks {
            if !ok {
                return Err((key.to_string(), reason.to_string()));
            }
        }
        Ok(())
    }
}

/// A stand-in subject: muscle-to-electrode mixing plus glove ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSubject {
    pub seed: u64,
    pub config: SimConfig,
    /// `CHANNELS x MUSCLES`, row-major, non-negative.
    pub mixing: Vec<f64>,
    pub rho_min: [f64; DOF],
    pub rho_span: [f64; DOF],
    pub theta: [(f64, f64); DOF],
}

impl SyntheticSubject {
    pub fn new(seed: u64, config: SimConfig) -> Result<Self, SimError> {
        config.validate().map_err(|(k, r)| SimError::InvalidConfig(format!("{k} {r}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_5B7EC7);
        let mixing = loop {
            let w = draw_mixing(&mut rng, config.muscles_per_channel);
            if observable(&w) {
                break w;
            }
        };
        let rho_min = std::array::from_fn(|_| rng.random_range(-200.0..200.0));
        let rho_span = std::array::from_fn(|_| rng.random_range(600.0..1400.0));
        Ok(Self { seed, config, mixing, rho_min, rho_span, theta: DEFAULT_THETA })
    }

    pub fn weight(&self, channel: usize, muscle: usize) -> f64 {
        self.mixing[channel * MUSCLES + muscle]
    }

    /// Raw glove reading for a normalized pose.
    pub fn glove(&self, pose: &DofVector) -> [f64; DOF] {
        std::array::from_fn(|d| self.rho_min[d] + pose.phi[d] * self.rho_span[d])
    }

    /// Raw glove stream of the 15 s range-of-motion sweep.
    pub fn calibration_sweep(&self) -> Vec<[f64; DOF]> {
        let steps = (kinematics::CALIBRATION_SECONDS / STEP_S).round() as usize;
        (0..steps)
            .map(|k| {
                let phi = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * k as f64 / steps as f64).cos();
                self.glove(&DofVector::splat(phi))
            })
            .collect()
    }

    pub fn calibration(&self) -> Result<CalibrationMap, SimError> {
        Ok(kinematics::calibrate(&self.calibration_sweep(), kinematics::CALIBRATION_SECONDS, STEP_S, &self.theta)?)
    }

    /// Muscle activations at every step of a trajectory sampled on the
    /// 25 ms grid. Velocity is the backward difference.
    pub fn activations(&self, phi: &[DofVector]) -> Vec<[f64; MUSCLES]> {
        let (kappa, gv) = (self.config.kappa, self.config.velocity_gain);
        phi.iter()
            .enumerate()
            .map(|(k, p)| {
                let prev = if k == 0 { p } else { &phi[k - 1] };
                let mut a = [0.0; MUSCLES];
                for j in 0..DOF {
                    let v = (p.phi[j] - prev.phi[j]) / STEP_S;
                    a[2 * j] = kappa * p.phi[j] + v.max(0.0) * gv;
                    a[2 * j + 1] = kappa * (1.0 - p.phi[j]) + (-v).max(0.0) * gv;
                }
                a
            })
            .collect()
    }

    /// Per-channel envelope `sum_m W[c, m] a_m + a0` for one activation vector.
    pub fn envelope(&self, a: &[f64; MUSCLES]) -> [f64; CHANNELS] {
        std::array::from_fn(|c| {
            self.mixing[c * MUSCLES..(c + 1) * MUSCLES].iter().zip(a).map(|(w, x)| w * x).sum::<f64>()
                + self.config.baseline
        })
    }
}

fn draw_mixing(rng: &mut ChaCha8Rng, keep: usize) -> Vec<f64> {
    let mut w = vec![0.0; CHANNELS * MUSCLES];
    for c in 0..CHANNELS {
        let row = &mut w[c * MUSCLES..(c + 1) * MUSCLES];
        for x in row.iter_mut() {
            *x = rng.random::<f64>();
        }
        let mut order: Vec<usize> = (0..MUSCLES).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        for &m in &order[keep..] {
            row[m] = 0.0;
        }
    }
    w
}

/// Every muscle reaches at least one channel with weight above a tenth of
/// the largest weight.
pub fn observable(w: &[f64]) -> bool {
    let max = w.iter().copied().fold(0.0, f64::max);
    (0..MUSCLES).all(|m| (0..CHANNELS).any(|c| w[c * MUSCLES + m] > 0.1 * max))
}

/// EMG for a trajectory on the 25 ms grid: activations are linearly
/// interpolated to 2 kHz and modulate seeded white Gaussian noise.
pub fn emg_synthesize(
    subject: &SyntheticSubject,
    phi: &[DofVector],
    step_us: i64,
    t0_us: i64,
    seed: u64,
) -> Result<EmgRecording, SimError> {
    if step_us != STEP_US {
        return Err(SimError::RateMismatch { expected: STEP_US, found: step_us });
    }
    if phi.is_empty() {
        return Err(SimError::EmptyTrajectory);
    }
    let env: Vec<[f64; CHANNELS]> = subject.activations(phi).iter().map(|a| subject.envelope(a)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = phi.len() * SAMPLES_PER_STEP;
    let mut rec = EmgRecording::new(t0_us, CHANNELS);
    rec.data.reserve(n * CHANNELS);
    let last = env.len() - 1;
    for s in 0..n {
        let k = s / SAMPLES_PER_STEP;
        let frac = (s % SAMPLES_PER_STEP) as f64 / SAMPLES_PER_STEP as f64;
        let (e0, e1) = (&env[k], &env[(k + 1).min(last)]);
        for c in 0..CHANNELS {
            let amp = e0[c] + (e1[c] - e0[c]) * frac;
            let z: f64 = rng.sample(StandardNormal);
            rec.data.push(amp * z);
        }
    }
    Ok(rec)
}

pub fn rest_pose() -> DofVector {
    DofVector::new([0.5, 0.5, 0.2, 0.2, 0.2, 0.2, 0.2])
}

/// The twelve cued poses, in [`MOVEMENT_NAMES`] order.
pub fn define_standard_movements() -> [DofVector; MOVEMENT_COUNT] {
    let rest = rest_pose();
    let with = |set: &[(usize, f64)]| {
        let mut p = rest;
        for &(d, v) in set {
            p.phi[d] = v;
        }
        p
    };
    [
        with(&[(0, 0.9)]),
        with(&[(0, 0.1)]),
        with(&[(1, 0.9)]),
        with(&[(1, 0.1)]),
        with(&[(2, 0.9)]),
        with(&[(3, 0.9)]),
        with(&[(4, 0.9)]),
        with(&[(5, 0.9)]),
        with(&[(6, 0.9)]),
        with(&[(2, 0.9), (3, 0.9), (4, 0.9), (5, 0.9), (6, 0.9)]),
        with(&[(2, 0.8), (3, 0.8)]),
        with(&[(2, 0.9), (3, 0.1), (4, 0.9), (5, 0.9), (6, 0.9)]),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CueEntry {
    /// Index into [`define_standard_movements`]; `None` is rest.
    pub movement: Option<usize>,
    pub start_s: f64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueSchedule {
    pub entries: Vec<CueEntry>,
}

impl CueSchedule {
    /// Every trial cues each movement once in shuffled order, each active
    /// cue followed by a rest cue.
    pub fn standard(trials: usize, active_s: f64, rest_s: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut entries = Vec::with_capacity(trials * MOVEMENT_COUNT * 2);
        let mut t = 0.0;
        for _ in 0..trials {
            let mut order: Vec<usize> = (0..MOVEMENT_COUNT).collect();
            order.shuffle(rng);
            for m in order {
                entries.push(CueEntry { movement: Some(m), start_s: t, duration_s: active_s });
                t += active_s;
                if rest_s > 0.0 {
                    entries.push(CueEntry { movement: None, start_s: t, duration_s: rest_s });
                    t += rest_s;
                }
            }
        }
        Self { entries }
    }

    pub fn duration_s(&self) -> f64 {
        self.entries.last().map_or(0.0, |e| e.start_s + e.duration_s)
    }
}

fn min_jerk(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
}

fn steps_of(seconds: f64) -> usize {
    (seconds / STEP_S).round() as usize
}

/// Trajectory for one active cue: repeated rest -> pose -> rest cycles with
/// minimum-jerk transitions, always ending at rest.
fn cue_trajectory(pose: &DofVector, steps: usize, cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<DofVector> {
    let rest = rest_pose();
    let mut out = Vec::with_capacity(steps);
    let lerp = |a: &DofVector, b: &DofVector, s: f64| {
        DofVector::new(std::array::from_fn(|d| a.phi[d] + (b.phi[d] - a.phi[d]) * min_jerk(s)))
    };
    let mut jit = |base: f64| (base * (1.0 + cfg.jitter * rng.random_range(-1.0..=1.0))).max(STEP_S);
    while out.len() < steps {
        let go = steps_of(jit(cfg.move_s)).max(1);
        let hold = steps_of(jit(cfg.hold_s));
        let back = steps_of(jit(cfg.move_s)).max(1);
        let pause = steps_of(jit(cfg.hold_s));
        if out.len() + go + hold + back > steps {
            break;
        }
        out.extend((1..=go).map(|k| lerp(&rest, pose, k as f64 / go as f64)));
        out.extend(std::iter::repeat(*pose).take(hold));
        out.extend((1..=back).map(|k| lerp(pose, &rest, k as f64 / back as f64)));
        out.extend(std::iter::repeat(rest).take(pause.min(steps - out.len())));
    }
    out.resize(steps, rest);
    out
}

/// Assembles a session: glove readings, calibrated positions and EMG.
pub fn session_from_trajectory(
    subject: &SyntheticSubject,
    phi: &[DofVector],
    trials: Vec<(usize, usize)>,
    seed: u64,
    protocol: &str,
) -> Result<SessionLog, SimError> {
    let calibration = subject.calibration()?;
    let kin_raw: Vec<[f64; DOF]> = phi.iter().map(|p| subject.glove(p)).collect();
    let kin_norm = kin_raw.iter().map(|r| calibration.normalize_all(r)).collect::<Result<Vec<_>, _>>()?;
    let emg = emg_synthesize(subject, phi, STEP_US, 0, seed ^ 0xE3C0_0000_0000_0001)?;
    let mut meta = BTreeMap::new();
    meta.insert("protocol".to_string(), protocol.to_string());
    meta.insert("subject_seed".to_string(), subject.seed.to_string());
    meta.insert("session_seed".to_string(), seed.to_string());
    meta.insert("calibration_s".to_string(), kinematics::CALIBRATION_SECONDS.to_string());
    Ok(SessionLog { emg, kin_raw, kin_norm, calibration, trials, meta, sono: None })
}

/// Standard cued paradigm trajectory and its schedule.
pub fn standard_trajectory(subject: &SyntheticSubject, trials: usize, seed: u64) -> (CueSchedule, Vec<DofVector>) {
    let cfg = &subject.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schedule = CueSchedule::standard(trials, cfg.active_s, cfg.rest_s, &mut rng);
    let poses = define_standard_movements();
    let mut phi = Vec::with_capacity(steps_of(schedule.duration_s()));
    for e in &schedule.entries {
        let steps = steps_of(e.duration_s);
        match e.movement {
            Some(m) => phi.extend(cue_trajectory(&poses[m], steps, cfg, &mut rng)),
            None => phi.extend(std::iter::repeat(rest_pose()).take(steps)),
        }
    }
    (schedule, phi)
}

pub fn gen_standard_session(subject: &SyntheticSubject, trials: usize, seed: u64) -> Result<SessionLog, SimError> {
    let (_, phi) = standard_trajectory(subject, trials, seed);
    let per_trial = phi.len() / trials.max(1);
    let bounds = (0..trials).map(|t| (t * per_trial, (t + 1) * per_trial)).collect();
    session_from_trajectory(subject, &phi, bounds, seed, "standard")
}

#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
    z: [f64; 2],
}

impl Biquad {
    fn lowpass(fc: f64, fs: f64, q: f64) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * fc / fs;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * q);
        let a0 = 1.0 + alpha;
        let b0 = (1.0 - cos) / 2.0 / a0;
        Self { b: [b0, 2.0 * b0, b0], a: [-2.0 * cos / a0, (1.0 - alpha) / a0], z: [0.0; 2] }
    }

    /// Transposed direct form II.
    fn run(&mut self, x: f64) -> f64 {
        let y = self.b[0] * x + self.z[0];
        self.z[0] = self.b[1] * x - self.a[0] * y + self.z[1];
        self.z[1] = self.b[2] * x - self.a[1] * y;
        y
    }
}

/// Fourth-order Butterworth low-pass as two cascaded biquads.
pub fn butterworth4(x: &[f64], fc: f64, fs: f64) -> Vec<f64> {
    let qs = [
        1.0 / (2.0 * (std::f64::consts::PI / 8.0).cos()),
        1.0 / (2.0 * (3.0 * std::f64::consts::PI / 8.0).cos()),
    ];
    let mut stages = qs.map(|q| Biquad::lowpass(fc, fs, q));
    x.iter().map(|&v| stages.iter_mut().fold(v, |acc, s| s.run(acc))).collect()
}

const FREEFORM_WARMUP_S: f64 = 30.0;

/// Low-pass-filtered seeded noise per DoF, rescaled to `[0, 1]`.
pub fn freeform_trajectory(cutoff_hz: f64, duration_s: f64, seed: u64) -> Vec<DofVector> {
    let n = steps_of(duration_s).max(1);
    let warm = steps_of(FREEFORM_WARMUP_S);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols = Vec::with_capacity(DOF);
    for _ in 0..DOF {
        let noise: Vec<f64> = (0..n + warm).map(|_| rng.sample(StandardNormal)).collect();
        let y = butterworth4(&noise, cutoff_hz, 1.0 / STEP_S);
        let y = &y[warm..];
        let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        cols.push(y.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect::<Vec<f64>>());
    }
    (0..n).map(|k| DofVector::new(std::array::from_fn(|d| cols[d][k]))).collect()
}

pub fn gen_freeform_session(subject: &SyntheticSubject, duration_s: f64, seed: u64) -> Result<SessionLog, SimError> {
    if duration_s <= 0.0 {
        return Err(SimError::InvalidConfig(format!("duration {duration_s} s")));
    }
    let phi = freeform_trajectory(subject.config.freeform_cutoff_hz, duration_s, seed);
    let n = phi.len();
    session_from_trajectory(subject, &phi, vec![(0, n)], seed, "freeform")
}

/// Freeform session split into an initial segment and consecutive trials.
pub fn gen_reinforcement_session(
    subject: &SyntheticSubject,
    init_s: f64,
    trials: usize,
    trial_s: f64,
    seed: u64,
) -> Result<SessionLog, SimError> {
    let (init, per) = (steps_of(init_s), steps_of(trial_s));
    let total = init + trials * per;
    let phi = freeform_trajectory(subject.config.freeform_cutoff_hz, total as f64 * STEP_S, seed);
    let mut bounds = vec![(0, init)];
    bounds.extend((0..trials).map(|t| (init + t * per, init + (t + 1) * per)));
    session_from_trajectory(subject, &phi, bounds, seed, "reinforcement")
}
