//! Causal windowing and TD5 (Hudgins time-domain) feature extraction.
//!
//! A feature vector stamped with step time `t` is computed from the `N`
//! samples strictly before `t`, so a prediction made at `t` only ever sees
//! signal that already happened. Steps sit on the absolute 25 ms grid
//! (sample index `k` closes a step when `(k + 1) % stride == 0`), which keeps
//! the 50 ms and 200 ms windows of the different models aligned.

use std::collections::VecDeque;

use thiserror::Error;

use crate::{FEATURES_PER_CHANNEL, SAMPLE_PERIOD_US, STEP_US};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("window has {0} samples, at least 2 are required")]
    WindowTooShort(usize),
    #[error("expected {expected} channels, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("timestamp {t_us} us does not advance past {prev_us} us")]
    NonMonotoneTimestamps { prev_us: i64, t_us: i64 },
    #[error("gap of {missing} samples before t = {t_us} us exceeds the one-sample tolerance")]
    GapExceedsTolerance { t_us: i64, missing: i64 },
    #[error("need {needed} feature vectors of history, have {available}")]
    InsufficientHistory { needed: usize, available: usize },
    #[error("feature vectors at {prev_us} us and {t_us} us are not one step apart")]
    IrregularSpacing { prev_us: i64, t_us: i64 },
    #[error("standardizer used before fit")]
    NotFitted,
    #[error("standardizer needs at least 2 training vectors, got {0}")]
    EmptyTrainingSet(usize),
    #[error("feature dimension {actual} does not match {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid extractor configuration: {0}")]
    InvalidConfig(String),
}

/// One multichannel EMG sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmgFrame {
    pub t_us: i64,
    pub samples: Vec<f64>,
}

/// A contiguous block of EMG, stored sample-major (`samples x channels`).
///
/// This is the in-memory form of an `EmgFrame` stream: sample `k` has
/// timestamp `t0_us + k * SAMPLE_PERIOD_US`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmgRecording {
    pub t0_us: i64,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl EmgRecording {
    pub fn new(t0_us: i64, channels: usize) -> Self {
        Self { t0_us, channels, data: Vec::new() }
    }

    pub fn len(&self) -> usize {
        if self.channels == 0 {
            0
        } else {
            self.data.len() / self.channels
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn t_us(&self, k: usize) -> i64 {
        self.t0_us + k as i64 * SAMPLE_PERIOD_US
    }

    pub fn sample(&self, k: usize) -> &[f64] {
        &self.data[k * self.channels..(k + 1) * self.channels]
    }

    pub fn sample_mut(&mut self, k: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.data[k * c..(k + 1) * c]
    }

    pub fn push(&mut self, samples: &[f64]) {
        debug_assert_eq!(samples.len(), self.channels);
        self.data.extend_from_slice(samples);
    }

    pub fn frame(&self, k: usize) -> EmgFrame {
        EmgFrame { t_us: self.t_us(k), samples: self.sample(k).to_vec() }
    }

    pub fn frames(&self) -> impl Iterator<Item = EmgFrame> + '_ {
        (0..self.len()).map(|k| self.frame(k))
    }

    /// Samples `[start, end)` as a new recording.
    pub fn slice(&self, start: usize, end: usize) -> EmgRecording {
        EmgRecording {
            t0_us: self.t_us(start),
            channels: self.channels,
            data: self.data[start * self.channels..end * self.channels].to_vec(),
        }
    }

    /// The `len` samples ending at (and including) sample `end`.
    pub fn window(&self, end: usize, len: usize) -> EmgWindow {
        let start = end + 1 - len;
        let mut data = vec![0.0; self.channels * len];
        for (n, k) in (start..=end).enumerate() {
            for (c, &x) in self.sample(k).iter().enumerate() {
                data[c * len + n] = x;
            }
        }
        EmgWindow { end_t_us: self.t_us(end), channels: self.channels, len, data }
    }
}

/// Per-channel causal window, channel-major (`channels x len`).
#[derive(Debug, Clone, PartialEq)]
pub struct EmgWindow {
    pub end_t_us: i64,
    channels: usize,
    len: usize,
    data: Vec<f64>,
}

impl EmgWindow {
    pub fn new(end_t_us: i64, channels: usize, data: Vec<f64>) -> Result<Self, SignalError> {
        if channels == 0 || data.len() % channels != 0 {
            return Err(SignalError::ChannelMismatch { expected: channels, actual: data.len() });
        }
        let len = data.len() / channels;
        Ok(Self { end_t_us, channels, len, data })
    }

    /// Builds a window from per-channel sample vectors.
    pub fn from_channels(end_t_us: i64, channels: &[Vec<f64>]) -> Result<Self, SignalError> {
        let len = channels.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(len * channels.len());
        for ch in channels {
            if ch.len() != len {
                return Err(SignalError::ChannelMismatch { expected: len, actual: ch.len() });
            }
            data.extend_from_slice(ch);
        }
        Self::new(end_t_us, channels.len(), data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.len..(c + 1) * self.len]
    }
}

/// Dead-band thresholds for the zero-crossing and slope-sign-change counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Td5Thresholds {
    pub zc: f64,
    pub ssc: f64,
}

/// Features of one window: `values` holds `(MAV, WL, VAR, SSC, ZC)` per
/// channel, channel after channel. Stamped with the step time it serves.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub t_us: i64,
    pub values: Vec<f64>,
}

/// TD5 of a single channel.
pub fn td5_channel(x: &[f64], th: Td5Thresholds) -> [f64; FEATURES_PER_CHANNEL] {
    let n = x.len();
    let mut abs_sum = 0.0;
    let mut sum = 0.0;
    for &v in x {
        abs_sum += v.abs();
        sum += v;
    }
    let mav = abs_sum / n as f64;
    let mean = sum / n as f64;

    let mut wl = 0.0;
    for k in 1..n {
        wl += (x[k] - x[k - 1]).abs();
    }

    let mut ss = 0.0;
    for &v in x {
        let d = v - mean;
        ss += d * d;
    }
    let var = ss / (n - 1) as f64;

    let mut ssc = 0u32;
    for k in 1..n.saturating_sub(1) {
        if (x[k] - x[k - 1]) * (x[k] - x[k + 1]) > th.ssc {
            ssc += 1;
        }
    }

    let mut zc = 0u32;
    for k in 0..n - 1 {
        if x[k] * x[k + 1] < 0.0 && (x[k] - x[k + 1]).abs() > th.zc {
            zc += 1;
        }
    }

    [mav, wl, var, f64::from(ssc), f64::from(zc)]
}

/// Extracts the five Hudgins time-domain features from every channel.
///
/// The returned vector is stamped one sample period after the window's last
/// sample, i.e. with the step time the window feeds.
pub fn extract_td5(window: &EmgWindow, th: Td5Thresholds) -> Result<FeatureVector, SignalError> {
    if window.len < 2 {
        return Err(SignalError::WindowTooShort(window.len));
    }
    let mut values = Vec::with_capacity(window.channels * FEATURES_PER_CHANNEL);
    for c in 0..window.channels {
        values.extend_from_slice(&td5_channel(window.channel(c), th));
    }
    Ok(FeatureVector { t_us: window.end_t_us + SAMPLE_PERIOD_US, values })
}

/// Window length in samples for a window given in milliseconds.
pub fn window_samples(window_ms: u32) -> usize {
    (i64::from(window_ms) * 1000 / SAMPLE_PERIOD_US) as usize
}

/// Offline extraction over a whole recording, emitting at the same steps
/// as [`StreamingExtractor`].
pub fn extract_offline(
    rec: &EmgRecording,
    window_len: usize,
    stride: usize,
    th: Td5Thresholds,
) -> Result<Vec<FeatureVector>, SignalError> {
    if window_len < 2 {
        return Err(SignalError::WindowTooShort(window_len));
    }
    let k0 = sample_index(rec.t0_us);
    let mut out = Vec::new();
    for k in 0..rec.len() {
        let abs = k0 + k as i64;
        if k + 1 >= window_len && (abs + 1) % stride as i64 == 0 {
            out.push(extract_td5(&rec.window(k, window_len), th)?);
        }
    }
    Ok(out)
}

fn sample_index(t_us: i64) -> i64 {
    (t_us + SAMPLE_PERIOD_US / 2).div_euclid(SAMPLE_PERIOD_US)
}

/// Ring-buffered causal TD5 extractor fed one frame at a time.
///
/// Single missing samples are filled by holding the previous sample; larger
/// gaps are rejected.
#[derive(Debug, Clone)]
pub struct StreamingExtractor {
    channels: usize,
    window_len: usize,
    stride: usize,
    th: Td5Thresholds,
    ring: Vec<f64>,
    head: usize,
    filled: usize,
    last: Option<(i64, i64)>,
    scratch: Vec<f64>,
}

impl StreamingExtractor {
    pub fn new(
        channels: usize,
        window_len: usize,
        stride: usize,
        th: Td5Thresholds,
    ) -> Result<Self, SignalError> {
        if window_len < 2 {
            return Err(SignalError::WindowTooShort(window_len));
        }
        if stride < 2 || channels == 0 {
            return Err(SignalError::InvalidConfig(format!(
                "stride {stride} samples / {channels} channels"
            )));
        }
        Ok(Self {
            channels,
            window_len,
            stride,
            th,
            ring: vec![0.0; channels * window_len],
            head: 0,
            filled: 0,
            last: None,
            scratch: vec![0.0; channels * window_len],
        })
    }

    /// Extractor for a window given in ms and the standard 25 ms stride.
    pub fn with_window_ms(channels: usize, window_ms: u32, th: Td5Thresholds) -> Result<Self, SignalError> {
        Self::new(channels, window_samples(window_ms), (STEP_US / SAMPLE_PERIOD_US) as usize, th)
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn push(&mut self, frame: &EmgFrame) -> Result<Option<FeatureVector>, SignalError> {
        if frame.samples.len() != self.channels {
            return Err(SignalError::ChannelMismatch {
                expected: self.channels,
                actual: frame.samples.len(),
            });
        }
        let k = sample_index(frame.t_us);
        let mut out = None;
        if let Some((prev_t, prev_k)) = self.last {
            if frame.t_us <= prev_t || k <= prev_k {
                return Err(SignalError::NonMonotoneTimestamps { prev_us: prev_t, t_us: frame.t_us });
            }
            let missing = k - prev_k - 1;
            if missing > 1 {
                return Err(SignalError::GapExceedsTolerance { t_us: frame.t_us, missing });
            }
            if missing == 1 {
                let prev = self.newest().to_vec();
                out = self.insert(prev_k + 1, &prev);
            }
        }
        let emitted = self.insert(k, &frame.samples);
        self.last = Some((frame.t_us, k));
        Ok(out.or(emitted))
    }

    fn newest(&self) -> &[f64] {
        let slot = (self.head + self.window_len - 1) % self.window_len;
        &self.ring[slot * self.channels..(slot + 1) * self.channels]
    }

    fn insert(&mut self, k: i64, samples: &[f64]) -> Option<FeatureVector> {
        let c = self.channels;
        self.ring[self.head * c..(self.head + 1) * c].copy_from_slice(samples);
        self.head = (self.head + 1) % self.window_len;
        self.filled = (self.filled + 1).min(self.window_len);
        if self.filled < self.window_len || (k + 1) % self.stride as i64 != 0 {
            return None;
        }
        // Linearize oldest-first into channel-major layout.
        let n = self.window_len;
        for i in 0..n {
            let slot = (self.head + i) % n;
            for ch in 0..c {
                self.scratch[ch * n + i] = self.ring[slot * c + ch];
            }
        }
        let window = EmgWindow {
            end_t_us: k * SAMPLE_PERIOD_US,
            channels: c,
            len: n,
            data: std::mem::take(&mut self.scratch),
        };
        let fv = extract_td5(&window, self.th).expect("window length checked at construction");
        self.scratch = window.data;
        Some(fv)
    }
}

/// An ordered run of `L` feature vectors, oldest first, one step apart.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    steps: Vec<FeatureVector>,
}

impl FeatureSequence {
    pub fn new(steps: Vec<FeatureVector>) -> Result<Self, SignalError> {
        if steps.is_empty() {
            return Err(SignalError::InsufficientHistory { needed: 1, available: 0 });
        }
        let dim = steps[0].values.len();
        for pair in steps.windows(2) {
            check_spacing(&pair[0], &pair[1])?;
            if pair[1].values.len() != dim {
                return Err(SignalError::DimensionMismatch { expected: dim, actual: pair[1].values.len() });
            }
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[FeatureVector] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.steps[0].values.len()
    }

    pub fn latest(&self) -> &FeatureVector {
        self.steps.last().expect("sequence is never empty")
    }

    pub fn into_steps(self) -> Vec<FeatureVector> {
        self.steps
    }
}

fn check_spacing(a: &FeatureVector, b: &FeatureVector) -> Result<(), SignalError> {
    if ((b.t_us - a.t_us) - STEP_US).abs() > SAMPLE_PERIOD_US {
        return Err(SignalError::IrregularSpacing { prev_us: a.t_us, t_us: b.t_us });
    }
    Ok(())
}

/// The `len` most recent vectors of `history` in time order.
pub fn make_sequence(history: &[FeatureVector], len: usize) -> Result<FeatureSequence, SignalError> {
    if len == 0 || history.len() < len {
        return Err(SignalError::InsufficientHistory { needed: len, available: history.len() });
    }
    FeatureSequence::new(history[history.len() - len..].to_vec())
}

/// Bounded feature history kept by a streaming decoder.
#[derive(Debug, Clone)]
pub struct FeatureHistory {
    capacity: usize,
    buf: VecDeque<FeatureVector>,
}

impl FeatureHistory {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), buf: VecDeque::with_capacity(capacity.max(1)) }
    }

    pub fn push(&mut self, fv: FeatureVector) {
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(fv);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn make_sequence(&self, len: usize) -> Result<FeatureSequence, SignalError> {
        if len == 0 || self.buf.len() < len {
            return Err(SignalError::InsufficientHistory { needed: len, available: self.buf.len() });
        }
        FeatureSequence::new(self.buf.range(self.buf.len() - len..).cloned().collect())
    }
}

/// Below this standard deviation a feature dimension is treated as constant.
pub const MIN_STD: f64 = 1e-12;

/// Per-dimension z-scoring, fit once on training data and then frozen.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
    fitted: bool,
}

impl Standardizer {
    /// Fits mean and (population) standard deviation per dimension.
    pub fn fit<'a, I>(rows: I) -> Result<Self, SignalError>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        for row in &rows {
            if count == 0 {
                sum = vec![0.0; row.len()];
            } else if row.len() != sum.len() {
                return Err(SignalError::DimensionMismatch { expected: sum.len(), actual: row.len() });
            }
            for (s, &v) in sum.iter_mut().zip(row.iter()) {
                *s += v;
            }
            count += 1;
        }
        if count < 2 {
            return Err(SignalError::EmptyTrainingSet(count));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut ss = vec![0.0; mean.len()];
        for row in &rows {
            for ((acc, &v), &m) in ss.iter_mut().zip(row.iter()).zip(mean.iter()) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = ss.iter().map(|s| (s / n).sqrt()).collect();
        Ok(Self { mean, std, fitted: true })
    }

    pub fn fit_vectors(train: &[FeatureVector]) -> Result<Self, SignalError> {
        Self::fit(train.iter().map(|v| v.values.as_slice()))
    }

    pub fn from_parts(mean: Vec<f64>, std: Vec<f64>) -> Self {
        Self { mean, std, fitted: true }
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn apply_in_place(&self, values: &mut [f64]) -> Result<(), SignalError> {
        if !self.fitted {
            return Err(SignalError::NotFitted);
        }
        if values.len() != self.mean.len() {
            return Err(SignalError::DimensionMismatch { expected: self.mean.len(), actual: values.len() });
        }
        for ((v, &m), &s) in values.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = if s < MIN_STD { 0.0 } else { (*v - m) / s };
        }
        Ok(())
    }

    pub fn apply(&self, v: &FeatureVector) -> Result<FeatureVector, SignalError> {
        let mut values = v.values.clone();
        self.apply_in_place(&mut values)?;
        Ok(FeatureVector { t_us: v.t_us, values })
    }
}
