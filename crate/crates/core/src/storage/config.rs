use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{digest_hex, fnv1a64, StorageError};
use crate::models::{LstmConfig, SvrConfig, TcnConfig};
use crate::simulator::SimConfig;
use crate::sono::SonoConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalSection {
    pub step_ms: u32,
    pub zc_threshold: f64,
    pub ssc_threshold: f64,
}

impl Default for SignalSection {
    fn default() -> Self {
        Self { step_ms: 25, zc_threshold: 0.0, ssc_threshold: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub tcn_epochs: usize,
    pub lstm_epochs: usize,
    pub update_epochs: usize,
    /// Keep every n-th training pair.
    pub pair_stride: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { batch_size: 24, learning_rate: 1e-3, seed: 0, tcn_epochs: 15, lstm_epochs: 40, update_epochs: 5, pair_stride: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSection {
    pub init_s: f64,
    pub reinforce_trials: usize,
    pub trial_s: f64,
    pub freeform_s: f64,
    pub train_fraction: f64,
    pub max_lag: usize,
    pub strict_realtime: bool,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        Self {
            init_s: 60.0,
            reinforce_trials: 15,
            trial_s: 30.0,
            freeform_s: 300.0,
            train_fraction: 0.6,
            max_lag: 40,
            strict_realtime: false,
        }
    }
}

/// Every tunable of a run. An empty file gives the published settings.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub signal: SignalSection,
    pub train: TrainSection,
    pub tcn: TcnConfig,
    pub lstm: LstmConfig,
    pub svr: SvrConfig,
    pub simulator: SimConfig,
    pub protocol: ProtocolSection,
    pub sono: SonoConfig,
}

impl RunConfig {
    /// Reduced model widths and pair counts for single-core machines; the
    /// layer structure, sequence lengths and windows are unchanged.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.tcn.filters = 16;
        c.lstm.hidden = 16;
        c.train.pair_stride = 4;
        c.train.tcn_epochs = 6;
        c.train.lstm_epochs = 8;
        c.svr.max_train = 1500;
        c
    }

    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "full" | "default" => Some(Self::default()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// FNV-1a digest of the canonical TOML form.
    pub fn digest(&self) -> String {
        digest_hex(fnv1a64(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), StorageError> {
        fn range(key: &str, value: impl ToString, ok: bool, reason: &str) -> Result<(), StorageError> {
            if ok {
                Ok(())
            } else {
                Err(StorageError::OutOfRangeValue { key: key.into(), value: value.to_string(), reason: reason.into() })
            }
        }
        let s = &self.signal;
        range("signal.step_ms", s.step_ms, s.step_ms == 25, "the engine runs on a 25 ms grid")?;
        range("signal.zc_threshold", s.zc_threshold, s.zc_threshold >= 0.0, "must be >= 0")?;
        range("signal.ssc_threshold", s.ssc_threshold, s.ssc_threshold >= 0.0, "must be >= 0")?;
        let t = &self.train;
        range("train.batch_size", t.batch_size, t.batch_size >= 1, "must be >= 1")?;
        range("train.learning_rate", t.learning_rate, t.learning_rate > 0.0 && t.learning_rate.is_finite(), "must be > 0")?;
        range("train.tcn_epochs", t.tcn_epochs, t.tcn_epochs >= 1, "must be >= 1")?;
        range("train.lstm_epochs", t.lstm_epochs, t.lstm_epochs >= 1, "must be >= 1")?;
        range("train.pair_stride", t.pair_stride, t.pair_stride >= 1, "must be >= 1")?;
        for (key, ms) in [("tcn.window_ms", self.tcn.window_ms), ("lstm.window_ms", self.lstm.window_ms), ("svr.window_ms", self.svr.window_ms)] {
            range(key, ms, ms >= 1, "must be >= 1 ms")?;
        }
        self.tcn.validate().map_err(|e| StorageError::OutOfRangeValue {
            key: "tcn".into(),
            value: format!("{:?}", self.tcn),
            reason: e.to_string(),
        })?;
        range("tcn.filters", self.tcn.filters, self.tcn.filters >= 1, "must be >= 1")?;
        range("lstm.hidden", self.lstm.hidden, self.lstm.hidden >= 1, "must be >= 1")?;
        range("lstm.seq_len", self.lstm.seq_len, self.lstm.seq_len >= 1, "must be >= 1")?;
        self.svr.validate().map_err(|e| StorageError::OutOfRangeValue {
            key: "svr".into(),
            value: format!("{:?}", self.svr),
            reason: e.to_string(),
        })?;
        self.simulator.validate().map_err(|(key, reason)| StorageError::OutOfRangeValue {
            key: format!("simulator.{key}"),
            value: String::new(),
            reason,
        })?;
        let p = &self.protocol;
        range("protocol.init_s", p.init_s, p.init_s > 0.0, "must be > 0")?;
        range("protocol.trial_s", p.trial_s, p.trial_s > 0.0, "must be > 0")?;
        range("protocol.reinforce_trials", p.reinforce_trials, p.reinforce_trials >= 1, "must be >= 1")?;
        range("protocol.freeform_s", p.freeform_s, p.freeform_s > 0.0, "must be > 0")?;
        range("protocol.train_fraction", p.train_fraction, p.train_fraction > 0.0 && p.train_fraction < 1.0, "must lie in (0, 1)")?;
        range("protocol.max_lag", p.max_lag, p.max_lag >= 1, "must be >= 1")?;
        let so = &self.sono;
        range("sono.factor", so.factor, so.factor >= 1, "must be >= 1")?;
        range("sono.sigma", so.sigma, so.sigma > 0.0, "must be > 0")?;
        range("sono.keep_fraction", so.keep_fraction, so.keep_fraction > 0.0 && so.keep_fraction <= 1.0, "must lie in (0, 1]")?;
        Ok(())
    }
}

/// First key of `given` absent from `known`, as a dotted path.
fn unknown_key(given: &toml::Table, known: &toml::Table, prefix: &str) -> Option<String> {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, known.get(k)) {
            (_, None) => return Some(path),
            (toml::Value::Table(g), Some(toml::Value::Table(d))) => {
                if let Some(p) = unknown_key(g, d, &path) {
                    return Some(p);
                }
            }
            _ => {}
        }
    }
    None
}

pub fn config_parse(text: &str) -> Result<RunConfig, StorageError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| StorageError::ParseError(e.message().to_string()))?;
    let known: toml::Table = RunConfig::default().to_toml().parse().expect("defaults parse");
    if let Some(key) = unknown_key(&table, &known, "") {
        return Err(StorageError::UnknownKey(key));
    }
    let cfg: RunConfig = toml::from_str(text).map_err(|e| StorageError::ParseError(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn config_load(path: &Path) -> Result<RunConfig, StorageError> {
    let text = std::fs::read_to_string(path).map_err(|e| StorageError::io(path, e))?;
    config_parse(&text)
}

pub fn config_save(cfg: &RunConfig, path: &Path) -> Result<(), StorageError> {
    std::fs::write(path, cfg.to_toml()).map_err(|e| StorageError::io(path, e))
}
