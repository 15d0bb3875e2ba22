//! Session directories, model checkpoints and run configuration.
//!
//! A session directory holds `emg.csv`, `kin.csv`, `calib.csv`, `meta.toml`
//! and optionally `sono.raw`. The byte layout of every file is documented in
//! `docs/formats.md`.

pub mod checkpoint;
mod config;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{CalibrationMap, DofCalibration, DofVector};
use crate::protocols::SessionLog;
use crate::signal::EmgRecording;
use crate::sono::UltrasoundImage;
use crate::{DOF, SAMPLE_PERIOD_US, STEP_US};

pub use checkpoint::{checkpoint_read, checkpoint_write, CheckpointError};
pub use config::{
    config_load, config_parse, config_save, ProtocolSection, RunConfig, SignalSection, TrainSection,
};

pub const SESSION_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StorageError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("schema mismatch in {file}: {message}")]
    SchemaMismatch { file: String, message: String },
    #[error("checksum mismatch in {file} (recorded {recorded}, computed {computed})")]
    ChecksumMismatch { file: String, recorded: String, computed: String },
    #[error("config parse error: {0}")]
    ParseError(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config value out of range: {key} = {value} ({reason})")]
    OutOfRangeValue { key: String, value: String, reason: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl StorageError {
    pub(crate) fn io(path: &Path, e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::NotFound {
            StorageError::MissingFile(path.to_path_buf())
        } else {
            StorageError::Io { path: path.to_path_buf(), message: e.to_string() }
        }
    }

    fn schema(file: &str, message: impl Into<String>) -> Self {
        StorageError::SchemaMismatch { file: file.into(), message: message.into() }
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = Fnv64::default();
    h.update(bytes);
    h.finish()
}

/// Incremental FNV-1a 64.
#[derive(Debug, Clone, Copy)]
pub struct Fnv64(u64);

impl Default for Fnv64 {
    fn default() -> Self {
        Fnv64(FNV_OFFSET)
    }
}

impl Fnv64 {
    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

pub fn digest_hex(d: u64) -> String {
    format!("{d:016x}")
}

struct HashingWriter<W> {
    inner: W,
    hash: Fnv64,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hash.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

struct HashingReader<R> {
    inner: R,
    hash: Fnv64,
}

impl<R: Read> Read for HashingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.hash.update(&buf[..n]);
        Ok(n)
    }
}

const EMG_FILE: &str = "emg.csv";
const KIN_FILE: &str = "kin.csv";
const CALIB_FILE: &str = "calib.csv";
const META_FILE: &str = "meta.toml";
const SONO_FILE: &str = "sono.raw";

/// Shortest decimal that parses back to the same `f64`.
fn fmt_real(x: f64) -> String {
    format!("{x:?}")
}

fn parse_real(file: &str, s: &str) -> Result<f64, StorageError> {
    s.parse::<f64>().map_err(|_| StorageError::schema(file, format!("bad real `{s}`")))
}

fn parse_int(file: &str, s: &str) -> Result<i64, StorageError> {
    s.parse::<i64>().map_err(|_| StorageError::schema(file, format!("bad integer `{s}`")))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaFile {
    format_version: u32,
    t0_us: i64,
    channels: usize,
    samples: usize,
    steps: usize,
    trials: Vec<[usize; 2]>,
    digests: BTreeMap<String, String>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

fn csv_writer(dir: &Path, name: &str) -> Result<csv::Writer<HashingWriter<BufWriter<File>>>, StorageError> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| StorageError::io(&path, e))?;
    let w = HashingWriter { inner: BufWriter::new(file), hash: Fnv64::default() };
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w))
}

fn finish_csv(
    w: csv::Writer<HashingWriter<BufWriter<File>>>,
    dir: &Path,
    name: &str,
) -> Result<u64, StorageError> {
    let path = dir.join(name);
    let mut inner = w.into_inner().map_err(|e| StorageError::io(&path, e.into_error()))?;
    inner.flush().map_err(|e| StorageError::io(&path, e))?;
    Ok(inner.hash.finish())
}

fn csv_err(path: &Path, e: csv::Error) -> StorageError {
    StorageError::Io { path: path.to_path_buf(), message: e.to_string() }
}

fn emg_header(channels: usize) -> Vec<String> {
    std::iter::once("t_us".to_string()).chain((0..channels).map(|c| format!("ch{c:02}"))).collect()
}

fn kin_header() -> Vec<String> {
    std::iter::once("t_us".to_string())
        .chain((0..DOF).map(|d| format!("rho{d}")))
        .chain((0..DOF).map(|d| format!("phi{d}")))
        .collect()
}

const CALIB_HEADER: [&str; 5] = ["dof", "rho_min", "rho_max", "theta_min", "theta_max"];

/// Writes `log` into `dir`, creating it if needed.
pub fn session_write(log: &SessionLog, dir: &Path) -> Result<(), StorageError> {
    log.validate().map_err(|e| StorageError::schema("session", e.to_string()))?;
    std::fs::create_dir_all(dir).map_err(|e| StorageError::io(dir, e))?;
    let mut digests = BTreeMap::new();
    let emg = &log.emg;

    let path = dir.join(EMG_FILE);
    let mut w = csv_writer(dir, EMG_FILE)?;
    w.write_record(emg_header(emg.channels)).map_err(|e| csv_err(&path, e))?;
    let mut rec = Vec::with_capacity(emg.channels + 1);
    for k in 0..emg.len() {
        rec.clear();
        rec.push(emg.t_us(k).to_string());
        rec.extend(emg.sample(k).iter().map(|&x| fmt_real(x)));
        w.write_record(&rec).map_err(|e| csv_err(&path, e))?;
    }
    digests.insert(EMG_FILE.to_string(), digest_hex(finish_csv(w, dir, EMG_FILE)?));

    let path = dir.join(KIN_FILE);
    let mut w = csv_writer(dir, KIN_FILE)?;
    w.write_record(kin_header()).map_err(|e| csv_err(&path, e))?;
    for (k, (raw, norm)) in log.kin_raw.iter().zip(&log.kin_norm).enumerate() {
        rec.clear();
        rec.push(log.kin_t_us(k).to_string());
        rec.extend(raw.iter().map(|&x| fmt_real(x)));
        rec.extend(norm.phi.iter().map(|&x| fmt_real(x)));
        w.write_record(&rec).map_err(|e| csv_err(&path, e))?;
    }
    digests.insert(KIN_FILE.to_string(), digest_hex(finish_csv(w, dir, KIN_FILE)?));

    let path = dir.join(CALIB_FILE);
    let mut w = csv_writer(dir, CALIB_FILE)?;
    w.write_record(CALIB_HEADER).map_err(|e| csv_err(&path, e))?;
    for (d, c) in log.calibration.dofs().iter().enumerate() {
        let row = [d.to_string(), fmt_real(c.rho_min), fmt_real(c.rho_max), fmt_real(c.theta_min), fmt_real(c.theta_max)];
        w.write_record(&row).map_err(|e| csv_err(&path, e))?;
    }
    digests.insert(CALIB_FILE.to_string(), digest_hex(finish_csv(w, dir, CALIB_FILE)?));

    let sono_path = dir.join(SONO_FILE);
    if let Some(frames) = &log.sono {
        let bytes = encode_sono(frames)?;
        digests.insert(SONO_FILE.to_string(), digest_hex(fnv1a64(&bytes)));
        std::fs::write(&sono_path, bytes).map_err(|e| StorageError::io(&sono_path, e))?;
    } else if sono_path.exists() {
        std::fs::remove_file(&sono_path).map_err(|e| StorageError::io(&sono_path, e))?;
    }

    let meta = MetaFile {
        format_version: SESSION_FORMAT_VERSION,
        t0_us: emg.t0_us,
        channels: emg.channels,
        samples: emg.len(),
        steps: log.kin_raw.len(),
        trials: log.trials.iter().map(|&(a, b)| [a, b]).collect(),
        digests,
        meta: log.meta.clone(),
    };
    let text = toml::to_string(&meta).map_err(|e| StorageError::ParseError(e.to_string()))?;
    let path = dir.join(META_FILE);
    std::fs::write(&path, text).map_err(|e| StorageError::io(&path, e))
}

fn open_hashed(dir: &Path, name: &str) -> Result<HashingReader<BufReader<File>>, StorageError> {
    let path = dir.join(name);
    let file = File::open(&path).map_err(|e| StorageError::io(&path, e))?;
    Ok(HashingReader { inner: BufReader::new(file), hash: Fnv64::default() })
}

fn check_digest(meta: &MetaFile, name: &str, computed: u64) -> Result<(), StorageError> {
    let recorded = meta
        .digests
        .get(name)
        .ok_or_else(|| StorageError::schema(META_FILE, format!("no digest for {name}")))?;
    let computed = digest_hex(computed);
    if *recorded != computed {
        return Err(StorageError::ChecksumMismatch { file: name.into(), recorded: recorded.clone(), computed });
    }
    Ok(())
}

fn read_csv<F>(dir: &Path, name: &str, header: &[String], mut row: F) -> Result<u64, StorageError>
where
    F: FnMut(usize, &csv::StringRecord) -> Result<(), StorageError>,
{
    let path = dir.join(name);
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(open_hashed(dir, name)?);
    let got = r.headers().map_err(|e| csv_err(&path, e))?;
    if got.iter().ne(header.iter().map(String::as_str)) {
        return Err(StorageError::schema(name, format!("header {:?}", got.iter().collect::<Vec<_>>())));
    }
    let mut rec = csv::StringRecord::new();
    let mut k = 0;
    while r.read_record(&mut rec).map_err(|e| StorageError::schema(name, e.to_string()))? {
        if rec.len() != header.len() {
            return Err(StorageError::schema(name, format!("row {k} has {} fields", rec.len())));
        }
        row(k, &rec)?;
        k += 1;
    }
    let mut inner = r.into_inner();
    // Drain anything the parser did not consume so the digest covers the file.
    io::copy(&mut inner, &mut io::sink()).map_err(|e| StorageError::io(&path, e))?;
    Ok(inner.hash.finish())
}

/// Reads a session directory written by [`session_write`].
pub fn session_read(dir: &Path) -> Result<SessionLog, StorageError> {
    for name in [META_FILE, EMG_FILE, KIN_FILE, CALIB_FILE] {
        if !dir.join(name).is_file() {
            return Err(StorageError::MissingFile(dir.join(name)));
        }
    }
    let path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| StorageError::io(&path, e))?;
    let meta: MetaFile = toml::from_str(&text).map_err(|e| StorageError::schema(META_FILE, e.message()))?;
    if meta.format_version != SESSION_FORMAT_VERSION {
        return Err(StorageError::schema(META_FILE, format!("format version {}", meta.format_version)));
    }

    let mut emg = EmgRecording::new(meta.t0_us, meta.channels);
    emg.data.reserve(meta.samples * meta.channels);
    let digest = read_csv(dir, EMG_FILE, &emg_header(meta.channels), |k, rec| {
        let t = parse_int(EMG_FILE, &rec[0])?;
        if t != meta.t0_us + k as i64 * SAMPLE_PERIOD_US {
            return Err(StorageError::schema(EMG_FILE, format!("row {k} at t_us {t} off the sample grid")));
        }
        for f in rec.iter().skip(1) {
            emg.data.push(parse_real(EMG_FILE, f)?);
        }
        Ok(())
    })?;
    check_digest(&meta, EMG_FILE, digest)?;
    if emg.len() != meta.samples {
        return Err(StorageError::schema(EMG_FILE, format!("{} samples, meta says {}", emg.len(), meta.samples)));
    }

    let mut kin_raw = Vec::with_capacity(meta.steps);
    let mut kin_norm = Vec::with_capacity(meta.steps);
    let digest = read_csv(dir, KIN_FILE, &kin_header(), |k, rec| {
        let t = parse_int(KIN_FILE, &rec[0])?;
        if t != meta.t0_us + k as i64 * STEP_US {
            return Err(StorageError::schema(KIN_FILE, format!("row {k} at t_us {t} off the step grid")));
        }
        let mut raw = [0.0; DOF];
        let mut phi = [0.0; DOF];
        for d in 0..DOF {
            raw[d] = parse_real(KIN_FILE, &rec[1 + d])?;
            phi[d] = parse_real(KIN_FILE, &rec[1 + DOF + d])?;
        }
        kin_raw.push(raw);
        kin_norm.push(DofVector { phi });
        Ok(())
    })?;
    check_digest(&meta, KIN_FILE, digest)?;
    if kin_raw.len() != meta.steps {
        return Err(StorageError::schema(KIN_FILE, format!("{} steps, meta says {}", kin_raw.len(), meta.steps)));
    }

    let header: Vec<String> = CALIB_HEADER.iter().map(|s| s.to_string()).collect();
    let mut dofs = Vec::with_capacity(DOF);
    let digest = read_csv(dir, CALIB_FILE, &header, |k, rec| {
        if parse_int(CALIB_FILE, &rec[0])? != k as i64 {
            return Err(StorageError::schema(CALIB_FILE, format!("row {k} out of order")));
        }
        dofs.push(DofCalibration {
            rho_min: parse_real(CALIB_FILE, &rec[1])?,
            rho_max: parse_real(CALIB_FILE, &rec[2])?,
            theta_min: parse_real(CALIB_FILE, &rec[3])?,
            theta_max: parse_real(CALIB_FILE, &rec[4])?,
        });
        Ok(())
    })?;
    check_digest(&meta, CALIB_FILE, digest)?;
    let calibration = CalibrationMap::new(dofs).map_err(|e| StorageError::schema(CALIB_FILE, e.to_string()))?;

    let sono = if meta.digests.contains_key(SONO_FILE) {
        let path = dir.join(SONO_FILE);
        let bytes = std::fs::read(&path).map_err(|e| StorageError::io(&path, e))?;
        check_digest(&meta, SONO_FILE, fnv1a64(&bytes))?;
        Some(decode_sono(&bytes)?)
    } else {
        None
    };

    let log = SessionLog {
        emg,
        kin_raw,
        kin_norm,
        calibration,
        trials: meta.trials.iter().map(|t| (t[0], t[1])).collect(),
        meta: meta.meta,
        sono,
    };
    log.validate().map_err(|e| StorageError::schema("session", e.to_string()))?;
    Ok(log)
}

const SONO_MAGIC: &[u8; 4] = b"MYOS";

/// `MYOS`, u32 version, u32 height, u32 width, u64 count, then per frame
/// i64 t_us and `height * width` f64 pixels, all little-endian.
pub fn encode_sono(frames: &[UltrasoundImage]) -> Result<Vec<u8>, StorageError> {
    let (h, w) = frames.first().map_or((0, 0), |f| (f.height, f.width));
    let mut out = Vec::with_capacity(24 + frames.len() * (8 + h * w * 8));
    out.extend_from_slice(SONO_MAGIC);
    out.extend_from_slice(&SESSION_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(frames.len() as u64).to_le_bytes());
    for f in frames {
        if f.height != h || f.width != w || f.pixels.len() != h * w {
            return Err(StorageError::schema(SONO_FILE, "image dimensions vary within the session"));
        }
        out.extend_from_slice(&f.t_us.to_le_bytes());
        for p in &f.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_sono(bytes: &[u8]) -> Result<Vec<UltrasoundImage>, StorageError> {
    let bad = |m: &str| StorageError::schema(SONO_FILE, m);
    if bytes.len() < 24 || &bytes[..4] != SONO_MAGIC {
        return Err(bad("bad header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    if u32_at(4) != SESSION_FORMAT_VERSION {
        return Err(bad("unsupported version"));
    }
    let (h, w, n) = (u32_at(8) as usize, u32_at(12) as usize, u64_at(16) as usize);
    let frame_len = 8 + h * w * 8;
    if bytes.len() != 24 + n.checked_mul(frame_len).ok_or_else(|| bad("size overflow"))? {
        return Err(bad("length does not match header"));
    }
    Ok((0..n)
        .map(|i| {
            let o = 24 + i * frame_len;
            let t_us = u64_at(o) as i64;
            let pixels = (0..h * w).map(|p| f64::from_bits(u64_at(o + 8 + p * 8))).collect();
            UltrasoundImage { t_us, height: h, width: w, pixels }
        })
        .collect())
}
