use std::fs;

use myodec::simulator::{self, SimConfig, SyntheticSubject};
use myodec::sono::{blob_sequence, UltrasoundImage};
use myodec::storage::{self, StorageError};
use myodec::{RunConfig, SessionLog, STEP_US};

fn session(seed: u64) -> SessionLog {
    let subject = SyntheticSubject::new(seed, SimConfig::default()).unwrap();
    let mut log = simulator::gen_reinforcement_session(&subject, 4.0, 2, 1.0, seed).unwrap();
    log.meta.insert("note".into(), "a, \"quoted\" value".into());
    log
}

#[test]
fn sessions_roundtrip_exactly() {
    let mut log = session(1);
    log.emg.data[7] = -0.0;
    log.emg.data[8] = f64::MIN_POSITIVE / 3.0;
    log.emg.data[9] = 1e300;
    let dir = tempfile::tempdir().unwrap();
    storage::session_write(&log, dir.path()).unwrap();
    let back = storage::session_read(dir.path()).unwrap();
    assert_eq!(back, log);
    assert!(back.emg.data.iter().zip(&log.emg.data).all(|(a, b)| a.to_bits() == b.to_bits()));

    // Writing the same session twice produces identical bytes.
    let again = tempfile::tempdir().unwrap();
    storage::session_write(&back, again.path()).unwrap();
    for name in ["emg.csv", "kin.csv", "calib.csv", "meta.toml"] {
        assert_eq!(fs::read(dir.path().join(name)).unwrap(), fs::read(again.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn tampering_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    storage::session_write(&session(2), dir.path()).unwrap();
    let path = dir.path().join("kin.csv");
    let text = fs::read_to_string(&path).unwrap();
    let line = text.lines().nth(5).unwrap().to_string();
    let fields: Vec<&str> = line.split(',').collect();
    let edited = format!("{},{}", fields[0], fields[1..].iter().map(|_| "0.5").collect::<Vec<_>>().join(","));
    fs::write(&path, text.replacen(&line, &edited, 1)).unwrap();
    assert!(matches!(storage::session_read(dir.path()), Err(StorageError::ChecksumMismatch { .. })));
}

#[test]
fn damaged_directories_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    storage::session_write(&session(3), dir.path()).unwrap();

    let emg = dir.path().join("emg.csv");
    let text = fs::read_to_string(&emg).unwrap();
    let first_row = text.lines().nth(1).unwrap().to_string();
    fs::write(&emg, text.replacen(&first_row, &first_row.replacen("0,", "777,", 1), 1)).unwrap();
    assert!(matches!(storage::session_read(dir.path()), Err(StorageError::SchemaMismatch { .. })));
    fs::write(&emg, &text).unwrap();
    storage::session_read(dir.path()).unwrap();

    let meta = dir.path().join("meta.toml");
    let m = fs::read_to_string(&meta).unwrap();
    fs::write(&meta, format!("surprise = 1\n{m}")).unwrap();
    assert!(matches!(storage::session_read(dir.path()), Err(StorageError::SchemaMismatch { .. })));
    fs::write(&meta, &m).unwrap();

    fs::remove_file(dir.path().join("calib.csv")).unwrap();
    assert!(matches!(storage::session_read(dir.path()), Err(StorageError::MissingFile(_))));
}

#[test]
fn invalid_sessions_are_not_written() {
    let mut log = session(4);
    log.kin_norm.pop();
    let dir = tempfile::tempdir().unwrap();
    assert!(storage::session_write(&log, dir.path()).is_err());
}

#[test]
fn ultrasound_frames_roundtrip() {
    let mut log = session(5);
    log.sono = Some(blob_sequence(&log.kin_norm, 12, 20, STEP_US, 0.05, 5));
    let dir = tempfile::tempdir().unwrap();
    storage::session_write(&log, dir.path()).unwrap();
    assert_eq!(storage::session_read(dir.path()).unwrap().sono, log.sono);

    let frames = log.sono.unwrap();
    let bytes = storage::encode_sono(&frames).unwrap();
    assert_eq!(storage::decode_sono(&bytes).unwrap(), frames);
    assert!(storage::decode_sono(&bytes[..bytes.len() - 3]).is_err());
    let mixed = vec![UltrasoundImage::filled(0, 4, 4, 0.0), UltrasoundImage::filled(1, 4, 5, 0.0)];
    assert!(storage::encode_sono(&mixed).is_err());
}

#[test]
fn config_files_are_strict() {
    assert_eq!(storage::config_parse("").unwrap(), RunConfig::default());
    let desk = RunConfig::desk();
    assert_eq!(storage::config_parse(&desk.to_toml()).unwrap(), desk);
    assert_ne!(desk.digest(), RunConfig::default().digest());

    let partial = storage::config_parse("[lstm]\nhidden = 7\n").unwrap();
    assert_eq!(partial.lstm.hidden, 7);
    assert_eq!(partial.tcn, RunConfig::default().tcn);

    assert!(matches!(storage::config_parse("[lstm]\nhiden = 7\n"), Err(StorageError::UnknownKey(k)) if k == "lstm.hiden"));
    assert!(matches!(storage::config_parse("[train]\nbatch_size = 0\n"), Err(StorageError::OutOfRangeValue { .. })));
    assert!(matches!(storage::config_parse("[protocol]\ntrain_fraction = 1.0\n"), Err(StorageError::OutOfRangeValue { .. })));
    assert!(matches!(storage::config_parse("[tcn\n"), Err(StorageError::ParseError(_))));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    storage::config_save(&desk, &path).unwrap();
    assert_eq!(storage::config_load(&path).unwrap(), desk);
}
