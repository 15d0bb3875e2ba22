use std::fmt::Write as _;
use std::path::Path;

use myodec::kinematics::{self, CALIBRATION_SECONDS};
use myodec::models::{self, ModelKind};
use myodec::protocols::{self, Analysis, LoopMode, SessionLog};
use myodec::simulator::{self, SyntheticSubject};
use myodec::sono::{self, SonoPipeline};
use myodec::storage::{self, config_parse, RunConfig};
use myodec::{DOF, STEP_US};
use rayon::prelude::*;

use crate::report::{self, ModelSummary, RunReport, SeedResult, Trace};
use crate::{data_err, CliError, Common, SimProtocol};

/// Side length of the synthetic ultrasound frames.
const SONO_SIDE: usize = 32;
const SONO_NOISE: f64 = 0.02;
const SONO_DEFAULT_S: f64 = 60.0;

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let base = RunConfig::profile(&common.profile)
        .ok_or_else(|| CliError::Usage(format!("unknown profile `{}` (expected full or desk)", common.profile)))?;
    let Some(path) = &common.config else {
        return Ok(base);
    };
    let text = std::fs::read_to_string(path).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    // Full validation of the user's file on its own first: typos and bad
    // values are reported against what the user wrote.
    config_parse(&text)?;
    let mut merged: toml::Table = base.to_toml().parse().map_err(data_err)?;
    let user: toml::Table = text.parse().map_err(data_err)?;
    merge(&mut merged, user);
    Ok(config_parse(&toml::to_string(&merged).map_err(data_err)?)?)
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_kind(s: &str) -> Result<ModelKind, CliError> {
    s.trim().parse::<ModelKind>().map_err(|_| CliError::Usage(format!("unknown model `{s}` (expected tcn, lstm or svr)")))
}

fn parse_kinds(s: &str) -> Result<Vec<ModelKind>, CliError> {
    let mut out = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let k = parse_kind(part)?;
        if !out.contains(&k) {
            out.push(k);
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage("no models given".into()));
    }
    Ok(out)
}

/// `a..b` (inclusive) or a comma list.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Usage(format!("bad seed list `{s}` (expected a..b or a,b,c)"));
    let seeds: Vec<u64> = if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if b < a {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn create_out(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| data_err(format!("{}: {e}", out.display())))
}

fn read_session(dir: &Path) -> Result<SessionLog, CliError> {
    Ok(storage::session_read(dir)?)
}

fn new_report(command: &str, common: &Common, cfg: &RunConfig) -> RunReport {
    RunReport {
        command: command.into(),
        analysis: None,
        session: None,
        seeds: Vec::new(),
        train_seed: 0,
        profile: common.profile.clone(),
        config_digest: cfg.digest(),
        config: cfg.to_toml(),
        results: Vec::new(),
        comparisons: Vec::new(),
        reinforcement: Vec::new(),
        latency: None,
        traces: Vec::new(),
    }
}

fn finish(report: &RunReport, out: &Path) -> Result<(), CliError> {
    report::write_report(report, out)?;
    print!("{}", report.table());
    Ok(())
}

fn synth_session(protocol: SimProtocol, cfg: &RunConfig, seed: u64, duration_s: Option<f64>) -> Result<SessionLog, CliError> {
    let subject = SyntheticSubject::new(seed, cfg.simulator.clone())?;
    let log = match protocol {
        SimProtocol::Standard => simulator::gen_standard_session(&subject, cfg.simulator.trials, seed)?,
        SimProtocol::Freeform => {
            simulator::gen_freeform_session(&subject, duration_s.unwrap_or(cfg.protocol.freeform_s), seed)?
        }
        SimProtocol::Reinforcement => simulator::gen_reinforcement_session(
            &subject,
            cfg.protocol.init_s,
            cfg.protocol.reinforce_trials,
            cfg.protocol.trial_s,
            seed,
        )?,
        SimProtocol::Sono => {
            let mut log = simulator::gen_freeform_session(&subject, duration_s.unwrap_or(SONO_DEFAULT_S), seed)?;
            let mut frames = sono::blob_sequence(&log.kin_norm, SONO_SIDE, SONO_SIDE, STEP_US, SONO_NOISE, seed ^ 0x50_4e4f);
            for f in &mut frames {
                f.t_us += log.emg.t0_us;
            }
            log.meta.insert("protocol".into(), "sono".into());
            log.sono = Some(frames);
            log
        }
    };
    Ok(log)
}

pub fn simulate(common: &Common, protocol: SimProtocol, seed: u64, duration_s: Option<f64>, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    if let Some(d) = duration_s {
        if !(d > 0.0) || matches!(protocol, SimProtocol::Standard | SimProtocol::Reinforcement) {
            return Err(CliError::Usage("--duration-s applies to freeform and sono sessions and must be > 0".into()));
        }
    }
    let mut log = synth_session(protocol, &cfg, seed, duration_s)?;
    log.meta.insert("config_digest".into(), cfg.digest());
    create_out(out)?;
    storage::session_write(&log, out)?;
    println!(
        "wrote {} session: {} steps ({:.1} s), {} trials -> {}",
        log.meta.get("protocol").map(String::as_str).unwrap_or("?"),
        log.steps(),
        log.duration_s(),
        log.trials.len(),
        out.display()
    );
    Ok(())
}

pub fn calibrate(common: &Common, session: &Path, out: &Path) -> Result<(), CliError> {
    let _cfg = load_config(common)?;
    let log = read_session(session)?;
    let theta: [(f64, f64); DOF] = std::array::from_fn(|d| {
        let c = &log.calibration.dofs()[d];
        (c.theta_min, c.theta_max)
    });
    let map = kinematics::calibrate(&log.kin_raw, CALIBRATION_SECONDS, STEP_US as f64 / 1e6, &theta)?;
    let mut s = String::from("dof,rho_min,rho_max,theta_min,theta_max\n");
    for (d, c) in map.dofs().iter().enumerate() {
        let _ = writeln!(s, "{},{:?},{:?},{:?},{:?}", kinematics::DOF_NAMES[d], c.rho_min, c.rho_max, c.theta_min, c.theta_max);
    }
    create_out(out)?;
    report::write(&out.join("calibration.csv"), &s)?;
    print!("{s}");
    if map != log.calibration {
        eprintln!("note: recomputed calibration differs from the one stored in the session");
    }
    Ok(())
}

pub fn train(common: &Common, session: &Path, model: &str, seed: u64, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let kind = parse_kind(model)?;
    let log = read_session(session)?;
    let (analysis, train, test) = protocols::offline_split(&log, &cfg)?;
    let mut m = protocols::build_model(kind, &cfg, seed)?;
    let run = protocols::evaluate_split(&log, m.as_mut(), &train, &test, &cfg, &protocols::train_options(kind, &cfg, seed))?;
    create_out(out)?;
    storage::checkpoint_write(&m.checkpoint_save(), &out.join("model.ckpt"))?;
    let mut report = new_report("train", common, &cfg);
    report.analysis = Some(analysis);
    report.session = Some(session.display().to_string());
    report.seeds = vec![seed];
    report.train_seed = seed;
    report.results.push(SeedResult {
        seed,
        models: vec![ModelSummary {
            kind,
            metrics: run.report.clone(),
            train: Some(run.train.clone()),
            train_pairs: run.train_pairs,
            train_s: run.train_s,
        }],
        mean_predictor: None,
    });
    report.traces.push(Trace { seed, kind, t0_us: log.emg.t0_us, steps: run.steps, pred: run.pred, truth: run.truth });
    finish(&report, out)?;
    println!("checkpoint -> {}", out.join("model.ckpt").display());
    Ok(())
}

/// Trains and tests every model on one session's offline split.
fn offline(log: &SessionLog, kinds: &[ModelKind], cfg: &RunConfig, seed: u64) -> Result<(Analysis, SeedResult, Vec<Trace>), CliError> {
    let (analysis, train, test) = protocols::offline_split(log, cfg)?;
    let mut models = Vec::new();
    let mut traces = Vec::new();
    for &kind in kinds {
        let mut m = protocols::build_model(kind, cfg, seed)?;
        let run = protocols::evaluate_split(log, m.as_mut(), &train, &test, cfg, &protocols::train_options(kind, cfg, seed))?;
        models.push(ModelSummary { kind, metrics: run.report, train: Some(run.train), train_pairs: run.train_pairs, train_s: run.train_s });
        traces.push(Trace { seed, kind, t0_us: log.emg.t0_us, steps: run.steps, pred: run.pred, truth: run.truth });
    }
    let mean_predictor = Some(protocols::mean_predictor(log, &train, &test, cfg.protocol.max_lag)?);
    Ok((analysis, SeedResult { seed, models, mean_predictor }, traces))
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    common: &Common,
    session: Option<&Path>,
    seeds: Option<&str>,
    protocol: SimProtocol,
    models: &str,
    checkpoint: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let mut report = new_report("eval", common, &cfg);
    report.train_seed = seed;
    match (session, seeds) {
        (Some(dir), None) => {
            let log = read_session(dir)?;
            report.session = Some(dir.display().to_string());
            report.seeds = vec![seed];
            if let Some(ckpt) = checkpoint {
                let model = models::checkpoint_load(&storage::checkpoint_read(ckpt)?)?;
                let (analysis, _, test) = protocols::offline_split(&log, &cfg)?;
                let t = protocols::evaluate_trained(&log, model.as_ref(), &test, &cfg)?;
                report.analysis = Some(analysis);
                report.results.push(SeedResult {
                    seed,
                    models: vec![ModelSummary { kind: model.kind(), metrics: t.report, train: None, train_pairs: 0, train_s: 0.0 }],
                    mean_predictor: None,
                });
                report.traces.push(Trace { seed, kind: model.kind(), t0_us: log.emg.t0_us, steps: t.steps, pred: t.pred, truth: t.truth });
            } else {
                let kinds = parse_kinds(models)?;
                let (analysis, result, traces) = offline(&log, &kinds, &cfg, seed)?;
                report.analysis = Some(analysis);
                report.results.push(result);
                report.traces = traces;
            }
        }
        (None, Some(list)) => {
            if !matches!(protocol, SimProtocol::Standard | SimProtocol::Freeform) {
                return Err(CliError::Usage("eval sweeps run the standard or freeform protocol".into()));
            }
            let kinds = parse_kinds(models)?;
            let seeds = parse_seeds(list)?;
            let runs: Vec<Result<(Analysis, SeedResult, Vec<Trace>), CliError>> = seeds
                .par_iter()
                .map(|&s| {
                    let log = synth_session(protocol, &cfg, s, None)?;
                    offline(&log, &kinds, &cfg, s)
                })
                .collect();
            for (i, r) in runs.into_iter().enumerate() {
                let (analysis, result, traces) = r?;
                report.analysis = Some(analysis);
                report.results.push(result);
                if i == 0 {
                    report.traces = traces;
                }
            }
            report.seeds = seeds;
            report.compare();
        }
        (None, None) => return Err(CliError::Usage("eval needs --session or --seeds".into())),
        (Some(_), Some(_)) => unreachable!("clap rejects --session with --seeds"),
    }
    create_out(out)?;
    finish(&report, out)
}

pub fn reinforce(
    common: &Common,
    session: Option<&Path>,
    seeds: Option<&str>,
    model: &str,
    realtime: bool,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let mut cfg = load_config(common)?;
    let kind = parse_kind(model)?;
    if !kind.is_sequential() {
        return Err(CliError::Data(protocols::ProtocolError::UnsupportedModel(kind).to_string()));
    }
    let mode = if realtime { LoopMode::Realtime } else { LoopMode::Replay };
    cfg.protocol.strict_realtime |= realtime;
    let mut report = new_report("reinforce", common, &cfg);
    report.train_seed = seed;
    let run_one = |log: SessionLog, s: u64| -> Result<protocols::ReinforcementResult, CliError> {
        let (init, mut trials) = protocols::split_reinforcement(log)?;
        Ok(protocols::run_reinforcement(&init, &mut trials, kind, &cfg, s, mode)?)
    };
    match (session, seeds) {
        (Some(dir), None) => {
            report.session = Some(dir.display().to_string());
            report.seeds = vec![seed];
            report.reinforcement.push(run_one(read_session(dir)?, seed)?);
        }
        (None, Some(list)) => {
            let seeds = parse_seeds(list)?;
            let gen = |s: u64| -> Result<protocols::ReinforcementResult, CliError> {
                run_one(synth_session(SimProtocol::Reinforcement, &cfg, s, None)?, s)
            };
            // Paced runs stay sequential so seeds do not compete for cores.
            let runs: Vec<_> = if realtime { seeds.iter().map(|&s| gen(s)).collect() } else { seeds.par_iter().map(|&s| gen(s)).collect() };
            for r in runs {
                report.reinforcement.push(r?);
            }
            report.seeds = seeds;
        }
        (None, None) => return Err(CliError::Usage("reinforce needs --session or --seeds".into())),
        (Some(_), Some(_)) => unreachable!("clap rejects --session with --seeds"),
    }
    report.latency = report
        .reinforcement
        .iter()
        .map(|r| r.latency)
        .max_by(|a, b| a.p99_ms.total_cmp(&b.p99_ms));
    create_out(out)?;
    finish(&report, out)
}

pub fn sono_prep(common: &Common, session: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let log = read_session(session)?;
    let frames = log.sono.as_ref().ok_or_else(|| data_err(format!("{} has no sono.raw", session.display())))?;
    let split = ((frames.len() as f64 * cfg.protocol.train_fraction).floor() as usize).max(2).min(frames.len());
    let pipe = SonoPipeline::fit(cfg.sono.clone(), &frames[..split])?;
    if pipe.mask.degenerate {
        eprintln!("warning: degenerate variance, mask keeps the first pixels in row-major order");
    }
    create_out(out)?;
    let mut s = String::from("t_us");
    for i in 0..pipe.feature_len() {
        let _ = write!(s, ",f{i:04}");
    }
    s.push('\n');
    for f in frames {
        let fv = pipe.features(f)?;
        let _ = write!(s, "{}", fv.t_us);
        for v in &fv.values {
            let _ = write!(s, ",{v:?}");
        }
        s.push('\n');
    }
    report::write(&out.join("sono_features.csv"), &s)?;
    let mut m = String::from("row,col\n");
    for (i, _) in pipe.mask.keep.iter().enumerate().filter(|(_, &k)| k) {
        let _ = writeln!(m, "{},{}", i / pipe.mask.width, i % pipe.mask.width);
    }
    report::write(&out.join("sono_mask.csv"), &m)?;
    report::write(&out.join("sono_pipeline.json"), &serde_json::to_string_pretty(&pipe).map_err(data_err)?)?;
    println!(
        "{}x{} frames -> {} features (reduction {:.2}x), mask fitted on {} of {} frames",
        pipe.input_dims.0,
        pipe.input_dims.1,
        pipe.feature_len(),
        pipe.reduction_factor(),
        split,
        frames.len()
    );
    Ok(())
}

pub fn report(run: &Path, out: &Path) -> Result<(), CliError> {
    let report = report::read_report(run)?;
    create_out(out)?;
    let files = report::emit_plot_data(&report, out)?;
    print!("{}", report.table());
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}
