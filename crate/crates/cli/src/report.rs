//! Run reports: the JSON record, the terminal table and the plot-ready CSV
//! series.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use myodec::metrics::{self, KruskalWallis, MetricsReport};
use myodec::models::{ModelKind, TrainReport};
use myodec::protocols::{Analysis, LatencyStats, ReinforcementResult};
use myodec::{DofVector, DOF, STEP_US};
use serde::{Deserialize, Serialize};

use crate::{data_err, CliError};

/// One model's result on one session.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSummary {
    pub kind: ModelKind,
    pub metrics: MetricsReport,
    pub train: Option<TrainReport>,
    pub train_pairs: usize,
    pub train_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub models: Vec<ModelSummary>,
    pub mean_predictor: Option<MetricsReport>,
}

/// Prediction trace of one model on one session's test segment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trace {
    pub seed: u64,
    pub kind: ModelKind,
    pub t0_us: i64,
    pub steps: Vec<usize>,
    pub pred: Vec<DofVector>,
    pub truth: Vec<DofVector>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub a: ModelKind,
    pub b: ModelKind,
    pub a_mean_rmse_deg: f64,
    pub b_mean_rmse_deg: f64,
    pub test: KruskalWallis,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub analysis: Option<Analysis>,
    pub session: Option<String>,
    pub seeds: Vec<u64>,
    pub train_seed: u64,
    pub profile: String,
    pub config_digest: String,
    /// Full configuration as TOML, enough to rerun.
    pub config: String,
    pub results: Vec<SeedResult>,
    pub comparisons: Vec<Comparison>,
    pub reinforcement: Vec<ReinforcementResult>,
    pub latency: Option<LatencyStats>,
    pub traces: Vec<Trace>,
}

impl RunReport {
    pub fn is_empty(&self) -> bool {
        self.results.iter().all(|r| r.models.is_empty()) && self.reinforcement.is_empty()
    }

    pub fn kinds(&self) -> Vec<ModelKind> {
        let mut k: Vec<ModelKind> = self.results.iter().flat_map(|r| r.models.iter().map(|m| m.kind)).collect();
        k.extend(self.reinforcement.iter().map(|r| r.kind));
        let mut out = Vec::new();
        for x in k {
            if !out.contains(&x) {
                out.push(x);
            }
        }
        out
    }

    fn metric_values(&self, kind: ModelKind, f: impl Fn(&MetricsReport) -> f64) -> Vec<f64> {
        self.results
            .iter()
            .flat_map(|r| r.models.iter().filter(|m| m.kind == kind).map(|m| f(&m.metrics)))
            .collect()
    }

    /// Kruskal-Wallis on per-seed total RMSE for every sequential vs
    /// frame-wise pair, when at least two seeds ran.
    pub fn compare(&mut self) {
        self.comparisons.clear();
        if self.results.len() < 2 {
            return;
        }
        let kinds = self.kinds();
        for &a in kinds.iter().filter(|k| k.is_sequential()) {
            for &b in kinds.iter().filter(|k| !k.is_sequential()) {
                let (xa, xb) = (self.metric_values(a, |m| m.total_rmse_deg), self.metric_values(b, |m| m.total_rmse_deg));
                if let Ok(test) = metrics::kruskal_wallis(&[xa.clone(), xb.clone()]) {
                    self.comparisons.push(Comparison {
                        a,
                        b,
                        a_mean_rmse_deg: metrics::mean(&xa),
                        b_mean_rmse_deg: metrics::mean(&xb),
                        test,
                    });
                }
            }
        }
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command   {}", self.command);
        if let Some(a) = self.analysis {
            let _ = writeln!(s, "analysis  {a:?}");
        }
        let _ = writeln!(s, "seeds     {:?}   profile {}   config {}", self.seeds, self.profile, self.config_digest);
        if self.results.iter().any(|r| !r.models.is_empty()) {
            let _ = writeln!(s, "\n{:<8} {:>16} {:>16} {:>14} {:>6}", "model", "RMSE deg", "r2", "delay ms", "n");
            for kind in self.kinds() {
                let rmse = self.metric_values(kind, |m| m.total_rmse_deg);
                if rmse.is_empty() {
                    continue;
                }
                let r2 = self.metric_values(kind, |m| m.mean_r2);
                let d = self.metric_values(kind, |m| m.delay_ms);
                let _ = writeln!(
                    s,
                    "{:<8} {:>16} {:>16} {:>14} {:>6}",
                    kind.name(),
                    pm(&rmse, 2),
                    pm(&r2, 3),
                    pm(&d, 1),
                    rmse.len()
                );
            }
            let base: Vec<f64> =
                self.results.iter().filter_map(|r| r.mean_predictor.as_ref().map(|m| m.total_rmse_deg)).collect();
            if !base.is_empty() {
                let _ = writeln!(s, "{:<8} {:>16}", "mean", pm(&base, 2));
            }
        }
        for c in &self.comparisons {
            let _ = writeln!(
                s,
                "Kruskal-Wallis {} vs {}: H = {:.4}, p = {:.3e} (mean RMSE {:.2} vs {:.2} deg)",
                c.a.name(),
                c.b.name(),
                c.test.h,
                c.test.p,
                c.a_mean_rmse_deg,
                c.b_mean_rmse_deg
            );
        }
        for r in &self.reinforcement {
            let _ = writeln!(s, "\nreinforcement {} ({:?}), {} trials", r.kind.name(), r.mode, r.trials.len());
            let _ = writeln!(s, "{:>5} {:>10} {:>8} {:>10} {:>11}", "trial", "RMSE deg", "r2", "delay ms", "update ms");
            for t in &r.trials {
                let _ = writeln!(
                    s,
                    "{:>5} {:>10.2} {:>8.3} {:>10.1} {:>11.1}",
                    t.trial, t.rmse_deg, t.r2, t.delay_ms, t.update_ms
                );
            }
        }
        if let Some(l) = &self.latency {
            let _ = writeln!(
                s,
                "\nprediction latency: p50 {:.3} ms, p99 {:.3} ms, max {:.3} ms over {} steps",
                l.p50_ms, l.p99_ms, l.max_ms, l.count
            );
        }
        s
    }
}

fn pm(v: &[f64], digits: usize) -> String {
    let m = metrics::mean(v);
    match metrics::sem(v) {
        Ok(e) if v.len() > 1 => format!("{m:.digits$} ± {e:.digits$}"),
        _ => format!("{m:.digits$}"),
    }
}

pub fn write_report(report: &RunReport, out: &Path) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(report).map_err(data_err)?;
    write(&out.join("report.json"), &json)?;
    write(&out.join("report.txt"), &report.table())?;
    emit_plot_data(report, out)?;
    Ok(())
}

pub fn read_report(dir: &Path) -> Result<RunReport, CliError> {
    let path = dir.join("report.json");
    let text = std::fs::read_to_string(&path).map_err(|e| data_err(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

pub fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:?}")
    } else {
        String::new()
    }
}

/// Writes the figure-style series under `out/plots` and returns the files.
pub fn emit_plot_data(report: &RunReport, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    if report.is_empty() {
        return Err(data_err("empty report: no model results to plot"));
    }
    let dir = out.join("plots");
    std::fs::create_dir_all(&dir).map_err(|e| data_err(format!("{}: {e}", dir.display())))?;
    let mut files = Vec::new();

    // Predicted-vs-truth traces.
    for t in &report.traces {
        let mut s = String::from("t_us");
        for d in 0..DOF {
            let _ = write!(s, ",truth{d},pred{d}");
        }
        s.push('\n');
        for ((k, p), y) in t.steps.iter().zip(&t.pred).zip(&t.truth) {
            let _ = write!(s, "{}", t.t0_us + *k as i64 * STEP_US);
            for d in 0..DOF {
                let _ = write!(s, ",{},{}", num(y.phi[d]), num(p.phi[d]));
            }
            s.push('\n');
        }
        let path = dir.join(format!("trace_{}_seed{}.csv", t.kind.name(), t.seed));
        write(&path, &s)?;
        files.push(path);
    }

    let kinds = report.kinds();
    if report.results.iter().any(|r| !r.models.is_empty()) {
        // Per-DoF bars, averaged over seeds.
        let mut s = String::from("model,dof,rmse_deg_mean,rmse_deg_sem,r2_mean,r2_sem,n\n");
        for &kind in &kinds {
            for d in 0..DOF {
                let rm: Vec<f64> = report.metric_values(kind, |m| m.rmse_deg[d]);
                if rm.is_empty() {
                    continue;
                }
                let r2: Vec<f64> = report
                    .results
                    .iter()
                    .flat_map(|r| r.models.iter().filter(|m| m.kind == kind).filter_map(|m| m.metrics.r2[d]))
                    .collect();
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{}",
                    kind.name(),
                    myodec::kinematics::DOF_NAMES[d],
                    num(metrics::mean(&rm)),
                    num(sem_or_zero(&rm)),
                    if r2.is_empty() { String::new() } else { num(metrics::mean(&r2)) },
                    num(sem_or_zero(&r2)),
                    rm.len()
                );
            }
        }
        let path = dir.join("dof_bars.csv");
        write(&path, &s)?;
        files.push(path);

        // Lag-correlation curves.
        let mut s = String::from("model,seed,shift_steps,shift_ms,correlation\n");
        for r in &report.results {
            for m in &r.models {
                for &(shift, c) in &m.metrics.delay_curve {
                    let _ = writeln!(s, "{},{},{},{},{}", m.kind.name(), r.seed, shift, shift * STEP_US / 1000, num(c));
                }
            }
        }
        let path = dir.join("lag_curves.csv");
        write(&path, &s)?;
        files.push(path);
    }

    // Per-trial reinforcement curves with SEM bands across seeds.
    for &kind in &kinds {
        let runs: Vec<&ReinforcementResult> = report.reinforcement.iter().filter(|r| r.kind == kind).collect();
        if runs.is_empty() {
            continue;
        }
        if runs.len() == 1 {
            eprintln!("warning: single seed for {}; SEM columns are 0", kind.name());
        }
        let n_trials = runs.iter().map(|r| r.trials.len()).min().unwrap_or(0);
        let mut s = String::from("trial,rmse_deg_mean,rmse_deg_sem,r2_mean,r2_sem,delay_ms_mean,delay_ms_sem,n\n");
        for t in 0..n_trials {
            let col = |f: &dyn Fn(&myodec::TrialMetrics) -> f64| -> Vec<f64> { runs.iter().map(|r| f(&r.trials[t])).collect() };
            let (rm, r2, dl) = (col(&|x| x.rmse_deg), col(&|x| x.r2), col(&|x| x.delay_ms));
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                runs[0].trials[t].trial,
                num(metrics::mean(&rm)),
                num(sem_or_zero(&rm)),
                num(metrics::mean(&r2)),
                num(sem_or_zero(&r2)),
                num(metrics::mean(&dl)),
                num(sem_or_zero(&dl)),
                runs.len()
            );
        }
        let path = dir.join(format!("reinforcement_{}.csv", kind.name()));
        write(&path, &s)?;
        files.push(path);
    }
    Ok(files)
}

/// SEM, with a single sample reported as 0.
fn sem_or_zero(v: &[f64]) -> f64 {
    if v.len() < 2 {
        0.0
    } else {
        metrics::sem(v).unwrap_or(0.0)
    }
}
