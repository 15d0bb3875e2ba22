//! Angular RMSE, coefficient of determination, lag-correlation response
//! delay, Kruskal-Wallis H test and standard error of the mean.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{CalibrationMap, DofVector, KinematicsError};
use crate::{DOF, STEP_US};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty series")]
    EmptySeries,
    #[error("truth is constant for DoF {0}")]
    ConstantTruth(usize),
    #[error("series of {len} steps is too short for a lag window of +/-{max_lag}")]
    SeriesTooShort { len: usize, max_lag: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

fn check_pair(pred: &[DofVector], truth: &[DofVector]) -> Result<(), MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricsError::EmptySeries);
    }
    Ok(())
}

/// RMSE in normalized units: per DoF and pooled over all DoFs.
pub fn rmse_phi(pred: &[DofVector], truth: &[DofVector]) -> Result<([f64; DOF], f64), MetricsError> {
    check_pair(pred, truth)?;
    let mut sq = [0.0; DOF];
    for (p, t) in pred.iter().zip(truth) {
        for d in 0..DOF {
            sq[d] += (p.phi[d] - t.phi[d]).powi(2);
        }
    }
    let n = pred.len() as f64;
    let total = (sq.iter().sum::<f64>() / (n * DOF as f64)).sqrt();
    Ok((sq.map(|s| (s / n).sqrt()), total))
}

/// RMSE in degrees: the normalized error scaled by each DoF's angle span.
pub fn rmse_angular(
    pred: &[DofVector],
    truth: &[DofVector],
    map: &CalibrationMap,
) -> Result<([f64; DOF], f64), MetricsError> {
    check_pair(pred, truth)?;
    let span = map.theta_spans()?;
    let (per_dof, _) = rmse_phi(pred, truth)?;
    let per_deg: [f64; DOF] = std::array::from_fn(|d| per_dof[d] * span[d].abs());
    let total = (per_deg.iter().map(|r| r * r).sum::<f64>() / DOF as f64).sqrt();
    Ok((per_deg, total))
}

fn dof_series(s: &[DofVector], d: usize) -> impl Iterator<Item = f64> + '_ {
    s.iter().map(move |v| v.phi[d])
}

/// `1 - SS_res / SS_tot` for one DoF, or `None` when the truth is constant.
pub fn r_squared_dof(pred: &[DofVector], truth: &[DofVector], d: usize) -> Option<f64> {
    let n = truth.len() as f64;
    let mean = dof_series(truth, d).sum::<f64>() / n;
    let ss_tot: f64 = dof_series(truth, d).map(|t| (t - mean).powi(2)).sum();
    let first = truth.first()?.phi[d];
    if ss_tot == 0.0 || dof_series(truth, d).all(|t| t == first) {
        return None;
    }
    let ss_res: f64 = dof_series(pred, d).zip(dof_series(truth, d)).map(|(p, t)| (p - t).powi(2)).sum();
    Some(1.0 - ss_res / ss_tot)
}

/// Per-DoF and mean coefficient of determination, unclipped.
pub fn r_squared(pred: &[DofVector], truth: &[DofVector]) -> Result<([f64; DOF], f64), MetricsError> {
    check_pair(pred, truth)?;
    if pred.len() < 2 {
        return Err(MetricsError::InsufficientData("r-squared needs at least 2 steps".into()));
    }
    let mut r = [0.0; DOF];
    for (d, slot) in r.iter_mut().enumerate() {
        *slot = r_squared_dof(pred, truth, d).ok_or(MetricsError::ConstantTruth(d))?;
    }
    Ok((r, r.iter().sum::<f64>() / DOF as f64))
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delay {
    pub lag_steps: i64,
    pub lag_ms: f64,
    /// `(shift, mean correlation)` for every shift in the window, ascending.
    pub curve: Vec<(i64, f64)>,
}

/// Shift maximizing the DoF-averaged correlation between prediction and
/// truth. A positive lag means the prediction trails the truth.
pub fn response_delay(pred: &[DofVector], truth: &[DofVector], max_lag: usize) -> Result<Delay, MetricsError> {
    check_pair(pred, truth)?;
    let n = pred.len();
    if n <= 2 * max_lag {
        return Err(MetricsError::SeriesTooShort { len: n, max_lag });
    }
    let live: Vec<usize> = (0..DOF)
        .filter(|&d| {
            let first = truth[0].phi[d];
            truth.iter().any(|t| t.phi[d] != first)
        })
        .collect();
    if live.is_empty() {
        return Err(MetricsError::ConstantTruth(0));
    }
    let p: Vec<Vec<f64>> = live.iter().map(|&d| dof_series(pred, d).collect()).collect();
    let t: Vec<Vec<f64>> = live.iter().map(|&d| dof_series(truth, d).collect()).collect();

    let corr_at = |s: i64| -> f64 {
        // Pairs (pred[k + s], truth[k]) over the overlap.
        let (ps, ts) = if s >= 0 { (s as usize, 0) } else { (0, (-s) as usize) };
        let len = n - s.unsigned_abs() as usize;
        let sum: f64 = p
            .iter()
            .zip(&t)
            .map(|(pv, tv)| pearson(&pv[ps..ps + len], &tv[ts..ts + len]).unwrap_or(0.0))
            .sum();
        sum / live.len() as f64
    };

    let m = max_lag as i64;
    let curve: Vec<(i64, f64)> = (-m..=m).map(|s| (s, corr_at(s))).collect();
    let at = |s: i64| curve[(s + m) as usize].1;
    let mut best = (0i64, at(0));
    for a in 1..=m {
        for s in [a, -a] {
            if at(s) > best.1 {
                best = (s, at(s));
            }
        }
    }
    Ok(Delay { lag_steps: best.0, lag_ms: best.0 as f64 * STEP_US as f64 / 1000.0, curve })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KruskalWallis {
    pub h: f64,
    pub p: f64,
    pub df: usize,
}

/// Tie-corrected Kruskal-Wallis H with its chi-square p-value.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<KruskalWallis, MetricsError> {
    if groups.len() < 2 {
        return Err(MetricsError::InsufficientData("need at least 2 groups".into()));
    }
    if groups.iter().any(|g| g.is_empty()) {
        return Err(MetricsError::InsufficientData("empty group".into()));
    }
    let mut all: Vec<(f64, usize)> =
        groups.iter().enumerate().flat_map(|(gi, g)| g.iter().map(move |&v| (v, gi))).collect();
    let n = all.len();
    if n < 3 {
        return Err(MetricsError::InsufficientData(format!("{n} observations")));
    }
    if all.iter().any(|(v, _)| !v.is_finite()) {
        return Err(MetricsError::InsufficientData("non-finite observation".into()));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut rank_sum = vec![0.0; groups.len()];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        for item in &all[i..=j] {
            rank_sum[item.1] += avg;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let nf = n as f64;
    let df = groups.len() - 1;
    let correction = 1.0 - tie_term / (nf * nf * nf - nf);
    if correction <= 0.0 {
        return Ok(KruskalWallis { h: 0.0, p: 1.0, df });
    }
    let s: f64 = rank_sum.iter().zip(groups).map(|(r, g)| r * r / g.len() as f64).sum();
    let h_raw = 12.0 / (nf * (nf + 1.0)) * s - 3.0 * (nf + 1.0);
    let h = (h_raw / correction).max(0.0);
    Ok(KruskalWallis { h, p: chi2_sf(h, df as f64), df })
}

/// Chi-square survival function `Q(df/2, x/2)`.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_q(df / 2.0, x / 2.0)
}

/// Lanczos approximation (g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized upper incomplete gamma `Q(a, x)`: power series below
/// `x < a + 1`, Lentz continued fraction above.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let ln_pref = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        let (mut term, mut sum, mut ap) = (1.0 / a, 1.0 / a, a);
        for _ in 0..10_000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        (1.0 - sum * ln_pref.exp()).clamp(0.0, 1.0)
    } else {
        const TINY: f64 = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < TINY {
                d = TINY;
            }
            c = b + an / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (ln_pref.exp() * h).clamp(0.0, 1.0)
    }
}

/// Standard error of the mean with the unbiased standard deviation.
pub fn sem(values: &[f64]) -> Result<f64, MetricsError> {
    let n = values.len();
    if n < 2 {
        return Err(MetricsError::InsufficientData(format!("SEM of {n} values")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(var.sqrt() / (n as f64).sqrt())
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Per-DoF mean of a series, the constant "mean predictor".
pub fn mean_pose(series: &[DofVector]) -> DofVector {
    let n = series.len().max(1) as f64;
    let mut phi = [0.0; DOF];
    for v in series {
        for d in 0..DOF {
            phi[d] += v.phi[d];
        }
    }
    DofVector { phi: phi.map(|s| s / n) }
}

/// Everything reported for one model on one test segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub rmse_deg: [f64; DOF],
    pub total_rmse_deg: f64,
    /// `None` where the truth is constant over the segment.
    pub r2: [Option<f64>; DOF],
    pub mean_r2: f64,
    pub delay_steps: i64,
    pub delay_ms: f64,
    pub delay_curve: Vec<(i64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kruskal_wallis: Option<KruskalWallis>,
}

impl MetricsReport {
    pub fn compute(
        pred: &[DofVector],
        truth: &[DofVector],
        map: &CalibrationMap,
        max_lag: usize,
    ) -> Result<Self, MetricsError> {
        let (rmse_deg, total_rmse_deg) = rmse_angular(pred, truth, map)?;
        let r2: [Option<f64>; DOF] = std::array::from_fn(|d| r_squared_dof(pred, truth, d));
        let live: Vec<f64> = r2.iter().flatten().copied().collect();
        if live.is_empty() {
            return Err(MetricsError::ConstantTruth(0));
        }
        let delay = response_delay(pred, truth, max_lag)?;
        Ok(Self {
            samples: pred.len(),
            rmse_deg,
            total_rmse_deg,
            r2,
            mean_r2: mean(&live),
            delay_steps: delay.lag_steps,
            delay_ms: delay.lag_ms,
            delay_curve: delay.curve,
            kruskal_wallis: None,
        })
    }
}
