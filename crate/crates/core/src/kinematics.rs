//! Ground-truth encoding: per-DoF calibration of raw glove units and the two
//! affine maps derived from it (raw -> normalized position, normalized ->
//! joint angle).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::DOF;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("DoF {dof} has degenerate calibration range {span} (< {eps})")]
    DegenerateRange { dof: usize, span: f64, eps: f64 },
    #[error("DoF {0} is not calibrated")]
    UncalibratedDof(usize),
    #[error("calibration stream has {actual} DoF channels, expected {expected}")]
    DofCountMismatch { expected: usize, actual: usize },
    #[error("calibration stream is empty")]
    EmptyStream,
    #[error("angle range for DoF {dof} is not increasing: [{min}, {max}]")]
    BadAngleRange { dof: usize, min: f64, max: f64 },
}

/// Default calibration sweep length, seconds.
pub const CALIBRATION_SECONDS: f64 = 15.0;

/// Minimum raw span accepted by [`calibrate`].
pub const DEGENERATE_EPS: f64 = 1e-6;

/// Names of the seven decoded DoFs, in index order.
pub const DOF_NAMES: [&str; DOF] = [
    "wrist_flex_ext",
    "wrist_add_abd",
    "thumb",
    "index",
    "middle",
    "ring",
    "little",
];

/// Default joint-angle spans in degrees.
pub const DEFAULT_THETA: [(f64, f64); DOF] = [
    (-60.0, 60.0),
    (-25.0, 35.0),
    (0.0, 90.0),
    (0.0, 90.0),
    (0.0, 90.0),
    (0.0, 90.0),
    (0.0, 90.0),
];

/// Seven normalized positions, each clipped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DofVector {
    pub phi: [f64; DOF],
}

impl DofVector {
    pub fn new(phi: [f64; DOF]) -> Self {
        Self { phi }
    }

    /// Builds a vector, clipping every component into `[0, 1]`.
    pub fn clipped(mut phi: [f64; DOF]) -> Self {
        for p in &mut phi {
            *p = p.clamp(0.0, 1.0);
        }
        Self { phi }
    }

    pub fn splat(v: f64) -> Self {
        Self { phi: [v; DOF] }
    }

    pub fn is_normalized(&self) -> bool {
        self.phi.iter().all(|p| (0.0..=1.0).contains(p))
    }
}

/// Calibration of a single DoF.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DofCalibration {
    pub rho_min: f64,
    pub rho_max: f64,
    pub theta_min: f64,
    pub theta_max: f64,
}

impl DofCalibration {
    pub fn rho_span(&self) -> f64 {
        self.rho_max - self.rho_min
    }

    pub fn theta_span(&self) -> f64 {
        self.theta_max - self.theta_min
    }

    pub fn normalize(&self, rho: f64) -> f64 {
        ((rho - self.rho_min) / self.rho_span()).clamp(0.0, 1.0)
    }

    pub fn to_degrees(&self, phi: f64) -> f64 {
        self.theta_min + phi * self.theta_span()
    }
}

/// Per-DoF calibration; immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMap {
    dofs: Vec<DofCalibration>,
}

impl CalibrationMap {
    pub fn new(dofs: Vec<DofCalibration>) -> Result<Self, KinematicsError> {
        for (i, d) in dofs.iter().enumerate() {
            if !(d.rho_span() >= DEGENERATE_EPS) {
                return Err(KinematicsError::DegenerateRange { dof: i, span: d.rho_span(), eps: DEGENERATE_EPS });
            }
            if !(d.theta_max > d.theta_min) {
                return Err(KinematicsError::BadAngleRange { dof: i, min: d.theta_min, max: d.theta_max });
            }
        }
        Ok(Self { dofs })
    }

    pub fn dofs(&self) -> &[DofCalibration] {
        &self.dofs
    }

    pub fn dof(&self, i: usize) -> Result<&DofCalibration, KinematicsError> {
        self.dofs.get(i).ok_or(KinematicsError::UncalibratedDof(i))
    }

    pub fn normalize(&self, rho: f64, dof: usize) -> Result<f64, KinematicsError> {
        Ok(self.dof(dof)?.normalize(rho))
    }

    pub fn to_degrees(&self, phi: f64, dof: usize) -> Result<f64, KinematicsError> {
        Ok(self.dof(dof)?.to_degrees(phi))
    }

    /// Normalizes a full raw sample.
    pub fn normalize_all(&self, rho: &[f64; DOF]) -> Result<DofVector, KinematicsError> {
        let mut phi = [0.0; DOF];
        for (i, p) in phi.iter_mut().enumerate() {
            *p = self.normalize(rho[i], i)?;
        }
        Ok(DofVector { phi })
    }

    /// Degrees spanned by each DoF.
    pub fn theta_spans(&self) -> Result<[f64; DOF], KinematicsError> {
        let mut out = [0.0; DOF];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.dof(i)?.theta_span();
        }
        Ok(out)
    }
}

/// Derives a calibration from a raw exploration stream.
///
/// `raw` holds one 7-component sample per step; `theta` supplies the angle
/// range of every DoF (usually [`DEFAULT_THETA`]). Only the first
/// `duration_s` seconds at `step_s` spacing are used.
pub fn calibrate(
    raw: &[[f64; DOF]],
    duration_s: f64,
    step_s: f64,
    theta: &[(f64, f64); DOF],
) -> Result<CalibrationMap, KinematicsError> {
    let take = ((duration_s / step_s).round() as usize).max(1).min(raw.len());
    let raw = &raw[..take];
    if raw.is_empty() {
        return Err(KinematicsError::EmptyStream);
    }
    let mut dofs = Vec::with_capacity(DOF);
    for i in 0..DOF {
        let (lo, hi) = raw
            .iter()
            .map(|r| r[i])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        dofs.push(DofCalibration { rho_min: lo, rho_max: hi, theta_min: theta[i].0, theta_max: theta[i].1 });
    }
    CalibrationMap::new(dofs)
}

/// Like [`calibrate`] but for a stream given as per-sample slices, checking
/// the channel count.
pub fn calibrate_slices(
    raw: &[Vec<f64>],
    duration_s: f64,
    step_s: f64,
    theta: &[(f64, f64); DOF],
) -> Result<CalibrationMap, KinematicsError> {
    let mut fixed = Vec::with_capacity(raw.len());
    for r in raw {
        let arr: [f64; DOF] = r
            .as_slice()
            .try_into()
            .map_err(|_| KinematicsError::DofCountMismatch { expected: DOF, actual: r.len() })?;
        fixed.push(arr);
    }
    calibrate(&fixed, duration_s, step_s, theta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sweep(lo: f64, hi: f64) -> Vec<[f64; DOF]> {
        (0..600).map(|k| [lo + (hi - lo) * (k as f64 / 599.0); DOF]).collect()
    }

    #[test]
    fn calibrate_takes_extremes() {
        let map = calibrate(&sweep(10.0, 50.0), CALIBRATION_SECONDS, 0.025, &DEFAULT_THETA).unwrap();
        let d = map.dof(3).unwrap();
        assert_eq!((d.rho_min, d.rho_max), (10.0, 50.0));
        assert_eq!((d.theta_min, d.theta_max), (0.0, 90.0));
    }

    #[test]
    fn constant_stream_is_degenerate() {
        let raw = vec![[3.0; DOF]; 100];
        let err = calibrate(&raw, 15.0, 0.025, &DEFAULT_THETA).unwrap_err();
        assert!(matches!(err, KinematicsError::DegenerateRange { dof: 0, .. }));
    }

    #[test]
    fn wrong_channel_count() {
        let err = calibrate_slices(&[vec![1.0; 6]], 15.0, 0.025, &DEFAULT_THETA).unwrap_err();
        assert_eq!(err, KinematicsError::DofCountMismatch { expected: 7, actual: 6 });
    }

    #[test]
    fn normalize_endpoints_midpoint_and_clip() {
        let map = calibrate(&sweep(10.0, 50.0), 15.0, 0.025, &DEFAULT_THETA).unwrap();
        assert_eq!(map.normalize(10.0, 0).unwrap(), 0.0);
        assert_eq!(map.normalize(50.0, 0).unwrap(), 1.0);
        assert_eq!(map.normalize(30.0, 0).unwrap(), 0.5);
        assert_eq!(map.normalize(60.0, 0).unwrap(), 1.0);
        assert_eq!(map.normalize(0.0, 0).unwrap(), 0.0);
        assert_eq!(map.normalize(1.0, 7), Err(KinematicsError::UncalibratedDof(7)));
    }

    #[test]
    fn degrees_endpoints() {
        let map = calibrate(&sweep(10.0, 50.0), 15.0, 0.025, &DEFAULT_THETA).unwrap();
        assert_eq!(map.to_degrees(0.0, 0).unwrap(), -60.0);
        assert_eq!(map.to_degrees(1.0, 0).unwrap(), 60.0);
        assert_eq!(map.to_degrees(0.5, 0).unwrap(), 0.0);
        assert_eq!(map.to_degrees(0.5, 9), Err(KinematicsError::UncalibratedDof(9)));
    }

    #[test]
    fn composition_is_affine_in_range() {
        let map = calibrate(&sweep(10.0, 50.0), 15.0, 0.025, &DEFAULT_THETA).unwrap();
        let f = |r: f64| map.to_degrees(map.normalize(r, 2).unwrap(), 2).unwrap();
        // Equal raw steps give equal angle steps.
        let (a, b, c) = (f(12.0), f(20.0), f(28.0));
        assert!(((b - a) - (c - b)).abs() < 1e-12);
        assert!(((b - a) - 8.0 * 90.0 / 40.0).abs() < 1e-12);
    }
}
