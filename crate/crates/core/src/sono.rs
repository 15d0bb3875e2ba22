//! Sonomyography preprocessing: block-mean downsampling, Gaussian smoothing,
//! per-pixel variance over a training set and a variance mask that keeps the
//! most active pixels. The masked pixels become the per-step feature vector
//! of the sequential regressors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::DofVector;
use crate::signal::FeatureVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SonoError {
    #[error("bad downsample factor {factor} for a {height}x{width} image")]
    BadFactor { factor: usize, height: usize, width: usize },
    #[error("variance needs at least 2 images, got {0}")]
    InsufficientImages(usize),
    #[error("dimension mismatch: expected {expected:?}, got {found:?}")]
    DimMismatch { expected: (usize, usize), found: (usize, usize) },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// One grayscale frame, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UltrasoundImage {
    pub t_us: i64,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl UltrasoundImage {
    pub fn new(t_us: i64, height: usize, width: usize, pixels: Vec<f64>) -> Result<Self, SonoError> {
        if pixels.len() != height * width || height == 0 || width == 0 {
            return Err(SonoError::InvalidImage(format!("{} pixels for {height}x{width}", pixels.len())));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(SonoError::InvalidImage("non-finite pixel".into()));
        }
        Ok(Self { t_us, height, width, pixels })
    }

    pub fn filled(t_us: i64, height: usize, width: usize, value: f64) -> Self {
        Self { t_us, height, width, pixels: vec![value; height * width] }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SonoConfig {
    pub factor: usize,
    pub sigma: f64,
    pub keep_fraction: f64,
}

impl Default for SonoConfig {
    fn default() -> Self {
        Self { factor: 2, sigma: 1.0, keep_fraction: 0.33 }
    }
}

/// Block-mean pooling. Dimensions that `factor` does not divide are padded
/// by replicating the last row/column.
pub fn downsample(img: &UltrasoundImage, factor: usize) -> Result<UltrasoundImage, SonoError> {
    if factor == 0 {
        return Err(SonoError::BadFactor { factor, height: img.height, width: img.width });
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let (h, w) = (img.height.div_ceil(factor), img.width.div_ceil(factor));
    let mut out = Vec::with_capacity(h * w);
    let area = (factor * factor) as f64;
    for br in 0..h {
        for bc in 0..w {
            let mut s = 0.0;
            for r in br * factor..(br + 1) * factor {
                for c in bc * factor..(bc + 1) * factor {
                    s += img.get(r.min(img.height - 1), c.min(img.width - 1));
                }
            }
            out.push(s / area);
        }
    }
    Ok(UltrasoundImage { t_us: img.t_us, height: h, width: w, pixels: out })
}

/// Discrete Gaussian truncated at 3 sigma and normalized to unit sum.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(0.0) as usize;
    let k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mirror index into `0..n` (edge sample not repeated: -1 -> 1).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Separable 2-D Gaussian blur with reflective borders.
pub fn gaussian_smooth(img: &UltrasoundImage, sigma: f64) -> Result<UltrasoundImage, SonoError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(SonoError::InvalidParameter(format!("sigma {sigma} must be > 0")));
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = img.dims();
    let mut tmp = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            tmp[row * w + col] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * img.get(row, reflect(col as isize + i as isize - r, w)))
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            out[row * w + col] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[reflect(row as isize + i as isize - r, h) * w + col])
                .sum();
        }
    }
    Ok(UltrasoundImage { t_us: img.t_us, height: h, width: w, pixels: out })
}

/// Per-pixel unbiased variance across images of equal size.
pub fn variance_map(images: &[UltrasoundImage]) -> Result<Vec<f64>, SonoError> {
    if images.len() < 2 {
        return Err(SonoError::InsufficientImages(images.len()));
    }
    let dims = images[0].dims();
    let n = dims.0 * dims.1;
    let mut mean = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    for (i, img) in images.iter().enumerate() {
        if img.dims() != dims {
            return Err(SonoError::DimMismatch { expected: dims, found: img.dims() });
        }
        let cnt = (i + 1) as f64;
        for p in 0..n {
            let d = img.pixels[p] - mean[p];
            mean[p] += d / cnt;
            m2[p] += d * (img.pixels[p] - mean[p]);
        }
    }
    let denom = (images.len() - 1) as f64;
    Ok(m2.into_iter().map(|v| v / denom).collect())
}

/// Pixels kept as features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelMask {
    pub height: usize,
    pub width: usize,
    pub keep: Vec<bool>,
    /// Set when all variances were zero and the mask fell back to the first
    /// pixels in row-major order.
    pub degenerate: bool,
}

impl PixelMask {
    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, keep: vec![true; height * width], degenerate: false }
    }
}

/// Keeps the `round(keep_fraction * n)` highest-variance pixels (at least one), ties broken
/// by row-major index.
pub fn build_mask(vmap: &[f64], height: usize, width: usize, keep_fraction: f64) -> Result<PixelMask, SonoError> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(SonoError::InvalidParameter(format!("keep_fraction {keep_fraction} outside (0, 1]")));
    }
    let n = height * width;
    if vmap.len() != n || n == 0 {
        return Err(SonoError::DimMismatch { expected: (height, width), found: (vmap.len(), 1) });
    }
    let count = ((keep_fraction * n as f64).round() as usize).clamp(1, n);
    let degenerate = vmap.iter().all(|&v| v == 0.0);
    let mut order: Vec<usize> = (0..n).collect();
    if !degenerate {
        order.sort_by(|&a, &b| vmap[b].total_cmp(&vmap[a]).then(a.cmp(&b)));
    }
    let mut keep = vec![false; n];
    for &i in &order[..count] {
        keep[i] = true;
    }
    Ok(PixelMask { height, width, keep, degenerate })
}

/// Kept pixels in row-major order.
pub fn apply_mask(img: &UltrasoundImage, mask: &PixelMask) -> Result<Vec<f64>, SonoError> {
    if img.dims() != (mask.height, mask.width) {
        return Err(SonoError::DimMismatch { expected: (mask.height, mask.width), found: img.dims() });
    }
    Ok(img.pixels.iter().zip(&mask.keep).filter(|(_, &k)| k).map(|(&p, _)| p).collect())
}

/// The fitted chain downsample -> smooth -> mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SonoPipeline {
    pub config: SonoConfig,
    pub input_dims: (usize, usize),
    pub mask: PixelMask,
}

impl SonoPipeline {
    fn reduce(config: &SonoConfig, img: &UltrasoundImage) -> Result<UltrasoundImage, SonoError> {
        gaussian_smooth(&downsample(img, config.factor)?, config.sigma)
    }

    /// Builds the mask from the variance of the training images after
    /// downsampling and smoothing.
    pub fn fit(config: SonoConfig, train: &[UltrasoundImage]) -> Result<Self, SonoError> {
        if train.len() < 2 {
            return Err(SonoError::InsufficientImages(train.len()));
        }
        let input_dims = train[0].dims();
        let reduced = train.iter().map(|i| Self::reduce(&config, i)).collect::<Result<Vec<_>, _>>()?;
        let vmap = variance_map(&reduced)?;
        let (h, w) = reduced[0].dims();
        let mask = build_mask(&vmap, h, w, config.keep_fraction)?;
        Ok(Self { config, input_dims, mask })
    }

    pub fn feature_len(&self) -> usize {
        self.mask.kept()
    }

    /// Input pixels per output feature.
    pub fn reduction_factor(&self) -> f64 {
        (self.input_dims.0 * self.input_dims.1) as f64 / self.feature_len() as f64
    }

    pub fn features(&self, img: &UltrasoundImage) -> Result<FeatureVector, SonoError> {
        if img.dims() != self.input_dims {
            return Err(SonoError::DimMismatch { expected: self.input_dims, found: img.dims() });
        }
        let values = apply_mask(&Self::reduce(&self.config, img)?, &self.mask)?;
        Ok(FeatureVector { t_us: img.t_us, values })
    }
}

/// The five finger DoFs a sono regression decodes.
pub const SONO_DOFS: [usize; 5] = [2, 3, 4, 5, 6];

/// Synthetic ultrasound: one Gaussian blob per finger DoF, sliding down its
/// own column band as the finger flexes, over a dim seeded noise floor.
pub fn blob_sequence(
    phi: &[DofVector],
    height: usize,
    width: usize,
    step_us: i64,
    noise: f64,
    seed: u64,
) -> Vec<UltrasoundImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let band = width as f64 / SONO_DOFS.len() as f64;
    let radius = (band / 4.0).max(1.0);
    phi.iter()
        .enumerate()
        .map(|(k, p)| {
            let mut px = vec![0.0; height * width];
            for (j, &d) in SONO_DOFS.iter().enumerate() {
                let cx = (j as f64 + 0.5) * band;
                let cy = height as f64 * (0.2 + 0.6 * p.phi[d]);
                for r in 0..height {
                    for c in 0..width {
                        let (dy, dx) = (r as f64 - cy, c as f64 - cx);
                        px[r * width + c] += 0.8 * (-(dx * dx + dy * dy) / (2.0 * radius * radius)).exp();
                    }
                }
            }
            for v in &mut px {
                *v = (*v + 0.1 + noise * normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
            UltrasoundImage { t_us: k as i64 * step_us, height, width, pixels: px }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> UltrasoundImage {
        let px = (0..h * w).map(|i| f(i / w, i % w)).collect();
        UltrasoundImage::new(0, h, w, px).unwrap()
    }

    #[test]
    fn downsample_examples() {
        let d = downsample(&UltrasoundImage::filled(0, 8, 8, 0.5), 4).unwrap();
        assert_eq!((d.dims(), d.pixels.clone()), ((2, 2), vec![0.5; 4]));
        let chk = img(6, 6, |r, c| ((r + c) % 2) as f64);
        assert_eq!(downsample(&chk, 1).unwrap(), chk);
        assert!(downsample(&chk, 2).unwrap().pixels.iter().all(|&p| p == 0.5));
        assert!(matches!(downsample(&chk, 0), Err(SonoError::BadFactor { .. })));
    }

    #[test]
    fn downsample_pads_by_replication() {
        // 3 columns, factor 2: second block sees column 2 twice.
        let d = downsample(&img(2, 3, |_, c| c as f64), 2).unwrap();
        assert_eq!(d.pixels, vec![0.5, 2.0]);
    }

    #[test]
    fn smoothing_constants_impulses_and_tiny_sigma() {
        let c = UltrasoundImage::filled(0, 9, 11, 0.37);
        for s in [0.5, 1.0, 2.5] {
            let out = gaussian_smooth(&c, s).unwrap();
            assert!(out.pixels.iter().all(|p| (p - 0.37).abs() <= 1e-12));
        }
        let imp = img(21, 21, |r, c| if r == 10 && c == 10 { 1.0 } else { 0.0 });
        let out = gaussian_smooth(&imp, 1.5).unwrap();
        let mass: f64 = out.pixels.iter().sum();
        assert!((mass - 1.0).abs() <= 1e-9);
        // Separable response: outer product of the 1-D kernel.
        let k = gaussian_kernel(1.5);
        let r = k.len() / 2;
        assert!((out.get(10, 10) - k[r] * k[r]).abs() < 1e-15);
        assert!((out.get(10, 12) - k[r] * k[r + 2]).abs() < 1e-15);
        let rnd = img(5, 7, |r, c| ((r * 7 + c) as f64 * 0.37).sin().abs());
        assert_eq!(gaussian_smooth(&rnd, 1e-3).unwrap(), rnd);
    }

    #[test]
    fn reflect_indexing() {
        let idx: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
    }

    #[test]
    fn variance_and_masks() {
        let a = UltrasoundImage::filled(0, 3, 3, 0.2);
        assert!(matches!(variance_map(&[a.clone()]), Err(SonoError::InsufficientImages(1))));
        let v = variance_map(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
        let m = build_mask(&v, 3, 3, 0.34).unwrap();
        assert!(m.degenerate);
        assert_eq!(m.keep, vec![true, true, true, false, false, false, false, false, false]);

        let frames: Vec<_> = (0..6)
            .map(|k| img(3, 3, |r, c| if (r, c) == (1, 2) { (k % 2) as f64 } else { 0.4 }))
            .collect();
        let v = variance_map(&frames).unwrap();
        let m = build_mask(&v, 3, 3, 0.05).unwrap();
        assert_eq!(m.kept(), 1);
        assert!(m.keep[5] && !m.degenerate);
        assert_eq!(apply_mask(&frames[1], &m).unwrap(), vec![1.0]);
    }

    #[test]
    fn unbiased_variance_matches_two_pass() {
        let xs = [0.1, 0.4, 0.35, 0.9];
        let frames: Vec<_> = xs.iter().map(|&x| UltrasoundImage::filled(0, 1, 1, x)).collect();
        let mean = xs.iter().sum::<f64>() / 4.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
        assert!((variance_map(&frames).unwrap()[0] - var).abs() < 1e-15);
    }

    #[test]
    fn full_mask_flattens() {
        let i = img(2, 3, |r, c| (r * 3 + c) as f64);
        assert_eq!(apply_mask(&i, &PixelMask::full(2, 3)).unwrap(), i.pixels);
        assert!(matches!(apply_mask(&i, &PixelMask::full(3, 2)), Err(SonoError::DimMismatch { .. })));
    }
}
