use serde::{Deserialize, Serialize};

use super::tcn::check_set;
use super::{
    fit_standardizer_once, open_checkpoint, read_standardizer, to_dof, write_standardizer, InputSpec,
    ModelError, ModelKind, Regressor, SequenceSet, TrainOptions, TrainReport,
};
use crate::kinematics::DofVector;
use crate::neural::gemm;
use crate::signal::{FeatureSequence, Standardizer};
use crate::storage::checkpoint::{self, ByteWriter};
use crate::DOF;

/// Shrinks the quadratic coefficient away from zero in the pair update.
const TAU: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvrConfig {
    pub gamma: f64,
    pub c: f64,
    pub epsilon: f64,
    pub tol: f64,
    pub max_passes: usize,
    pub window_ms: u32,
    /// Training frames kept after even thinning; 0 keeps all.
    pub max_train: usize,
}

impl Default for SvrConfig {
    fn default() -> Self {
        Self { gamma: 0.01, c: 1.0, epsilon: 0.05, tol: 1e-3, max_passes: 200, window_ms: 200, max_train: 3000 }
    }
}

impl SvrConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = self.c > 0.0 && self.gamma > 0.0 && self.epsilon >= 0.0 && self.tol > 0.0 && self.max_passes > 0;
        if !ok || !self.c.is_finite() || !self.gamma.is_finite() || !self.epsilon.is_finite() {
            return Err(ModelError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

pub fn rbf_kernel(u: &[f64], v: &[f64], gamma: f64) -> f64 {
    let d2: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
    (-gamma * d2).exp()
}

/// Dense kernel matrix over the training frames, shared by all DoFs.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    n: usize,
    k: Vec<f64>,
}

impl GramMatrix {
    pub fn new(rows: &[&[f64]], gamma: f64) -> Self {
        let n = rows.len();
        let dim = rows.first().map_or(0, |r| r.len());
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let mut k = vec![0.0; n * n];
        cross_kernel(&flat, &flat, n, n, dim, gamma, &mut k);
        for i in 0..n {
            k[i * n + i] = 1.0;
        }
        Self { n, k }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.k[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.k[i * self.n..(i + 1) * self.n]
    }
}

/// RBF kernel between every row of `a` (m x dim) and every row of `b`
/// (n x dim), written to `out` (m x n).
fn cross_kernel(a: &[f64], b: &[f64], m: usize, n: usize, dim: usize, gamma: f64, out: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    gemm(m, dim, n, a, false, b, true, 0.0, out);
    let na: Vec<f64> = a.chunks(dim.max(1)).take(m).map(|r| r.iter().map(|x| x * x).sum()).collect();
    let nb: Vec<f64> = b.chunks(dim.max(1)).take(n).map(|r| r.iter().map(|x| x * x).sum()).collect();
    for i in 0..m {
        for j in 0..n {
            let d2 = (na[i] + nb[j] - 2.0 * out[i * n + j]).max(0.0);
            out[i * n + j] = (-gamma * d2).exp();
        }
    }
}

/// One epsilon-SVR solution: `f(x) = sum_i (alpha_i - alpha*_i) k(x_i, x) + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvrMachine {
    pub alpha: Vec<f64>,
    pub alpha_star: Vec<f64>,
    pub b: f64,
    pub iterations: usize,
}

impl SvrMachine {
    pub fn coef(&self, i: usize) -> f64 {
        self.alpha[i] - self.alpha_star[i]
    }

    pub fn support_count(&self) -> usize {
        (0..self.alpha.len()).filter(|&i| self.coef(i) != 0.0).count()
    }

    /// Decision value on training sample `i`.
    pub fn decision_train(&self, gram: &GramMatrix, i: usize) -> f64 {
        gram.row(i).iter().enumerate().map(|(j, k)| self.coef(j) * k).sum::<f64>() + self.b
    }
}

/// Dual objective in minimisation form:
/// `1/2 sum_ij c_i c_j K_ij + eps sum_i (a_i + a*_i) - sum_i y_i c_i`, `c = a - a*`.
pub fn dual_objective(gram: &GramMatrix, y: &[f64], alpha: &[f64], alpha_star: &[f64], epsilon: f64) -> f64 {
    let n = gram.len();
    let c: Vec<f64> = (0..n).map(|i| alpha[i] - alpha_star[i]).collect();
    let mut quad = 0.0;
    for i in 0..n {
        let row = gram.row(i);
        quad += c[i] * row.iter().zip(&c).map(|(k, cj)| k * cj).sum::<f64>();
    }
    let lin: f64 = (0..n).map(|i| epsilon * (alpha[i] + alpha_star[i]) - y[i] * c[i]).sum();
    0.5 * quad + lin
}

/// Largest violation of the complementary-slackness conditions over the
/// training set, in target units.
pub fn kkt_violation(gram: &GramMatrix, y: &[f64], m: &SvrMachine, c: f64, epsilon: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..gram.len() {
        let e = m.decision_train(gram, i) - y[i];
        // alpha_i pushes f up: gradient e + eps.
        let ga = e + epsilon;
        // alpha*_i pushes f down: gradient eps - e.
        let gs = epsilon - e;
        for (a, g) in [(m.alpha[i], ga), (m.alpha_star[i], gs)] {
            let v = if a <= 0.0 {
                (-g).max(0.0)
            } else if a >= c {
                g.max(0.0)
            } else {
                g.abs()
            };
            worst = worst.max(v);
        }
    }
    worst
}

/// Solves the epsilon-SVR dual by SMO with second-order working-set
/// selection. Variables `0..n` are the `alpha`, `n..2n` the `alpha*`.
pub fn svr_fit(gram: &GramMatrix, y: &[f64], cfg: &SvrConfig) -> Result<SvrMachine, ModelError> {
    cfg.validate()?;
    let n = gram.len();
    if n == 0 || y.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if y.len() != n {
        return Err(ModelError::SpecMismatch(format!("{} targets for {n} frames", y.len())));
    }
    let l = 2 * n;
    let c = cfg.c;
    let z = |t: usize| if t < n { 1.0 } else { -1.0 };
    let kq = |s: usize, t: usize| gram.get(s % n, t % n);
    let mut beta = vec![0.0; l];
    let mut grad: Vec<f64> = (0..l).map(|t| if t < n { cfg.epsilon - y[t] } else { cfg.epsilon + y[t - n] }).collect();

    let max_iter = cfg.max_passes.saturating_mul(l);
    let mut iter = 0;
    loop {
        // Maximal violating i, then j by the largest second-order gain.
        let (mut gmax, mut imax) = (f64::NEG_INFINITY, usize::MAX);
        for t in 0..l {
            if z(t) > 0.0 {
                if beta[t] < c && -grad[t] >= gmax {
                    gmax = -grad[t];
                    imax = t;
                }
            } else if beta[t] > 0.0 && grad[t] >= gmax {
                gmax = grad[t];
                imax = t;
            }
        }
        let (mut gmax2, mut jmin, mut obj_min) = (f64::NEG_INFINITY, usize::MAX, f64::INFINITY);
        for t in 0..l {
            let (movable, gd, g2) = if z(t) > 0.0 {
                (beta[t] > 0.0, gmax + grad[t], grad[t])
            } else {
                (beta[t] < c, gmax - grad[t], -grad[t])
            };
            if !movable {
                continue;
            }
            gmax2 = gmax2.max(g2);
            if imax != usize::MAX && gd > 0.0 {
                let mut quad = kq(imax, imax) + kq(t, t) - 2.0 * kq(imax, t);
                if quad <= 0.0 {
                    quad = TAU;
                }
                let obj = -(gd * gd) / quad;
                if obj <= obj_min {
                    obj_min = obj;
                    jmin = t;
                }
            }
        }
        if gmax + gmax2 < cfg.tol || jmin == usize::MAX || imax == usize::MAX {
            break;
        }
        if iter >= max_iter {
            return Err(ModelError::NoConvergence(iter));
        }
        iter += 1;

        let (i, j) = (imax, jmin);
        let (old_i, old_j) = (beta[i], beta[j]);
        let kij = kq(i, j);
        if z(i) != z(j) {
            let mut quad = kq(i, i) + kq(j, j) - 2.0 * kij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = beta[i] - beta[j];
            beta[i] += delta;
            beta[j] += delta;
            if diff > 0.0 {
                if beta[j] < 0.0 {
                    beta[j] = 0.0;
                    beta[i] = diff;
                }
            } else if beta[i] < 0.0 {
                beta[i] = 0.0;
                beta[j] = -diff;
            }
            if diff > 0.0 {
                if beta[i] > c {
                    beta[i] = c;
                    beta[j] = c - diff;
                }
            } else if beta[j] > c {
                beta[j] = c;
                beta[i] = c + diff;
            }
        } else {
            let mut quad = kq(i, i) + kq(j, j) - 2.0 * kij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (grad[i] - grad[j]) / quad;
            let sum = beta[i] + beta[j];
            beta[i] -= delta;
            beta[j] += delta;
            if sum > c {
                if beta[i] > c {
                    beta[i] = c;
                    beta[j] = sum - c;
                }
            } else if beta[j] < 0.0 {
                beta[j] = 0.0;
                beta[i] = sum;
            }
            if sum > c {
                if beta[j] > c {
                    beta[j] = c;
                    beta[i] = sum - c;
                }
            } else if beta[i] < 0.0 {
                beta[i] = 0.0;
                beta[j] = sum;
            }
        }

        let (di, dj) = (beta[i] - old_i, beta[j] - old_j);
        let (ri, rj) = (gram.row(i % n), gram.row(j % n));
        let (zi, zj) = (z(i), z(j));
        for t in 0..l {
            let zt = z(t);
            let s = t % n;
            grad[t] += zt * (zi * ri[s] * di + zj * rj[s] * dj);
        }
    }

    // Offset from free variables, or the midpoint of the feasible interval.
    let (mut ub, mut lb, mut sum_free, mut n_free) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for t in 0..l {
        let yg = z(t) * grad[t];
        let upper = beta[t] >= c;
        let lower = beta[t] <= 0.0;
        if upper {
            if z(t) < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if lower {
            if z(t) > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 { sum_free / n_free as f64 } else { (ub + lb) / 2.0 };

    Ok(SvrMachine { alpha: beta[..n].to_vec(), alpha_star: beta[n..].to_vec(), b: -rho, iterations: iter })
}

/// Seven independent RBF machines over single standardized frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SvrRegressor {
    pub config: SvrConfig,
    dim: usize,
    std: Standardizer,
    /// Support frames (standardized), `m x dim`.
    support: Vec<f64>,
    /// Dual coefficients, `m x DOF`.
    coef: Vec<f64>,
    b: [f64; DOF],
    trained: bool,
}

impl SvrRegressor {
    pub fn new(config: SvrConfig, feature_dim: usize) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Self {
            config,
            dim: feature_dim,
            std: Standardizer::default(),
            support: Vec::new(),
            coef: Vec::new(),
            b: [0.0; DOF],
            trained: false,
        })
    }

    pub fn set_standardizer(&mut self, std: Standardizer) {
        self.std = std;
    }

    pub fn support_count(&self) -> usize {
        self.coef.len() / DOF
    }

    /// Decision values for `m` standardized frames, clipped to `[0, 1]`.
    fn decide(&self, frames: &[f64], m: usize) -> Vec<DofVector> {
        let n_sv = self.support_count();
        let mut k = vec![0.0; m * n_sv];
        cross_kernel(frames, &self.support, m, n_sv, self.dim, self.config.gamma, &mut k);
        let mut out = vec![0.0; m * DOF];
        if n_sv > 0 {
            gemm(m, n_sv, DOF, &k, false, &self.coef, false, 0.0, &mut out);
        }
        out.chunks(DOF)
            .map(|r| {
                let mut row = [0.0; DOF];
                for d in 0..DOF {
                    row[d] = r[d] + self.b[d];
                }
                to_dof(&row)
            })
            .collect()
    }

    pub fn checkpoint_load(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut blocks = open_checkpoint(bytes, ModelKind::Svr)?;
        let c = &mut blocks.config;
        let config = SvrConfig {
            gamma: c.get_f64()?,
            c: c.get_f64()?,
            epsilon: c.get_f64()?,
            tol: c.get_f64()?,
            max_passes: c.get_u64()? as usize,
            window_ms: c.get_u32()?,
            max_train: c.get_u64()? as usize,
        };
        let dim = c.get_u64()? as usize;
        let mut model = Self::new(config, dim)?;
        let p = &mut blocks.params;
        model.std = read_standardizer(p)?;
        model.trained = p.get_u8()? != 0;
        model.support = p.get_f64s()?;
        model.coef = p.get_f64s()?;
        let b = p.get_f64s()?;
        if b.len() != DOF
            || model.coef.len() % DOF != 0
            || model.support.len() != model.support_count() * dim
            || p.remaining() != 0
        {
            return Err(ModelError::CorruptCheckpoint("inconsistent support vector block".into()));
        }
        model.b.copy_from_slice(&b);
        Ok(model)
    }
}

impl Regressor for SvrRegressor {
    fn kind(&self) -> ModelKind {
        ModelKind::Svr
    }

    fn input_spec(&self) -> InputSpec {
        InputSpec { window_ms: self.config.window_ms, seq_len: 1, feature_dim: self.dim }
    }

    fn predict(&self, seq: &FeatureSequence) -> Result<DofVector, ModelError> {
        self.input_spec().check(seq)?;
        if !self.trained {
            return Err(ModelError::NotTrained);
        }
        let mut x = seq.steps()[0].values.clone();
        if self.std.is_fitted() {
            self.std.apply_in_place(&mut x)?;
        }
        Ok(self.decide(&x, 1)[0])
    }

    fn predict_set(&self, set: &SequenceSet) -> Result<Vec<DofVector>, ModelError> {
        if set.seq_len() != 1 || (set.dim() != self.dim && !set.is_empty()) {
            return Err(ModelError::SpecMismatch(format!(
                "set of {} x {} for model expecting 1 x {}",
                set.seq_len(),
                set.dim(),
                self.dim
            )));
        }
        if !self.trained {
            return Err(ModelError::NotTrained);
        }
        const CHUNK: usize = 256;
        let mut out = Vec::with_capacity(set.len());
        let idx: Vec<usize> = (0..set.len()).collect();
        for chunk in idx.chunks(CHUNK) {
            let mut frames = Vec::with_capacity(chunk.len() * self.dim);
            for &i in chunk {
                let start = frames.len();
                frames.extend_from_slice(set.sequence(i));
                if self.std.is_fitted() {
                    self.std.apply_in_place(&mut frames[start..])?;
                }
            }
            out.extend(self.decide(&frames, chunk.len()));
        }
        Ok(out)
    }

    fn train(&mut self, data: &SequenceSet, _opts: &TrainOptions) -> Result<TrainReport, ModelError> {
        check_set(&self.input_spec(), data)?;
        data.check_targets()?;
        let cap = if self.config.max_train == 0 { None } else { Some(self.config.max_train) };
        let data = data.thinned(1, cap);
        if data.len() < 2 {
            return Err(ModelError::EmptyDataset);
        }
        fit_standardizer_once(&mut self.std, &data)?;
        let mut frames = Vec::with_capacity(data.len() * self.dim);
        for i in 0..data.len() {
            let start = frames.len();
            frames.extend_from_slice(data.sequence(i));
            if self.std.is_fitted() {
                self.std.apply_in_place(&mut frames[start..])?;
            }
        }
        let rows: Vec<&[f64]> = frames.chunks(self.dim.max(1)).collect();
        let gram = GramMatrix::new(&rows, self.config.gamma);

        let mut machines = Vec::with_capacity(DOF);
        let mut loss = 0.0;
        for d in 0..DOF {
            let y: Vec<f64> = data.targets().iter().map(|t| t.phi[d]).collect();
            let m = svr_fit(&gram, &y, &self.config)?;
            loss += (0..data.len())
                .map(|i| (m.decision_train(&gram, i).clamp(0.0, 1.0) - y[i]).powi(2))
                .sum::<f64>();
            machines.push(m);
        }

        let support: Vec<usize> = (0..data.len()).filter(|&i| machines.iter().any(|m| m.coef(i) != 0.0)).collect();
        self.support = support.iter().flat_map(|&i| rows[i].iter().copied()).collect();
        self.coef = support.iter().flat_map(|&i| machines.iter().map(move |m| m.coef(i))).collect();
        for (d, m) in machines.iter().enumerate() {
            self.b[d] = m.b;
        }
        self.trained = true;
        Ok(TrainReport { epoch_loss: vec![loss / (data.len() * DOF) as f64], samples: data.len() })
    }

    fn reinforce_update(
        &mut self,
        _trial: &SequenceSet,
        _epochs: usize,
        _opts: &TrainOptions,
    ) -> Result<TrainReport, ModelError> {
        Err(ModelError::UnsupportedModel(ModelKind::Svr))
    }

    fn standardizer(&self) -> &Standardizer {
        &self.std
    }

    fn checkpoint_save(&self) -> Vec<u8> {
        let mut c = ByteWriter::new();
        c.put_f64(self.config.gamma);
        c.put_f64(self.config.c);
        c.put_f64(self.config.epsilon);
        c.put_f64(self.config.tol);
        c.put_u64(self.config.max_passes as u64);
        c.put_u32(self.config.window_ms);
        c.put_u64(self.config.max_train as u64);
        c.put_u64(self.dim as u64);
        let mut p = ByteWriter::new();
        write_standardizer(&mut p, &self.std);
        p.put_u8(u8::from(self.trained));
        p.put_f64s(&self.support);
        p.put_f64s(&self.coef);
        p.put_f64s(&self.b);
        checkpoint::encode(ModelKind::Svr.tag(), &c.into_bytes(), &p.into_bytes())
    }

    fn box_clone(&self) -> Box<dyn Regressor> {
        Box::new(self.clone())
    }
}
