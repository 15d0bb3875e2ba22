//! Minimal differentiable building blocks: dense and causal dilated
//! convolution layers, an LSTM layer, sigmoid/ReLU, MSE loss and Adam, each
//! with a hand-written backward pass, plus a central-difference gradient
//! audit.
//!
//! Batches of sequences are laid out as `(batch * len) x channels` matrices,
//! sequence-major: row `b * len + t` is timestep `t` of item `b`.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),
}

fn shape_err(msg: impl Into<String>) -> NeuralError {
    NeuralError::ShapeMismatch(msg.into())
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NeuralError> {
        if data.len() != rows * cols {
            return Err(shape_err(format!("{} values for {rows}x{cols}", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c = a' * b' + beta * c` where `a'` is `m x k` and `b'` is `k x n`;
/// `ta`/`tb` mean the stored matrix is the transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the index ranges implied by the
    // dimensions and strides above (checked by the debug assertions).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean squared error over every entry and its gradient w.r.t. `pred`.
pub fn mse_loss(pred: &Tensor2, truth: &Tensor2) -> Result<(f64, Tensor2), NeuralError> {
    if pred.rows != truth.rows || pred.cols != truth.cols {
        return Err(shape_err(format!(
            "pred {}x{} vs truth {}x{}",
            pred.rows, pred.cols, truth.rows, truth.cols
        )));
    }
    let n = pred.data.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor2::zeros(pred.rows, pred.cols);
    for ((g, &p), &t) in grad.data.iter_mut().zip(&pred.data).zip(&truth.data) {
        let d = p - t;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}

/// A trainable parameter tensor with its gradient and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Param {
    pub fn new(value: Vec<f64>) -> Self {
        let n = value.len();
        Self { value, grad: vec![0.0; n], m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(vec![0.0; n])
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn fan_in_uniform<R: Rng>(n: usize, fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Self::new((0..n).map(|_| rng.random_range(-bound..bound)).collect())
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of `param` using `grads`.
pub fn adam_step(param: &mut Param, grads: &[f64], cfg: &AdamConfig) -> Result<(), NeuralError> {
    if grads.len() != param.value.len() {
        return Err(shape_err(format!("{} grads for {} params", grads.len(), param.value.len())));
    }
    param.step += 1;
    let t = param.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..grads.len() {
        let g = grads[i];
        param.m[i] = cfg.beta1 * param.m[i] + (1.0 - cfg.beta1) * g;
        param.v[i] = cfg.beta2 * param.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = param.m[i] / c1;
        let v_hat = param.v[i] / c2;
        param.value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

impl Param {
    /// Adam update from the accumulated gradient.
    pub fn adam(&mut self, cfg: &AdamConfig) {
        let grads = std::mem::take(&mut self.grad);
        adam_step(self, &grads, cfg).expect("gradient buffer mirrors the parameter");
        self.grad = grads;
    }
}

/// Fully connected layer, `w` stored `inputs x outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub w: Param,
    pub b: Param,
}

impl Dense {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            inputs,
            outputs,
            w: Param::fan_in_uniform(inputs * outputs, inputs, rng),
            b: Param::fan_in_uniform(outputs, inputs, rng),
        }
    }

    pub fn zeroed(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, w: Param::zeros(inputs * outputs), b: Param::zeros(outputs) }
    }

    pub fn forward(&self, x: &Tensor2) -> Result<Tensor2, NeuralError> {
        if x.cols != self.inputs {
            return Err(shape_err(format!("dense expects {} inputs, got {}", self.inputs, x.cols)));
        }
        let mut y = Tensor2::zeros(x.rows, self.outputs);
        for r in 0..x.rows {
            y.row_mut(r).copy_from_slice(&self.b.value);
        }
        gemm(x.rows, self.inputs, self.outputs, &x.data, false, &self.w.value, false, 1.0, &mut y.data);
        Ok(y)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &Tensor2, dy: &Tensor2) -> Tensor2 {
        gemm(self.inputs, x.rows, self.outputs, &x.data, true, &dy.data, false, 1.0, &mut self.w.grad);
        for r in 0..dy.rows {
            for (g, &d) in self.b.grad.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        let mut dx = Tensor2::zeros(x.rows, self.inputs);
        gemm(x.rows, self.outputs, self.inputs, &dy.data, false, &self.w.value, true, 0.0, &mut dx.data);
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Zero-padded causal dilated convolution as a standalone function.
///
/// `x` is `L x Cin`, `w` is laid out `[k][i][o]` (`K x Cin x Cout`) and
/// `y[t, o] = b[o] + sum_k sum_i w[k, i, o] * x[t - k * dilation, i]`.
pub fn causal_conv1d(
    x: &Tensor2,
    w: &[f64],
    kernel: usize,
    b: &[f64],
    dilation: usize,
) -> Result<Tensor2, NeuralError> {
    let cin = x.cols;
    let cout = b.len();
    if kernel == 0 || dilation == 0 {
        return Err(shape_err("kernel and dilation must be >= 1"));
    }
    if w.len() != kernel * cin * cout {
        return Err(shape_err(format!("{} weights for K={kernel} Cin={cin} Cout={cout}", w.len())));
    }
    let mut y = Tensor2::zeros(x.rows, cout);
    for t in 0..x.rows {
        let out = y.row_mut(t);
        out.copy_from_slice(b);
        for k in 0..kernel {
            let Some(src) = t.checked_sub(k * dilation) else { break };
            for (i, &xv) in x.row(src).iter().enumerate() {
                let wrow = &w[(k * cin + i) * cout..(k * cin + i + 1) * cout];
                for (o, &wv) in wrow.iter().enumerate() {
                    out[o] += wv * xv;
                }
            }
        }
    }
    Ok(y)
}

/// Batched causal dilated convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalConv1d {
    pub kernel: usize,
    pub dilation: usize,
    pub cin: usize,
    pub cout: usize,
    /// `(kernel * cin) x cout`, i.e. the `[k][i][o]` layout.
    pub w: Param,
    pub b: Param,
}

impl CausalConv1d {
    pub fn new<R: Rng>(cin: usize, cout: usize, kernel: usize, dilation: usize, rng: &mut R) -> Self {
        let fan_in = kernel * cin;
        Self {
            kernel,
            dilation,
            cin,
            cout,
            w: Param::fan_in_uniform(fan_in * cout, fan_in, rng),
            b: Param::fan_in_uniform(cout, fan_in, rng),
        }
    }

    fn im2col(&self, x: &Tensor2, len: usize) -> Tensor2 {
        let width = self.kernel * self.cin;
        let mut cols = Tensor2::zeros(x.rows, width);
        for r in 0..x.rows {
            let t = r % len;
            let dst = cols.row_mut(r);
            for k in 0..self.kernel {
                let Some(back) = t.checked_sub(k * self.dilation) else { break };
                let src = r - t + back;
                dst[k * self.cin..(k + 1) * self.cin].copy_from_slice(x.row(src));
            }
        }
        cols
    }

    /// Returns the output and the im2col cache needed by [`Self::backward`].
    pub fn forward(&self, x: &Tensor2, len: usize) -> Result<(Tensor2, Tensor2), NeuralError> {
        if x.cols != self.cin || len == 0 || x.rows % len != 0 {
            return Err(shape_err(format!(
                "conv expects (B*{len}) x {}, got {}x{}",
                self.cin, x.rows, x.cols
            )));
        }
        let cols = self.im2col(x, len);
        let mut y = Tensor2::zeros(x.rows, self.cout);
        for r in 0..x.rows {
            y.row_mut(r).copy_from_slice(&self.b.value);
        }
        gemm(x.rows, self.kernel * self.cin, self.cout, &cols.data, false, &self.w.value, false, 1.0, &mut y.data);
        Ok((y, cols))
    }

    pub fn backward(&mut self, cols: &Tensor2, dy: &Tensor2, len: usize) -> Tensor2 {
        let width = self.kernel * self.cin;
        gemm(width, cols.rows, self.cout, &cols.data, true, &dy.data, false, 1.0, &mut self.w.grad);
        for r in 0..dy.rows {
            for (g, &d) in self.b.grad.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        let mut dcols = Tensor2::zeros(cols.rows, width);
        gemm(cols.rows, self.cout, width, &dy.data, false, &self.w.value, true, 0.0, &mut dcols.data);
        let mut dx = Tensor2::zeros(cols.rows, self.cin);
        for r in 0..cols.rows {
            let t = r % len;
            for k in 0..self.kernel {
                let Some(back) = t.checked_sub(k * self.dilation) else { break };
                let src = r - t + back;
                let g = &dcols.data[r * width + k * self.cin..r * width + (k + 1) * self.cin];
                for (d, &v) in dx.row_mut(src).iter_mut().zip(g) {
                    *d += v;
                }
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

pub fn relu_in_place(x: &mut Tensor2) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `dy` wherever the ReLU output was not positive.
pub fn relu_backward(out: &Tensor2, dy: &mut Tensor2) {
    for (d, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
}

/// Number of gates packed in an LSTM weight matrix (i, f, g, o).
const GATES: usize = 4;

/// One LSTM step for a single example.
///
/// `w` is `(inputs + hidden) x 4*hidden` row-major, columns grouped by gate
/// in the order input, forget, cell candidate, output; `b` has `4*hidden`
/// entries in the same order.
pub fn lstm_step(
    x: &[f64],
    h: &[f64],
    c: &[f64],
    w: &[f64],
    b: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), NeuralError> {
    let hidden = h.len();
    let width = x.len() + hidden;
    if c.len() != hidden || b.len() != GATES * hidden || w.len() != width * GATES * hidden {
        return Err(shape_err(format!(
            "lstm step: x {} h {} c {} w {} b {}",
            x.len(),
            hidden,
            c.len(),
            w.len(),
            b.len()
        )));
    }
    let mut z = b.to_vec();
    for (r, &v) in x.iter().chain(h.iter()).enumerate() {
        for (zj, &wj) in z.iter_mut().zip(&w[r * GATES * hidden..(r + 1) * GATES * hidden]) {
            *zj += v * wj;
        }
    }
    let mut h_new = vec![0.0; hidden];
    let mut c_new = vec![0.0; hidden];
    for j in 0..hidden {
        let i = sigmoid(z[j]);
        let f = sigmoid(z[hidden + j]);
        let g = z[2 * hidden + j].tanh();
        let o = sigmoid(z[3 * hidden + j]);
        c_new[j] = f * c[j] + i * g;
        h_new[j] = o * c_new[j].tanh();
    }
    Ok((h_new, c_new))
}

/// Single-layer LSTM over batched sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    pub inputs: usize,
    pub hidden: usize,
    pub w: Param,
    pub b: Param,
}

/// Per-timestep activations kept for backpropagation through time.
#[derive(Debug, Clone)]
pub struct LstmCache {
    len: usize,
    batch: usize,
    /// `[x_t, h_{t-1}]` per step, `batch x (inputs + hidden)`.
    zin: Vec<Tensor2>,
    /// Activated gates per step, `batch x 4*hidden`.
    gates: Vec<Tensor2>,
    /// Cell state per step including the initial zero state (`len + 1`).
    cells: Vec<Tensor2>,
}

impl LstmLayer {
    pub fn new<R: Rng>(inputs: usize, hidden: usize, rng: &mut R) -> Self {
        let width = inputs + hidden;
        let w = Param::fan_in_uniform(width * GATES * hidden, width, rng);
        let mut b = Param::fan_in_uniform(GATES * hidden, width, rng);
        for v in &mut b.value[hidden..2 * hidden] {
            *v = 1.0;
        }
        Self { inputs, hidden, w, b }
    }

    /// Runs the sequence and returns the final hidden state (`batch x hidden`).
    pub fn forward(&self, x: &Tensor2, len: usize) -> Result<(Tensor2, LstmCache), NeuralError> {
        if x.cols != self.inputs || len == 0 || x.rows % len != 0 {
            return Err(shape_err(format!(
                "lstm expects (B*{len}) x {}, got {}x{}",
                self.inputs, x.rows, x.cols
            )));
        }
        let batch = x.rows / len;
        let (hd, width) = (self.hidden, self.inputs + self.hidden);
        let mut h = Tensor2::zeros(batch, hd);
        let mut cache = LstmCache {
            len,
            batch,
            zin: Vec::with_capacity(len),
            gates: Vec::with_capacity(len),
            cells: vec![Tensor2::zeros(batch, hd)],
        };
        for t in 0..len {
            let mut zin = Tensor2::zeros(batch, width);
            for b in 0..batch {
                let row = zin.row_mut(b);
                row[..self.inputs].copy_from_slice(x.row(b * len + t));
                row[self.inputs..].copy_from_slice(h.row(b));
            }
            let mut z = Tensor2::zeros(batch, GATES * hd);
            for b in 0..batch {
                z.row_mut(b).copy_from_slice(&self.b.value);
            }
            gemm(batch, width, GATES * hd, &zin.data, false, &self.w.value, false, 1.0, &mut z.data);
            let c_prev = cache.cells.last().expect("initial cell state");
            let mut c = Tensor2::zeros(batch, hd);
            for b in 0..batch {
                let zr = z.row_mut(b);
                for j in 0..hd {
                    zr[j] = sigmoid(zr[j]);
                    zr[hd + j] = sigmoid(zr[hd + j]);
                    zr[2 * hd + j] = zr[2 * hd + j].tanh();
                    zr[3 * hd + j] = sigmoid(zr[3 * hd + j]);
                }
                let cp = c_prev.row(b);
                let cr = c.row_mut(b);
                for j in 0..hd {
                    cr[j] = zr[hd + j] * cp[j] + zr[j] * zr[2 * hd + j];
                }
                let hr = h.row_mut(b);
                for j in 0..hd {
                    hr[j] = zr[3 * hd + j] * cr[j].tanh();
                }
            }
            cache.zin.push(zin);
            cache.gates.push(z);
            cache.cells.push(c);
        }
        Ok((h, cache))
    }

    /// Backpropagation through time from a gradient on the final hidden state.
    /// Returns `dL/dx` with the input layout.
    pub fn backward(&mut self, cache: &LstmCache, dh_last: &Tensor2) -> Tensor2 {
        let (hd, width) = (self.hidden, self.inputs + self.hidden);
        let (len, batch) = (cache.len, cache.batch);
        let mut dx = Tensor2::zeros(batch * len, self.inputs);
        let mut dh = dh_last.clone();
        let mut dc = Tensor2::zeros(batch, hd);
        let mut dz = Tensor2::zeros(batch, GATES * hd);
        let mut dzin = Tensor2::zeros(batch, width);
        for t in (0..len).rev() {
            let gates = &cache.gates[t];
            let c = &cache.cells[t + 1];
            let c_prev = &cache.cells[t];
            for b in 0..batch {
                let g = gates.row(b);
                let (dhr, dcr) = (dh.row(b), dc.row_mut(b));
                let dzr = &mut dz.data[b * GATES * hd..(b + 1) * GATES * hd];
                for j in 0..hd {
                    let (i, f, gg, o) = (g[j], g[hd + j], g[2 * hd + j], g[3 * hd + j]);
                    let tc = c.at(b, j).tanh();
                    let dcj = dcr[j] + dhr[j] * o * (1.0 - tc * tc);
                    dzr[j] = dcj * gg * i * (1.0 - i);
                    dzr[hd + j] = dcj * c_prev.at(b, j) * f * (1.0 - f);
                    dzr[2 * hd + j] = dcj * i * (1.0 - gg * gg);
                    dzr[3 * hd + j] = dhr[j] * tc * o * (1.0 - o);
                    dcr[j] = dcj * f;
                }
            }
            gemm(width, batch, GATES * hd, &cache.zin[t].data, true, &dz.data, false, 1.0, &mut self.w.grad);
            for b in 0..batch {
                for (gb, &d) in self.b.grad.iter_mut().zip(dz.row(b)) {
                    *gb += d;
                }
            }
            gemm(batch, GATES * hd, width, &dz.data, false, &self.w.value, true, 0.0, &mut dzin.data);
            for b in 0..batch {
                let row = dzin.row(b);
                dx.row_mut(b * len + t).copy_from_slice(&row[..self.inputs]);
                dh.row_mut(b).copy_from_slice(&row[self.inputs..]);
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

/// A model whose loss on a fixed batch can be evaluated and differentiated.
pub trait Differentiable {
    type Batch;

    /// Deterministic (inference-mode) loss.
    fn loss(&self, batch: &Self::Batch) -> Result<f64, NeuralError>;

    /// Deterministic loss with gradients accumulated into every [`Param`].
    fn loss_and_grad(&mut self, batch: &Self::Batch) -> Result<f64, NeuralError>;

    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// Central-difference audit of analytic gradients.
///
/// Checks at most `per_param` evenly spaced entries of each parameter tensor
/// (`None` checks all) and returns the largest
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn finite_diff_check<M: Differentiable>(
    model: &mut M,
    batch: &M::Batch,
    h: f64,
    per_param: Option<usize>,
) -> Result<f64, NeuralError> {
    model.zero_grad();
    let base = model.loss_and_grad(batch)?;
    if !base.is_finite() {
        return Err(NeuralError::NonFiniteLoss(base));
    }
    let analytic: Vec<Vec<f64>> = model.params_mut().into_iter().map(|p| p.grad.clone()).collect();
    let mut worst = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        let n = grads.len();
        let count = per_param.map_or(n, |c| c.min(n));
        for s in 0..count {
            let idx = if count == n { s } else { (s * n) / count + (n / count) / 2 };
            let original = model.params_mut()[pi].value[idx];
            model.params_mut()[pi].value[idx] = original + h;
            let up = model.loss(batch)?;
            model.params_mut()[pi].value[idx] = original - h;
            let down = model.loss(batch)?;
            model.params_mut()[pi].value[idx] = original;
            if !up.is_finite() || !down.is_finite() {
                return Err(NeuralError::NonFiniteLoss(if up.is_finite() { down } else { up }));
            }
            let numeric = (up - down) / (2.0 * h);
            let a = grads[idx];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
