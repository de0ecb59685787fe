//! Fully connected classifier: hidden layers of linear → batch norm → ReLU →
//! dropout, then a linear logit and a logistic output. Gradients are
//! computed by hand; all arithmetic is `f64`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::features::FeatureMatrix;
use crate::persistence::{read_artifact, write_artifact, ArtifactError, ArtifactKind, PayloadReader, PayloadWriter};

pub const DEFAULT_DIMS: [usize; 5] = [1545, 512, 256, 64, 1];
pub const DEFAULT_DROPOUT: f64 = 0.3;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const PROB_CLAMP: f64 = 1e-7;
const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid layer dims {0:?}: need at least two positive sizes ending in 1")]
    InvalidDims(Vec<usize>),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("train-mode forward needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (learning rate {learning_rate})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        learning_rate: f64,
    },
    #[error("labels must contain both classes")]
    DegenerateLabels,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Number of trainable parameters: every linear layer's weights and biases
/// plus a scale and shift per hidden unit.
pub fn parameter_count(dims: &[usize]) -> usize {
    let linear: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    let norm: usize = dims[1..dims.len() - 1].iter().map(|h| 2 * h).sum();
    linear + norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Slots {
    n_in: usize,
    n_out: usize,
    w: usize,
    b: usize,
    gamma: usize,
    beta: usize,
}

fn layout(dims: &[usize]) -> Vec<Slots> {
    let mut off = 0;
    let mut slots: Vec<Slots> = dims
        .windows(2)
        .map(|w| {
            let s = Slots {
                n_in: w[0],
                n_out: w[1],
                w: off,
                b: off + w[0] * w[1],
                gamma: usize::MAX,
                beta: usize::MAX,
            };
            off = s.b + w[1];
            s
        })
        .collect();
    let hidden = slots.len() - 1;
    for s in &mut slots[..hidden] {
        s.gamma = off;
        s.beta = off + s.n_out;
        off += 2 * s.n_out;
    }
    slots
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Model inputs: a dense row-major matrix or a feature matrix.
#[derive(Debug, Clone, Copy)]
pub enum Inputs<'a> {
    Dense { x: &'a [f64], dim: usize },
    Sparse(&'a FeatureMatrix),
}

impl Inputs<'_> {
    pub fn dim(&self) -> usize {
        match self {
            Inputs::Dense { dim, .. } => *dim,
            Inputs::Sparse(m) => m.dim(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Inputs::Dense { x, dim } => x.len() / dim,
            Inputs::Sparse(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn gather(&self, rows: &[usize]) -> Vec<f64> {
        let Inputs::Dense { x, dim } = *self else { unreachable!() };
        let mut buf = Vec::with_capacity(rows.len() * dim);
        for &r in rows {
            buf.extend_from_slice(&x[r * dim..(r + 1) * dim]);
        }
        buf
    }
}

/// `c = a · b + beta · c` for row-major `c` (m×n); `a` (m×k) and `b` (k×n)
/// are given with explicit (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |r: usize, c: usize, s: (usize, usize)| (r - 1) * s.0 + (c - 1) * s.1 + 1;
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!(a.len() >= extent(m, k, sa) && b.len() >= extent(k, n, sb));
    }
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), sa.0 as isize, sa.1 as isize,
            b.as_ptr(), sb.0 as isize, sb.1 as isize,
            beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

struct HiddenCache {
    /// post-dropout activations (m×n)
    a: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// per-element dropout scale, 0 or 1/(1-p)
    mask: Option<Vec<f64>>,
}

pub struct ForwardCache {
    hidden: Vec<HiddenCache>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    dims: Vec<usize>,
    pub dropout: f64,
    params: Vec<f64>,
    running_mean: Vec<Vec<f64>>,
    running_var: Vec<Vec<f64>>,
    slots: Vec<Slots>,
}

/// Uniform fan-in initialisation, bound `sqrt(6 / fan_in)`; zero biases,
/// unit scales, zero shifts.
pub fn init_model(dims: &[usize], seed: u64) -> Result<MlpModel, ModelError> {
    if dims.len() < 2 || dims.iter().any(|d| *d == 0) || *dims.last().unwrap() != 1 {
        return Err(ModelError::InvalidDims(dims.to_vec()));
    }
    let slots = layout(dims);
    let mut params = vec![0.0; parameter_count(dims)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in &slots {
        let bound = (6.0 / s.n_in as f64).sqrt();
        for w in &mut params[s.w..s.w + s.n_in * s.n_out] {
            *w = rng.gen_range(-bound..bound);
        }
        if s.gamma != usize::MAX {
            params[s.gamma..s.gamma + s.n_out].fill(1.0);
        }
    }
    let hidden = &dims[1..dims.len() - 1];
    Ok(MlpModel {
        dims: dims.to_vec(),
        dropout: DEFAULT_DROPOUT,
        params,
        running_mean: hidden.iter().map(|h| vec![0.0; *h]).collect(),
        running_var: hidden.iter().map(|h| vec![1.0; *h]).collect(),
        slots,
    })
}

impl MlpModel {
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    /// All trainable parameters, flattened layer by layer (weights as
    /// `n_in × n_out` row-major, then biases), followed by the normalization
    /// scales and shifts of each hidden layer.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn running_var(&self) -> &[Vec<f64>] {
        &self.running_var
    }

    fn hidden_count(&self) -> usize {
        self.slots.len() - 1
    }

    fn check_inputs(&self, inputs: &Inputs, rows: &[usize]) -> Result<(), ModelError> {
        if inputs.dim() != self.dims[0] {
            return Err(ModelError::ShapeMismatch(format!(
                "input width {} but model expects {}",
                inputs.dim(),
                self.dims[0]
            )));
        }
        if let Inputs::Dense { x, dim } = inputs {
            if x.len() % dim != 0 {
                return Err(ModelError::ShapeMismatch(format!("{} values is not a multiple of width {dim}", x.len())));
            }
        }
        if let Some(r) = rows.iter().find(|r| **r >= inputs.len()) {
            return Err(ModelError::ShapeMismatch(format!("row {r} out of range ({} rows)", inputs.len())));
        }
        Ok(())
    }

    fn first_linear(&self, inputs: &Inputs, rows: &[usize]) -> Vec<f64> {
        let s = self.slots[0];
        let (w, b) = (&self.params[s.w..s.b], &self.params[s.b..s.b + s.n_out]);
        let m = rows.len();
        let mut z = Vec::with_capacity(m * s.n_out);
        for _ in 0..m {
            z.extend_from_slice(b);
        }
        match inputs {
            Inputs::Dense { .. } => {
                let x = inputs.gather(rows);
                gemm(m, s.n_in, s.n_out, &x, (s.n_in, 1), w, (s.n_out, 1), 1.0, &mut z);
            }
            Inputs::Sparse(fm) => {
                for (i, &r) in rows.iter().enumerate() {
                    let out = &mut z[i * s.n_out..(i + 1) * s.n_out];
                    fm.for_each_nonzero(r, |c, v| axpy(v, &w[c * s.n_out..(c + 1) * s.n_out], out));
                }
            }
        }
        z
    }

    fn linear(&self, l: usize, a: &[f64], m: usize) -> Vec<f64> {
        let s = self.slots[l];
        let b = &self.params[s.b..s.b + s.n_out];
        let mut z = Vec::with_capacity(m * s.n_out);
        for _ in 0..m {
            z.extend_from_slice(b);
        }
        gemm(m, s.n_in, s.n_out, a, (s.n_in, 1), &self.params[s.w..s.b], (s.n_out, 1), 1.0, &mut z);
        z
    }

    /// Train-mode forward pass over `rows`: batch statistics (which also
    /// update the running estimates) and, when `dropout > 0`, fresh masks
    /// drawn from `rng`.
    pub fn forward_train(&mut self, inputs: &Inputs, rows: &[usize], rng: &mut ChaCha8Rng) -> Result<ForwardCache, ModelError> {
        self.check_inputs(inputs, rows)?;
        let m = rows.len();
        if m < 2 {
            return Err(ModelError::BatchTooSmall(m));
        }
        let p = self.dropout;
        let mut hidden = Vec::with_capacity(self.hidden_count());
        let mut z = self.first_linear(inputs, rows);
        for l in 0..self.hidden_count() {
            let s = self.slots[l];
            let n = s.n_out;
            let mut mean = vec![0.0; n];
            for row in z.chunks_exact(n) {
                axpy(1.0, row, &mut mean);
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            let mut var = vec![0.0; n];
            for row in z.chunks_exact(n) {
                for j in 0..n {
                    let d = row[j] - mean[j];
                    var[j] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= m as f64);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let unbias = m as f64 / (m - 1) as f64;
            for j in 0..n {
                self.running_mean[l][j] = (1.0 - BN_MOMENTUM) * self.running_mean[l][j] + BN_MOMENTUM * mean[j];
                self.running_var[l][j] = (1.0 - BN_MOMENTUM) * self.running_var[l][j] + BN_MOMENTUM * var[j] * unbias;
            }
            let gamma = &self.params[s.gamma..s.gamma + n];
            let beta = &self.params[s.beta..s.beta + n];
            let mut xhat = z;
            let mut a = vec![0.0; m * n];
            for (xr, ar) in xhat.chunks_exact_mut(n).zip(a.chunks_exact_mut(n)) {
                for j in 0..n {
                    xr[j] = (xr[j] - mean[j]) * inv_std[j];
                    ar[j] = (gamma[j] * xr[j] + beta[j]).max(0.0);
                }
            }
            let mask = (p > 0.0).then(|| {
                let keep = 1.0 / (1.0 - p);
                let mask: Vec<f64> = (0..m * n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
                a.iter_mut().zip(&mask).for_each(|(v, k)| *v *= k);
                mask
            });
            z = self.linear(l + 1, &a, m);
            hidden.push(HiddenCache { a, xhat, inv_std, mask });
        }
        Ok(ForwardCache { hidden, logits: z })
    }

    /// Eval-mode logits: running statistics, no dropout.
    pub fn logits(&self, inputs: &Inputs, rows: &[usize]) -> Result<Vec<f64>, ModelError> {
        self.check_inputs(inputs, rows)?;
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(EVAL_CHUNK) {
            let m = chunk.len();
            let mut z = self.first_linear(inputs, chunk);
            for l in 0..self.hidden_count() {
                let s = self.slots[l];
                let n = s.n_out;
                let gamma = &self.params[s.gamma..s.gamma + n];
                let beta = &self.params[s.beta..s.beta + n];
                let (rm, rv) = (&self.running_mean[l], &self.running_var[l]);
                for row in z.chunks_exact_mut(n) {
                    for j in 0..n {
                        let xhat = (row[j] - rm[j]) / (rv[j] + BN_EPS).sqrt();
                        row[j] = (gamma[j] * xhat + beta[j]).max(0.0);
                    }
                }
                z = self.linear(l + 1, &z, m);
            }
            out.extend(z);
        }
        Ok(out)
    }

    pub fn predict_proba(&self, inputs: &Inputs, rows: &[usize]) -> Result<Vec<f64>, ModelError> {
        Ok(self.logits(inputs, rows)?.into_iter().map(sigmoid).collect())
    }

    /// Probabilities for a dense row-major batch.
    pub fn forward(&mut self, x: &[f64], mode: Mode, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, ModelError> {
        let inputs = Inputs::Dense { x, dim: self.dims[0] };
        let rows: Vec<usize> = (0..inputs.len()).collect();
        match mode {
            Mode::Eval => self.predict_proba(&inputs, &rows),
            Mode::Train => Ok(self.forward_train(&inputs, &rows, rng)?.logits.into_iter().map(sigmoid).collect()),
        }
    }

    /// Gradients of the loss with respect to every parameter, given the
    /// train-mode cache and the loss gradient with respect to the logits.
    pub fn backward(&self, inputs: &Inputs, rows: &[usize], cache: &ForwardCache, dlogits: &[f64]) -> Result<Vec<f64>, ModelError> {
        let m = rows.len();
        if dlogits.len() != m || cache.logits.len() != m {
            return Err(ModelError::ShapeMismatch(format!("{} logit gradients for {m} rows", dlogits.len())));
        }
        let mut grads = vec![0.0; self.params.len()];
        let nh = self.hidden_count();
        // gradient w.r.t. the output of the current linear layer
        let mut dz = dlogits.to_vec();
        for l in (0..=nh).rev() {
            let s = self.slots[l];
            let (n_in, n_out) = (s.n_in, s.n_out);
            {
                let gb = &mut grads[s.b..s.b + n_out];
                for row in dz.chunks_exact(n_out) {
                    axpy(1.0, row, gb);
                }
            }
            if l == 0 {
                let gw = &mut grads[s.w..s.b];
                match inputs {
                    Inputs::Dense { .. } => {
                        let x = inputs.gather(rows);
                        gemm(n_in, m, n_out, &x, (1, n_in), &dz, (n_out, 1), 0.0, gw);
                    }
                    Inputs::Sparse(fm) => {
                        for (i, &r) in rows.iter().enumerate() {
                            let d = &dz[i * n_out..(i + 1) * n_out];
                            fm.for_each_nonzero(r, |c, v| axpy(v, d, &mut gw[c * n_out..(c + 1) * n_out]));
                        }
                    }
                }
                break;
            }
            let hc = &cache.hidden[l - 1];
            gemm(n_in, m, n_out, &hc.a, (1, n_in), &dz, (n_out, 1), 0.0, &mut grads[s.w..s.b]);
            // back through the linear layer into the previous activations
            let mut da = vec![0.0; m * n_in];
            gemm(m, n_out, n_in, &dz, (n_out, 1), &self.params[s.w..s.b], (1, n_out), 0.0, &mut da);

            // dropout and ReLU: a > 0 exactly where the unit was kept and active
            let n = n_in;
            let prev = self.slots[l - 1];
            let gamma = &self.params[prev.gamma..prev.gamma + n];
            let mut dy = da;
            match &hc.mask {
                Some(mask) => dy.iter_mut().zip(&hc.a).zip(mask).for_each(|((d, a), k)| *d = if *a > 0.0 { *d * k } else { 0.0 }),
                None => dy.iter_mut().zip(&hc.a).for_each(|(d, a)| {
                    if *a <= 0.0 {
                        *d = 0.0
                    }
                }),
            }
            let mut sum_dy = vec![0.0; n];
            let mut sum_dy_xhat = vec![0.0; n];
            for (dr, xr) in dy.chunks_exact(n).zip(hc.xhat.chunks_exact(n)) {
                for j in 0..n {
                    sum_dy[j] += dr[j];
                    sum_dy_xhat[j] += dr[j] * xr[j];
                }
            }
            grads[prev.gamma..prev.gamma + n].copy_from_slice(&sum_dy_xhat);
            grads[prev.beta..prev.beta + n].copy_from_slice(&sum_dy);
            // batch-norm backward with dxhat = gamma * dy
            let mf = m as f64;
            let mut dzp = dy;
            for (dr, xr) in dzp.chunks_exact_mut(n).zip(hc.xhat.chunks_exact(n)) {
                for j in 0..n {
                    let g = gamma[j];
                    dr[j] = hc.inv_std[j] / mf * (mf * g * dr[j] - g * sum_dy[j] - xr[j] * g * sum_dy_xhat[j]);
                }
            }
            dz = dzp;
        }
        Ok(grads)
    }

    fn state_snapshot(&self) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (self.params.clone(), self.running_mean.clone(), self.running_var.clone())
    }

    fn restore(&mut self, snap: (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)) {
        (self.params, self.running_mean, self.running_var) = snap;
    }
}

/// Mean of `-[w·y·ln p + (1-y)·ln(1-p)]` with `p` clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn weighted_bce_loss(probs: &[f64], labels: &[u8], w: f64) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if *y == 1 {
                -w * p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / probs.len() as f64
}

/// The same loss computed from logits, with its gradient with respect to
/// each logit: `(w·y·(p−1) + (1−y)·p) / m`. Logits are clamped to the range
/// matching the probability clamp when computing the loss value.
pub fn weighted_bce_with_logits(logits: &[f64], labels: &[u8], w: f64) -> (f64, Vec<f64>) {
    let m = logits.len() as f64;
    let lim = ((1.0 - PROB_CLAMP) / PROB_CLAMP).ln();
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let zc = z.clamp(-lim, lim);
            let p = sigmoid(z);
            if y == 1 {
                loss += w * softplus(-zc);
                w * (p - 1.0) / m
            } else {
                loss += softplus(zc);
                p / m
            }
        })
        .collect();
    (loss / m, grad)
}

/// Adaptive moments with decoupled weight decay:
/// `θ ← θ(1 − lr·wd)` then `θ ← θ − lr·m̂/(√v̂ + ε)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(n: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] = params[i] * decay - lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has
/// failed to improve for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    best: f64,
    bad: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    /// Returns the learning rate to use next.
    pub fn step(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.bad = 0;
            return lr;
        }
        self.bad += 1;
        if self.bad >= self.patience {
            self.bad = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    bad: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            bad: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.bad = 0;
            return StopDecision { improved: true, stop: false };
        }
        self.bad += 1;
        StopDecision {
            improved: false,
            stop: self.bad >= self.patience,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    /// Defaults to negatives / positives on the training rows.
    pub positive_class_weight: Option<f64>,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            weight_decay: 1e-4,
            batch_size: 2048,
            plateau_factor: 0.5,
            plateau_patience: 2,
            early_stop_patience: 5,
            max_epochs: 100,
            positive_class_weight: None,
            dropout: DEFAULT_DROPOUT,
            seed: 17,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.learning_rate) {
            errs.push(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            errs.push(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size < 2 {
            errs.push(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(positive(self.plateau_factor) && self.plateau_factor < 1.0) {
            errs.push(format!("plateau_factor must be in (0, 1), got {}", self.plateau_factor));
        }
        for (name, v) in [
            ("plateau_patience", self.plateau_patience),
            ("early_stop_patience", self.early_stop_patience),
            ("max_epochs", self.max_epochs),
        ] {
            if v < 1 {
                errs.push(format!("{name} must be >= 1"));
            }
        }
        if let Some(w) = self.positive_class_weight {
            if !positive(w) {
                errs.push(format!("positive_class_weight must be > 0, got {w}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub positive_class_weight: f64,
    pub stopped_early: bool,
}

/// Rows of an input matrix with their labels.
#[derive(Debug, Clone)]
pub struct Dataset<'a> {
    pub inputs: Inputs<'a>,
    pub rows: Vec<usize>,
    pub labels: Vec<u8>,
}

impl<'a> Dataset<'a> {
    pub fn from_matrix(m: &'a FeatureMatrix, rows: Vec<usize>) -> Self {
        let labels = rows.iter().map(|r| m.labels()[*r]).collect();
        Self {
            inputs: Inputs::Sparse(m),
            rows,
            labels,
        }
    }

    pub fn dense(x: &'a [f64], dim: usize, labels: Vec<u8>) -> Self {
        Self {
            inputs: Inputs::Dense { x, dim },
            rows: (0..labels.len()).collect(),
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Eval-mode mean loss over a dataset.
pub fn dataset_loss(model: &MlpModel, data: &Dataset, w: f64) -> Result<f64, ModelError> {
    let logits = model.logits(&data.inputs, &data.rows)?;
    Ok(weighted_bce_with_logits(&logits, &data.labels, w).0)
}

/// Minibatch training with early stopping on validation loss. On return the
/// model holds the parameters (and running statistics) of the best epoch.
pub fn train(model: &mut MlpModel, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory, ModelError> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(ModelError::InvalidConfig(errs.join("; ")));
    }
    if train.len() < 2 {
        return Err(ModelError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(ModelError::EmptySplit("val"));
    }
    let pos = train.labels.iter().filter(|y| **y == 1).count();
    let neg = train.len() - pos;
    let w = match cfg.positive_class_weight {
        Some(w) => w,
        None if pos == 0 || neg == 0 => return Err(ModelError::DegenerateLabels),
        None => neg as f64 / pos as f64,
    };
    model.dropout = cfg.dropout;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(model.parameter_count(), cfg.weight_decay);
    let mut plateau = PlateauScheduler::new(cfg.plateau_factor, cfg.plateau_patience);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut lr = cfg.learning_rate;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut best = model.state_snapshot();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let rows: Vec<usize> = idx.iter().map(|i| train.rows[*i]).collect();
            let labels: Vec<u8> = idx.iter().map(|i| train.labels[*i]).collect();
            let cache = model.forward_train(&train.inputs, &rows, &mut rng)?;
            let (loss, dlogits) = weighted_bce_with_logits(&cache.logits, &labels, w);
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    learning_rate: lr,
                });
            }
            let grads = model.backward(&train.inputs, &rows, &cache, &dlogits)?;
            opt.step(&mut model.params, &grads, lr);
            loss_sum += loss * rows.len() as f64;
            seen += rows.len();
        }
        let val_loss = dataset_loss(model, val, w)?;
        if !val_loss.is_finite() {
            return Err(ModelError::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
                learning_rate: lr,
            });
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_loss,
            learning_rate: lr,
        });
        log::info!("epoch {epoch}: train {:.5} val {val_loss:.5} lr {lr:.2e}", epochs.last().unwrap().train_loss);
        let decision = stopper.observe(epoch, val_loss);
        if decision.improved {
            best = model.state_snapshot();
        }
        if decision.stop {
            stopped_early = true;
            break;
        }
        lr = plateau.step(val_loss, lr);
    }
    model.restore(best);
    Ok(TrainHistory {
        epochs,
        best_epoch: stopper.best_epoch,
        best_val_loss: stopper.best,
        positive_class_weight: w,
        stopped_early,
    })
}

fn f1_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// The F1-maximising threshold among 0, 1 and the midpoints between
/// consecutive distinct scores. Ties go to the lower threshold.
pub fn tune_threshold(probs: &[f64], labels: &[u8]) -> Result<f64, ModelError> {
    let total_pos = labels.iter().filter(|y| **y == 1).count();
    if total_pos == 0 || total_pos == labels.len() {
        return Err(ModelError::DegenerateLabels);
    }
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    // walk thresholds from high to low; each step admits one group of equal scores
    let mut candidates: Vec<(f64, f64)> = vec![(1.0, f1_counts(0, 0, total_pos))];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let s = probs[idx[i]];
        while i < idx.len() && probs[idx[i]] == s {
            if labels[idx[i]] == 1 {
                tp += 1
            } else {
                fp += 1
            }
            i += 1;
        }
        let t = if i < idx.len() { (s + probs[idx[i]]) / 2.0 } else { 0.0 };
        candidates.push((t, f1_counts(tp, fp, total_pos - tp)));
    }
    // the all-positive decision is reached at t=0 when every score is above the last midpoint
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for (t, f1) in candidates.into_iter().rev() {
        if f1 > best.1 {
            best = (t, f1);
        }
    }
    Ok(best.0)
}

/// Probabilities and `p >= threshold` decisions.
pub fn predict(model: &MlpModel, threshold: f64, inputs: &Inputs, rows: &[usize]) -> Result<(Vec<f64>, Vec<bool>), ModelError> {
    let probs = model.predict_proba(inputs, rows)?;
    let decisions = probs.iter().map(|p| *p >= threshold).collect();
    Ok((probs, decisions))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MlpModel,
    pub threshold: f64,
    pub config: TrainConfig,
    pub history: Option<TrainHistory>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut w = PayloadWriter::new();
        w.put_f64s(&self.model.params)?;
        for (rm, rv) in self.model.running_mean.iter().zip(&self.model.running_var) {
            w.put_f64s(rm)?;
            w.put_f64s(rv)?;
        }
        let meta = json!({
            "layer_dims": self.model.dims,
            "dropout": self.model.dropout,
            "parameter_count": self.model.parameter_count(),
            "threshold": self.threshold,
            "train_config": self.config,
            "history": self.history,
        });
        write_artifact(path, ArtifactKind::ModelCheckpoint, meta, &w.finish())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let art = read_artifact(path, ArtifactKind::ModelCheckpoint)?;
        let meta = &art.header.metadata;
        let parse = |k: &str| -> Result<serde_json::Value, ModelError> {
            meta.get(k).cloned().ok_or_else(|| ModelError::Malformed(format!("missing {k}")))
        };
        let dims: Vec<usize> = serde_json::from_value(parse("layer_dims")?).map_err(|e| ModelError::Malformed(e.to_string()))?;
        let mut model = init_model(&dims, 0)?;
        model.dropout = parse("dropout")?.as_f64().ok_or_else(|| ModelError::Malformed("dropout".into()))?;
        let threshold = parse("threshold")?.as_f64().ok_or_else(|| ModelError::Malformed("threshold".into()))?;
        let config = serde_json::from_value(parse("train_config")?).map_err(|e| ModelError::Malformed(e.to_string()))?;
        let history = serde_json::from_value(parse("history")?).map_err(|e| ModelError::Malformed(e.to_string()))?;
        let mut r = PayloadReader::new(&art.payload);
        model.params = r.f64s(model.params.len())?;
        for l in 0..model.running_mean.len() {
            let n = model.running_mean[l].len();
            model.running_mean[l] = r.f64s(n)?;
            model.running_var[l] = r.f64s(n)?;
        }
        r.finish()?;
        Ok(Self {
            model,
            threshold,
            config,
            history,
        })
    }
}
