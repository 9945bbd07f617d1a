//! Hand-rolled neural network primitives in f64.
//!
//! Both transformers in this crate (the autoregressive base model and the
//! super-resolution stage) are built from these pieces. Backward passes are
//! written out by hand and verified against central finite differences, which
//! is the reason everything runs in f64: the check needs ~1e-3 relative
//! agreement and f32 finite differences are too noisy for that.
//!
//! Parameters live in one flat [`Store`] so the optimizer, checkpoints, and
//! gradient checks can treat every model uniformly.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;
pub type Vek = Array1<f64>;

// ---------------------------------------------------------------------------
// Parameter store

/// Handle to one tensor inside a [`Store`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot(usize);

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    rows: usize,
    /// 0 marks a 1-D tensor of length `rows`.
    cols: usize,
    offset: usize,
    /// Whether weight decay applies (matrices yes, vectors no).
    decay: bool,
}

/// Flat storage for named parameter tensors, registered in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Store {
    entries: Vec<Entry>,
    data: Vec<f64>,
}

impl Store {
    pub fn new() -> Store {
        Store {
            entries: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Register a matrix initialized by `init` per element (row-major order).
    pub fn mat(&mut self, name: &str, rows: usize, cols: usize, mut init: impl FnMut() -> f64) -> Slot {
        assert!(cols > 0, "use Store::vec for 1-D tensors");
        let offset = self.data.len();
        self.data.extend(std::iter::repeat_with(&mut init).take(rows * cols));
        self.entries.push(Entry {
            name: name.to_string(),
            rows,
            cols,
            offset,
            decay: true,
        });
        Slot(self.entries.len() - 1)
    }

    /// Register a vector filled with a constant.
    pub fn vec(&mut self, name: &str, len: usize, fill: f64) -> Slot {
        let offset = self.data.len();
        self.data.extend(std::iter::repeat(fill).take(len));
        self.entries.push(Entry {
            name: name.to_string(),
            rows: len,
            cols: 0,
            offset,
            decay: false,
        });
        Slot(self.entries.len() - 1)
    }

    pub fn m(&self, s: Slot) -> ArrayView2<'_, f64> {
        let e = &self.entries[s.0];
        debug_assert!(e.cols > 0);
        ArrayView2::from_shape((e.rows, e.cols), &self.data[e.offset..e.offset + e.rows * e.cols])
            .unwrap()
    }

    pub fn m_mut(&mut self, s: Slot) -> ArrayViewMut2<'_, f64> {
        let e = self.entries[s.0].clone();
        debug_assert!(e.cols > 0);
        ArrayViewMut2::from_shape(
            (e.rows, e.cols),
            &mut self.data[e.offset..e.offset + e.rows * e.cols],
        )
        .unwrap()
    }

    pub fn v(&self, s: Slot) -> ArrayView1<'_, f64> {
        let e = &self.entries[s.0];
        debug_assert!(e.cols == 0);
        ArrayView1::from_shape(e.rows, &self.data[e.offset..e.offset + e.rows]).unwrap()
    }

    pub fn v_mut(&mut self, s: Slot) -> ArrayViewMut1<'_, f64> {
        let e = self.entries[s.0].clone();
        debug_assert!(e.cols == 0);
        ArrayViewMut1::from_shape(e.rows, &mut self.data[e.offset..e.offset + e.rows]).unwrap()
    }

    /// Same registry, all-zero data. Used for gradients and moments.
    pub fn zeros_like(&self) -> Store {
        Store {
            entries: self.entries.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `(name, rows, cols, values)` per tensor, registration order.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, usize, usize, &[f64])> {
        self.entries.iter().map(|e| {
            let len = e.rows * e.cols.max(1);
            (
                e.name.as_str(),
                e.rows,
                e.cols,
                &self.data[e.offset..e.offset + len],
            )
        })
    }

    /// Overwrite one tensor's data by name; shapes must match exactly.
    pub fn load_tensor(&mut self, name: &str, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
        let e = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::data(format!("unknown tensor {name:?}")))?
            .clone();
        if e.rows != rows || e.cols != cols || values.len() != e.rows * e.cols.max(1) {
            return Err(Error::shape(format!(
                "tensor {name:?}: stored {}x{}, model wants {}x{}",
                rows, cols, e.rows, e.cols
            )));
        }
        let len = values.len();
        self.data[e.offset..e.offset + len].copy_from_slice(values);
        Ok(())
    }

    /// Accumulate `other`'s data into this store (same registry).
    pub fn add_assign(&mut self, other: &Store) {
        debug_assert_eq!(self.entries, other.entries);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for a in &mut self.data {
            *a *= c;
        }
    }

    fn decay_flags(&self) -> impl Iterator<Item = bool> + '_ {
        self.entries
            .iter()
            .flat_map(|e| std::iter::repeat(e.decay).take(e.rows * e.cols.max(1)))
    }
}

impl Default for Store {
    fn default() -> Self {
        Store::new()
    }
}

// ---------------------------------------------------------------------------
// Initializers

/// Gaussian init, mean 0.
pub fn gauss(rng: &mut ChaCha8Rng, std: f64) -> impl FnMut() -> f64 + '_ {
    move || {
        // Box-Muller transform; draws two uniforms per normal sample.
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random();
        std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

// ---------------------------------------------------------------------------
// Linear

/// y = x W (+ b). Weights are stored [in, out].
pub fn linear_forward(store: &Store, w: Slot, b: Option<Slot>, x: &Mat) -> Mat {
    let mut y = x.dot(&store.m(w));
    if let Some(b) = b {
        y += &store.v(b);
    }
    y
}

/// Backward of `linear_forward`; accumulates weight grads into `grads`.
pub fn linear_backward(
    store: &Store,
    grads: &mut Store,
    w: Slot,
    b: Option<Slot>,
    x: &Mat,
    dy: &Mat,
) -> Mat {
    let dx = dy.dot(&store.m(w).t());
    let dw = x.t().dot(dy);
    grads.m_mut(w).scaled_add(1.0, &dw);
    if let Some(b) = b {
        grads.v_mut(b).scaled_add(1.0, &dy.sum_axis(Axis(0)));
    }
    dx
}

// ---------------------------------------------------------------------------
// LayerNorm

pub struct LayerNormCache {
    /// Normalized activations before scale/shift.
    xhat: Mat,
    rstd: Vek,
}

const LN_EPS: f64 = 1e-5;

/// Row-wise layer normalization with learned scale and shift.
pub fn layer_norm_forward(store: &Store, gamma: Slot, beta: Slot, x: &Mat) -> (Mat, LayerNormCache) {
    let n = x.nrows();
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Vek::zeros(n);
    for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        let r = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * r);
        rstd[i] = r;
    }
    let y = &xhat * &store.v(gamma) + &store.v(beta);
    (y, LayerNormCache { xhat, rstd })
}

pub fn layer_norm_backward(
    store: &Store,
    grads: &mut Store,
    gamma: Slot,
    beta: Slot,
    cache: &LayerNormCache,
    dy: &Mat,
) -> Mat {
    let d = dy.ncols() as f64;
    grads
        .v_mut(gamma)
        .scaled_add(1.0, &(dy * &cache.xhat).sum_axis(Axis(0)));
    grads.v_mut(beta).scaled_add(1.0, &dy.sum_axis(Axis(0)));

    let g = store.v(gamma);
    let mut dx = Mat::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dyg = &dy.row(i) * &g; // upstream through the scale
        let xh = cache.xhat.row(i);
        let s1 = dyg.sum();
        let s2 = (&dyg * &xh).sum();
        let r = cache.rstd[i];
        let mut out = dx.row_mut(i);
        for j in 0..dy.ncols() {
            out[j] = r * (dyg[j] - s1 / d - xh[j] * s2 / d);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// GELU (tanh approximation)

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn gelu_forward(x: &Mat) -> Mat {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
}

pub fn gelu_backward(x: &Mat, dy: &Mat) -> Mat {
    let mut dx = x.clone();
    dx.zip_mut_with(dy, |v, &g| {
        let u = GELU_C * (*v + GELU_A * *v * *v * *v);
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * GELU_A * *v * *v);
        *v = g * (0.5 * (1.0 + t) + 0.5 * *v * (1.0 - t * t) * du);
    });
    dx
}

// ---------------------------------------------------------------------------
// Rotary phases

/// Precomputed rotation table for rotary position phases.
#[derive(Debug, Clone)]
pub struct Rotary {
    cos: Mat,
    sin: Mat,
    half: usize,
}

impl Rotary {
    /// `dh` must be even; `base` is conventionally 10000.
    pub fn new(max_len: usize, dh: usize, base: f64) -> Rotary {
        assert!(dh % 2 == 0, "rotary head dim must be even");
        let half = dh / 2;
        let mut cos = Mat::zeros((max_len, half));
        let mut sin = Mat::zeros((max_len, half));
        for p in 0..max_len {
            for i in 0..half {
                let theta = p as f64 * base.powf(-2.0 * i as f64 / dh as f64);
                cos[[p, i]] = theta.cos();
                sin[[p, i]] = theta.sin();
            }
        }
        Rotary { cos, sin, half }
    }

    /// Rotate pairs (2i, 2i+1) of each row by its position's phase.
    pub fn apply(&self, x: &mut Mat, positions: &[usize]) {
        self.rotate(x, positions, 1.0)
    }

    /// Inverse rotation; the transpose of `apply`, used in backward.
    pub fn apply_inverse(&self, x: &mut Mat, positions: &[usize]) {
        self.rotate(x, positions, -1.0)
    }

    fn rotate(&self, x: &mut Mat, positions: &[usize], sign: f64) {
        debug_assert_eq!(x.nrows(), positions.len());
        debug_assert_eq!(x.ncols(), self.half * 2);
        for (mut row, &p) in x.rows_mut().into_iter().zip(positions) {
            for i in 0..self.half {
                let c = self.cos[[p, i]];
                let s = sign * self.sin[[p, i]];
                let a = row[2 * i];
                let b = row[2 * i + 1];
                row[2 * i] = a * c - b * s;
                row[2 * i + 1] = a * s + b * c;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Scaled dot-product attention (single head)

pub struct AttnCache {
    /// Post-softmax attention weights [n_q, n_k].
    probs: Mat,
}

/// Attention with an optional additive bias (0 or -inf entries for masking).
/// Masked positions contribute exactly zero, so outputs are bit-independent
/// of the values they would have attended to.
pub fn attn_forward(q: &Mat, k: &Mat, v: &Mat, bias: Option<&Mat>) -> (Mat, AttnCache) {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut scores = q.dot(&k.t());
    scores *= scale;
    if let Some(b) = bias {
        scores += b;
    }
    softmax_rows(&mut scores);
    let out = scores.dot(v);
    (out, AttnCache { probs: scores })
}

pub fn attn_backward(
    cache: &AttnCache,
    q: &Mat,
    k: &Mat,
    v: &Mat,
    dout: &Mat,
) -> (Mat, Mat, Mat) {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let p = &cache.probs;
    let dv = p.t().dot(dout);
    let dp = dout.dot(&v.t());
    // Softmax backward: ds = p * (dp - rowsum(dp * p)).
    let mut ds = dp.clone();
    for i in 0..ds.nrows() {
        let row_p = p.row(i);
        let dot = ds.row(i).dot(&row_p);
        let mut row = ds.row_mut(i);
        for j in 0..row.len() {
            row[j] = row_p[j] * (row[j] - dot);
        }
    }
    ds *= scale;
    let dq = ds.dot(k);
    let dk = ds.t().dot(q);
    (dq, dk, dv)
}

/// In-place numerically stable row softmax. Rows of all -inf are rejected
/// upstream (every attention row can at least see itself).
pub fn softmax_rows(scores: &mut Mat) {
    for mut row in scores.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

// ---------------------------------------------------------------------------
// Cross-entropy

/// Mean cross-entropy over rows of `logits` against `targets`, plus the
/// gradient d(loss)/d(logits). The mean is taken over the given rows only.
pub fn cross_entropy(logits: &Mat, targets: &[usize]) -> Result<(f64, Mat)> {
    assert_eq!(logits.nrows(), targets.len());
    let n = targets.len() as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let mut row = grad.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::numeric(format!("non-finite logits at row {i}")));
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        loss += sum.ln() + max - logits[[i, t]];
        for v in row.iter_mut() {
            *v /= sum * n;
        }
        row[t] -= 1.0 / n;
    }
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(Error::numeric(format!("non-finite loss {loss}")));
    }
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// Optimizer

/// Decoupled-weight-decay adaptive-moment optimizer with a warmup + cosine
/// learning-rate schedule.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Store,
    v: Store,
    step: usize,
}

impl AdamW {
    pub fn new(params: &Store, lr: f64, total_steps: usize) -> AdamW {
        AdamW {
            lr,
            lr_min: lr * 0.1,
            warmup_steps: (total_steps / 100).clamp(1, 200),
            total_steps,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// Learning rate for a given 0-based step.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps.saturating_sub(self.warmup_steps)).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Apply one update. `grads` must share the param registry.
    /// Moment buffers and update count, for checkpointing.
    pub fn state(&self) -> (&Store, &Store, usize) {
        (&self.m, &self.v, self.step)
    }

    /// Restore checkpointed state; buffers must match the parameter registry.
    pub fn restore_state(&mut self, m: Store, v: Store, step: usize) {
        self.m = m;
        self.v = v;
        self.step = step;
    }

    pub fn update(&mut self, params: &mut Store, grads: &Store) {
        let lr = self.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay: Vec<bool> = params.decay_flags().collect();
        let p = params.data_mut();
        let g = grads.data();
        let m = self.m.data_mut();
        let v = self.v.data_mut();
        for i in 0..p.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            let mut upd = mhat / (vhat.sqrt() + self.eps);
            if decay[i] {
                upd += self.weight_decay * p[i];
            }
            p[i] -= lr * upd;
        }
    }
}

// ---------------------------------------------------------------------------
// Sampling

/// Temperature + top-k sampling over a logit slice. Temperature 0 or top_k 1
/// degenerate to argmax with lowest-index tie-breaking.
pub fn sample_top_k(rng: &mut ChaCha8Rng, logits: &[f64], temperature: f64, top_k: usize) -> usize {
    let k = top_k.max(1).min(logits.len());
    if temperature <= 1e-9 || k == 1 {
        return argmax(logits);
    }
    // Indices of the k largest logits, ties broken toward lower index.
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    let max = logits[idx[0]];
    let weights: Vec<f64> = idx
        .iter()
        .map(|&i| ((logits[i] - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.random::<f64>() * total;
    for (j, w) in weights.iter().enumerate() {
        draw -= w;
        if draw <= 0.0 {
            return idx[j];
        }
    }
    *idx.last().unwrap()
}

/// Lowest-index argmax.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
