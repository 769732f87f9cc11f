//! Minimal dense tensor storage and the handful of linear-algebra kernels
//! the model needs. Row-major `f64` throughout; vectors are plain slices.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// A named dense parameter tensor with its gradient buffer and Adam moments.
///
/// Matrices are row-major `rows x cols`; vectors use `rows == 1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    /// Included in the L2 penalty (weight matrices yes, biases no).
    pub regularized: bool,
    #[serde(skip)]
    pub grad: Vec<f64>,
    #[serde(skip)]
    pub adam_m: Vec<f64>,
    #[serde(skip)]
    pub adam_v: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        let n = rows * cols;
        Tensor {
            name: name.into(),
            rows,
            cols,
            data: vec![0.0; n],
            regularized: true,
            grad: vec![0.0; n],
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
        }
    }

    /// Xavier-uniform initialization: U(-a, a) with a = sqrt(6 / (rows + cols)).
    pub fn xavier(name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let mut t = Tensor::zeros(name, rows, cols);
        let a = (6.0 / (rows + cols) as f64).sqrt();
        for x in &mut t.data {
            *x = rng.gen_range(-a..a);
        }
        t
    }

    /// A zero-initialized bias vector, excluded from the L2 penalty.
    pub fn bias(name: impl Into<String>, n: usize) -> Self {
        let mut t = Tensor::zeros(name, 1, n);
        t.regularized = false;
        t
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i` as a slice (for embedding-table lookups).
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Restore skipped buffers after deserialization.
    pub fn reset_state(&mut self) {
        let n = self.rows * self.cols;
        self.grad = vec![0.0; n];
        self.adam_m = vec![0.0; n];
        self.adam_v = vec![0.0; n];
    }

    /// Sum of squared entries (for the L2 penalty).
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

/// out[c] += sum_i x[i] * w[i*cols + c]  (row vector times row-major matrix).
pub fn vecmat_acc(x: &[f64], w: &[f64], cols: usize, out: &mut [f64]) {
    debug_assert_eq!(w.len(), x.len() * cols);
    debug_assert_eq!(out.len(), cols);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * cols..(i + 1) * cols];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
}

/// dx[i] += sum_c dout[c] * w[i*cols + c]  (gradient of `vecmat_acc` w.r.t. x).
pub fn matvec_t_acc(dout: &[f64], w: &[f64], cols: usize, dx: &mut [f64]) {
    debug_assert_eq!(w.len(), dx.len() * cols);
    debug_assert_eq!(dout.len(), cols);
    for (i, d) in dx.iter_mut().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        let mut acc = 0.0;
        for (&dc, &wv) in dout.iter().zip(row) {
            acc += dc * wv;
        }
        *d += acc;
    }
}

/// dw[i*cols + c] += x[i] * dout[c]  (outer-product gradient of `vecmat_acc`
/// w.r.t. w), accumulated into a buffer laid out like the weight matrix.
pub fn outer_acc(x: &[f64], dout: &[f64], dw: &mut [f64]) {
    debug_assert_eq!(dw.len(), x.len() * dout.len());
    let cols = dout.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &mut dw[i * cols..(i + 1) * cols];
        for (d, &dc) in row.iter_mut().zip(dout) {
            *d += xi * dc;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// log(softmax(logits)[idx]) computed in log-space.
pub fn log_softmax_at(logits: &[f64], idx: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    (logits[idx] - max) - log_sum
}
