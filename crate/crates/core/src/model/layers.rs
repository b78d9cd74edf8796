use rand::Rng;

use crate::linalg::Matrix;

pub const LN_EPS: f64 = 1e-8;

/// Row-wise layer normalization with learned gain and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Matrix::row_vector(vec![1.0; d]),
            beta: Matrix::zeros(1, d),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        self.forward_with_stats(x).0
    }

    /// Output plus the normalized input and per-row inverse std, which the
    /// backward pass needs.
    pub fn forward_with_stats(&self, x: &Matrix) -> (Matrix, Matrix, Vec<f64>) {
        let (xhat, inv_std) = normalize_rows(x);
        let mut y = xhat.clone();
        let g = self.gamma.as_slice();
        let b = self.beta.as_slice();
        for r in 0..y.rows() {
            for ((v, gi), bi) in y.row_mut(r).iter_mut().zip(g).zip(b) {
                *v = *v * gi + bi;
            }
        }
        (y, xhat, inv_std)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gamma: Matrix::zeros(1, self.gamma.cols()),
            beta: Matrix::zeros(1, self.beta.cols()),
        }
    }
}

/// Zero-mean, unit-variance rows (population variance).
pub fn normalize_rows(x: &Matrix) -> (Matrix, Vec<f64>) {
    let d = x.cols() as f64;
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / d;
        row.iter_mut().for_each(|v| *v -= mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        let s = 1.0 / (var + LN_EPS).sqrt();
        row.iter_mut().for_each(|v| *v *= s);
        inv.push(s);
    }
    (out, inv)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Position-wise two-layer MLP with GELU.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl FeedForward {
    pub fn random<R: Rng + ?Sized>(d_model: usize, d_ff: usize, rng: &mut R) -> Self {
        Self {
            w1: Matrix::random_normal(d_model, d_ff, 1.0 / (d_model as f64).sqrt(), rng),
            b1: Matrix::zeros(1, d_ff),
            w2: Matrix::random_normal(d_ff, d_model, 1.0 / (d_ff as f64).sqrt(), rng),
            b2: Matrix::zeros(1, d_model),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut h = self.pre_activation(x);
        h.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
        let mut y = h.matmul(&self.w2);
        y.add_row_broadcast(&self.b2);
        y
    }

    pub fn pre_activation(&self, x: &Matrix) -> Matrix {
        let mut h = x.matmul(&self.w1);
        h.add_row_broadcast(&self.b1);
        h
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            b1: Matrix::zeros(1, self.b1.cols()),
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
            b2: Matrix::zeros(1, self.b2.cols()),
        }
    }
}
