//! Differentiable building blocks with explicit backward functions.
//!
//! There is no general tape: the two training objectives in this crate
//! have fixed computation graphs, so each op exposes a forward function
//! and a matching backward that maps output cotangents to input and
//! parameter cotangents. The finite-difference checker in
//! [`crate::gradcheck`] validates every pairing.
//!
//! Biases and other vectors are stored as `1 x n` matrices so parameter
//! handling, Adam state, and checkpoints treat everything uniformly.

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::{Mat, Vec1};
use ndarray::Axis;
use rand::Rng;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------

/// A named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct ParamTensor<S> {
    pub name: String,
    pub value: Mat<S>,
    pub grad: Mat<S>,
}

impl<S: Scalar> ParamTensor<S> {
    pub fn new(name: impl Into<String>, value: Mat<S>) -> Self {
        let grad = Mat::zeros(value.raw_dim());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    /// Glorot-uniform initialization, deterministic under the given RNG.
    pub fn glorot(name: impl Into<String>, rows: usize, cols: usize, rng: &mut SeedRng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let value = Mat::from_shape_fn((rows, cols), |_| {
            S::of((rng.random::<f64>() * 2.0 - 1.0) * limit)
        });
        Self::new(name, value)
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self::new(name, Mat::zeros((rows, cols)))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }

    fn check_finite_grad(&self) -> Result<()> {
        if self.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                name: self.name.clone(),
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------
// Linear layer
// ---------------------------------------------------------------------

/// `y = x w + b` with `x: n x i`, `w: i x o`, `b: 1 x o` broadcast.
pub fn linear<S: Scalar>(x: &Mat<S>, w: &Mat<S>, b: &Mat<S>) -> Mat<S> {
    let mut y = x.dot(w);
    y += &b.row(0);
    y
}

/// Backward of [`linear`]: returns `(dx, dw, db)` for the cotangent `dy`.
pub fn linear_backward<S: Scalar>(
    x: &Mat<S>,
    w: &Mat<S>,
    dy: &Mat<S>,
) -> (Mat<S>, Mat<S>, Mat<S>) {
    let dx = dy.dot(&w.t());
    let dw = x.t().dot(dy);
    let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    (dx, dw, db)
}

/// Outer product `col row^T`, the rank-one block both contrastive and
/// attention backward passes assemble.
pub fn outer<S: Scalar>(col: &Vec1<S>, row: &Vec1<S>) -> Mat<S> {
    Mat::from_shape_fn((col.len(), row.len()), |(i, j)| col[i] * row[j])
}

// ---------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------

/// Supported elementwise activations. The parametric ReLU uses the
/// conventional fixed slope 0.25 on the negative side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Elu,
    Prelu,
    Tanh,
}

const PRELU_SLOPE: f64 = 0.25;

/// Numerically stable logistic function; finite even at extreme inputs.
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (S::one() + (-x.abs()).exp()).ln()
}

pub fn activate<S: Scalar>(kind: Activation, x: &Mat<S>) -> Mat<S> {
    match kind {
        Activation::Relu => x.mapv(|e| e.max(S::zero())),
        Activation::Sigmoid => x.mapv(sigmoid),
        Activation::Elu => x.mapv(|e| {
            if e > S::zero() {
                e
            } else {
                e.exp() - S::one()
            }
        }),
        Activation::Prelu => {
            let slope = S::of(PRELU_SLOPE);
            x.mapv(|e| if e > S::zero() { e } else { slope * e })
        }
        Activation::Tanh => x.mapv(|e| e.tanh()),
    }
}

/// Backward of [`activate`] given the pre-activation input.
pub fn activate_backward<S: Scalar>(kind: Activation, x: &Mat<S>, dy: &Mat<S>) -> Mat<S> {
    let deriv = match kind {
        Activation::Relu => x.mapv(|e| if e > S::zero() { S::one() } else { S::zero() }),
        Activation::Sigmoid => x.mapv(|e| {
            let s = sigmoid(e);
            s * (S::one() - s)
        }),
        Activation::Elu => x.mapv(|e| if e > S::zero() { S::one() } else { e.exp() }),
        Activation::Prelu => {
            let slope = S::of(PRELU_SLOPE);
            x.mapv(|e| if e > S::zero() { S::one() } else { slope })
        }
        Activation::Tanh => x.mapv(|e| {
            let t = e.tanh();
            S::one() - t * t
        }),
    };
    deriv * dy
}

// ---------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------

/// Epsilon added to the standard deviation (not the variance).
pub const STANDARDIZE_EPS: f64 = 1e-5;

/// Optional normalization inside an MLP hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    None,
    /// Standardize each column over the batch (rows).
    Batch,
    /// Standardize each row over its features (columns).
    Layer,
}

/// Column-wise `(z - mean) / (std + 1e-5)` with the population standard
/// deviation.
pub fn standardize_columns<S: Scalar>(z: &Mat<S>) -> Mat<S> {
    let n = S::of(z.nrows() as f64);
    let eps = S::of(STANDARDIZE_EPS);
    let mut out = z.clone();
    for mut col in out.columns_mut() {
        let mean = col.iter().copied().sum::<S>() / n;
        let var = col.iter().map(|&e| (e - mean) * (e - mean)).sum::<S>() / n;
        let denom = var.sqrt() + eps;
        col.mapv_inplace(|e| (e - mean) / denom);
    }
    out
}

/// Backward of [`standardize_columns`].
pub fn standardize_columns_backward<S: Scalar>(z: &Mat<S>, dy: &Mat<S>) -> Mat<S> {
    let n = S::of(z.nrows() as f64);
    let eps = S::of(STANDARDIZE_EPS);
    let mut dz = Mat::zeros(z.raw_dim());
    for (c, col) in z.columns().into_iter().enumerate() {
        let mean = col.iter().copied().sum::<S>() / n;
        let var = col.iter().map(|&e| (e - mean) * (e - mean)).sum::<S>() / n;
        let std = var.sqrt();
        let denom = std + eps;
        let dy_col = dy.column(c);
        let dy_mean = dy_col.iter().copied().sum::<S>() / n;
        // Projection of the cotangent onto the centered signal, which
        // drives the gradient through the standard deviation.
        let proj = col
            .iter()
            .zip(dy_col.iter())
            .map(|(&zi, &di)| di * (zi - mean))
            .sum::<S>();
        // A constant column has no gradient through its (zero) std.
        let through_std = std > S::zero();
        for r in 0..z.nrows() {
            let centered = col[r] - mean;
            let mut g = (dy_col[r] - dy_mean) / denom;
            if through_std {
                g = g - centered * proj / (n * std * denom * denom);
            }
            dz[[r, c]] = g;
        }
    }
    dz
}

/// Row-wise standardization (layer form), via the column routine on the
/// transpose.
pub fn standardize_rows<S: Scalar>(z: &Mat<S>) -> Mat<S> {
    standardize_columns(&z.t().to_owned()).t().to_owned()
}

pub fn standardize_rows_backward<S: Scalar>(z: &Mat<S>, dy: &Mat<S>) -> Mat<S> {
    standardize_columns_backward(&z.t().to_owned(), &dy.t().to_owned())
        .t()
        .to_owned()
}

pub fn normalize<S: Scalar>(kind: Normalization, z: &Mat<S>) -> Mat<S> {
    match kind {
        Normalization::None => z.clone(),
        Normalization::Batch => standardize_columns(z),
        Normalization::Layer => standardize_rows(z),
    }
}

pub fn normalize_backward<S: Scalar>(kind: Normalization, z: &Mat<S>, dy: &Mat<S>) -> Mat<S> {
    match kind {
        Normalization::None => dy.clone(),
        Normalization::Batch => standardize_columns_backward(z, dy),
        Normalization::Layer => standardize_rows_backward(z, dy),
    }
}

// ---------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------

/// Adam hyperparameters. Weight decay is decoupled: parameters shrink by
/// `lr * weight_decay` multiplicatively before the moment update.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// First and second moment estimates for a fixed parameter list. The
/// caller must pass the parameters in the same order on every step.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    step: u64,
    m: Vec<Mat<S>>,
    v: Vec<Mat<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &[&ParamTensor<S>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Mat::zeros(p.value.raw_dim())).collect(),
            v: params.iter().map(|p| Mat::zeros(p.value.raw_dim())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One optimizer step over the accumulated gradients. Rejects
    /// non-finite gradients, naming the offending tensor.
    pub fn step(&mut self, params: &mut [&mut ParamTensor<S>], cfg: &AdamConfig) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "parameter list changed size");
        for p in params.iter() {
            p.check_finite_grad()?;
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = S::of(cfg.beta1);
        let b2 = S::of(cfg.beta2);
        let lr = S::of(cfg.lr);
        let eps = S::of(cfg.eps);
        let bias1 = S::one() - b1.powi(t);
        let bias2 = S::one() - b2.powi(t);
        let decay = S::one() - S::of(cfg.lr * cfg.weight_decay);
        for (idx, p) in params.iter_mut().enumerate() {
            if cfg.weight_decay != 0.0 {
                p.value.mapv_inplace(|e| e * decay);
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(&p.grad)
                .for_each(|value, m, v, &g| {
                    *m = b1 * *m + (S::one() - b1) * g;
                    *v = b2 * *v + (S::one() - b2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *value = *value - lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------
