//! Label-guided fine-tuning on top of the frozen pre-trained encoders.
//!
//! The two encoder outputs are fused per node and per dimension by a
//! gate computed from the raw input features, a two-layer head maps the
//! fused rows to anomaly probabilities, and an auxiliary cross-entropy
//! term steers the labeled gate means toward class-dependent targets.
//! Only the fusion parameters and the head receive gradient; encoder
//! parameters stay untouched. Alternative fusion rules (mean, concat,
//! attention, single branch) exist for ablation runs.

use crate::diff::{
    activate, activate_backward, linear, linear_backward, outer, sigmoid, Activation, AdamConfig,
    AdamState, ParamTensor,
};
use crate::error::{Error, Result};
use crate::graph::{local_homophily, SparseGraph};
use crate::io::split::SplitSpec;
use crate::metrics::{auroc, evaluate, quartile_analysis, EvalReport};
use crate::pretrain::PretrainModel;
use crate::rng::{salt, stream, SeedRng};
use crate::scalar::Scalar;
use crate::{Label, Mat, Vec1};
use ndarray::{concatenate, Axis};
use serde::{Deserialize, Serialize};

/// Probabilities are clamped into `[PROB_FLOOR, 1 - PROB_FLOOR]` before
/// any logarithm so saturated sigmoids cannot produce infinities.
const PROB_FLOOR: f64 = 1e-12;

// ---------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------

/// How the low-pass and high-pass embeddings are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuseVariant {
    /// Feature-conditioned per-node, per-dimension gate (the default).
    Gated,
    /// Plain average of the two branches.
    Mean,
    /// Column-wise concatenation; doubles the head input width.
    Concat,
    /// Two-way softmax over per-node attention scores.
    Attention,
    /// Low-pass branch alone (ablation).
    LowOnly,
    /// High-pass branch alone (ablation).
    HighOnly,
}

/// Class targets for the mean gate value of labeled nodes: anomalies
/// are pushed toward `p_a`, normals toward `p_n`, with `p_a <= p_n` so
/// anomalies lean on the high-pass branch at least as much as normals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegTargets {
    pub p_a: f64,
    pub p_n: f64,
}

impl Default for RegTargets {
    fn default() -> Self {
        Self { p_a: 0.2, p_n: 0.9 }
    }
}

const WEIGHT_DECAY_GRID: [f64; 3] = [0.0, 1e-2, 1e-4];
const P_N_GRID: [f64; 2] = [0.9, 1.0];
const P_A_GRID: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.4];

impl RegTargets {
    fn validate(&self, allow_custom: bool) -> Result<()> {
        for (name, v) in [("p_a", self.p_a), ("p_n", self.p_n)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        if self.p_a > self.p_n {
            return Err(Error::InvalidConfig(format!(
                "gate targets need p_a <= p_n, got p_a {} > p_n {}",
                self.p_a, self.p_n
            )));
        }
        if !allow_custom {
            if !P_N_GRID.contains(&self.p_n) {
                return Err(Error::InvalidConfig(format!(
                    "p_n {} is off the search grid {P_N_GRID:?}",
                    self.p_n
                )));
            }
            if !P_A_GRID.contains(&self.p_a) {
                return Err(Error::InvalidConfig(format!(
                    "p_a {} is off the search grid {P_A_GRID:?}",
                    self.p_a
                )));
            }
        }
        Ok(())
    }
}

/// Hyperparameters for one fine-tuning run. Values are restricted to
/// the documented search grid unless `allow_custom` is set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub targets: RegTargets,
    /// Disables the gate-target term while keeping the gate itself.
    pub use_regularizer: bool,
    pub variant: FuseVariant,
    pub activation: Activation,
    pub allow_custom: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 0.01,
            weight_decay: 0.0,
            targets: RegTargets::default(),
            use_regularizer: true,
            variant: FuseVariant::Gated,
            activation: Activation::Relu,
            allow_custom: false,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        self.targets.validate(self.allow_custom)?;
        if self.allow_custom {
            if !(self.lr.is_finite() && self.lr > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "learning rate must be positive, got {}",
                    self.lr
                )));
            }
            if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "weight decay must be nonnegative, got {}",
                    self.weight_decay
                )));
            }
            return Ok(());
        }
        if self.epochs > 500 {
            return Err(Error::InvalidConfig(format!(
                "epochs capped at 500, got {}",
                self.epochs
            )));
        }
        if self.lr != 0.01 {
            return Err(Error::InvalidConfig(format!(
                "learning rate is fixed at 0.01, got {}",
                self.lr
            )));
        }
        if !WEIGHT_DECAY_GRID.contains(&self.weight_decay) {
            return Err(Error::InvalidConfig(format!(
                "weight decay {} is off the search grid {WEIGHT_DECAY_GRID:?}",
                self.weight_decay
            )));
        }
        if self.activation == Activation::Sigmoid {
            return Err(Error::InvalidConfig(
                "sigmoid is not in the activation search grid".into(),
            ));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

// ---------------------------------------------------------------------
// Fusion
// ---------------------------------------------------------------------

/// Feature-conditioned gate `C = sigmoid(X W_c + b_c)`, applied as
/// `C (.) Z_L + (1 - C) (.) Z_H`.
#[derive(Debug, Clone)]
pub struct GatedFusion<S> {
    pub w_c: ParamTensor<S>,
    pub b_c: ParamTensor<S>,
}

impl<S: Scalar> GatedFusion<S> {
    pub fn init(input_dim: usize, embed_dim: usize, rng: &mut SeedRng) -> Self {
        Self {
            w_c: ParamTensor::glorot("gate.w", input_dim, embed_dim, rng),
            b_c: ParamTensor::new("gate.b", Mat::zeros((1, embed_dim))),
        }
    }

    /// All-zero parameters, so every coefficient starts at exactly 0.5.
    pub fn zeroed(input_dim: usize, embed_dim: usize) -> Self {
        Self {
            w_c: ParamTensor::new("gate.w", Mat::zeros((input_dim, embed_dim))),
            b_c: ParamTensor::new("gate.b", Mat::zeros((1, embed_dim))),
        }
    }

    pub fn coefficients(&self, x: &Mat<S>) -> Mat<S> {
        linear(x, &self.w_c.value, &self.b_c.value).mapv(sigmoid)
    }

    /// Accumulates parameter gradients from a cotangent on the
    /// coefficient matrix.
    pub fn backward(&mut self, x: &Mat<S>, coeffs: &Mat<S>, dcoeffs: &Mat<S>) {
        let dpre = Mat::from_shape_fn(coeffs.raw_dim(), |idx| {
            coeffs[idx] * (S::one() - coeffs[idx]) * dcoeffs[idx]
        });
        let (_, dw, db) = linear_backward(x, &self.w_c.value, &dpre);
        self.w_c.grad += &dw;
        self.b_c.grad += &db;
    }
}

/// Per-node two-way attention over the branches: each branch gets a
/// score `q^T tanh(Z W_z + X W_x)` and the softmax of the two scores
/// weights the branch rows.
#[derive(Debug, Clone)]
pub struct AttentionFusion<S> {
    pub w_z_low: ParamTensor<S>,
    pub w_z_high: ParamTensor<S>,
    pub w_x_low: ParamTensor<S>,
    pub w_x_high: ParamTensor<S>,
    pub q: ParamTensor<S>,
}

#[derive(Debug, Clone)]
struct AttentionCache<S> {
    h_low: Mat<S>,
    h_high: Mat<S>,
    alpha_low: Vec1<S>,
}

impl<S: Scalar> AttentionFusion<S> {
    pub fn init(input_dim: usize, embed_dim: usize, hidden: usize, rng: &mut SeedRng) -> Self {
        Self {
            w_z_low: ParamTensor::glorot("att.w_z_low", embed_dim, hidden, rng),
            w_z_high: ParamTensor::glorot("att.w_z_high", embed_dim, hidden, rng),
            w_x_low: ParamTensor::glorot("att.w_x_low", input_dim, hidden, rng),
            w_x_high: ParamTensor::glorot("att.w_x_high", input_dim, hidden, rng),
            q: ParamTensor::glorot("att.q", hidden, 1, rng),
        }
    }

    fn forward(&self, x: &Mat<S>, z_low: &Mat<S>, z_high: &Mat<S>) -> (Mat<S>, AttentionCache<S>) {
        let q = self.q.value.column(0);
        let h_low = (z_low.dot(&self.w_z_low.value) + x.dot(&self.w_x_low.value)).mapv(S::tanh);
        let h_high = (z_high.dot(&self.w_z_high.value) + x.dot(&self.w_x_high.value)).mapv(S::tanh);
        let score_low = h_low.dot(&q);
        let score_high = h_high.dot(&q);
        // Two-way softmax collapses to a sigmoid of the score difference.
        let alpha_low = Vec1::from_shape_fn(score_low.len(), |i| {
            sigmoid(score_low[i] - score_high[i])
        });
        let fused = Mat::from_shape_fn(z_low.raw_dim(), |(i, j)| {
            alpha_low[i] * z_low[(i, j)] + (S::one() - alpha_low[i]) * z_high[(i, j)]
        });
        (fused, AttentionCache { h_low, h_high, alpha_low })
    }

    /// Fused matrix alone, for callers that do not train.
    pub fn fuse(&self, x: &Mat<S>, z_low: &Mat<S>, z_high: &Mat<S>) -> Mat<S> {
        self.forward(x, z_low, z_high).0
    }

    fn backward(
        &mut self,
        x: &Mat<S>,
        z_low: &Mat<S>,
        z_high: &Mat<S>,
        cache: &AttentionCache<S>,
        dfused: &Mat<S>,
    ) {
        let dalpha = ((z_low - z_high) * dfused).sum_axis(Axis(1));
        // alpha = sigmoid(score_low - score_high).
        let ddiff = Vec1::from_shape_fn(dalpha.len(), |i| {
            let a = cache.alpha_low[i];
            a * (S::one() - a) * dalpha[i]
        });
        let q = self.q.value.column(0).to_owned();
        let mut dq = Vec1::zeros(q.len());
        for (sign, h, w_z, w_x, z) in [
            (
                S::one(),
                &cache.h_low,
                &mut self.w_z_low,
                &mut self.w_x_low,
                z_low,
            ),
            (
                -S::one(),
                &cache.h_high,
                &mut self.w_z_high,
                &mut self.w_x_high,
                z_high,
            ),
        ] {
            let dscore = ddiff.mapv(|d| d * sign);
            dq += &h.t().dot(&dscore);
            let dh = outer(&dscore, &q);
            let dpre = Mat::from_shape_fn(dh.raw_dim(), |idx| {
                dh[idx] * (S::one() - h[idx] * h[idx])
            });
            w_z.grad += &z.t().dot(&dpre);
            w_x.grad += &x.t().dot(&dpre);
        }
        let mut q_grad = self.q.grad.column_mut(0);
        q_grad += &dq;
    }
}

/// Trainable fusion state for the configured variant. Variants without
/// parameters share the `Fixed` arm.
#[derive(Debug, Clone)]
pub enum Fusion<S> {
    Gated(GatedFusion<S>),
    Attention(AttentionFusion<S>),
    Fixed(FuseVariant),
}

#[derive(Debug, Clone)]
enum FusionCache<S> {
    Gated { coeffs: Mat<S> },
    Attention(AttentionCache<S>),
    Fixed,
}

impl<S: Scalar> Fusion<S> {
    pub fn variant(&self) -> FuseVariant {
        match self {
            Fusion::Gated(_) => FuseVariant::Gated,
            Fusion::Attention(_) => FuseVariant::Attention,
            Fusion::Fixed(v) => *v,
        }
    }

    fn params(&self) -> Vec<&ParamTensor<S>> {
        match self {
            Fusion::Gated(g) => vec![&g.w_c, &g.b_c],
            Fusion::Attention(a) => {
                vec![&a.w_z_low, &a.w_z_high, &a.w_x_low, &a.w_x_high, &a.q]
            }
            Fusion::Fixed(_) => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor<S>> {
        match self {
            Fusion::Gated(g) => vec![&mut g.w_c, &mut g.b_c],
            Fusion::Attention(a) => vec![
                &mut a.w_z_low,
                &mut a.w_z_high,
                &mut a.w_x_low,
                &mut a.w_x_high,
                &mut a.q,
            ],
            Fusion::Fixed(_) => Vec::new(),
        }
    }
}

fn check_branch_shapes<S: Scalar>(x: &Mat<S>, z_low: &Mat<S>, z_high: &Mat<S>) -> Result<()> {
    if z_low.dim() != z_high.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("matching branch shapes {:?}", z_low.dim()),
            got: format!("{:?}", z_high.dim()),
        });
    }
    if x.nrows() != z_low.nrows() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} feature rows", z_low.nrows()),
            got: format!("{}", x.nrows()),
        });
    }
    Ok(())
}

/// The four parameterless combinations; shapes must be checked first.
fn fuse_plain<S: Scalar>(z_low: &Mat<S>, z_high: &Mat<S>, variant: FuseVariant) -> Mat<S> {
    let half = S::of(0.5);
    match variant {
        FuseVariant::Mean => z_low * half + &(z_high * half),
        FuseVariant::Concat => concatenate(Axis(1), &[z_low.view(), z_high.view()])
            .expect("row counts were checked"),
        FuseVariant::LowOnly => z_low.clone(),
        FuseVariant::HighOnly => z_high.clone(),
        FuseVariant::Gated | FuseVariant::Attention => {
            unreachable!("parameterized variants are dispatched before fuse_plain")
        }
    }
}

/// Combines the branch embeddings without attention parameters. The
/// attention variant carries its own weights; use
/// [`AttentionFusion::fuse`] or a [`FinetuneModel`] for it.
pub fn fuse<S: Scalar>(
    gate: &GatedFusion<S>,
    x: &Mat<S>,
    z_low: &Mat<S>,
    z_high: &Mat<S>,
    variant: FuseVariant,
) -> Result<Mat<S>> {
    check_branch_shapes(x, z_low, z_high)?;
    match variant {
        FuseVariant::Gated => {
            if gate.w_c.value.nrows() != x.ncols() || gate.w_c.value.ncols() != z_low.ncols() {
                return Err(Error::ShapeMismatch {
                    expected: format!("gate weights {} x {}", x.ncols(), z_low.ncols()),
                    got: format!(
                        "{} x {}",
                        gate.w_c.value.nrows(),
                        gate.w_c.value.ncols()
                    ),
                });
            }
            let coeffs = gate.coefficients(x);
            Ok(&coeffs * z_low + &(coeffs.mapv(|c| S::one() - c) * z_high))
        }
        FuseVariant::Attention => Err(Error::InvalidConfig(
            "attention fusion carries its own parameters; build the model with the attention \
             variant"
                .into(),
        )),
        plain => Ok(fuse_plain(z_low, z_high, plain)),
    }
}

// ---------------------------------------------------------------------
// Classifier head
// ---------------------------------------------------------------------

/// Two-layer MLP ending in a scalar logit per node.
#[derive(Debug, Clone)]
pub struct Classifier<S> {
    pub w1: ParamTensor<S>,
    pub b1: ParamTensor<S>,
    pub w2: ParamTensor<S>,
    pub b2: ParamTensor<S>,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
struct ClassifierCache<S> {
    pre1: Mat<S>,
    hidden: Mat<S>,
}

impl<S: Scalar> Classifier<S> {
    pub fn init(
        input_dim: usize,
        hidden: usize,
        activation: Activation,
        rng: &mut SeedRng,
    ) -> Self {
        Self {
            w1: ParamTensor::glorot("head.w1", input_dim, hidden, rng),
            b1: ParamTensor::new("head.b1", Mat::zeros((1, hidden))),
            w2: ParamTensor::glorot("head.w2", hidden, 1, rng),
            b2: ParamTensor::new("head.b2", Mat::zeros((1, 1))),
            activation,
        }
    }

    fn forward(&self, z: &Mat<S>) -> (Vec1<S>, ClassifierCache<S>) {
        let pre1 = linear(z, &self.w1.value, &self.b1.value);
        let hidden = activate(self.activation, &pre1);
        let logits = linear(&hidden, &self.w2.value, &self.b2.value)
            .column(0)
            .to_owned();
        let probs = logits.mapv(sigmoid);
        (probs, ClassifierCache { pre1, hidden })
    }

    /// Per-node anomaly probabilities for fixed parameters.
    pub fn probabilities(&self, z: &Mat<S>) -> Vec1<S> {
        self.forward(z).0
    }

    /// Accumulates parameter gradients and returns the input cotangent.
    fn backward(&mut self, z: &Mat<S>, cache: &ClassifierCache<S>, dlogits: &Vec1<S>) -> Mat<S> {
        let dlogits = dlogits.clone().insert_axis(Axis(1));
        let (dhidden, dw2, db2) = linear_backward(&cache.hidden, &self.w2.value, &dlogits);
        self.w2.grad += &dw2;
        self.b2.grad += &db2;
        let dpre1 = activate_backward(self.activation, &cache.pre1, &dhidden);
        let (dz, dw1, db1) = linear_backward(z, &self.w1.value, &dpre1);
        self.w1.grad += &dw1;
        self.b1.grad += &db1;
        dz
    }

    fn params(&self) -> Vec<&ParamTensor<S>> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor<S>> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

// ---------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------

fn check_labeled(n: usize, labels: &[Label], labeled: &[usize]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} labels"),
            got: format!("{}", labels.len()),
        });
    }
    if labeled.is_empty() {
        return Err(Error::InvalidConfig(
            "at least one labeled node is required".into(),
        ));
    }
    for &i in labeled {
        if i >= n {
            return Err(Error::NodeOutOfRange { id: i, nodes: n });
        }
        if labels[i] != 0 && labels[i] != 1 {
            return Err(Error::BadLabel {
                node: i,
                value: i64::from(labels[i]),
            });
        }
    }
    Ok(())
}

/// Mean binary cross-entropy of the labeled probabilities.
pub fn bce_loss<S: Scalar>(probs: &Vec1<S>, labels: &[Label], labeled: &[usize]) -> Result<S> {
    check_labeled(probs.len(), labels, labeled)?;
    let floor = S::of(PROB_FLOOR);
    let ceil = S::one() - floor;
    let mut total = S::zero();
    for &i in labeled {
        let p = probs[i].max(floor).min(ceil);
        let y = S::of(f64::from(labels[i]));
        total -= y * p.ln() + (S::one() - y) * (S::one() - p).ln();
    }
    Ok(total / S::of(labeled.len() as f64))
}

/// Cross-entropy between each labeled node's mean gate value and its
/// class target, averaged over all labeled nodes. Returns the loss and
/// its gradient with respect to the full coefficient matrix (zero on
/// unlabeled rows).
pub fn reg_loss<S: Scalar>(
    coeffs: &Mat<S>,
    labels: &[Label],
    labeled: &[usize],
    targets: &RegTargets,
) -> Result<(S, Mat<S>)> {
    check_labeled(coeffs.nrows(), labels, labeled)?;
    let e = coeffs.ncols();
    let floor = S::of(PROB_FLOOR);
    let ceil = S::one() - floor;
    let norm = S::of(labeled.len() as f64);
    let per_entry = norm * S::of(e as f64);
    let mut total = S::zero();
    let mut grad = Mat::zeros(coeffs.raw_dim());
    for &i in labeled {
        let c = (coeffs.row(i).sum() / S::of(e as f64)).max(floor).min(ceil);
        let p = if labels[i] == 1 {
            S::of(targets.p_a)
        } else {
            S::of(targets.p_n)
        };
        total -= p * c.ln() + (S::one() - p) * (S::one() - c).ln();
        // d/dc of the node term, spread uniformly over the row because
        // c is the row mean.
        let dc = (-p / c + (S::one() - p) / (S::one() - c)) / per_entry;
        grad.row_mut(i).fill(dc);
    }
    Ok((total / norm, grad))
}

/// Total fine-tuning objective: labeled classification cross-entropy
/// plus the gate regularizer when a coefficient matrix exists. Fusion
/// variants without a gate contribute no regularization term.
pub fn finetune_objective<S: Scalar>(
    probs: &Vec1<S>,
    coeffs: Option<&Mat<S>>,
    labels: &[Label],
    labeled: &[usize],
    targets: &RegTargets,
) -> Result<S> {
    let bce = bce_loss(probs, labels, labeled)?;
    let reg = match coeffs {
        Some(c) => reg_loss(c, labels, labeled, targets)?.0,
        None => S::zero(),
    };
    Ok(bce + reg)
}

// ---------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------

/// Everything that trains during fine-tuning: the fusion parameters (if
/// the variant has any) and the classifier head.
#[derive(Debug, Clone)]
pub struct FinetuneModel<S> {
    pub fusion: Fusion<S>,
    pub head: Classifier<S>,
}

/// Intermediate state of one forward pass, consumed by `backward`.
pub struct ForwardCache<S> {
    fused: Mat<S>,
    fusion: FusionCache<S>,
    head: ClassifierCache<S>,
}

impl<S: Scalar> FinetuneModel<S> {
    pub fn new(input_dim: usize, embed_dim: usize, cfg: &FinetuneConfig) -> Self {
        let mut rng = stream(cfg.seed, salt::FINETUNE);
        let fusion = match cfg.variant {
            FuseVariant::Gated => Fusion::Gated(GatedFusion::init(input_dim, embed_dim, &mut rng)),
            FuseVariant::Attention => Fusion::Attention(AttentionFusion::init(
                input_dim, embed_dim, embed_dim, &mut rng,
            )),
            v => Fusion::Fixed(v),
        };
        let head_in = match cfg.variant {
            FuseVariant::Concat => 2 * embed_dim,
            _ => embed_dim,
        };
        let head = Classifier::init(head_in, embed_dim, cfg.activation, &mut rng);
        Self { fusion, head }
    }

    pub fn params(&self) -> Vec<&ParamTensor<S>> {
        let mut v = self.fusion.params();
        v.extend(self.head.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<S>> {
        let mut v = self.fusion.params_mut();
        v.extend(self.head.params_mut());
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn fuse_forward(
        &self,
        x: &Mat<S>,
        z_low: &Mat<S>,
        z_high: &Mat<S>,
    ) -> Result<(Mat<S>, FusionCache<S>)> {
        check_branch_shapes(x, z_low, z_high)?;
        match &self.fusion {
            Fusion::Gated(g) => {
                let coeffs = g.coefficients(x);
                let fused = &coeffs * z_low + &(coeffs.mapv(|c| S::one() - c) * z_high);
                Ok((fused, FusionCache::Gated { coeffs }))
            }
            Fusion::Attention(a) => {
                let (fused, cache) = a.forward(x, z_low, z_high);
                Ok((fused, FusionCache::Attention(cache)))
            }
            Fusion::Fixed(v) => Ok((fuse_plain(z_low, z_high, *v), FusionCache::Fixed)),
        }
    }

    /// Anomaly probabilities for every node, plus the cache needed to
    /// run a backward pass.
    pub fn forward(
        &self,
        x: &Mat<S>,
        z_low: &Mat<S>,
        z_high: &Mat<S>,
    ) -> Result<(Vec1<S>, ForwardCache<S>)> {
        let (fused, fusion) = self.fuse_forward(x, z_low, z_high)?;
        if fused.ncols() != self.head.w1.value.nrows() {
            return Err(Error::ShapeMismatch {
                expected: format!("head input width {}", self.head.w1.value.nrows()),
                got: format!("{}", fused.ncols()),
            });
        }
        let (probs, head) = self.head.forward(&fused);
        Ok((probs, ForwardCache { fused, fusion, head }))
    }

    /// Objective value at the current parameters, no gradients.
    pub fn objective(
        &self,
        x: &Mat<S>,
        z_low: &Mat<S>,
        z_high: &Mat<S>,
        labels: &[Label],
        labeled: &[usize],
        targets: &RegTargets,
        use_reg: bool,
    ) -> Result<S> {
        let (probs, cache) = self.forward(x, z_low, z_high)?;
        let coeffs = match (&cache.fusion, use_reg) {
            (FusionCache::Gated { coeffs }, true) => Some(coeffs),
            _ => None,
        };
        finetune_objective(&probs, coeffs, labels, labeled, targets)
    }

    /// Objective value plus accumulated parameter gradients. Returns
    /// the probabilities so the caller can reuse them for evaluation.
    pub fn objective_and_grad(
        &mut self,
        x: &Mat<S>,
        z_low: &Mat<S>,
        z_high: &Mat<S>,
        labels: &[Label],
        labeled: &[usize],
        targets: &RegTargets,
        use_reg: bool,
    ) -> Result<(S, Vec1<S>)> {
        let (probs, cache) = self.forward(x, z_low, z_high)?;
        let bce = bce_loss(&probs, labels, labeled)?;
        let (reg, dcoeffs_reg) = match (&cache.fusion, use_reg) {
            (FusionCache::Gated { coeffs }, true) => {
                let (value, grad) = reg_loss(coeffs, labels, labeled, targets)?;
                (value, Some(grad))
            }
            _ => (S::zero(), None),
        };
        let total = bce + reg;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                context: "fine-tuning objective".into(),
            });
        }

        // Classification path: d loss / d logit = (p - y) / |labeled|.
        let norm = S::of(labeled.len() as f64);
        let mut dlogits = Vec1::zeros(probs.len());
        for &i in labeled {
            dlogits[i] = (probs[i] - S::of(f64::from(labels[i]))) / norm;
        }
        let dfused = self.head.backward(&cache.fused, &cache.head, &dlogits);

        match (&mut self.fusion, &cache.fusion) {
            (Fusion::Gated(g), FusionCache::Gated { coeffs }) => {
                let mut dcoeffs = (z_low - z_high) * &dfused;
                if let Some(dreg) = dcoeffs_reg {
                    dcoeffs += &dreg;
                }
                g.backward(x, coeffs, &dcoeffs);
            }
            (Fusion::Attention(a), FusionCache::Attention(cache)) => {
                a.backward(x, z_low, z_high, cache, &dfused);
            }
            (Fusion::Fixed(_), _) => {}
            _ => unreachable!("fusion cache always matches the fusion variant"),
        }
        Ok((total, probs))
    }
}

// ---------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------

/// Index of the best validation score, earliest epoch winning ties.
pub fn select_best(val_history: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in val_history.iter().enumerate() {
        if best.is_none_or(|b| v > val_history[b]) {
            best = Some(i);
        }
    }
    best
}

/// Result of one fine-tuning run: the snapshot with the best validation
/// AUROC and its test-set evaluation.
#[derive(Debug, Clone)]
pub struct FinetuneOutcome<S> {
    pub model: FinetuneModel<S>,
    pub report: EvalReport,
    /// 1-based epoch of the selected snapshot.
    pub best_epoch: usize,
    pub best_val_auroc: f64,
    /// Validation AUROC after each epoch's update.
    pub val_history: Vec<f64>,
    /// Labeled test nodes, aligned with `test_scores`.
    pub test_ids: Vec<usize>,
    pub test_scores: Vec<f64>,
}

fn at_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFiniteLoss { context } => Error::NonFiniteLoss {
            context: format!("{context}, epoch {epoch}"),
        },
        other => other,
    }
}

fn scores_for<S: Scalar>(probs: &Vec1<S>, ids: &[usize]) -> Vec<f64> {
    ids.iter().map(|&i| probs[i].as_f64()).collect()
}

fn labels_for(labels: &[Label], ids: &[usize]) -> Vec<bool> {
    ids.iter().map(|&i| labels[i] == 1).collect()
}

/// Trains the fusion parameters and classifier head on the frozen
/// encoder outputs and evaluates the best-validation snapshot on the
/// test set.
///
/// The encoders run exactly once up front; their standardization
/// statistics therefore come from the whole graph, and no gradient ever
/// reaches them.
pub fn run_finetuning<S: Scalar>(
    pretrained: &PretrainModel<S>,
    spectral_bound: f64,
    graph: &SparseGraph,
    x: &Mat<S>,
    labels: &[Label],
    split: &SplitSpec,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome<S>> {
    cfg.validate()?;
    let n = graph.num_nodes();
    if split.val.is_empty() {
        return Err(Error::EmptyValidation);
    }
    check_labeled(n, labels, &split.train)?;
    check_labeled(n, labels, &split.val)?;

    let (z_low, z_high) = pretrained.encoder.encode(graph, x, spectral_bound)?;
    let mut model = FinetuneModel::new(x.ncols(), z_low.ncols(), cfg);
    let adam_cfg = cfg.adam();
    let mut adam = AdamState::new(&model.params());

    let val_labels = labels_for(labels, &split.val);
    let mut best: Option<(usize, f64, FinetuneModel<S>)> = None;
    let mut val_history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        model.zero_grad();
        model
            .objective_and_grad(
                x,
                &z_low,
                &z_high,
                labels,
                &split.train,
                &cfg.targets,
                cfg.use_regularizer,
            )
            .map_err(|e| at_epoch(e, epoch))?;
        adam.step(&mut model.params_mut(), &adam_cfg)
            .map_err(|e| at_epoch(e, epoch))?;

        let (probs, _) = model.forward(x, &z_low, &z_high)?;
        let val_auroc = auroc(&scores_for(&probs, &split.val), &val_labels)?;
        val_history.push(val_auroc);
        if best.as_ref().is_none_or(|(_, b, _)| val_auroc > *b) {
            best = Some((epoch, val_auroc, model.clone()));
        }
    }
    let (best_epoch, best_val_auroc, model) =
        best.expect("at least one epoch ran, so a snapshot exists");

    let (probs, _) = model.forward(x, &z_low, &z_high)?;
    let test_ids: Vec<usize> = split
        .test
        .iter()
        .copied()
        .filter(|&i| i < n && (labels[i] == 0 || labels[i] == 1))
        .collect();
    let test_scores = scores_for(&probs, &test_ids);
    let test_labels = labels_for(labels, &test_ids);
    let homophily = local_homophily::<f64>(graph, labels)?;
    let test_homophily: Vec<Option<f64>> =
        test_ids.iter().map(|&i| homophily.per_node[i]).collect();
    let quartiles = quartile_analysis(&test_scores, &test_labels, &test_homophily, &test_ids)?;
    let report = evaluate(&test_scores, &test_labels, Some(quartiles))?;

    Ok(FinetuneOutcome {
        model,
        report,
        best_epoch,
        best_val_auroc,
        val_history,
        test_ids,
        test_scores,
    })
}
