//! Self-supervised pre-training of the dual spectral encoders.
//!
//! Two branches encode the graph through a shared constrained filter
//! pair: the smooth branch contrasts each node embedding against one
//! global summary vector, while the sharp branch contrasts it against
//! the summary of that node's high-Rayleigh-quotient subgraph. Negative
//! pairs come from encoding row-shuffled features; both kinds of pair
//! are scored by bilinear discriminators and trained with a standard
//! binary contrastive loss.

use crate::diff::{
    activate, activate_backward, linear, linear_backward, normalize, normalize_backward, outer,
    sigmoid, softplus, standardize_columns, standardize_columns_backward, Activation, AdamConfig,
    AdamState, Normalization, ParamTensor,
};
use crate::error::{Error, Result};
use crate::filters::{
    chebyshev_basis, combine_basis, derive_node_values, effective_gamma, interpolation_matrix,
    FilterMode, VALUE_CLIP,
};
use crate::graph::{estimate_spectral_bound, SparseGraph};
use crate::rng::{salt, stream};
use crate::sampler::RqSubgraph;
use crate::scalar::Scalar;
use crate::{Mat, Vec1};
use ndarray::Axis;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------

/// Hyperparameters for one pre-training run.
///
/// The values form a fixed search grid; [`PretrainConfig::validate`]
/// rejects anything off the grid unless `allow_custom` is set, which
/// keeps sweep definitions honest while leaving an escape hatch for
/// experiments.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub embed_dim: usize,
    /// Polynomial filter order.
    pub order: usize,
    pub activation: Activation,
    pub normalization: Normalization,
    /// Reuse one row shuffle for both branches within an epoch; setting
    /// this false draws an independent shuffle per branch.
    pub shared_corruption: bool,
    pub allow_custom: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 800,
            patience: 20,
            lr: 1e-3,
            embed_dim: 64,
            order: 2,
            activation: Activation::Relu,
            normalization: Normalization::None,
            shared_corruption: true,
            allow_custom: false,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.allow_custom {
            if self.epochs == 0 && self.patience == 0 {
                return Err(Error::InvalidConfig("patience must be positive".into()));
            }
            return self.validate_basic();
        }
        if self.epochs > 800 {
            return Err(Error::InvalidConfig(format!(
                "epochs {} exceeds the 800-epoch budget",
                self.epochs
            )));
        }
        if self.patience != 20 {
            return Err(Error::InvalidConfig(format!(
                "patience {} is off-grid (fixed at 20)",
                self.patience
            )));
        }
        if ![1e-2, 1e-3, 1e-4].contains(&self.lr) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} is off-grid {{1e-2, 1e-3, 1e-4}}",
                self.lr
            )));
        }
        if ![32, 64].contains(&self.embed_dim) {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} is off-grid {{32, 64}}",
                self.embed_dim
            )));
        }
        if ![2, 3].contains(&self.order) {
            return Err(Error::InvalidConfig(format!(
                "filter order {} is off-grid {{2, 3}}",
                self.order
            )));
        }
        if self.activation == Activation::Sigmoid {
            return Err(Error::InvalidConfig(
                "sigmoid is not in the encoder activation grid".into(),
            ));
        }
        self.validate_basic()
    }

    fn validate_basic(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::InvalidConfig("embed_dim must be positive".into()));
        }
        if self.order == 0 {
            return Err(Error::InvalidConfig(
                "filter order must be at least 1".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------

/// One hidden-layer map `in -> e -> e`: linear, optional normalization,
/// activation, linear.
#[derive(Debug, Clone)]
pub struct Mlp<S> {
    pub w1: ParamTensor<S>,
    pub b1: ParamTensor<S>,
    pub w2: ParamTensor<S>,
    pub b2: ParamTensor<S>,
}

impl<S: Scalar> Mlp<S> {
    fn init(prefix: &str, d_in: usize, d_out: usize, rng: &mut crate::rng::SeedRng) -> Self {
        Self {
            w1: ParamTensor::glorot(format!("{prefix}.w1"), d_in, d_out, rng),
            b1: ParamTensor::zeros(format!("{prefix}.b1"), 1, d_out),
            w2: ParamTensor::glorot(format!("{prefix}.w2"), d_out, d_out, rng),
            b2: ParamTensor::zeros(format!("{prefix}.b2"), 1, d_out),
        }
    }

    fn params(&self) -> [&ParamTensor<S>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn params_mut(&mut self) -> [&mut ParamTensor<S>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

struct MlpCache<S> {
    h: Mat<S>,
    hn: Mat<S>,
    a: Mat<S>,
    u: Mat<S>,
}

fn mlp_forward<S: Scalar>(
    mlp: &Mlp<S>,
    x: &Mat<S>,
    act: Activation,
    norm: Normalization,
) -> (Mat<S>, MlpCache<S>) {
    let h = linear(x, &mlp.w1.value, &mlp.b1.value);
    let hn = normalize(norm, &h);
    let a = activate(act, &hn);
    let u = linear(&a, &mlp.w2.value, &mlp.b2.value);
    let z = standardize_columns(&u);
    (z, MlpCache { h, hn, a, u })
}

/// Accumulates parameter gradients and returns the input cotangent.
fn mlp_backward<S: Scalar>(
    mlp: &mut Mlp<S>,
    x: &Mat<S>,
    cache: &MlpCache<S>,
    act: Activation,
    norm: Normalization,
    dz: &Mat<S>,
) -> Mat<S> {
    let du = standardize_columns_backward(&cache.u, dz);
    let (da, dw2, db2) = linear_backward(&cache.a, &mlp.w2.value, &du);
    mlp.w2.grad += &dw2;
    mlp.b2.grad += &db2;
    let dhn = activate_backward(act, &cache.hn, &da);
    let dh = normalize_backward(norm, &cache.h, &dhn);
    let (dx, dw1, db1) = linear_backward(x, &mlp.w1.value, &dh);
    mlp.w1.grad += &dw1;
    mlp.b1.grad += &db1;
    dx
}

/// The shared-parameter filter pair plus one encoder MLP per branch.
#[derive(Debug, Clone)]
pub struct DualEncoder<S> {
    /// Raw filter parameters, `1 x (order + 1)`, shared by both modes.
    pub gamma_raw: ParamTensor<S>,
    pub mlp_low: Mlp<S>,
    pub mlp_high: Mlp<S>,
    pub order: usize,
    pub embed_dim: usize,
    pub activation: Activation,
    pub normalization: Normalization,
}

impl<S: Scalar> DualEncoder<S> {
    /// Raw parameters start on a linear ramp: the low-pass values fall
    /// from 1 to 0 across the nodes and the high-pass values rise from 1
    /// to 2, a deterministic mid-strength starting shape.
    fn init_gamma(order: usize) -> Mat<S> {
        let step = (1.0 / order as f64).sqrt();
        Mat::from_shape_fn((1, order + 1), |(_, j)| {
            if j == 0 {
                S::one()
            } else {
                S::of(step)
            }
        })
    }

    pub fn init(input_dim: usize, cfg: &PretrainConfig) -> Self {
        Self::init_with_rng(input_dim, cfg, &mut stream(cfg.seed, salt::INIT))
    }

    fn init_with_rng(
        input_dim: usize,
        cfg: &PretrainConfig,
        rng: &mut crate::rng::SeedRng,
    ) -> Self {
        let e = cfg.embed_dim;
        Self {
            gamma_raw: ParamTensor::new("gamma_raw", Self::init_gamma(cfg.order)),
            mlp_low: Mlp::init("mlp_low", input_dim, e, rng),
            mlp_high: Mlp::init("mlp_high", input_dim, e, rng),
            order: cfg.order,
            embed_dim: e,
            activation: cfg.activation,
            normalization: cfg.normalization,
        }
    }

    fn gamma_vec(&self) -> Vec1<S> {
        self.gamma_raw.value.row(0).to_owned()
    }

    /// Filter coefficients for one mode under the current parameters.
    pub fn coefficients(&self, mode: FilterMode) -> Vec1<S> {
        let values = derive_node_values(&self.gamma_vec(), mode);
        interpolation_matrix::<S>(self.order).dot(&values)
    }

    /// Filtered features for one mode from a precomputed basis.
    fn filter_from_basis(&self, mode: FilterMode, basis: &[Mat<S>]) -> Result<Mat<S>> {
        combine_basis(&self.coefficients(mode), basis)
    }

    /// Encodes features into the two branch embeddings, each column
    /// standardized. `bound` is the spectral bound used to rescale the
    /// normalized Laplacian.
    pub fn encode(&self, graph: &SparseGraph, x: &Mat<S>, bound: f64) -> Result<(Mat<S>, Mat<S>)> {
        let basis = chebyshev_basis(graph, x, bound, self.order)?;
        let xf_low = self.filter_from_basis(FilterMode::LowPass, &basis)?;
        let xf_high = self.filter_from_basis(FilterMode::HighPass, &basis)?;
        let (z_l, _) = mlp_forward(&self.mlp_low, &xf_low, self.activation, self.normalization);
        let (z_h, _) = mlp_forward(&self.mlp_high, &xf_high, self.activation, self.normalization);
        Ok((z_l, z_h))
    }
}

/// Bilinear pair scorers, one per branch: `D(z, s) = sigmoid(z' W s)`.
#[derive(Debug, Clone)]
pub struct Discriminators<S> {
    pub w_low: ParamTensor<S>,
    pub w_high: ParamTensor<S>,
}

impl<S: Scalar> Discriminators<S> {
    pub fn init(embed_dim: usize, rng: &mut crate::rng::SeedRng) -> Self {
        Self {
            w_low: ParamTensor::glorot("disc.w_low", embed_dim, embed_dim, rng),
            w_high: ParamTensor::glorot("disc.w_high", embed_dim, embed_dim, rng),
        }
    }
}

/// Encoder and discriminators trained together.
#[derive(Debug, Clone)]
pub struct PretrainModel<S> {
    pub encoder: DualEncoder<S>,
    pub disc: Discriminators<S>,
}

impl<S: Scalar> PretrainModel<S> {
    pub fn new(input_dim: usize, cfg: &PretrainConfig) -> Self {
        // One stream feeds encoder and discriminator initialization in
        // order, so the full parameter set is a pure function of the seed.
        let mut rng = stream(cfg.seed, salt::INIT);
        let encoder = DualEncoder::init_with_rng(input_dim, cfg, &mut rng);
        let disc = Discriminators::init(cfg.embed_dim, &mut rng);
        Self { encoder, disc }
    }

    pub fn params(&self) -> Vec<&ParamTensor<S>> {
        let mut v = vec![&self.encoder.gamma_raw];
        v.extend(self.encoder.mlp_low.params());
        v.extend(self.encoder.mlp_high.params());
        v.push(&self.disc.w_low);
        v.push(&self.disc.w_high);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor<S>> {
        let Self { encoder, disc } = self;
        let mut v = vec![&mut encoder.gamma_raw];
        v.extend(encoder.mlp_low.params_mut());
        v.extend(encoder.mlp_high.params_mut());
        v.push(&mut disc.w_low);
        v.push(&mut disc.w_high);
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Loss under the current parameters without touching gradients.
    pub fn loss(
        &self,
        clean_basis: &[Mat<S>],
        cor_basis_low: &[Mat<S>],
        cor_basis_high: &[Mat<S>],
        subgraphs: &[RqSubgraph],
    ) -> Result<S> {
        let (loss, _, _) = self.forward(clean_basis, cor_basis_low, cor_basis_high, subgraphs)?;
        Ok(loss)
    }

    /// Loss plus accumulated gradients for every parameter.
    pub fn loss_and_grad(
        &mut self,
        clean_basis: &[Mat<S>],
        cor_basis_low: &[Mat<S>],
        cor_basis_high: &[Mat<S>],
        subgraphs: &[RqSubgraph],
    ) -> Result<S> {
        self.zero_grad();
        let (loss, caches, logits) =
            self.forward(clean_basis, cor_basis_low, cor_basis_high, subgraphs)?;
        self.backward(&caches, &logits, clean_basis, cor_basis_low, cor_basis_high, subgraphs);
        Ok(loss)
    }

    fn forward(
        &self,
        clean_basis: &[Mat<S>],
        cor_basis_low: &[Mat<S>],
        cor_basis_high: &[Mat<S>],
        subgraphs: &[RqSubgraph],
    ) -> Result<(S, ForwardCaches<S>, Logits<S>)> {
        let enc = &self.encoder;
        let xf = BranchInputs {
            low: enc.filter_from_basis(FilterMode::LowPass, clean_basis)?,
            low_cor: enc.filter_from_basis(FilterMode::LowPass, cor_basis_low)?,
            high: enc.filter_from_basis(FilterMode::HighPass, clean_basis)?,
            high_cor: enc.filter_from_basis(FilterMode::HighPass, cor_basis_high)?,
        };
        let (act, norm) = (enc.activation, enc.normalization);
        let (z_low, c_low) = mlp_forward(&enc.mlp_low, &xf.low, act, norm);
        let (z_low_cor, c_low_cor) = mlp_forward(&enc.mlp_low, &xf.low_cor, act, norm);
        let (z_high, c_high) = mlp_forward(&enc.mlp_high, &xf.high, act, norm);
        let (z_high_cor, c_high_cor) = mlp_forward(&enc.mlp_high, &xf.high_cor, act, norm);

        let s_low = global_summary(&z_low);
        let s_high = subgraph_summaries(&z_high, subgraphs)?;

        let u_low = self.disc.w_low.value.dot(&s_low);
        let q_high = s_high.dot(&self.disc.w_high.value.t());
        let n = z_low.nrows();
        let mut logits = Logits {
            pos_low: z_low.dot(&u_low),
            neg_low: z_low_cor.dot(&u_low),
            pos_high: Vec1::zeros(n),
            neg_high: Vec1::zeros(n),
        };
        for i in 0..n {
            logits.pos_high[i] = z_high.row(i).dot(&q_high.row(i));
            logits.neg_high[i] = z_high_cor.row(i).dot(&q_high.row(i));
        }

        let loss = logits.loss();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                context: "contrastive objective".into(),
            });
        }
        let caches = ForwardCaches {
            xf,
            z_low,
            z_low_cor,
            z_high,
            z_high_cor,
            c_low,
            c_low_cor,
            c_high,
            c_high_cor,
            s_low,
            s_high,
            u_low,
            q_high,
        };
        Ok((loss, caches, logits))
    }

    fn backward(
        &mut self,
        c: &ForwardCaches<S>,
        logits: &Logits<S>,
        clean_basis: &[Mat<S>],
        cor_basis_low: &[Mat<S>],
        cor_basis_high: &[Mat<S>],
        subgraphs: &[RqSubgraph],
    ) {
        let n = c.z_low.nrows();
        let e = self.encoder.embed_dim;
        let inv_n = S::one() / S::of(n as f64);
        let d_pos_low = logits.pos_low.mapv(|x| pos_term_grad(x) * inv_n);
        let d_neg_low = logits.neg_low.mapv(|x| neg_term_grad(x) * inv_n);
        let d_pos_high = logits.pos_high.mapv(|x| pos_term_grad(x) * inv_n);
        let d_neg_high = logits.neg_high.mapv(|x| neg_term_grad(x) * inv_n);

        // Smooth branch: every logit shares the vector W s.
        let mut dz_low = outer(&d_pos_low, &c.u_low);
        let dz_low_cor = outer(&d_neg_low, &c.u_low);
        let du_low = c.z_low.t().dot(&d_pos_low) + c.z_low_cor.t().dot(&d_neg_low);
        self.disc.w_low.grad += &outer(&du_low, &c.s_low);
        let ds_low = self.disc.w_low.value.t().dot(&du_low);
        // The global summary spreads its cotangent over every row.
        let ds_row = ds_low.mapv(|v| v * inv_n);
        for mut row in dz_low.rows_mut() {
            row += &ds_row;
        }

        // Sharp branch: per-node summary vectors.
        let mut dz_high = Mat::zeros((n, e));
        let mut dz_high_cor = Mat::zeros((n, e));
        let mut dq_high = Mat::zeros((n, e));
        for i in 0..n {
            let (dp, dn) = (d_pos_high[i], d_neg_high[i]);
            let zi = c.z_high.row(i);
            let zci = c.z_high_cor.row(i);
            let qi = c.q_high.row(i);
            for k in 0..e {
                dz_high[[i, k]] += dp * qi[k];
                dz_high_cor[[i, k]] += dn * qi[k];
                dq_high[[i, k]] = dp * zi[k] + dn * zci[k];
            }
        }
        self.disc.w_high.grad += &dq_high.t().dot(&c.s_high);
        let ds_high = dq_high.dot(&self.disc.w_high.value);
        for (i, sub) in subgraphs.iter().enumerate() {
            let inv_m = S::one() / S::of(sub.members.len() as f64);
            for &m in &sub.members {
                for k in 0..e {
                    dz_high[[m, k]] += ds_high[[i, k]] * inv_m;
                }
            }
        }

        // Through the MLPs back to the filtered features.
        let (act, norm) = (self.encoder.activation, self.encoder.normalization);
        let dxf_low = mlp_backward(&mut self.encoder.mlp_low, &c.xf.low, &c.c_low, act, norm, &dz_low);
        let dxf_low_cor = mlp_backward(
            &mut self.encoder.mlp_low,
            &c.xf.low_cor,
            &c.c_low_cor,
            act,
            norm,
            &dz_low_cor,
        );
        let dxf_high = mlp_backward(
            &mut self.encoder.mlp_high,
            &c.xf.high,
            &c.c_high,
            act,
            norm,
            &dz_high,
        );
        let dxf_high_cor = mlp_backward(
            &mut self.encoder.mlp_high,
            &c.xf.high_cor,
            &c.c_high_cor,
            act,
            norm,
            &dz_high_cor,
        );

        // Through the filters into the shared raw parameters.
        let gamma = self.encoder.gamma_vec();
        let order = self.encoder.order;
        let m_t = interpolation_matrix::<S>(order).t().to_owned();
        let mut dgamma = Vec1::zeros(order + 1);
        for (mode, dxf, basis) in [
            (FilterMode::LowPass, &dxf_low, clean_basis),
            (FilterMode::LowPass, &dxf_low_cor, cor_basis_low),
            (FilterMode::HighPass, &dxf_high, clean_basis),
            (FilterMode::HighPass, &dxf_high_cor, cor_basis_high),
        ] {
            let dcoeff = Vec1::from_shape_fn(order + 1, |k| {
                dxf.iter().zip(basis[k].iter()).map(|(&d, &b)| d * b).sum()
            });
            let dvalues = m_t.dot(&dcoeff);
            dgamma += &gamma_backward(&gamma, mode, &dvalues);
        }
        for j in 0..=order {
            self.encoder.gamma_raw.grad[[0, j]] += dgamma[j];
        }
    }
}

struct BranchInputs<S> {
    low: Mat<S>,
    low_cor: Mat<S>,
    high: Mat<S>,
    high_cor: Mat<S>,
}

struct ForwardCaches<S> {
    xf: BranchInputs<S>,
    z_low: Mat<S>,
    z_low_cor: Mat<S>,
    z_high: Mat<S>,
    z_high_cor: Mat<S>,
    c_low: MlpCache<S>,
    c_low_cor: MlpCache<S>,
    c_high: MlpCache<S>,
    c_high_cor: MlpCache<S>,
    s_low: Vec1<S>,
    s_high: Mat<S>,
    u_low: Vec1<S>,
    q_high: Mat<S>,
}

struct Logits<S> {
    pos_low: Vec1<S>,
    neg_low: Vec1<S>,
    pos_high: Vec1<S>,
    neg_high: Vec1<S>,
}

impl<S: Scalar> Logits<S> {
    fn loss(&self) -> S {
        let n = S::of(self.pos_low.len() as f64);
        let mut total = S::zero();
        for (pos, neg) in [(&self.pos_low, &self.neg_low), (&self.pos_high, &self.neg_high)] {
            let branch = pos.iter().map(|&x| pos_term(x)).sum::<S>()
                + neg.iter().map(|&x| neg_term(x)).sum::<S>();
            total += branch / n;
        }
        total
    }
}

// Per-pair loss terms. `-log sigmoid(x)` and `-log(1 - sigmoid(x))` in
// softplus form, capped where the probability would round below 1e-12.
fn term_cap<S: Scalar>() -> S {
    -S::of(1e-12).ln()
}

fn pos_term<S: Scalar>(logit: S) -> S {
    softplus(-logit).min(term_cap())
}

fn neg_term<S: Scalar>(logit: S) -> S {
    softplus(logit).min(term_cap())
}

fn pos_term_grad<S: Scalar>(logit: S) -> S {
    if softplus(-logit) < term_cap() {
        sigmoid(logit) - S::one()
    } else {
        S::zero()
    }
}

fn neg_term_grad<S: Scalar>(logit: S) -> S {
    if softplus(logit) < term_cap() {
        sigmoid(logit)
    } else {
        S::zero()
    }
}

/// Adjoint of the cumulative clipped node-value map, producing the raw
/// parameter cotangent for one mode.
fn gamma_backward<S: Scalar>(gamma_raw: &Vec1<S>, mode: FilterMode, dvalues: &Vec1<S>) -> Vec1<S> {
    let gamma = effective_gamma(gamma_raw);
    let k1 = gamma.len();
    let clip = S::of(VALUE_CLIP);
    let mut accs = Vec1::zeros(k1);
    let mut acc = gamma[0];
    accs[0] = acc;
    for k in 1..k1 {
        match mode {
            FilterMode::LowPass => acc -= gamma[k],
            FilterMode::HighPass => acc += gamma[k],
        }
        accs[k] = acc;
    }
    let mut dgamma_eff = Vec1::zeros(k1);
    let mut carry = S::zero();
    for k in (0..k1).rev() {
        let pass = if accs[k].abs() < clip { dvalues[k] } else { S::zero() };
        let dacc = pass + carry;
        if k == 0 {
            dgamma_eff[0] = dacc;
        } else {
            dgamma_eff[k] = match mode {
                FilterMode::LowPass => -dacc,
                FilterMode::HighPass => dacc,
            };
            carry = dacc;
        }
    }
    // Through the squaring of raw parameters (index 0 passes straight
    // through).
    Vec1::from_shape_fn(k1, |j| {
        if j == 0 {
            dgamma_eff[0]
        } else {
            S::of(2.0) * gamma_raw[j] * dgamma_eff[j]
        }
    })
}

// ---------------------------------------------------------------------
// Public data ops
// ---------------------------------------------------------------------

/// Shuffles feature rows across nodes (the graph stays untouched),
/// producing the negative-sample input. Deterministic per seed.
pub fn corrupt<S: Scalar>(x: &Mat<S>, seed: u64) -> Mat<S> {
    use rand::seq::SliceRandom;
    let mut rng = stream(seed, salt::CORRUPT);
    let mut perm: Vec<usize> = (0..x.nrows()).collect();
    perm.shuffle(&mut rng);
    let mut out = Mat::zeros(x.raw_dim());
    for (dst, &src) in perm.iter().enumerate() {
        out.row_mut(dst).assign(&x.row(src));
    }
    out
}

/// Column mean of the embedding matrix: the whole-graph summary.
pub fn global_summary<S: Scalar>(z: &Mat<S>) -> Vec1<S> {
    z.mean_axis(Axis(0)).expect("nonempty embedding")
}

/// Row i of the result is the mean embedding over the members of node
/// i's subgraph.
pub fn subgraph_summaries<S: Scalar>(z: &Mat<S>, subgraphs: &[RqSubgraph]) -> Result<Mat<S>> {
    if subgraphs.len() != z.nrows() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} subgraphs", z.nrows()),
            got: format!("{}", subgraphs.len()),
        });
    }
    let mut out = Mat::zeros(z.raw_dim());
    for (i, sub) in subgraphs.iter().enumerate() {
        if sub.members.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "subgraph {i} has no members"
            )));
        }
        let inv = S::one() / S::of(sub.members.len() as f64);
        for &m in &sub.members {
            let row = z.row(m);
            for k in 0..z.ncols() {
                out[[i, k]] += row[k] * inv;
            }
        }
    }
    Ok(out)
}

/// Both branch summaries at once.
pub fn summaries<S: Scalar>(
    z_low: &Mat<S>,
    z_high: &Mat<S>,
    subgraphs: &[RqSubgraph],
) -> Result<(Vec1<S>, Mat<S>)> {
    Ok((global_summary(z_low), subgraph_summaries(z_high, subgraphs)?))
}

/// Contrastive objective value for explicitly provided embeddings and
/// summaries: clean pairs should score high, shuffled pairs low, on
/// both branches. Exposed for diagnostics; training uses the model's
/// fused forward/backward.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_loss<S: Scalar>(
    z_low: &Mat<S>,
    z_low_cor: &Mat<S>,
    z_high: &Mat<S>,
    z_high_cor: &Mat<S>,
    s_low: &Vec1<S>,
    s_high: &Mat<S>,
    disc: &Discriminators<S>,
) -> Result<S> {
    let n = z_low.nrows();
    let u_low = disc.w_low.value.dot(s_low);
    let q_high = s_high.dot(&disc.w_high.value.t());
    let mut logits = Logits {
        pos_low: z_low.dot(&u_low),
        neg_low: z_low_cor.dot(&u_low),
        pos_high: Vec1::zeros(n),
        neg_high: Vec1::zeros(n),
    };
    for i in 0..n {
        logits.pos_high[i] = z_high.row(i).dot(&q_high.row(i));
        logits.neg_high[i] = z_high_cor.row(i).dot(&q_high.row(i));
    }
    let loss = logits.loss();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            context: "contrastive objective".into(),
        });
    }
    Ok(loss)
}

// ---------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------

/// Result of a pre-training run: the best-loss snapshot plus the loss
/// trace that produced it.
#[derive(Debug, Clone)]
pub struct PretrainOutcome<S> {
    pub model: PretrainModel<S>,
    /// Loss per evaluation; entry 0 is the initialization.
    pub loss_history: Vec<f64>,
    pub best_epoch: usize,
    pub best_loss: f64,
    /// Spectral bound estimated once and reused at fine-tune time.
    pub spectral_bound: f64,
}

/// Trains the dual encoders with Adam and train-loss early stopping.
///
/// Evaluation 0 scores the initialization; each subsequent epoch draws
/// fresh corruption, takes one full-graph gradient step, and keeps the
/// best-loss snapshot. Training stops after `patience` evaluations
/// without improvement.
pub fn run_pretraining<S: Scalar>(
    graph: &SparseGraph,
    x: &Mat<S>,
    subgraphs: &[RqSubgraph],
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome<S>> {
    cfg.validate()?;
    if x.nrows() != graph.num_nodes() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} feature rows", graph.num_nodes()),
            got: format!("{}", x.nrows()),
        });
    }
    let bound: f64 = estimate_spectral_bound::<f64>(graph, 1e-7, 100)?.as_f64();
    let clean_basis = chebyshev_basis(graph, x, bound, cfg.order)?;
    let mut model = PretrainModel::<S>::new(x.ncols(), cfg);
    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let mut adam = AdamState::new(&model.params());

    let corrupted_bases = |epoch: usize| -> Result<(Vec<Mat<S>>, Option<Vec<Mat<S>>>)> {
        let seed_low = cfg.seed.wrapping_add(2 * epoch as u64);
        let low = chebyshev_basis(graph, &corrupt(x, seed_low), bound, cfg.order)?;
        let high = if cfg.shared_corruption {
            None
        } else {
            let seed_high = cfg.seed.wrapping_add(2 * epoch as u64 + 1);
            Some(chebyshev_basis(graph, &corrupt(x, seed_high), bound, cfg.order)?)
        };
        Ok((low, high))
    };

    let (b_low, b_high) = corrupted_bases(0)?;
    let init_loss = model
        .loss(&clean_basis, &b_low, b_high.as_ref().unwrap_or(&b_low), subgraphs)
        .map_err(|e| at_epoch(e, 0))?
        .as_f64();
    let mut history = vec![init_loss];
    let mut best = model.clone();
    let mut best_loss = init_loss;
    let mut best_epoch = 0;
    let mut stall = 0;

    for epoch in 1..=cfg.epochs {
        let (b_low, b_high) = corrupted_bases(epoch)?;
        let b_high = b_high.as_ref().unwrap_or(&b_low);
        // Gradients first: the loss is evaluated at the pre-step
        // parameters, so a snapshot taken now matches the recorded loss.
        let loss = model
            .loss_and_grad(&clean_basis, &b_low, b_high, subgraphs)
            .map_err(|e| at_epoch(e, epoch))?
            .as_f64();
        history.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best_epoch = epoch;
            best = model.clone();
            stall = 0;
        } else {
            stall += 1;
            if stall >= cfg.patience {
                break;
            }
        }
        let mut params = model.params_mut();
        adam.step(&mut params, &adam_cfg)?;
    }

    Ok(PretrainOutcome {
        model: best,
        loss_history: history,
        best_epoch,
        best_loss,
        spectral_bound: bound,
    })
}

fn at_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFiniteLoss { .. } => Error::NonFiniteLoss {
            context: format!("epoch {epoch}"),
        },
        other => other,
    }
}

// ---------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{sample_all, SamplerConfig};

    fn singleton_subgraphs(n: usize) -> Vec<RqSubgraph> {
        (0..n)
            .map(|i| RqSubgraph {
                center: i,
                members: vec![i],
                rq_value: 0.0,
                hop_limit: 1,
            })
            .collect()
    }

    fn line_graph(n: usize) -> SparseGraph {
        let edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
        SparseGraph::from_edges(n, &edges, true).unwrap()
    }

    #[test]
    fn corrupt_is_a_seeded_bijection() {
        let x = Mat::from_shape_fn((6, 3), |(i, j)| (i * 3 + j) as f64);
        let a = corrupt(&x, 5);
        let b = corrupt(&x, 5);
        assert_eq!(a, b);
        let c = corrupt(&x, 6);
        assert_ne!(a, c);
        // Multiset of rows is preserved.
        let mut rows_in: Vec<Vec<i64>> = x
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&v| v as i64).collect())
            .collect();
        let mut rows_out: Vec<Vec<i64>> = a
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&v| v as i64).collect())
            .collect();
        rows_in.sort();
        rows_out.sort();
        assert_eq!(rows_in, rows_out);
    }

    #[test]
    fn corrupt_single_row_is_identity() {
        let x = Mat::from_shape_vec((1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(corrupt(&x, 99), x);
    }

    #[test]
    fn summaries_match_naive_averaging() {
        let z = Mat::from_shape_fn((4, 2), |(i, j)| (i as f64 + 1.0) * (j as f64 + 0.5));
        let subs = vec![
            RqSubgraph { center: 0, members: vec![0, 1], rq_value: 0.0, hop_limit: 1 },
            RqSubgraph { center: 1, members: vec![1], rq_value: 0.0, hop_limit: 1 },
            RqSubgraph { center: 2, members: vec![0, 2, 3], rq_value: 0.0, hop_limit: 1 },
            RqSubgraph { center: 3, members: vec![3, 2], rq_value: 0.0, hop_limit: 1 },
        ];
        let s = subgraph_summaries(&z, &subs).unwrap();
        for (i, sub) in subs.iter().enumerate() {
            for k in 0..2 {
                let mut acc = 0.0;
                for &m in &sub.members {
                    acc += z[[m, k]];
                }
                acc /= sub.members.len() as f64;
                assert!((s[[i, k]] - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn singleton_subgraph_summary_is_identity() {
        let z = Mat::from_shape_fn((5, 3), |(i, j)| (i + j) as f64);
        let s = subgraph_summaries(&z, &singleton_subgraphs(5)).unwrap();
        assert_eq!(s, z);
    }

    #[test]
    fn all_node_subgraphs_reduce_to_global_mean() {
        let z = Mat::from_shape_fn((4, 2), |(i, j)| ((i * 2 + j) as f64).sin());
        let subs: Vec<RqSubgraph> = (0..4)
            .map(|i| RqSubgraph {
                center: i,
                members: vec![0, 1, 2, 3],
                rq_value: 0.0,
                hop_limit: 2,
            })
            .collect();
        let s = subgraph_summaries(&z, &subs).unwrap();
        let g = global_summary(&z);
        for i in 0..4 {
            for k in 0..2 {
                assert!((s[[i, k]] - g[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_discriminators_give_four_ln_two() {
        let n = 7;
        let e = 3;
        let z = Mat::from_shape_fn((n, e), |(i, j)| ((i * e + j) as f64).cos());
        let disc = Discriminators {
            w_low: ParamTensor::zeros("w_low", e, e),
            w_high: ParamTensor::zeros("w_high", e, e),
        };
        let s_low = global_summary(&z);
        let s_high = subgraph_summaries(&z, &singleton_subgraphs(n)).unwrap();
        let loss = pretrain_loss(&z, &z, &z, &z, &s_low, &s_high, &disc).unwrap();
        assert!((loss - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_discrimination_drives_loss_to_zero() {
        let n = 4;
        let z_pos = Mat::from_elem((n, 1), 40.0);
        let z_neg = Mat::from_elem((n, 1), -40.0);
        let disc = Discriminators {
            w_low: ParamTensor::new("w_low", Mat::from_elem((1, 1), 1.0)),
            w_high: ParamTensor::new("w_high", Mat::from_elem((1, 1), 1.0)),
        };
        let s_low = Vec1::from_elem(1, 1.0);
        let s_high = Mat::from_elem((n, 1), 1.0);
        let loss =
            pretrain_loss(&z_pos, &z_neg, &z_pos, &z_neg, &s_low, &s_high, &disc).unwrap();
        assert!(loss < 1e-6, "loss {loss}");
    }

    #[test]
    fn constant_filter_identity_mlp_encodes_standardized_input() {
        // Raw gamma (1, 0, 0) makes both modes the constant-one filter,
        // identity weights with nonnegative inputs make the MLP a
        // pass-through, so encode returns the standardized features.
        let g = line_graph(5);
        let x = Mat::from_shape_fn((5, 2), |(i, j)| (i + j) as f64 * 0.3 + 0.1);
        let cfg = PretrainConfig {
            embed_dim: 2,
            order: 2,
            allow_custom: true,
            ..PretrainConfig::default()
        };
        let mut enc = DualEncoder::<f64>::init(2, &cfg);
        enc.gamma_raw.value = Mat::from_shape_vec((1, 3), vec![1.0, 0.0, 0.0]).unwrap();
        let eye = Mat::from_shape_fn((2, 2), |(i, j)| f64::from(i == j));
        for mlp in [&mut enc.mlp_low, &mut enc.mlp_high] {
            mlp.w1.value = eye.clone();
            mlp.w2.value = eye.clone();
            mlp.b1.value.fill(0.0);
            mlp.b2.value.fill(0.0);
        }
        let (z_l, z_h) = enc.encode(&g, &x, 2.0).unwrap();
        let expect = standardize_columns(&x);
        for (a, b) in z_l.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(z_l, z_h);
    }

    #[test]
    fn encode_is_deterministic() {
        let g = line_graph(6);
        let x = Mat::from_shape_fn((6, 3), |(i, j)| ((i * 3 + j) as f64).sin());
        let cfg = PretrainConfig {
            embed_dim: 4,
            allow_custom: true,
            seed: 3,
            ..PretrainConfig::default()
        };
        let enc = DualEncoder::<f64>::init(3, &cfg);
        let a = enc.encode(&g, &x, 1.7).unwrap();
        let b = enc.encode(&g, &x, 1.7).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn config_grid_is_enforced() {
        let mut cfg = PretrainConfig::default();
        cfg.lr = 5e-3;
        assert!(cfg.validate().is_err());
        cfg.allow_custom = true;
        assert!(cfg.validate().is_ok());
        let cfg = PretrainConfig {
            embed_dim: 48,
            ..PretrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = PretrainConfig {
            epochs: 801,
            ..PretrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = PretrainConfig {
            activation: Activation::Sigmoid,
            ..PretrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(PretrainConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let g = line_graph(6);
        let x = Mat::from_shape_fn((6, 2), |(i, j)| ((i + 2 * j) as f64).cos());
        let subs = sample_all(&g, &x, &SamplerConfig::default());
        let cfg = PretrainConfig {
            epochs: 0,
            embed_dim: 3,
            allow_custom: true,
            seed: 11,
            ..PretrainConfig::default()
        };
        let out = run_pretraining(&g, &x, &subs, &cfg).unwrap();
        assert_eq!(out.loss_history.len(), 1);
        assert_eq!(out.best_epoch, 0);
        let fresh = PretrainModel::<f64>::new(2, &cfg);
        for (a, b) in out.model.params().iter().zip(fresh.params().iter()) {
            assert_eq!(a.value, b.value, "{} changed", a.name);
        }
    }

    #[test]
    fn short_training_run_improves_loss() {
        let spec = crate::asbm::AsbmSpec {
            n_anomaly: 15,
            n_normal: 45,
            mean_anomaly: vec![-0.5, 0.0, 0.1, 0.0],
            mean_normal: vec![0.5, 0.0, -0.1, 0.0],
            homophilic: crate::asbm::RatePair { intra: 0.25, inter: 0.05 },
            heterophilic: crate::asbm::RatePair { intra: 0.05, inter: 0.25 },
            theta_min: 1.0,
            theta_max: 1.0,
            frac_heterophilic: 0.3,
            seed: 4,
        };
        let inst = crate::asbm::generate_asbm(&spec).unwrap();
        let graph = inst.graph.with_self_loops(true);
        let subs = sample_all(&graph, &inst.features, &SamplerConfig::default());
        let cfg = PretrainConfig {
            epochs: 40,
            lr: 1e-2,
            embed_dim: 8,
            order: 2,
            allow_custom: true,
            seed: 7,
            ..PretrainConfig::default()
        };
        let out = run_pretraining(&graph, &inst.features, &subs, &cfg).unwrap();
        assert!(out.best_loss < out.loss_history[0], "no improvement");
        assert!(out.best_loss <= *out.loss_history.last().unwrap() + 1e-12);
        // Monotone filter shapes survive training.
        let vals = out.model.encoder.coefficients(FilterMode::LowPass);
        assert_eq!(vals.len(), 3);
        let low = derive_node_values(&out.model.encoder.gamma_vec(), FilterMode::LowPass);
        for k in 1..low.len() {
            assert!(low[k] <= low[k - 1]);
        }
    }
}
