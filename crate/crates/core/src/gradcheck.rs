//! Central finite-difference validation of every backward pass.
//!
//! Each case perturbs one scalar at a time by `FD_STEP`, recomputes the
//! scalarized output, and compares the centered difference against the
//! analytic gradient. Matrix-valued ops are scalarized by projecting
//! onto a fixed random cotangent, which exercises the backward function
//! with a generic adjoint. Inputs are sampled away from activation
//! kinks and loss caps so the difference quotient measures the same
//! branch the analytic gradient lives on.

use crate::diff::{
    activate, activate_backward, linear, linear_backward, normalize, normalize_backward, sigmoid,
    softplus, standardize_columns, standardize_columns_backward, Activation, Normalization,
    ParamTensor,
};
use crate::error::Result;
use crate::filters::{chebyshev_basis, combine_basis};
use crate::finetune::{reg_loss, FinetuneConfig, FinetuneModel, FuseVariant, RegTargets};
use crate::graph::{estimate_spectral_bound, SparseGraph};
use crate::pretrain::{corrupt, PretrainConfig, PretrainModel};
use crate::rng::{salt, stream, SeedRng};
use crate::sampler::{sample_all, SamplerConfig};
use crate::scalar::Scalar;
use crate::{Label, Mat};
use rand::Rng;
use serde::Serialize;

/// Central-difference step.
const FD_STEP: f64 = 1e-5;

/// Bound for smooth nonlinear compositions.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Bound for ops that are linear in the checked argument, where the
/// centered difference is exact up to rounding.
pub const LINEAR_TOLERANCE: f64 = 1e-6;

/// Outcome of one finite-difference case.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Number of scalar partial derivatives compared.
    pub checks: usize,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// All cases of one suite run.
#[derive(Debug, Clone, Serialize)]
pub struct GradSuiteReport {
    pub seed: u64,
    pub results: Vec<GradCheckResult>,
}

impl GradSuiteReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(GradCheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&GradCheckResult> {
        self.results.iter().filter(|r| !r.passed()).collect()
    }
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Uniform matrix in `[lo, hi)`.
fn umat(rng: &mut SeedRng, rows: usize, cols: usize, lo: f64, hi: f64) -> Mat<f64> {
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

/// Matrix whose entries keep a margin from zero, so piecewise-linear
/// activations never see a kink inside the FD stencil.
fn kink_free(rng: &mut SeedRng, rows: usize, cols: usize) -> Mat<f64> {
    Mat::from_shape_fn((rows, cols), |_| {
        let magnitude = rng.random_range(0.05..1.2);
        if rng.random_range(0.0..1.0) < 0.5 {
            -magnitude
        } else {
            magnitude
        }
    })
}

/// Sweeps every entry of a matrix-valued input.
fn fd_over_matrix(
    x0: &Mat<f64>,
    analytic: &Mat<f64>,
    mut eval: impl FnMut(&Mat<f64>) -> f64,
) -> (f64, usize) {
    let mut x = x0.clone();
    let mut max_rel: f64 = 0.0;
    let mut checks = 0;
    for idx in ndarray::indices(x0.raw_dim()) {
        let orig = x[idx];
        x[idx] = orig + FD_STEP;
        let plus = eval(&x);
        x[idx] = orig - FD_STEP;
        let minus = eval(&x);
        x[idx] = orig;
        let fd = (plus - minus) / (2.0 * FD_STEP);
        max_rel = max_rel.max(rel_error(analytic[idx], fd));
        checks += 1;
    }
    (max_rel, checks)
}

/// Sweeps every parameter entry of a model whose parameters are reached
/// through `params_mut`, re-evaluating the scalar objective after each
/// perturbation. `analytic` holds the gradient snapshot in the same
/// parameter order.
fn fd_over_params<M>(
    model: &mut M,
    params_mut: fn(&mut M) -> Vec<&mut ParamTensor<f64>>,
    mut eval: impl FnMut(&M) -> Result<f64>,
    analytic: &[Mat<f64>],
) -> Result<(f64, usize)> {
    let mut max_rel: f64 = 0.0;
    let mut checks = 0;
    for (p, grad) in analytic.iter().enumerate() {
        let grad = grad.as_slice().expect("gradients are standard layout");
        for (k, &a) in grad.iter().enumerate() {
            let orig = {
                let mut ps = params_mut(model);
                let v = ps[p].value.as_slice_mut().expect("standard layout");
                let orig = v[k];
                v[k] = orig + FD_STEP;
                orig
            };
            let plus = eval(model)?;
            {
                let mut ps = params_mut(model);
                ps[p].value.as_slice_mut().expect("standard layout")[k] = orig - FD_STEP;
            }
            let minus = eval(model)?;
            {
                let mut ps = params_mut(model);
                ps[p].value.as_slice_mut().expect("standard layout")[k] = orig;
            }
            let fd = (plus - minus) / (2.0 * FD_STEP);
            max_rel = max_rel.max(rel_error(a, fd));
            checks += 1;
        }
    }
    Ok((max_rel, checks))
}

struct Suite {
    results: Vec<GradCheckResult>,
}

impl Suite {
    fn record(&mut self, name: impl Into<String>, tolerance: f64, sweep: (f64, usize)) {
        self.results.push(GradCheckResult {
            name: name.into(),
            max_rel_error: sweep.0,
            tolerance,
            checks: sweep.1,
        });
    }
}

/// Runs the whole finite-difference suite at `f64`. Every individual
/// backward function is exercised either directly or through the two
/// training objectives, whose parameter sets it sweeps end to end.
pub fn run_gradient_suite(seed: u64) -> Result<GradSuiteReport> {
    let mut rng = stream(seed, salt::GRADCHECK);
    let mut suite = Suite { results: Vec::new() };

    check_linear(&mut suite, &mut rng);
    check_activations(&mut suite, &mut rng);
    check_softplus(&mut suite, &mut rng);
    check_standardize(&mut suite, &mut rng);
    check_normalize(&mut suite, &mut rng);
    check_chain(&mut suite, &mut rng);
    check_combine_basis(&mut suite, &mut rng)?;
    check_reg_loss(&mut suite, &mut rng);
    check_pretrain_objective(&mut suite, &mut rng, seed)?;
    check_finetune_objectives(&mut suite, &mut rng, seed)?;

    Ok(GradSuiteReport {
        seed,
        results: suite.results,
    })
}

fn check_linear(suite: &mut Suite, rng: &mut SeedRng) {
    let x = umat(rng, 4, 3, -1.0, 1.0);
    let w = umat(rng, 3, 2, -1.0, 1.0);
    let b = umat(rng, 1, 2, -1.0, 1.0);
    let r = umat(rng, 4, 2, -1.0, 1.0);
    let (dx, dw, db) = linear_backward(&x, &w, &r);

    let loss = |x: &Mat<f64>, w: &Mat<f64>, b: &Mat<f64>| (&linear(x, w, b) * &r).sum();
    suite.record(
        "linear.dx [4x3 * 3x2]",
        LINEAR_TOLERANCE,
        fd_over_matrix(&x, &dx, |p| loss(p, &w, &b)),
    );
    suite.record(
        "linear.dw [4x3 * 3x2]",
        LINEAR_TOLERANCE,
        fd_over_matrix(&w, &dw, |p| loss(&x, p, &b)),
    );
    suite.record(
        "linear.db [1x2]",
        LINEAR_TOLERANCE,
        fd_over_matrix(&b, &db, |p| loss(&x, &w, p)),
    );
}

fn check_activations(suite: &mut Suite, rng: &mut SeedRng) {
    let kinds = [
        (Activation::Relu, "relu"),
        (Activation::Sigmoid, "sigmoid"),
        (Activation::Elu, "elu"),
        (Activation::Prelu, "prelu"),
        (Activation::Tanh, "tanh"),
    ];
    for (kind, name) in kinds {
        let x = kink_free(rng, 4, 5);
        let r = umat(rng, 4, 5, -1.0, 1.0);
        let dx = activate_backward(kind, &x, &r);
        suite.record(
            format!("activation.{name} [4x5]"),
            LINEAR_TOLERANCE,
            fd_over_matrix(&x, &dx, |p| (&activate(kind, p) * &r).sum()),
        );
    }
}

fn check_softplus(suite: &mut Suite, rng: &mut SeedRng) {
    let x = umat(rng, 4, 5, -3.0, 3.0);
    let r = umat(rng, 4, 5, -1.0, 1.0);
    let dx = Mat::from_shape_fn(x.raw_dim(), |idx| sigmoid(x[idx]) * r[idx]);
    suite.record(
        "softplus [4x5]",
        LINEAR_TOLERANCE,
        fd_over_matrix(&x, &dx, |p| (&p.mapv(softplus) * &r).sum()),
    );
}

fn check_standardize(suite: &mut Suite, rng: &mut SeedRng) {
    let x = umat(rng, 5, 3, -1.0, 1.0);
    let r = umat(rng, 5, 3, -1.0, 1.0);
    let dx = standardize_columns_backward(&x, &r);
    suite.record(
        "standardize.columns [5x3]",
        DEFAULT_TOLERANCE,
        fd_over_matrix(&x, &dx, |p| (&standardize_columns(p) * &r).sum()),
    );
}

fn check_normalize(suite: &mut Suite, rng: &mut SeedRng) {
    for (kind, name) in [
        (Normalization::Batch, "batch"),
        (Normalization::Layer, "layer"),
    ] {
        let x = umat(rng, 5, 3, -1.0, 1.0);
        let r = umat(rng, 5, 3, -1.0, 1.0);
        let dx = normalize_backward(kind, &x, &r);
        suite.record(
            format!("normalize.{name} [5x3]"),
            DEFAULT_TOLERANCE,
            fd_over_matrix(&x, &dx, |p| (&normalize(kind, p) * &r).sum()),
        );
    }
}

fn check_chain(suite: &mut Suite, rng: &mut SeedRng) {
    let x = kink_free(rng, 6, 3);
    let w = umat(rng, 3, 4, -1.0, 1.0);
    let b = umat(rng, 1, 4, -1.0, 1.0);
    let r = umat(rng, 6, 4, -1.0, 1.0);

    let forward = |x: &Mat<f64>, w: &Mat<f64>, b: &Mat<f64>| {
        let pre = linear(x, w, b);
        let act = activate(Activation::Tanh, &pre);
        (&standardize_columns(&act) * &r).sum()
    };
    let pre = linear(&x, &w, &b);
    let act = activate(Activation::Tanh, &pre);
    let dact = standardize_columns_backward(&act, &r);
    let dpre = activate_backward(Activation::Tanh, &pre, &dact);
    let (dx, dw, db) = linear_backward(&x, &w, &dpre);

    suite.record(
        "chain.linear-tanh-standardize dx [6x3]",
        DEFAULT_TOLERANCE,
        fd_over_matrix(&x, &dx, |p| forward(p, &w, &b)),
    );
    suite.record(
        "chain.linear-tanh-standardize dw [3x4]",
        DEFAULT_TOLERANCE,
        fd_over_matrix(&w, &dw, |p| forward(&x, p, &b)),
    );
    suite.record(
        "chain.linear-tanh-standardize db [1x4]",
        DEFAULT_TOLERANCE,
        fd_over_matrix(&b, &db, |p| forward(&x, &w, p)),
    );
}

/// Small random graph: a cycle for connectivity plus a few chords, with
/// self-loops so every degree is positive.
fn small_graph(rng: &mut SeedRng, n: usize) -> Result<SparseGraph> {
    let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    for _ in 0..n / 2 {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a != b {
            edges.push((a, b));
        }
    }
    SparseGraph::from_edges(n, &edges, true)
}

fn check_combine_basis(suite: &mut Suite, rng: &mut SeedRng) -> Result<()> {
    let n = 8;
    let order = 2;
    let graph = small_graph(rng, n)?;
    let x = umat(rng, n, 3, -1.0, 1.0);
    let bound = estimate_spectral_bound::<f64>(&graph, 1e-7, 200)?.as_f64();
    let basis = chebyshev_basis(&graph, &x, bound, order)?;
    let r = umat(rng, n, 3, -1.0, 1.0);

    let coeffs0 = umat(rng, 1, order + 1, -1.0, 1.0);
    let analytic = Mat::from_shape_fn((1, order + 1), |(_, k)| (&basis[k] * &r).sum());
    suite.record(
        format!("filter.combine-basis [n={n}, order {order}]"),
        LINEAR_TOLERANCE,
        fd_over_matrix(&coeffs0, &analytic, |c| {
            let v = c.row(0).to_owned();
            (&combine_basis(&v, &basis).expect("shapes fixed") * &r).sum()
        }),
    );
    Ok(())
}

fn check_reg_loss(suite: &mut Suite, rng: &mut SeedRng) {
    let coeffs = umat(rng, 5, 3, 0.2, 0.8);
    let labels: Vec<Label> = vec![1, 0, 1, 0, -1];
    let labeled = [0usize, 1, 2, 3];
    let targets = RegTargets { p_a: 0.3, p_n: 0.8 };
    let (_, analytic) = reg_loss(&coeffs, &labels, &labeled, &targets).expect("valid inputs");
    suite.record(
        "finetune.reg-loss [5x3]",
        LINEAR_TOLERANCE,
        fd_over_matrix(&coeffs, &analytic, |c| {
            reg_loss(c, &labels, &labeled, &targets)
                .expect("valid inputs")
                .0
                .as_f64()
        }),
    );
}

fn check_pretrain_objective(suite: &mut Suite, rng: &mut SeedRng, seed: u64) -> Result<()> {
    let n = 8;
    let d = 3;
    let graph = small_graph(rng, n)?;
    let x = umat(rng, n, d, -1.0, 1.0);
    let subgraphs = sample_all(&graph, &x, &SamplerConfig::default());
    let bound = estimate_spectral_bound::<f64>(&graph, 1e-7, 200)?.as_f64();

    let cfg = PretrainConfig {
        embed_dim: 3,
        order: 2,
        activation: Activation::Tanh,
        allow_custom: true,
        seed,
        ..PretrainConfig::default()
    };
    let clean = chebyshev_basis(&graph, &x, bound, cfg.order)?;
    let cor_low = chebyshev_basis(&graph, &corrupt(&x, seed ^ 0x51), bound, cfg.order)?;
    let cor_high = chebyshev_basis(&graph, &corrupt(&x, seed ^ 0x52), bound, cfg.order)?;

    let mut model = PretrainModel::<f64>::new(d, &cfg);
    model.loss_and_grad(&clean, &cor_low, &cor_high, &subgraphs)?;
    let analytic: Vec<Mat<f64>> = model.params().iter().map(|p| p.grad.clone()).collect();
    let sweep = fd_over_params(
        &mut model,
        PretrainModel::params_mut,
        |m| m.loss(&clean, &cor_low, &cor_high, &subgraphs),
        &analytic,
    )?;
    suite.record(
        format!("objective.pretrain [n={n}, d={d}, e=3, order 2]"),
        DEFAULT_TOLERANCE,
        sweep,
    );
    Ok(())
}

fn check_finetune_objectives(suite: &mut Suite, rng: &mut SeedRng, seed: u64) -> Result<()> {
    let n = 8;
    let d = 3;
    let e = 3;
    let x = umat(rng, n, d, -1.0, 1.0);
    let z_low = umat(rng, n, e, -1.0, 1.0);
    let z_high = umat(rng, n, e, -1.0, 1.0);
    let labels: Vec<Label> = vec![1, 0, 0, 1, 0, -1, 0, 1];
    let labeled: Vec<usize> = vec![0, 1, 2, 3, 4, 6, 7];
    let targets = RegTargets { p_a: 0.3, p_n: 0.8 };

    for (variant, name) in [
        (FuseVariant::Gated, "gated"),
        (FuseVariant::Attention, "attention"),
        (FuseVariant::Mean, "mean"),
        (FuseVariant::Concat, "concat"),
    ] {
        let cfg = FinetuneConfig {
            variant,
            activation: Activation::Tanh,
            allow_custom: true,
            seed,
            ..FinetuneConfig::default()
        };
        let mut model = FinetuneModel::<f64>::new(d, e, &cfg);
        model.zero_grad();
        model.objective_and_grad(&x, &z_low, &z_high, &labels, &labeled, &targets, true)?;
        let analytic: Vec<Mat<f64>> = model.params().iter().map(|p| p.grad.clone()).collect();
        let sweep = fd_over_params(
            &mut model,
            FinetuneModel::params_mut,
            |m| m.objective(&x, &z_low, &z_high, &labels, &labeled, &targets, true),
            &analytic,
        )?;
        suite.record(
            format!("objective.finetune.{name} [n={n}, d={d}, e={e}]"),
            DEFAULT_TOLERANCE,
            sweep,
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_uses_absolute_floor() {
        assert!(rel_error(0.0, 5e-4) < 1.0);
        assert_eq!(rel_error(2.0, 1.0), 0.5);
    }

    #[test]
    fn full_suite_passes() {
        let report = run_gradient_suite(13).unwrap();
        assert!(report.results.len() >= 18);
        for r in &report.results {
            assert!(
                r.passed(),
                "{} rel error {} over tolerance {}",
                r.name,
                r.max_rel_error,
                r.tolerance
            );
        }
        assert!(report.all_passed());
        assert!(report.failures().is_empty());
    }

    #[test]
    fn suite_is_deterministic_per_seed() {
        let a = run_gradient_suite(99).unwrap();
        let b = run_gradient_suite(99).unwrap();
        for (ra, rb) in a.results.iter().zip(&b.results) {
            assert_eq!(ra.name, rb.name);
            assert_eq!(ra.max_rel_error, rb.max_rel_error);
        }
    }
}
