//! Rayleigh quotient and constrained polynomial spectral filters.
//!
//! A filter is a degree-`K` polynomial in the rescaled normalized
//! Laplacian, parameterized by `K + 1` values placed at the Chebyshev
//! interpolation nodes and converted to Chebyshev-basis coefficients.
//! Low- and high-pass filters share one underlying parameter vector
//! `gamma_raw`: with `g_0 = gamma_raw[0]` and `g_j = gamma_raw[j]^2`
//! (nonnegative by construction) the node values are
//!
//! * low pass:  `v_k = g_0 - (g_1 + ... + g_k)`, nonincreasing in `k`;
//! * high pass: `v_k = g_0 + g_1 + ... + g_k`, nondecreasing in `k`.
//!
//! Monotonicity therefore holds for every parameter setting, not just at
//! convergence. Value `v_k` sits at the `k`-th interpolation node in
//! ascending spectral order (index 0 is the smoothest node), so the
//! low-pass response falls and the high-pass response rises across the
//! spectrum. Application never densifies: `T_k(H) X` is built by the
//! three-term recurrence with sparse operator products.

use crate::error::{Error, Result};
use crate::graph::{apply_operator, GraphOperator, SparseGraph};
use crate::scalar::Scalar;
use crate::{Mat, Vec1};
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------
// Rayleigh quotient
// ---------------------------------------------------------------------

/// Rayleigh quotient of a signal against the combinatorial Laplacian,
/// with the edge-sum numerator broken out for diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct RqReport<S> {
    /// `numerator / denominator`.
    pub value: S,
    /// Sum over unordered edges of the squared signal difference, summed
    /// across feature columns.
    pub numerator: S,
    /// Total signal energy, summed across feature columns.
    pub denominator: S,
}

/// Computes the Rayleigh quotient `x' L x / x' x` of a node signal (or
/// the trace form over all columns of a feature matrix). Self-loops are
/// skipped; they never contribute to the edge sum.
pub fn rayleigh_quotient<S: Scalar>(graph: &SparseGraph, x: &Mat<S>) -> Result<RqReport<S>> {
    if x.nrows() != graph.num_nodes() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} rows", graph.num_nodes()),
            got: format!("{} rows", x.nrows()),
        });
    }
    let mut numerator = S::zero();
    for (i, j) in graph.edges() {
        if i == j {
            continue;
        }
        let diff = &x.row(i) - &x.row(j);
        numerator += diff.iter().map(|&d| d * d).sum::<S>();
    }
    let denominator = x.iter().map(|&e| e * e).sum::<S>();
    if denominator == S::zero() {
        return Err(Error::ZeroSignal);
    }
    Ok(RqReport {
        value: numerator / denominator,
        numerator,
        denominator,
    })
}

// ---------------------------------------------------------------------
// Filter parameterization
// ---------------------------------------------------------------------

/// Which end of the spectrum a filter passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterMode {
    LowPass,
    HighPass,
}

/// Derived node values are clipped to this magnitude so downstream
/// arithmetic stays finite even under runaway parameters.
pub const VALUE_CLIP: f64 = 1e8;

/// A constrained polynomial filter of order `K`.
///
/// `gamma_raw` holds `K + 1` unconstrained reals; see the module docs for
/// how the low- and high-pass value sequences derive from them. Both
/// modes of a filter pair are meant to share one `gamma_raw` vector.
#[derive(Debug, Clone)]
pub struct PolyFilter<S> {
    order: usize,
    gamma_raw: Vec1<S>,
    mode: FilterMode,
}

impl<S: Scalar> PolyFilter<S> {
    /// Builds a filter; `gamma_raw` must hold `order + 1` entries and the
    /// order must be at least 1.
    pub fn new(order: usize, gamma_raw: Vec1<S>, mode: FilterMode) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidConfig(
                "filter order must be at least 1".into(),
            ));
        }
        if gamma_raw.len() != order + 1 {
            return Err(Error::ShapeMismatch {
                expected: format!("{} raw parameters", order + 1),
                got: format!("{}", gamma_raw.len()),
            });
        }
        Ok(Self {
            order,
            gamma_raw,
            mode,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn mode(&self) -> FilterMode {
        self.mode
    }

    pub fn gamma_raw(&self) -> &Vec1<S> {
        &self.gamma_raw
    }

    /// The nonnegative increment sequence: `g_0 = raw_0`, `g_j = raw_j^2`.
    pub fn effective_gamma(&self) -> Vec1<S> {
        effective_gamma(&self.gamma_raw)
    }

    /// Node values of the filter at the Chebyshev nodes: a nonincreasing
    /// sequence for the low-pass mode, nondecreasing for the high-pass.
    pub fn node_values(&self) -> Vec1<S> {
        derive_node_values(&self.gamma_raw, self.mode)
    }
}

/// `g_0 = raw_0`, `g_j = raw_j^2` for `j >= 1`.
pub fn effective_gamma<S: Scalar>(gamma_raw: &Vec1<S>) -> Vec1<S> {
    Vec1::from_shape_fn(gamma_raw.len(), |j| {
        if j == 0 {
            gamma_raw[0]
        } else {
            gamma_raw[j] * gamma_raw[j]
        }
    })
}

/// Cumulative node-value sequences from the raw parameters.
pub fn derive_node_values<S: Scalar>(gamma_raw: &Vec1<S>, mode: FilterMode) -> Vec1<S> {
    let gamma = effective_gamma(gamma_raw);
    let clip = S::of(VALUE_CLIP);
    let mut values = Vec1::zeros(gamma.len());
    let mut acc = gamma[0];
    values[0] = acc.max(-clip).min(clip);
    for k in 1..gamma.len() {
        match mode {
            FilterMode::LowPass => acc = acc - gamma[k],
            FilterMode::HighPass => acc = acc + gamma[k],
        }
        values[k] = acc.max(-clip).min(clip);
    }
    values
}

// ---------------------------------------------------------------------
// Chebyshev interpolation
// ---------------------------------------------------------------------

/// Chebyshev interpolation nodes `cos((j + 1/2) pi / (K + 1))` for
/// `j = 0..=K`, enumerated ascending in value.
///
/// The enumeration order matters: node values attach to nodes by index,
/// and the cumulative parameterization puts its largest low-pass value
/// at index 0. Ascending order places that value at the smoothest end
/// of the spectrum, so the low-pass mode attenuates high frequencies
/// and the high-pass mode amplifies them.
pub fn chebyshev_nodes<S: Scalar>(order: usize) -> Vec1<S> {
    let m = (order + 1) as f64;
    Vec1::from_shape_fn(order + 1, |i| {
        S::of((((order - i) as f64 + 0.5) * std::f64::consts::PI / m).cos())
    })
}

/// The linear map from node values to Chebyshev coefficients:
/// `w = M v` with `M[k][i] = (2 - [k == 0]) / (K + 1) * T_k(t_i)` over
/// the [`chebyshev_nodes`] enumeration.
///
/// Halving row zero makes the interpolation exact: evaluating the
/// resulting polynomial at the nodes reproduces the input values.
pub fn interpolation_matrix<S: Scalar>(order: usize) -> Mat<S> {
    let m = (order + 1) as f64;
    let mut mat = Mat::zeros((order + 1, order + 1));
    for i in 0..=order {
        let theta = ((order - i) as f64 + 0.5) * std::f64::consts::PI / m;
        for k in 0..=order {
            let scale = if k == 0 { 1.0 / m } else { 2.0 / m };
            mat[[k, i]] = S::of(scale * (k as f64 * theta).cos());
        }
    }
    mat
}

/// Converts filter node values into Chebyshev-basis coefficients.
pub fn chebyshev_coefficients<S: Scalar>(values: &Vec1<S>) -> Result<Vec1<S>> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("empty value vector".into()));
    }
    let order = values.len() - 1;
    Ok(interpolation_matrix::<S>(order).dot(values))
}

/// Scalar filter response at eigenvalue `lambda` of the normalized
/// Laplacian, for a given spectral bound.
pub fn filter_response<S: Scalar>(coeffs: &Vec1<S>, lambda: S, bound: S) -> S {
    let t = S::of(2.0) * lambda / bound - S::one();
    let mut acc = coeffs[0];
    let mut prev2 = S::one();
    let mut prev1 = t;
    if coeffs.len() > 1 {
        acc += coeffs[1] * t;
    }
    for k in 2..coeffs.len() {
        let cur = S::of(2.0) * t * prev1 - prev2;
        acc += coeffs[k] * cur;
        prev2 = prev1;
        prev1 = cur;
    }
    acc
}

// ---------------------------------------------------------------------
// Filter application
// ---------------------------------------------------------------------

/// Chebyshev basis products `[T_0(H) X, ..., T_K(H) X]` for the rescaled
/// normalized Laplacian `H`, via the three-term recurrence. The result
/// depends only on the graph and input, not on filter parameters, so it
/// can be shared between the low- and high-pass branches and reused
/// across gradient steps.
pub fn chebyshev_basis<S: Scalar>(
    graph: &SparseGraph,
    x: &Mat<S>,
    bound: f64,
    order: usize,
) -> Result<Vec<Mat<S>>> {
    let mut basis = Vec::with_capacity(order + 1);
    basis.push(x.clone());
    if order >= 1 {
        basis.push(apply_operator(graph, x, GraphOperator::Scaled { bound })?);
    }
    for _ in 2..=order {
        let prev1 = &basis[basis.len() - 1];
        let ap = apply_operator(graph, prev1, GraphOperator::Scaled { bound })?;
        let next = ap * S::of(2.0) - &basis[basis.len() - 2];
        basis.push(next);
    }
    Ok(basis)
}

/// Linear combination of precomputed basis products with coefficients.
pub fn combine_basis<S: Scalar>(coeffs: &Vec1<S>, basis: &[Mat<S>]) -> Result<Mat<S>> {
    if coeffs.len() != basis.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} basis products", coeffs.len()),
            got: format!("{}", basis.len()),
        });
    }
    let mut out = &basis[0] * coeffs[0];
    for k in 1..basis.len() {
        out.scaled_add(coeffs[k], &basis[k]);
    }
    Ok(out)
}

/// Applies the filter to a feature matrix through the sparse recurrence.
pub fn apply_filter<S: Scalar>(
    filter: &PolyFilter<S>,
    graph: &SparseGraph,
    x: &Mat<S>,
    bound: f64,
) -> Result<Mat<S>> {
    let coeffs = chebyshev_coefficients(&filter.node_values())?;
    let basis = chebyshev_basis(graph, x, bound, filter.order())?;
    combine_basis(&coeffs, &basis)
}

// ---------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------
