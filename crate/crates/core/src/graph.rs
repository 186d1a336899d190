//! Undirected graph storage and the operators built on it.
//!
//! Graphs are compressed-row adjacency with both directions of every edge
//! stored, so row `i` lists the full neighborhood of node `i`. Self-loops
//! are an explicit constructor flag: learning pipelines turn them on so
//! every node keeps its own signal under neighborhood averaging, while
//! the homophily and Rayleigh-quotient statistics always skip self-edges.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::{Label, Mat};

// ---------------------------------------------------------------------
// Storage
// ---------------------------------------------------------------------

/// Undirected graph in compressed-row form. Neighbor lists are sorted by
/// node id and free of duplicates; a self-loop appears at most once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseGraph {
    num_nodes: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    has_self_loops: bool,
}

impl SparseGraph {
    /// Builds a graph from an undirected edge list.
    ///
    /// Edges are symmetrized and deduplicated. Self-edges in the input are
    /// dropped; `self_loops` then adds exactly one loop per node. Node ids
    /// at or beyond `num_nodes` are rejected.
    pub fn from_edges(
        num_nodes: usize,
        edges: &[(usize, usize)],
        self_loops: bool,
    ) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::EmptyGraph);
        }
        let mut pairs = Vec::with_capacity(edges.len() * 2 + if self_loops { num_nodes } else { 0 });
        for &(a, b) in edges {
            for id in [a, b] {
                if id >= num_nodes {
                    return Err(Error::NodeOutOfRange {
                        id,
                        nodes: num_nodes,
                    });
                }
            }
            if a != b {
                pairs.push((a, b));
                pairs.push((b, a));
            }
        }
        if self_loops {
            for i in 0..num_nodes {
                pairs.push((i, i));
            }
        }
        pairs.sort_unstable();
        pairs.dedup();

        let mut row_ptr = vec![0usize; num_nodes + 1];
        for &(a, _) in &pairs {
            row_ptr[a + 1] += 1;
        }
        for i in 0..num_nodes {
            row_ptr[i + 1] += row_ptr[i];
        }
        let col_idx = pairs.into_iter().map(|(_, b)| b).collect();
        Ok(Self {
            num_nodes,
            row_ptr,
            col_idx,
            has_self_loops: self_loops,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Number of undirected edges; a self-loop counts once.
    pub fn num_edges(&self) -> usize {
        let loops = if self.has_self_loops { self.num_nodes } else { 0 };
        (self.col_idx.len() - loops) / 2 + loops
    }

    /// Row length of node `i`; a self-loop contributes one.
    pub fn degree(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    /// Sorted neighbor ids of node `i` (includes `i` itself when the graph
    /// was built with self-loops).
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn has_self_loops(&self) -> bool {
        self.has_self_loops
    }

    /// Unordered edges as `(i, j)` with `i <= j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes).flat_map(move |i| {
            self.neighbors(i)
                .iter()
                .filter(move |&&j| j >= i)
                .map(move |&j| (i, j))
        })
    }

    /// Rebuilds the same topology with self-loops forced on or off.
    pub fn with_self_loops(&self, self_loops: bool) -> Self {
        if self_loops == self.has_self_loops {
            return self.clone();
        }
        let plain: Vec<(usize, usize)> = self.edges().filter(|&(i, j)| i != j).collect();
        Self::from_edges(self.num_nodes, &plain, self_loops)
            .expect("rebuilding an existing graph cannot fail")
    }
}

// ---------------------------------------------------------------------
// Operators
// ---------------------------------------------------------------------

/// Matrix-free graph operators applied row-wise to a node-feature matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GraphOperator {
    /// Combinatorial Laplacian `D - A`.
    Laplacian,
    /// Symmetric normalized Laplacian `I - D^{-1/2} A D^{-1/2}`.
    NormalizedLaplacian,
    /// `2 (I - D^{-1/2} A D^{-1/2}) / bound - I`, the normalized Laplacian
    /// rescaled so its spectrum fits in `[-1, 1]`.
    Scaled { bound: f64 },
    /// Random-walk averaging `D^{-1} A`.
    RandomWalk,
}

/// Applies a graph operator to `x` (one row per node).
///
/// The normalized, scaled, and random-walk variants reject zero-degree
/// rows, since the degree inverse is undefined there.
pub fn apply_operator<S: Scalar>(
    graph: &SparseGraph,
    x: &Mat<S>,
    op: GraphOperator,
) -> Result<Mat<S>> {
    let n = graph.num_nodes();
    if x.nrows() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} rows"),
            got: format!("{} rows", x.nrows()),
        });
    }
    match op {
        GraphOperator::Laplacian => {
            let mut out = Mat::<S>::zeros(x.raw_dim());
            for i in 0..n {
                let deg = S::of(graph.degree(i) as f64);
                let mut row = out.row_mut(i);
                row.scaled_add(deg, &x.row(i));
                for &j in graph.neighbors(i) {
                    row.scaled_add(-S::one(), &x.row(j));
                }
            }
            Ok(out)
        }
        GraphOperator::NormalizedLaplacian => {
            let inv_sqrt = inverse_sqrt_degrees::<S>(graph, "the normalized Laplacian")?;
            let mut out = x.clone();
            for i in 0..n {
                let mut row = out.row_mut(i);
                for &j in graph.neighbors(i) {
                    let c = inv_sqrt[i] * inv_sqrt[j];
                    row.scaled_add(-c, &x.row(j));
                }
            }
            Ok(out)
        }
        GraphOperator::Scaled { bound } => {
            if bound <= 0.0 {
                return Err(Error::NonPositiveSpectralBound(bound));
            }
            let lap = apply_operator(graph, x, GraphOperator::NormalizedLaplacian)?;
            let scale = S::of(2.0 / bound);
            Ok(lap * scale - x)
        }
        GraphOperator::RandomWalk => {
            let mut out = Mat::<S>::zeros(x.raw_dim());
            for i in 0..n {
                let d = graph.degree(i);
                if d == 0 {
                    return Err(Error::ZeroDegree {
                        node: i,
                        operator: "random-walk averaging",
                    });
                }
                let inv = S::of(1.0 / d as f64);
                let mut row = out.row_mut(i);
                for &j in graph.neighbors(i) {
                    row.scaled_add(inv, &x.row(j));
                }
            }
            Ok(out)
        }
    }
}

fn inverse_sqrt_degrees<S: Scalar>(
    graph: &SparseGraph,
    operator: &'static str,
) -> Result<Vec<S>> {
    (0..graph.num_nodes())
        .map(|i| {
            let d = graph.degree(i);
            if d == 0 {
                Err(Error::ZeroDegree { node: i, operator })
            } else {
                Ok(S::of(1.0 / (d as f64).sqrt()))
            }
        })
        .collect()
}

/// Estimates the largest eigenvalue of the normalized Laplacian by power
/// iteration from a fixed pseudo-random start vector.
///
/// Returns the Rayleigh-quotient estimate once successive iterates agree
/// to `tol`; if `max_iter` passes without convergence the safe upper
/// bound 2 is returned, which keeps the rescaled spectrum inside
/// `[-1, 1]`.
pub fn estimate_spectral_bound<S: Scalar>(
    graph: &SparseGraph,
    tol: f64,
    max_iter: usize,
) -> Result<S> {
    let n = graph.num_nodes();
    // Low-discrepancy start; avoids landing in the nullspace the way the
    // all-ones vector does on regular graphs.
    let mut v: Mat<S> = Mat::from_shape_fn((n, 1), |(i, _)| {
        S::of(((i + 1) as f64 * 0.618_033_988_749_894_9).fract() - 0.5)
    });
    let norm = frobenius(&v);
    if norm == S::zero() {
        return Ok(S::of(2.0));
    }
    v.mapv_inplace(|e| e / norm);

    let mut prev = S::of(f64::INFINITY);
    for _ in 0..max_iter {
        let w = apply_operator(graph, &v, GraphOperator::NormalizedLaplacian)?;
        let lambda = (&v * &w).sum();
        let wn = frobenius(&w);
        if wn.as_f64() < 1e-300 {
            // The iterate is annihilated; the operator is (numerically)
            // zero on the explored subspace.
            return Ok(S::zero());
        }
        if (lambda - prev).abs().as_f64() <= tol {
            return Ok(clamp_bound(lambda));
        }
        prev = lambda;
        v = w.mapv_into(|e| e / wn);
    }
    Ok(S::of(2.0))
}

fn clamp_bound<S: Scalar>(lambda: S) -> S {
    lambda.max(S::zero()).min(S::of(2.0))
}

fn frobenius<S: Scalar>(m: &Mat<S>) -> S {
    m.iter().map(|&e| e * e).sum::<S>().sqrt()
}

// ---------------------------------------------------------------------
// Homophily
// ---------------------------------------------------------------------

/// Per-node and per-class local homophily.
#[derive(Debug, Clone)]
pub struct HomophilyStats<S> {
    /// Fraction of labeled neighbors sharing the node's label; `None` when
    /// the node is unlabeled or has no labeled neighbors.
    pub per_node: Vec<Option<S>>,
    /// Mean over anomalous nodes with a defined value.
    pub anomaly_mean: Option<S>,
    /// Mean over normal nodes with a defined value.
    pub normal_mean: Option<S>,
}

/// Validates that every label is in `{-1, 0, 1}`.
pub fn validate_labels(labels: &[Label]) -> Result<()> {
    for (node, &l) in labels.iter().enumerate() {
        if !matches!(l, -1 | 0 | 1) {
            return Err(Error::BadLabel {
                node,
                value: l as i64,
            });
        }
    }
    Ok(())
}

/// Computes local homophily: for each labeled node, the fraction of its
/// labeled neighbors that share its label. Unlabeled neighbors are
/// excluded from both numerator and denominator, and self-loops are
/// always skipped.
pub fn local_homophily<S: Scalar>(graph: &SparseGraph, labels: &[Label]) -> Result<HomophilyStats<S>> {
    let n = graph.num_nodes();
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} labels"),
            got: format!("{}", labels.len()),
        });
    }
    validate_labels(labels)?;

    let mut per_node = Vec::with_capacity(n);
    let mut sums = [S::zero(), S::zero()];
    let mut counts = [0usize, 0usize];
    for i in 0..n {
        if labels[i] < 0 {
            per_node.push(None);
            continue;
        }
        let mut same = 0usize;
        let mut labeled = 0usize;
        for &j in graph.neighbors(i) {
            if j == i || labels[j] < 0 {
                continue;
            }
            labeled += 1;
            if labels[j] == labels[i] {
                same += 1;
            }
        }
        if labeled == 0 {
            per_node.push(None);
            continue;
        }
        let h = S::of(same as f64 / labeled as f64);
        per_node.push(Some(h));
        let class = labels[i] as usize;
        sums[class] += h;
        counts[class] += 1;
    }
    let mean = |class: usize| {
        (counts[class] > 0).then(|| sums[class] / S::of(counts[class] as f64))
    };
    Ok(HomophilyStats {
        per_node,
        anomaly_mean: mean(1),
        normal_mean: mean(0),
    })
}

// ---------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------
