//! Shared reference implementations for the integration suites: a dense
//! Jacobi eigensolver, spectral filter application through an explicit
//! eigendecomposition, brute-force ranking metrics, and small random
//! graph builders. Everything here trades speed for obviousness so the
//! fast paths in the library have something independent to agree with.
#![allow(dead_code)]

use apf_core::graph::SparseGraph;
use apf_core::{Mat, Vec1};
use rand::prelude::*;
use rand::rngs::StdRng;

// ---------------------------------------------------------------------
// Dense symmetric eigendecomposition
// ---------------------------------------------------------------------

/// Eigenvalues and orthonormal eigenvectors (as columns) of a symmetric
/// matrix by cyclic Jacobi rotations. Quadratic per sweep, which is fine
/// at the n <= 20 sizes the oracles use.
pub fn jacobi_eigh(a: &Mat) -> (Vec1, Mat) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "eigendecomposition needs a square matrix");
    let mut m = a.clone();
    let mut u = Mat::eye(n);
    for _ in 0..200 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[[p, q]] * m[[p, q]];
            }
        }
        if off <= 1e-26 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= 1e-18 {
                    continue;
                }
                let theta = 0.5 * (m[[q, q]] - m[[p, p]]) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let ukp = u[[k, p]];
                    let ukq = u[[k, q]];
                    u[[k, p]] = c * ukp - s * ukq;
                    u[[k, q]] = s * ukp + c * ukq;
                }
            }
        }
    }
    let vals = Vec1::from_shape_fn(n, |i| m[[i, i]]);
    (vals, u)
}

/// Largest deviation of `U diag(vals) U^T` from `a`, plus the worst
/// orthogonality error of `U`. Used to self-check the eigensolver before
/// trusting it as an oracle.
pub fn eigh_residual(a: &Mat, vals: &Vec1, u: &Mat) -> (f64, f64) {
    let n = a.nrows();
    let mut scaled = u.clone();
    for j in 0..n {
        for i in 0..n {
            scaled[[i, j]] *= vals[j];
        }
    }
    let recon = scaled.dot(&u.t());
    let recon_err = (&recon - a).iter().fold(0.0f64, |m, &e| m.max(e.abs()));
    let gram = u.t().dot(u);
    let mut ortho_err = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let want = if i == j { 1.0 } else { 0.0 };
            ortho_err = ortho_err.max((gram[[i, j]] - want).abs());
        }
    }
    (recon_err, ortho_err)
}

// ---------------------------------------------------------------------
// Dense spectral filter reference
// ---------------------------------------------------------------------

/// Dense symmetric normalized Laplacian `I - D^{-1/2} A D^{-1/2}` built
/// straight from the adjacency lists, self-loops included as stored.
pub fn dense_normalized_laplacian(g: &SparseGraph) -> Mat {
    let n = g.num_nodes();
    let mut lap = Mat::eye(n);
    for i in 0..n {
        let di = g.degree(i) as f64;
        for &j in g.neighbors(i) {
            let dj = g.degree(j) as f64;
            lap[[i, j]] -= 1.0 / (di * dj).sqrt();
        }
    }
    lap
}

/// Interpolation abscissas `cos((j + 1/2) pi / (K + 1))`, j = 0..=K,
/// sorted ascending. Computed from the closed form so the library's
/// enumeration has an external reference.
pub fn chebyshev_points(order: usize) -> Vec<f64> {
    let m = (order + 1) as f64;
    let mut pts: Vec<f64> = (0..=order)
        .map(|j| ((j as f64 + 0.5) * std::f64::consts::PI / m).cos())
        .collect();
    pts.sort_by(f64::total_cmp);
    pts
}

/// Barycentric Lagrange evaluation of the polynomial through the points
/// `(xs[i], ys[i])` at `t`.
pub fn lagrange_eval(xs: &[f64], ys: &[f64], t: f64) -> f64 {
    for (i, &x) in xs.iter().enumerate() {
        if t == x {
            return ys[i];
        }
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..xs.len() {
        let mut w = 1.0;
        for j in 0..xs.len() {
            if j != i {
                w /= xs[i] - xs[j];
            }
        }
        let c = w / (t - xs[i]);
        num += c * ys[i];
        den += c;
    }
    num / den
}

/// Filter application through an explicit eigendecomposition: the
/// response interpolating `node_values` at the Chebyshev points is
/// evaluated on every eigenvalue of the normalized Laplacian (rescaled
/// by `bound`), and the result assembled as `U g(Lambda) U^T x`.
pub fn dense_filter_reference(g: &SparseGraph, node_values: &[f64], bound: f64, x: &Mat) -> Mat {
    let lap = dense_normalized_laplacian(g);
    let (vals, u) = jacobi_eigh(&lap);
    let (recon, ortho) = eigh_residual(&lap, &vals, &u);
    assert!(
        recon < 1e-10 && ortho < 1e-10,
        "eigensolver failed to converge: residual {recon:.2e}, orthogonality {ortho:.2e}"
    );
    let pts = chebyshev_points(node_values.len() - 1);
    let mut projected = u.t().dot(x);
    for (i, &lambda) in vals.iter().enumerate() {
        let response = lagrange_eval(&pts, node_values, 2.0 * lambda / bound - 1.0);
        for v in projected.row_mut(i) {
            *v *= response;
        }
    }
    u.dot(&projected)
}

// ---------------------------------------------------------------------
// Brute-force ranking metrics
// ---------------------------------------------------------------------

/// Pair-counting AUROC: concordant pairs count 1, ties count one half.
pub fn auroc_brute(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        if !labels[i] {
            continue;
        }
        for j in 0..scores.len() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    num / pairs
}

/// Ids sorted by score descending, ties broken by ascending id.
pub fn ranked_ids(scores: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids
}

/// Average precision walked rank by rank down the sorted list.
pub fn auprc_brute(scores: &[f64], labels: &[bool]) -> f64 {
    let total_pos = labels.iter().filter(|&&l| l).count();
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank0, &id) in ranked_ids(scores).iter().enumerate() {
        if labels[id] {
            tp += 1;
            sum += tp as f64 / (rank0 + 1) as f64;
        }
    }
    sum / total_pos as f64
}

/// Fraction of positives inside the top `K = positive count` ranks.
pub fn recall_brute(scores: &[f64], labels: &[bool]) -> f64 {
    let k = labels.iter().filter(|&&l| l).count();
    let hits = ranked_ids(scores)[..k].iter().filter(|&&id| labels[id]).count();
    hits as f64 / k as f64
}

// ---------------------------------------------------------------------
// Random graph builders
// ---------------------------------------------------------------------

/// G(n, p) without self-loops; isolated nodes get one random edge so the
/// degree-normalized operators stay defined. Needs n >= 2.
pub fn gnp(n: usize, p: f64, rng: &mut StdRng) -> SparseGraph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let mut deg = vec![0usize; n];
    for &(a, b) in &edges {
        deg[a] += 1;
        deg[b] += 1;
    }
    for i in 0..n {
        if deg[i] == 0 {
            let j = loop {
                let j = rng.random_range(0..n);
                if j != i {
                    break j;
                }
            };
            edges.push((i.min(j), i.max(j)));
            deg[i] += 1;
            deg[j] += 1;
        }
    }
    SparseGraph::from_edges(n, &edges, false).expect("gnp edges are valid")
}

/// Random points in the unit square joined when within `radius`; nodes
/// left isolated are attached to their nearest neighbor. The positions
/// come back with the graph so callers can build spatially smooth
/// signals.
pub struct GeometricGraph {
    pub graph: SparseGraph,
    pub px: Vec<f64>,
    pub py: Vec<f64>,
}

pub fn geometric_graph(n: usize, radius: f64, rng: &mut StdRng) -> GeometricGraph {
    let px: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let py: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let mut edges = Vec::new();
    let mut deg = vec![0usize; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = px[i] - px[j];
            let dy = py[i] - py[j];
            if dx * dx + dy * dy <= radius * radius {
                edges.push((i, j));
                deg[i] += 1;
                deg[j] += 1;
            }
        }
    }
    for i in 0..n {
        if deg[i] > 0 {
            continue;
        }
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for j in 0..n {
            if j == i {
                continue;
            }
            let dx = px[i] - px[j];
            let dy = py[i] - py[j];
            let d = dx * dx + dy * dy;
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        edges.push((i.min(best), i.max(best)));
        deg[i] += 1;
        deg[best] += 1;
    }
    GeometricGraph {
        graph: SparseGraph::from_edges(n, &edges, false).expect("geometric edges are valid"),
        px,
        py,
    }
}

/// Median of a slice (average of the middle two for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
