//! Graph anomaly detection built around two spectral views of a graph.
//!
//! The pipeline pretrains a pair of constrained polynomial filters (one
//! low-pass, one high-pass) with a contrastive objective, where the
//! high-pass branch contrasts each node against a small subgraph selected
//! by greedy Rayleigh-quotient maximization. Fine-tuning freezes the
//! encoders and learns a per-node gate that fuses the two embeddings,
//! regularized toward class-dependent gate targets on the labeled nodes.
//!
//! The crate also ships a synthetic-graph laboratory ([`asbm`]) that
//! generates attributed block-model graphs with mixed homophilic and
//! heterophilic nodes, and measures whether node-adaptive spectral
//! filtering makes the two classes linearly separable.
//!
//! Numeric code is generic over the scalar type through [`scalar::Scalar`]
//! (`f32` or `f64`); the `Real`/`Mat` aliases below fix the default
//! precision used by the IO layer and the command-line pipeline.

pub mod asbm;
pub mod diff;
pub mod error;
pub mod filters;
pub mod finetune;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod pretrain;
pub mod rng;
pub mod sampler;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar for pipelines and file IO. Gradient checks always run
/// at this width; training may instantiate the generic code at `f32`.
pub type Real = f64;

/// Dense matrix, row-per-node unless documented otherwise.
pub type Mat<S = Real> = ndarray::Array2<S>;

/// Dense vector.
pub type Vec1<S = Real> = ndarray::Array1<S>;

/// Node label: 1 anomalous, 0 normal, -1 unknown.
pub type Label = i8;
