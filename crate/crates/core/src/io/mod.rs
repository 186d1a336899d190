//! On-disk formats and experiment orchestration.
//!
//! `bundle` defines the directory layout graphs travel in, `split` the
//! stratified labeled splits, `checkpoint` the binary tensor format for
//! trained parameters, and `experiment` the multi-seed pipeline runner
//! that ties them together.

pub mod bundle;
pub mod checkpoint;
pub mod experiment;
pub mod split;
