//! Stratified labeled splits.
//!
//! Training draws a fixed number of anomalies and normals uniformly
//! without replacement (20/80 by default). The validation set is either
//! drawn disjointly with the same composition, or reuses the training
//! nodes when `shared_val` is set. Every node outside train and val is
//! test, unlabeled nodes included; consumers filter on labels.

use crate::error::{Error, Result};
use crate::rng::{salt, stream};
use crate::Label;
use rand::seq::index;
use serde::{Deserialize, Serialize};

/// Node-id assignment of one split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Composition of the labeled splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// Anomalies per labeled set.
    pub n_pos: usize,
    /// Normals per labeled set.
    pub n_neg: usize,
    /// Draw a validation set at all.
    pub with_val: bool,
    /// Reuse the training nodes as validation instead of drawing a
    /// disjoint set.
    pub shared_val: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            n_pos: 20,
            n_neg: 80,
            with_val: true,
            shared_val: false,
        }
    }
}

impl SplitSpec {
    /// Checks id ranges and that train/val/test do not overlap, except
    /// for the shared-validation reading where val equals train.
    pub fn validate(&self, num_nodes: usize) -> Result<()> {
        let mut seen = vec![false; num_nodes];
        let shared = self.val == self.train;
        for (name, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            if name == "val" && shared {
                continue;
            }
            for &id in ids {
                if id >= num_nodes {
                    return Err(Error::NodeOutOfRange {
                        id,
                        nodes: num_nodes,
                    });
                }
                if seen[id] {
                    return Err(Error::InvalidConfig(format!(
                        "node {id} appears in more than one split set"
                    )));
                }
                seen[id] = true;
            }
        }
        Ok(())
    }
}

/// Draws one stratified split from the labels.
///
/// All randomness comes from the split stream of `seed`, so the same
/// seed always yields the same split. Output id lists are sorted.
pub fn sample_split(labels: &[Label], seed: u64, cfg: &SplitConfig) -> Result<SplitSpec> {
    if cfg.n_pos + cfg.n_neg == 0 {
        return Err(Error::InvalidConfig(
            "split needs at least one labeled training node".into(),
        ));
    }
    let anomalies: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let normals: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();

    let copies = if cfg.with_val && !cfg.shared_val { 2 } else { 1 };
    let need_pos = cfg.n_pos * copies;
    let need_neg = cfg.n_neg * copies;
    if anomalies.len() < need_pos {
        return Err(Error::SplitTooSmall {
            class: "anomalous",
            need: need_pos,
            have: anomalies.len(),
        });
    }
    if normals.len() < need_neg {
        return Err(Error::SplitTooSmall {
            class: "normal",
            need: need_neg,
            have: normals.len(),
        });
    }

    let mut rng = stream(seed, salt::SPLIT);
    let pos_draw: Vec<usize> = index::sample(&mut rng, anomalies.len(), need_pos)
        .into_iter()
        .map(|k| anomalies[k])
        .collect();
    let neg_draw: Vec<usize> = index::sample(&mut rng, normals.len(), need_neg)
        .into_iter()
        .map(|k| normals[k])
        .collect();

    let mut train: Vec<usize> = pos_draw[..cfg.n_pos]
        .iter()
        .chain(&neg_draw[..cfg.n_neg])
        .copied()
        .collect();
    train.sort_unstable();

    let mut val: Vec<usize> = if !cfg.with_val {
        Vec::new()
    } else if cfg.shared_val {
        train.clone()
    } else {
        pos_draw[cfg.n_pos..]
            .iter()
            .chain(&neg_draw[cfg.n_neg..])
            .copied()
            .collect()
    };
    val.sort_unstable();

    let mut held = vec![false; labels.len()];
    for &id in train.iter().chain(&val) {
        held[id] = true;
    }
    let test: Vec<usize> = (0..labels.len()).filter(|&i| !held[i]).collect();

    Ok(SplitSpec {
        seed,
        train,
        val,
        test,
    })
}
