//! Multi-seed experiment orchestration.
//!
//! One experiment runs the full pipeline (split, pretrain, fine-tune,
//! evaluate) once per seed and aggregates the metrics. Subgraph
//! sampling is shared across seeds and cached in the bundle directory,
//! keyed by the table content hash. Every per-trial random choice is
//! derived from that trial's seed, so the aggregate report is a pure
//! function of the bundle bytes and the configuration.

use crate::diff::standardize_columns;
use crate::error::{Error, Result};
use crate::finetune::{run_finetuning, FinetuneConfig};
use crate::graph::SparseGraph;
use crate::io::bundle::GraphBundle;
use crate::io::split::{sample_split, SplitConfig};
use crate::metrics::EvalReport;
use crate::pretrain::{run_pretraining, PretrainConfig};
use crate::sampler::{sample_all, RqSubgraph, SamplerConfig};
use crate::{Label, Mat, Real};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Everything one experiment needs beyond the bundle itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub sampler: SamplerConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub split: SplitConfig,
    /// Column-standardize features before sampling and training.
    pub standardize_features: bool,
    /// Add one self-loop per node for the spectral pipeline.
    pub self_loops: bool,
    /// Run trials on parallel workers instead of sequentially.
    pub parallel_seeds: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            sampler: SamplerConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            split: SplitConfig::default(),
            standardize_features: true,
            self_loops: true,
            parallel_seeds: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("experiment needs at least one seed".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig(
                "duplicate seeds would repeat identical trials".into(),
            ));
        }
        self.pretrain.validate()?;
        self.finetune.validate()?;
        Ok(())
    }
}

/// Metrics and provenance of one seed's run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub pretrain_epochs: usize,
    pub pretrain_best_loss: f64,
    pub spectral_bound: f64,
    pub best_epoch: usize,
    pub best_val_auroc: f64,
    pub eval: EvalReport,
}

/// Test scores of one trial, for CSV dumps and external plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialScores {
    pub seed: u64,
    pub node_ids: Vec<usize>,
    pub scores: Vec<f64>,
    pub labels: Vec<Label>,
}

/// Mean and population standard deviation over trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn over(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

/// Cross-seed aggregate with the full per-trial breakdown and enough
/// provenance (config echo, content hash) to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub num_trials: usize,
    pub auroc: MeanStd,
    pub auprc: MeanStd,
    pub recall_at_k: MeanStd,
    pub content_hash: String,
    pub config: ExperimentConfig,
    pub trials: Vec<TrialReport>,
}

/// In-memory result of `run_experiment`; artifacts on disk mirror it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentOutcome {
    pub aggregate: AggregateReport,
    pub scores: Vec<TrialScores>,
}

fn stage_result<T>(stage: &'static str, seed: u64, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Trial {
        stage,
        seed,
        source: Box::new(e),
    })
}

fn run_trial(
    bundle: &GraphBundle,
    graph: &SparseGraph,
    x: &Mat<Real>,
    subgraphs: &[RqSubgraph],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(TrialReport, TrialScores)> {
    let split = stage_result("split", seed, sample_split(&bundle.labels, seed, &cfg.split))?;

    let pcfg = PretrainConfig {
        seed,
        ..cfg.pretrain.clone()
    };
    let pre = stage_result("pretrain", seed, run_pretraining(graph, x, subgraphs, &pcfg))?;

    let fcfg = FinetuneConfig {
        seed,
        ..cfg.finetune.clone()
    };
    let out = stage_result(
        "finetune",
        seed,
        run_finetuning(
            &pre.model,
            pre.spectral_bound,
            graph,
            x,
            &bundle.labels,
            &split,
            &fcfg,
        ),
    )?;

    let labels: Vec<Label> = out.test_ids.iter().map(|&i| bundle.labels[i]).collect();
    let report = TrialReport {
        seed,
        train_size: split.train.len(),
        val_size: split.val.len(),
        test_size: split.test.len(),
        pretrain_epochs: pre.loss_history.len().saturating_sub(1),
        pretrain_best_loss: pre.best_loss,
        spectral_bound: pre.spectral_bound,
        best_epoch: out.best_epoch,
        best_val_auroc: out.best_val_auroc,
        eval: out.report,
    };
    let scores = TrialScores {
        seed,
        node_ids: out.test_ids,
        scores: out.test_scores,
        labels,
    };
    Ok((report, scores))
}

/// Runs the pipeline for every seed and aggregates. With `out_dir` set,
/// per-seed reports and score dumps land in isolated `seed_<n>`
/// subdirectories next to the aggregate.
pub fn run_experiment(
    bundle: &GraphBundle,
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
) -> Result<ExperimentOutcome> {
    cfg.validate()?;

    let x = if cfg.standardize_features {
        standardize_columns(&bundle.features)
    } else {
        bundle.features.clone()
    };
    let graph = bundle.graph.with_self_loops(cfg.self_loops);

    // Self-loops add nothing to any induced quotient, so sampling runs
    // on the stored graph and the cache stays valid whichever way the
    // pipeline is configured.
    let subgraphs = match bundle.cached_subgraphs(&cfg.sampler, cfg.standardize_features)? {
        Some(cached) => cached,
        None => {
            let fresh = sample_all(&bundle.graph, &x, &cfg.sampler);
            bundle.store_subgraphs(&cfg.sampler, cfg.standardize_features, fresh.clone())?;
            fresh
        }
    };

    let trial = |&seed: &u64| run_trial(bundle, &graph, &x, &subgraphs, cfg, seed);
    let results: Vec<(TrialReport, TrialScores)> = if cfg.parallel_seeds {
        cfg.seeds.par_iter().map(trial).collect::<Result<_>>()?
    } else {
        cfg.seeds.iter().map(trial).collect::<Result<_>>()?
    };

    let (trials, scores): (Vec<TrialReport>, Vec<TrialScores>) = results.into_iter().unzip();
    let collect = |f: fn(&TrialReport) -> f64| trials.iter().map(f).collect::<Vec<f64>>();
    let aggregate = AggregateReport {
        num_trials: trials.len(),
        auroc: MeanStd::over(&collect(|t| t.eval.auroc)),
        auprc: MeanStd::over(&collect(|t| t.eval.auprc)),
        recall_at_k: MeanStd::over(&collect(|t| t.eval.recall_at_k)),
        content_hash: bundle.meta.content_hash.clone(),
        config: cfg.clone(),
        trials,
    };
    let outcome = ExperimentOutcome { aggregate, scores };

    if let Some(dir) = out_dir {
        write_artifacts(dir, &outcome)?;
    }
    Ok(outcome)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    std::fs::write(path, json)?;
    Ok(())
}

fn scores_csv(scores: &TrialScores) -> String {
    let mut out = String::from("node,score,label\n");
    for ((&id, &score), &label) in scores
        .node_ids
        .iter()
        .zip(&scores.scores)
        .zip(&scores.labels)
    {
        let _ = writeln!(out, "{id},{score},{label}");
    }
    out
}

fn write_artifacts(dir: &Path, outcome: &ExperimentOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("aggregate.json"), &outcome.aggregate)?;
    for (report, scores) in outcome.aggregate.trials.iter().zip(&outcome.scores) {
        let sub = dir.join(format!("seed_{}", report.seed));
        std::fs::create_dir_all(&sub)?;
        write_json(&sub.join("report.json"), report)?;
        std::fs::write(sub.join("scores.csv"), scores_csv(scores))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asbm::{generate_asbm, AsbmSpec, RatePair};
    use crate::io::bundle::{load_bundle, save_bundle, FeatureFormat, RQ_CACHE_FILE};
    use tempfile::TempDir;

    fn small_bundle(dir: &Path) -> GraphBundle {
        let spec = AsbmSpec {
            n_anomaly: 12,
            n_normal: 48,
            mean_anomaly: vec![0.8, 0.0, 0.3, 0.0, -0.2, 0.0, 0.1, 0.0],
            mean_normal: vec![-0.2, 0.6, -0.3, 0.1, 0.2, -0.1, 0.0, 0.3],
            homophilic: RatePair {
                intra: 0.3,
                inter: 0.05,
            },
            heterophilic: RatePair {
                intra: 0.05,
                inter: 0.3,
            },
            theta_min: 0.8,
            theta_max: 1.2,
            frac_heterophilic: 0.3,
            seed: 7,
        };
        let inst = generate_asbm(&spec).unwrap();
        save_bundle(dir, &inst.graph, &inst.features, &inst.labels, FeatureFormat::Csv).unwrap();
        load_bundle(dir).unwrap()
    }

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            seeds: vec![3, 4],
            sampler: SamplerConfig {
                hop_limit: 1,
                candidate_budget: 16,
                ..SamplerConfig::default()
            },
            pretrain: PretrainConfig {
                epochs: 3,
                embed_dim: 8,
                order: 2,
                allow_custom: true,
                ..PretrainConfig::default()
            },
            finetune: FinetuneConfig {
                epochs: 4,
                allow_custom: true,
                ..FinetuneConfig::default()
            },
            split: SplitConfig {
                n_pos: 2,
                n_neg: 8,
                ..SplitConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn experiment_is_deterministic_and_aggregates_correctly() {
        let dir = TempDir::new().unwrap();
        let bundle = small_bundle(dir.path());
        let cfg = small_config();
        let out = TempDir::new().unwrap();

        let first = run_experiment(&bundle, &cfg, Some(out.path())).unwrap();
        let second = run_experiment(&bundle, &cfg, None).unwrap();
        assert_eq!(
            serde_json::to_string(&first.aggregate).unwrap(),
            serde_json::to_string(&second.aggregate).unwrap()
        );

        let agg = &first.aggregate;
        assert_eq!(agg.num_trials, 2);
        let hand_mean =
            agg.trials.iter().map(|t| t.eval.auroc).sum::<f64>() / agg.trials.len() as f64;
        assert_eq!(agg.auroc.mean, hand_mean);
        assert_eq!(agg.content_hash, bundle.meta.content_hash);
        for (t, s) in agg.trials.iter().zip(&first.scores) {
            assert_eq!(t.seed, s.seed);
            assert_eq!(s.node_ids.len(), s.scores.len());
            assert!(t.best_epoch >= 1 && t.best_epoch <= 4);
        }

        // Sampling left a reusable cache next to the tables.
        assert!(dir.path().join(RQ_CACHE_FILE).exists());
        assert!(bundle
            .cached_subgraphs(&cfg.sampler, cfg.standardize_features)
            .unwrap()
            .is_some());

        for name in [
            "aggregate.json",
            "seed_3/report.json",
            "seed_3/scores.csv",
            "seed_4/report.json",
            "seed_4/scores.csv",
        ] {
            assert!(out.path().join(name).exists(), "{name} missing");
        }
        let csv = std::fs::read_to_string(out.path().join("seed_3/scores.csv")).unwrap();
        assert!(csv.starts_with("node,score,label\n"));
        assert_eq!(csv.lines().count(), 1 + first.scores[0].node_ids.len());
    }

    #[test]
    fn parallel_seeds_match_sequential() {
        let dir = TempDir::new().unwrap();
        let bundle = small_bundle(dir.path());
        let sequential = run_experiment(&bundle, &small_config(), None).unwrap();
        let parallel_cfg = ExperimentConfig {
            parallel_seeds: true,
            ..small_config()
        };
        let parallel = run_experiment(&bundle, &parallel_cfg, None).unwrap();
        assert_eq!(sequential.aggregate.trials, parallel.aggregate.trials);
        assert_eq!(sequential.scores, parallel.scores);
    }

    #[test]
    fn trial_failures_name_stage_and_seed() {
        let dir = TempDir::new().unwrap();
        let bundle = small_bundle(dir.path());
        let cfg = ExperimentConfig {
            split: SplitConfig::default(),
            ..small_config()
        };
        match run_experiment(&bundle, &cfg, None) {
            Err(Error::Trial { stage, seed, source }) => {
                assert_eq!(stage, "split");
                assert_eq!(seed, 3);
                assert!(matches!(*source, Error::SplitTooSmall { .. }));
            }
            other => panic!("expected split-stage failure, got {other:?}"),
        }
    }

    #[test]
    fn config_validation_rejects_bad_seed_lists() {
        let none = ExperimentConfig {
            seeds: vec![],
            ..small_config()
        };
        assert!(none.validate().is_err());
        let dup = ExperimentConfig {
            seeds: vec![5, 5],
            ..small_config()
        };
        assert!(dup.validate().is_err());
        assert!(small_config().validate().is_ok());
    }
}
