//! Subcommand implementations.
//!
//! Conventions shared by every handler: the primary report is printed
//! to stdout as pretty JSON, `--out` directories are created on demand,
//! and configuration files are JSON bodies of the same structs the
//! library consumes, with every field optional.

use apf_core::asbm::{generate_asbm, verify_separability, AsbmSpec};
use apf_core::diff::standardize_columns;
use apf_core::finetune::run_finetuning;
use apf_core::gradcheck::run_gradient_suite;
use apf_core::graph::{local_homophily, SparseGraph};
use apf_core::io::bundle::{
    load_bundle, load_rq_cache, save_bundle, BundleMeta, FeatureFormat, GraphBundle,
    RQ_CACHE_FILE,
};
use apf_core::io::checkpoint::{
    load_finetuned, load_pretrained, save_finetuned, save_pretrained,
};
use apf_core::io::experiment::{run_experiment, ExperimentConfig};
use apf_core::io::split::sample_split;
use apf_core::metrics::{evaluate, quartile_analysis, EvalReport};
use apf_core::pretrain::run_pretraining;
use apf_core::sampler::{sample_all, RqSubgraph};
use apf_core::{Error, Label, Mat, Real, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

// -------------------------------------------------------------------
// Shared plumbing
// -------------------------------------------------------------------

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))
}

fn from_json_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

/// Loads a config file, or the type's defaults when no path was given.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => from_json_file(p),
        None => Ok(T::default()),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    use std::io::Write as _;
    let json = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{json}") {
        // A downstream reader such as `head` may close the pipe early;
        // file artifacts are still written, so this is not a failure.
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    fs::write(path, json)?;
    Ok(())
}

fn write_scores_csv(
    path: &Path,
    node_ids: &[usize],
    scores: &[f64],
    labels: &[Label],
) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::from("node,score,label\n");
    for ((&id, &score), &label) in node_ids.iter().zip(scores).zip(labels) {
        let _ = writeln!(out, "{id},{score},{label}");
    }
    fs::write(path, out)?;
    Ok(())
}

/// The generator spec from a file, or the built-in benchmark regime.
fn load_spec(path: Option<&Path>, seed: Option<u64>) -> Result<AsbmSpec> {
    let mut spec = match path {
        Some(p) => from_json_file::<AsbmSpec>(p)?,
        None => AsbmSpec::reference(0),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    Ok(spec)
}

fn features_for(bundle: &GraphBundle, cfg: &ExperimentConfig) -> Mat<Real> {
    if cfg.standardize_features {
        standardize_columns(&bundle.features)
    } else {
        bundle.features.clone()
    }
}

/// Returns the bundle's cached subgraphs, sampling and storing them on
/// a miss. Sampling runs on the stored graph, so the cache is valid
/// under either self-loop setting.
fn cached_or_sampled(
    bundle: &GraphBundle,
    x: &Mat<Real>,
    cfg: &ExperimentConfig,
) -> Result<(Vec<RqSubgraph>, bool)> {
    if let Some(cached) = bundle.cached_subgraphs(&cfg.sampler, cfg.standardize_features)? {
        return Ok((cached, true));
    }
    let fresh = sample_all(&bundle.graph, x, &cfg.sampler);
    bundle.store_subgraphs(&cfg.sampler, cfg.standardize_features, fresh.clone())?;
    Ok((fresh, false))
}

fn check_hash(recorded: &str, bundle: &GraphBundle, what: &str) -> Result<()> {
    if recorded != bundle.meta.content_hash {
        return Err(Error::InvalidConfig(format!(
            "{what} was created from a bundle with content hash {recorded}, \
             but {} has {}",
            bundle.dir.display(),
            bundle.meta.content_hash
        )));
    }
    Ok(())
}

// -------------------------------------------------------------------
// stats
// -------------------------------------------------------------------

#[derive(Serialize)]
struct RqSummary {
    count: usize,
    mean: f64,
    min: f64,
    lower_quartile: f64,
    median: f64,
    upper_quartile: f64,
    max: f64,
}

impl RqSummary {
    fn over(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        // Nearest-rank quantiles keep the summary exactly reproducible.
        let at = |f: f64| sorted[((sorted.len() - 1) as f64 * f).round() as usize];
        Some(Self {
            count: sorted.len(),
            mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
            min: sorted[0],
            lower_quartile: at(0.25),
            median: at(0.5),
            upper_quartile: at(0.75),
            max: sorted[sorted.len() - 1],
        })
    }
}

#[derive(Serialize)]
struct StatsReport {
    content_hash: String,
    num_nodes: usize,
    num_edges: usize,
    feature_dim: usize,
    num_anomalies: usize,
    num_normals: usize,
    num_unlabeled: usize,
    /// Mean local homophily over labeled anomalies (absent when none is
    /// defined).
    anomaly_homophily: Option<f64>,
    normal_homophily: Option<f64>,
    /// Edge-difference energy of the stored features over their total
    /// energy; rises when high-frequency content accumulates.
    signal_quotient_raw: f64,
    signal_quotient_standardized: f64,
    /// "absent", "stale" (tables changed since sampling), or "fresh".
    subgraph_cache: &'static str,
    cached_quotients: Option<RqSummary>,
}

/// Energy ratio of a node signal: the sum over edges of squared row
/// differences, over the total squared mass. Self-edges contribute
/// nothing and are skipped.
fn signal_quotient(graph: &SparseGraph, x: &Mat<Real>) -> Result<f64> {
    let mut num = 0.0;
    for (i, j) in graph.edges() {
        if i == j {
            continue;
        }
        num += x
            .row(i)
            .iter()
            .zip(x.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    let den: f64 = x.iter().map(|v| v * v).sum();
    if den <= 0.0 {
        return Err(Error::ZeroSignal);
    }
    Ok(num / den)
}

pub fn stats(args: &crate::StatsArgs) -> Result<()> {
    let bundle = load_bundle(&args.bundle)?;
    let hom = local_homophily::<f64>(&bundle.graph, &bundle.labels)?;
    let count = |l: Label| bundle.labels.iter().filter(|&&v| v == l).count();

    let (subgraph_cache, cached_quotients) = match load_rq_cache(&bundle.dir)? {
        None => ("absent", None),
        Some(cache) if cache.content_hash != bundle.meta.content_hash => ("stale", None),
        Some(cache) => {
            let values: Vec<f64> = cache.subgraphs.iter().map(|s| s.rq_value).collect();
            ("fresh", RqSummary::over(&values))
        }
    };

    let report = StatsReport {
        content_hash: bundle.meta.content_hash.clone(),
        num_nodes: bundle.graph.num_nodes(),
        num_edges: bundle.graph.num_edges(),
        feature_dim: bundle.features.ncols(),
        num_anomalies: count(1),
        num_normals: count(0),
        num_unlabeled: count(-1),
        anomaly_homophily: hom.anomaly_mean,
        normal_homophily: hom.normal_mean,
        signal_quotient_raw: signal_quotient(&bundle.graph, &bundle.features)?,
        signal_quotient_standardized: signal_quotient(
            &bundle.graph,
            &standardize_columns(&bundle.features),
        )?,
        subgraph_cache,
        cached_quotients,
    };
    print_json(&report)?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("stats.json"), &report)?;
    }
    Ok(())
}

// -------------------------------------------------------------------
// asbm gen / asbm verify
// -------------------------------------------------------------------

#[derive(Serialize)]
struct GenReport<'a> {
    dir: String,
    spec: &'a AsbmSpec,
    meta: &'a BundleMeta,
}

pub fn asbm_gen(args: &crate::AsbmGenArgs) -> Result<()> {
    let spec = load_spec(args.config.as_deref(), args.seed)?;
    let inst = generate_asbm(&spec)?;
    let format = if args.binary_features {
        FeatureFormat::Bin
    } else {
        FeatureFormat::Csv
    };
    let meta = save_bundle(&args.out, &inst.graph, &inst.features, &inst.labels, format)?;
    write_json(&args.out.join("asbm_spec.json"), &spec)?;
    print_json(&GenReport {
        dir: args.out.display().to_string(),
        spec: &spec,
        meta: &meta,
    })
}

pub fn asbm_verify(args: &crate::AsbmVerifyArgs) -> Result<()> {
    let spec = load_spec(args.config.as_deref(), args.seed)?;
    let report = verify_separability(&spec, args.radius, args.trials)?;
    print_json(&report)?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("separability.json"), &report)?;
    }
    Ok(())
}

// -------------------------------------------------------------------
// sample
// -------------------------------------------------------------------

#[derive(Serialize)]
struct SampleReport {
    num_subgraphs: usize,
    /// True when a valid cache already covered this configuration.
    reused_cache: bool,
    mean_quotient: f64,
    mean_members: f64,
    cache_file: String,
}

pub fn sample(args: &crate::SampleArgs) -> Result<()> {
    let bundle = load_bundle(&args.bundle)?;
    let cfg: ExperimentConfig = load_config(args.config.as_deref())?;
    let x = features_for(&bundle, &cfg);
    let (subgraphs, reused) = cached_or_sampled(&bundle, &x, &cfg)?;
    let n = subgraphs.len().max(1) as f64;
    print_json(&SampleReport {
        num_subgraphs: subgraphs.len(),
        reused_cache: reused,
        mean_quotient: subgraphs.iter().map(|s| s.rq_value).sum::<f64>() / n,
        mean_members: subgraphs.iter().map(|s| s.members.len()).sum::<usize>() as f64 / n,
        cache_file: bundle.dir.join(RQ_CACHE_FILE).display().to_string(),
    })
}

// -------------------------------------------------------------------
// pretrain
// -------------------------------------------------------------------

/// On-disk record of one pretraining run, written next to the
/// checkpoint so later stages can rebuild the encoder identically.
#[derive(Serialize, Deserialize)]
struct PretrainRecord {
    content_hash: String,
    config: ExperimentConfig,
    spectral_bound: f64,
    epochs_run: usize,
    best_epoch: usize,
    best_loss: f64,
}

pub fn pretrain(args: &crate::PretrainArgs) -> Result<()> {
    let bundle = load_bundle(&args.bundle)?;
    let mut cfg: ExperimentConfig = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.pretrain.seed = s;
    }
    let x = features_for(&bundle, &cfg);
    let graph = bundle.graph.with_self_loops(cfg.self_loops);
    let (subgraphs, _) = cached_or_sampled(&bundle, &x, &cfg)?;
    let outcome = run_pretraining(&graph, &x, &subgraphs, &cfg.pretrain)?;

    fs::create_dir_all(&args.out)?;
    save_pretrained(
        &args.out.join("pretrain.ckpt"),
        &outcome.model,
        outcome.spectral_bound,
    )?;
    let record = PretrainRecord {
        content_hash: bundle.meta.content_hash.clone(),
        config: cfg,
        spectral_bound: outcome.spectral_bound,
        epochs_run: outcome.loss_history.len().saturating_sub(1),
        best_epoch: outcome.best_epoch,
        best_loss: outcome.best_loss,
    };
    write_json(&args.out.join("pretrain.json"), &record)?;
    print_json(&record)
}

// -------------------------------------------------------------------
// finetune
// -------------------------------------------------------------------

/// On-disk record of one fine-tuning run: the merged configuration it
/// ran under, the split seed, and the test-set evaluation.
#[derive(Serialize, Deserialize)]
struct FinetuneRecord {
    content_hash: String,
    seed: u64,
    config: ExperimentConfig,
    train_size: usize,
    val_size: usize,
    test_size: usize,
    best_epoch: usize,
    best_val_auroc: f64,
    eval: EvalReport,
}

pub fn finetune(args: &crate::FinetuneArgs) -> Result<()> {
    let bundle = load_bundle(&args.bundle)?;
    let pre: PretrainRecord = from_json_file(&args.pretrained.join("pretrain.json"))?;
    check_hash(&pre.content_hash, &bundle, "the pretraining checkpoint")?;

    // The head's config comes from the caller; everything the encoder
    // depends on is pinned to what pretraining recorded.
    let mut cfg: ExperimentConfig = load_config(args.config.as_deref())?;
    cfg.standardize_features = pre.config.standardize_features;
    cfg.self_loops = pre.config.self_loops;
    cfg.sampler = pre.config.sampler.clone();
    cfg.pretrain = pre.config.pretrain.clone();
    if args.shared_val {
        cfg.split.shared_val = true;
    }
    let seed = args.seed.unwrap_or(cfg.finetune.seed);
    cfg.finetune.seed = seed;

    let x = features_for(&bundle, &cfg);
    let graph = bundle.graph.with_self_loops(cfg.self_loops);
    let (model, bound) = load_pretrained::<Real>(
        &args.pretrained.join("pretrain.ckpt"),
        x.ncols(),
        &cfg.pretrain,
    )?;
    let split = sample_split(&bundle.labels, seed, &cfg.split)?;
    let out = run_finetuning(&model, bound, &graph, &x, &bundle.labels, &split, &cfg.finetune)?;

    fs::create_dir_all(&args.out)?;
    save_finetuned(&args.out.join("finetune.ckpt"), &out.model)?;
    let labels: Vec<Label> = out.test_ids.iter().map(|&i| bundle.labels[i]).collect();
    write_scores_csv(
        &args.out.join("scores.csv"),
        &out.test_ids,
        &out.test_scores,
        &labels,
    )?;
    let record = FinetuneRecord {
        content_hash: bundle.meta.content_hash.clone(),
        seed,
        config: cfg,
        train_size: split.train.len(),
        val_size: split.val.len(),
        test_size: split.test.len(),
        best_epoch: out.best_epoch,
        best_val_auroc: out.best_val_auroc,
        eval: out.report,
    };
    write_json(&args.out.join("finetune.json"), &record)?;
    print_json(&record)
}

// -------------------------------------------------------------------
// eval
// -------------------------------------------------------------------

#[derive(Serialize)]
struct EvalRecord {
    content_hash: String,
    split_seed: u64,
    num_test_scored: usize,
    eval: EvalReport,
}

pub fn eval(args: &crate::EvalArgs) -> Result<()> {
    let bundle = load_bundle(&args.bundle)?;
    let pre: PretrainRecord = from_json_file(&args.pretrained.join("pretrain.json"))?;
    check_hash(&pre.content_hash, &bundle, "the pretraining checkpoint")?;
    let fin: FinetuneRecord = from_json_file(&args.finetuned.join("finetune.json"))?;
    check_hash(&fin.content_hash, &bundle, "the fine-tuned checkpoint")?;

    let x = features_for(&bundle, &pre.config);
    let graph = bundle.graph.with_self_loops(pre.config.self_loops);
    let (pretrained, bound) = load_pretrained::<Real>(
        &args.pretrained.join("pretrain.ckpt"),
        x.ncols(),
        &pre.config.pretrain,
    )?;
    let model = load_finetuned::<Real>(
        &args.finetuned.join("finetune.ckpt"),
        x.ncols(),
        pre.config.pretrain.embed_dim,
        &fin.config.finetune,
    )?;

    let (z_low, z_high) = pretrained.encoder.encode(&graph, &x, bound)?;
    let (probs, _) = model.forward(&x, &z_low, &z_high)?;

    let seed = args.seed.unwrap_or(fin.seed);
    let split = sample_split(&bundle.labels, seed, &fin.config.split)?;
    let test_ids: Vec<usize> = split
        .test
        .iter()
        .copied()
        .filter(|&i| bundle.labels[i] >= 0)
        .collect();
    let scores: Vec<f64> = test_ids.iter().map(|&i| probs[i]).collect();
    let test_labels: Vec<bool> = test_ids.iter().map(|&i| bundle.labels[i] == 1).collect();
    let hom = local_homophily::<f64>(&bundle.graph, &bundle.labels)?;
    let test_hom: Vec<Option<f64>> = test_ids.iter().map(|&i| hom.per_node[i]).collect();
    let quartiles = quartile_analysis(&scores, &test_labels, &test_hom, &test_ids)?;
    let eval = evaluate(&scores, &test_labels, Some(quartiles))?;

    let record = EvalRecord {
        content_hash: bundle.meta.content_hash.clone(),
        split_seed: seed,
        num_test_scored: test_ids.len(),
        eval,
    };
    print_json(&record)?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("eval.json"), &record)?;
        let labels: Vec<Label> = test_ids.iter().map(|&i| bundle.labels[i]).collect();
        write_scores_csv(&dir.join("scores.csv"), &test_ids, &scores, &labels)?;
    }
    Ok(())
}

// -------------------------------------------------------------------
// run
// -------------------------------------------------------------------

pub fn run(args: &crate::RunArgs) -> Result<()> {
    let bundle = load_bundle(&args.bundle)?;
    let mut cfg: ExperimentConfig = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if args.parallel_seeds {
        cfg.parallel_seeds = true;
    }
    if args.shared_val {
        cfg.split.shared_val = true;
    }
    let outcome = run_experiment(&bundle, &cfg, args.out.as_deref())?;
    print_json(&outcome.aggregate)
}

// -------------------------------------------------------------------
// gradcheck
// -------------------------------------------------------------------

pub fn gradcheck(args: &crate::GradcheckArgs) -> Result<()> {
    let report = run_gradient_suite(args.seed.unwrap_or(0))?;
    print_json(&report)?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("gradcheck.json"), &report)?;
    }
    if !report.all_passed() {
        let failures = report.failures();
        let worst = failures
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .map(|r| r.name.clone())
            .unwrap_or_default();
        return Err(Error::GradientCheckFailed {
            failed: failures.len(),
            total: report.results.len(),
            worst,
        });
    }
    Ok(())
}
