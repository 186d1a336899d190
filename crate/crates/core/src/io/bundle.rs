//! Directory-based graph bundles.
//!
//! A bundle is a directory holding plain text tables plus a JSON meta
//! file that records counts, dimensions, the feature-table format, and
//! a SHA-256 hash over the three tables:
//!
//! ```text
//! meta.json       version, counts, dims, feature format, content hash
//! edges.csv       one undirected edge per line: "src,dst"
//! features.csv    one node per line, comma-separated floats
//! features.bin    alternative feature table: magic "APFFEAT1",
//!                 u32 rows, u32 cols, then row-major f32 little-endian
//! labels.csv      one integer per line: 1 anomaly, 0 normal, -1 unlabeled
//! splits.json     optional list of saved splits
//! rq_cache.json   optional sampled-subgraph cache keyed by content hash
//! ```
//!
//! Text tables round-trip exactly: floats are written in the shortest
//! form that parses back to the same bits, and edges are written in the
//! canonical sorted order the graph stores them in. Loading validates
//! every count against the meta file and recomputes the content hash,
//! so stale or hand-edited bundles fail loudly instead of feeding the
//! pipeline silently changed data.

use crate::error::{Error, Result};
use crate::graph::SparseGraph;
use crate::io::split::SplitSpec;
use crate::sampler::{RqSubgraph, SamplerConfig};
use crate::{Label, Mat, Real};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const BUNDLE_VERSION: u32 = 1;
pub const FEATURE_MAGIC: &[u8; 8] = b"APFFEAT1";

pub const META_FILE: &str = "meta.json";
pub const EDGES_FILE: &str = "edges.csv";
pub const FEATURES_CSV_FILE: &str = "features.csv";
pub const FEATURES_BIN_FILE: &str = "features.bin";
pub const LABELS_FILE: &str = "labels.csv";
pub const SPLITS_FILE: &str = "splits.json";
pub const RQ_CACHE_FILE: &str = "rq_cache.json";

/// How the feature table is stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFormat {
    /// Text, full f64 precision, round-trips exactly.
    Csv,
    /// Binary f32, compact; wider values are narrowed on save.
    Bin,
}

impl FeatureFormat {
    pub fn file_name(self) -> &'static str {
        match self {
            FeatureFormat::Csv => FEATURES_CSV_FILE,
            FeatureFormat::Bin => FEATURES_BIN_FILE,
        }
    }
}

/// Counts, dimensions, and the content hash of one bundle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub version: u32,
    pub num_nodes: usize,
    /// Line count of the edge table.
    pub num_edges: usize,
    pub feature_dim: usize,
    pub feature_format: FeatureFormat,
    /// Hex SHA-256 over the edge, feature, and label tables, each
    /// prefixed with its byte length.
    pub content_hash: String,
}

/// A loaded bundle: validated in-memory objects plus the directory they
/// came from, kept so caches can be read and written next to the data.
#[derive(Debug, Clone)]
pub struct GraphBundle {
    pub dir: PathBuf,
    pub meta: BundleMeta,
    pub graph: SparseGraph,
    pub features: Mat<Real>,
    pub labels: Vec<Label>,
}

/// Sampled subgraphs cached next to the tables they were computed from.
/// The hash ties the cache to exact table bytes; `standardized` records
/// whether features were column-standardized before sampling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RqCache {
    pub content_hash: String,
    pub sampler: SamplerConfig,
    pub standardized: bool,
    pub subgraphs: Vec<RqSubgraph>,
}

fn format_err(file: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::BundleFormat {
        file: file.to_string(),
        line,
        msg: msg.into(),
    }
}

fn hash_tables(edges: &[u8], features: &[u8], labels: &[u8]) -> String {
    let mut hasher = Sha256::new();
    for table in [edges, features, labels] {
        hasher.update((table.len() as u64).to_le_bytes());
        hasher.update(table);
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        let _ = write!(hex, "{byte:02x}");
    }
    hex
}

// ---------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------

fn encode_edges(graph: &SparseGraph) -> String {
    let mut out = String::new();
    for (a, b) in graph.edges().filter(|&(a, b)| a != b) {
        let _ = writeln!(out, "{a},{b}");
    }
    out
}

fn encode_features_csv(x: &Mat<Real>) -> String {
    let mut out = String::new();
    for row in x.rows() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

fn encode_features_bin(x: &Mat<Real>) -> Result<Vec<u8>> {
    let rows = u32::try_from(x.nrows())
        .map_err(|_| Error::InvalidConfig("feature table exceeds u32 rows".into()))?;
    let cols = u32::try_from(x.ncols())
        .map_err(|_| Error::InvalidConfig("feature table exceeds u32 columns".into()))?;
    let mut out = Vec::with_capacity(16 + x.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for v in x.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

fn encode_labels(labels: &[Label]) -> String {
    let mut out = String::new();
    for l in labels {
        let _ = writeln!(out, "{l}");
    }
    out
}

/// Writes a bundle directory, creating it if needed, and returns the
/// meta that was stored. Features must be finite; labels must be in
/// {-1, 0, 1}; self-loops are never stored (they are a pipeline option,
/// not data).
pub fn save_bundle(
    dir: &Path,
    graph: &SparseGraph,
    features: &Mat<Real>,
    labels: &[Label],
    format: FeatureFormat,
) -> Result<BundleMeta> {
    let n = graph.num_nodes();
    if features.nrows() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} feature rows"),
            got: format!("{}", features.nrows()),
        });
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} labels"),
            got: format!("{}", labels.len()),
        });
    }
    for (node, &l) in labels.iter().enumerate() {
        if !matches!(l, -1 | 0 | 1) {
            return Err(Error::BadLabel {
                node,
                value: i64::from(l),
            });
        }
    }
    if let Some(((i, j), v)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "feature ({i}, {j}) is not finite: {v}"
        )));
    }

    let edge_bytes = encode_edges(graph).into_bytes();
    let feature_bytes = match format {
        FeatureFormat::Csv => encode_features_csv(features).into_bytes(),
        FeatureFormat::Bin => encode_features_bin(features)?,
    };
    let label_bytes = encode_labels(labels).into_bytes();
    let num_edges = edge_bytes.iter().filter(|&&b| b == b'\n').count();

    let meta = BundleMeta {
        version: BUNDLE_VERSION,
        num_nodes: n,
        num_edges,
        feature_dim: features.ncols(),
        feature_format: format,
        content_hash: hash_tables(&edge_bytes, &feature_bytes, &label_bytes),
    };

    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(EDGES_FILE), &edge_bytes)?;
    std::fs::write(dir.join(format.file_name()), &feature_bytes)?;
    std::fs::write(dir.join(LABELS_FILE), &label_bytes)?;
    let mut meta_json = serde_json::to_string_pretty(&meta)?;
    meta_json.push('\n');
    std::fs::write(dir.join(META_FILE), meta_json)?;
    Ok(meta)
}

// ---------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------

fn parse_edges(text: &str, meta: &BundleMeta) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let (a, b) = line.split_once(',').ok_or_else(|| {
            format_err(EDGES_FILE, line_no, "expected two comma-separated node ids")
        })?;
        let a: usize = a.trim().parse().map_err(|_| {
            format_err(EDGES_FILE, line_no, format!("bad node id `{}`", a.trim()))
        })?;
        let b: usize = b.trim().parse().map_err(|_| {
            format_err(EDGES_FILE, line_no, format!("bad node id `{}`", b.trim()))
        })?;
        if a == b {
            return Err(format_err(
                EDGES_FILE,
                line_no,
                format!("self-loop {a},{b}; bundles store loop-free graphs"),
            ));
        }
        edges.push((a, b));
    }
    if edges.len() != meta.num_edges {
        return Err(format_err(
            EDGES_FILE,
            0,
            format!("meta says {} edges, table has {}", meta.num_edges, edges.len()),
        ));
    }
    Ok(edges)
}

fn parse_features_csv(text: &str, meta: &BundleMeta) -> Result<Mat<Real>> {
    let mut values = Vec::with_capacity(meta.num_nodes * meta.feature_dim);
    let mut rows = 0usize;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        rows += 1;
        let mut cols = 0usize;
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                format_err(
                    FEATURES_CSV_FILE,
                    line_no,
                    format!("bad float `{}`", field.trim()),
                )
            })?;
            if !v.is_finite() {
                return Err(format_err(
                    FEATURES_CSV_FILE,
                    line_no,
                    format!("non-finite feature value `{v}`"),
                ));
            }
            values.push(v);
            cols += 1;
        }
        if cols != meta.feature_dim {
            return Err(format_err(
                FEATURES_CSV_FILE,
                line_no,
                format!("meta says {} columns, row has {cols}", meta.feature_dim),
            ));
        }
    }
    if rows != meta.num_nodes {
        return Err(format_err(
            FEATURES_CSV_FILE,
            0,
            format!("meta says {} rows, table has {rows}", meta.num_nodes),
        ));
    }
    Mat::from_shape_vec((rows, meta.feature_dim), values).map_err(|e| {
        format_err(FEATURES_CSV_FILE, 0, format!("shape assembly failed: {e}"))
    })
}

fn parse_features_bin(bytes: &[u8], meta: &BundleMeta) -> Result<Mat<Real>> {
    if bytes.len() < 16 {
        return Err(format_err(FEATURES_BIN_FILE, 0, "file shorter than header"));
    }
    if &bytes[..8] != FEATURE_MAGIC {
        return Err(format_err(FEATURES_BIN_FILE, 0, "bad magic"));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if rows != meta.num_nodes || cols != meta.feature_dim {
        return Err(format_err(
            FEATURES_BIN_FILE,
            0,
            format!(
                "meta says {}x{}, header says {rows}x{cols}",
                meta.num_nodes, meta.feature_dim
            ),
        ));
    }
    let expect = 16 + rows * cols * 4;
    if bytes.len() != expect {
        return Err(format_err(
            FEATURES_BIN_FILE,
            0,
            format!("expected {expect} bytes, found {}", bytes.len()),
        ));
    }
    let mut values = Vec::with_capacity(rows * cols);
    for (k, chunk) in bytes[16..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        if !v.is_finite() {
            return Err(format_err(
                FEATURES_BIN_FILE,
                k / cols.max(1) + 1,
                format!("non-finite feature value `{v}`"),
            ));
        }
        values.push(v);
    }
    Mat::from_shape_vec((rows, cols), values)
        .map_err(|e| format_err(FEATURES_BIN_FILE, 0, format!("shape assembly failed: {e}")))
}

fn parse_labels(text: &str, meta: &BundleMeta) -> Result<Vec<Label>> {
    let mut labels = Vec::with_capacity(meta.num_nodes);
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let v: i64 = line.trim().parse().map_err(|_| {
            format_err(LABELS_FILE, line_no, format!("bad label `{}`", line.trim()))
        })?;
        if !matches!(v, -1 | 0 | 1) {
            return Err(format_err(
                LABELS_FILE,
                line_no,
                format!("label {v} is outside {{-1, 0, 1}}"),
            ));
        }
        labels.push(v as Label);
    }
    if labels.len() != meta.num_nodes {
        return Err(format_err(
            LABELS_FILE,
            0,
            format!("meta says {} labels, table has {}", meta.num_nodes, labels.len()),
        ));
    }
    Ok(labels)
}

fn read_meta(dir: &Path) -> Result<BundleMeta> {
    let text = std::fs::read_to_string(dir.join(META_FILE))?;
    let meta: BundleMeta = serde_json::from_str(&text)
        .map_err(|e| format_err(META_FILE, e.line(), e.to_string()))?;
    if meta.version != BUNDLE_VERSION {
        return Err(format_err(
            META_FILE,
            0,
            format!("unsupported version {} (expected {BUNDLE_VERSION})", meta.version),
        ));
    }
    Ok(meta)
}

/// Loads and validates a bundle directory. Counts are checked against
/// the meta file, features against NaN and infinity, labels against the
/// {-1, 0, 1} alphabet, and the recorded content hash against the bytes
/// actually on disk.
pub fn load_bundle(dir: &Path) -> Result<GraphBundle> {
    let meta = read_meta(dir)?;

    let edge_bytes = std::fs::read(dir.join(EDGES_FILE))?;
    let feature_bytes = std::fs::read(dir.join(meta.feature_format.file_name()))?;
    let label_bytes = std::fs::read(dir.join(LABELS_FILE))?;

    let live_hash = hash_tables(&edge_bytes, &feature_bytes, &label_bytes);
    if live_hash != meta.content_hash {
        return Err(format_err(
            META_FILE,
            0,
            "content hash does not match the tables on disk; regenerate the bundle \
             or update meta.json",
        ));
    }

    let edge_text = String::from_utf8(edge_bytes)
        .map_err(|e| format_err(EDGES_FILE, 0, format!("not UTF-8: {e}")))?;
    let edges = parse_edges(&edge_text, &meta)?;

    let features = match meta.feature_format {
        FeatureFormat::Csv => {
            let text = String::from_utf8(feature_bytes)
                .map_err(|e| format_err(FEATURES_CSV_FILE, 0, format!("not UTF-8: {e}")))?;
            parse_features_csv(&text, &meta)?
        }
        FeatureFormat::Bin => parse_features_bin(&feature_bytes, &meta)?,
    };

    let label_text = String::from_utf8(label_bytes)
        .map_err(|e| format_err(LABELS_FILE, 0, format!("not UTF-8: {e}")))?;
    let labels = parse_labels(&label_text, &meta)?;

    let graph = SparseGraph::from_edges(meta.num_nodes, &edges, false)?;

    Ok(GraphBundle {
        dir: dir.to_path_buf(),
        meta,
        graph,
        features,
        labels,
    })
}

// ---------------------------------------------------------------------
// Sidecar files
// ---------------------------------------------------------------------

/// Saves splits next to the tables as a JSON list.
pub fn save_splits(dir: &Path, splits: &[SplitSpec]) -> Result<()> {
    let mut json = serde_json::to_string_pretty(splits)?;
    json.push('\n');
    std::fs::write(dir.join(SPLITS_FILE), json)?;
    Ok(())
}

/// Loads saved splits; `None` when the bundle has none.
pub fn load_splits(dir: &Path) -> Result<Option<Vec<SplitSpec>>> {
    let path = dir.join(SPLITS_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path)?;
    let splits: Vec<SplitSpec> = serde_json::from_str(&text)
        .map_err(|e| format_err(SPLITS_FILE, e.line(), e.to_string()))?;
    Ok(Some(splits))
}

/// Writes the subgraph cache sidecar.
pub fn save_rq_cache(dir: &Path, cache: &RqCache) -> Result<()> {
    let mut json = serde_json::to_string(cache)?;
    json.push('\n');
    std::fs::write(dir.join(RQ_CACHE_FILE), json)?;
    Ok(())
}

/// Reads the subgraph cache sidecar without checking validity; `None`
/// when absent.
pub fn load_rq_cache(dir: &Path) -> Result<Option<RqCache>> {
    let path = dir.join(RQ_CACHE_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path)?;
    let cache: RqCache = serde_json::from_str(&text)
        .map_err(|e| format_err(RQ_CACHE_FILE, e.line(), e.to_string()))?;
    Ok(Some(cache))
}

impl GraphBundle {
    /// Returns cached subgraphs only when the cache was computed from
    /// these exact table bytes with this sampler configuration and
    /// feature preprocessing; anything else reads as a miss.
    pub fn cached_subgraphs(
        &self,
        sampler: &SamplerConfig,
        standardized: bool,
    ) -> Result<Option<Vec<RqSubgraph>>> {
        let Some(cache) = load_rq_cache(&self.dir)? else {
            return Ok(None);
        };
        let valid = cache.content_hash == self.meta.content_hash
            && cache.sampler == *sampler
            && cache.standardized == standardized
            && cache.subgraphs.len() == self.meta.num_nodes;
        Ok(valid.then_some(cache.subgraphs))
    }

    /// Stores subgraphs as the cache for the current table bytes.
    pub fn store_subgraphs(
        &self,
        sampler: &SamplerConfig,
        standardized: bool,
        subgraphs: Vec<RqSubgraph>,
    ) -> Result<()> {
        save_rq_cache(
            &self.dir,
            &RqCache {
                content_hash: self.meta.content_hash.clone(),
                sampler: sampler.clone(),
                standardized,
                subgraphs,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::sample_all;
    use tempfile::TempDir;

    fn tiny() -> (SparseGraph, Mat<Real>, Vec<Label>) {
        let graph = SparseGraph::from_edges(4, &[(0, 1), (1, 2), (2, 3), (0, 2)], false).unwrap();
        let features = Mat::from_shape_vec(
            (4, 3),
            vec![
                0.5, -1.25, 3.0, 0.1, 0.2, 0.3, -0.75, 2.5, -0.125, 1e-3, -1e3, 0.0,
            ],
        )
        .unwrap();
        let labels = vec![1, 0, 0, -1];
        (graph, features, labels)
    }

    fn assert_bundle_err(result: Result<GraphBundle>, file: &str, needle: &str) {
        match result {
            Err(Error::BundleFormat { file: f, msg, .. }) => {
                assert_eq!(f, file);
                assert!(msg.contains(needle), "message `{msg}` lacks `{needle}`");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_preserves_tables_exactly() {
        let (graph, features, labels) = tiny();
        let dir = TempDir::new().unwrap();
        let meta = save_bundle(dir.path(), &graph, &features, &labels, FeatureFormat::Csv).unwrap();
        assert_eq!(meta.num_edges, 4);

        let bundle = load_bundle(dir.path()).unwrap();
        assert_eq!(bundle.features, features);
        assert_eq!(bundle.labels, labels);
        assert_eq!(
            bundle.graph.edges().collect::<Vec<_>>(),
            graph.edges().collect::<Vec<_>>()
        );

        let second = TempDir::new().unwrap();
        save_bundle(
            second.path(),
            &bundle.graph,
            &bundle.features,
            &bundle.labels,
            FeatureFormat::Csv,
        )
        .unwrap();
        for name in [META_FILE, EDGES_FILE, FEATURES_CSV_FILE, LABELS_FILE] {
            let a = std::fs::read(dir.path().join(name)).unwrap();
            let b = std::fs::read(second.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs after round trip");
        }
    }

    #[test]
    fn binary_features_round_trip_at_f32() {
        let (graph, features, labels) = tiny();
        let narrowed = features.mapv(|v| v as f32 as f64);
        let dir = TempDir::new().unwrap();
        save_bundle(dir.path(), &graph, &narrowed, &labels, FeatureFormat::Bin).unwrap();
        let bundle = load_bundle(dir.path()).unwrap();
        assert_eq!(bundle.features, narrowed);
        assert_eq!(bundle.meta.feature_format, FeatureFormat::Bin);
    }

    #[test]
    fn tampered_counts_and_tables_are_rejected() {
        let (graph, features, labels) = tiny();
        let dir = TempDir::new().unwrap();
        save_bundle(dir.path(), &graph, &features, &labels, FeatureFormat::Csv).unwrap();

        // Flipping a table byte breaks the recorded hash.
        let feat_path = dir.path().join(FEATURES_CSV_FILE);
        let mut text = std::fs::read_to_string(&feat_path).unwrap();
        text = text.replacen("0.5", "0.6", 1);
        std::fs::write(&feat_path, text).unwrap();
        assert_bundle_err(load_bundle(dir.path()), META_FILE, "content hash");

        // A consistent hash with an inconsistent count still fails.
        save_bundle(dir.path(), &graph, &features, &labels, FeatureFormat::Csv).unwrap();
        let meta_path = dir.path().join(META_FILE);
        let meta_text = std::fs::read_to_string(&meta_path).unwrap();
        let mut meta: BundleMeta = serde_json::from_str(&meta_text).unwrap();
        meta.num_edges = 7;
        let edge_bytes = std::fs::read(dir.path().join(EDGES_FILE)).unwrap();
        let feature_bytes = std::fs::read(dir.path().join(FEATURES_CSV_FILE)).unwrap();
        let label_bytes = std::fs::read(dir.path().join(LABELS_FILE)).unwrap();
        meta.content_hash = hash_tables(&edge_bytes, &feature_bytes, &label_bytes);
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).unwrap()).unwrap();
        assert_bundle_err(load_bundle(dir.path()), EDGES_FILE, "meta says 7 edges");
    }

    fn rewrite_table(dir: &Path, file: &str, edit: impl FnOnce(String) -> String) {
        let path = dir.join(file);
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, edit(text)).unwrap();

        let meta_path = dir.join(META_FILE);
        let mut meta: BundleMeta =
            serde_json::from_str(&std::fs::read_to_string(&meta_path).unwrap()).unwrap();
        let edge_bytes = std::fs::read(dir.join(EDGES_FILE)).unwrap();
        let feature_bytes = std::fs::read(dir.join(meta.feature_format.file_name())).unwrap();
        let label_bytes = std::fs::read(dir.join(LABELS_FILE)).unwrap();
        meta.content_hash = hash_tables(&edge_bytes, &feature_bytes, &label_bytes);
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).unwrap()).unwrap();
    }

    #[test]
    fn malformed_rows_are_reported_with_file_and_line() {
        let (graph, features, labels) = tiny();

        let dir = TempDir::new().unwrap();
        save_bundle(dir.path(), &graph, &features, &labels, FeatureFormat::Csv).unwrap();
        rewrite_table(dir.path(), FEATURES_CSV_FILE, |t| {
            t.replacen("0.1", "NaN", 1)
        });
        match load_bundle(dir.path()) {
            Err(Error::BundleFormat { file, line, msg }) => {
                assert_eq!(file, FEATURES_CSV_FILE);
                assert_eq!(line, 2);
                assert!(msg.contains("non-finite"), "{msg}");
            }
            other => panic!("expected NaN rejection, got {other:?}"),
        }

        let dir = TempDir::new().unwrap();
        save_bundle(dir.path(), &graph, &features, &labels, FeatureFormat::Csv).unwrap();
        rewrite_table(dir.path(), EDGES_FILE, |t| t.replacen("0,1", "0;1", 1));
        assert_bundle_err(load_bundle(dir.path()), EDGES_FILE, "comma-separated");

        let dir = TempDir::new().unwrap();
        save_bundle(dir.path(), &graph, &features, &labels, FeatureFormat::Csv).unwrap();
        rewrite_table(dir.path(), EDGES_FILE, |t| t.replacen("0,1", "2,2", 1));
        assert_bundle_err(load_bundle(dir.path()), EDGES_FILE, "self-loop");

        let dir = TempDir::new().unwrap();
        save_bundle(dir.path(), &graph, &features, &labels, FeatureFormat::Csv).unwrap();
        rewrite_table(dir.path(), LABELS_FILE, |t| t.replacen("-1", "7", 1));
        assert_bundle_err(load_bundle(dir.path()), LABELS_FILE, "outside");
    }

    #[test]
    fn save_rejects_bad_inputs() {
        let (graph, mut features, mut labels) = tiny();
        let dir = TempDir::new().unwrap();

        labels[2] = 5;
        assert!(matches!(
            save_bundle(dir.path(), &graph, &features, &labels, FeatureFormat::Csv),
            Err(Error::BadLabel { node: 2, value: 5 })
        ));
        labels[2] = 0;

        features[[1, 1]] = f64::NAN;
        assert!(save_bundle(dir.path(), &graph, &features, &labels, FeatureFormat::Csv).is_err());
    }

    #[test]
    fn rq_cache_hits_only_on_exact_provenance() {
        let (graph, features, labels) = tiny();
        let dir = TempDir::new().unwrap();
        save_bundle(dir.path(), &graph, &features, &labels, FeatureFormat::Csv).unwrap();
        let bundle = load_bundle(dir.path()).unwrap();

        let sampler = SamplerConfig::default();
        assert!(bundle.cached_subgraphs(&sampler, true).unwrap().is_none());

        let subs = sample_all(&bundle.graph, &bundle.features, &sampler);
        bundle
            .store_subgraphs(&sampler, true, subs.clone())
            .unwrap();
        let hit = bundle.cached_subgraphs(&sampler, true).unwrap().unwrap();
        assert_eq!(hit, subs);

        // Different sampler settings or preprocessing miss.
        let other = SamplerConfig {
            hop_limit: 1,
            ..SamplerConfig::default()
        };
        assert!(bundle.cached_subgraphs(&other, true).unwrap().is_none());
        assert!(bundle.cached_subgraphs(&sampler, false).unwrap().is_none());

        // Changing the data invalidates the cache via the hash.
        let mut altered = features.clone();
        altered[[0, 0]] = 9.0;
        save_bundle(dir.path(), &graph, &altered, &labels, FeatureFormat::Csv).unwrap();
        let reloaded = load_bundle(dir.path()).unwrap();
        assert!(reloaded.cached_subgraphs(&sampler, true).unwrap().is_none());
    }

    #[test]
    fn splits_sidecar_round_trips() {
        let (graph, features, labels) = tiny();
        let dir = TempDir::new().unwrap();
        save_bundle(dir.path(), &graph, &features, &labels, FeatureFormat::Csv).unwrap();
        assert!(load_splits(dir.path()).unwrap().is_none());

        let splits = vec![SplitSpec {
            seed: 3,
            train: vec![0, 1],
            val: vec![2],
            test: vec![3],
        }];
        save_splits(dir.path(), &splits).unwrap();
        assert_eq!(load_splits(dir.path()).unwrap().unwrap(), splits);
    }
}
