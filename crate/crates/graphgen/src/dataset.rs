//! Edge-list ingestion, induced-subgraph sampling and the training
//! manifest.
//!
//! The manifest is the unit of training input: for each sampled graph it
//! stores the graph, its DFS code and its precomputed feature values,
//! together with the token capacity (`max_nodes`, `max_sequence_length`)
//! derived from the whole set with 10% headroom. It is persisted as
//! line-delimited JSON records plus a sidecar summary, which keeps it
//! human-diffable and append-friendly.

use crate::dfs::{self, DfsCode};
use crate::graph::{compute_features, FeatureName, FeatureVector, Graph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("ingest error at line {line}: {reason}")]
    Ingest { line: usize, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("sampling exhausted: no valid subgraph within {attempts} attempts (sizes {size_min}..={size_max})")]
    SamplingExhausted { attempts: usize, size_min: usize, size_max: usize },
    #[error("invalid sampling bounds: size_min={size_min}, size_max={size_max}")]
    InvalidBounds { size_min: usize, size_max: usize },
    #[error("empty dataset: no usable graphs")]
    EmptyDataset,
    #[error("malformed manifest at record {record}: {reason}")]
    MalformedManifest { record: usize, reason: String },
}

/// Counters reported by `load_edge_list` for dropped input lines.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestStats {
    pub nodes: usize,
    pub edges: usize,
    pub self_loops_dropped: usize,
    pub duplicates_dropped: usize,
    pub comment_lines: usize,
}

/// Reads a whitespace-separated "u v" edge list ('#' lines are comments)
/// into an undirected simple graph. Node ids are compacted to 0..n-1 in
/// first-appearance order; self-loops and duplicate (or reverse-duplicate)
/// edges are dropped and counted.
pub fn load_edge_list(path: &Path) -> Result<(Graph, IngestStats), DatasetError> {
    let file = std::fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut stats = IngestStats::default();
    let mut ids: HashMap<u64, usize> = HashMap::new();
    let mut order = 0usize;
    let mut edges: Vec<(usize, usize)> = Vec::new();
    let mut seen: std::collections::HashSet<(usize, usize)> = std::collections::HashSet::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with('#') {
            stats.comment_lines += 1;
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let parse = |f: Option<&str>| -> Result<u64, DatasetError> {
            f.ok_or(())
                .and_then(|s| s.parse::<u64>().map_err(|_| ()))
                .map_err(|_| DatasetError::Ingest {
                    line: lineno + 1,
                    reason: format!("expected \"u v\" integer pair, got {trimmed:?}"),
                })
        };
        let u = parse(fields.next())?;
        let v = parse(fields.next())?;
        if fields.next().is_some() {
            return Err(DatasetError::Ingest {
                line: lineno + 1,
                reason: format!("trailing fields in {trimmed:?}"),
            });
        }
        let mut intern = |raw: u64| -> usize {
            *ids.entry(raw).or_insert_with(|| {
                let id = order;
                order += 1;
                id
            })
        };
        let (a, b) = (intern(u), intern(v));
        if a == b {
            stats.self_loops_dropped += 1;
            continue;
        }
        let key = (a.min(b), a.max(b));
        if !seen.insert(key) {
            stats.duplicates_dropped += 1;
            continue;
        }
        edges.push(key);
    }
    stats.nodes = order;
    stats.edges = edges.len();
    let graph = Graph::new(order, edges).expect("deduplicated edges are valid");
    Ok((graph, stats))
}

/// Attempts per requested subgraph before `sample_induced_subgraphs` gives
/// up.
pub const SAMPLE_RETRY_BUDGET: usize = 100;

/// Samples `count` connected induced subgraphs by random-walk node
/// collection: walk from a uniform start until a target size (uniform in
/// [size_min, size_max]) is collected, then induce all edges among the
/// collected nodes. Deterministic given the seed.
pub fn sample_induced_subgraphs(
    g: &Graph,
    count: usize,
    size_min: usize,
    size_max: usize,
    seed: u64,
) -> Result<Vec<Graph>, DatasetError> {
    if size_min < 2 || size_min > size_max {
        return Err(DatasetError::InvalidBounds { size_min, size_max });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adj = g.adjacency();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut found = None;
        for _attempt in 0..SAMPLE_RETRY_BUDGET {
            let target = rng.gen_range(size_min..=size_max);
            if let Some(nodes) = collect_walk(g, &adj, target, &mut rng) {
                found = Some(g.induced_subgraph(&nodes));
                break;
            }
        }
        match found {
            Some(sub) => out.push(sub),
            None => {
                return Err(DatasetError::SamplingExhausted {
                    attempts: SAMPLE_RETRY_BUDGET,
                    size_min,
                    size_max,
                })
            }
        }
    }
    Ok(out)
}

/// One random walk collecting `target` distinct nodes; the induced subgraph
/// of walk-visited nodes is connected by construction.
fn collect_walk(
    g: &Graph,
    adj: &[Vec<usize>],
    target: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<usize>> {
    if g.node_count() == 0 {
        return None;
    }
    let start = rng.gen_range(0..g.node_count());
    if adj[start].is_empty() {
        return None;
    }
    let mut collected = vec![start];
    let mut in_set = std::collections::HashSet::from([start]);
    let mut current = start;
    let step_budget = 200 * target;
    for _ in 0..step_budget {
        if collected.len() == target {
            return Some(collected);
        }
        let nbrs = &adj[current];
        current = nbrs[rng.gen_range(0..nbrs.len())];
        if in_set.insert(current) {
            collected.push(current);
        }
    }
    (collected.len() == target).then_some(collected)
}

/// One training example: the graph, its DFS code and its feature values.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub graph: Graph,
    pub code: DfsCode,
    pub features: FeatureVector,
}

/// The persisted training set plus the token capacity derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub feature_order: Vec<FeatureName>,
    pub max_nodes: usize,
    pub max_sequence_length: usize,
}

/// Graphs skipped while building a manifest, with the reason.
#[derive(Debug, Clone, Default, Serialize)]
pub struct BuildReport {
    pub requested: usize,
    pub kept: usize,
    pub skipped_not_encodable: usize,
    pub skipped_metric: usize,
}

/// Encodes and scores a set of graphs. Graphs that are not encodable or
/// fail a metric precondition are skipped and counted. Token capacity gets
/// 10% headroom over the observed maxima. Per-record work runs in parallel;
/// record order follows the input order.
pub fn build_manifest(
    graphs: &[Graph],
    feature_order: &[FeatureName],
) -> Result<(DatasetManifest, BuildReport), DatasetError> {
    use rayon::prelude::*;
    let mut report = BuildReport { requested: graphs.len(), ..Default::default() };
    let encoded: Vec<Result<ManifestRecord, bool>> = graphs
        .par_iter()
        .map(|graph| {
            let code = dfs::encode(graph).map_err(|_| false)?;
            let features = compute_features(graph, feature_order).map_err(|_| true)?;
            Ok(ManifestRecord { graph: graph.clone(), code, features })
        })
        .collect();
    let mut records = Vec::with_capacity(graphs.len());
    for item in encoded {
        match item {
            Ok(r) => records.push(r),
            Err(false) => report.skipped_not_encodable += 1,
            Err(true) => report.skipped_metric += 1,
        }
    }
    if records.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    report.kept = records.len();
    let max_n = records.iter().map(|r| r.graph.node_count()).max().unwrap();
    let max_len = records.iter().map(|r| r.code.len() + 1).max().unwrap();
    let manifest = DatasetManifest {
        records,
        feature_order: feature_order.to_vec(),
        max_nodes: headroom(max_n),
        max_sequence_length: headroom(max_len),
    };
    Ok((manifest, report))
}

fn headroom(x: usize) -> usize {
    x + (x + 9) / 10
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    code: String,
    features: Vec<(FeatureName, f64)>,
}

/// Sidecar summary written next to the manifest.
#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestSummary {
    pub records: usize,
    pub max_nodes: usize,
    pub max_sequence_length: usize,
    pub feature_order: Vec<FeatureName>,
}

impl DatasetManifest {
    /// Writes the manifest as line-delimited JSON records and a
    /// `<path>.summary.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let io_err = |source| DatasetError::Io { path: path.display().to_string(), source };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        for r in &self.records {
            let line = RecordLine {
                node_count: r.graph.node_count(),
                edges: r.graph.edges().to_vec(),
                code: r.code.to_string().replace('\n', ";"),
                features: r.features.entries().to_vec(),
            };
            serde_json::to_writer(&mut out, &line).map_err(|e| DatasetError::Io {
                path: path.display().to_string(),
                source: std::io::Error::other(e),
            })?;
            out.write_all(b"\n").map_err(io_err)?;
        }
        out.flush().map_err(io_err)?;
        let summary = ManifestSummary {
            records: self.records.len(),
            max_nodes: self.max_nodes,
            max_sequence_length: self.max_sequence_length,
            feature_order: self.feature_order.clone(),
        };
        let spath = summary_path(path);
        std::fs::write(&spath, serde_json::to_string_pretty(&summary).unwrap()).map_err(
            |source| DatasetError::Io { path: spath.display().to_string(), source },
        )?;
        Ok(())
    }

    /// Reads a manifest written by `save`.
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let io_err = |source| DatasetError::Io { path: path.display().to_string(), source };
        let file = std::fs::File::open(path).map_err(io_err)?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: RecordLine =
                serde_json::from_str(&line).map_err(|e| DatasetError::MalformedManifest {
                    record: i,
                    reason: e.to_string(),
                })?;
            let graph = Graph::new(parsed.node_count, parsed.edges).map_err(|e| {
                DatasetError::MalformedManifest { record: i, reason: e.to_string() }
            })?;
            let code = DfsCode::parse_text(&parsed.code.replace(';', "\n")).map_err(|e| {
                DatasetError::MalformedManifest { record: i, reason: e.to_string() }
            })?;
            records.push(ManifestRecord {
                graph,
                code,
                features: FeatureVector::new(parsed.features),
            });
        }
        if records.is_empty() {
            return Err(DatasetError::EmptyDataset);
        }
        let spath = summary_path(path);
        let summary: ManifestSummary = serde_json::from_str(
            &std::fs::read_to_string(&spath).map_err(|source| DatasetError::Io {
                path: spath.display().to_string(),
                source,
            })?,
        )
        .map_err(|e| DatasetError::MalformedManifest { record: 0, reason: e.to_string() })?;
        Ok(DatasetManifest {
            records,
            feature_order: summary.feature_order,
            max_nodes: summary.max_nodes,
            max_sequence_length: summary.max_sequence_length,
        })
    }

    /// Checks that every record's code decodes to a graph matching the
    /// stored one and that features match a recomputation.
    pub fn verify(&self) -> Result<(), DatasetError> {
        for (i, r) in self.records.iter().enumerate() {
            let decoded = dfs::decode(&r.code).map_err(|e| DatasetError::MalformedManifest {
                record: i,
                reason: e.to_string(),
            })?;
            let same = decoded.node_count() == r.graph.node_count()
                && decoded.edge_count() == r.graph.edge_count();
            if !same {
                return Err(DatasetError::MalformedManifest {
                    record: i,
                    reason: "code does not decode to the stored graph".to_string(),
                });
            }
            let expect = compute_features(&r.graph, &self.feature_order).map_err(|e| {
                DatasetError::MalformedManifest { record: i, reason: e.to_string() }
            })?;
            if expect != r.features {
                return Err(DatasetError::MalformedManifest {
                    record: i,
                    reason: "stored features do not match recomputation".to_string(),
                });
            }
        }
        Ok(())
    }
}

pub fn summary_path(manifest_path: &Path) -> std::path::PathBuf {
    let mut s = manifest_path.as_os_str().to_os_string();
    s.push(".summary.json");
    std::path::PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_simple_path() {
        let f = write_tmp("0 1\n1 2\n");
        let (g, stats) = load_edge_list(f.path()).unwrap();
        assert_eq!(g.node_count(), 3);
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
        assert_eq!(stats.edges, 2);
    }

    #[test]
    fn load_drops_duplicates_and_self_loops() {
        let f = write_tmp("0 1\n1 0\n1 1\n");
        let (g, stats) = load_edge_list(f.path()).unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
        assert_eq!(stats.duplicates_dropped, 1);
        assert_eq!(stats.self_loops_dropped, 1);
    }

    #[test]
    fn load_reports_bad_line() {
        let f = write_tmp("a b\n");
        match load_edge_list(f.path()) {
            Err(DatasetError::Ingest { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected ingest error, got {other:?}"),
        }
    }

    #[test]
    fn load_compacts_ids_in_first_appearance_order() {
        let f = write_tmp("# comment\n100 7\n7 42\n");
        let (g, stats) = load_edge_list(f.path()).unwrap();
        // 100 -> 0, 7 -> 1, 42 -> 2
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
        assert_eq!(stats.comment_lines, 1);
    }

    #[test]
    fn sample_zero_count_is_empty() {
        let g = Graph::new(3, [(0, 1), (1, 2), (2, 0)]).unwrap();
        assert!(sample_induced_subgraphs(&g, 0, 2, 3, 1).unwrap().is_empty());
    }

    #[test]
    fn sample_triangle_only_choice() {
        let g = Graph::new(3, [(0, 1), (1, 2), (2, 0)]).unwrap();
        let subs = sample_induced_subgraphs(&g, 4, 3, 3, 9).unwrap();
        assert_eq!(subs.len(), 4);
        for s in subs {
            assert_eq!(s.node_count(), 3);
            assert_eq!(s.edge_count(), 3);
        }
    }

    #[test]
    fn sample_sizes_within_bounds_and_connected() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        let g = crate::dfs::tests::random_connected_graph(&mut rng, 40, 0.08);
        let subs = sample_induced_subgraphs(&g, 50, 4, 9, 123).unwrap();
        assert_eq!(subs.len(), 50);
        for s in &subs {
            assert!((4..=9).contains(&s.node_count()));
            assert!(s.is_connected());
        }
    }

    #[test]
    fn sample_is_deterministic() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(6);
        let g = crate::dfs::tests::random_connected_graph(&mut rng, 30, 0.1);
        let a = sample_induced_subgraphs(&g, 10, 3, 6, 77).unwrap();
        let b = sample_induced_subgraphs(&g, 10, 3, 6, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_exhausts_on_impossible_size() {
        let g = Graph::new(2, [(0, 1)]).unwrap();
        assert!(matches!(
            sample_induced_subgraphs(&g, 1, 5, 5, 3),
            Err(DatasetError::SamplingExhausted { .. })
        ));
    }

    #[test]
    fn build_manifest_triangle() {
        let g = Graph::new(3, [(0, 1), (1, 2), (2, 0)]).unwrap();
        let (m, report) = build_manifest(&[g], &[FeatureName::Aspl]).unwrap();
        assert_eq!(report.kept, 1);
        assert_eq!(m.records[0].features.entries(), &[(FeatureName::Aspl, 1.0)]);
        // 3 nodes and 4 token steps, each with 10% headroom
        assert_eq!(m.max_nodes, 4);
        assert_eq!(m.max_sequence_length, 5);
    }

    #[test]
    fn build_manifest_path_features() {
        let g = Graph::new(3, [(0, 1), (1, 2)]).unwrap();
        let (m, _) = build_manifest(&[g], &[FeatureName::Aspl]).unwrap();
        assert_eq!(m.records[0].features.entries(), &[(FeatureName::Aspl, 4.0 / 3.0)]);
    }

    #[test]
    fn build_manifest_empty_is_error() {
        assert!(matches!(
            build_manifest(&[], &[FeatureName::Aspl]),
            Err(DatasetError::EmptyDataset)
        ));
        // all-skipped also errors
        let disconnected = Graph::new(4, [(0, 1), (2, 3)]).unwrap();
        assert!(matches!(
            build_manifest(&[disconnected], &[FeatureName::Aspl]),
            Err(DatasetError::EmptyDataset)
        ));
    }

    #[test]
    fn manifest_round_trips_and_verifies() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(8);
        let graphs: Vec<Graph> = (0..6)
            .map(|_| crate::dfs::tests::random_connected_graph(&mut rng, 7, 0.3))
            .collect();
        let (m, _) = build_manifest(&graphs, &[FeatureName::Aspl]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        m.save(&path).unwrap();
        let loaded = DatasetManifest::load(&path).unwrap();
        assert_eq!(loaded, m);
        loaded.verify().unwrap();
    }

    #[test]
    fn manifest_save_is_byte_identical() {
        let g = Graph::new(4, [(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
        let (m, _) = build_manifest(&[g], &[FeatureName::Aspl]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        m.save(&p1).unwrap();
        m.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
