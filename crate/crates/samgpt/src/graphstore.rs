//! Per-domain graph datasets: loading, validation, structural statistics,
//! and ego-network extraction.
//!
//! A bundle directory holds one domain:
//!   meta.json      — domain_name, num_nodes, feature_dim, num_classes
//!   edges.tsv      — one undirected edge per line, two 0-based indices
//!   features.tsv   — num_nodes lines of feature_dim tab-separated floats
//!   labels.tsv     — one class index per line
//!
//! Adjacency is stored CSR-style with sorted neighbor lists, no self-loops,
//! and no duplicates; the symmetric (undirected) invariant is maintained by
//! construction.

use std::collections::VecDeque;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample as index_sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::derive_rng;
use crate::tensor::Tensor;

// ===== bundle =====

/// One domain's graph: undirected simple adjacency, node features, labels.
#[derive(Clone, Debug)]
pub struct GraphBundle {
    pub domain_name: String,
    num_nodes: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    domain_name: String,
    num_nodes: usize,
    feature_dim: usize,
    num_classes: usize,
}

impl GraphBundle {
    /// Builds a bundle from an undirected edge list. Self-loops are dropped
    /// and duplicate edges (in either orientation) are merged; out-of-range
    /// endpoints and labels are errors.
    pub fn from_edges(
        domain_name: impl Into<String>,
        num_nodes: usize,
        edges: &[(usize, usize)],
        features: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::EmptyGraph);
        }
        if features.rows() != num_nodes {
            return Err(Error::Format(format!(
                "feature matrix has {} rows for {} nodes",
                features.rows(),
                num_nodes
            )));
        }
        if labels.len() != num_nodes {
            return Err(Error::Format(format!(
                "{} labels for {} nodes",
                labels.len(),
                num_nodes
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Format(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
        for &(u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::Format(format!(
                    "edge ({u}, {v}) out of range for {num_nodes} nodes"
                )));
            }
            if u == v {
                continue;
            }
            pairs.push((u.min(v), u.max(v)));
        }
        pairs.sort_unstable();
        pairs.dedup();

        let mut indptr = vec![0usize; num_nodes + 1];
        for &(u, v) in &pairs {
            indptr[u + 1] += 1;
            indptr[v + 1] += 1;
        }
        for i in 0..num_nodes {
            indptr[i + 1] += indptr[i];
        }
        let mut indices = vec![0usize; pairs.len() * 2];
        let mut next = indptr.clone();
        for &(u, v) in &pairs {
            indices[next[u]] = v;
            next[u] += 1;
            indices[next[v]] = u;
            next[v] += 1;
        }
        for v in 0..num_nodes {
            indices[indptr[v]..indptr[v + 1]].sort_unstable();
        }
        Ok(GraphBundle {
            domain_name: domain_name.into(),
            num_nodes,
            indptr,
            indices,
            features,
            labels,
            num_classes,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.indices[self.indptr[v]..self.indptr[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.indptr[v + 1] - self.indptr[v]
    }

    /// Directed edge count (each undirected edge counted twice).
    pub fn directed_edge_count(&self) -> usize {
        self.indices.len()
    }

    pub fn undirected_edge_count(&self) -> usize {
        self.indices.len() / 2
    }

    pub fn contains_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Undirected edges as (u, v) with u < v, sorted.
    pub fn undirected_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.undirected_edge_count());
        for u in 0..self.num_nodes {
            for &v in self.neighbors(u) {
                if u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }

    /// Swaps in a different feature matrix (used after dimension alignment).
    pub fn with_features(&self, features: Tensor) -> GraphBundle {
        assert_eq!(features.rows(), self.num_nodes, "feature row count mismatch");
        GraphBundle {
            features,
            ..self.clone()
        }
    }

    /// Swaps in a different labeling; the class count is recomputed.
    pub fn with_labels(&self, labels: Vec<usize>) -> GraphBundle {
        assert_eq!(labels.len(), self.num_nodes, "label count mismatch");
        let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
        GraphBundle {
            labels,
            num_classes,
            ..self.clone()
        }
    }
}

// ===== statistics =====

/// Structural summary of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainStats {
    pub num_nodes: usize,
    /// Directed count: 2× the number of undirected edges.
    pub num_edges: usize,
    pub avg_node_degree: f64,
    /// BFS-sampled estimate over finite distances between distinct nodes.
    pub avg_shortest_path_length: f64,
    /// Mean local clustering coefficient; degree-<2 nodes contribute 0.
    pub avg_clustering_coefficient: f64,
}

/// Degree and clustering are exact; average shortest-path length is
/// estimated by BFS from `spl_sample_size` sources drawn without replacement
/// using `seed` (all nodes when the sample covers the graph), averaging
/// finite distances only and excluding self-pairs.
pub fn compute_stats(g: &GraphBundle, spl_sample_size: usize, seed: u64) -> Result<DomainStats> {
    if g.num_nodes == 0 {
        return Err(Error::EmptyGraph);
    }
    assert!(spl_sample_size >= 1, "spl_sample_size must be at least 1");
    let n = g.num_nodes;
    let avg_node_degree = g.directed_edge_count() as f64 / n as f64;

    let mut cc_sum = 0.0;
    for v in 0..n {
        let nbrs = g.neighbors(v);
        let d = nbrs.len();
        if d < 2 {
            continue;
        }
        let mut links = 0usize;
        for i in 0..d {
            for j in (i + 1)..d {
                if g.contains_edge(nbrs[i], nbrs[j]) {
                    links += 1;
                }
            }
        }
        cc_sum += 2.0 * links as f64 / (d * (d - 1)) as f64;
    }
    let avg_clustering_coefficient = cc_sum / n as f64;

    let sources: Vec<usize> = if spl_sample_size >= n {
        (0..n).collect()
    } else {
        let mut rng = derive_rng(seed, &[0x5bf5]);
        let mut picked = index_sample(&mut rng, n, spl_sample_size).into_vec();
        picked.sort_unstable();
        picked
    };
    let mut dist_sum = 0.0f64;
    let mut dist_count = 0u64;
    let mut dist = vec![usize::MAX; n];
    for &s in &sources {
        dist.fill(usize::MAX);
        dist[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &w in g.neighbors(u) {
                if dist[w] == usize::MAX {
                    dist[w] = dist[u] + 1;
                    queue.push_back(w);
                }
            }
        }
        for (t, &d) in dist.iter().enumerate() {
            if t != s && d != usize::MAX {
                dist_sum += d as f64;
                dist_count += 1;
            }
        }
    }
    let avg_shortest_path_length = if dist_count == 0 {
        0.0
    } else {
        dist_sum / dist_count as f64
    };

    Ok(DomainStats {
        num_nodes: n,
        num_edges: g.directed_edge_count(),
        avg_node_degree,
        avg_shortest_path_length,
        avg_clustering_coefficient,
    })
}

// ===== ego networks =====

/// Induced subgraph on all nodes within `radius` hops of `center`, in BFS
/// order so node 0 of the result is the center. The instance label of the
/// resulting graph is its center's label, i.e. `labels[0]`.
pub fn ego_network(g: &GraphBundle, center: usize, radius: usize) -> GraphBundle {
    assert!(center < g.num_nodes, "center {center} out of range");
    assert!(radius >= 1, "radius must be at least 1");
    let mut hop = vec![usize::MAX; g.num_nodes];
    hop[center] = 0;
    let mut order = vec![center];
    let mut queue = VecDeque::from([center]);
    while let Some(u) = queue.pop_front() {
        if hop[u] == radius {
            continue;
        }
        for &w in g.neighbors(u) {
            if hop[w] == usize::MAX {
                hop[w] = hop[u] + 1;
                order.push(w);
                queue.push_back(w);
            }
        }
    }
    induced_subgraph(g, &order)
}

/// Induced subgraph on `keep` (order defines the new node ids).
pub fn induced_subgraph(g: &GraphBundle, keep: &[usize]) -> GraphBundle {
    let mut rank = vec![usize::MAX; g.num_nodes];
    for (new_id, &old) in keep.iter().enumerate() {
        rank[old] = new_id;
    }
    let mut edges = Vec::new();
    for (new_u, &old_u) in keep.iter().enumerate() {
        for &old_v in g.neighbors(old_u) {
            let new_v = rank[old_v];
            if new_v != usize::MAX && new_u < new_v {
                edges.push((new_u, new_v));
            }
        }
    }
    let mut feat = Tensor::zeros(keep.len(), g.feature_dim());
    for (new_id, &old) in keep.iter().enumerate() {
        feat.data_mut()[new_id * g.feature_dim()..(new_id + 1) * g.feature_dim()]
            .copy_from_slice(g.features.row(old));
    }
    let labels = keep.iter().map(|&old| g.labels[old]).collect();
    GraphBundle::from_edges(
        g.domain_name.clone(),
        keep.len(),
        &edges,
        feat,
        labels,
        g.num_classes,
    )
    .expect("induced subgraph of a valid bundle is valid")
}

// ===== bundle I/O =====

pub fn save_bundle(dir: impl AsRef<Path>, g: &GraphBundle) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = BundleMeta {
        domain_name: g.domain_name.clone(),
        num_nodes: g.num_nodes,
        feature_dim: g.feature_dim(),
        num_classes: g.num_classes,
    };
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Format(format!("meta serialization: {e}")))?;
    fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))?;

    let edges_path = dir.join("edges.tsv");
    let mut w = BufWriter::new(fs::File::create(&edges_path).map_err(|e| Error::io(&edges_path, e))?);
    for (u, v) in g.undirected_pairs() {
        writeln!(w, "{u}\t{v}").map_err(|e| Error::io(&edges_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&edges_path, e))?;

    let feat_path = dir.join("features.tsv");
    let mut w = BufWriter::new(fs::File::create(&feat_path).map_err(|e| Error::io(&feat_path, e))?);
    for i in 0..g.num_nodes {
        let row = g.features.row(i);
        let mut line = String::with_capacity(row.len() * 8);
        for (j, x) in row.iter().enumerate() {
            if j > 0 {
                line.push('\t');
            }
            // Display for f64 is the shortest representation that parses
            // back to the same value, so save→load is exact
            line.push_str(&x.to_string());
        }
        writeln!(w, "{line}").map_err(|e| Error::io(&feat_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&feat_path, e))?;

    let labels_path = dir.join("labels.tsv");
    let mut w =
        BufWriter::new(fs::File::create(&labels_path).map_err(|e| Error::io(&labels_path, e))?);
    for y in &g.labels {
        writeln!(w, "{y}").map_err(|e| Error::io(&labels_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&labels_path, e))
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<GraphBundle> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: BundleMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::parse(&meta_path, e.line(), e.to_string()))?;

    let edges = read_edges(&dir.join("edges.tsv"))?;
    let features = read_features(&dir.join("features.tsv"), meta.num_nodes, meta.feature_dim)?;
    let labels = read_labels(&dir.join("labels.tsv"), meta.num_nodes)?;
    GraphBundle::from_edges(
        meta.domain_name,
        meta.num_nodes,
        &edges,
        features,
        labels,
        meta.num_classes,
    )
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = std::io::Result<String>>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file).lines())
}

fn read_edges(path: &Path) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (idx, line) in open_lines(path)?.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let parse = |tok: Option<&str>| -> Result<usize> {
            tok.ok_or_else(|| Error::parse(path, idx + 1, "expected two node indices"))?
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::parse(path, idx + 1, format!("bad node index: {e}")))
        };
        let u = parse(parts.next())?;
        let v = parse(parts.next())?;
        if parts.next().is_some() {
            return Err(Error::parse(path, idx + 1, "expected exactly two columns"));
        }
        edges.push((u, v));
    }
    Ok(edges)
}

fn read_features(path: &Path, num_nodes: usize, feature_dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(num_nodes * feature_dim);
    let mut rows = 0usize;
    for (idx, line) in open_lines(path)?.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows += 1;
        if rows > num_nodes {
            return Err(Error::parse(
                path,
                idx + 1,
                format!("more than {num_nodes} feature rows"),
            ));
        }
        let before = data.len();
        for tok in line.split('\t') {
            let x: f64 = tok
                .trim()
                .parse()
                .map_err(|e| Error::parse(path, idx + 1, format!("bad feature value: {e}")))?;
            data.push(x);
        }
        if data.len() - before != feature_dim {
            return Err(Error::parse(
                path,
                idx + 1,
                format!("expected {feature_dim} columns, found {}", data.len() - before),
            ));
        }
    }
    if rows != num_nodes {
        return Err(Error::parse(
            path,
            0,
            format!("expected {num_nodes} feature rows, found {rows}"),
        ));
    }
    Ok(Tensor::new(num_nodes, feature_dim, data))
}

fn read_labels(path: &Path, num_nodes: usize) -> Result<Vec<usize>> {
    let mut labels = Vec::with_capacity(num_nodes);
    for (idx, line) in open_lines(path)?.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let y: usize = line
            .trim()
            .parse()
            .map_err(|e| Error::parse(path, idx + 1, format!("bad label: {e}")))?;
        labels.push(y);
    }
    if labels.len() != num_nodes {
        return Err(Error::parse(
            path,
            0,
            format!("expected {num_nodes} labels, found {}", labels.len()),
        ));
    }
    Ok(labels)
}

// ===== generic-format conversion =====

/// Ingests a generic edge list (two indices per line, any of tab / comma /
/// whitespace separated), a comma-separated feature matrix, and a label file
/// into a validated bundle. Node count is inferred from the feature rows,
/// class count from the maximum label.
pub fn convert_generic(
    edge_list: &Path,
    features_csv: &Path,
    labels_path: &Path,
    domain_name: &str,
) -> Result<GraphBundle> {
    let mut features_rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in open_lines(features_csv)?.enumerate() {
        let line = line.map_err(|e| Error::io(features_csv, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|e| {
                    Error::parse(features_csv, idx + 1, format!("bad feature value: {e}"))
                })
            })
            .collect::<Result<_>>()?;
        if let Some(first) = features_rows.first() {
            if row.len() != first.len() {
                return Err(Error::parse(
                    features_csv,
                    idx + 1,
                    format!("ragged row: {} columns vs {}", row.len(), first.len()),
                ));
            }
        }
        features_rows.push(row);
    }
    if features_rows.is_empty() {
        return Err(Error::parse(features_csv, 0, "no feature rows"));
    }
    let num_nodes = features_rows.len();
    let features = Tensor::from_rows(&features_rows);

    let labels = read_labels(labels_path, num_nodes)?;
    let num_classes = labels.iter().max().copied().unwrap_or(0) + 1;

    let mut edges = Vec::new();
    for (idx, line) in open_lines(edge_list)?.enumerate() {
        let line = line.map_err(|e| Error::io(edge_list, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = trimmed
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .collect();
        if toks.len() != 2 {
            return Err(Error::parse(
                edge_list,
                idx + 1,
                format!("expected two node indices, found {}", toks.len()),
            ));
        }
        let u: usize = toks[0]
            .parse()
            .map_err(|e| Error::parse(edge_list, idx + 1, format!("bad node index: {e}")))?;
        let v: usize = toks[1]
            .parse()
            .map_err(|e| Error::parse(edge_list, idx + 1, format!("bad node index: {e}")))?;
        edges.push((u, v));
    }
    GraphBundle::from_edges(domain_name, num_nodes, &edges, features, labels, num_classes)
}

/// Labeled-node index lists per class, in ascending node order.
pub fn nodes_by_class(g: &GraphBundle) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); g.num_classes];
    for (v, &y) in g.labels.iter().enumerate() {
        by_class[y].push(v);
    }
    by_class
}

/// Convenience for tests and samplers: an Erdős–Rényi-style random simple
/// graph with the given number of nodes, edge probability, feature dim, and
/// class count.
pub fn random_bundle(
    name: &str,
    num_nodes: usize,
    edge_prob: f64,
    feature_dim: usize,
    num_classes: usize,
    seed: u64,
) -> GraphBundle {
    use rand::Rng;
    let mut rng = derive_rng(seed, &[0x9e0d]);
    let mut edges = Vec::new();
    for u in 0..num_nodes {
        for v in (u + 1)..num_nodes {
            if rng.gen::<f64>() < edge_prob {
                edges.push((u, v));
            }
        }
    }
    let features = Tensor::uniform(num_nodes, feature_dim, -1.0, 1.0, &mut rng);
    let labels = (0..num_nodes).map(|_| rng.gen_range(0..num_classes)).collect();
    GraphBundle::from_edges(name, num_nodes, &edges, features, labels, num_classes)
        .expect("random bundle construction")
}

// ===== tests =====
