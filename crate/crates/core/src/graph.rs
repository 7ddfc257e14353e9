//! Attributed graphs: storage, text I/O, adjacency normalization and a
//! planted-partition generator with cluster-correlated attributes.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{CsrMatrix, Mat, SparseOperand};
use crate::{Error, Result};

/// Undirected, unweighted graph with dense node attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributedGraph {
    adjacency: CsrMatrix,
    attributes: Mat,
    labels: Option<Vec<usize>>,
}

impl AttributedGraph {
    /// Builds a graph from an edge list. Self-loops are dropped and reversed or
    /// repeated edges are merged.
    pub fn new(
        n_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        attributes: Mat,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if attributes.nrows() != n_nodes {
            return Err(Error::RowCount {
                what: "attribute matrix",
                found: attributes.nrows(),
                expected: n_nodes,
            });
        }
        if attributes.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("attribute matrix".into()));
        }
        if let Some(l) = &labels {
            if l.len() != n_nodes {
                return Err(Error::RowCount {
                    what: "labels",
                    found: l.len(),
                    expected: n_nodes,
                });
            }
        }
        let mut trips = Vec::new();
        for (u, v) in edges {
            for x in [u, v] {
                if x >= n_nodes {
                    return Err(Error::IndexOutOfRange {
                        index: x,
                        len: n_nodes,
                    });
                }
            }
            if u != v {
                trips.push((u, v, 1.0));
                trips.push((v, u, 1.0));
            }
        }
        let summed = CsrMatrix::from_triplets(n_nodes, n_nodes, trips)?;
        let adjacency = summed.with_values(vec![1.0; summed.nnz()]);
        Ok(Self {
            adjacency,
            attributes,
            labels,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.attributes.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.attributes.ncols()
    }

    /// Number of undirected edges.
    pub fn n_edges(&self) -> usize {
        self.adjacency.nnz() / 2
    }

    pub fn adjacency(&self) -> &CsrMatrix {
        &self.adjacency
    }

    pub fn attributes(&self) -> &Mat {
        &self.attributes
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn with_labels(mut self, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != self.n_nodes() {
                return Err(Error::RowCount {
                    what: "labels",
                    found: l.len(),
                    expected: self.n_nodes(),
                });
            }
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        self.adjacency.row_indices(i)
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors(i).len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency.contains(i, j)
    }

    /// Undirected edges as `(min, max)` pairs in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_nodes()).flat_map(move |i| {
            self.neighbors(i)
                .iter()
                .filter(move |&&j| j > i)
                .map(move |&j| (i, j))
        })
    }

    /// `A + I` as a 0/1 pattern; the attention layers aggregate over it.
    pub fn self_looped_structure(&self) -> CsrMatrix {
        let n = self.n_nodes();
        let trips = self.adjacency.triplets().chain((0..n).map(|i| (i, i, 1.0)));
        CsrMatrix::from_triplets(n, n, trips).expect("indices come from a valid graph")
    }

    /// Scales every attribute row to unit L1 norm; all-zero rows are kept.
    pub fn row_normalize_attributes(&mut self) {
        for mut row in self.attributes.rows_mut() {
            let s: f64 = row.iter().map(|v| v.abs()).sum();
            if s > 0.0 {
                row.mapv_inplace(|v| v / s);
            }
        }
    }
}

/// `D̃⁻¹(A + I)`: self-looped, row-stochastic adjacency.
#[derive(Clone, Debug)]
pub struct NormalizedAdjacency(pub Arc<SparseOperand>);

impl NormalizedAdjacency {
    pub fn matrix(&self) -> &CsrMatrix {
        &self.0.matrix
    }
}

pub fn normalize_adjacency(g: &AttributedGraph) -> NormalizedAdjacency {
    let structure = g.self_looped_structure();
    let mut values = Vec::with_capacity(structure.nnz());
    for i in 0..g.n_nodes() {
        let deg = structure.row_indices(i).len() as f64;
        values.extend(std::iter::repeat_n(
            1.0 / deg,
            structure.row_indices(i).len(),
        ));
    }
    NormalizedAdjacency(Arc::new(SparseOperand::new(structure.with_values(values))))
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.trim_end_matches('\r').trim().to_string()))
        .filter(|(_, l)| !l.is_empty())
        .collect())
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_edges(path: &Path) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (lineno, line) in read_lines(path)? {
        if line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(parse_err(path, lineno, "expected two node ids"));
        }
        let parse = |t: &str| {
            t.parse::<usize>()
                .map_err(|_| parse_err(path, lineno, format!("bad node id {t:?}")))
        };
        edges.push((parse(toks[0])?, parse(toks[1])?));
    }
    Ok(edges)
}

fn parse_attributes(path: &Path) -> Result<Mat> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in read_lines(path)? {
        let mut row = Vec::new();
        for tok in line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
        {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("bad number {tok:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(path, lineno, format!("non-finite value {tok:?}")));
            }
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("expected {} values, found {}", first.len(), row.len()),
                ));
            }
        }
        rows.push(row);
    }
    let d = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Mat::from_shape_vec((rows.len(), d), flat).expect("rows have equal length"))
}

/// Reads one nonnegative integer per line.
pub fn parse_labels(path: &Path) -> Result<Vec<usize>> {
    read_lines(path)?
        .into_iter()
        .map(|(lineno, line)| {
            line.parse::<usize>()
                .map_err(|_| parse_err(path, lineno, format!("bad label {line:?}")))
        })
        .collect()
}

/// Loads a graph from an edge file, an attribute file and optional labels.
///
/// The node count is the number of attribute rows. An edge naming a node
/// beyond the last row is an error; nodes without edges are allowed.
pub fn load_graph(
    edge_path: &Path,
    attr_path: &Path,
    label_path: Option<&Path>,
) -> Result<AttributedGraph> {
    let edges = parse_edges(edge_path)?;
    let attributes = parse_attributes(attr_path)?;
    let implied = edges.iter().map(|&(u, v)| u.max(v) + 1).max().unwrap_or(0);
    if attributes.nrows() < implied {
        return Err(Error::RowCount {
            what: "attribute file",
            found: attributes.nrows(),
            expected: implied,
        });
    }
    let n = attributes.nrows();
    let labels = label_path.map(parse_labels).transpose()?;
    AttributedGraph::new(n, edges, attributes, labels)
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes the graph in the same formats [`load_graph`] reads. Labels are
/// written only when both a path and labels are present.
pub fn save_graph(
    g: &AttributedGraph,
    edge_path: &Path,
    attr_path: &Path,
    label_path: Option<&Path>,
) -> Result<()> {
    let mut edges = String::new();
    for (u, v) in g.edges() {
        edges.push_str(&format!("{u} {v}\n"));
    }
    write_file(edge_path, &edges)?;

    let mut attrs = String::new();
    for row in g.attributes().rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        attrs.push_str(&line.join(" "));
        attrs.push('\n');
    }
    write_file(attr_path, &attrs)?;

    if let (Some(path), Some(labels)) = (label_path, g.labels()) {
        write_file(path, &format_labels(labels))?;
    }
    Ok(())
}

pub(crate) fn format_labels(labels: &[usize]) -> String {
    labels.iter().map(|l| format!("{l}\n")).collect()
}

/// Parameters of a planted-partition graph.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedSpec {
    pub n_nodes: usize,
    pub k_true: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub attr_dim: usize,
    /// Distance between any two cluster means, in noise standard deviations.
    pub attr_separation: f64,
    pub seed: u64,
}

impl PlantedSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k_true < 2 {
            return Err(Error::invalid("k_true must be at least 2"));
        }
        if self.n_nodes < self.k_true {
            return Err(Error::invalid("n_nodes must be at least k_true"));
        }
        if !(self.p_out >= 0.0 && self.p_in > self.p_out && self.p_in <= 1.0) {
            return Err(Error::invalid(format!(
                "need 1 >= p_in > p_out >= 0, got p_in={} p_out={}",
                self.p_in, self.p_out
            )));
        }
        if !(self.attr_separation >= 0.0 && self.attr_separation.is_finite()) {
            return Err(Error::invalid("attr_separation must be finite and >= 0"));
        }
        if self.attr_dim < self.k_true {
            return Err(Error::invalid(format!(
                "attr_dim {} < k_true {}: orthogonal cluster means need one axis per cluster",
                self.attr_dim, self.k_true
            )));
        }
        Ok(())
    }

    /// Block id of every node: even sizes, remainder to the earliest blocks.
    pub fn block_labels(&self) -> Vec<usize> {
        let base = self.n_nodes / self.k_true;
        let extra = self.n_nodes % self.k_true;
        (0..self.k_true)
            .flat_map(|b| std::iter::repeat_n(b, base + usize::from(b < extra)))
            .collect()
    }
}

/// Samples a planted-partition graph with labels set to the block ids.
///
/// Cluster `c` has mean `attr_separation / √2 · e_c`, so every pair of means
/// is exactly `attr_separation` apart; attributes add standard normal noise.
pub fn generate_planted_graph(spec: &PlantedSpec) -> Result<AttributedGraph> {
    spec.validate()?;
    let mut rng = crate::seeded_rng(spec.seed);
    let labels = spec.block_labels();
    let n = spec.n_nodes;

    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if labels[i] == labels[j] {
                spec.p_in
            } else {
                spec.p_out
            };
            if rng.random_bool(p) {
                edges.push((i, j));
            }
        }
    }

    let scale = spec.attr_separation / std::f64::consts::SQRT_2;
    let mut attributes = Mat::zeros((n, spec.attr_dim));
    for i in 0..n {
        for d in 0..spec.attr_dim {
            let noise: f64 = rng.sample(StandardNormal);
            let mean = if d == labels[i] { scale } else { 0.0 };
            attributes[[i, d]] = mean + noise;
        }
    }
    AttributedGraph::new(n, edges, attributes, Some(labels))
}

/// `round(fraction · n)` distinct node indices, sorted.
pub fn sample_mask_set(n: usize, fraction: f64, rng: &mut crate::Rng) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "mask fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let count = ((fraction * n as f64).round() as usize).min(n);
    let mut picked = sample(rng, n, count).into_vec();
    picked.sort_unstable();
    Ok(picked)
}
