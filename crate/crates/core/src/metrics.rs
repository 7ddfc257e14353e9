//! Partition quality: EDGE, NMI, modularity and Calinski-Harabasz.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use ndarray::Array1;

use crate::autodiff::Mat;
use crate::graph::AttributedGraph;
use crate::{Error, Result};

/// Canonical `(min, max)` undirected edge.
pub type EdgeKey = (usize, usize);

/// Edges split by whether their endpoints share a label.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EdgeSets {
    pub intra: BTreeSet<EdgeKey>,
    pub inter: BTreeSet<EdgeKey>,
}

fn check_len(g: &AttributedGraph, labels: &[usize]) -> Result<()> {
    if labels.len() != g.n_nodes() {
        return Err(Error::RowCount {
            what: "partition",
            found: labels.len(),
            expected: g.n_nodes(),
        });
    }
    Ok(())
}

pub fn edge_sets(g: &AttributedGraph, labels: &[usize]) -> Result<EdgeSets> {
    check_len(g, labels)?;
    let mut sets = EdgeSets::default();
    for (u, v) in g.edges() {
        if labels[u] == labels[v] {
            sets.intra.insert((u, v));
        } else {
            sets.inter.insert((u, v));
        }
    }
    Ok(sets)
}

/// Jaccard index, with an empty union counting as full agreement.
fn jaccard(a: &BTreeSet<EdgeKey>, b: &BTreeSet<EdgeKey>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Harmonic mean of the intra-edge and inter-edge Jaccard agreements
/// between a predicted and a reference partition.
pub fn edge_metric(g: &AttributedGraph, pred: &[usize], truth: &[usize]) -> Result<f64> {
    let p = edge_sets(g, pred)?;
    let t = edge_sets(g, truth)?;
    let j_intra = jaccard(&t.intra, &p.intra);
    let j_inter = jaccard(&t.inter, &p.inter);
    if j_intra + j_inter == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * j_intra * j_inter / (j_intra + j_inter))
}

/// Newman modularity of a partition.
pub fn modularity(g: &AttributedGraph, labels: &[usize]) -> Result<f64> {
    check_len(g, labels)?;
    let m = g.n_edges() as f64;
    if m == 0.0 {
        return Err(Error::EmptyGraph);
    }
    let mut internal: HashMap<usize, f64> = HashMap::new();
    let mut degree: HashMap<usize, f64> = HashMap::new();
    for (i, &l) in labels.iter().enumerate() {
        *degree.entry(l).or_default() += g.degree(i) as f64;
    }
    for (u, v) in g.edges() {
        if labels[u] == labels[v] {
            *internal.entry(labels[u]).or_default() += 1.0;
        }
    }
    // Sum in label order so the result does not depend on hash iteration order.
    let mut keys: Vec<usize> = degree.keys().copied().collect();
    keys.sort_unstable();
    Ok(keys
        .iter()
        .map(|c| {
            let l_c = internal.get(c).copied().unwrap_or(0.0);
            let d_c = degree[c];
            l_c / m - (d_c / (2.0 * m)).powi(2)
        })
        .sum())
}

/// Relabels to `0..K` in order of first appearance; returns labels and `K`.
pub fn compact_labels(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = HashMap::new();
    let out = labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

/// Calinski-Harabasz variance ratio of attribute rows grouped by `labels`.
///
/// Zero within-cluster dispersion yields `f64::INFINITY`.
pub fn calinski_harabasz(x: &Mat, labels: &[usize]) -> Result<f64> {
    if labels.len() != x.nrows() {
        return Err(Error::RowCount {
            what: "partition",
            found: labels.len(),
            expected: x.nrows(),
        });
    }
    let (labels, k) = compact_labels(labels);
    if k < 2 {
        return Err(Error::TooFewClusters(k));
    }
    let n = x.nrows();
    let d = x.ncols();
    let mut sums = Mat::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        sums.row_mut(l).scaled_add(1.0, &x.row(i));
        counts[l] += 1;
    }
    let grand: Array1<f64> = x.sum_axis(ndarray::Axis(0)) / n as f64;
    let mut between = 0.0;
    let mut means = sums;
    for (mut row, &count) in means.rows_mut().into_iter().zip(&counts) {
        row /= count as f64;
        between += count as f64 * (&row - &grand).mapv(|v| v * v).sum();
    }
    let mut within = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        within += (&x.row(i) - &means.row(l)).mapv(|v| v * v).sum();
    }
    if within == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(between * (n - k) as f64 / (within * (k - 1) as f64))
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with arithmetic-mean normalization.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::RowCount {
            what: "partition",
            found: pred.len(),
            expected: truth.len(),
        });
    }
    let (a, ka) = compact_labels(pred);
    let (b, kb) = compact_labels(truth);
    if ka <= 1 && kb <= 1 {
        return Ok(1.0);
    }
    if ka <= 1 || kb <= 1 {
        return Ok(0.0);
    }
    let n = pred.len() as f64;
    let mut table = vec![0usize; ka * kb];
    let mut ca = vec![0usize; ka];
    let mut cb = vec![0usize; kb];
    for (&x, &y) in a.iter().zip(&b) {
        table[x * kb + y] += 1;
        ca[x] += 1;
        cb[y] += 1;
    }
    let mut mi = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let nxy = table[x * kb + y];
            if nxy > 0 {
                let nxy = nxy as f64;
                mi += nxy / n * (n * nxy / (ca[x] as f64 * cb[y] as f64)).ln();
            }
        }
    }
    let h = (entropy(ca.into_iter(), n) + entropy(cb.into_iter(), n)) / 2.0;
    Ok((mi / h).clamp(0.0, 1.0))
}

/// Unsupervised and (when a reference is given) supervised scores.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionScores {
    pub k: usize,
    pub modularity: f64,
    /// `None` when fewer than two communities were found.
    pub calinski_harabasz: Option<f64>,
    /// Modularity × CH; `None` when `K < 2` or the product is not finite.
    pub product: Option<f64>,
    pub nmi: Option<f64>,
    pub edge: Option<f64>,
}

impl PartitionScores {
    /// Scores `pred` on `g`; supervised metrics use `truth` when present.
    pub fn compute(g: &AttributedGraph, pred: &[usize], truth: Option<&[usize]>) -> Result<Self> {
        check_len(g, pred)?;
        let (_, k) = compact_labels(pred);
        let modularity = modularity(g, pred)?;
        let calinski_harabasz = if k >= 2 {
            Some(calinski_harabasz(g.attributes(), pred)?)
        } else {
            None
        };
        let product = calinski_harabasz
            .map(|ch| modularity * ch)
            .filter(|p| p.is_finite());
        let (nmi, edge) = match truth {
            Some(t) => (Some(nmi(pred, t)?), Some(edge_metric(g, pred, t)?)),
            None => (None, None),
        };
        Ok(Self {
            k,
            modularity,
            calinski_harabasz,
            product,
            nmi,
            edge,
        })
    }
}

/// Line-oriented `key=value` report. Absent metrics are omitted.
impl fmt::Display for PartitionScores {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "K={}", self.k)?;
        writeln!(f, "modularity={}", self.modularity)?;
        if let Some(ch) = self.calinski_harabasz {
            writeln!(f, "semantic={ch}")?;
        }
        if let Some(v) = self.nmi {
            writeln!(f, "nmi={v}")?;
        }
        if let Some(v) = self.edge {
            writeln!(f, "edge={v}")?;
        }
        Ok(())
    }
}
