//! Label propagation.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::metrics::compact_labels;
use crate::{seeded_rng, AttributedGraph, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LpaResult {
    /// Labels compacted to `0..K`.
    pub labels: Vec<usize>,
    /// Full passes performed.
    pub iterations: usize,
    /// Whether the last pass changed nothing.
    pub converged: bool,
}

/// Asynchronous label propagation with a seeded node order.
///
/// Each node starts alone. On every pass nodes are visited in a freshly
/// shuffled order and take the most frequent label among their neighbors;
/// ties are broken uniformly at random, except that a node whose current
/// label is among the maxima keeps it. Isolated nodes keep their own label.
pub fn label_propagation(g: &AttributedGraph, seed: u64, max_iter: usize) -> Result<LpaResult> {
    if max_iter == 0 {
        return Err(Error::invalid("max_iter must be at least 1"));
    }
    let n = g.n_nodes();
    let mut rng = seeded_rng(seed);
    let mut labels: Vec<usize> = (0..n).collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut counts = vec![0usize; n];
    let mut touched = Vec::new();
    let mut best = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iter {
        iterations += 1;
        order.shuffle(&mut rng);
        let mut changed = false;
        for &i in &order {
            let nbrs = g.neighbors(i);
            if nbrs.is_empty() {
                continue;
            }
            for &j in nbrs {
                if counts[labels[j]] == 0 {
                    touched.push(labels[j]);
                }
                counts[labels[j]] += 1;
            }
            let max = touched.iter().map(|&l| counts[l]).max().expect("nonempty");
            best.clear();
            best.extend(touched.iter().copied().filter(|&l| counts[l] == max));
            for &l in &touched {
                counts[l] = 0;
            }
            touched.clear();
            if best.contains(&labels[i]) {
                continue;
            }
            // Sorted so the draw depends only on the label set.
            best.sort_unstable();
            labels[i] = best[rng.random_range(0..best.len())];
            changed = true;
        }
        if !changed {
            converged = true;
            break;
        }
    }
    Ok(LpaResult {
        labels: compact_labels(&labels).0,
        iterations,
        converged,
    })
}
