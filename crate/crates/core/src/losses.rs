//! Training objectives: scaled cosine error on masked rows, BPR over sampled
//! negative edges, and the L2,1 group-sparsity penalty.
//!
//! Each loss returns its value together with the gradient wrt its matrix
//! argument, ready for [`crate::autodiff::Tape::scalar_fn`].

use rand::Rng;

use crate::autodiff::Mat;
use crate::graph::AttributedGraph;
use crate::{Error, Result};

/// Fixed exponent of the scaled cosine error.
pub const SCE_EXPONENT: i32 = 3;

/// Added to every row norm in the cosine so zero rows stay finite.
pub const NORM_GUARD: f64 = 1e-12;

/// Rejection-sampling attempts per triplet before it is skipped.
pub const MAX_NEGATIVE_ATTEMPTS: usize = 100;

/// Weights of the ranking and sparsity terms in the total objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1e-2,
            beta: 5e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// A loss value and its gradient wrt the loss's matrix input.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Mat,
}

#[derive(Clone, Debug)]
pub struct SceOutput {
    pub loss: LossOutput,
    /// Masked rows where `x` or `z` had zero norm.
    pub degenerate_rows: usize,
}

/// Mean of `(1 - cos(x_i, z_i))³` over the rows in `rows`.
pub fn sce_loss(x: &Mat, z: &Mat, rows: &[usize]) -> Result<SceOutput> {
    if x.dim() != z.dim() {
        return Err(Error::Shape {
            op: "sce_loss",
            left: x.dim(),
            right: z.dim(),
        });
    }
    if rows.is_empty() {
        return Err(Error::invalid("sce_loss needs a nonempty mask set"));
    }
    let scale = 1.0 / rows.len() as f64;
    let mut grad = Mat::zeros(z.dim());
    let mut value = 0.0;
    let mut degenerate_rows = 0;
    for &i in rows {
        if i >= x.nrows() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: x.nrows(),
            });
        }
        let xi = x.row(i);
        let zi = z.row(i);
        let x_norm = xi.dot(&xi).sqrt();
        let z_norm = zi.dot(&zi).sqrt();
        if x_norm == 0.0 || z_norm == 0.0 {
            degenerate_rows += 1;
        }
        let (nx, nz) = (x_norm.max(NORM_GUARD), z_norm.max(NORM_GUARD));
        let dot = xi.dot(&zi);
        let cos = dot / (nx * nz);
        let gap = 1.0 - cos;
        value += scale * gap.powi(SCE_EXPONENT);

        // d cos / d z = x / (nx nz) - dot · z / (nx nz² |z|)
        let outer = -scale * f64::from(SCE_EXPONENT) * gap.powi(SCE_EXPONENT - 1);
        let mut gi = grad.row_mut(i);
        gi.scaled_add(outer / (nx * nz), &xi);
        if z_norm >= NORM_GUARD {
            gi.scaled_add(-outer * dot / (nx * nz * nz * nz), &zi);
        }
    }
    Ok(SceOutput {
        loss: LossOutput { value, grad },
        degenerate_rows,
    })
}

/// `(i, j, u)`: an observed edge `(i, j)` and a sampled non-neighbor `u` of `i`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TripletBatch {
    pub triplets: Vec<(usize, usize, usize)>,
    /// Edges dropped because no negative was found within the attempt cap.
    pub skipped: usize,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

/// One triplet per undirected edge with a random orientation and a uniform
/// negative drawn by rejection.
pub fn sample_negatives(g: &AttributedGraph, rng: &mut crate::Rng) -> Result<TripletBatch> {
    let n = g.n_nodes();
    if n == 0 || g.n_edges() == n * (n - 1) / 2 && g.n_edges() > 0 {
        return Err(Error::CompleteGraph);
    }
    let mut batch = TripletBatch::default();
    for (a, b) in g.edges() {
        let (i, j) = if rng.random_bool(0.5) { (b, a) } else { (a, b) };
        let mut found = None;
        for _ in 0..MAX_NEGATIVE_ATTEMPTS {
            let u = rng.random_range(0..n);
            if u != i && !g.has_edge(i, u) {
                found = Some(u);
                break;
            }
        }
        match found {
            Some(u) => batch.triplets.push((i, j, u)),
            None => batch.skipped += 1,
        }
    }
    if batch.skipped > 0 {
        log::warn!(
            "skipped {} of {} edges with no negative after {MAX_NEGATIVE_ATTEMPTS} draws",
            batch.skipped,
            g.n_edges()
        );
    }
    Ok(batch)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `Σ -ln σ(C_i·C_j - C_i·C_u)`; divided by the batch size when `mean`.
pub fn bpr_loss(c: &Mat, batch: &TripletBatch, mean: bool) -> Result<LossOutput> {
    let n = c.nrows();
    let mut grad = Mat::zeros(c.dim());
    let mut value = 0.0;
    let scale = if mean && !batch.is_empty() {
        1.0 / batch.len() as f64
    } else {
        1.0
    };
    for &(i, j, u) in &batch.triplets {
        for idx in [i, j, u] {
            if idx >= n {
                return Err(Error::IndexOutOfRange { index: idx, len: n });
            }
        }
        let ci = c.row(i);
        let margin = ci.dot(&c.row(j)) - ci.dot(&c.row(u));
        value += scale * softplus(-margin);
        // d/dmargin of softplus(-margin) = -σ(-margin)
        let dm = -scale * sigmoid(-margin);
        let diff = &c.row(j) - &c.row(u);
        let ci = ci.to_owned();
        grad.row_mut(i).scaled_add(dm, &diff);
        grad.row_mut(j).scaled_add(dm, &ci);
        grad.row_mut(u).scaled_add(-dm, &ci);
    }
    Ok(LossOutput { value, grad })
}

/// Sum of column Euclidean norms of `w`; zero columns get a zero subgradient.
pub fn group_sparsity_loss(w: &Mat) -> LossOutput {
    let mut grad = Mat::zeros(w.dim());
    let mut value = 0.0;
    for (col, mut gcol) in w.columns().into_iter().zip(grad.columns_mut()) {
        let norm = col.dot(&col).sqrt();
        value += norm;
        if norm > 0.0 {
            gcol.assign(&col.mapv(|v| v / norm));
        }
    }
    LossOutput { value, grad }
}

/// `sce + α·bpr + β·gs`.
pub fn total_loss(sce: f64, bpr: f64, gs: f64, weights: LossWeights) -> Result<f64> {
    for (name, v) in [("sce", sce), ("bpr", bpr), ("group sparsity", gs)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss")));
        }
    }
    Ok(sce + weights.alpha * bpr + weights.beta * gs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use ndarray::array;

    fn flat(m: &Mat) -> Vec<f64> {
        m.iter().copied().collect()
    }

    fn reshape(v: &[f64], like: &Mat) -> Mat {
        Mat::from_shape_vec(like.dim(), v.to_vec()).unwrap()
    }

    fn random(rows: usize, cols: usize, rng: &mut crate::Rng) -> Mat {
        Mat::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sce_examples() {
        let x = array![[1.0, 0.0], [0.3, 0.2]];
        assert!(sce_loss(&x, &x, &[0, 1]).unwrap().loss.value.abs() < 1e-15);
        let z = array![[0.0, 1.0], [0.0, 0.0]];
        assert!((sce_loss(&x, &z, &[0]).unwrap().loss.value - 1.0).abs() < 1e-15);
        let z = array![[-1.0, 0.0], [0.0, 0.0]];
        assert!((sce_loss(&x, &z, &[0]).unwrap().loss.value - 8.0).abs() < 1e-15);
    }

    #[test]
    fn sce_zero_row_is_guarded() {
        let x = array![[0.0, 0.0]];
        let z = array![[1.0, 2.0]];
        let out = sce_loss(&x, &z, &[0]).unwrap();
        assert_eq!(out.degenerate_rows, 1);
        assert!(out.loss.value.is_finite());
        assert!(out.loss.grad.iter().all(|v| v.is_finite()));
        assert!(sce_loss(&x, &z, &[]).is_err());
    }

    #[test]
    fn sce_is_scale_invariant_per_row() {
        let mut rng = crate::seeded_rng(1);
        let x = random(5, 4, &mut rng);
        let z = random(5, 4, &mut rng);
        let base = sce_loss(&x, &z, &[0, 2, 3]).unwrap().loss.value;
        let mut z2 = z.clone();
        z2.row_mut(2).mapv_inplace(|v| v * 7.5);
        let mut x2 = x.clone();
        x2.row_mut(0).mapv_inplace(|v| v * 0.01);
        let scaled = sce_loss(&x2, &z2, &[0, 2, 3]).unwrap().loss.value;
        assert!((base - scaled).abs() < 1e-12);
        assert!(base >= 0.0);
    }

    #[test]
    fn sce_gradient_matches_finite_differences() {
        let mut rng = crate::seeded_rng(2);
        let x = random(8, 5, &mut rng);
        let z = random(8, 5, &mut rng);
        let rows = [0, 3, 4, 7];
        let out = sce_loss(&x, &z, &rows).unwrap();
        let err = finite_difference_check(
            |v| sce_loss(&x, &reshape(v, &z), &rows).unwrap().loss.value,
            &flat(&z),
            &flat(&out.loss.grad),
            1e-5,
            None,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn star() -> AttributedGraph {
        AttributedGraph::new(
            5,
            [(0, 1), (0, 2), (0, 3), (0, 4)],
            Mat::zeros((5, 1)),
            None,
        )
        .unwrap()
    }

    #[test]
    fn negatives_respect_rejection_rule() {
        let g = star();
        for seed in 0..50 {
            let batch = sample_negatives(&g, &mut crate::seeded_rng(seed)).unwrap();
            for &(i, j, u) in &batch.triplets {
                assert!(g.has_edge(i, j));
                assert!(u != i && !g.has_edge(i, u));
                if i == 1 {
                    assert!([2, 3, 4].contains(&u));
                }
            }
            // The center is adjacent to everyone, so its triplets are skipped.
            assert_eq!(batch.len() + batch.skipped, 4);
        }
    }

    #[test]
    fn complete_graph_has_no_negatives() {
        let k3 =
            AttributedGraph::new(3, [(0, 1), (1, 2), (0, 2)], Mat::zeros((3, 1)), None).unwrap();
        assert!(matches!(
            sample_negatives(&k3, &mut crate::seeded_rng(0)),
            Err(Error::CompleteGraph)
        ));
    }

    #[test]
    fn negative_sampling_is_deterministic() {
        let g = crate::graph::generate_planted_graph(&crate::graph::PlantedSpec {
            n_nodes: 40,
            k_true: 2,
            p_in: 0.3,
            p_out: 0.05,
            attr_dim: 2,
            attr_separation: 1.0,
            seed: 0,
        })
        .unwrap();
        let a = sample_negatives(&g, &mut crate::seeded_rng(5)).unwrap();
        let b = sample_negatives(&g, &mut crate::seeded_rng(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), g.n_edges());
    }

    #[test]
    fn bpr_examples() {
        let c = Mat::zeros((3, 2));
        let batch = TripletBatch {
            triplets: vec![(0, 1, 2), (1, 0, 2)],
            skipped: 0,
        };
        let v = bpr_loss(&c, &batch, false).unwrap().value;
        assert!((v - 2.0 * 2.0f64.ln()).abs() < 1e-15);
        assert!((bpr_loss(&c, &batch, true).unwrap().value - 2.0f64.ln()).abs() < 1e-15);

        // margin = C_0·C_1 - C_0·C_2 = ln 3
        let c = array![[1.0, 0.0], [3.0f64.ln(), 0.0], [0.0, 1.0]];
        let one = TripletBatch {
            triplets: vec![(0, 1, 2)],
            skipped: 0,
        };
        let v = bpr_loss(&c, &one, false).unwrap().value;
        assert!((v - (4.0f64 / 3.0).ln()).abs() < 1e-12, "{v}");

        let c = array![[1.0, 0.0], [1e6, 0.0], [0.0, 1.0]];
        assert!(bpr_loss(&c, &one, false).unwrap().value < 1e-300);
    }

    #[test]
    fn bpr_depends_only_on_affiliation_rows() {
        let mut rng = crate::seeded_rng(3);
        let mut c = random(5, 3, &mut rng).mapv(f64::abs);
        let row = c.row(1).to_owned();
        c.row_mut(4).assign(&row);
        let a = TripletBatch {
            triplets: vec![(0, 1, 2), (3, 1, 0)],
            skipped: 0,
        };
        let b = TripletBatch {
            triplets: vec![(0, 4, 2), (3, 4, 0)],
            skipped: 0,
        };
        let va = bpr_loss(&c, &a, false).unwrap().value;
        let vb = bpr_loss(&c, &b, false).unwrap().value;
        assert_eq!(va, vb);
    }

    #[test]
    fn bpr_gradient_matches_finite_differences() {
        let mut rng = crate::seeded_rng(4);
        let c = random(8, 4, &mut rng).mapv(f64::abs);
        let batch = TripletBatch {
            triplets: vec![(0, 1, 5), (2, 3, 0), (4, 7, 6), (6, 5, 1), (1, 0, 6)],
            skipped: 0,
        };
        let out = bpr_loss(&c, &batch, false).unwrap();
        let err = finite_difference_check(
            |v| bpr_loss(&reshape(v, &c), &batch, false).unwrap().value,
            &flat(&c),
            &flat(&out.grad),
            1e-5,
            None,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn group_sparsity_examples() {
        assert_eq!(group_sparsity_loss(&Mat::zeros((3, 4))).value, 0.0);
        assert_eq!(group_sparsity_loss(&Mat::eye(2)).value, 2.0);
        let w = array![[3.0, 0.0], [4.0, 0.0]];
        let out = group_sparsity_loss(&w);
        assert_eq!(out.value, 5.0);
        assert_eq!(out.grad.column(1).to_vec(), vec![0.0, 0.0]);
        assert_eq!(out.grad.column(0).to_vec(), vec![0.6, 0.8]);
    }

    #[test]
    fn group_sparsity_invariances() {
        let mut rng = crate::seeded_rng(5);
        let w = random(6, 4, &mut rng);
        let base = group_sparsity_loss(&w).value;
        let mut flipped = w.clone();
        flipped.column_mut(2).mapv_inplace(|v| -v);
        let mut permuted = w.clone();
        for r in 0..6 {
            permuted.row_mut(r).assign(&w.row(5 - r));
        }
        assert!((group_sparsity_loss(&flipped).value - base).abs() < 1e-14);
        assert!((group_sparsity_loss(&permuted).value - base).abs() < 1e-14);
    }

    #[test]
    fn group_sparsity_gradient_matches_finite_differences() {
        let mut rng = crate::seeded_rng(6);
        let w = random(5, 4, &mut rng);
        let out = group_sparsity_loss(&w);
        let err = finite_difference_check(
            |v| group_sparsity_loss(&reshape(v, &w)).value,
            &flat(&w),
            &flat(&out.grad),
            1e-5,
            None,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn total_loss_examples() {
        let none = LossWeights {
            alpha: 0.0,
            beta: 0.0,
        };
        assert_eq!(total_loss(0.7, 5.0, 9.0, none).unwrap(), 0.7);
        let t = total_loss(1.0, 2.0, 3.0, LossWeights::default()).unwrap();
        assert!((t - 1.035).abs() < 1e-15);
        assert!(total_loss(f64::NAN, 0.0, 0.0, none).is_err());
    }
}
