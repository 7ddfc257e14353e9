//! Reverse-mode tape over dense `f64` matrices.
//!
//! Only the operations the community model needs are provided. Scalar losses
//! enter the tape through [`Tape::scalar_fn`], which records a value together
//! with its gradient wrt one input, so the loss kernels in [`crate::losses`]
//! stay plain functions.

use std::sync::Arc;

use ndarray::{Array2, Axis};

use super::sparse::{CsrMatrix, SparseOperand};
use crate::{Error, Result};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Multi-head attention settings for [`Tape::attention`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionSpec {
    pub heads: usize,
    /// Concatenate head outputs; otherwise average them.
    pub concat: bool,
    pub negative_slope: f64,
}

struct AttentionCache {
    structure: Arc<CsrMatrix>,
    proj: Var,
    att_src: Var,
    att_dst: Var,
    spec: AttentionSpec,
    head_dim: usize,
    /// Softmax weights, laid out `[edge * heads + head]`.
    alpha: Vec<f64>,
    /// Whether the pre-activation score was positive, same layout.
    positive: Vec<bool>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMM(Arc<SparseOperand>, Var),
    AddRowVector(Var, Var),
    Relu(Var),
    MulConst(Var, Mat),
    ReplaceRows {
        input: Var,
        token: Var,
        rows: Vec<usize>,
    },
    Attention(Box<AttentionCache>),
    ScalarFn {
        input: Var,
        grad: Mat,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the root wrt `v`; zeros when `v` did not reach the root.
    pub fn get(&self, v: Var) -> Mat {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Mat {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Array2::zeros(self.shapes[v.0]))
    }
}

fn shape_err(op: &'static str, left: &Mat, right: &Mat) -> Error {
    Error::Shape {
        op,
        left: left.dim(),
        right: right.dim(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(shape_err("matmul", av, bv));
        }
        let out = av.dot(bv);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn spmm(&mut self, s: Arc<SparseOperand>, d: Var) -> Result<Var> {
        let out = s.matrix.spmm(self.value(d))?;
        Ok(self.push(out, Op::SpMM(s, d)))
    }

    /// Adds a `1 × n` row vector to every row of an `m × n` input.
    pub fn add_row_vector(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.nrows() != 1 || bv.ncols() != av.ncols() {
            return Err(shape_err("add_row_vector", av, bv));
        }
        let out = av + bv;
        Ok(self.push(out, Op::AddRowVector(a, bias)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(super::relu_scalar);
        self.push(out, Op::Relu(a))
    }

    /// Elementwise product with a constant (dropout keep-masks).
    pub fn mul_const(&mut self, a: Var, c: Mat) -> Result<Var> {
        let av = self.value(a);
        if av.dim() != c.dim() {
            return Err(shape_err("mul_const", av, &c));
        }
        let out = av * &c;
        Ok(self.push(out, Op::MulConst(a, c)))
    }

    /// Replaces the listed rows of `input` with the `1 × n` row `token`.
    pub fn replace_rows(&mut self, input: Var, token: Var, rows: &[usize]) -> Result<Var> {
        let (iv, tv) = (self.value(input), self.value(token));
        if tv.nrows() != 1 || tv.ncols() != iv.ncols() {
            return Err(shape_err("replace_rows", iv, tv));
        }
        let mut out = iv.clone();
        for &r in rows {
            if r >= out.nrows() {
                return Err(Error::IndexOutOfRange {
                    index: r,
                    len: out.nrows(),
                });
            }
            out.row_mut(r).assign(&tv.row(0));
        }
        let mut rows = rows.to_vec();
        rows.sort_unstable();
        rows.dedup();
        Ok(self.push(out, Op::ReplaceRows { input, token, rows }))
    }

    /// Graph attention aggregation over the sparsity pattern of `structure`.
    ///
    /// `proj` is the already projected input (`N × heads·F`); `att_src` and
    /// `att_dst` are `heads × F`. For target `i` and neighbor `j` the score is
    /// `leaky_relu(att_src_h · p_j + att_dst_h · p_i)`, normalized by a softmax
    /// over the neighbors of `i`.
    pub fn attention(
        &mut self,
        structure: Arc<CsrMatrix>,
        proj: Var,
        att_src: Var,
        att_dst: Var,
        spec: AttentionSpec,
    ) -> Result<Var> {
        let p = self.value(proj);
        let a_src = self.value(att_src);
        let a_dst = self.value(att_dst);
        let heads = spec.heads;
        let n = p.nrows();
        if heads == 0 || a_src.nrows() != heads || a_src.dim() != a_dst.dim() {
            return Err(shape_err("attention", a_src, a_dst));
        }
        let f = a_src.ncols();
        if p.ncols() != heads * f || structure.shape() != (n, n) {
            return Err(shape_err("attention", p, a_src));
        }

        let mut src_score = Array2::<f64>::zeros((n, heads));
        let mut dst_score = Array2::<f64>::zeros((n, heads));
        for i in 0..n {
            for h in 0..heads {
                let block = p.slice(ndarray::s![i, h * f..(h + 1) * f]);
                src_score[[i, h]] = block.dot(&a_src.row(h));
                dst_score[[i, h]] = block.dot(&a_dst.row(h));
            }
        }

        let nnz = structure.nnz();
        let mut alpha = vec![0.0; nnz * heads];
        let mut positive = vec![false; nnz * heads];
        let out_cols = if spec.concat { heads * f } else { f };
        let mut out = Array2::<f64>::zeros((n, out_cols));
        let head_scale = if spec.concat { 1.0 } else { 1.0 / heads as f64 };

        for i in 0..n {
            let start = structure.row_start(i);
            let nbrs = structure.row_indices(i);
            for h in 0..heads {
                let mut max_e = f64::NEG_INFINITY;
                for (k, &j) in nbrs.iter().enumerate() {
                    let s = src_score[[j, h]] + dst_score[[i, h]];
                    let slot = (start + k) * heads + h;
                    positive[slot] = s > 0.0;
                    let e = if s > 0.0 { s } else { spec.negative_slope * s };
                    alpha[slot] = e;
                    max_e = max_e.max(e);
                }
                let mut denom = 0.0;
                for k in 0..nbrs.len() {
                    let slot = (start + k) * heads + h;
                    alpha[slot] = (alpha[slot] - max_e).exp();
                    denom += alpha[slot];
                }
                let out_off = if spec.concat { h * f } else { 0 };
                for (k, &j) in nbrs.iter().enumerate() {
                    let slot = (start + k) * heads + h;
                    alpha[slot] /= denom;
                    let w = alpha[slot] * head_scale;
                    for c in 0..f {
                        out[[i, out_off + c]] += w * p[[j, h * f + c]];
                    }
                }
            }
        }

        let cache = AttentionCache {
            structure,
            proj,
            att_src,
            att_dst,
            spec,
            head_dim: f,
            alpha,
            positive,
        };
        Ok(self.push(out, Op::Attention(Box::new(cache))))
    }

    /// Records a scalar whose gradient wrt `input` was computed by the caller.
    pub fn scalar_fn(&mut self, input: Var, value: f64, grad: Mat) -> Result<Var> {
        let iv = self.value(input);
        if iv.dim() != grad.dim() {
            return Err(shape_err("scalar_fn", iv, &grad));
        }
        Ok(self.push(
            Array2::from_elem((1, 1), value),
            Op::ScalarFn { input, grad },
        ))
    }

    /// `Σ w_k · s_k` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let val = self.value(v);
            if val.dim() != (1, 1) {
                return Err(shape_err("weighted_sum", val, &Array2::zeros((1, 1))));
            }
            total += w * val[[0, 0]];
        }
        Ok(self.push(
            Array2::from_elem((1, 1), total),
            Op::WeightedSum(terms.to_vec()),
        ))
    }

    /// Back-propagates from a `1 × 1` root.
    pub fn backward(&self, root: Var) -> Gradients {
        let shapes: Vec<_> = self.nodes.iter().map(|n| n.value.dim()).collect();
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones(shapes[root.0]));

        for idx in (0..=root.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::SpMM(s, d) => {
                    let gd = s.transpose.spmm(&g).expect("shapes checked in forward");
                    accumulate(&mut grads, *d, gd);
                }
                Op::AddRowVector(a, bias) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |gv, &x| {
                        if x <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::MulConst(a, c) => {
                    accumulate(&mut grads, *a, g * c);
                }
                Op::ReplaceRows { input, token, rows } => {
                    let mut gi = g;
                    let mut gt = Array2::<f64>::zeros((1, gi.ncols()));
                    for &r in rows {
                        gt.row_mut(0).scaled_add(1.0, &gi.row(r));
                        gi.row_mut(r).fill(0.0);
                    }
                    accumulate(&mut grads, *token, gt);
                    accumulate(&mut grads, *input, gi);
                }
                Op::Attention(cache) => {
                    let (gp, gs, gd) = self.attention_backward(cache, &g);
                    accumulate(&mut grads, cache.proj, gp);
                    accumulate(&mut grads, cache.att_src, gs);
                    accumulate(&mut grads, cache.att_dst, gd);
                }
                Op::ScalarFn { input, grad } => {
                    accumulate(&mut grads, *input, grad * g[[0, 0]]);
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        accumulate(&mut grads, v, Array2::from_elem((1, 1), w * g[[0, 0]]));
                    }
                }
            }
        }
        Gradients { grads, shapes }
    }

    fn attention_backward(&self, c: &AttentionCache, g: &Mat) -> (Mat, Mat, Mat) {
        let p = self.value(c.proj);
        let a_src = self.value(c.att_src);
        let a_dst = self.value(c.att_dst);
        let heads = c.spec.heads;
        let f = c.head_dim;
        let n = p.nrows();
        let s = &c.structure;
        let head_scale = if c.spec.concat {
            1.0
        } else {
            1.0 / heads as f64
        };

        let mut gp = Array2::<f64>::zeros(p.dim());
        let mut g_src_score = Array2::<f64>::zeros((n, heads));
        let mut g_dst_score = Array2::<f64>::zeros((n, heads));
        let mut d_alpha = Vec::new();

        for i in 0..n {
            let start = s.row_start(i);
            let nbrs = s.row_indices(i);
            for h in 0..heads {
                let out_off = if c.spec.concat { h * f } else { 0 };
                let gi = g.slice(ndarray::s![i, out_off..out_off + f]);
                d_alpha.clear();
                let mut weighted = 0.0;
                for (k, &j) in nbrs.iter().enumerate() {
                    let slot = (start + k) * heads + h;
                    let pj = p.slice(ndarray::s![j, h * f..(h + 1) * f]);
                    let da = head_scale * gi.dot(&pj);
                    weighted += c.alpha[slot] * da;
                    d_alpha.push(da);
                    let w = c.alpha[slot] * head_scale;
                    gp.slice_mut(ndarray::s![j, h * f..(h + 1) * f])
                        .scaled_add(w, &gi);
                }
                for (k, &j) in nbrs.iter().enumerate() {
                    let slot = (start + k) * heads + h;
                    let de = c.alpha[slot] * (d_alpha[k] - weighted);
                    let ds = if c.positive[slot] {
                        de
                    } else {
                        c.spec.negative_slope * de
                    };
                    g_src_score[[j, h]] += ds;
                    g_dst_score[[i, h]] += ds;
                }
            }
        }

        let mut ga_src = Array2::<f64>::zeros(a_src.dim());
        let mut ga_dst = Array2::<f64>::zeros(a_dst.dim());
        for j in 0..n {
            for h in 0..heads {
                let block = p.slice(ndarray::s![j, h * f..(h + 1) * f]);
                let (gs, gd) = (g_src_score[[j, h]], g_dst_score[[j, h]]);
                ga_src.row_mut(h).scaled_add(gs, &block);
                ga_dst.row_mut(h).scaled_add(gd, &block);
                let mut gblock = gp.slice_mut(ndarray::s![j, h * f..(h + 1) * f]);
                gblock.scaled_add(gs, &a_src.row(h));
                gblock.scaled_add(gd, &a_dst.row(h));
            }
        }
        (gp, ga_src, ga_dst)
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}
