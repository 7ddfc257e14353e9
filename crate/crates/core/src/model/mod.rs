//! The community model: masked attention autoencoder plus a two-layer
//! convolutional affiliation readout.
//!
//! ```text
//! X ─mask─▶ X̃ ─dropout─▶ encoder(2×GAT) ─▶ H ─remask─▶ decoder(2×GAT) ─▶ Z
//!                                          │
//!                                          └─▶ C = ReLU(Â·ReLU(Â·H·W₁)·W)
//! ```

mod checkpoint;

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{AttentionSpec, CsrMatrix, Mat, Tape, Var};
use crate::graph::{normalize_adjacency, AttributedGraph, NormalizedAdjacency};
use crate::losses::{self, LossWeights, TripletBatch};
use crate::{Error, Result};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Attribute dimension `D`.
    pub n_features: usize,
    /// Embedding dimension `D′`; must be divisible by `heads`.
    pub hidden: usize,
    pub heads: usize,
    /// Width of the readout's first layer.
    pub readout_hidden: usize,
    /// Number of candidate communities.
    pub k_max: usize,
    pub negative_slope: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 || self.hidden == 0 || self.readout_hidden == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "hidden size {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.k_max < 2 {
            return Err(Error::invalid("k_max must be at least 2"));
        }
        if !self.negative_slope.is_finite() {
            return Err(Error::invalid("negative slope must be finite"));
        }
        Ok(())
    }
}

/// Learnable replacement rows for masked nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskTokens {
    /// `1 × D`, substituted into the attributes.
    pub encoder: Mat,
    /// `1 × D′`, substituted into the embeddings before decoding.
    pub decoder: Mat,
}

/// One multi-head graph attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayerParams {
    /// `d_in × heads·head_dim`.
    pub weight: Mat,
    /// `heads × head_dim`.
    pub att_src: Mat,
    pub att_dst: Mat,
    /// `1 × d_out`.
    pub bias: Mat,
    pub heads: usize,
    pub concat: bool,
    pub negative_slope: f64,
}

impl AttentionLayerParams {
    fn init(
        d_in: usize,
        head_dim: usize,
        heads: usize,
        concat: bool,
        negative_slope: f64,
        rng: &mut crate::Rng,
    ) -> Self {
        let d_out = if concat { heads * head_dim } else { head_dim };
        Self {
            weight: fan_in_uniform(d_in, heads * head_dim, rng),
            att_src: fan_in_uniform(head_dim, heads, rng).reversed_axes(),
            att_dst: fan_in_uniform(head_dim, heads, rng).reversed_axes(),
            bias: Mat::zeros((1, d_out)),
            heads,
            concat,
            negative_slope,
        }
    }

    pub fn output_dim(&self) -> usize {
        if self.concat {
            self.att_src.len()
        } else {
            self.att_src.ncols()
        }
    }

    fn spec(&self) -> AttentionSpec {
        AttentionSpec {
            heads: self.heads,
            concat: self.concat,
            negative_slope: self.negative_slope,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReadoutParams {
    /// `D′ × readout_hidden`.
    pub hidden_weight: Mat,
    /// Final weight `W`, `readout_hidden × k_max`; the group-sparsity target.
    pub weight: Mat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    pub tokens: MaskTokens,
    pub encoder: [AttentionLayerParams; 2],
    pub decoder: [AttentionLayerParams; 2],
    pub readout: ReadoutParams,
}

/// `U(-√(3/fan_in), √(3/fan_in))`, i.e. unit-variance-preserving.
fn fan_in_uniform(fan_in: usize, fan_out: usize, rng: &mut crate::Rng) -> Mat {
    let bound = (3.0 / fan_in as f64).sqrt();
    Mat::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound))
}

fn small_gaussian(cols: usize, rng: &mut crate::Rng) -> Mat {
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    Mat::from_shape_fn((1, cols), |_| normal.sample(rng))
}

impl ModelParameters {
    pub fn init(config: &ModelConfig, rng: &mut crate::Rng) -> Result<Self> {
        config.validate()?;
        let ModelConfig {
            n_features: d,
            hidden,
            heads,
            readout_hidden,
            k_max,
            negative_slope: slope,
        } = *config;
        let per_head = hidden / heads;
        let encoder = [
            AttentionLayerParams::init(d, per_head, heads, true, slope, rng),
            AttentionLayerParams::init(hidden, hidden, heads, false, slope, rng),
        ];
        let decoder = [
            AttentionLayerParams::init(hidden, per_head, heads, true, slope, rng),
            AttentionLayerParams::init(hidden, d, heads, false, slope, rng),
        ];
        let readout = ReadoutParams {
            hidden_weight: fan_in_uniform(hidden, readout_hidden, rng),
            weight: fan_in_uniform(readout_hidden, k_max, rng),
        };
        let tokens = MaskTokens {
            encoder: small_gaussian(d, rng),
            decoder: small_gaussian(hidden, rng),
        };
        Ok(Self {
            tokens,
            encoder,
            decoder,
            readout,
        })
    }

    /// Every learnable tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![("tokens.encoder".to_string(), &self.tokens.encoder)];
        for (prefix, layers) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            for (k, l) in layers.iter().enumerate() {
                out.push((format!("{prefix}.{k}.weight"), &l.weight));
                out.push((format!("{prefix}.{k}.att_src"), &l.att_src));
                out.push((format!("{prefix}.{k}.att_dst"), &l.att_dst));
                out.push((format!("{prefix}.{k}.bias"), &l.bias));
            }
        }
        out.push(("tokens.decoder".to_string(), &self.tokens.decoder));
        out.push((
            "readout.hidden_weight".to_string(),
            &self.readout.hidden_weight,
        ));
        out.push(("readout.weight".to_string(), &self.readout.weight));
        out
    }

    /// Same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = vec![&mut self.tokens.encoder];
        for layers in [&mut self.encoder, &mut self.decoder] {
            for l in layers.iter_mut() {
                out.push(&mut l.weight);
                out.push(&mut l.att_src);
                out.push(&mut l.att_dst);
                out.push(&mut l.bias);
            }
        }
        out.push(&mut self.tokens.decoder);
        out.push(&mut self.readout.hidden_weight);
        out.push(&mut self.readout.weight);
        out
    }

    pub fn tensors(&self) -> Vec<Mat> {
        self.named_tensors()
            .into_iter()
            .map(|(_, m)| m.clone())
            .collect()
    }

    pub fn set_tensors(&mut self, values: Vec<Mat>) -> Result<()> {
        let slots = self.tensors_mut();
        if slots.len() != values.len() {
            return Err(Error::invalid("parameter count mismatch"));
        }
        for (slot, v) in slots.into_iter().zip(values) {
            if slot.dim() != v.dim() {
                return Err(Error::Shape {
                    op: "set_tensors",
                    left: slot.dim(),
                    right: v.dim(),
                });
            }
            *slot = v;
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.named_tensors()
            .into_iter()
            .flat_map(|(_, m)| m.iter().copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        let mut off = 0;
        for slot in self.tensors_mut() {
            let n = slot.len();
            if off + n > flat.len() {
                return Err(Error::invalid("flat parameter vector too short"));
            }
            for (dst, &src) in slot.iter_mut().zip(&flat[off..off + n]) {
                *dst = src;
            }
            off += n;
        }
        if off != flat.len() {
            return Err(Error::invalid("flat parameter vector too long"));
        }
        Ok(())
    }
}

/// Graph-derived operands shared by every forward pass.
#[derive(Clone, Debug)]
pub struct GraphContext {
    /// `A + I` pattern the attention layers aggregate over.
    pub structure: Arc<CsrMatrix>,
    /// Row-normalized `A + I` used by the readout.
    pub normalized: NormalizedAdjacency,
}

impl GraphContext {
    pub fn new(g: &AttributedGraph) -> Self {
        Self {
            structure: Arc::new(g.self_looped_structure()),
            normalized: normalize_adjacency(g),
        }
    }
}

struct BoundLayer {
    weight: Var,
    att_src: Var,
    att_dst: Var,
    bias: Var,
    spec: AttentionSpec,
}

/// Parameters registered as leaves on a tape, in [`ModelParameters`] order.
struct Bound {
    vars: Vec<Var>,
    enc_token: Var,
    dec_token: Var,
    encoder: [BoundLayer; 2],
    decoder: [BoundLayer; 2],
    readout_hidden: Var,
    readout_weight: Var,
}

fn bind(params: &ModelParameters, tape: &mut Tape) -> Bound {
    let vars: Vec<Var> = params
        .named_tensors()
        .into_iter()
        .map(|(_, m)| tape.leaf(m.clone()))
        .collect();
    let layer = |base: usize, p: &AttentionLayerParams| BoundLayer {
        weight: vars[base],
        att_src: vars[base + 1],
        att_dst: vars[base + 2],
        bias: vars[base + 3],
        spec: p.spec(),
    };
    Bound {
        enc_token: vars[0],
        encoder: [layer(1, &params.encoder[0]), layer(5, &params.encoder[1])],
        decoder: [layer(9, &params.decoder[0]), layer(13, &params.decoder[1])],
        dec_token: vars[17],
        readout_hidden: vars[18],
        readout_weight: vars[19],
        vars,
    }
}

fn attention_layer(
    tape: &mut Tape,
    ctx: &GraphContext,
    input: Var,
    layer: &BoundLayer,
    activate: bool,
) -> Result<Var> {
    let proj = tape.matmul(input, layer.weight)?;
    let agg = tape.attention(
        ctx.structure.clone(),
        proj,
        layer.att_src,
        layer.att_dst,
        layer.spec,
    )?;
    let out = tape.add_row_vector(agg, layer.bias)?;
    Ok(if activate { tape.relu(out) } else { out })
}

fn encode_on(tape: &mut Tape, ctx: &GraphContext, x: Var, b: &Bound) -> Result<Var> {
    let h1 = attention_layer(tape, ctx, x, &b.encoder[0], true)?;
    attention_layer(tape, ctx, h1, &b.encoder[1], false)
}

fn decode_on(tape: &mut Tape, ctx: &GraphContext, h: Var, b: &Bound) -> Result<Var> {
    let z1 = attention_layer(tape, ctx, h, &b.decoder[0], true)?;
    attention_layer(tape, ctx, z1, &b.decoder[1], false)
}

fn readout_on(tape: &mut Tape, ctx: &GraphContext, h: Var, b: &Bound) -> Result<Var> {
    let adj = ctx.normalized.0.clone();
    let agg = tape.spmm(adj.clone(), h)?;
    let lin = tape.matmul(agg, b.readout_hidden)?;
    let hc = tape.relu(lin);
    let agg = tape.spmm(adj, hc)?;
    let lin = tape.matmul(agg, b.readout_weight)?;
    Ok(tape.relu(lin))
}

fn check_rows(rows: &[usize], n: usize) -> Result<()> {
    match rows.iter().find(|&&r| r >= n) {
        Some(&r) => Err(Error::IndexOutOfRange { index: r, len: n }),
        None => Ok(()),
    }
}

/// Rows of `x` listed in `mask_set` replaced by the encoder token.
pub fn mask_attributes(x: &Mat, mask_set: &[usize], tokens: &MaskTokens) -> Result<Mat> {
    replace(x, mask_set, &tokens.encoder)
}

/// Rows of `h` listed in `mask_set` replaced by the decoder token.
pub fn remask(h: &Mat, mask_set: &[usize], tokens: &MaskTokens) -> Result<Mat> {
    replace(h, mask_set, &tokens.decoder)
}

fn replace(x: &Mat, rows: &[usize], token: &Mat) -> Result<Mat> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let tv = tape.leaf(token.clone());
    let out = tape.replace_rows(xv, tv, rows)?;
    Ok(tape.value(out).clone())
}

fn check_width(what: &'static str, m: &Mat, expected: usize) -> Result<()> {
    if m.ncols() != expected {
        return Err(Error::Shape {
            op: what,
            left: m.dim(),
            right: (m.nrows(), expected),
        });
    }
    Ok(())
}

/// Encoder forward pass (no dropout).
pub fn encode(ctx: &GraphContext, x: &Mat, params: &ModelParameters) -> Result<Mat> {
    check_width("encode", x, params.encoder[0].weight.nrows())?;
    let mut tape = Tape::new();
    let b = bind(params, &mut tape);
    let xv = tape.leaf(x.clone());
    let h = encode_on(&mut tape, ctx, xv, &b)?;
    Ok(tape.value(h).clone())
}

pub fn decode(ctx: &GraphContext, h: &Mat, params: &ModelParameters) -> Result<Mat> {
    check_width("decode", h, params.decoder[0].weight.nrows())?;
    let mut tape = Tape::new();
    let b = bind(params, &mut tape);
    let hv = tape.leaf(h.clone());
    let z = decode_on(&mut tape, ctx, hv, &b)?;
    Ok(tape.value(z).clone())
}

/// `C = ReLU(Â · ReLU(Â · H · W₁) · W)`.
pub fn readout(ctx: &GraphContext, h: &Mat, params: &ReadoutParams) -> Result<Mat> {
    let hc = ctx
        .normalized
        .matrix()
        .spmm(h)
        .and_then(|a| crate::autodiff::dense_matmul(&a, &params.hidden_weight))?
        .mapv(crate::autodiff::relu_scalar);
    let pre = crate::autodiff::dense_matmul(&ctx.normalized.matrix().spmm(&hc)?, &params.weight)?;
    Ok(pre.mapv(crate::autodiff::relu_scalar))
}

/// Edge probability `σ(C_i · C_j)` under the affiliation model.
pub fn edge_probability(c: &Mat, i: usize, j: usize) -> Result<f64> {
    check_rows(&[i, j], c.nrows())?;
    let s = c.row(i).dot(&c.row(j));
    Ok(1.0 / (1.0 + (-s).exp()))
}

/// Row-wise argmax; ties and all-zero rows go to the lowest index.
pub fn assign_communities(c: &Mat) -> Vec<usize> {
    c.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Number of distinct community ids in use.
pub fn count_communities(assignment: &[usize], k_max: usize) -> usize {
    let mut seen = vec![false; k_max.max(assignment.iter().max().map_or(0, |m| m + 1))];
    for &a in assignment {
        seen[a] = true;
    }
    seen.into_iter().filter(|&s| s).count()
}

/// Rows scaled to sum to one, for reporting; all-zero rows stay zero.
pub fn normalized_affiliations(c: &Mat) -> Mat {
    let mut out = c.clone();
    for mut row in out.rows_mut() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        }
    }
    out
}

/// Frozen randomness for one objective evaluation.
#[derive(Clone, Debug)]
pub struct StepPlan {
    /// Rows replaced by mask tokens (empty when masking is disabled).
    pub masked: Vec<usize>,
    /// Rows the reconstruction loss is averaged over.
    pub loss_rows: Vec<usize>,
    /// Inverted-dropout keep mask for the encoder input.
    pub dropout: Option<Mat>,
    pub triplets: TripletBatch,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub sce: f64,
    pub bpr: f64,
    pub group_sparsity: f64,
    pub total: f64,
}

/// Objective settings beyond the two weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    /// Divide the ranking loss by the number of triplets.
    pub bpr_mean: bool,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub losses: LossBreakdown,
    /// Gradients in [`ModelParameters::named_tensors`] order.
    pub grads: Vec<Mat>,
    /// Reconstruction rows with zero norm (guarded).
    pub degenerate_rows: usize,
}

/// Full training objective and its gradient for a frozen [`StepPlan`].
pub fn objective(
    ctx: &GraphContext,
    x: &Mat,
    params: &ModelParameters,
    plan: &StepPlan,
    config: ObjectiveConfig,
) -> Result<Evaluation> {
    check_width("objective", x, params.tokens.encoder.ncols())?;
    let mut tape = Tape::new();
    let b = bind(params, &mut tape);
    let xv = tape.leaf(x.clone());

    let masked = tape.replace_rows(xv, b.enc_token, &plan.masked)?;
    let input = match &plan.dropout {
        Some(keep) => tape.mul_const(masked, keep.clone())?,
        None => masked,
    };
    let h = encode_on(&mut tape, ctx, input, &b)?;

    let h_masked = tape.replace_rows(h, b.dec_token, &plan.masked)?;
    let z = decode_on(&mut tape, ctx, h_masked, &b)?;
    let sce = losses::sce_loss(x, tape.value(z), &plan.loss_rows)?;
    let sce_node = tape.scalar_fn(z, sce.loss.value, sce.loss.grad)?;

    let c = readout_on(&mut tape, ctx, h, &b)?;
    let bpr = losses::bpr_loss(tape.value(c), &plan.triplets, config.bpr_mean)?;
    let bpr_node = tape.scalar_fn(c, bpr.value, bpr.grad)?;

    let gs = losses::group_sparsity_loss(tape.value(b.readout_weight));
    let gs_node = tape.scalar_fn(b.readout_weight, gs.value, gs.grad)?;

    let total = losses::total_loss(sce.loss.value, bpr.value, gs.value, config.weights)?;
    let root = tape.weighted_sum(&[
        (sce_node, 1.0),
        (bpr_node, config.weights.alpha),
        (gs_node, config.weights.beta),
    ])?;
    let mut grads = tape.backward(root);
    Ok(Evaluation {
        losses: LossBreakdown {
            sce: sce.loss.value,
            bpr: bpr.value,
            group_sparsity: gs.value,
            total,
        },
        grads: b.vars.iter().map(|&v| grads.take(v)).collect(),
        degenerate_rows: sce.degenerate_rows,
    })
}

/// A configured model: architecture plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DagModel {
    pub config: ModelConfig,
    pub params: ModelParameters,
}

impl DagModel {
    pub fn new(config: ModelConfig, rng: &mut crate::Rng) -> Result<Self> {
        let params = ModelParameters::init(&config, rng)?;
        Ok(Self { config, params })
    }

    /// Unmasked, dropout-free affiliations.
    pub fn affiliations(&self, ctx: &GraphContext, x: &Mat) -> Result<Mat> {
        let h = encode(ctx, x, &self.params)?;
        readout(ctx, &h, &self.params.readout)
    }
}

#[cfg(test)]
mod tests;
