//! Fit loop and unsupervised checkpoint selection.

use std::fmt::Write as _;

use log::{debug, info};

use crate::autodiff::{dropout_mask, AdamConfig, AdamState};
use crate::graph::sample_mask_set;
use crate::losses::{sample_negatives, LossWeights};
use crate::metrics::PartitionScores;
use crate::model::{
    assign_communities, objective, DagModel, GraphContext, LossBreakdown, ModelConfig,
    ObjectiveConfig, StepPlan,
};
use crate::{seeded_rng, AttributedGraph, Error, Result, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mask_fraction: f64,
    pub max_epochs: usize,
    pub eval_every: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub beta: f64,
    pub k_max: usize,
    pub hidden: usize,
    pub heads: usize,
    pub readout_hidden: usize,
    pub dropout: f64,
    pub seed: u64,
    /// When false no rows are replaced by tokens and the reconstruction loss
    /// covers every node.
    pub masking: bool,
    pub bpr_mean: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mask_fraction: 0.5,
            max_epochs: 500,
            eval_every: 50,
            lr: 1e-3,
            weight_decay: 0.0,
            alpha: 1e-2,
            beta: 5e-3,
            k_max: 32,
            hidden: 64,
            heads: 4,
            readout_hidden: 64,
            dropout: 0.2,
            seed: 0,
            masking: true,
            bpr_mean: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_fraction > 0.0 && self.mask_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "mask_fraction must be in (0, 1], got {}",
                self.mask_fraction
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every must be at least 1"));
        }
        if self.max_epochs < self.eval_every {
            return Err(Error::invalid(format!(
                "max_epochs ({}) must be at least eval_every ({})",
                self.max_epochs, self.eval_every
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        self.weights().validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn model_config(&self, n_features: usize) -> ModelConfig {
        ModelConfig {
            n_features,
            hidden: self.hidden,
            heads: self.heads,
            readout_hidden: self.readout_hidden,
            k_max: self.k_max,
            negative_slope: 0.2,
        }
    }

    fn objective_config(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            weights: self.weights(),
            bpr_mean: self.bpr_mean,
        }
    }
}

/// Everything that changes from epoch to epoch.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: DagModel,
    pub adam: AdamState,
    pub rng: Rng,
    /// Completed epochs.
    pub epoch: usize,
    config: TrainConfig,
    ctx: GraphContext,
}

impl TrainState {
    /// Initializes parameters and optimizer from `config.seed`.
    pub fn new(g: &AttributedGraph, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if g.n_edges() == 0 {
            return Err(Error::invalid("cannot train on a graph without edges"));
        }
        let mut rng = seeded_rng(config.seed);
        let model = DagModel::new(config.model_config(g.n_features()), &mut rng)?;
        let adam = AdamState::new(
            AdamConfig {
                lr: config.lr,
                weight_decay: config.weight_decay,
                ..AdamConfig::default()
            },
            &model.params.tensors(),
        );
        Ok(Self {
            model,
            adam,
            rng,
            epoch: 0,
            config: config.clone(),
            ctx: GraphContext::new(g),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn plan(&mut self, g: &AttributedGraph) -> Result<StepPlan> {
        let n = g.n_nodes();
        let (masked, loss_rows) = if self.config.masking {
            let m = sample_mask_set(n, self.config.mask_fraction, &mut self.rng)?;
            (m.clone(), m)
        } else {
            (Vec::new(), (0..n).collect())
        };
        let dropout = (self.config.dropout > 0.0)
            .then(|| dropout_mask(n, g.n_features(), self.config.dropout, &mut self.rng));
        let triplets = sample_negatives(g, &mut self.rng)?;
        Ok(StepPlan {
            masked,
            loss_rows,
            dropout,
            triplets,
        })
    }

    /// One optimizer step on a freshly sampled mask, dropout and negatives.
    pub fn train_epoch(&mut self, g: &AttributedGraph) -> Result<LossBreakdown> {
        let epoch = self.epoch + 1;
        let plan = self.plan(g)?;
        let eval = objective(
            &self.ctx,
            g.attributes(),
            &self.model.params,
            &plan,
            self.config.objective_config(),
        )?;
        let l = eval.losses;
        for (component, value) in [
            ("sce", l.sce),
            ("bpr", l.bpr),
            ("group_sparsity", l.group_sparsity),
            ("total", l.total),
        ] {
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, component });
            }
        }
        let mut tensors = self.model.params.tensors();
        self.adam
            .step(&mut tensors, &eval.grads)
            .map_err(|_| Error::Divergence {
                epoch,
                component: "gradient",
            })?;
        self.model.params.set_tensors(tensors)?;
        self.epoch = epoch;
        Ok(l)
    }

    /// Scores the current parameters with masking and dropout off.
    pub fn checkpoint(&self, g: &AttributedGraph) -> Result<Checkpoint> {
        let c = self.model.affiliations(&self.ctx, g.attributes())?;
        let partition = assign_communities(&c);
        let scores = evaluate_partition(g, &partition)?;
        Ok(Checkpoint {
            epoch: self.epoch,
            parameters: self.model.to_bytes(),
            partition,
            scores,
        })
    }
}

/// Unsupervised scores of a partition; supervised fields are left empty.
pub fn evaluate_partition(g: &AttributedGraph, partition: &[usize]) -> Result<PartitionScores> {
    PartitionScores::compute(g, partition, None)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    /// [`DagModel::to_bytes`] of the parameters at this epoch.
    pub parameters: Vec<u8>,
    pub partition: Vec<usize>,
    pub scores: PartitionScores,
}

impl Checkpoint {
    /// Modularity × CH, `None` when invalid (K < 2 or non-finite).
    pub fn selection_score(&self) -> Option<f64> {
        self.scores.product
    }

    pub fn model(&self) -> Result<DagModel> {
        DagModel::from_bytes(&self.parameters)
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub best: Checkpoint,
    /// One entry per evaluation, in epoch order.
    pub history: Vec<Checkpoint>,
    /// Loss components of every epoch.
    pub losses: Vec<LossBreakdown>,
}

/// Index of the highest valid score, earliest on ties; the first entry
/// when no score is valid.
pub fn select_best(history: &[Checkpoint]) -> Option<usize> {
    if history.is_empty() {
        return None;
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in history.iter().enumerate() {
        if let Some(s) = c.selection_score() {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
    }
    Some(best.map_or(0, |(i, _)| i))
}

pub fn fit(g: &AttributedGraph, config: &TrainConfig) -> Result<FitResult> {
    let mut state = TrainState::new(g, config)?;
    let mut losses = Vec::with_capacity(config.max_epochs);
    let mut history = Vec::new();
    for _ in 0..config.max_epochs {
        let l = state.train_epoch(g)?;
        debug!(
            "epoch {} sce={} bpr={} gs={} total={}",
            state.epoch, l.sce, l.bpr, l.group_sparsity, l.total
        );
        losses.push(l);
        if state.epoch % config.eval_every == 0 {
            let ckpt = state.checkpoint(g)?;
            info!(
                "epoch {} K={} modularity={} product={:?}",
                ckpt.epoch, ckpt.scores.k, ckpt.scores.modularity, ckpt.scores.product
            );
            history.push(ckpt);
        }
    }
    let best = history[select_best(&history).expect("validated max_epochs >= eval_every")].clone();
    Ok(FitResult {
        best,
        history,
        losses,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))
}

/// Tab-separated `epoch K modularity ch product`, one line per checkpoint.
/// Missing values are written as `NA`.
pub fn format_history(history: &[Checkpoint]) -> String {
    let mut out = String::new();
    for c in history {
        let s = &c.scores;
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            c.epoch,
            s.k,
            s.modularity,
            opt(s.calinski_harabasz),
            opt(s.product)
        )
        .expect("writing to a String");
    }
    out
}

/// `node_id community_id` per line.
pub fn format_partition(partition: &[usize]) -> String {
    let mut out = String::new();
    for (i, c) in partition.iter().enumerate() {
        writeln!(out, "{i} {c}").expect("writing to a String");
    }
    out
}

/// Reads a partition file. Accepts `node_id community_id` lines in any order
/// (every node exactly once) or a bare label per line.
pub fn parse_partition(path: &std::path::Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut pairs = Vec::new();
    let mut bare = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| bad(i + 1, format!("bad integer {s:?}")))
        };
        match fields.as_slice() {
            [c] => bare.push(num(c)?),
            [n, c] => pairs.push((i + 1, num(n)?, num(c)?)),
            _ => {
                return Err(bad(
                    i + 1,
                    format!("expected 1 or 2 fields, got {}", fields.len()),
                ))
            }
        }
    }
    if !bare.is_empty() && !pairs.is_empty() {
        return Err(bad(0, "mixes one- and two-column lines".into()));
    }
    if pairs.is_empty() {
        return Ok(bare);
    }
    let mut out = vec![None; pairs.len()];
    for (line, node, c) in pairs {
        match out.get_mut(node) {
            Some(slot @ None) => *slot = Some(c),
            Some(Some(_)) => return Err(bad(line, format!("node {node} listed twice"))),
            None => return Err(bad(line, format!("node id {node} out of range"))),
        }
    }
    Ok(out
        .into_iter()
        .map(|c| c.expect("every slot filled"))
        .collect())
}
