use ndarray::array;
use rand::seq::SliceRandom;

use super::*;
use crate::autodiff::{dropout_mask, finite_difference_check};
use crate::graph::sample_mask_set;
use crate::losses::sample_negatives;
use crate::seeded_rng;

fn random_graph(n: usize, d: usize, p: f64, seed: u64) -> AttributedGraph {
    let mut rng = seeded_rng(seed);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random_bool(p) {
                edges.push((i, j));
            }
        }
    }
    // Keep every node attached so negatives and attention are nontrivial.
    for i in 1..n {
        edges.push((i - 1, i));
    }
    let x = Mat::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    AttributedGraph::new(n, edges, x, None).unwrap()
}

fn small_config(d: usize) -> ModelConfig {
    ModelConfig {
        n_features: d,
        hidden: 6,
        heads: 2,
        readout_hidden: 5,
        k_max: 4,
        negative_slope: 0.2,
    }
}

#[test]
fn config_validation() {
    let mut c = small_config(3);
    assert!(c.validate().is_ok());
    c.hidden = 7;
    assert!(c.validate().is_err());
    let mut c = small_config(3);
    c.k_max = 1;
    assert!(c.validate().is_err());
}

#[test]
fn mask_attributes_examples() {
    let mut rng = seeded_rng(0);
    let params = ModelParameters::init(&small_config(2), &mut rng).unwrap();
    let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
    assert_eq!(mask_attributes(&x, &[], &params.tokens).unwrap(), x);
    let all = mask_attributes(&x, &[0, 1, 2], &params.tokens).unwrap();
    for row in all.rows() {
        assert_eq!(row, params.tokens.encoder.row(0));
    }
    let one = mask_attributes(&x, &[1], &params.tokens).unwrap();
    assert_eq!(one.row(0), x.row(0));
    assert_eq!(one.row(2), x.row(2));
    assert_eq!(one.row(1), params.tokens.encoder.row(0));
    assert!(matches!(
        mask_attributes(&x, &[3], &params.tokens),
        Err(Error::IndexOutOfRange { .. })
    ));
}

#[test]
fn remask_examples() {
    let mut rng = seeded_rng(1);
    let params = ModelParameters::init(&small_config(2), &mut rng).unwrap();
    let h = Mat::from_shape_fn((4, 6), |(i, j)| (i * 6 + j) as f64);
    assert_eq!(remask(&h, &[], &params.tokens).unwrap(), h);
    let out = remask(&h, &[2], &params.tokens).unwrap();
    assert_eq!(out.row(2), params.tokens.decoder.row(0));
    assert_eq!(out.row(3), h.row(3));
}

#[test]
fn isolated_node_encoding_depends_only_on_itself() {
    let mut rng = seeded_rng(2);
    let cfg = small_config(3);
    let params = ModelParameters::init(&cfg, &mut rng).unwrap();
    let x = array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.5], [0.3, 0.3, 0.3]];
    // Node 2 is isolated; changing its neighbors' attributes must not move it.
    let g = AttributedGraph::new(3, [(0, 1)], x.clone(), None).unwrap();
    let ctx = GraphContext::new(&g);
    let h = encode(&ctx, &x, &params).unwrap();
    let mut x2 = x.clone();
    x2.row_mut(0).fill(9.0);
    x2.row_mut(1).fill(-4.0);
    let h2 = encode(&ctx, &x2, &params).unwrap();
    assert_eq!(h.row(2), h2.row(2));

    // Single-node graph: attention over the self-loop only.
    let single =
        AttributedGraph::new(1, [], x.slice(ndarray::s![2..3, ..]).to_owned(), None).unwrap();
    let h1 = encode(&GraphContext::new(&single), single.attributes(), &params).unwrap();
    for (a, b) in h1.row(0).iter().zip(h.row(2)) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn permute_graph(g: &AttributedGraph, perm: &[usize]) -> AttributedGraph {
    // perm[old] = new
    let mut x = Mat::zeros(g.attributes().dim());
    for (old, &new) in perm.iter().enumerate() {
        x.row_mut(new).assign(&g.attributes().row(old));
    }
    let edges: Vec<_> = g.edges().map(|(u, v)| (perm[u], perm[v])).collect();
    AttributedGraph::new(g.n_nodes(), edges, x, None).unwrap()
}

#[test]
fn forward_passes_are_permutation_equivariant() {
    let g = random_graph(9, 3, 0.3, 3);
    let mut rng = seeded_rng(4);
    let params = ModelParameters::init(&small_config(3), &mut rng).unwrap();
    let mut perm: Vec<usize> = (0..9).collect();
    perm.shuffle(&mut rng);
    let gp = permute_graph(&g, &perm);
    let (ctx, ctxp) = (GraphContext::new(&g), GraphContext::new(&gp));

    let h = encode(&ctx, g.attributes(), &params).unwrap();
    let hp = encode(&ctxp, gp.attributes(), &params).unwrap();
    let z = decode(&ctx, &h, &params).unwrap();
    let zp = decode(&ctxp, &hp, &params).unwrap();
    let c = readout(&ctx, &h, &params.readout).unwrap();
    let cp = readout(&ctxp, &hp, &params.readout).unwrap();
    for (old, &new) in perm.iter().enumerate() {
        for (a, b) in [(&h, &hp), (&z, &zp), (&c, &cp)] {
            for (u, v) in a.row(old).iter().zip(b.row(new)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn evaluation_forward_is_deterministic() {
    let g = random_graph(10, 3, 0.3, 5);
    let model = DagModel::new(small_config(3), &mut seeded_rng(6)).unwrap();
    let ctx = GraphContext::new(&g);
    let a = model.affiliations(&ctx, g.attributes()).unwrap();
    let b = model.affiliations(&ctx, g.attributes()).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|&v| v >= 0.0 && v.is_finite()));
}

/// FD check of `Σ probe ⊙ f(params)` for a sub-network output.
fn check_subnetwork(which: &str) -> f64 {
    let g = random_graph(8, 3, 0.3, 7);
    let ctx = GraphContext::new(&g);
    let mut rng = seeded_rng(8);
    let params = ModelParameters::init(&small_config(3), &mut rng).unwrap();
    let h0 = encode(&ctx, g.attributes(), &params).unwrap();

    let run = |p: &ModelParameters| -> (f64, Vec<Mat>) {
        let mut tape = Tape::new();
        let b = bind(p, &mut tape);
        let out = match which {
            "encode" => {
                let x = tape.leaf(g.attributes().clone());
                encode_on(&mut tape, &ctx, x, &b).unwrap()
            }
            _ => {
                let h = tape.leaf(h0.clone());
                decode_on(&mut tape, &ctx, h, &b).unwrap()
            }
        };
        let probe = Mat::from_shape_fn(tape.value(out).dim(), |(i, j)| {
            ((i * 7 + j * 3) % 5) as f64 - 2.0
        });
        let value = (tape.value(out) * &probe).sum();
        let root = tape.scalar_fn(out, value, probe).unwrap();
        let mut grads = tape.backward(root);
        (value, b.vars.iter().map(|&v| grads.take(v)).collect())
    };
    let (_, grads) = run(&params);
    let analytic: Vec<f64> = grads.iter().flat_map(|m| m.iter().copied()).collect();
    let mut probe_params = params.clone();
    finite_difference_check(
        |flat| {
            probe_params.unflatten(flat).unwrap();
            run(&probe_params).0
        },
        &params.flatten(),
        &analytic,
        1e-5,
        None,
    )
    .unwrap()
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let err = check_subnetwork("encode");
    assert!(err < 1e-4, "{err}");
}

#[test]
fn decoder_gradients_match_finite_differences() {
    let err = check_subnetwork("decode");
    assert!(err < 1e-4, "{err}");
}

#[test]
fn readout_zero_column_transport() {
    let g = random_graph(12, 3, 0.3, 9);
    let ctx = GraphContext::new(&g);
    let mut rng = seeded_rng(10);
    let mut params = ModelParameters::init(&small_config(3), &mut rng).unwrap();
    params.readout.weight.column_mut(1).fill(0.0);
    params.readout.weight.column_mut(3).fill(0.0);
    let h = Mat::from_shape_fn((12, 6), |_| rng.random_range(-3.0..3.0));
    let c = readout(&ctx, &h, &params.readout).unwrap();
    for j in [1, 3] {
        assert!(c.column(j).iter().all(|v| v.to_bits() == 0));
    }
    params.readout.weight.fill(0.0);
    assert_eq!(
        readout(&ctx, &h, &params.readout).unwrap(),
        Mat::zeros((12, 4))
    );
}

#[test]
fn readout_matches_dense_oracle() {
    let g = random_graph(6, 2, 0.4, 11);
    let ctx = GraphContext::new(&g);
    let mut rng = seeded_rng(12);
    let params = ModelParameters::init(&small_config(2), &mut rng).unwrap();
    let h = Mat::from_shape_fn((6, 6), |_| rng.random_range(-1.0..1.0));

    // Dense Â built straight from the adjacency definition.
    let mut a_hat = Mat::eye(6);
    for (u, v) in g.edges() {
        a_hat[[u, v]] = 1.0;
        a_hat[[v, u]] = 1.0;
    }
    for mut row in a_hat.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    let hc = a_hat
        .dot(&h)
        .dot(&params.readout.hidden_weight)
        .mapv(|v| v.max(0.0));
    let want = a_hat
        .dot(&hc)
        .dot(&params.readout.weight)
        .mapv(|v| v.max(0.0));
    let got = readout(&ctx, &h, &params.readout).unwrap();
    let diff = (&got - &want).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn edge_probability_examples() {
    let c = array![[0.0, 2.0], [3.0, 0.0], [1.0, 0.0], [1.0, 0.0]];
    assert_eq!(edge_probability(&c, 0, 1).unwrap(), 0.5);
    let p = edge_probability(&c, 2, 3).unwrap();
    assert!((p - 0.731_058_578_630_004_9).abs() < 1e-12);
    assert_eq!(
        edge_probability(&c, 1, 2).unwrap(),
        edge_probability(&c, 2, 1).unwrap()
    );
    assert!(edge_probability(&c, 0, 9).is_err());
}

#[test]
fn assignment_and_counting() {
    let c = array![[0.1, 0.7, 0.2], [0.0, 0.0, 0.0], [0.5, 0.5, 0.1]];
    assert_eq!(assign_communities(&c), vec![1, 0, 0]);
    assert_eq!(assign_communities(&(c.clone() * 3.5)), vec![1, 0, 0]);
    assert_eq!(count_communities(&[0, 0, 1], 8), 2);
    assert_eq!(count_communities(&[5, 5, 5], 8), 1);
    assert_eq!(count_communities(&[0, 1, 2, 3], 8), 4);
}

#[test]
fn normalized_affiliations_sum_to_one() {
    let c = array![[1.0, 3.0], [0.0, 0.0]];
    let n = normalized_affiliations(&c);
    assert_eq!(n.row(0).to_vec(), vec![0.25, 0.75]);
    assert_eq!(n.row(1).to_vec(), vec![0.0, 0.0]);
}

fn frozen_plan(g: &AttributedGraph, seed: u64) -> StepPlan {
    let mut rng = seeded_rng(seed);
    let masked = sample_mask_set(g.n_nodes(), 0.5, &mut rng).unwrap();
    StepPlan {
        loss_rows: masked.clone(),
        masked,
        dropout: Some(dropout_mask(g.n_nodes(), g.n_features(), 0.2, &mut rng)),
        triplets: sample_negatives(g, &mut rng).unwrap(),
    }
}

fn objective_fd_error(seed: u64) -> f64 {
    let g = random_graph(8, 3, 0.3, seed);
    let ctx = GraphContext::new(&g);
    let params = ModelParameters::init(&small_config(3), &mut seeded_rng(seed + 1)).unwrap();
    let plan = frozen_plan(&g, seed + 2);
    let config = ObjectiveConfig {
        weights: LossWeights {
            alpha: 0.3,
            beta: 0.2,
        },
        bpr_mean: false,
    };
    let eval = objective(&ctx, g.attributes(), &params, &plan, config).unwrap();
    let analytic: Vec<f64> = eval.grads.iter().flat_map(|m| m.iter().copied()).collect();
    let mut probe = params.clone();
    finite_difference_check(
        |flat| {
            probe.unflatten(flat).unwrap();
            objective(&ctx, g.attributes(), &probe, &plan, config)
                .unwrap()
                .losses
                .total
        },
        &params.flatten(),
        &analytic,
        1e-5,
        None,
    )
    .unwrap()
}

#[test]
fn objective_gradient_matches_finite_differences() {
    // Instances are generic: no ReLU input lies within eps of zero. Some
    // other seeds (13, for one) place a kink inside the difference stencil.
    for seed in 0..8 {
        let err = objective_fd_error(seed);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn zero_weights_cut_the_readout_path() {
    let g = random_graph(8, 3, 0.3, 16);
    let ctx = GraphContext::new(&g);
    let params = ModelParameters::init(&small_config(3), &mut seeded_rng(17)).unwrap();
    let plan = frozen_plan(&g, 18);
    let zero = ObjectiveConfig {
        weights: LossWeights {
            alpha: 0.0,
            beta: 0.0,
        },
        bpr_mean: false,
    };
    let eval = objective(&ctx, g.attributes(), &params, &plan, zero).unwrap();
    assert_eq!(eval.losses.total, eval.losses.sce);
    let names = params.named_tensors();
    for ((name, _), grad) in names.iter().zip(&eval.grads) {
        if name.starts_with("readout") {
            assert!(grad.iter().all(|&v| v == 0.0), "{name}");
        }
    }
    // The encoder gradient equals the pure reconstruction gradient.
    let full = ObjectiveConfig {
        weights: LossWeights {
            alpha: 1.0,
            beta: 1.0,
        },
        bpr_mean: false,
    };
    let with_bpr = objective(&ctx, g.attributes(), &params, &plan, full).unwrap();
    assert_ne!(with_bpr.grads[1], eval.grads[1]);
}

#[test]
fn remasked_rows_receive_no_decoder_gradient() {
    let g = random_graph(8, 3, 0.3, 19);
    let ctx = GraphContext::new(&g);
    let params = ModelParameters::init(&small_config(3), &mut seeded_rng(20)).unwrap();
    let h = encode(&ctx, g.attributes(), &params).unwrap();
    let mut tape = Tape::new();
    let b = bind(&params, &mut tape);
    let hv = tape.leaf(h);
    let masked = tape.replace_rows(hv, b.dec_token, &[2, 5]).unwrap();
    let z = decode_on(&mut tape, &ctx, masked, &b).unwrap();
    let sce = crate::losses::sce_loss(g.attributes(), tape.value(z), &[2, 5]).unwrap();
    let root = tape.scalar_fn(z, sce.loss.value, sce.loss.grad).unwrap();
    let grads = tape.backward(root);
    let gh = grads.get(hv);
    assert!(gh.row(2).iter().all(|&v| v == 0.0));
    assert!(gh.row(5).iter().all(|&v| v == 0.0));
    assert!(gh.row(3).iter().any(|&v| v != 0.0));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let model = DagModel::new(small_config(3), &mut seeded_rng(21)).unwrap();
    let bytes = model.to_bytes();
    let back = DagModel::from_bytes(&bytes).unwrap();
    assert_eq!(back, model);
    assert_eq!(back.to_bytes(), bytes);
    for (a, b) in model.params.flatten().iter().zip(back.params.flatten()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn corrupt_checkpoints_rejected() {
    let model = DagModel::new(small_config(3), &mut seeded_rng(22)).unwrap();
    let bytes = model.to_bytes();
    assert!(DagModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(DagModel::from_bytes(&bad).is_err());
    let mut extra = bytes;
    extra.push(0);
    assert!(DagModel::from_bytes(&extra).is_err());
}
