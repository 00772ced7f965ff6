use llmhg::hypergraph::{incidence, Hyperedge, MultiViewHypergraph};
use llmhg::model::{
    fuse, hyperedge_convolution, predict_scores, prediction_loss, readout_user, Example, FusionParams,
    Gradients, ItemEmbeddingTable, ModelConfig, ModelParams, Variant,
};
use llmhg::Error;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn graph(n: usize, edges: &[&[usize]]) -> MultiViewHypergraph {
    MultiViewHypergraph {
        user_id: "u".into(),
        vertices: (0..n).collect(),
        views: vec!["v".into()],
        edges: edges
            .iter()
            .enumerate()
            .map(|(id, m)| Hyperedge {
                id,
                view: "v".into(),
                label: format!("e{id}"),
                members: m.to_vec(),
                text_embedding: None,
            })
            .collect(),
    }
}

#[test]
fn convolution_single_edge_by_hand() {
    let hg = graph(2, &[&[0, 1]]);
    let t = incidence(&hg).unwrap();
    let x = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
    let out = hyperedge_convolution(&x, &t, &[DMatrix::identity(1, 1)], false).unwrap();
    assert!((out[(0, 0)] - 0.5).abs() < 1e-15);
    assert!((out[(1, 0)] - 0.5).abs() < 1e-15);
}

#[test]
fn convolution_identity_hypergraph_is_identity() {
    let hg = graph(3, &[&[0], &[1], &[2]]);
    let t = incidence(&hg).unwrap();
    let x = DMatrix::from_row_slice(3, 2, &[1.0, -2.0, 0.5, 3.0, 7.0, 0.25]);
    let out = hyperedge_convolution(&x, &t, &[DMatrix::identity(2, 2)], false).unwrap();
    assert!((out - x).abs().max() < 1e-15);
}

#[test]
fn convolution_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let n = 5;
        let hg = graph(n, &[&[0, 1, 2], &[2, 3], &[1, 4]]);
        let w = DVector::from_fn(3, |_, _| rng.random_range(0.1..2.0));
        let t = incidence(&hg).unwrap().with_weights(w.clone());
        let x = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
        let theta = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let got = hyperedge_convolution(&x, &t, std::slice::from_ref(&theta), true).unwrap();

        // Entry-wise oracle.
        let h = &t.incidence;
        let dv: Vec<f64> = (0..n).map(|v| (0..3).map(|e| w[e] * h[(v, e)]).sum()).collect();
        let de: Vec<f64> = (0..3).map(|e| (0..n).map(|v| h[(v, e)]).sum()).collect();
        let mut p = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                for e in 0..3 {
                    p[(i, j)] += h[(i, e)] * w[e] * h[(j, e)] / de[e] / (dv[i] * dv[j]).sqrt();
                }
            }
        }
        let mut want = DMatrix::<f64>::zeros(n, 3);
        for i in 0..n {
            for c in 0..3 {
                let mut s = 0.0;
                for j in 0..n {
                    for k in 0..3 {
                        s += p[(i, j)] * x[(j, k)] * theta[(k, c)];
                    }
                }
                want[(i, c)] = f64::max(s, 0.0);
            }
        }
        assert!((got - want).abs().max() < 1e-10);
    }
}

#[test]
fn convolution_shape_error() {
    let t = incidence(&graph(2, &[&[0, 1]])).unwrap();
    let x = DMatrix::zeros(3, 2);
    assert!(matches!(
        hyperedge_convolution(&x, &t, &[DMatrix::identity(2, 2)], true),
        Err(Error::Shape(_))
    ));
}

#[test]
fn convolution_keeps_constant_rows_on_a_component() {
    // Θ = I, no nonlinearity, unit weights: D^{-1/2} X with constant rows is
    // an eigenvector, so D^{1/2}-scaled constant rows are preserved.
    let hg = graph(4, &[&[0, 1, 2], &[1, 2, 3], &[0, 3]]);
    let t = incidence(&hg).unwrap();
    let sqrt_d = t.vertex_degrees.map(f64::sqrt);
    let x = DMatrix::from_fn(4, 2, |r, c| sqrt_d[r] * (c as f64 + 1.5));
    let out = hyperedge_convolution(&x, &t, &[DMatrix::identity(2, 2)], false).unwrap();
    for r in 0..4 {
        for c in 0..2 {
            assert!((out[(r, c)] / sqrt_d[r] - (c as f64 + 1.5)).abs() < 1e-12);
        }
    }
}

#[test]
fn readout_examples() {
    let t = incidence(&graph(3, &[&[0, 1, 2]])).unwrap();
    let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]);
    let u = readout_user(&x, &t);
    assert!((u[0] - 3.0).abs() < 1e-15 && (u[1] - 5.0).abs() < 1e-15);

    let single = incidence(&graph(1, &[&[0]])).unwrap();
    let x1 = DMatrix::from_row_slice(1, 2, &[0.3, -0.7]);
    assert_eq!(readout_user(&x1, &single), DVector::from_vec(vec![0.3, -0.7]));

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let hg = graph(4, &[&[0, 1], &[1, 2]]);
    let w = DVector::from_vec(vec![0.4, 1.7]);
    let t = incidence(&hg).unwrap().with_weights(w);
    let x = DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
    let weights = [0.4, 2.1, 1.7, 1.0];
    let total: f64 = weights.iter().sum();
    let u = readout_user(&x, &t);
    for c in 0..3 {
        let want: f64 = (0..4).map(|r| weights[r] * x[(r, c)]).sum::<f64>() / total;
        assert!((u[c] - want).abs() < 1e-14);
    }
}

#[test]
fn fuse_examples() {
    let a = DVector::from_vec(vec![1.0, -2.0]);
    let b = DVector::from_vec(vec![3.0, 4.0]);
    let mid = fuse(&a, &b, &FusionParams::zeros(2));
    assert_eq!(mid, DVector::from_vec(vec![2.0, 1.0]));

    let mut saturated = FusionParams::zeros(2);
    saturated.bias.fill(800.0);
    assert_eq!(fuse(&a, &b, &saturated), a);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = FusionParams {
        weight: DMatrix::from_fn(2, 4, |_, _| rng.random_range(-1.0..1.0)),
        bias: DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)),
    };
    let u = fuse(&a, &b, &f);
    let cat = [a[0], a[1], b[0], b[1]];
    for r in 0..2 {
        let z: f64 = f.bias[r] + (0..4).map(|c| f.weight[(r, c)] * cat[c]).sum::<f64>();
        let g = 1.0 / (1.0 + (-z).exp());
        assert!((u[r] - (g * a[r] + (1.0 - g) * b[r])).abs() < 1e-14);
    }
}

#[test]
fn scores_examples() {
    let table = ItemEmbeddingTable {
        matrix: DMatrix::from_column_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
    };
    let s = predict_scores(&table.vector(1), &table);
    assert_eq!(s.argmax().0, 1);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let table = ItemEmbeddingTable::random(30, 6, 1.0, &mut rng);
    let u = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
    let s = predict_scores(&u, &table);
    for i in 0..30 {
        let want: f64 = (0..6).map(|k| u[k] * table.matrix[(k, i)]).sum();
        assert!((s[i] - want).abs() < 1e-13);
    }
    let scaled = predict_scores(&(&u * 3.5), &table);
    assert_eq!(scaled.argmax().0, s.argmax().0);
}

#[test]
fn prediction_loss_examples() {
    assert!((prediction_loss(0.5, &[]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(prediction_loss(1.0 - 1e-12, &[1e-12, 1e-12]).unwrap() < 1e-6);
    assert!(matches!(prediction_loss(f64::NAN, &[]), Err(Error::Numerical(_))));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let pos: f64 = rng.random_range(0.01..0.99);
        let negs: Vec<f64> = (0..7).map(|_| rng.random_range(0.01..0.99)).collect();
        let mut s = pos.ln();
        for q in &negs {
            s += (1.0 - q).ln();
        }
        assert!((prediction_loss(pos, &negs).unwrap() + s / 8.0).abs() < 1e-12);
    }
}

struct Instance {
    params: ModelParams,
    graph: MultiViewHypergraph,
    history: Vec<usize>,
    target: usize,
    negatives: Vec<usize>,
    cfg: ModelConfig,
}

fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 4;
    let n_items = 14;
    let mut params = ModelParams::init(n_items, d, 1, 0.6, 0.3, &mut rng);
    let mut jitter = |m: &mut DMatrix<f64>, s: f64| m.apply(|v| *v += rng.random_range(-s..s));
    jitter(&mut params.kernel.phi, 0.3);
    jitter(&mut params.cut.head, 0.5);
    jitter(&mut params.thetas[0], 0.4);
    jitter(&mut params.fusion.weight, 0.5);
    params.kernel.mu = rng.random_range(0.8..2.5);
    params.gate.vector = DVector::from_fn(d, |_, _| rng.random_range(-0.5..0.5));
    params.gate.bias = rng.random_range(-0.5..0.5);
    params.cut.bias = rng.random_range(-0.5..0.5);
    params.fusion.bias = DVector::from_fn(d, |_, _| rng.random_range(-0.5..0.5));

    let history: Vec<usize> = rand::seq::index::sample(&mut rng, n_items, 6).into_vec();
    let mut edges = Vec::new();
    for id in 0..3 {
        let size = rng.random_range(1..=4);
        let mut members = rand::seq::index::sample(&mut rng, 6, size).into_vec();
        members.sort_unstable();
        let text = (id != 1).then(|| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
        edges.push(Hyperedge {
            id,
            view: "v".into(),
            label: format!("e{id}"),
            members,
            text_embedding: text,
        });
    }
    let graph = MultiViewHypergraph {
        user_id: "u".into(),
        vertices: history.clone(),
        views: vec!["v".into()],
        edges,
    };
    let rest: Vec<usize> = (0..n_items).filter(|i| !history.contains(i)).collect();
    let target = rest[0];
    let negatives = rest[1..5].to_vec();
    let cfg = ModelConfig {
        beta: rng.random_range(0.2..0.9),
        alpha: rng.random_range(0.5..1.5),
        variant: Variant::Full,
        relu: true,
    };
    Instance {
        params,
        graph,
        history,
        target,
        negatives,
        cfg,
    }
}

fn slots(p: &mut ModelParams) -> Vec<&mut f64> {
    p.table
        .matrix
        .iter_mut()
        .chain(p.kernel.phi.iter_mut())
        .chain(p.gate.vector.iter_mut())
        .chain(std::iter::once(&mut p.gate.bias))
        .chain(p.cut.head.iter_mut())
        .chain(std::iter::once(&mut p.cut.bias))
        .chain(p.thetas.iter_mut().flat_map(|t| t.iter_mut()))
        .chain(p.fusion.weight.iter_mut())
        .chain(p.fusion.bias.iter_mut())
        .chain(std::iter::once(&mut p.encoder.decay_logit))
        .collect()
}

fn flatten(g: &Gradients, n_items: usize, d: usize) -> Vec<f64> {
    let mut table = DMatrix::zeros(d, n_items);
    for (&item, v) in &g.table {
        table.set_column(item, v);
    }
    table
        .iter()
        .chain(g.phi.iter())
        .chain(g.gate_vector.iter())
        .chain(std::iter::once(&g.gate_bias))
        .chain(g.cut_head.iter())
        .chain(std::iter::once(&g.cut_bias))
        .chain(g.thetas.iter().flat_map(|t| t.iter()))
        .chain(g.fusion_weight.iter())
        .chain(g.fusion_bias.iter())
        .chain(std::iter::once(&g.decay_logit))
        .copied()
        .collect()
}

fn check_gradients(inst: &Instance, frozen: Option<&DVector<f64>>) -> f64 {
    let ex = Example {
        history: &inst.history,
        graph: Some(&inst.graph),
        target: inst.target,
        negatives: &inst.negatives,
        frozen_weights: frozen,
    };
    let (_, grads) = inst.params.loss_and_grad(&inst.cfg, &ex).unwrap();
    let analytic = flatten(&grads, inst.params.table.n_items(), inst.params.dim());
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = inst.params.clone();
    let count = slots(&mut probe).len();
    assert_eq!(count, analytic.len());
    for k in 0..count {
        let orig = *slots(&mut probe)[k];
        *slots(&mut probe)[k] = orig + h;
        let up = probe.loss(&inst.cfg, &ex).unwrap().total;
        *slots(&mut probe)[k] = orig - h;
        let down = probe.loss(&inst.cfg, &ex).unwrap().total;
        *slots(&mut probe)[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[k];
        // The floor keeps round-off on exactly-zero gradients (about 1e-10
        // with h = 1e-5) from counting as relative error.
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn analytic_gradients_match_finite_differences() {
    for seed in 0..20 {
        let inst = random_instance(seed);
        let worst = check_gradients(&inst, None);
        assert!(worst < 1e-4, "seed {seed}: worst relative error {worst:e}");
    }
}

#[test]
fn gradients_with_frozen_weights_and_pure_structure() {
    for seed in 100..105 {
        let mut inst = random_instance(seed);
        let (_, w) = inst.params.edge_weights(&inst.cfg, &inst.history, &inst.graph).unwrap();
        let worst = check_gradients(&inst, Some(&w));
        assert!(worst < 1e-4, "seed {seed}: frozen {worst:e}");
        inst.cfg.alpha = 0.0;
        let worst = check_gradients(&inst, None);
        assert!(worst < 1e-4, "seed {seed}: alpha=0 {worst:e}");
        inst.cfg.alpha = 1.0;
        inst.cfg.variant = Variant::BaseOnly;
        let worst = check_gradients(&inst, None);
        assert!(worst < 1e-4, "seed {seed}: base-only {worst:e}");
    }
}

#[test]
fn alpha_zero_skips_prediction() {
    let inst = random_instance(7);
    let cfg = ModelConfig { alpha: 0.0, ..inst.cfg };
    let ex = Example {
        history: &inst.history,
        graph: Some(&inst.graph),
        target: inst.target,
        negatives: &inst.negatives,
        frozen_weights: None,
    };
    let parts = inst.params.loss(&cfg, &ex).unwrap();
    assert_eq!(parts.l_pre, None);
    assert_eq!(parts.total, parts.l_str);
    let (_, g) = inst.params.loss_and_grad(&cfg, &ex).unwrap();
    assert!(g.fusion_weight.iter().all(|&v| v == 0.0));
    assert_eq!(g.decay_logit, 0.0);
}

#[test]
fn mismatched_graph_is_shape_error() {
    let inst = random_instance(9);
    let short = &inst.history[..5];
    let ex = Example {
        history: short,
        graph: Some(&inst.graph),
        target: inst.target,
        negatives: &inst.negatives,
        frozen_weights: None,
    };
    assert!(matches!(inst.params.loss(&inst.cfg, &ex), Err(Error::Shape(_))));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for layers in [1, 2] {
        let mut rng = ChaCha8Rng::seed_from_u64(layers as u64);
        let mut p = ModelParams::init(9, 5, layers, 0.3, 0.7, &mut rng);
        p.fusion.weight.apply(|v| *v = rng.random_range(-1.0..1.0));
        p.kernel.mu = 1.234_567_891;
        let bytes = p.to_checkpoint_bytes();
        assert_eq!(&bytes[..4], b"LHG1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 9);
        // Row-major n_items x d table comes first.
        let first = f64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let second = f64::from_le_bytes(bytes[20..28].try_into().unwrap());
        assert_eq!(first.to_bits(), p.table.matrix[(0, 0)].to_bits());
        assert_eq!(second.to_bits(), p.table.matrix[(1, 0)].to_bits());
        let back = ModelParams::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_checkpoint_bytes(), bytes);
    }
    assert!(matches!(
        ModelParams::from_checkpoint_bytes(b"LHG1\x01\0\0\0"),
        Err(Error::Checkpoint(_))
    ));
}
