use std::time::Instant;

use poigraph::datamodel::{sessionize, synth_generate, Dataset, Split, SynthConfig};
use poigraph::graphbuild::{build_graph, GraphConfig, HeteroGraph};
use poigraph::hgl::{
    edge_embed, fuse_edges, init_params, node_update, run_graph, AttentionTrace, Hgl, HglConfig,
};
use poigraph::numerics::{grad_check_sampled, ParamStore, RngStreams, Tape, Tensor};

fn toy_graph(app: Vec<(usize, usize, f64)>, d_n: usize) -> HeteroGraph {
    let n = 5 + 3;
    let mut rng = RngStreams::new(9).stream("emb");
    let emb: Vec<f64> = (0..n * d_n).map(|_| rand::Rng::gen_range(&mut rng, -0.5..0.5)).collect();
    HeteroGraph {
        poi_ids: (0..5).map(|i| format!("p{i}")).collect(),
        queries: vec!["a".into(), "b".into(), "c".into()],
        query_locs: vec![(0.0, 0.0); 3],
        app,
        apq: vec![(0, 0, 0.75), (0, 1, 0.25), (1, 1, 1.0), (2, 2, 1.0)],
        node_emb: Tensor::new([n, d_n], emb).unwrap(),
        config: GraphConfig {
            d_n,
            keep_nonpositive_pmi: true,
            ..Default::default()
        },
        seed: 0,
    }
}

fn toy_config() -> HglConfig {
    HglConfig {
        layer_widths: vec![3, 4],
        heads: 2,
        d_n: 3,
        d: 2,
        ..Default::default()
    }
}

fn setup(graph: &HeteroGraph, cfg: HglConfig) -> (Hgl, ParamStore<f64>, Tensor<f64>) {
    let hgl = Hgl::new(cfg.clone(), graph).unwrap();
    let mut store = ParamStore::new();
    init_params(&cfg, graph, &mut store, &mut RngStreams::new(4).stream("hgl")).unwrap();
    let n = graph.num_nodes();
    let np: Vec<f64> = (0..n * cfg.d).map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0).collect();
    (hgl, store, Tensor::new([n, cfg.d], np).unwrap())
}

fn default_app() -> Vec<(usize, usize, f64)> {
    vec![(0, 1, 0.7), (0, 2, 1.3), (1, 3, 0.2)]
}

#[test]
fn edge_embedding_of_zero_endpoints_is_half() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros([1, 4]));
    let e = edge_embed(&mut tape, z, z).unwrap();
    assert!(tape.value(e).data().iter().all(|&x| x == 0.5));
    let a = tape.constant(Tensor::from_f64([1, 2], &[-3.0, 40.0]).unwrap());
    let e = edge_embed(&mut tape, a, a).unwrap();
    assert!(tape.value(e).data().iter().all(|&x| x > 0.0 && x <= 1.0));
}

#[test]
fn fuse_edges_contracts() {
    let mut tape = Tape::<f64>::new();
    let n = tape.constant(Tensor::from_f64([1, 2], &[0.3, -0.2]).unwrap());
    let w = tape.constant(Tensor::from_f64([3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
    let one = tape.constant(Tensor::from_f64([1, 3], &[0.2, 0.4, 0.9]).unwrap());
    let (f, _) = fuse_edges(&mut tape, n, one, &[5.0], &[w, w]).unwrap();
    assert_eq!(tape.value(f).data(), tape.value(one).data());

    let same = tape.constant(Tensor::from_f64([3, 3], &[0.2, 0.4, 0.9].repeat(3)).unwrap());
    let (_, alphas) = fuse_edges(&mut tape, n, same, &[1.0, 1.0, 1.0], &[w]).unwrap();
    for &a in tape.value(alphas[0]).data() {
        assert!((a - 1.0 / 3.0).abs() < 1e-15);
    }

    let mixed = tape.constant(Tensor::from_f64([2, 3], &[0.9, -0.4, 0.1, 0.0, 0.7, 0.3]).unwrap());
    let (_, alphas) = fuse_edges(&mut tape, n, mixed, &[0.3, 2.0], &[w]).unwrap();
    let a = tape.value(alphas[0]).data();
    assert!(a.iter().all(|&x| x > 0.0));
    assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn node_update_identities() {
    let mut tape = Tape::<f64>::new();
    let n = tape.constant(Tensor::from_f64([1, 2], &[0.5, -1.0]).unwrap());
    let np = tape.constant(Tensor::from_f64([1, 3], &[1.0, 2.0, 3.0]).unwrap());
    let w2 = tape.constant(Tensor::from_f64([3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap());
    let w1 = tape.constant(Tensor::zeros([4, 2]));
    let out = node_update(&mut tape, n, None, w1, np, w2).unwrap();
    assert_eq!(tape.value(out).data(), &[4.5, 4.0]);

    let zero2 = tape.constant(Tensor::zeros([3, 2]));
    let f = tape.constant(Tensor::from_f64([1, 4], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let out = node_update(&mut tape, n, Some(f), w1, np, zero2).unwrap();
    assert_eq!(tape.value(out).data(), tape.value(n).data());
}

#[test]
fn layer_gradients_match_finite_differences() {
    let g = toy_graph(default_app(), 3);
    let cfg = HglConfig {
        layer_widths: vec![3],
        ..toy_config()
    };
    let (hgl, store, np) = setup(&g, cfg);
    let report = grad_check_sampled(
        |tape, p| {
            let plan = hgl.full_plan();
            let npv = tape.leaf(np.clone());
            let out = hgl.forward(tape, p, &plan, npv, None)?;
            let out = tape.tanh(out)?;
            tape.sum(out)
        },
        &store,
        1e-5,
        12,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn every_parameter_receives_gradient() {
    let g = toy_graph(default_app(), 3);
    let (hgl, store, np) = setup(&g, toy_config());
    let mut tape = Tape::new();
    let plan = hgl.full_plan();
    let npv = tape.constant(np);
    let out = hgl.forward(&mut tape, &store, &plan, npv, None).unwrap();
    let out = tape.tanh(out).unwrap();
    let loss = tape.sum(out).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut acc = store.clone();
    acc.zero_grads();
    acc.accumulate(&tape, &grads);
    for (name, p) in acc.iter() {
        let g = p.grad.as_ref().unwrap();
        assert!(g.max_abs() > 0.0, "{name} has zero gradient");
    }
}

#[test]
fn attention_coefficients_are_distributions() {
    let g = toy_graph(default_app(), 3);
    let (hgl, store, np) = setup(&g, toy_config());
    let mut tape = Tape::new();
    let mut trace = AttentionTrace::default();
    let npv = tape.constant(np);
    hgl.forward(&mut tape, &store, &hgl.full_plan(), npv, Some(&mut trace))
        .unwrap();
    assert_eq!(trace.entries.len(), 2 * 2 * 2);
    for (_, _, _, a, seg) in &trace.entries {
        let a = tape.value(*a).data();
        for s in 0..seg.num_segments() {
            let r = seg.range(s);
            if r.is_empty() {
                continue;
            }
            let sum: f64 = a[r.clone()].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(a[r].iter().all(|&x| x > 0.0));
        }
    }
}

#[test]
fn edge_order_does_not_matter() {
    let (hgl, store, np) = setup(&toy_graph(default_app(), 3), toy_config());
    let a = run_graph(&hgl, &store, np.clone()).unwrap();
    let mut shuffled = default_app();
    shuffled.reverse();
    let g2 = toy_graph(shuffled, 3);
    let hgl2 = Hgl::new(toy_config(), &g2).unwrap();
    let b = run_graph(&hgl2, &store, np).unwrap();
    for (x, y) in a.p_tilde.data().iter().zip(b.p_tilde.data()) {
        assert!((x - y).abs() < 1e-12);
    }
    for (x, y) in a.q_tilde.data().iter().zip(b.q_tilde.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn masked_zero_weight_edge_is_inert() {
    let cfg = HglConfig {
        masked_softmax: true,
        ..toy_config()
    };
    let mut with_zero = default_app();
    with_zero.push((2, 4, 0.0));
    let (hgl, store, np) = setup(&toy_graph(with_zero, 3), cfg.clone());
    let a = run_graph(&hgl, &store, np.clone()).unwrap();
    let hgl2 = Hgl::new(cfg, &toy_graph(default_app(), 3)).unwrap();
    let b = run_graph(&hgl2, &store, np).unwrap();
    assert_eq!(a, b);
}

#[test]
fn closure_matches_full_graph() {
    let g = toy_graph(default_app(), 3);
    let (hgl, store, np) = setup(&g, toy_config());
    let full = run_graph(&hgl, &store, np.clone()).unwrap();
    let targets = [3usize, 6];
    let plan = hgl.plan(&targets).unwrap();
    let src: Vec<f64> = plan.sources().iter().flat_map(|&n| np.row(n).to_vec()).collect();
    let mut tape = Tape::new();
    let npv = tape.constant(Tensor::new([plan.sources().len(), 2], src).unwrap());
    let out = hgl.forward(&mut tape, &store, &plan, npv, None).unwrap();
    let out = tape.value(out);
    assert_eq!(out.row(0), full.p_tilde.row(3));
    assert_eq!(out.row(1), full.q_tilde.row(1));
    let isolated = hgl.plan(&[4]).unwrap();
    assert!(isolated.levels.iter().all(|l| l == &[4]));
}

#[test]
fn isolated_node_gets_residual_only() {
    let g = toy_graph(default_app(), 3);
    let cfg = HglConfig {
        layer_widths: vec![3],
        ..toy_config()
    };
    let (hgl, store, np) = setup(&g, cfg);
    let out = run_graph(&hgl, &store, np.clone()).unwrap();
    let n4 = store.get("hgl.node_emb").unwrap().row(4).to_vec();
    let w2 = store.get("hgl.l0.w2").unwrap();
    for j in 0..3 {
        let mut want = n4[j];
        for i in 0..2 {
            want += np.row(4)[i] * w2.row(i)[j];
        }
        assert!((out.p_tilde.row(4)[j] - want).abs() < 1e-12);
    }
}

#[test]
fn synthetic_full_graph_forward_is_fast() {
    let out = synth_generate(&SynthConfig::default()).unwrap();
    let ds = Dataset::new(out.catalog, sessionize(&out.records, 1800), Split::Train).unwrap();
    let g = build_graph(&ds, &GraphConfig::default(), 1).unwrap();
    let cfg = HglConfig::default();
    let hgl = Hgl::new(cfg.clone(), &g).unwrap();
    let mut store = ParamStore::<f32>::new();
    init_params(&cfg, &g, &mut store, &mut RngStreams::new(1).stream("hgl")).unwrap();
    let np = Tensor::full([g.num_nodes(), cfg.d], 0.1f32);
    let start = Instant::now();
    let reps = run_graph(&hgl, &store, np).unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(reps.p_tilde.shape(), &[200, 128]);
    assert_eq!(reps.q_tilde.shape(), &[g.num_queries(), 128]);
    assert!(reps.p_tilde.all_finite());
    assert!(secs < 5.0, "forward took {secs:.2}s");
}
