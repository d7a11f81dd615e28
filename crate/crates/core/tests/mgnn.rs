mod common;

use common::{assert_gradients_agree, fixture};
use rand::Rng;
use topoprune::hgraph::{lower, lower_flat, CompGraph, HierGraph};
use topoprune::mgnn::{
    gcn_pass, message_pass, pool, EdgeMode, Mgnn, MgnnConfig, TOP_ALPHA, TYPE_NORM_EPS,
};
use topoprune::Error;
use topoprune_numerics::{gradcheck, rng, NumericsError, ParamStore, Tape, Tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::from_slice(shape, data).unwrap()
}

fn random_graph<R: Rng>(rng: &mut R, max_nodes: usize) -> CompGraph {
    let n = rng.gen_range(2..=max_nodes);
    let mut g = CompGraph::new(1, n, 1);
    for _ in 0..rng.gen_range(0..2 * n) {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b {
            g.add_edge(a.min(b), a.max(b), 0, vec![0.0]);
        }
    }
    g
}

fn encoder_store(mgnn: &Mgnn, hg: &HierGraph, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    mgnn.init_params(&mut store, &mut rng::seeded(seed));
    mgnn.prepare(&mut store, hg);
    store
}

#[test]
fn all_ones_edges_reduce_to_plain_convolution() {
    let mut r = rng::seeded(11);
    for _ in 0..10 {
        let g = random_graph(&mut r, 12);
        let h = Tensor::uniform(&[g.num_nodes, 5], 1.0, &mut r);
        let w = Tensor::uniform(&[5, 5], 1.0, &mut r);
        let tape = Tape::new();
        let (hv, wv) = (tape.input(&h), tape.input(&w));
        let ones = tape.constant(Tensor::ones(&[g.edges.len(), 5]));
        let a = message_pass(&tape, &g, hv, ones, wv).unwrap().value();
        let b = gcn_pass(&tape, &g, hv, wv).unwrap().value();
        let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}

#[test]
fn isolated_nodes_map_to_zero() {
    let mut g = CompGraph::new(1, 3, 1);
    g.add_edge(0, 1, 0, vec![0.0]);
    let tape = Tape::new();
    let h = tape.input(&Tensor::full(&[3, 2], -3.0));
    let w = tape.input(&t(&[2, 2], &[1.0, 0.5, -0.5, 1.0]));
    let e = tape.constant(Tensor::ones(&[1, 2]));
    let out = message_pass(&tape, &g, h, e, w).unwrap().value();
    assert_eq!(&out.data()[0..2], &[0.0, 0.0]);
    assert_eq!(&out.data()[4..6], &[0.0, 0.0]);
}

#[test]
fn two_node_chain_matches_hand_computation() {
    let mut g = CompGraph::new(1, 2, 1);
    g.add_edge(0, 1, 0, vec![0.0]);
    let tape = Tape::new();
    let h = tape.input(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let e = tape.input(&t(&[1, 2], &[0.5, 2.0]));
    let w = tape.input(&t(&[2, 2], &[1.0, 2.0, 3.0, -1.0]));
    let out = message_pass(&tape, &g, h, e, w).unwrap().value();
    // h0 ∘ e = (0.5, 4); W · (0.5, 4) = (8.5, -2.5); relu → (8.5, 0).
    assert_eq!(out.data(), &[0.0, 0.0, 8.5, 0.0]);

    // Two in-neighbours are averaged.
    let mut g = CompGraph::new(1, 3, 1);
    g.add_edge(0, 2, 0, vec![0.0]);
    g.add_edge(1, 2, 0, vec![0.0]);
    let h = tape.input(&t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 0.0, 0.0]));
    let e = tape.input(&Tensor::ones(&[2, 2]));
    let w = tape.input(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let out = message_pass(&tape, &g, h, e, w).unwrap().value();
    assert_eq!(&out.data()[4..6], &[2.0, 3.0]);
}

#[test]
fn rounds_are_capped_by_graph_depth() {
    let mgnn = Mgnn::new(MgnnConfig::default(), "");
    let mut g = CompGraph::new(1, 3, 1);
    assert_eq!(mgnn.rounds_for(&g), 1);
    g.add_edge(0, 1, 0, vec![0.0]);
    assert_eq!(mgnn.rounds_for(&g), 1);
    g.add_edge(1, 2, 0, vec![0.0]);
    assert_eq!(mgnn.rounds_for(&g), 2);
    let hg = lower(&fixture("resnet_toy")).unwrap();
    assert_eq!(mgnn.rounds_for(&hg.top), 3);
}

#[test]
fn mismatched_dimensions_are_rejected() {
    let mut g = CompGraph::new(1, 2, 1);
    g.add_edge(0, 1, 0, vec![0.0]);
    let tape = Tape::new();
    let h = tape.input(&Tensor::ones(&[3, 2]));
    let e = tape.input(&Tensor::ones(&[1, 2]));
    let w = tape.input(&Tensor::ones(&[2, 2]));
    assert!(matches!(
        message_pass(&tape, &g, h, e, w),
        Err(Error::Dim(_))
    ));
    let h = tape.input(&Tensor::ones(&[2, 2]));
    let alpha = tape.input(&Tensor::ones(&[3]));
    assert!(matches!(pool(h, alpha), Err(Error::Dim(_))));
}

#[test]
fn pooling_selects_and_sums() {
    let tape = Tape::new();
    let h = tape.input(&t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let sel = tape.input(&t(&[3], &[1.0, 0.0, 0.0]));
    assert_eq!(pool(h, sel).unwrap().value().data(), &[1.0, 2.0]);
    let ones = tape.input(&Tensor::ones(&[3]));
    assert_eq!(pool(h, ones).unwrap().value().data(), &[9.0, 12.0]);
}

#[test]
fn pooling_gradient_matches_finite_differences() {
    let mut store = ParamStore::new();
    let mut r = rng::seeded(5);
    store.insert("alpha", Tensor::uniform(&[4], 1.0, &mut r));
    let h = Tensor::uniform(&[4, 3], 1.0, &mut r);
    let mix = Tensor::uniform(&[3], 1.0, &mut r);
    let report = gradcheck::check(&store, 1e-5, |tape, b| {
        let e = pool(tape.input(&h), b.get("alpha")?)
            .map_err(|e| NumericsError::Shape(e.to_string()))?;
        e.mul(tape.constant(mix.clone()))?.sum()
    })
    .unwrap();
    assert!(report.iter().all(|(_, err)| *err < 1e-4), "{report:?}");
}

#[test]
fn each_distinct_motif_is_encoded_once() {
    let hg = lower(&fixture("motif_reuse")).unwrap();
    assert_eq!(hg.top.edges.len(), 6);
    let mgnn = Mgnn::new(MgnnConfig::default(), "enc.");
    let store = encoder_store(&mgnn, &hg, 1);
    let tape = Tape::new();
    let b = store.bind(&tape);
    mgnn.encode(&tape, &b, &hg).unwrap();
    assert_eq!(mgnn.motif_calls(), 2);

    // Across a batch of states sharing motifs the count does not grow.
    mgnn.reset_calls();
    let out = mgnn.encode_batch(&tape, &b, &[&hg, &hg, &hg]).unwrap();
    assert_eq!(out.shape(), [3, 32]);
    assert_eq!(mgnn.motif_calls(), 2);
}

#[test]
fn batch_encoding_matches_single_encoding() {
    let hg = lower(&fixture("resnet_toy")).unwrap();
    let mgnn = Mgnn::new(MgnnConfig::default(), "");
    let store = encoder_store(&mgnn, &hg, 2);
    let tape = Tape::new();
    let b = store.bind(&tape);
    let single = mgnn.encode(&tape, &b, &hg).unwrap().value();
    let batch = mgnn.encode_batch(&tape, &b, &[&hg, &hg]).unwrap().value();
    assert_eq!(&batch.data()[..32], single.data());
    assert_eq!(&batch.data()[32..], single.data());
}

#[test]
fn motif_embeddings_feed_the_top_level() {
    let hg = lower(&fixture("fig1")).unwrap();
    let mgnn = Mgnn::new(MgnnConfig::default(), "");
    let store = encoder_store(&mgnn, &hg, 3);
    let tape = Tape::new();
    let b = store.bind(&tape);
    let motifs = mgnn.encode_motifs(&tape, &b, &hg).unwrap();
    assert_eq!(motifs.shape(), [3, 32]);
    let g = mgnn.encode(&tape, &b, &hg).unwrap();
    let grads = tape.backward(g.sum().unwrap()).unwrap();
    // Every motif's pooling vector influences the final embedding.
    for m in &hg.motifs {
        let alpha = b.get(&mgnn.alpha_name(&m.key.0)).unwrap();
        let gr = grads.wrt(alpha).unwrap();
        assert!(
            gr.data().iter().any(|v| *v != 0.0),
            "motif {} is disconnected",
            m.key.0
        );
    }
}

#[test]
fn flat_hierarchy_is_one_pass_and_pool() {
    let m = fixture("plain_cnn");
    let hg = lower_flat(&m).unwrap();
    let mgnn = Mgnn::new(MgnnConfig::default(), "");
    let store = encoder_store(&mgnn, &hg, 4);
    let tape = Tape::new();
    let b = store.bind(&tape);
    let encoded = mgnn.encode(&tape, &b, &hg).unwrap().value();

    // Direct composition of the building blocks.
    let prims = tape
        .constant(
            Tensor::new(
                vec![hg.primitives.len(), hg.primitives.len()],
                hg.primitives
                    .iter()
                    .flat_map(|p| p.feature.clone())
                    .collect(),
            )
            .unwrap(),
        )
        .linear(b.get("prim").unwrap(), None)
        .unwrap();
    let g = &hg.top;
    let ids: Vec<usize> = g.edges.iter().map(|e| e.type_id).collect();
    let attr = Tensor::new(
        vec![g.edges.len(), g.attr_dim],
        g.edges.iter().flat_map(|e| e.attr.clone()).collect(),
    )
    .unwrap();
    let proj = tape
        .constant(attr)
        .linear(
            b.get("l1.attr.w").unwrap(),
            Some(b.get("l1.attr.b").unwrap()),
        )
        .unwrap();
    let e = prims
        .rms_norm_rows(TYPE_NORM_EPS)
        .unwrap()
        .index_select(0, &ids)
        .unwrap()
        .mul(proj)
        .unwrap();
    let mut h = tape.constant(Tensor::ones(&[g.num_nodes, 32]));
    assert_eq!(mgnn.rounds_for(g), 3);
    for r in 0..3 {
        h = message_pass(&tape, g, h, e, b.get(&format!("l1.w{r}")).unwrap()).unwrap();
    }
    let direct = pool(h, b.get(&mgnn.alpha_name(TOP_ALPHA)).unwrap())
        .unwrap()
        .value();
    assert_eq!(encoded.data(), direct.data());
}

#[test]
fn ones_mode_equals_plain_mode_per_stage() {
    for name in ["fig1", "resnet_toy", "motif_reuse"] {
        let hg = lower(&fixture(name)).unwrap();
        let ones = Mgnn::new(MgnnConfig::default(), "").with_mode(EdgeMode::Ones);
        let plain = Mgnn::new(MgnnConfig::default(), "").with_mode(EdgeMode::Plain);
        let store = encoder_store(&ones, &hg, 6);
        let tape = Tape::new();
        let b = store.bind(&tape);
        let m1 = ones.encode_motifs(&tape, &b, &hg).unwrap().value();
        let m2 = plain.encode_motifs(&tape, &b, &hg).unwrap().value();
        assert_eq!(m1.data(), m2.data());
        let g1 = ones.encode(&tape, &b, &hg).unwrap().value();
        let g2 = plain.encode(&tape, &b, &hg).unwrap().value();
        assert_eq!(g1.data(), g2.data());
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let hg = lower(&fixture("fig1")).unwrap();
    let cfg = MgnnConfig {
        hidden: 6,
        rounds: 2,
        ..MgnnConfig::default()
    };
    let mgnn = Mgnn::new(cfg, "");
    for seed in 0..3 {
        let store = encoder_store(&mgnn, &hg, seed);
        let mix = Tensor::uniform(&[6], 1.0, &mut rng::seeded(100 + seed));
        let report = gradcheck::check_params(&store, 1e-5, |tape, b| {
            let g = mgnn
                .encode(tape, b, &hg)
                .map_err(|e| NumericsError::Shape(e.to_string()))?;
            g.mul(tape.constant(mix.clone()))?.sum()
        })
        .unwrap();
        assert_gradients_agree(&report, &format!("seed {seed}"));
    }
}

#[test]
fn encoding_is_deterministic() {
    let hg = lower(&fixture("shuffle")).unwrap();
    let run = || {
        let mgnn = Mgnn::new(MgnnConfig::default(), "");
        let store = encoder_store(&mgnn, &hg, 9);
        let tape = Tape::new();
        let b = store.bind(&tape);
        mgnn.encode(&tape, &b, &hg).unwrap().value().data().to_vec()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(a.iter().all(|v| v.is_finite()));
}

#[test]
fn missing_parameters_are_reported() {
    let hg = lower(&fixture("fig1")).unwrap();
    let mgnn = Mgnn::new(MgnnConfig::default(), "");
    let mut store = ParamStore::new();
    mgnn.init_params(&mut store, &mut rng::seeded(0));
    let tape = Tape::new();
    let b = store.bind(&tape);
    assert!(matches!(
        mgnn.encode(&tape, &b, &hg),
        Err(Error::MissingParams(_))
    ));
}

#[test]
fn resized_top_graph_resets_its_pooling_vector() {
    let mgnn = Mgnn::new(MgnnConfig::default(), "");
    let small = lower(&fixture("motif_reuse")).unwrap();
    let big = lower(&fixture("fig1")).unwrap();
    let mut store = encoder_store(&mgnn, &small, 0);
    store
        .get_mut(&mgnn.alpha_name(TOP_ALPHA))
        .unwrap()
        .data_mut()[0] = 7.0;
    mgnn.prepare(&mut store, &small);
    assert_eq!(
        store.get(&mgnn.alpha_name(TOP_ALPHA)).unwrap().data()[0],
        7.0
    );
    mgnn.prepare(&mut store, &big);
    let alpha = store.get(&mgnn.alpha_name(TOP_ALPHA)).unwrap();
    assert_eq!(alpha.shape(), [big.top.num_nodes]);
    assert!(alpha.data().iter().all(|v| *v == 1.0));
}
