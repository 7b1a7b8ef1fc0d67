mod common;

use common::{close, gate_ref, mlp_ref, random_vec, rng};
use ssg_core::features::Visibility;
use ssg_core::gnn::{GraphStructure, NodeInputs, RsnGnn, EDGE_DESCRIPTOR_DIM};
use ssg_core::model::{LossWeights, ModelConfig, ModelError, PreparedScene, SceneGraphModel};
use ssg_core::nn::{Bound, ParamStore};
use ssg_core::tensor::{grad_check, Tape, Tensor, TensorError, Var};

struct Inputs {
    v: Vec<Vec<f64>>,
    geo: Vec<Vec<f64>>,
    spat: Vec<Vec<f64>>,
    desc: Vec<Vec<f64>>,
}

fn run_tape(gnn: &RsnGnn, store: &ParamStore, inp: &Inputs, graph: &GraphStructure) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let params = store.bind(&mut tape, false).unwrap();
    let mut c = |x: &Vec<f64>| tape.constant(Tensor::vector(x.clone())).unwrap();
    let nodes: Vec<NodeInputs> = (0..inp.v.len())
        .map(|i| NodeInputs {
            v: c(&inp.v[i]),
            v_geo: c(&inp.geo[i]),
            v_spat: c(&inp.spat[i]),
        })
        .collect();
    let desc: Vec<Var> = inp.desc.iter().map(&mut c).collect();
    let e0 = gnn.embed_edges(&mut tape, &params, &desc).unwrap();
    let state = gnn.forward(&mut tape, &params, &nodes, e0, graph).unwrap();
    let read = |vs: &[Var]| vs.iter().map(|v| tape.value(*v).data().to_vec()).collect::<Vec<_>>();
    (read(&state.nodes), read(&state.edges))
}

/// Step-by-step evaluation of one layer with plain loops.
fn run_reference(gnn: &RsnGnn, store: &ParamStore, inp: &Inputs, edges: &[(usize, usize)]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = inp.v.len();
    let layer = &gnn.layers[0];
    let w_geo = store.get(layer.w_geo).data();
    let w_spat = store.get(layer.w_spat).data();
    let e0: Vec<Vec<f64>> = inp.desc.iter().map(|d| mlp_ref(store, &gnn.edge_embed, d)).collect();
    let gated: Vec<Vec<f64>> = (0..n)
        .map(|i| gate_ref(&gate_ref(&inp.v[i], &inp.geo[i], w_geo), &inp.spat[i], w_spat))
        .collect();
    // undirected neighborhoods with the connecting edge index
    let mut neigh: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (k, &(s, d)) in edges.iter().enumerate() {
        neigh[s].push((d, k));
        neigh[d].push((s, k));
    }
    let context: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut out = gated[i].clone();
            if !neigh[i].is_empty() {
                for (a, o) in out.iter_mut().enumerate() {
                    *o += neigh[i].iter().map(|(j, _)| gated[*j][a]).fold(f64::NEG_INFINITY, f64::max);
                }
            }
            out
        })
        .collect();
    let new_edges = edges
        .iter()
        .enumerate()
        .map(|(k, &(s, d))| {
            let x: Vec<f64> = [context[s].clone(), e0[k].clone(), context[d].clone()].concat();
            let m = mlp_ref(store, &layer.edge_mlp, &x);
            e0[k].iter().zip(&m).map(|(a, b)| a + b).collect()
        })
        .collect();
    let new_nodes = (0..n)
        .map(|i| {
            if neigh[i].is_empty() {
                return gated[i].clone();
            }
            let mut acc = vec![0.0; gated[i].len()];
            for &(j, k) in &neigh[i] {
                let x: Vec<f64> = [gated[i].clone(), e0[k].clone(), gated[j].clone()].concat();
                for (a, m) in acc.iter_mut().zip(mlp_ref(store, &layer.node_mlp, &x)) {
                    *a += m;
                }
            }
            gated[i].iter().zip(&acc).map(|(g, a)| g + a / neigh[i].len() as f64).collect()
        })
        .collect();
    (new_nodes, new_edges)
}

fn random_inputs(seed: u64, n: usize, edges: usize, h: usize) -> Inputs {
    let mut r = rng(seed);
    Inputs {
        v: (0..n).map(|_| random_vec(&mut r, h, 1.0)).collect(),
        geo: (0..n).map(|_| random_vec(&mut r, h, 1.0)).collect(),
        spat: (0..n).map(|_| random_vec(&mut r, h, 1.0)).collect(),
        desc: (0..edges).map(|_| random_vec(&mut r, EDGE_DESCRIPTOR_DIM, 1.0)).collect(),
    }
}

#[test]
fn three_node_path_matches_hand_execution() {
    let h = 4;
    for seed in 0..5 {
        let mut store = ParamStore::new();
        let gnn = RsnGnn::new(&mut store, &mut rng(100 + seed), h, 1, true);
        // path 0 - 1 - 2 with mixed directions
        let edges = vec![(0, 1), (2, 1)];
        let graph = GraphStructure::new(3, edges.clone(), |i| i);
        let inp = random_inputs(seed, 3, 2, h);
        let (nodes, out_edges) = run_tape(&gnn, &store, &inp, &graph);
        let (ref_nodes, ref_edges) = run_reference(&gnn, &store, &inp, &edges);
        for (a, b) in nodes.iter().zip(&ref_nodes).chain(out_edges.iter().zip(&ref_edges)) {
            assert!(close(a, b, 1e-12), "{a:?} vs {b:?}");
        }
    }
}

#[test]
fn isolated_node_is_only_gated() {
    let h = 4;
    let mut store = ParamStore::new();
    let gnn = RsnGnn::new(&mut store, &mut rng(7), h, 2, true);
    let graph = GraphStructure::new(1, vec![], |i| i);
    let inp = random_inputs(3, 1, 0, h);
    let (nodes, edges) = run_tape(&gnn, &store, &inp, &graph);
    assert!(edges.is_empty());
    let mut v = inp.v[0].clone();
    for layer in &gnn.layers {
        v = gate_ref(&gate_ref(&v, &inp.geo[0], store.get(layer.w_geo).data()), &inp.spat[0], store.get(layer.w_spat).data());
    }
    assert!(close(&nodes[0], &v, 1e-12));
}

fn tiny_model(scene: &ssg_core::scene::SceneRecord, hidden: usize, seed: u64) -> SceneGraphModel {
    let config = ModelConfig {
        hidden,
        point_widths: vec![4, 6],
        ..ModelConfig::new(scene.feature_dim, scene.classes.clone(), scene.predicates.clone())
    };
    SceneGraphModel::new(config, seed).unwrap()
}

fn as_tensor_error(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => panic!("unexpected model error: {other}"),
    }
}

#[test]
fn full_forward_and_loss_pass_gradient_check() {
    let started = std::time::Instant::now();
    let scene = common::small_scene(11);
    assert_eq!(scene.nodes.len(), 4);
    let prepared = PreparedScene::new(&scene, Visibility::Strict).unwrap();
    let model = tiny_model(&scene, 8, 5);
    let weights = LossWeights::plain(1.0);
    let worst = grad_check(
        |tape, vars| {
            let params = Bound::from_vars(vars.to_vec());
            let logits = model.forward(tape, &params, &prepared).map_err(as_tensor_error)?;
            Ok(model
                .loss(tape, &logits, &prepared, &weights, None)
                .map_err(as_tensor_error)?
                .expect("scene is labeled"))
        },
        model.store.tensors(),
    )
    .unwrap();
    assert!(worst < 1e-4, "max relative error {worst}");
    assert!(started.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn node_order_does_not_change_per_node_outputs() {
    let scene = common::small_scene(21);
    let model = tiny_model(&scene, 8, 2);
    let base = model.predict_logits(&PreparedScene::new(&scene, Visibility::Strict).unwrap()).unwrap();

    let mut permuted = scene.clone();
    permuted.nodes.reverse();
    permuted.nodes.swap(0, 2);
    permuted.edges.reverse();
    let got = model.predict_logits(&PreparedScene::new(&permuted, Visibility::Strict).unwrap()).unwrap();

    for (i, node) in scene.nodes.iter().enumerate() {
        let j = permuted.nodes.iter().position(|n| n.node_id == node.node_id).unwrap();
        assert_eq!(base.0[i], got.0[j]);
    }
    for (i, edge) in scene.edges.iter().enumerate() {
        let j = permuted.edges.iter().position(|e| e.src == edge.src && e.dst == edge.dst).unwrap();
        assert_eq!(base.1[i], got.1[j]);
    }
}

#[test]
fn forward_is_bit_reproducible() {
    let scene = common::small_scene(5);
    let prepared = PreparedScene::new(&scene, Visibility::Strict).unwrap();
    let a = tiny_model(&scene, 8, 9).predict_logits(&prepared).unwrap();
    let b = tiny_model(&scene, 8, 9).predict_logits(&prepared).unwrap();
    assert_eq!(a, b);
}

#[test]
fn constant_logit_shift_keeps_loss_and_argmax() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.3, -1.2, 2.0])).unwrap();
    let y = tape.constant(Tensor::vector(vec![100.3, 98.8, 102.0])).unwrap();
    let lx = tape.cross_entropy(x, 1).unwrap();
    let ly = tape.cross_entropy(y, 1).unwrap();
    assert!((tape.value(lx).data()[0] - tape.value(ly).data()[0]).abs() < 1e-12);
    let p = ssg_core::tensor::softmax(tape.value(x).data());
    let q = ssg_core::tensor::softmax(tape.value(y).data());
    assert!(close(&p, &q, 1e-12));
    assert_eq!(ssg_core::tensor::argmax(&p), ssg_core::tensor::argmax(&q));
}
