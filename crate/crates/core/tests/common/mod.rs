#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssg_core::nn::{Mlp, ParamStore};
use ssg_core::scene::SceneRecord;
use ssg_core::synthetic::{generate_scene, sample_model, GenConfig, GroundTruthModel};
use ssg_core::tensor::sigmoid;

pub fn small_gen(seed: u64) -> GenConfig {
    GenConfig {
        seed,
        feature_dim: 6,
        nodes_min: 4,
        nodes_max: 4,
        points_min: 5,
        points_max: 9,
        edge_radius: 10.0,
        train_scenes: 4,
        val_scenes: 0,
        test_scenes: 0,
        ..GenConfig::default()
    }
}

pub fn small_model(seed: u64) -> GroundTruthModel {
    sample_model(&small_gen(seed)).unwrap()
}

/// A fully connected 4-node scene with few points per node.
pub fn small_scene(seed: u64) -> SceneRecord {
    generate_scene(&small_model(seed), 0)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Scalar evaluation of an MLP from the stored weights.
pub fn mlp_ref(store: &ParamStore, mlp: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (k, layer) in mlp.layers.iter().enumerate() {
        let w = store.get(layer.weight).data();
        let b = store.get(layer.bias).data();
        let mut y = b.to_vec();
        for (i, xi) in h.iter().enumerate() {
            for (o, yo) in y.iter_mut().enumerate() {
                *yo += xi * w[i * layer.outputs + o];
            }
        }
        if k + 1 < mlp.layers.len() {
            y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = y;
    }
    h
}

pub fn gate_ref(v: &[f64], evidence: &[f64], w: &[f64]) -> Vec<f64> {
    let score: f64 = v.iter().chain(evidence).zip(w).map(|(a, b)| a * b).sum();
    let g = sigmoid(score);
    v.iter().zip(evidence).map(|(a, e)| a + g * sigmoid(*e)).collect()
}

pub fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}
