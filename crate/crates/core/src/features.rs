//! Masked feature initialization: the per-node multi-view image feature,
//! the point-set (geometric) feature and the box (spatial) feature.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{Bound, Linear, ParamStore};
use crate::scene::{Box3D, NodeInstance, SceneRecord};
use crate::tensor::{Tape, TensorError, Tensor, Var};

pub const RATIO_MIN: f64 = 1e-3;
pub const RATIO_MAX: f64 = 1e3;
pub const SPATIAL_ATTRIBUTES: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("node {node} is not visible in any view")]
    NoViews { node: String },
    #[error("node {node} has an empty point set")]
    EmptyPoints { node: String },
    #[error("node {node}: box dims must be positive and finite, got {dims:?}")]
    BadBox { node: String, dims: [f64; 3] },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// What to do with a node that no view observes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Visibility {
    #[default]
    Strict,
    /// Zero vector plus a logged warning.
    Lenient,
}

/// Mean of the node's per-view features.
pub fn aggregate_multiview(node: &NodeInstance, dim: usize, visibility: Visibility) -> Result<Vec<f64>, FeatureError> {
    if node.view_features.is_empty() {
        return match visibility {
            Visibility::Strict => Err(FeatureError::NoViews {
                node: node.node_id.clone(),
            }),
            Visibility::Lenient => {
                log::warn!("node {} has no covisible views; using a zero feature", node.node_id);
                Ok(vec![0.0; dim])
            }
        };
    }
    let mut sum = vec![0.0; dim];
    for vf in &node.view_features {
        for (s, x) in sum.iter_mut().zip(&vf.feature) {
            *s += *x as f64;
        }
    }
    let n = node.view_features.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// `[b_x, b_y, b_z, volume, length, x/y ratio]` of a box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialAttributes {
    pub dims: [f64; 3],
    pub volume: f64,
    /// Largest extent.
    pub length: f64,
    /// `b_x / b_y`, clamped to `[RATIO_MIN, RATIO_MAX]`.
    pub ratio: f64,
}

impl SpatialAttributes {
    pub fn from_box(bbox: &Box3D) -> Option<Self> {
        if !bbox.dims.iter().all(|d| d.is_finite() && *d > 0.0) {
            return None;
        }
        Some(Self {
            dims: bbox.dims,
            volume: bbox.volume(),
            length: bbox.length(),
            ratio: (bbox.dims[0] / bbox.dims[1]).clamp(RATIO_MIN, RATIO_MAX),
        })
    }

    pub fn to_array(&self) -> [f64; SPATIAL_ATTRIBUTES] {
        [self.dims[0], self.dims[1], self.dims[2], self.volume, self.length, self.ratio]
    }
}

/// Points as an `[n×3]` row-major buffer with their centroid removed.
///
/// Each coordinate is summed in sorted order so the centroid, and hence the
/// encoding, does not depend on the order the points arrive in.
pub fn center_points(points: &[[f32; 3]]) -> Vec<f64> {
    let n = points.len();
    let mut centroid = [0.0f64; 3];
    for (axis, c) in centroid.iter_mut().enumerate() {
        let mut coords: Vec<f64> = points.iter().map(|p| p[axis] as f64).collect();
        coords.sort_by(f64::total_cmp);
        *c = coords.iter().sum::<f64>() / n as f64;
    }
    points
        .iter()
        .flat_map(|p| (0..3).map(move |a| p[a] as f64 - centroid[a]))
        .collect()
}

/// Shared per-point MLP, max pool over points, then a projection.
#[derive(Debug, Clone)]
pub struct GeometricEncoder {
    pub point_layers: Vec<Linear>,
    pub projection: Linear,
}

impl GeometricEncoder {
    /// `widths` are the per-point layer outputs, e.g. `[64, 128, 256]`.
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, widths: &[usize], out_dim: usize) -> Self {
        let mut point_layers = Vec::with_capacity(widths.len());
        let mut prev = 3;
        for (i, &w) in widths.iter().enumerate() {
            point_layers.push(Linear::new(store, rng, &format!("geo.point.{i}"), prev, w));
            prev = w;
        }
        let projection = Linear::new(store, rng, "geo.proj", prev, out_dim);
        Self {
            point_layers,
            projection,
        }
    }

    /// Encodes an already-centered `[n×3]` point buffer.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, centered: Var) -> Result<Var, TensorError> {
        let mut h = centered;
        for layer in &self.point_layers {
            let z = layer.forward(tape, params, h)?;
            h = tape.relu(z)?;
        }
        let pooled = tape.max_rows(h)?;
        self.projection.forward(tape, params, pooled)
    }

    /// Stand-alone encoding of one point set.
    pub fn encode_points(&self, store: &ParamStore, points: &[[f32; 3]]) -> Result<Vec<f64>, FeatureError> {
        if points.is_empty() {
            return Err(FeatureError::EmptyPoints { node: String::new() });
        }
        let mut tape = Tape::new();
        let params = store.bind(&mut tape, false)?;
        let pts = tape.constant(Tensor::matrix(points.len(), 3, center_points(points))?)?;
        let out = self.forward(&mut tape, &params, pts)?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// Linear map of the six box attributes.
#[derive(Debug, Clone)]
pub struct SpatialEncoder {
    pub linear: Linear,
}

impl SpatialEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, out_dim: usize) -> Self {
        Self {
            linear: Linear::new(store, rng, "spat", SPATIAL_ATTRIBUTES, out_dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, attributes: Var) -> Result<Var, TensorError> {
        self.linear.forward(tape, params, attributes)
    }

    pub fn encode_spatial(&self, store: &ParamStore, bbox: &Box3D) -> Result<Vec<f64>, FeatureError> {
        let attrs = SpatialAttributes::from_box(bbox).ok_or(FeatureError::BadBox {
            node: String::new(),
            dims: bbox.dims,
        })?;
        let mut tape = Tape::new();
        let params = store.bind(&mut tape, false)?;
        let a = tape.constant(Tensor::vector(attrs.to_array().to_vec()))?;
        let out = self.forward(&mut tape, &params, a)?;
        Ok(tape.value(out).data().to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialNodeFeatures {
    pub v0: Vec<f64>,
    pub v_geo: Vec<f64>,
    pub v_spat: Vec<f64>,
}

pub fn init_scene_features(
    scene: &SceneRecord,
    store: &ParamStore,
    geo: &GeometricEncoder,
    spat: &SpatialEncoder,
    visibility: Visibility,
) -> Result<Vec<InitialNodeFeatures>, FeatureError> {
    scene
        .nodes
        .iter()
        .map(|node| {
            let v0 = aggregate_multiview(node, scene.feature_dim, visibility)?;
            let v_geo = geo.encode_points(store, &node.points).map_err(|e| match e {
                FeatureError::EmptyPoints { .. } => FeatureError::EmptyPoints {
                    node: node.node_id.clone(),
                },
                other => other,
            })?;
            let v_spat = spat.encode_spatial(store, &node.bbox).map_err(|e| match e {
                FeatureError::BadBox { dims, .. } => FeatureError::BadBox {
                    node: node.node_id.clone(),
                    dims,
                },
                other => other,
            })?;
            Ok(InitialNodeFeatures { v0, v_geo, v_spat })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::ViewFeature;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    fn node_with_views(views: &[&[f32]]) -> NodeInstance {
        NodeInstance {
            node_id: "n".into(),
            points: vec![[0.0; 3]],
            bbox: Box3D {
                centroid: [0.0; 3],
                dims: [1.0; 3],
            },
            view_features: views
                .iter()
                .enumerate()
                .map(|(i, f)| ViewFeature {
                    view_id: format!("v{i}"),
                    feature: f.to_vec(),
                })
                .collect(),
            gt_class: None,
        }
    }

    fn encoders(widths: &[usize], out: usize, seed: u64) -> (ParamStore, GeometricEncoder, SpatialEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geo = GeometricEncoder::new(&mut store, &mut rng, widths, out);
        let spat = SpatialEncoder::new(&mut store, &mut rng, out);
        (store, geo, spat)
    }

    #[test]
    fn single_view_mean_is_identity() {
        let node = node_with_views(&[&[0.5, -2.0, 3.25]]);
        assert_eq!(aggregate_multiview(&node, 3, Visibility::Strict).unwrap(), vec![0.5, -2.0, 3.25]);
    }

    #[test]
    fn two_view_mean() {
        let node = node_with_views(&[&[1.0, 3.0], &[3.0, 1.0]]);
        assert_eq!(aggregate_multiview(&node, 2, Visibility::Strict).unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn seven_views_match_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let views: Vec<Vec<f32>> = (0..7).map(|_| (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let refs: Vec<&[f32]> = views.iter().map(|v| v.as_slice()).collect();
        let node = node_with_views(&refs);
        let got = aggregate_multiview(&node, 64, Visibility::Strict).unwrap();
        for d in 0..64 {
            let mut s = 0.0f64;
            for v in &views {
                s += v[d] as f64;
            }
            assert_eq!(got[d], s / 7.0);
        }
    }

    #[test]
    fn invisible_node_is_strict_error_or_lenient_zero() {
        let node = node_with_views(&[]);
        assert!(matches!(
            aggregate_multiview(&node, 4, Visibility::Strict),
            Err(FeatureError::NoViews { .. })
        ));
        assert_eq!(aggregate_multiview(&node, 4, Visibility::Lenient).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn view_order_does_not_matter() {
        let node = node_with_views(&[&[1.0, 2.0], &[0.5, -1.0], &[4.0, 0.25]]);
        let mut rev = node.clone();
        rev.view_features.reverse();
        assert_eq!(
            aggregate_multiview(&node, 2, Visibility::Strict).unwrap(),
            aggregate_multiview(&rev, 2, Visibility::Strict).unwrap()
        );
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f32; 3]> {
        (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..2.0)])
            .collect()
    }

    #[test]
    fn point_encoding_is_permutation_invariant_bitwise() {
        let (store, geo, _) = encoders(&[16, 32, 64], 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = random_points(&mut rng, 100);
        let mut shuffled = pts.clone();
        shuffled.shuffle(&mut rng);
        assert_eq!(geo.encode_points(&store, &pts).unwrap(), geo.encode_points(&store, &shuffled).unwrap());
    }

    #[test]
    fn duplicated_points_encode_identically() {
        let (store, geo, _) = encoders(&[16, 32], 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = random_points(&mut rng, 20);
        let mut doubled = pts.clone();
        doubled.extend_from_slice(&pts);
        assert_eq!(geo.encode_points(&store, &pts).unwrap(), geo.encode_points(&store, &doubled).unwrap());
    }

    #[test]
    fn single_origin_point_is_mlp_of_zero() {
        let (store, geo, _) = encoders(&[4, 4], 3, 6);
        let got = geo.encode_points(&store, &[[0.0, 0.0, 0.0]]).unwrap();
        // zero input: each per-point layer yields relu(bias) = 0, projection yields its bias
        let expected = store.get(geo.projection.bias).data().to_vec();
        assert_eq!(got, expected);
    }

    #[test]
    fn empty_point_set_is_rejected() {
        let (store, geo, _) = encoders(&[4], 3, 6);
        assert!(matches!(geo.encode_points(&store, &[]), Err(FeatureError::EmptyPoints { .. })));
    }

    #[test]
    fn unit_cube_maps_to_row_sums() {
        let (store, _, spat) = encoders(&[4], 5, 7);
        let got = spat
            .encode_spatial(&store, &Box3D { centroid: [0.0; 3], dims: [1.0; 3] })
            .unwrap();
        let w = store.get(spat.linear.weight).data();
        for (o, g) in got.iter().enumerate() {
            let col_sum: f64 = (0..SPATIAL_ATTRIBUTES).map(|i| w[i * 5 + o]).sum();
            assert!((g - col_sum).abs() < 1e-12);
        }
    }

    #[test]
    fn box_attribute_arithmetic() {
        let a = SpatialAttributes::from_box(&Box3D {
            centroid: [0.0; 3],
            dims: [2.0, 1.0, 1.0],
        })
        .unwrap();
        assert_eq!(a.to_array(), [2.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn flat_box_ratio_is_clamped() {
        let a = SpatialAttributes::from_box(&Box3D {
            centroid: [0.0; 3],
            dims: [10.0, 1e-5, 1.0],
        })
        .unwrap();
        assert_eq!(a.ratio, RATIO_MAX);
        assert!(SpatialAttributes::from_box(&Box3D { centroid: [0.0; 3], dims: [1.0, 0.0, 1.0] }).is_none());
    }

    #[test]
    fn random_box_matches_loop_linear_map() {
        let (mut store, _, spat) = encoders(&[4], 4, 8);
        for (i, b) in store.get_mut(spat.linear.bias).data_mut().iter_mut().enumerate() {
            *b = 0.1 * i as f64;
        }
        let bbox = Box3D {
            centroid: [1.0, 2.0, 0.3],
            dims: [0.7, 1.3, 0.45],
        };
        let got = spat.encode_spatial(&store, &bbox).unwrap();
        let x = SpatialAttributes::from_box(&bbox).unwrap().to_array();
        let w = store.get(spat.linear.weight).data();
        let b = store.get(spat.linear.bias).data();
        for o in 0..4 {
            let mut s = b[o];
            for i in 0..SPATIAL_ATTRIBUTES {
                s += x[i] * w[i * 4 + o];
            }
            assert!((got[o] - s).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn translation_does_not_change_point_encoding(tx in -3.0f32..3.0, ty in -3.0f32..3.0, tz in -3.0f32..3.0, seed in 0u64..1000) {
            let (store, geo, _) = encoders(&[8, 16], 6, 9);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = random_points(&mut rng, 30);
            let moved: Vec<[f32; 3]> = pts.iter().map(|p| [p[0] + tx, p[1] + ty, p[2] + tz]).collect();
            let a = geo.encode_points(&store, &pts).unwrap();
            let b = geo.encode_points(&store, &moved).unwrap();
            for (x, y) in a.iter().zip(&b) {
                // f32 storage of the translated points limits agreement
                prop_assert!((x - y).abs() < 1e-4, "{} vs {}", x, y);
            }
        }

        #[test]
        fn box_scaling_scales_attributes(k in 0.1f64..10.0, x in 0.1f64..3.0, y in 0.1f64..3.0, z in 0.1f64..3.0) {
            let base = SpatialAttributes::from_box(&Box3D { centroid: [0.0; 3], dims: [x, y, z] }).unwrap();
            let scaled = SpatialAttributes::from_box(&Box3D { centroid: [0.0; 3], dims: [k * x, k * y, k * z] }).unwrap();
            for a in 0..3 {
                prop_assert!((scaled.dims[a] - k * base.dims[a]).abs() <= 1e-12 * scaled.dims[a]);
            }
            prop_assert!((scaled.volume - k.powi(3) * base.volume).abs() <= 1e-12 * scaled.volume);
            prop_assert!((scaled.length - k * base.length).abs() <= 1e-12 * scaled.length);
            prop_assert!((scaled.ratio - base.ratio).abs() <= 1e-12 * base.ratio);
        }
    }
}
