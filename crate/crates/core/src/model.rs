//! The full network: input projection, point and box encoders, the GNN and
//! the two classification heads, plus loss, inference and checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{aggregate_multiview, center_points, FeatureError, GeometricEncoder, SpatialAttributes, SpatialEncoder, Visibility};
use crate::gnn::{edge_descriptor, GraphStructure, NodeInputs, RsnGnn, EDGE_DESCRIPTOR_DIM};
use crate::nn::{Bound, Linear, Mlp, ParamStore};
use crate::rescore::{self, base_prediction, rescore_scene, Prior, RescoreError, RescoreOptions, SceneGraphPrediction};
use crate::scene::{SceneError, SceneRecord};
use crate::tensor::{softmax, Tape, Tensor, TensorError, Var};

const CHECKPOINT_MAGIC: &[u8; 9] = b"SSGCKPT1\n";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Rescore(#[from] RescoreError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("label {label} out of range for {count} {what}")]
    LabelRange {
        what: &'static str,
        label: usize,
        count: usize,
    },
    #[error("scene vocabulary does not match the model: {0}")]
    Vocab(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub classes: Vec<String>,
    pub predicates: Vec<String>,
    pub hidden: usize,
    pub layers: usize,
    /// Per-point layer widths of the point encoder.
    pub point_widths: Vec<usize>,
    pub neighbor_residual: bool,
}

impl ModelConfig {
    pub fn new(feature_dim: usize, classes: Vec<String>, predicates: Vec<String>) -> Self {
        Self {
            feature_dim,
            classes,
            predicates,
            hidden: 256,
            layers: 2,
            point_widths: vec![64, 128, 256],
            neighbor_residual: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 {
            return Err(ModelError::Config("hidden and layers must be positive".into()));
        }
        if self.feature_dim == 0 {
            return Err(ModelError::Config("feature_dim must be positive".into()));
        }
        if self.classes.len() < 2 || self.predicates.len() < 2 {
            return Err(ModelError::Config("need at least two classes and two predicates".into()));
        }
        if self.point_widths.is_empty() || self.point_widths.contains(&0) {
            return Err(ModelError::Config("point widths must be non-empty and positive".into()));
        }
        Ok(())
    }
}

/// Scene inputs that do not depend on parameters, computed once.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub scene_id: String,
    pub node_ids: Vec<String>,
    pub v0: Vec<Vec<f64>>,
    /// Centered `[n×3]` point buffers.
    pub points: Vec<(usize, Vec<f64>)>,
    pub spatial: Vec<[f64; 6]>,
    pub graph: GraphStructure,
    pub descriptors: Vec<[f64; EDGE_DESCRIPTOR_DIM]>,
    pub node_labels: Vec<Option<usize>>,
    pub edge_labels: Vec<Option<usize>>,
}

impl PreparedScene {
    pub fn new(scene: &SceneRecord, visibility: Visibility) -> Result<Self> {
        let endpoints = scene.edge_endpoints()?;
        let mut v0 = Vec::with_capacity(scene.nodes.len());
        let mut points = Vec::with_capacity(scene.nodes.len());
        let mut spatial = Vec::with_capacity(scene.nodes.len());
        for node in &scene.nodes {
            v0.push(aggregate_multiview(node, scene.feature_dim, visibility)?);
            if node.points.is_empty() {
                return Err(FeatureError::EmptyPoints {
                    node: node.node_id.clone(),
                }
                .into());
            }
            points.push((node.points.len(), center_points(&node.points)));
            let attrs = SpatialAttributes::from_box(&node.bbox).ok_or_else(|| FeatureError::BadBox {
                node: node.node_id.clone(),
                dims: node.bbox.dims,
            })?;
            spatial.push(attrs.to_array());
        }
        let descriptors = endpoints
            .iter()
            .map(|&(s, d)| edge_descriptor(&scene.nodes[s].bbox, &scene.nodes[d].bbox))
            .collect();
        let ids: Vec<&str> = scene.nodes.iter().map(|n| n.node_id.as_str()).collect();
        let graph = GraphStructure::new(scene.nodes.len(), endpoints, |i| ids[i]);
        Ok(Self {
            scene_id: scene.scene_id.clone(),
            node_ids: scene.nodes.iter().map(|n| n.node_id.clone()).collect(),
            v0,
            points,
            spatial,
            graph,
            descriptors,
            node_labels: scene.nodes.iter().map(|n| n.gt_class).collect(),
            edge_labels: scene.edges.iter().map(|e| e.gt_predicate).collect(),
        })
    }

    pub fn neighbor_lists(&self) -> Vec<Vec<usize>> {
        (0..self.graph.node_count).map(|i| self.graph.neighbor_ids(i)).collect()
    }
}

/// Logit variables of one forward pass.
#[derive(Debug, Clone)]
pub struct Logits {
    pub nodes: Vec<Var>,
    pub edges: Vec<Var>,
}

/// Per-class loss weights; `None` means unweighted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossWeights {
    pub lambda_pred: f64,
    pub classes: Option<Vec<f64>>,
    pub predicates: Option<Vec<f64>>,
}

impl LossWeights {
    pub fn plain(lambda_pred: f64) -> Self {
        Self {
            lambda_pred,
            classes: None,
            predicates: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SceneGraphModel {
    pub config: ModelConfig,
    pub seed: u64,
    pub store: ParamStore,
    input_proj: Linear,
    geo: GeometricEncoder,
    spat: SpatialEncoder,
    gnn: RsnGnn,
    node_head: Mlp,
    edge_head: Mlp,
}

impl SceneGraphModel {
    /// Fresh parameters; creation order is fixed, so `seed` fully
    /// determines them.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = config.hidden;
        let input_proj = Linear::new(&mut store, &mut rng, "input_proj", config.feature_dim, h);
        let geo = GeometricEncoder::new(&mut store, &mut rng, &config.point_widths, h);
        let spat = SpatialEncoder::new(&mut store, &mut rng, h);
        let gnn = RsnGnn::new(&mut store, &mut rng, h, config.layers, config.neighbor_residual);
        let node_head = Mlp::new(&mut store, &mut rng, "head.node", &[h, h, config.classes.len()]);
        let edge_head = Mlp::new(&mut store, &mut rng, "head.edge", &[h, h, config.predicates.len()]);
        Ok(Self {
            config,
            seed,
            store,
            input_proj,
            geo,
            spat,
            gnn,
            node_head,
            edge_head,
        })
    }

    pub fn check_vocab(&self, classes: &[String], predicates: &[String], feature_dim: usize) -> Result<()> {
        if self.config.classes != classes || self.config.predicates != predicates {
            return Err(ModelError::Vocab("class or predicate names differ".into()));
        }
        if self.config.feature_dim != feature_dim {
            return Err(ModelError::Vocab(format!(
                "feature dimension {feature_dim}, model expects {}",
                self.config.feature_dim
            )));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, scene: &PreparedScene) -> Result<Logits> {
        let mut inputs = Vec::with_capacity(scene.v0.len());
        for i in 0..scene.v0.len() {
            let v0 = tape.constant(Tensor::vector(scene.v0[i].clone()))?;
            let v = self.input_proj.forward(tape, params, v0)?;
            let (n, ref pts) = scene.points[i];
            let pts = tape.constant(Tensor::matrix(n, 3, pts.clone())?)?;
            let v_geo = self.geo.forward(tape, params, pts)?;
            let attrs = tape.constant(Tensor::vector(scene.spatial[i].to_vec()))?;
            let v_spat = self.spat.forward(tape, params, attrs)?;
            inputs.push(NodeInputs { v, v_geo, v_spat });
        }
        let descriptors = scene
            .descriptors
            .iter()
            .map(|d| tape.constant(Tensor::vector(d.to_vec())))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let edges0 = self.gnn.embed_edges(tape, params, &descriptors)?;
        let state = self.gnn.forward(tape, params, &inputs, edges0, &scene.graph)?;
        let nodes = state
            .nodes
            .iter()
            .map(|v| self.node_head.forward(tape, params, *v))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let edges = state
            .edges
            .iter()
            .map(|e| self.edge_head.forward(tape, params, *e))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Logits { nodes, edges })
    }

    /// Raw node and edge logits.
    pub fn predict_logits(&self, scene: &PreparedScene) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let params = self.store.bind(&mut tape, false)?;
        let logits = self.forward(&mut tape, &params, scene)?;
        let read = |vars: &[Var]| vars.iter().map(|v| tape.value(*v).data().to_vec()).collect();
        Ok((read(&logits.nodes), read(&logits.edges)))
    }

    /// Distributions before and, when a prior is given, after rescoring.
    pub fn predict(&self, scene: &PreparedScene, rescoring: Option<(&Prior, &RescoreOptions)>) -> Result<SceneGraphPrediction> {
        let (nodes, edges) = self.predict_logits(scene)?;
        Ok(match rescoring {
            None => base_prediction(&nodes, &edges, &scene.graph.edges),
            Some((prior, opts)) => rescore_scene(&nodes, &edges, &scene.graph.edges, &scene.neighbor_lists(), prior, opts)?,
        })
    }

    /// Weighted-mean node cross-entropy plus `lambda_pred` times the edge
    /// term. With a prior, the logits are rescored first, treating
    /// confidences and prior offsets as constants. `None` when the scene has
    /// no labels at all.
    pub fn loss(
        &self,
        tape: &mut Tape,
        logits: &Logits,
        scene: &PreparedScene,
        weights: &LossWeights,
        rescoring: Option<(&Prior, &RescoreOptions)>,
    ) -> Result<Option<Var>> {
        let (node_logits, edge_logits) = match rescoring {
            None => (logits.nodes.clone(), logits.edges.clone()),
            Some((prior, opts)) => rescored_vars(tape, logits, scene, prior, opts)?,
        };
        let node_term = weighted_ce(tape, &node_logits, &scene.node_labels, weights.classes.as_deref(), self.config.classes.len(), "classes")?;
        let edge_term = weighted_ce(
            tape,
            &edge_logits,
            &scene.edge_labels,
            weights.predicates.as_deref(),
            self.config.predicates.len(),
            "predicates",
        )?;
        Ok(match (node_term, edge_term) {
            (None, None) => None,
            (Some(n), None) => Some(n),
            (None, Some(e)) => Some(tape.scale(e, weights.lambda_pred)?),
            (Some(n), Some(e)) => {
                let e = tape.scale(e, weights.lambda_pred)?;
                Some(tape.add(n, e)?)
            }
        })
    }
}

fn weighted_ce(
    tape: &mut Tape,
    logits: &[Var],
    labels: &[Option<usize>],
    weights: Option<&[f64]>,
    count: usize,
    what: &'static str,
) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    let mut total = 0.0;
    for (z, y) in logits.iter().zip(labels) {
        let Some(y) = *y else { continue };
        if y >= count {
            return Err(ModelError::LabelRange { what, label: y, count });
        }
        let w = weights.map_or(1.0, |w| w[y]);
        if w == 0.0 {
            continue;
        }
        let ce = tape.cross_entropy(*z, y)?;
        terms.push(if w == 1.0 { ce } else { tape.scale(ce, w)? });
        total += w;
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let sum = tape.add_n(&terms)?;
    Ok(Some(tape.scale(sum, 1.0 / total)?))
}

fn rescored_vars(tape: &mut Tape, logits: &Logits, scene: &PreparedScene, prior: &Prior, opts: &RescoreOptions) -> Result<(Vec<Var>, Vec<Var>)> {
    let node_values: Vec<Vec<f64>> = logits.nodes.iter().map(|v| tape.value(*v).data().to_vec()).collect();
    let edge_values: Vec<Vec<f64>> = logits.edges.iter().map(|v| tape.value(*v).data().to_vec()).collect();
    let base_nodes: Vec<Vec<f64>> = node_values.iter().map(|z| softmax(z)).collect();
    let node_adj = rescore::node_adjustments(&base_nodes, &scene.neighbor_lists(), prior, opts)?;
    let refined_nodes: Vec<Vec<f64>> = node_values.iter().zip(&node_adj).map(|(z, a)| softmax(&a.apply(z))).collect();
    let base_edges: Vec<Vec<f64>> = edge_values.iter().map(|z| softmax(z)).collect();
    let edge_adj = rescore::edge_adjustments(&base_edges, &scene.graph.edges, &refined_nodes, prior, opts)?;

    let mut apply = |vars: &[Var], adj: &[rescore::Adjustment]| -> Result<Vec<Var>> {
        vars.iter()
            .zip(adj)
            .map(|(z, a)| {
                let scaled = tape.scale(*z, a.alpha)?;
                let offset = tape.constant(Tensor::vector(a.offset.clone()))?;
                Ok(tape.add(scaled, offset)?)
            })
            .collect()
    };
    let nodes = apply(&logits.nodes, &node_adj)?;
    let edges = apply(&logits.edges, &edge_adj)?;
    Ok((nodes, edges))
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Debug, Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    seed: u64,
    #[serde(default)]
    train: Option<serde_json::Value>,
    params: Vec<ParamHeader>,
}

/// Magic line, u64 LE header length, JSON header, then every parameter as
/// little-endian f64 in header order. `train` is an optional config echo.
pub fn save_checkpoint(model: &SceneGraphModel, train: Option<serde_json::Value>, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        seed: model.seed,
        train,
        params: model
            .store
            .names()
            .iter()
            .zip(model.store.tensors())
            .map(|(name, t)| ParamHeader {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut bytes = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + json.len() + 8 * model.store.scalar_count());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for t in model.store.tensors() {
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let io = |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io)?;
    file.write_all(&bytes).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<SceneGraphModel> {
    let bad = |msg: String| ModelError::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let rest = bytes.strip_prefix(CHECKPOINT_MAGIC.as_slice()).ok_or_else(|| bad("not a checkpoint file".into()))?;
    if rest.len() < 8 {
        return Err(bad("truncated header".into()));
    }
    let header_len = u64::from_le_bytes(rest[..8].try_into().expect("eight bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < header_len {
        return Err(bad("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&rest[..header_len]).map_err(|e| bad(format!("header: {e}")))?;
    let blob = &rest[header_len..];

    let mut model = SceneGraphModel::new(header.config, header.seed)?;
    if header.params.len() != model.store.len() {
        return Err(bad(format!(
            "{} parameter tensors, model has {}",
            header.params.len(),
            model.store.len()
        )));
    }
    let expected = 8 * model.store.scalar_count();
    if blob.len() != expected {
        return Err(bad(format!("blob holds {} bytes, expected {expected}", blob.len())));
    }
    let names = model.store.names().to_vec();
    let mut offset = 0;
    for ((p, name), t) in header.params.iter().zip(&names).zip(model.store.tensors_mut()) {
        if &p.name != name || p.shape != t.shape() {
            return Err(bad(format!(
                "parameter {} {:?} does not match {} {:?}",
                p.name,
                p.shape,
                name,
                t.shape()
            )));
        }
        for x in t.data_mut() {
            *x = f64::from_le_bytes(blob[offset..offset + 8].try_into().expect("eight bytes"));
            if !x.is_finite() {
                return Err(bad(format!("non-finite value in {name}")));
            }
            offset += 8;
        }
    }
    Ok(model)
}
