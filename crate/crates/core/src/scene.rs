//! Scene records and their on-disk format.
//!
//! A scene is one JSON document plus a sibling binary blob. The JSON holds
//! identifiers, labels, boxes and vocabularies; the blob holds every point
//! set and per-view feature vector as little-endian `f32`, addressed by a
//! byte offset and an element count. A corpus is a directory with a
//! `manifest.json` naming its scene files and the shared vocabularies.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_EDGE_RADIUS: f64 = 2.0;
pub const MATCH_TOLERANCE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: parse error at line {line}, column {column} (field `{field}`): {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        field: String,
        msg: String,
    },
    #[error("scene {scene}: {msg}")]
    Invalid { scene: String, msg: String },
    #[error("scene {scene}: node {node}, view {view}: feature has {got} entries, expected {expected}")]
    FeatureDim {
        scene: String,
        node: String,
        view: String,
        expected: usize,
        got: usize,
    },
}

impl SceneError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn invalid(scene: &str, msg: impl Into<String>) -> Self {
        Self::Invalid {
            scene: scene.to_string(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, SceneError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct View {
    pub view_id: String,
}

/// Encoded, mask-filtered crop of one node in one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewFeature {
    pub view_id: String,
    pub feature: Vec<f32>,
}

/// Axis-aligned box: centroid and positive extents, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub centroid: [f64; 3],
    pub dims: [f64; 3],
}

impl Box3D {
    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }

    pub fn length(&self) -> f64 {
        self.dims.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_valid(&self) -> bool {
        self.dims.iter().all(|d| d.is_finite() && *d > 0.0) && self.centroid.iter().all(|c| c.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeInstance {
    pub node_id: String,
    pub points: Vec<[f32; 3]>,
    pub bbox: Box3D,
    /// One entry per covisible view.
    pub view_features: Vec<ViewFeature>,
    pub gt_class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeInstance {
    pub src: String,
    pub dst: String,
    pub gt_predicate: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub scene_id: String,
    pub feature_dim: usize,
    pub classes: Vec<String>,
    /// Index 0 is the "none" predicate.
    pub predicates: Vec<String>,
    pub views: Vec<View>,
    pub nodes: Vec<NodeInstance>,
    pub edges: Vec<EdgeInstance>,
}

impl SceneRecord {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn predicate_count(&self) -> usize {
        self.predicates.len()
    }

    /// node_id → position in `nodes`.
    pub fn node_index(&self) -> HashMap<&str, usize> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.node_id.as_str(), i))
            .collect()
    }

    /// Resolves every edge to `(src, dst)` node positions.
    pub fn edge_endpoints(&self) -> Result<Vec<(usize, usize)>> {
        let index = self.node_index();
        self.edges
            .iter()
            .map(|e| match (index.get(e.src.as_str()), index.get(e.dst.as_str())) {
                (Some(&s), Some(&d)) => Ok((s, d)),
                _ => Err(SceneError::invalid(
                    &self.scene_id,
                    format!("edge {} -> {} references an unknown node", e.src, e.dst),
                )),
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let sid = self.scene_id.as_str();
        if self.feature_dim == 0 {
            return Err(SceneError::invalid(sid, "feature_dim must be positive"));
        }
        if self.classes.is_empty() {
            return Err(SceneError::invalid(sid, "empty class vocabulary"));
        }
        match self.predicates.first() {
            Some(p) if p.eq_ignore_ascii_case("none") => {}
            _ => return Err(SceneError::invalid(sid, "predicate vocabulary must start with \"none\"")),
        }

        let mut views = HashSet::new();
        for v in &self.views {
            if !views.insert(v.view_id.as_str()) {
                return Err(SceneError::invalid(sid, format!("duplicate view_id {}", v.view_id)));
            }
        }

        let mut node_ids = HashSet::new();
        for n in &self.nodes {
            if !node_ids.insert(n.node_id.as_str()) {
                return Err(SceneError::invalid(sid, format!("duplicate node_id {}", n.node_id)));
            }
            if !n.bbox.is_valid() {
                return Err(SceneError::invalid(
                    sid,
                    format!("node {}: box dims must be positive and finite, got {:?}", n.node_id, n.bbox.dims),
                ));
            }
            if let Some(c) = n.gt_class {
                if c >= self.classes.len() {
                    return Err(SceneError::invalid(
                        sid,
                        format!("node {}: gt_class {} outside [0, {})", n.node_id, c, self.classes.len()),
                    ));
                }
            }
            if n.points.iter().flatten().any(|x| !x.is_finite()) {
                return Err(SceneError::invalid(sid, format!("node {}: non-finite point", n.node_id)));
            }
            let mut seen = HashSet::new();
            for vf in &n.view_features {
                if !views.contains(vf.view_id.as_str()) {
                    return Err(SceneError::invalid(
                        sid,
                        format!("node {}: unknown view {}", n.node_id, vf.view_id),
                    ));
                }
                if !seen.insert(vf.view_id.as_str()) {
                    return Err(SceneError::invalid(
                        sid,
                        format!("node {}: duplicate feature for view {}", n.node_id, vf.view_id),
                    ));
                }
                if vf.feature.len() != self.feature_dim {
                    return Err(SceneError::FeatureDim {
                        scene: self.scene_id.clone(),
                        node: n.node_id.clone(),
                        view: vf.view_id.clone(),
                        expected: self.feature_dim,
                        got: vf.feature.len(),
                    });
                }
                if vf.feature.iter().any(|x| !x.is_finite()) {
                    return Err(SceneError::invalid(
                        sid,
                        format!("node {}, view {}: non-finite feature entry", n.node_id, vf.view_id),
                    ));
                }
            }
        }

        let mut pairs = HashSet::new();
        for e in &self.edges {
            let name = format!("edge {} -> {}", e.src, e.dst);
            if !node_ids.contains(e.src.as_str()) || !node_ids.contains(e.dst.as_str()) {
                return Err(SceneError::invalid(sid, format!("{name} references an unknown node")));
            }
            if e.src == e.dst {
                return Err(SceneError::invalid(sid, format!("{name} is a self-loop")));
            }
            if !pairs.insert((e.src.as_str(), e.dst.as_str())) {
                return Err(SceneError::invalid(sid, format!("{name} is duplicated")));
            }
            if let Some(p) = e.gt_predicate {
                if p >= self.predicates.len() {
                    return Err(SceneError::invalid(
                        sid,
                        format!("{name}: gt_predicate {} outside [0, {})", p, self.predicates.len()),
                    ));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// File format

#[derive(Debug, Serialize, Deserialize)]
struct SceneFile {
    scene_id: String,
    feature_dim: usize,
    classes: Vec<String>,
    predicates: Vec<String>,
    blob: String,
    views: Vec<View>,
    nodes: Vec<NodeEntry>,
    edges: Vec<EdgeInstance>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeEntry {
    node_id: String,
    gt_class: Option<usize>,
    bbox: Box3D,
    points_file: String,
    points_offset: u64,
    points_len: usize,
    features: Vec<FeatureEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureEntry {
    view_id: String,
    /// Byte offset into the blob.
    data_offset: u64,
    /// Number of `f32` values.
    len: usize,
}

pub(crate) fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        SceneError::Parse {
            path: path.to_path_buf(),
            line: inner.line(),
            column: inner.column(),
            field,
            msg: inner.to_string(),
        }
    })
}

fn blob_path_for(json_path: &Path) -> PathBuf {
    json_path.with_extension("bin")
}

fn push_f32s(blob: &mut Vec<u8>, values: impl IntoIterator<Item = f32>) -> (u64, usize) {
    let offset = blob.len() as u64;
    let mut n = 0;
    for v in values {
        blob.extend_from_slice(&v.to_le_bytes());
        n += 1;
    }
    (offset, n)
}

fn read_f32s(blob: &[u8], offset: u64, len: usize, what: impl Fn() -> String, scene: &str) -> Result<Vec<f32>> {
    let start = usize::try_from(offset).map_err(|_| SceneError::invalid(scene, format!("{}: offset overflow", what())))?;
    let end = start
        .checked_add(len.checked_mul(4).unwrap_or(usize::MAX))
        .filter(|&e| e <= blob.len())
        .ok_or_else(|| {
            SceneError::invalid(
                scene,
                format!("{}: range {}+{}×4 outside blob of {} bytes", what(), start, len, blob.len()),
            )
        })?;
    Ok(blob[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Reads and validates one scene.
pub fn load_scene(path: &Path) -> Result<SceneRecord> {
    let text = fs::read_to_string(path).map_err(|e| SceneError::io(path, e))?;
    let file: SceneFile = parse_json(path, &text)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut blobs: HashMap<String, Vec<u8>> = HashMap::new();
    let mut blob = |name: &str| -> Result<Vec<u8>> {
        if let Some(b) = blobs.get(name) {
            return Ok(b.clone());
        }
        let p = dir.join(name);
        let b = fs::read(&p).map_err(|e| SceneError::io(&p, e))?;
        blobs.insert(name.to_string(), b.clone());
        Ok(b)
    };
    let feature_blob = blob(&file.blob)?;
    let sid = file.scene_id.clone();

    let mut nodes = Vec::with_capacity(file.nodes.len());
    for n in file.nodes {
        if n.points_len % 3 != 0 {
            return Err(SceneError::invalid(
                &sid,
                format!("node {}: points_len {} is not a multiple of 3", n.node_id, n.points_len),
            ));
        }
        let point_blob = if n.points_file == file.blob {
            feature_blob.clone()
        } else {
            blob(&n.points_file)?
        };
        let flat = read_f32s(&point_blob, n.points_offset, n.points_len, || format!("node {} points", n.node_id), &sid)?;
        let points = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let view_features = n
            .features
            .iter()
            .map(|f| {
                let feature = read_f32s(
                    &feature_blob,
                    f.data_offset,
                    f.len,
                    || format!("node {} view {} feature", n.node_id, f.view_id),
                    &sid,
                )?;
                Ok(ViewFeature {
                    view_id: f.view_id.clone(),
                    feature,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        nodes.push(NodeInstance {
            node_id: n.node_id,
            points,
            bbox: n.bbox,
            view_features,
            gt_class: n.gt_class,
        });
    }

    let scene = SceneRecord {
        scene_id: file.scene_id,
        feature_dim: file.feature_dim,
        classes: file.classes,
        predicates: file.predicates,
        views: file.views,
        nodes,
        edges: file.edges,
    };
    scene.validate()?;
    Ok(scene)
}

/// Writes `path` (JSON) and its sibling `.bin` blob.
pub fn save_scene(scene: &SceneRecord, path: &Path) -> Result<()> {
    scene.validate()?;
    let blob_path = blob_path_for(path);
    let blob_name = blob_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| SceneError::invalid(&scene.scene_id, format!("bad output path {}", path.display())))?
        .to_string();

    let mut blob = Vec::new();
    let mut nodes = Vec::with_capacity(scene.nodes.len());
    for n in &scene.nodes {
        let (points_offset, points_len) = push_f32s(&mut blob, n.points.iter().flatten().copied());
        let features = n
            .view_features
            .iter()
            .map(|vf| {
                let (data_offset, len) = push_f32s(&mut blob, vf.feature.iter().copied());
                FeatureEntry {
                    view_id: vf.view_id.clone(),
                    data_offset,
                    len,
                }
            })
            .collect();
        nodes.push(NodeEntry {
            node_id: n.node_id.clone(),
            gt_class: n.gt_class,
            bbox: n.bbox,
            points_file: blob_name.clone(),
            points_offset,
            points_len,
            features,
        });
    }
    let file = SceneFile {
        scene_id: scene.scene_id.clone(),
        feature_dim: scene.feature_dim,
        classes: scene.classes.clone(),
        predicates: scene.predicates.clone(),
        blob: blob_name,
        views: scene.views.clone(),
        nodes,
        edges: scene.edges.clone(),
    };
    let json = serde_json::to_string_pretty(&file).expect("scene file serializes");
    fs::write(path, json).map_err(|e| SceneError::io(path, e))?;
    fs::write(&blob_path, blob).map_err(|e| SceneError::io(&blob_path, e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Corpora

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub feature_dim: usize,
    pub classes: Vec<String>,
    pub predicates: Vec<String>,
    /// Scene JSON files relative to the corpus directory.
    pub scenes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub feature_dim: usize,
    pub classes: Vec<String>,
    pub predicates: Vec<String>,
    pub scenes: Vec<SceneRecord>,
}

impl Corpus {
    pub fn new(feature_dim: usize, classes: Vec<String>, predicates: Vec<String>, scenes: Vec<SceneRecord>) -> Result<Self> {
        let corpus = Self {
            feature_dim,
            classes,
            predicates,
            scenes,
        };
        corpus.check_vocab()?;
        Ok(corpus)
    }

    fn check_vocab(&self) -> Result<()> {
        for s in &self.scenes {
            if s.feature_dim != self.feature_dim || s.classes != self.classes || s.predicates != self.predicates {
                return Err(SceneError::invalid(
                    &s.scene_id,
                    "feature_dim or vocabulary differs from the corpus manifest",
                ));
            }
        }
        Ok(())
    }
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| SceneError::io(&manifest_path, e))?;
    let manifest: Manifest = parse_json(&manifest_path, &text)?;
    let scenes = manifest
        .scenes
        .par_iter()
        .map(|rel| load_scene(&dir.join(rel)))
        .collect::<Result<Vec<_>>>()?;
    Corpus::new(manifest.feature_dim, manifest.classes, manifest.predicates, scenes)
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    corpus.check_vocab()?;
    fs::create_dir_all(dir).map_err(|e| SceneError::io(dir, e))?;
    let mut names = Vec::with_capacity(corpus.scenes.len());
    for (i, s) in corpus.scenes.iter().enumerate() {
        let name = format!("scene_{:05}.json", i);
        save_scene(s, &dir.join(&name))?;
        names.push(name);
    }
    let manifest = Manifest {
        feature_dim: corpus.feature_dim,
        classes: corpus.classes.clone(),
        predicates: corpus.predicates.clone(),
        scenes: names,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| SceneError::io(&path, e))
}

// ---------------------------------------------------------------------------
// Candidate edges and instance matching

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Adds an unlabeled directed edge for every ordered pair whose centroids
/// are within `radius`. Existing edges keep their labels and order.
pub fn build_proximity_edges(scene: &SceneRecord, radius: f64) -> SceneRecord {
    let mut out = scene.clone();
    let existing: HashSet<(String, String)> = scene.edges.iter().map(|e| (e.src.clone(), e.dst.clone())).collect();
    for a in &scene.nodes {
        for b in &scene.nodes {
            if a.node_id == b.node_id || existing.contains(&(a.node_id.clone(), b.node_id.clone())) {
                continue;
            }
            if distance(&a.bbox.centroid, &b.bbox.centroid) <= radius {
                out.edges.push(EdgeInstance {
                    src: a.node_id.clone(),
                    dst: b.node_id.clone(),
                    gt_predicate: None,
                });
            }
        }
    }
    out
}

type Cell = (i64, i64, i64);

fn cell_of(p: &[f32; 3], size: f64) -> Cell {
    (
        (p[0] as f64 / size).floor() as i64,
        (p[1] as f64 / size).floor() as i64,
        (p[2] as f64 / size).floor() as i64,
    )
}

fn point_dist2(a: &[f32; 3], b: &[f32; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum()
}

/// Shared-point counts `overlap[p][g]`: a predicted point counts toward the
/// GT segment owning its nearest GT point, if that point lies within
/// [`MATCH_TOLERANCE`].
pub fn overlap_counts(predicted: &[Vec<[f32; 3]>], gt: &[Vec<[f32; 3]>]) -> Vec<Vec<usize>> {
    let size = MATCH_TOLERANCE;
    let mut grid: HashMap<Cell, Vec<(usize, [f32; 3])>> = HashMap::new();
    for (g, pts) in gt.iter().enumerate() {
        for p in pts {
            grid.entry(cell_of(p, size)).or_default().push((g, *p));
        }
    }
    let tol2 = MATCH_TOLERANCE * MATCH_TOLERANCE;
    predicted
        .iter()
        .map(|pts| {
            let mut counts = vec![0usize; gt.len()];
            for p in pts {
                let (cx, cy, cz) = cell_of(p, size);
                let mut best: Option<(f64, usize)> = None;
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        for dz in -1..=1 {
                            let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) else { continue };
                            for (g, q) in bucket {
                                let d = point_dist2(p, q);
                                if best.is_none_or(|(bd, bg)| d < bd || (d == bd && *g < bg)) {
                                    best = Some((d, *g));
                                }
                            }
                        }
                    }
                }
                if let Some((d, g)) = best {
                    if d <= tol2 {
                        counts[g] += 1;
                    }
                }
            }
            counts
        })
        .collect()
}

/// Greedy predicted→GT assignment by descending shared-point count. Each GT
/// segment is used at most once; predictions without overlap map to `None`.
pub fn match_instances(predicted: &[Vec<[f32; 3]>], gt: &[Vec<[f32; 3]>]) -> Vec<Option<usize>> {
    let overlap = overlap_counts(predicted, gt);
    let mut pairs: Vec<(usize, usize, usize)> = overlap
        .iter()
        .enumerate()
        .flat_map(|(p, row)| row.iter().enumerate().filter(|(_, c)| **c > 0).map(move |(g, c)| (*c, p, g)))
        .collect();
    pairs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut mapping = vec![None; predicted.len()];
    let mut gt_used = vec![false; gt.len()];
    for (_, p, g) in pairs {
        if mapping[p].is_none() && !gt_used[g] {
            mapping[p] = Some(g);
            gt_used[g] = true;
        }
    }
    mapping
}
