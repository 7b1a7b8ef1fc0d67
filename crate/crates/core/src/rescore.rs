//! Confidence rescoring with training-set co-occurrence priors.
//!
//! Node logits are blended with the inverse-softmax of the class-given-
//! neighbor-class conditionals of every neighbor; edge logits with the
//! predicate-given-subject and predicate-given-object conditionals. The
//! blend weight is the predictor's own confidence (its max softmax), so
//! confident predictions are left nearly untouched and uncertain ones lean
//! on the prior.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::Corpus;
use crate::tensor::{argmax, softmax};

/// Confidences this close to one are treated as exactly one.
pub const FULL_CONFIDENCE: f64 = 1.0 - 1e-12;

#[derive(Debug, Error)]
pub enum RescoreError {
    #[error("no labeled edges to count co-occurrences from")]
    EmptyCorpus,
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("stats file: {0}")]
    Malformed(String),
    #[error("drop fraction {0} outside [0, 1)")]
    InvalidFraction(f64),
    #[error("stats carry no triplet counts; recompute them from a corpus to ablate")]
    MissingTriplets,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, RescoreError>;

/// Training-set co-occurrence counts over directed labeled edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceStats {
    pub classes: Vec<String>,
    pub predicates: Vec<String>,
    /// Additive smoothing applied to every count before normalizing.
    pub epsilon: f64,
    /// `[C][C]`: row = subject class, column = object class.
    pub node_pair: Vec<Vec<u64>>,
    /// `[P][C]`: predicate given subject class.
    pub pred_given_subj: Vec<Vec<u64>>,
    /// `[P][C]`: predicate given object class.
    pub pred_given_obj: Vec<Vec<u64>>,
    /// `[P][C][C]` (predicate, subject, object) counts; the three tables
    /// above are its marginals. Needed only for ablation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub triplets: Option<Vec<Vec<Vec<u64>>>>,
}

impl CooccurrenceStats {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn predicate_count(&self) -> usize {
        self.predicates.len()
    }

    fn check_shapes(&self) -> Result<()> {
        let (c, p) = (self.class_count(), self.predicate_count());
        let table_ok = |t: &Vec<Vec<u64>>, rows: usize, cols: usize| t.len() == rows && t.iter().all(|r| r.len() == cols);
        if !table_ok(&self.node_pair, c, c) {
            return Err(RescoreError::Malformed(format!("node_pair must be {c}×{c}")));
        }
        if !table_ok(&self.pred_given_subj, p, c) || !table_ok(&self.pred_given_obj, p, c) {
            return Err(RescoreError::Malformed(format!("predicate tables must be {p}×{c}")));
        }
        if let Some(t) = &self.triplets {
            if t.len() != p || !t.iter().all(|m| table_ok(m, c, c)) {
                return Err(RescoreError::Malformed(format!("triplets must be {p}×{c}×{c}")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(RescoreError::Malformed(format!("epsilon {} must be finite and ≥ 0", self.epsilon)));
        }
        Ok(())
    }

    pub fn check_vocab(&self, classes: &[String], predicates: &[String]) -> Result<()> {
        if self.classes != classes {
            return Err(RescoreError::VocabMismatch(format!(
                "stats classes {:?} vs {:?}",
                self.classes, classes
            )));
        }
        if self.predicates != predicates {
            return Err(RescoreError::VocabMismatch(format!(
                "stats predicates {:?} vs {:?}",
                self.predicates, predicates
            )));
        }
        Ok(())
    }

    pub fn total_edges(&self) -> u64 {
        self.node_pair.iter().flatten().sum()
    }
}

pub const DEFAULT_EPSILON: f64 = 1.0;

/// Counts every directed edge whose predicate and both endpoint classes
/// are labeled.
pub fn compute_stats(corpus: &Corpus) -> Result<CooccurrenceStats> {
    let (c, p) = (corpus.classes.len(), corpus.predicates.len());
    let mut triplets = vec![vec![vec![0u64; c]; c]; p];
    let mut counted = 0u64;
    for scene in &corpus.scenes {
        let index = scene.node_index();
        for e in &scene.edges {
            let (Some(r), Some(&s), Some(&o)) = (e.gt_predicate, index.get(e.src.as_str()), index.get(e.dst.as_str())) else {
                continue;
            };
            let (Some(cs), Some(co)) = (scene.nodes[s].gt_class, scene.nodes[o].gt_class) else {
                continue;
            };
            triplets[r][cs][co] += 1;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(RescoreError::EmptyCorpus);
    }
    Ok(from_triplets(corpus.classes.clone(), corpus.predicates.clone(), DEFAULT_EPSILON, triplets))
}

fn from_triplets(classes: Vec<String>, predicates: Vec<String>, epsilon: f64, triplets: Vec<Vec<Vec<u64>>>) -> CooccurrenceStats {
    let (c, p) = (classes.len(), predicates.len());
    let mut node_pair = vec![vec![0u64; c]; c];
    let mut pred_given_subj = vec![vec![0u64; c]; p];
    let mut pred_given_obj = vec![vec![0u64; c]; p];
    for (r, by_subj) in triplets.iter().enumerate() {
        for (s, by_obj) in by_subj.iter().enumerate() {
            for (o, &n) in by_obj.iter().enumerate() {
                node_pair[s][o] += n;
                pred_given_subj[r][s] += n;
                pred_given_obj[r][o] += n;
            }
        }
    }
    CooccurrenceStats {
        classes,
        predicates,
        epsilon,
        node_pair,
        pred_given_subj,
        pred_given_obj,
        triplets: Some(triplets),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionalKind {
    NodePair,
    PredGivenSubj,
    PredGivenObj,
}

/// Dense row-major matrix whose columns are probability distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnStochastic {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ColumnStochastic {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }
}

/// Smooths the chosen table by `epsilon` and normalizes each column. A
/// column with zero mass (only possible with `epsilon = 0`) becomes uniform.
pub fn conditional(stats: &CooccurrenceStats, kind: ConditionalKind) -> ColumnStochastic {
    let table = match kind {
        ConditionalKind::NodePair => &stats.node_pair,
        ConditionalKind::PredGivenSubj => &stats.pred_given_subj,
        ConditionalKind::PredGivenObj => &stats.pred_given_obj,
    };
    let rows = table.len();
    let cols = table.first().map_or(0, Vec::len);
    let mut data = vec![0.0; rows * cols];
    for c in 0..cols {
        let mass: f64 = (0..rows).map(|r| table[r][c] as f64 + stats.epsilon).sum();
        for r in 0..rows {
            data[r * cols + c] = if mass > 0.0 {
                (table[r][c] as f64 + stats.epsilon) / mass
            } else {
                1.0 / rows as f64
            };
        }
    }
    ColumnStochastic { rows, cols, data }
}

/// Mean-centered log: the minimum-norm logit vector whose softmax is `p`.
pub fn inverse_softmax(p: &[f64]) -> Vec<f64> {
    let logs: Vec<f64> = p.iter().map(|x| x.ln()).collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    logs.into_iter().map(|l| l - mean).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeCombine {
    /// Elementwise product of the subject and object prior terms.
    #[default]
    Product,
    Sum,
}

impl std::str::FromStr for EdgeCombine {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "product" => Ok(Self::Product),
            "sum" => Ok(Self::Sum),
            other => Err(format!("unknown edge combine mode `{other}` (expected product or sum)")),
        }
    }
}

/// How a neighbor's class enters the prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborEvidence {
    /// Column of the neighbor's argmax class.
    #[default]
    Argmax,
    /// Conditional averaged over the neighbor's predicted distribution.
    Expected,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RescoreOptions {
    /// Replaces every confidence with this constant.
    pub fixed_alpha: Option<f64>,
    pub edge_combine: EdgeCombine,
    pub neighbor_evidence: NeighborEvidence,
}

/// Conditionals prepared once per stats table, with the inverse softmax of
/// every column cached.
#[derive(Debug, Clone)]
pub struct Prior {
    pub classes: Vec<String>,
    pub predicates: Vec<String>,
    pub node_pair: ColumnStochastic,
    pub subj: ColumnStochastic,
    pub obj: ColumnStochastic,
    node_pair_gamma: Vec<Vec<f64>>,
    subj_gamma: Vec<Vec<f64>>,
    obj_gamma: Vec<Vec<f64>>,
}

fn gamma_columns(m: &ColumnStochastic) -> Vec<Vec<f64>> {
    (0..m.cols).map(|c| inverse_softmax(&m.column(c))).collect()
}

impl Prior {
    pub fn new(stats: &CooccurrenceStats) -> Result<Self> {
        stats.check_shapes()?;
        let node_pair = conditional(stats, ConditionalKind::NodePair);
        let subj = conditional(stats, ConditionalKind::PredGivenSubj);
        let obj = conditional(stats, ConditionalKind::PredGivenObj);
        Ok(Self {
            classes: stats.classes.clone(),
            predicates: stats.predicates.clone(),
            node_pair_gamma: gamma_columns(&node_pair),
            subj_gamma: gamma_columns(&subj),
            obj_gamma: gamma_columns(&obj),
            node_pair,
            subj,
            obj,
        })
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn predicate_count(&self) -> usize {
        self.predicates.len()
    }

    /// γ of the conditional column selected by a class distribution.
    fn evidence(&self, matrix: &ColumnStochastic, gammas: &[Vec<f64>], dist: &[f64], mode: NeighborEvidence) -> Vec<f64> {
        match mode {
            NeighborEvidence::Argmax => gammas[argmax(dist)].clone(),
            NeighborEvidence::Expected => {
                let col: Vec<f64> = (0..matrix.rows)
                    .map(|r| dist.iter().enumerate().map(|(c, p)| p * matrix.get(r, c)).sum())
                    .collect();
                inverse_softmax(&col)
            }
        }
    }
}

/// Max softmax probability, snapped to exactly one when within 1e-12.
pub fn confidence(dist: &[f64]) -> f64 {
    let m = dist.iter().cloned().fold(0.0, f64::max);
    if m >= FULL_CONFIDENCE {
        1.0
    } else {
        m
    }
}

fn alpha_of(dist: &[f64], opts: &RescoreOptions) -> f64 {
    opts.fixed_alpha.unwrap_or_else(|| confidence(dist))
}

/// Rescored logits are `alpha · logits + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjustment {
    pub alpha: f64,
    pub offset: Vec<f64>,
}

impl Adjustment {
    pub fn apply(&self, logits: &[f64]) -> Vec<f64> {
        logits.iter().zip(&self.offset).map(|(z, o)| self.alpha * z + o).collect()
    }
}

/// Node adjustments from base distributions and the undirected neighborhood.
pub fn node_adjustments(base: &[Vec<f64>], neighbors: &[Vec<usize>], prior: &Prior, opts: &RescoreOptions) -> Result<Vec<Adjustment>> {
    let c = prior.class_count();
    if let Some(bad) = base.iter().find(|d| d.len() != c) {
        return Err(RescoreError::VocabMismatch(format!(
            "node distribution has {} classes, stats have {c}",
            bad.len()
        )));
    }
    Ok(base
        .iter()
        .enumerate()
        .map(|(i, dist)| {
            let alpha = alpha_of(dist, opts);
            let mut offset = vec![0.0; c];
            if alpha < 1.0 {
                for &j in &neighbors[i] {
                    let alpha_j = alpha_of(&base[j], opts);
                    let g = prior.evidence(&prior.node_pair, &prior.node_pair_gamma, &base[j], opts.neighbor_evidence);
                    for (o, x) in offset.iter_mut().zip(&g) {
                        *o += alpha_j * x;
                    }
                }
                offset.iter_mut().for_each(|o| *o *= 1.0 - alpha);
            }
            Adjustment { alpha, offset }
        })
        .collect())
}

/// Edge adjustments; `nodes` are the (already rescored) node distributions.
pub fn edge_adjustments(
    base: &[Vec<f64>],
    endpoints: &[(usize, usize)],
    nodes: &[Vec<f64>],
    prior: &Prior,
    opts: &RescoreOptions,
) -> Result<Vec<Adjustment>> {
    let p = prior.predicate_count();
    if let Some(bad) = base.iter().find(|d| d.len() != p) {
        return Err(RescoreError::VocabMismatch(format!(
            "edge distribution has {} predicates, stats have {p}",
            bad.len()
        )));
    }
    Ok(base
        .iter()
        .zip(endpoints)
        .map(|(dist, &(s, o))| {
            let alpha = alpha_of(dist, opts);
            let mut offset = vec![0.0; p];
            if alpha < 1.0 {
                let (alpha_s, alpha_o) = (alpha_of(&nodes[s], opts), alpha_of(&nodes[o], opts));
                let gs = prior.evidence(&prior.subj, &prior.subj_gamma, &nodes[s], opts.neighbor_evidence);
                let go = prior.evidence(&prior.obj, &prior.obj_gamma, &nodes[o], opts.neighbor_evidence);
                for (k, slot) in offset.iter_mut().enumerate() {
                    let (a, b) = (alpha_s * gs[k], alpha_o * go[k]);
                    let combined = match opts.edge_combine {
                        EdgeCombine::Product => a * b,
                        EdgeCombine::Sum => a + b,
                    };
                    *slot = (1.0 - alpha) * combined;
                }
            }
            Adjustment { alpha, offset }
        })
        .collect())
}

/// Refined node distributions.
pub fn rescore_nodes(logits: &[Vec<f64>], neighbors: &[Vec<usize>], prior: &Prior, opts: &RescoreOptions) -> Result<Vec<Vec<f64>>> {
    let base: Vec<Vec<f64>> = logits.iter().map(|z| softmax(z)).collect();
    let adj = node_adjustments(&base, neighbors, prior, opts)?;
    Ok(logits.iter().zip(&adj).map(|(z, a)| softmax(&a.apply(z))).collect())
}

/// Refined edge distributions given refined node distributions.
pub fn rescore_edges(
    logits: &[Vec<f64>],
    endpoints: &[(usize, usize)],
    nodes: &[Vec<f64>],
    prior: &Prior,
    opts: &RescoreOptions,
) -> Result<Vec<Vec<f64>>> {
    let base: Vec<Vec<f64>> = logits.iter().map(|z| softmax(z)).collect();
    let adj = edge_adjustments(&base, endpoints, nodes, prior, opts)?;
    Ok(logits.iter().zip(&adj).map(|(z, a)| softmax(&a.apply(z))).collect())
}

// ---------------------------------------------------------------------------
// Predictions

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodePrediction {
    pub base: Vec<f64>,
    pub refined: Option<Vec<f64>>,
    pub class: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgePrediction {
    pub src: usize,
    pub dst: usize,
    pub base: Vec<f64>,
    pub refined: Option<Vec<f64>>,
    pub predicate: usize,
    pub confidence: f64,
}

impl NodePrediction {
    pub fn final_distribution(&self) -> &[f64] {
        self.refined.as_deref().unwrap_or(&self.base)
    }
}

impl EdgePrediction {
    pub fn final_distribution(&self) -> &[f64] {
        self.refined.as_deref().unwrap_or(&self.base)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraphPrediction {
    pub nodes: Vec<NodePrediction>,
    pub edges: Vec<EdgePrediction>,
}

fn node_prediction(base: Vec<f64>, refined: Option<Vec<f64>>) -> NodePrediction {
    let fin = refined.as_deref().unwrap_or(&base);
    let (class, confidence) = (argmax(fin), fin.iter().cloned().fold(0.0, f64::max));
    NodePrediction {
        base,
        refined,
        class,
        confidence,
    }
}

fn edge_prediction((src, dst): (usize, usize), base: Vec<f64>, refined: Option<Vec<f64>>) -> EdgePrediction {
    let fin = refined.as_deref().unwrap_or(&base);
    let (predicate, confidence) = (argmax(fin), fin.iter().cloned().fold(0.0, f64::max));
    EdgePrediction {
        src,
        dst,
        base,
        refined,
        predicate,
        confidence,
    }
}

/// Softmax of the raw predictor outputs, no prior.
pub fn base_prediction(node_logits: &[Vec<f64>], edge_logits: &[Vec<f64>], endpoints: &[(usize, usize)]) -> SceneGraphPrediction {
    SceneGraphPrediction {
        nodes: node_logits.iter().map(|z| node_prediction(softmax(z), None)).collect(),
        edges: edge_logits
            .iter()
            .zip(endpoints)
            .map(|(z, e)| edge_prediction(*e, softmax(z), None))
            .collect(),
    }
}

/// Node rescoring followed by edge rescoring on the refined nodes.
pub fn rescore_scene(
    node_logits: &[Vec<f64>],
    edge_logits: &[Vec<f64>],
    endpoints: &[(usize, usize)],
    neighbors: &[Vec<usize>],
    prior: &Prior,
    opts: &RescoreOptions,
) -> Result<SceneGraphPrediction> {
    let refined_nodes = rescore_nodes(node_logits, neighbors, prior, opts)?;
    let refined_edges = rescore_edges(edge_logits, endpoints, &refined_nodes, prior, opts)?;
    Ok(SceneGraphPrediction {
        nodes: node_logits
            .iter()
            .zip(refined_nodes)
            .map(|(z, r)| node_prediction(softmax(z), Some(r)))
            .collect(),
        edges: edge_logits
            .iter()
            .zip(endpoints)
            .zip(refined_edges)
            .map(|((z, e), r)| edge_prediction(*e, softmax(z), Some(r)))
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// Persistence and ablation

pub fn save_stats(stats: &CooccurrenceStats, path: &Path) -> Result<()> {
    stats.check_shapes()?;
    let json = serde_json::to_string(stats).map_err(|source| RescoreError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, json).map_err(|source| RescoreError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_stats(path: &Path) -> Result<CooccurrenceStats> {
    let text = fs::read_to_string(path).map_err(|source| RescoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let stats: CooccurrenceStats = serde_json::from_str(&text).map_err(|source| RescoreError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    stats.check_shapes()?;
    Ok(stats)
}

/// Zeroes the `floor(fraction · n)` most frequent of the `n` observed
/// (predicate, subject, object) triplets and rebuilds the marginal tables.
/// Ties rank by (predicate, subject, object) index.
pub fn ablate_stats(stats: &CooccurrenceStats, drop_top_fraction: f64) -> Result<CooccurrenceStats> {
    if !(0.0..1.0).contains(&drop_top_fraction) {
        return Err(RescoreError::InvalidFraction(drop_top_fraction));
    }
    if drop_top_fraction == 0.0 {
        return Ok(stats.clone());
    }
    stats.check_shapes()?;
    let mut triplets = stats.triplets.clone().ok_or(RescoreError::MissingTriplets)?;
    let mut observed: Vec<(u64, usize, usize, usize)> = Vec::new();
    for (r, by_subj) in triplets.iter().enumerate() {
        for (s, by_obj) in by_subj.iter().enumerate() {
            for (o, &n) in by_obj.iter().enumerate() {
                if n > 0 {
                    observed.push((n, r, s, o));
                }
            }
        }
    }
    observed.sort_by(|a, b| b.0.cmp(&a.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
    let drop = (drop_top_fraction * observed.len() as f64).floor() as usize;
    for &(_, r, s, o) in &observed[..drop] {
        triplets[r][s][o] = 0;
    }
    Ok(from_triplets(stats.classes.clone(), stats.predicates.clone(), stats.epsilon, triplets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stats_2x2(node_pair: Vec<Vec<u64>>, epsilon: f64) -> CooccurrenceStats {
        CooccurrenceStats {
            classes: vec!["a".into(), "b".into()],
            predicates: vec!["none".into(), "on".into()],
            epsilon,
            node_pair,
            pred_given_subj: vec![vec![1, 0], vec![0, 1]],
            pred_given_obj: vec![vec![1, 1], vec![0, 0]],
            triplets: None,
        }
    }

    #[test]
    fn diagonal_counts_without_smoothing_give_identity() {
        let m = conditional(&stats_2x2(vec![vec![2, 0], vec![0, 2]], 0.0), ConditionalKind::NodePair);
        assert_eq!(m.data, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn equal_counts_give_uniform_columns() {
        let m = conditional(&stats_2x2(vec![vec![5, 5], vec![5, 5]], 1.0), ConditionalKind::NodePair);
        assert_eq!(m.data, vec![0.5; 4]);
    }

    #[test]
    fn add_one_smoothing_hand_case() {
        let m = conditional(&stats_2x2(vec![vec![3, 1], vec![1, 3]], 1.0), ConditionalKind::NodePair);
        let expected = [4.0 / 6.0, 2.0 / 6.0, 2.0 / 6.0, 4.0 / 6.0];
        for (a, b) in m.data.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn inverse_softmax_cases() {
        assert_eq!(inverse_softmax(&[0.25; 4]), vec![0.0; 4]);
        let g = inverse_softmax(&[0.8, 0.2]);
        let half_ln4 = 4f64.ln() / 2.0;
        assert!((g[0] - half_ln4).abs() < 1e-12 && (g[1] + half_ln4).abs() < 1e-12);
        assert!((half_ln4 - 0.6931).abs() < 1e-4);
    }

    fn uniform_prior(c: usize, p: usize) -> Prior {
        Prior::new(&CooccurrenceStats {
            classes: (0..c).map(|i| format!("c{i}")).collect(),
            predicates: (0..p).map(|i| format!("p{i}")).collect(),
            epsilon: 1.0,
            node_pair: vec![vec![0; c]; c],
            pred_given_subj: vec![vec![0; c]; p],
            pred_given_obj: vec![vec![0; c]; p],
            triplets: None,
        })
        .unwrap()
    }

    #[test]
    fn full_confidence_reproduces_base() {
        let prior = Prior::new(&stats_2x2(vec![vec![9, 1], vec![1, 9]], 1.0)).unwrap();
        let logits = vec![vec![0.3, -0.2], vec![1.0, 0.5]];
        let neighbors = vec![vec![1], vec![0]];
        let opts = RescoreOptions {
            fixed_alpha: Some(1.0),
            ..Default::default()
        };
        let refined = rescore_nodes(&logits, &neighbors, &prior, &opts).unwrap();
        for (r, z) in refined.iter().zip(&logits) {
            assert_eq!(r, &softmax(z));
        }
        // a near-one-hot prediction snaps to full confidence
        let sharp = vec![vec![40.0, -40.0]];
        let out = rescore_nodes(&sharp, &[vec![]], &prior, &RescoreOptions::default()).unwrap();
        assert_eq!(out[0], softmax(&sharp[0]));
    }

    #[test]
    fn isolated_node_keeps_its_argmax() {
        let prior = uniform_prior(3, 2);
        let logits = vec![vec![0.1, 0.7, 0.2]];
        let out = rescore_nodes(&logits, &[vec![]], &prior, &RescoreOptions::default()).unwrap();
        assert_eq!(argmax(&out[0]), 1);
    }

    #[test]
    fn confident_neighbor_lifts_correct_class_by_hand() {
        // one neighbor confidently of class 1; the column for class 1 is [0.1, 0.9]
        let stats = CooccurrenceStats {
            classes: vec!["a".into(), "b".into()],
            predicates: vec!["none".into()],
            epsilon: 0.0,
            node_pair: vec![vec![1, 1], vec![1, 9]],
            pred_given_subj: vec![vec![1, 1]],
            pred_given_obj: vec![vec![1, 1]],
            triplets: None,
        };
        let prior = Prior::new(&stats).unwrap();
        let z_n = 0.9f64.ln() - 0.1f64.ln(); // neighbor logits giving softmax [0.1, 0.9]
        let logits = vec![vec![0.2, 0.0], vec![0.0, z_n]];
        let neighbors = vec![vec![1], vec![0]];
        let out = rescore_nodes(&logits, &neighbors, &prior, &RescoreOptions::default()).unwrap();

        let base = softmax(&logits[0]);
        let alpha_v = base[0];
        let alpha_j = 0.9;
        let half = (0.9f64.ln() - 0.1f64.ln()) / 2.0;
        let gamma = [-half, half];
        let z: Vec<f64> = (0..2)
            .map(|k| alpha_v * logits[0][k] + (1.0 - alpha_v) * alpha_j * gamma[k])
            .collect();
        let expected = softmax(&z);
        assert!((out[0][0] - expected[0]).abs() < 1e-12 && (out[0][1] - expected[1]).abs() < 1e-12);
        assert!(out[0][1] > base[1]);
    }

    #[test]
    fn edge_rescoring_limits() {
        let prior = uniform_prior(2, 3);
        let logits = vec![vec![0.5, 1.5, -0.3]];
        let nodes = vec![vec![0.6, 0.4], vec![0.3, 0.7]];
        let endpoints = vec![(0, 1)];
        let full = RescoreOptions {
            fixed_alpha: Some(1.0),
            ..Default::default()
        };
        assert_eq!(rescore_edges(&logits, &endpoints, &nodes, &prior, &full).unwrap()[0], softmax(&logits[0]));

        let out = rescore_edges(&logits, &endpoints, &nodes, &prior, &RescoreOptions::default()).unwrap();
        let alpha = softmax(&logits[0]).into_iter().fold(0.0, f64::max);
        let scaled: Vec<f64> = logits[0].iter().map(|z| alpha * z).collect();
        for (a, b) in out[0].iter().zip(softmax(&scaled)) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(argmax(&out[0]), 1);
    }

    #[test]
    fn three_predicate_hand_case() {
        let stats = CooccurrenceStats {
            classes: vec!["a".into(), "b".into()],
            predicates: vec!["none".into(), "on".into(), "near".into()],
            epsilon: 0.0,
            node_pair: vec![vec![1, 1], vec![1, 1]],
            pred_given_subj: vec![vec![2, 1], vec![1, 1], vec![1, 2]],
            pred_given_obj: vec![vec![1, 3], vec![2, 1], vec![1, 0 + 1]],
            triplets: None,
        };
        let prior = Prior::new(&stats).unwrap();
        let logits = vec![vec![0.4, 0.1, -0.2]];
        let nodes = vec![vec![0.7, 0.3], vec![0.2, 0.8]];
        for combine in [EdgeCombine::Product, EdgeCombine::Sum] {
            let opts = RescoreOptions {
                edge_combine: combine,
                ..Default::default()
            };
            let out = rescore_edges(&logits, &[(0, 1)], &nodes, &prior, &opts).unwrap();

            let alpha = softmax(&logits[0]).into_iter().fold(0.0, f64::max);
            let centered = |v: [f64; 3]| {
                let l: Vec<f64> = v.iter().map(|x| x.ln()).collect();
                let m = l.iter().sum::<f64>() / 3.0;
                l.into_iter().map(|x| x - m).collect::<Vec<f64>>()
            };
            let gs = centered([0.5, 0.25, 0.25]); // subject class 0 column
            let go = centered([3.0 / 5.0, 1.0 / 5.0, 1.0 / 5.0]); // object class 1 column
            let z: Vec<f64> = (0..3)
                .map(|k| {
                    let (a, b) = (0.7 * gs[k], 0.8 * go[k]);
                    let comb = if combine == EdgeCombine::Product { a * b } else { a + b };
                    alpha * logits[0][k] + (1.0 - alpha) * comb
                })
                .collect();
            for (a, b) in out[0].iter().zip(softmax(&z)) {
                assert!((a - b).abs() < 1e-12, "{combine:?}");
            }
        }
    }

    fn hand_triplets() -> CooccurrenceStats {
        // predicate × subject × object, two classes, three predicates
        let t = vec![
            vec![vec![10, 0], vec![0, 1]],
            vec![vec![0, 7], vec![3, 0]],
            vec![vec![0, 0], vec![2, 5]],
        ];
        from_triplets(vec!["a".into(), "b".into()], vec!["none".into(), "on".into(), "near".into()], 1.0, t)
    }

    #[test]
    fn ablation_zero_is_identity() {
        let s = hand_triplets();
        assert_eq!(ablate_stats(&s, 0.0).unwrap(), s);
    }

    #[test]
    fn ablation_half_drops_the_top_triplets() {
        // observed counts sorted: 10, 7, 5, 3, 2, 1 → floor(0.5·6) = 3 dropped
        let out = ablate_stats(&hand_triplets(), 0.5).unwrap();
        let t = out.triplets.as_ref().unwrap();
        assert_eq!(t[0][0][0], 0);
        assert_eq!(t[1][0][1], 0);
        assert_eq!(t[2][1][1], 0);
        assert_eq!((t[1][1][0], t[2][1][0], t[0][1][1]), (3, 2, 1));
        assert_eq!(out.node_pair, vec![vec![0, 0], vec![5, 1]]);
        assert_eq!(out.pred_given_subj, vec![vec![0, 1], vec![0, 3], vec![0, 2]]);
    }

    #[test]
    fn near_total_ablation_keeps_valid_conditionals() {
        let out = ablate_stats(&hand_triplets(), 0.999).unwrap();
        let remaining: u64 = out.triplets.as_ref().unwrap().iter().flatten().flatten().sum();
        assert_eq!(remaining, 1);
        let prior = Prior::new(&out).unwrap();
        for m in [&prior.node_pair, &prior.subj, &prior.obj] {
            for c in 0..m.cols {
                assert!((m.column(c).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ablation_fraction_is_validated() {
        assert!(matches!(ablate_stats(&hand_triplets(), 1.0), Err(RescoreError::InvalidFraction(_))));
        assert!(matches!(ablate_stats(&hand_triplets(), -0.1), Err(RescoreError::InvalidFraction(_))));
        let mut no_t = hand_triplets();
        no_t.triplets = None;
        assert!(matches!(ablate_stats(&no_t, 0.2), Err(RescoreError::MissingTriplets)));
    }

    #[test]
    fn stats_round_trip_and_empty_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.json");
        let s = stats_2x2(vec![vec![3, 1], vec![1, 3]], 1.0);
        save_stats(&s, &path).unwrap();
        assert_eq!(load_stats(&path).unwrap(), s);
        assert!(load_stats(Path::new("")).is_err());
    }

    #[test]
    fn vocab_mismatch_is_reported() {
        let prior = uniform_prior(2, 2);
        let err = rescore_nodes(&[vec![0.0; 3]], &[vec![]], &prior, &RescoreOptions::default());
        assert!(matches!(err, Err(RescoreError::VocabMismatch(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_inverts_inverse_softmax(raw in prop::collection::vec(0.01f64..1.0, 2..12)) {
            let z: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|x| x / z).collect();
            let back = softmax(&inverse_softmax(&p));
            for (a, b) in back.iter().zip(&p) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn conditionals_are_column_stochastic(counts in prop::collection::vec(0u64..50, 9), eps in 0.0f64..2.0) {
            let node_pair = counts.chunks(3).map(|c| c.to_vec()).collect();
            let stats = CooccurrenceStats {
                classes: vec!["a".into(), "b".into(), "c".into()],
                predicates: vec!["none".into()],
                epsilon: eps,
                node_pair,
                pred_given_subj: vec![vec![0, 0, 0]],
                pred_given_obj: vec![vec![1, 2, 3]],
                triplets: None,
            };
            for kind in [ConditionalKind::NodePair, ConditionalKind::PredGivenSubj, ConditionalKind::PredGivenObj] {
                let m = conditional(&stats, kind);
                for c in 0..m.cols {
                    prop_assert!((m.column(c).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn refined_distributions_are_positive_and_normalized(
            logits in prop::collection::vec(prop::collection::vec(-4.0f64..4.0, 3), 4),
            counts in prop::collection::vec(0u64..20, 9),
        ) {
            let stats = CooccurrenceStats {
                classes: vec!["a".into(), "b".into(), "c".into()],
                predicates: vec!["none".into(), "on".into()],
                epsilon: 1.0,
                node_pair: counts.chunks(3).map(|c| c.to_vec()).collect(),
                pred_given_subj: vec![vec![1, 2, 3], vec![3, 2, 1]],
                pred_given_obj: vec![vec![0, 0, 1], vec![1, 0, 0]],
                triplets: None,
            };
            let prior = Prior::new(&stats).unwrap();
            let neighbors = vec![vec![1, 2, 3], vec![0], vec![0, 3], vec![0, 2]];
            let nodes = rescore_nodes(&logits, &neighbors, &prior, &RescoreOptions::default()).unwrap();
            let edge_logits: Vec<Vec<f64>> = logits.iter().map(|z| z[..2].to_vec()).collect();
            let endpoints = vec![(0, 1), (1, 0), (2, 3), (3, 0)];
            let edges = rescore_edges(&edge_logits, &endpoints, &nodes, &prior, &RescoreOptions::default()).unwrap();
            for d in nodes.iter().chain(&edges) {
                prop_assert!(d.iter().all(|x| *x > 0.0));
                prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
