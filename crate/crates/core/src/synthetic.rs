//! Seeded generator of multi-view scene corpora with known class contexts,
//! predicate tables and background contamination.
//!
//! A ground-truth model (class prototypes, a background prototype, class
//! contexts and a predicate table) is drawn from the seed. Every scene then
//! draws from its own ChaCha stream, so scenes can be produced in parallel
//! and any split reproduces on its own.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, EvalReport, MetricsError, SceneTruth};
use crate::rescore::{EdgePrediction, NodePrediction, SceneGraphPrediction};
use crate::scene::{save_corpus, Box3D, Corpus, EdgeInstance, NodeInstance, SceneError, SceneRecord, View, ViewFeature};

pub const MODEL_FILE: &str = "model.json";

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("corpus does not match the generator model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
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

pub type Result<T> = std::result::Result<T, GenError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Contamination {
    /// Per-view blend weight scaled down by mask quality.
    Mask,
    Bbox,
}

impl std::str::FromStr for Contamination {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mask" => Ok(Self::Mask),
            "bbox" => Ok(Self::Bbox),
            other => Err(format!("unknown contamination mode `{other}` (expected mask or bbox)")),
        }
    }
}

/// How classes are assigned to contexts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextLayout {
    /// Class `c` belongs to context `c mod K` only.
    Partition,
    /// Each class joins each context independently with this probability;
    /// every context gets at least two classes and every class a context.
    Random { inclusion: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredicateTableSpec {
    /// Per (subject, object) pair a Dirichlet draw with the given
    /// concentration; `none_mass` is the expected probability of None.
    RandomConcentrated { concentration: f64, none_mass: f64 },
    /// `[subject][object][predicate]` probabilities.
    Explicit(Vec<Vec<Vec<f64>>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seed: u64,
    pub classes: usize,
    pub predicates: usize,
    pub feature_dim: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub nodes_min: usize,
    pub nodes_max: usize,
    pub edge_radius: f64,
    pub room_size: f64,
    /// Norm of each class prototype; the background prototype has norm one.
    pub prototype_scale: f64,
    /// When set, classes `2k` and `2k + 1` share a base direction and
    /// differ by an independent direction of this relative size, making
    /// them hard to tell apart from appearance alone.
    pub twin_offset: Option<f64>,
    /// Per-dimension standard deviation of view feature noise.
    pub feature_noise: f64,
    pub contamination: Contamination,
    pub beta_max: f64,
    pub mask_quality: f64,
    pub predicate_table: PredicateTableSpec,
    pub contexts: usize,
    pub context_layout: ContextLayout,
    /// Weight of a uniform distribution over all classes mixed into every
    /// context (objects that do not fit the scene type).
    pub context_leak: f64,
    /// Within a context, class `k` has weight `(k + 1)^-class_skew`.
    pub class_skew: f64,
    /// Context `k` is chosen with weight `(k + 1)^-context_skew`.
    pub context_skew: f64,
    /// Standard deviation of the log-normal jitter on class box sizes.
    pub size_jitter: f64,
    pub points_min: usize,
    pub points_max: usize,
    pub views_per_scene: usize,
    pub views_min: usize,
    pub views_max: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 10,
            predicates: 5,
            feature_dim: 32,
            train_scenes: 200,
            val_scenes: 50,
            test_scenes: 50,
            nodes_min: 4,
            nodes_max: 10,
            edge_radius: 2.0,
            room_size: 6.0,
            prototype_scale: 0.35,
            twin_offset: Some(0.5),
            feature_noise: 0.3,
            contamination: Contamination::Mask,
            beta_max: 0.5,
            mask_quality: 0.8,
            predicate_table: PredicateTableSpec::RandomConcentrated {
                concentration: 0.1,
                none_mass: 0.3,
            },
            contexts: 5,
            context_layout: ContextLayout::Partition,
            context_leak: 0.0,
            class_skew: 0.0,
            context_skew: 1.0,
            size_jitter: 0.35,
            points_min: 64,
            points_max: 256,
            views_per_scene: 8,
            views_min: 2,
            views_max: 6,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(GenError::Config(m.into()));
        if self.classes < 2 || self.predicates < 2 || self.feature_dim == 0 {
            return fail("need at least two classes, two predicates and a positive feature dimension");
        }
        if self.nodes_min < 2 || self.nodes_min > self.nodes_max {
            return fail("need 2 ≤ nodes_min ≤ nodes_max");
        }
        if self.points_min == 0 || self.points_min > self.points_max {
            return fail("need 1 ≤ points_min ≤ points_max");
        }
        if self.views_min == 0 || self.views_min > self.views_max || self.views_min > self.views_per_scene {
            return fail("need 1 ≤ views_min ≤ views_max and views_min ≤ views_per_scene");
        }
        if self.contexts == 0 {
            return fail("need at least one context");
        }
        match self.context_layout {
            ContextLayout::Partition if self.contexts > self.classes => {
                return fail("a partition needs at least as many classes as contexts");
            }
            ContextLayout::Random { inclusion } if !(0.0..=1.0).contains(&inclusion) => {
                return fail("context inclusion must lie in [0, 1]");
            }
            _ => {}
        }
        if let Some(d) = self.twin_offset {
            if !(d >= 0.0 && d.is_finite()) {
                return fail("twin_offset must be finite and non-negative");
            }
        }
        for (name, x) in [
            ("beta_max", self.beta_max),
            ("mask_quality", self.mask_quality),
            ("context_leak", self.context_leak),
        ] {
            if !(0.0..=1.0).contains(&x) {
                return Err(GenError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        for (name, x) in [
            ("edge_radius", self.edge_radius),
            ("room_size", self.room_size),
            ("prototype_scale", self.prototype_scale),
        ] {
            if !(x > 0.0 && x.is_finite()) {
                return Err(GenError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.feature_noise >= 0.0 && self.size_jitter >= 0.0 && self.class_skew >= 0.0 && self.context_skew >= 0.0) {
            return fail("feature_noise, size_jitter and skews must be non-negative");
        }
        match &self.predicate_table {
            PredicateTableSpec::RandomConcentrated {
                concentration,
                none_mass,
            } => {
                if !(*concentration > 0.0 && concentration.is_finite()) || !(0.0..1.0).contains(none_mass) {
                    return fail("concentration must be positive and none_mass in [0, 1)");
                }
            }
            PredicateTableSpec::Explicit(t) => {
                let ok = t.len() == self.classes
                    && t.iter().all(|row| {
                        row.len() == self.classes
                            && row.iter().all(|p| {
                                p.len() == self.predicates
                                    && p.iter().all(|x| *x >= 0.0)
                                    && (p.iter().sum::<f64>() - 1.0).abs() < 1e-9
                            })
                    });
                if !ok {
                    return fail("explicit predicate table must be C×C×P with stochastic rows");
                }
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.classes).map(|c| format!("class_{c:02}")).collect()
    }

    pub fn predicate_names(&self) -> Vec<String> {
        std::iter::once("none".to_string())
            .chain((1..self.predicates).map(|r| format!("pred_{r:02}")))
            .collect()
    }

    /// Per-view contamination weight.
    pub fn draw_beta(&self, rng: &mut impl Rng) -> f64 {
        let beta = if self.beta_max > 0.0 {
            rng.random_range(0.0..=self.beta_max)
        } else {
            0.0
        };
        match self.contamination {
            Contamination::Bbox => beta,
            Contamination::Mask => beta * (1.0 - self.mask_quality),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthModel {
    pub classes: Vec<String>,
    pub predicates: Vec<String>,
    pub feature_dim: usize,
    pub prototypes: Vec<Vec<f64>>,
    pub background: Vec<f64>,
    pub context_weights: Vec<f64>,
    /// `[context][class]` probabilities.
    pub contexts: Vec<Vec<f64>>,
    /// Typical box extents per class.
    pub class_dims: Vec<[f64; 3]>,
    /// `[subject][object][predicate]` probabilities.
    pub predicate_table: Vec<Vec<Vec<f64>>>,
    pub config: GenConfig,
}

impl GroundTruthModel {
    /// Marginal class probability of a node.
    pub fn class_marginal(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.classes.len()];
        for (w, ctx) in self.context_weights.iter().zip(&self.contexts) {
            for (o, p) in out.iter_mut().zip(ctx) {
                *o += w * p;
            }
        }
        out
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn dirichlet(rng: &mut ChaCha8Rng, alpha: &[f64]) -> Vec<f64> {
    let draws: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("positive shape").sample(rng).max(f64::MIN_POSITIVE))
        .collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|x| x / total).collect()
}

pub fn sample_model(config: &GenConfig) -> Result<GroundTruthModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (c, p) = (config.classes, config.predicates);
    let directions: Vec<Vec<f64>> = match config.twin_offset {
        None => (0..c).map(|_| unit_gaussian(&mut rng, config.feature_dim)).collect(),
        Some(offset) => {
            let bases: Vec<Vec<f64>> = (0..c.div_ceil(2)).map(|_| unit_gaussian(&mut rng, config.feature_dim)).collect();
            (0..c)
                .map(|class| {
                    let own = unit_gaussian(&mut rng, config.feature_dim);
                    let v: Vec<f64> = bases[class / 2].iter().zip(&own).map(|(b, o)| b + offset * o).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.into_iter().map(|x| x / norm).collect()
                })
                .collect()
        }
    };
    let prototypes: Vec<Vec<f64>> = directions
        .into_iter()
        .map(|d| d.into_iter().map(|x| x * config.prototype_scale).collect())
        .collect();
    let background = unit_gaussian(&mut rng, config.feature_dim);

    let members: Vec<Vec<bool>> = match config.context_layout {
        ContextLayout::Partition => (0..config.contexts)
            .map(|k| (0..c).map(|class| class % config.contexts == k).collect())
            .collect(),
        ContextLayout::Random { inclusion } => {
            let mut members: Vec<Vec<bool>> = (0..config.contexts)
                .map(|_| (0..c).map(|_| rng.random_bool(inclusion)).collect())
                .collect();
            for ctx in &mut members {
                while ctx.iter().filter(|&&m| m).count() < 2 {
                    let pick = rng.random_range(0..c);
                    ctx[pick] = true;
                }
            }
            for class in 0..c {
                if !members.iter().any(|ctx| ctx[class]) {
                    let k = rng.random_range(0..config.contexts);
                    members[k][class] = true;
                }
            }
            members
        }
    };
    let contexts: Vec<Vec<f64>> = members
        .iter()
        .map(|ctx| {
            let w: Vec<f64> = (0..c).map(|k| if ctx[k] { ((k + 1) as f64).powf(-config.class_skew) } else { 0.0 }).collect();
            let total: f64 = w.iter().sum();
            w.into_iter()
                .map(|x| (1.0 - config.context_leak) * x / total + config.context_leak / c as f64)
                .collect()
        })
        .collect();
    let raw: Vec<f64> = (0..config.contexts).map(|k| ((k + 1) as f64).powf(-config.context_skew)).collect();
    let total: f64 = raw.iter().sum();
    let context_weights = raw.into_iter().map(|w| w / total).collect();

    let class_dims: Vec<[f64; 3]> = (0..c)
        .map(|_| [rng.random_range(0.3..1.5), rng.random_range(0.3..1.5), rng.random_range(0.3..1.5)])
        .collect();

    let predicate_table = match &config.predicate_table {
        PredicateTableSpec::Explicit(t) => t.clone(),
        PredicateTableSpec::RandomConcentrated {
            concentration,
            none_mass,
        } => {
            let mut alpha = vec![*concentration; p];
            alpha[0] = concentration * (p - 1) as f64 * none_mass / (1.0 - none_mass);
            (0..c)
                .map(|_| (0..c).map(|_| dirichlet(&mut rng, &alpha)).collect())
                .collect()
        }
    };

    Ok(GroundTruthModel {
        classes: config.class_names(),
        predicates: config.predicate_names(),
        feature_dim: config.feature_dim,
        prototypes,
        background,
        context_weights,
        contexts,
        class_dims,
        predicate_table,
        config: config.clone(),
    })
}

fn categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the last cumulative value
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Scene number `index` of the global sequence (train, then val, then test).
pub fn generate_scene(model: &GroundTruthModel, index: usize) -> SceneRecord {
    let cfg = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);

    let m = rng.random_range(cfg.nodes_min..=cfg.nodes_max);
    let context = categorical(&mut rng, &model.context_weights);
    let classes: Vec<usize> = (0..m).map(|_| categorical(&mut rng, &model.contexts[context])).collect();
    let views: Vec<View> = (0..cfg.views_per_scene)
        .map(|k| View {
            view_id: format!("view_{k:02}"),
        })
        .collect();

    let mut nodes = Vec::with_capacity(m);
    for (i, &class) in classes.iter().enumerate() {
        let mut dims = [0.0; 3];
        for (d, base) in dims.iter_mut().zip(model.class_dims[class]) {
            let jitter: f64 = rng.sample(StandardNormal);
            *d = (base * (cfg.size_jitter * jitter).exp()).clamp(0.05, cfg.room_size);
        }
        let place = |rng: &mut ChaCha8Rng, extent: f64| {
            let half = extent / 2.0;
            if cfg.room_size - half > half {
                rng.random_range(half..cfg.room_size - half)
            } else {
                cfg.room_size / 2.0
            }
        };
        let centroid = [place(&mut rng, dims[0]), place(&mut rng, dims[1]), dims[2] / 2.0];
        let n_points = rng.random_range(cfg.points_min..=cfg.points_max);
        let points: Vec<[f32; 3]> = (0..n_points)
            .map(|_| {
                let mut p = [0.0f32; 3];
                for k in 0..3 {
                    p[k] = (centroid[k] + (rng.random::<f64>() - 0.5) * dims[k]) as f32;
                }
                p
            })
            .collect();

        let n_views = rng.random_range(cfg.views_min..=cfg.views_max.min(cfg.views_per_scene));
        let mut chosen = index::sample(&mut rng, cfg.views_per_scene, n_views).into_vec();
        chosen.sort_unstable();
        let view_features = chosen
            .iter()
            .map(|&k| {
                let beta = cfg.draw_beta(&mut rng);
                let raw: Vec<f64> = model.prototypes[class]
                    .iter()
                    .zip(&model.background)
                    .map(|(mu, bg)| {
                        let noise: f64 = rng.sample(StandardNormal);
                        (1.0 - beta) * mu + beta * bg + cfg.feature_noise * noise
                    })
                    .collect();
                let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
                ViewFeature {
                    view_id: views[k].view_id.clone(),
                    feature: raw.iter().map(|x| (x / norm) as f32).collect(),
                }
            })
            .collect();

        nodes.push(NodeInstance {
            node_id: format!("obj_{i:03}"),
            points,
            bbox: Box3D { centroid, dims },
            view_features,
            gt_class: Some(class),
        });
    }

    let mut edges = Vec::new();
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let (a, b) = (&nodes[i].bbox.centroid, &nodes[j].bbox.centroid);
            let dist = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            if dist <= cfg.edge_radius {
                let r = categorical(&mut rng, &model.predicate_table[classes[i]][classes[j]]);
                edges.push(EdgeInstance {
                    src: nodes[i].node_id.clone(),
                    dst: nodes[j].node_id.clone(),
                    gt_predicate: Some(r),
                });
            }
        }
    }

    SceneRecord {
        scene_id: format!("synth_{:05}", index),
        feature_dim: cfg.feature_dim,
        classes: model.classes.clone(),
        predicates: model.predicates.clone(),
        views,
        nodes,
        edges,
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub model: GroundTruthModel,
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
}

fn corpus_range(model: &GroundTruthModel, range: std::ops::Range<usize>) -> Result<Corpus> {
    let scenes: Vec<SceneRecord> = range.into_par_iter().map(|i| generate_scene(model, i)).collect();
    Ok(Corpus::new(model.feature_dim, model.classes.clone(), model.predicates.clone(), scenes)?)
}

pub fn generate(config: &GenConfig) -> Result<GeneratedData> {
    let model = sample_model(config)?;
    let (a, b, c) = (config.train_scenes, config.val_scenes, config.test_scenes);
    Ok(GeneratedData {
        train: corpus_range(&model, 0..a)?,
        val: corpus_range(&model, a..a + b)?,
        test: corpus_range(&model, a + b..a + b + c)?,
        model,
    })
}

/// Writes `train/`, `val/` and `test/` corpora (empty splits skipped) and
/// `model.json` under `dir`.
pub fn write_generated(data: &GeneratedData, dir: &Path) -> Result<()> {
    for (name, corpus) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        if !corpus.scenes.is_empty() {
            save_corpus(corpus, &dir.join(name))?;
        }
    }
    save_model(&data.model, &dir.join(MODEL_FILE))
}

pub fn save_model(model: &GroundTruthModel, path: &Path) -> Result<()> {
    let json = serde_json::to_string(model).map_err(|source| GenError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, json).map_err(|source| GenError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<GroundTruthModel> {
    let text = fs::read_to_string(path).map_err(|source| GenError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| GenError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn one_hot(k: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

/// Predictions of the generating model: each node takes the prototype with
/// the highest cosine similarity to its mean view feature, each edge the
/// most probable predicate for its true endpoint classes.
pub fn bayes_predict(scene: &SceneRecord, model: &GroundTruthModel) -> Result<SceneGraphPrediction> {
    if scene.classes != model.classes || scene.predicates != model.predicates || scene.feature_dim != model.feature_dim {
        return Err(GenError::Mismatch(format!("scene {} vocabulary or feature dimension", scene.scene_id)));
    }
    let (c, p) = (model.classes.len(), model.predicates.len());
    let nodes = scene
        .nodes
        .iter()
        .map(|node| {
            let mut mean = vec![0.0; model.feature_dim];
            for vf in &node.view_features {
                for (m, x) in mean.iter_mut().zip(&vf.feature) {
                    *m += *x as f64;
                }
            }
            let score: Vec<f64> = model
                .prototypes
                .iter()
                .map(|mu| {
                    let norm = mu.iter().map(|x| x * x).sum::<f64>().sqrt();
                    mu.iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>() / norm
                })
                .collect();
            let class = crate::tensor::argmax(&score);
            NodePrediction {
                base: one_hot(class, c),
                refined: None,
                class,
                confidence: 1.0,
            }
        })
        .collect();
    let endpoints = scene.edge_endpoints()?;
    let mut edges = Vec::with_capacity(endpoints.len());
    for (s, d) in endpoints {
        let (Some(cs), Some(cd)) = (scene.nodes[s].gt_class, scene.nodes[d].gt_class) else {
            return Err(GenError::Mismatch(format!("scene {} has unlabeled nodes", scene.scene_id)));
        };
        let predicate = crate::tensor::argmax(&model.predicate_table[cs][cd]);
        edges.push(EdgePrediction {
            src: s,
            dst: d,
            base: one_hot(predicate, p),
            refined: None,
            predicate,
            confidence: 1.0,
        });
    }
    Ok(SceneGraphPrediction { nodes, edges })
}

pub fn bayes_reference(corpus: &Corpus, model: &GroundTruthModel, exclude_none: bool) -> Result<EvalReport> {
    let preds = corpus
        .scenes
        .iter()
        .map(|s| bayes_predict(s, model))
        .collect::<Result<Vec<_>>>()?;
    let truth = corpus
        .scenes
        .iter()
        .map(SceneTruth::from_scene)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(metrics::evaluate(&preds, &truth, &model.classes, &model.predicates, exclude_none)?)
}

/// Directory layout produced by [`write_generated`].
pub fn split_dir(root: &Path, split: &str) -> PathBuf {
    root.join(split)
}
