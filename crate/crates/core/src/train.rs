//! Adam training with per-scene parallel gradients and early stopping on
//! validation relationship recall.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, SceneTruth};
use crate::model::{LossWeights, ModelError, PreparedScene, SceneGraphModel};
use crate::nn::ParamStore;
use crate::rescore::{Prior, RescoreOptions};
use crate::tensor::{Tape, TensorError};

/// Environment variable capping the worker pool size.
pub const THREADS_ENV: &str = "SSG_THREADS";

/// Thread pool sized by `SSG_THREADS` (all cores when unset or invalid).
pub fn worker_pool() -> rayon::ThreadPool {
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool builds")
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged: non-finite loss in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no labeled scenes in the {0} corpus")]
    Empty(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    /// Epochs without improvement before stopping.
    pub patience: usize,
    /// Scenes whose gradients are averaged per update.
    pub batch_size: usize,
    pub lambda_pred: f64,
    pub class_weights: bool,
    pub cr_in_training: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 100,
            patience: 10,
            batch_size: 8,
            lambda_pred: 1.0,
            class_weights: false,
            cr_in_training: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning rate must be finite and non-negative".into()));
        }
        if self.patience == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config("epochs, patience and batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.lambda_pred >= 0.0 && self.lambda_pred.is_finite()) {
            return Err(TrainError::Config("lambda_pred must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((t, g), m), v) in store.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, g), m), v) in t.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *p -= self.learning_rate * update;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_recall_rel: f64,
    pub val_recall_obj: f64,
    pub val_recall_pred: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Inverse class frequency over labeled instances, normalized so present
/// classes average to one; absent classes get weight one.
pub fn inverse_frequency(labels: impl Iterator<Item = usize>, count: usize) -> Vec<f64> {
    let mut freq = vec![0u64; count];
    for y in labels {
        if y < count {
            freq[y] += 1;
        }
    }
    let present = freq.iter().filter(|&&n| n > 0).count() as f64;
    let total: u64 = freq.iter().sum();
    freq.iter()
        .map(|&n| if n == 0 { 1.0 } else { total as f64 / (present * n as f64) })
        .collect()
}

fn loss_weights(config: &TrainConfig, model: &SceneGraphModel, scenes: &[PreparedScene]) -> LossWeights {
    if !config.class_weights {
        return LossWeights::plain(config.lambda_pred);
    }
    let nodes = scenes.iter().flat_map(|s| s.node_labels.iter().flatten().copied());
    let edges = scenes.iter().flat_map(|s| s.edge_labels.iter().flatten().copied());
    LossWeights {
        lambda_pred: config.lambda_pred,
        classes: Some(inverse_frequency(nodes, model.config.classes.len())),
        predicates: Some(inverse_frequency(edges, model.config.predicates.len())),
    }
}

/// Loss and parameter gradients for one scene; `None` if it has no labels.
pub fn scene_gradient(
    model: &SceneGraphModel,
    scene: &PreparedScene,
    weights: &LossWeights,
    rescoring: Option<(&Prior, &RescoreOptions)>,
) -> std::result::Result<Option<(f64, Vec<Vec<f64>>)>, ModelError> {
    let mut tape = Tape::new();
    let params = model.store.bind(&mut tape, true)?;
    let logits = model.forward(&mut tape, &params, scene)?;
    let Some(loss) = model.loss(&mut tape, &logits, scene, weights, rescoring)? else {
        return Ok(None);
    };
    tape.backward(loss)?;
    Ok(Some((tape.value(loss).data()[0], params.grads(&tape))))
}

fn scene_loss(
    model: &SceneGraphModel,
    scene: &PreparedScene,
    weights: &LossWeights,
    rescoring: Option<(&Prior, &RescoreOptions)>,
) -> std::result::Result<Option<f64>, ModelError> {
    let mut tape = Tape::new();
    let params = model.store.bind(&mut tape, false)?;
    let logits = model.forward(&mut tape, &params, scene)?;
    Ok(model
        .loss(&mut tape, &logits, scene, weights, rescoring)?
        .map(|l| tape.value(l).data()[0]))
}

fn non_finite_is_divergence(err: ModelError, epoch: usize) -> TrainError {
    match err {
        ModelError::Tensor(TensorError::NonFinite { .. }) => TrainError::Diverged { epoch },
        other => TrainError::Model(other),
    }
}

struct Validation {
    loss: f64,
    rel: f64,
    obj: f64,
    pred: f64,
}

fn validate(model: &SceneGraphModel, val: &[PreparedScene], truth: &[SceneTruth], weights: &LossWeights, epoch: usize) -> Result<Validation> {
    let results = val
        .par_iter()
        .map(|s| -> std::result::Result<_, ModelError> { Ok((model.predict(s, None)?, scene_loss(model, s, weights, None)?)) })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| non_finite_is_divergence(e, epoch))?;
    let (preds, losses): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let losses: Vec<f64> = losses.into_iter().flatten().collect();
    let loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
    if !loss.is_finite() {
        return Err(TrainError::Diverged { epoch });
    }
    let rate = |r: std::result::Result<f64, metrics::MetricsError>| r.unwrap_or(0.0);
    Ok(Validation {
        loss,
        rel: rate(metrics::eval_triplets(&preds, truth, false).map(|r| r.value())),
        obj: rate(metrics::eval_objects(&preds, truth, model.config.classes.len()).map(|t| t.recall())),
        pred: rate(metrics::eval_predicates(&preds, truth, model.config.predicates.len(), false).map(|t| t.recall())),
    })
}

fn truth_of(scene: &PreparedScene) -> SceneTruth {
    SceneTruth {
        nodes: scene.node_labels.clone(),
        edges: scene
            .graph
            .edges
            .iter()
            .zip(&scene.edge_labels)
            .map(|(&(s, d), y)| (s, d, *y))
            .collect(),
    }
}

/// Trains `model` in place and leaves it at the best validation epoch.
/// Better means higher relationship recall, then lower validation loss.
/// `rescoring` is used only when `cr_in_training` is set.
pub fn train(
    model: &mut SceneGraphModel,
    train_set: &[PreparedScene],
    val_set: &[PreparedScene],
    config: &TrainConfig,
    rescoring: Option<(&Prior, &RescoreOptions)>,
) -> Result<TrainHistory> {
    config.validate()?;
    let labeled = |s: &PreparedScene| s.node_labels.iter().any(Option::is_some) || s.edge_labels.iter().any(Option::is_some);
    if !train_set.iter().any(labeled) {
        return Err(TrainError::Empty("training"));
    }
    if !val_set.iter().any(labeled) {
        return Err(TrainError::Empty("validation"));
    }
    let rescoring = if config.cr_in_training {
        Some(rescoring.ok_or_else(|| TrainError::Config("training with rescoring needs statistics".into()))?)
    } else {
        None
    };
    let weights = loss_weights(config, model, train_set);
    let val_truth: Vec<SceneTruth> = val_set.iter().map(truth_of).collect();
    let mut adam = Adam::new(&model.store, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best: Option<(f64, f64, ParamStore)> = None;
    let mut since_best = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_scenes = 0usize;
        for batch in order.chunks(config.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| scene_gradient(model, &train_set[i], &weights, rescoring))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| non_finite_is_divergence(e, epoch))?;
            let mut sum: Option<Vec<Vec<f64>>> = None;
            let mut n = 0usize;
            for (loss, grads) in results.into_iter().flatten() {
                if !loss.is_finite() {
                    return Err(TrainError::Diverged { epoch });
                }
                epoch_loss += loss;
                n += 1;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.iter_mut().zip(g) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let Some(mut grads) = sum else { continue };
            epoch_scenes += n;
            let inv = 1.0 / n as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= inv);
            adam.step(&mut model.store, &grads);
            if model.store.tensors().iter().any(|t| t.data().iter().any(|x| !x.is_finite())) {
                return Err(TrainError::Diverged { epoch });
            }
        }
        let train_loss = epoch_loss / epoch_scenes.max(1) as f64;
        let v = validate(model, val_set, &val_truth, &weights, epoch)?;
        log::debug!(
            "epoch {epoch}: train loss {train_loss:.4}, val loss {:.4}, val rel {:.4}",
            v.loss,
            v.rel
        );
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: v.loss,
            val_recall_rel: v.rel,
            val_recall_obj: v.obj,
            val_recall_pred: v.pred,
        });
        let improved = match &best {
            None => true,
            Some((rel, loss, _)) => v.rel > *rel || (v.rel == *rel && v.loss < *loss),
        };
        if improved {
            best = Some((v.rel, v.loss, model.store.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, _, store)) = best {
        model.store = store;
    }
    Ok(history)
}
