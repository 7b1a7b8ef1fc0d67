//! Command-line entry points: corpus generation, stats, training,
//! evaluation, prediction and stats ablation.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};
use rayon::prelude::*;
use serde_json::{json, Value};
use ssg_core::features::FeatureError;
use ssg_core::metrics::{evaluate, MetricsError, SceneTruth};
use ssg_core::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelError, PreparedScene, SceneGraphModel};
use ssg_core::rescore::{ablate_stats, compute_stats, load_stats, save_stats, Prior, RescoreError, SceneGraphPrediction};
use ssg_core::scene::{load_corpus, load_scene, Corpus, SceneError};
use ssg_core::synthetic::{bayes_reference, generate, write_generated, GenError};
use ssg_core::train::{train, worker_pool, TrainError};

use config::{ConfigError, KeyKind, RunConfig, KEYS};

pub fn command() -> Command {
    let mut cmd = Command::new("ssg")
        .about("3D semantic scene graph estimation")
        .subcommand_required(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .help("flat key = value file; flags override its entries"),
        )
        .subcommand(Command::new("gen").about("generate a synthetic corpus into --out"))
        .subcommand(Command::new("stats").about("count co-occurrences of --data into --out"))
        .subcommand(Command::new("train").about("train on --train-data with early stopping on --val-data"))
        .subcommand(Command::new("eval").about("evaluate --checkpoint on --data"))
        .subcommand(Command::new("predict").about("predict the scene graph of --scene"))
        .subcommand(Command::new("ablate-stats").about("drop the most frequent triplets from --stats"));
    for key in KEYS {
        let arg = Arg::new(key.name).long(key.name).global(true).help(key.help);
        cmd = cmd.arg(match key.kind {
            KeyKind::Value => arg.value_name("VALUE"),
            KeyKind::Switch => arg.action(ArgAction::SetTrue),
        });
    }
    cmd
}

/// Defaults, then the config file, then flags.
pub fn resolve(matches: &ArgMatches) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = matches.get_one::<String>("config") {
        cfg.apply_file(Path::new(path))?;
    }
    for key in KEYS {
        match key.kind {
            KeyKind::Value => {
                if let Some(v) = matches.get_one::<String>(key.name) {
                    cfg.set(key.name, v)?;
                }
            }
            KeyKind::Switch => {
                if matches.get_flag(key.name) {
                    cfg.set(key.name, "true")?;
                }
            }
        }
    }
    Ok(cfg)
}

pub fn run_from<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = command().try_get_matches_from(args)?;
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let cfg = resolve(sub)?;
    match name {
        "gen" => cmd_gen(&cfg),
        "stats" => cmd_stats(&cfg),
        "train" => cmd_train(&cfg),
        "eval" => cmd_eval(&cfg),
        "predict" => cmd_predict(&cfg),
        "ablate-stats" => cmd_ablate_stats(&cfg),
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    let out = RunConfig::require(&cfg.paths.out, "out")?;
    let data = generate(&cfg.gen_config())?;
    write_generated(&data, &out)?;
    println!(
        "wrote {} train / {} val / {} test scenes to {}",
        data.train.scenes.len(),
        data.val.scenes.len(),
        data.test.scenes.len(),
        out.display()
    );
    if !data.test.scenes.is_empty() {
        let r = bayes_reference(&data.test, &data.model, cfg.exclude_none)?;
        println!(
            "reference classifier on test: rel {:.4} obj {:.4} pred {:.4} mrecall-obj {:.4} mrecall-pred {:.4}",
            r.recall_rel, r.recall_obj, r.recall_pred, r.mrecall_obj, r.mrecall_pred
        );
    }
    Ok(())
}

pub fn cmd_stats(cfg: &RunConfig) -> Result<()> {
    let data = RunConfig::require(&cfg.paths.data, "data")?;
    let out = RunConfig::require(&cfg.paths.out, "out")?;
    let stats = compute_stats(&load_corpus(&data)?)?;
    save_stats(&stats, &out)?;
    println!("counted {} labeled edges into {}", stats.total_edges(), out.display());
    Ok(())
}

fn prepare(corpus: &Corpus, cfg: &RunConfig) -> Result<Vec<PreparedScene>> {
    let vis = cfg.visibility();
    Ok(worker_pool().install(|| {
        corpus
            .scenes
            .par_iter()
            .map(|s| PreparedScene::new(s, vis))
            .collect::<std::result::Result<Vec<_>, _>>()
    })?)
}

fn load_prior(cfg: &RunConfig, model: &SceneGraphModel) -> Result<Prior> {
    let path = RunConfig::require(&cfg.paths.stats, "stats")?;
    let stats = load_stats(&path)?;
    stats.check_vocab(&model.config.classes, &model.config.predicates)?;
    Ok(Prior::new(&stats)?)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let train_dir = RunConfig::require(&cfg.paths.train_data, "train-data")?;
    let val_dir = RunConfig::require(&cfg.paths.val_data, "val-data")?;
    let out = RunConfig::require(&cfg.paths.out, "out")?;
    let train_corpus = load_corpus(&train_dir)?;
    let val_corpus = load_corpus(&val_dir)?;
    let model_config = ModelConfig {
        hidden: cfg.hidden,
        layers: cfg.layers,
        point_widths: cfg.point_widths.clone(),
        neighbor_residual: cfg.neighbor_residual,
        ..ModelConfig::new(train_corpus.feature_dim, train_corpus.classes.clone(), train_corpus.predicates.clone())
    };
    let mut model = SceneGraphModel::new(model_config, cfg.seed)?;
    model.check_vocab(&val_corpus.classes, &val_corpus.predicates, val_corpus.feature_dim)?;
    let prior = if cfg.train.cr_in_training { Some(load_prior(cfg, &model)?) } else { None };
    let (tr, va) = (prepare(&train_corpus, cfg)?, prepare(&val_corpus, cfg)?);
    let train_config = cfg.train_config();
    let history = train(&mut model, &tr, &va, &train_config, prior.as_ref().map(|p| (p, &cfg.rescore)))?;
    save_checkpoint(&model, Some(serde_json::to_value(&train_config)?), &out)?;
    let history_path = out.with_extension("history.json");
    write_json(&history_path, &history)?;
    let best = &history.epochs[history.best_epoch];
    println!(
        "best epoch {} of {}: val rel {:.4} obj {:.4} pred {:.4}; checkpoint {}",
        best.epoch,
        history.epochs.len(),
        best.val_recall_rel,
        best.val_recall_obj,
        best.val_recall_pred,
        out.display()
    );
    Ok(())
}

fn predict_all(model: &SceneGraphModel, scenes: &[PreparedScene], prior: Option<&Prior>, cfg: &RunConfig) -> Result<Vec<SceneGraphPrediction>> {
    let rescoring = prior.map(|p| (p, &cfg.rescore));
    Ok(worker_pool().install(|| {
        scenes
            .par_iter()
            .map(|s| model.predict(s, rescoring))
            .collect::<std::result::Result<Vec<_>, _>>()
    })?)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let data = RunConfig::require(&cfg.paths.data, "data")?;
    let ckpt = RunConfig::require(&cfg.paths.checkpoint, "checkpoint")?;
    let model = load_checkpoint(&ckpt)?;
    let corpus = load_corpus(&data)?;
    model.check_vocab(&corpus.classes, &corpus.predicates, corpus.feature_dim)?;
    let prior = if cfg.no_cr { None } else { Some(load_prior(cfg, &model)?) };
    let scenes = prepare(&corpus, cfg)?;
    let preds = predict_all(&model, &scenes, prior.as_ref(), cfg)?;
    let truth = corpus.scenes.iter().map(SceneTruth::from_scene).collect::<std::result::Result<Vec<_>, _>>()?;
    let report = evaluate(&preds, &truth, &corpus.classes, &corpus.predicates, cfg.exclude_none)?;
    print!("{}", report.table());
    if let Some(out) = &cfg.paths.out {
        write_json(out, &report)?;
    }
    Ok(())
}

fn distribution_fields(base: &[f64], refined: Option<&Vec<f64>>) -> Vec<(&'static str, Value)> {
    let mut fields = vec![("distribution", json!(refined.map(|r| r.as_slice()).unwrap_or(base)))];
    if let Some(r) = refined {
        fields.push(("base_distribution", json!(base)));
        fields.push(("refined_distribution", json!(r)));
    }
    fields
}

/// Named scene-graph JSON for one prediction.
pub fn prediction_json(scene: &PreparedScene, pred: &SceneGraphPrediction, classes: &[String], predicates: &[String]) -> Value {
    let nodes: Vec<Value> = pred
        .nodes
        .iter()
        .zip(&scene.node_ids)
        .map(|(n, id)| {
            let mut obj = serde_json::Map::new();
            obj.insert("node_id".into(), json!(id));
            obj.insert("class".into(), json!(classes[n.class]));
            obj.insert("class_index".into(), json!(n.class));
            obj.insert("confidence".into(), json!(n.confidence));
            for (k, v) in distribution_fields(&n.base, n.refined.as_ref()) {
                obj.insert(k.into(), v);
            }
            Value::Object(obj)
        })
        .collect();
    let edges: Vec<Value> = pred
        .edges
        .iter()
        .map(|e| {
            let mut obj = serde_json::Map::new();
            obj.insert("src".into(), json!(scene.node_ids[e.src]));
            obj.insert("dst".into(), json!(scene.node_ids[e.dst]));
            obj.insert("predicate".into(), json!(predicates[e.predicate]));
            obj.insert("predicate_index".into(), json!(e.predicate));
            obj.insert("confidence".into(), json!(e.confidence));
            for (k, v) in distribution_fields(&e.base, e.refined.as_ref()) {
                obj.insert(k.into(), v);
            }
            Value::Object(obj)
        })
        .collect();
    json!({ "scene_id": scene.scene_id, "nodes": nodes, "edges": edges })
}

pub fn cmd_predict(cfg: &RunConfig) -> Result<()> {
    let scene_path = RunConfig::require(&cfg.paths.scene, "scene")?;
    let ckpt = RunConfig::require(&cfg.paths.checkpoint, "checkpoint")?;
    let model = load_checkpoint(&ckpt)?;
    let scene = load_scene(&scene_path)?;
    model.check_vocab(&scene.classes, &scene.predicates, scene.feature_dim)?;
    let prior = if cfg.no_cr { None } else { Some(load_prior(cfg, &model)?) };
    let prepared = PreparedScene::new(&scene, cfg.visibility())?;
    let pred = model.predict(&prepared, prior.as_ref().map(|p| (p, &cfg.rescore)))?;
    let value = prediction_json(&prepared, &pred, &model.config.classes, &model.config.predicates);
    match &cfg.paths.out {
        Some(out) => write_json(out, &value),
        None => {
            println!("{}", serde_json::to_string_pretty(&value)?);
            Ok(())
        }
    }
}

pub fn cmd_ablate_stats(cfg: &RunConfig) -> Result<()> {
    let input = RunConfig::require(&cfg.paths.stats, "stats")?;
    let out = RunConfig::require(&cfg.paths.out, "out")?;
    let ablated = ablate_stats(&load_stats(&input)?, cfg.drop_top_frac)?;
    save_stats(&ablated, &out)?;
    println!("{} labeled edges remain in {}", ablated.total_edges(), out.display());
    Ok(())
}

fn scene_class(e: &SceneError) -> &'static str {
    match e {
        SceneError::Io { .. } => "io",
        SceneError::Parse { .. } => "parse",
        SceneError::Invalid { .. } | SceneError::FeatureDim { .. } => "scene",
    }
}

fn stats_class(e: &RescoreError) -> &'static str {
    match e {
        RescoreError::Io { .. } => "io",
        RescoreError::Json { .. } => "parse",
        RescoreError::VocabMismatch(_) => "vocab",
        _ => "stats",
    }
}

fn model_class(e: &ModelError) -> &'static str {
    match e {
        ModelError::Feature(_) => "feature",
        ModelError::Tensor(_) => "numeric",
        ModelError::Scene(s) => scene_class(s),
        ModelError::Rescore(r) => stats_class(r),
        ModelError::Config(_) => "config",
        ModelError::LabelRange { .. } => "label",
        ModelError::Vocab(_) => "vocab",
        ModelError::Checkpoint { .. } => "checkpoint",
        ModelError::Io { .. } => "io",
    }
}

/// Short machine-readable class of the innermost known error.
pub fn error_class(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return "config";
        }
        if cause.is::<clap::Error>() {
            return "usage";
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::Diverged { .. } => "diverged",
                TrainError::Model(m) => model_class(m),
                TrainError::Config(_) => "config",
                TrainError::Empty(_) => "data",
            };
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return model_class(e);
        }
        if let Some(e) = cause.downcast_ref::<GenError>() {
            return match e {
                GenError::Config(_) => "config",
                GenError::Mismatch(_) => "vocab",
                GenError::Scene(s) => scene_class(s),
                GenError::Metrics(_) => "metrics",
                GenError::Io { .. } => "io",
                GenError::Json { .. } => "parse",
            };
        }
        if let Some(e) = cause.downcast_ref::<SceneError>() {
            return scene_class(e);
        }
        if let Some(e) = cause.downcast_ref::<RescoreError>() {
            return stats_class(e);
        }
        if cause.is::<MetricsError>() {
            return "metrics";
        }
        if cause.is::<FeatureError>() {
            return "feature";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "internal"
}

/// `error[<class>]: <message>` on one line.
pub fn error_line(err: &anyhow::Error) -> String {
    // several error types already print their source; skip repeats
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    format!("error[{}]: {}", error_class(err), msg.replace('\n', " ").trim())
}
