//! Flat `key = value` run configuration. Every key is also a command-line
//! flag of the same name; flags win over the file, the file over defaults.

use std::path::{Path, PathBuf};

use ssg_core::features::Visibility;
use ssg_core::rescore::{EdgeCombine, NeighborEvidence, RescoreOptions};
use ssg_core::synthetic::{ContextLayout, GenConfig, PredicateTableSpec};
use ssg_core::train::TrainConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}: {msg}")]
    File { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {msg}")]
    Value { key: String, value: String, msg: String },
    #[error("`{0}` is required for this command")]
    Missing(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyKind {
    /// Takes a value.
    Value,
    /// Bare switch on the command line, `true`/`false` in a file.
    Switch,
}

pub struct Key {
    pub name: &'static str,
    pub kind: KeyKind,
    pub help: &'static str,
}

const fn value(name: &'static str, help: &'static str) -> Key {
    Key {
        name,
        kind: KeyKind::Value,
        help,
    }
}

const fn switch(name: &'static str, help: &'static str) -> Key {
    Key {
        name,
        kind: KeyKind::Switch,
        help,
    }
}

pub const KEYS: &[Key] = &[
    // paths
    value("data", "corpus directory (stats, eval)"),
    value("train-data", "training corpus directory"),
    value("val-data", "validation corpus directory"),
    value("checkpoint", "model checkpoint file"),
    value("stats", "co-occurrence stats file"),
    value("scene", "scene JSON file (predict)"),
    value("out", "output path"),
    // shared
    value("seed", "seed for generation, initialization and shuffling"),
    // model
    value("hidden", "hidden width h"),
    value("layers", "message-passing layers"),
    value("point-widths", "comma-separated point encoder widths"),
    value("neighbor-residual", "max-pooled neighbor residual in edge messages (true/false)"),
    switch("lenient-visibility", "zero initial feature for nodes without views instead of an error"),
    // training
    value("epochs", "maximum epochs"),
    value("patience", "early-stopping patience in epochs"),
    value("batch-size", "scenes per update"),
    value("learning-rate", "step size"),
    value("lambda-pred", "weight of the predicate loss"),
    switch("class-weights", "inverse-frequency loss weights"),
    switch("cr-in-training", "rescore logits inside the training loss (needs stats)"),
    // rescoring and evaluation
    switch("no-cr", "disable confidence rescoring; the stats file is not read"),
    value("fixed-alpha", "replace every confidence by this value in (0, 1]"),
    value("cr-edge-combine", "product or sum"),
    value("neighbor-evidence", "argmax or expected"),
    switch("exclude-none", "evaluate predicates on non-None ground truth only"),
    value("drop-top-frac", "fraction of most frequent triplets to remove (ablate-stats)"),
    // synthetic generator
    value("classes", "object classes"),
    value("predicates", "predicates including none"),
    value("feature-dim", "view feature dimension"),
    value("train-scenes", "training scenes"),
    value("val-scenes", "validation scenes"),
    value("test-scenes", "test scenes"),
    value("nodes-min", "fewest nodes per scene"),
    value("nodes-max", "most nodes per scene"),
    value("edge-radius", "centroid distance for candidate edges, meters"),
    value("room-size", "room extent, meters"),
    value("prototype-scale", "class prototype norm"),
    value("twin-offset", "relative offset between twin prototypes, or none"),
    value("feature-noise", "view feature noise standard deviation"),
    value("contamination", "mask or bbox"),
    value("beta-max", "largest background blend weight"),
    value("mask-quality", "mask quality q in [0, 1]"),
    value("concentration", "Dirichlet concentration of the predicate table"),
    value("none-mass", "expected probability of none per class pair"),
    value("contexts", "scene contexts"),
    value("context-layout", "partition or random"),
    value("context-inclusion", "class inclusion probability for the random layout"),
    value("context-leak", "uniform class mass mixed into every context"),
    value("class-skew", "Zipf exponent of class weights within a context"),
    value("context-skew", "Zipf exponent of context weights"),
    value("size-jitter", "log-normal jitter of box sizes"),
    value("points-min", "fewest points per node"),
    value("points-max", "most points per node"),
    value("views-per-scene", "views per scene"),
    value("views-min", "fewest views per node"),
    value("views-max", "most views per node"),
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub stats: Option<PathBuf>,
    pub scene: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub paths: Paths,
    pub seed: u64,
    pub hidden: usize,
    pub layers: usize,
    pub point_widths: Vec<usize>,
    pub neighbor_residual: bool,
    pub lenient_visibility: bool,
    pub train: TrainConfig,
    pub no_cr: bool,
    pub rescore: RescoreOptions,
    pub exclude_none: bool,
    pub drop_top_frac: f64,
    pub gen: GenConfig,
    context_inclusion: f64,
    random_layout: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            seed: 0,
            hidden: 256,
            layers: 2,
            point_widths: vec![64, 128, 256],
            neighbor_residual: true,
            lenient_visibility: false,
            train: TrainConfig::default(),
            no_cr: false,
            rescore: RescoreOptions::default(),
            exclude_none: false,
            drop_top_frac: 0.0,
            gen: GenConfig::default(),
            context_inclusion: 0.3,
            random_layout: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    raw.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        value: raw.into(),
        msg: e.to_string(),
    })
}

fn bad(key: &str, raw: &str, msg: &str) -> ConfigError {
    ConfigError::Value {
        key: key.into(),
        value: raw.into(),
        msg: msg.into(),
    }
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), ConfigError> {
        let raw = raw.trim();
        let path = || Some(PathBuf::from(raw));
        let g = &mut self.gen;
        match key {
            "data" => self.paths.data = path(),
            "train-data" => self.paths.train_data = path(),
            "val-data" => self.paths.val_data = path(),
            "checkpoint" => self.paths.checkpoint = path(),
            "stats" => self.paths.stats = path(),
            "scene" => self.paths.scene = path(),
            "out" => self.paths.out = path(),
            "seed" => self.seed = parse(key, raw)?,
            "hidden" => self.hidden = parse(key, raw)?,
            "layers" => self.layers = parse(key, raw)?,
            "point-widths" => {
                self.point_widths = raw
                    .split(',')
                    .map(|w| parse(key, w.trim()))
                    .collect::<Result<_, _>>()?
            }
            "neighbor-residual" => self.neighbor_residual = parse(key, raw)?,
            "lenient-visibility" => self.lenient_visibility = parse(key, raw)?,
            "epochs" => self.train.epochs = parse(key, raw)?,
            "patience" => self.train.patience = parse(key, raw)?,
            "batch-size" => self.train.batch_size = parse(key, raw)?,
            "learning-rate" => self.train.learning_rate = parse(key, raw)?,
            "lambda-pred" => self.train.lambda_pred = parse(key, raw)?,
            "class-weights" => self.train.class_weights = parse(key, raw)?,
            "cr-in-training" => self.train.cr_in_training = parse(key, raw)?,
            "no-cr" => self.no_cr = parse(key, raw)?,
            "fixed-alpha" => {
                let a: f64 = parse(key, raw)?;
                if !(a > 0.0 && a <= 1.0) {
                    return Err(bad(key, raw, "must lie in (0, 1]"));
                }
                self.rescore.fixed_alpha = Some(a);
            }
            "cr-edge-combine" => self.rescore.edge_combine = parse::<EdgeCombine>(key, raw)?,
            "neighbor-evidence" => {
                self.rescore.neighbor_evidence = match raw {
                    "argmax" => NeighborEvidence::Argmax,
                    "expected" => NeighborEvidence::Expected,
                    _ => return Err(bad(key, raw, "expected argmax or expected")),
                }
            }
            "exclude-none" => self.exclude_none = parse(key, raw)?,
            "drop-top-frac" => self.drop_top_frac = parse(key, raw)?,
            "classes" => g.classes = parse(key, raw)?,
            "predicates" => g.predicates = parse(key, raw)?,
            "feature-dim" => g.feature_dim = parse(key, raw)?,
            "train-scenes" => g.train_scenes = parse(key, raw)?,
            "val-scenes" => g.val_scenes = parse(key, raw)?,
            "test-scenes" => g.test_scenes = parse(key, raw)?,
            "nodes-min" => g.nodes_min = parse(key, raw)?,
            "nodes-max" => g.nodes_max = parse(key, raw)?,
            "edge-radius" => g.edge_radius = parse(key, raw)?,
            "room-size" => g.room_size = parse(key, raw)?,
            "prototype-scale" => g.prototype_scale = parse(key, raw)?,
            "twin-offset" => g.twin_offset = if raw == "none" { None } else { Some(parse(key, raw)?) },
            "feature-noise" => g.feature_noise = parse(key, raw)?,
            "contamination" => g.contamination = parse(key, raw)?,
            "beta-max" => g.beta_max = parse(key, raw)?,
            "mask-quality" => g.mask_quality = parse(key, raw)?,
            "concentration" | "none-mass" => {
                let x: f64 = parse(key, raw)?;
                let (mut concentration, mut none_mass) = match g.predicate_table {
                    PredicateTableSpec::RandomConcentrated { concentration, none_mass } => (concentration, none_mass),
                    PredicateTableSpec::Explicit(_) => unreachable!("the CLI never builds explicit tables"),
                };
                if key == "concentration" {
                    concentration = x;
                } else {
                    none_mass = x;
                }
                g.predicate_table = PredicateTableSpec::RandomConcentrated { concentration, none_mass };
            }
            "contexts" => g.contexts = parse(key, raw)?,
            "context-layout" => {
                self.random_layout = match raw {
                    "partition" => false,
                    "random" => true,
                    _ => return Err(bad(key, raw, "expected partition or random")),
                }
            }
            "context-inclusion" => self.context_inclusion = parse(key, raw)?,
            "context-leak" => g.context_leak = parse(key, raw)?,
            "class-skew" => g.class_skew = parse(key, raw)?,
            "context-skew" => g.context_skew = parse(key, raw)?,
            "size-jitter" => g.size_jitter = parse(key, raw)?,
            "points-min" => g.points_min = parse(key, raw)?,
            "points-max" => g.points_max = parse(key, raw)?,
            "views-per-scene" => g.views_per_scene = parse(key, raw)?,
            "views-min" => g.views_min = parse(key, raw)?,
            "views-max" => g.views_max = parse(key, raw)?,
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    /// Reads `key = value` lines; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| ConfigError::File {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (key, raw) = line.split_once('=').ok_or_else(|| at("expected `key = value`".into()))?;
            self.set(key.trim(), raw).map_err(|e| at(e.to_string()))?;
        }
        Ok(())
    }

    /// Generator config with the shared seed applied.
    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            seed: self.seed,
            context_layout: if self.random_layout {
                ContextLayout::Random {
                    inclusion: self.context_inclusion,
                }
            } else {
                ContextLayout::Partition
            },
            ..self.gen.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn visibility(&self) -> Visibility {
        if self.lenient_visibility {
            Visibility::Lenient
        } else {
            Visibility::Strict
        }
    }

    pub fn require(path: &Option<PathBuf>, key: &'static str) -> Result<PathBuf, ConfigError> {
        path.clone().ok_or(ConfigError::Missing(key))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_declared_key_is_settable() {
        for key in KEYS {
            let sample = match key.name {
                "point-widths" => "4,8",
                "cr-edge-combine" => "sum",
                "neighbor-evidence" => "expected",
                "contamination" => "bbox",
                "context-layout" => "random",
                "twin-offset" | "fixed-alpha" | "drop-top-frac" | "learning-rate" | "beta-max" | "mask-quality" => "0.5",
                "neighbor-residual" | "lenient-visibility" | "class-weights" | "cr-in-training" | "no-cr" | "exclude-none" => "true",
                "data" | "train-data" | "val-data" | "checkpoint" | "stats" | "scene" | "out" => "some/path",
                _ => "3",
            };
            RunConfig::default().set(key.name, sample).unwrap_or_else(|e| panic!("{}: {e}", key.name));
        }
    }

    #[test]
    fn file_values_parse_and_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nhidden = 32\n\npoint-widths = 8, 16 # inline\nno-cr = true\nconcentration=0.2\n").unwrap();
        let mut cfg = RunConfig::default();
        cfg.apply_file(&path).unwrap();
        assert_eq!(cfg.hidden, 32);
        assert_eq!(cfg.point_widths, vec![8, 16]);
        assert!(cfg.no_cr);
        assert_eq!(
            cfg.gen.predicate_table,
            PredicateTableSpec::RandomConcentrated {
                concentration: 0.2,
                none_mass: 0.3
            }
        );
    }

    #[test]
    fn bad_lines_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "hidden = 32\nwat = 1\n").unwrap();
        let err = RunConfig::default().apply_file(&path).unwrap_err().to_string();
        assert!(err.contains(":2:") && err.contains("wat"), "{err}");
        std::fs::write(&path, "fixed-alpha = 0\n").unwrap();
        assert!(RunConfig::default().apply_file(&path).is_err());
    }
}
