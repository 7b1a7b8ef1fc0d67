//! Top-1 recall and mean recall for objects, predicates and triplets, plus
//! confidence histograms and quartiles of the correct-class probability.
//!
//! Counts are kept as integers and the rates are also exposed as exact
//! rationals, so reports can be compared without floating-point slack.

use num_bigint::BigInt;
use num_rational::BigRational;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rescore::SceneGraphPrediction;

pub const CONFIDENCE_BINS: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no labeled {0} to evaluate")]
    Empty(&'static str),
    #[error("scene {scene}: prediction covers {predicted} {what}, ground truth has {truth}")]
    Misaligned {
        scene: usize,
        what: &'static str,
        predicted: usize,
        truth: usize,
    },
    #[error("label {label} out of range for {count} {what}")]
    LabelRange {
        what: &'static str,
        label: usize,
        count: usize,
    },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Ground-truth labels of one scene, aligned with its prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTruth {
    pub nodes: Vec<Option<usize>>,
    /// `(src, dst, predicate)` in prediction edge order.
    pub edges: Vec<(usize, usize, Option<usize>)>,
}

impl SceneTruth {
    pub fn from_scene(scene: &crate::scene::SceneRecord) -> crate::scene::Result<Self> {
        let endpoints = scene.edge_endpoints()?;
        Ok(Self {
            nodes: scene.nodes.iter().map(|n| n.gt_class).collect(),
            edges: endpoints
                .into_iter()
                .zip(&scene.edges)
                .map(|((s, d), e)| (s, d, e.gt_predicate))
                .collect(),
        })
    }
}

/// Per-class correct/total tallies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTally {
    pub correct: Vec<u64>,
    pub total: Vec<u64>,
}

impl ClassTally {
    fn new(classes: usize) -> Self {
        Self {
            correct: vec![0; classes],
            total: vec![0; classes],
        }
    }

    fn record(&mut self, truth: usize, hit: bool) {
        self.total[truth] += 1;
        if hit {
            self.correct[truth] += 1;
        }
    }

    pub fn instances(&self) -> u64 {
        self.total.iter().sum()
    }

    pub fn recall_exact(&self) -> BigRational {
        let correct: u64 = self.correct.iter().sum();
        BigRational::new(BigInt::from(correct), BigInt::from(self.instances()))
    }

    /// Mean of per-class recalls over classes present in the ground truth.
    pub fn mrecall_exact(&self) -> BigRational {
        let present: Vec<usize> = (0..self.total.len()).filter(|&c| self.total[c] > 0).collect();
        let sum = present.iter().fold(BigRational::from_integer(BigInt::from(0)), |acc, &c| {
            acc + BigRational::new(BigInt::from(self.correct[c]), BigInt::from(self.total[c]))
        });
        sum / BigRational::from_integer(BigInt::from(present.len()))
    }

    pub fn recall(&self) -> f64 {
        to_f64(&self.recall_exact())
    }

    pub fn mrecall(&self) -> f64 {
        to_f64(&self.mrecall_exact())
    }

    pub fn class_recall(&self, c: usize) -> Option<f64> {
        (self.total[c] > 0).then(|| self.correct[c] as f64 / self.total[c] as f64)
    }
}

fn to_f64(r: &BigRational) -> f64 {
    // numerators and denominators here are instance counts, far below 2^53
    let n: i128 = r.numer().try_into().expect("count fits in i128");
    let d: i128 = r.denom().try_into().expect("count fits in i128");
    n as f64 / d as f64
}

/// Correct/total for triplets (no per-class breakdown).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rate {
    pub correct: u64,
    pub total: u64,
}

impl Rate {
    pub fn exact(&self) -> BigRational {
        BigRational::new(BigInt::from(self.correct), BigInt::from(self.total))
    }

    pub fn value(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

fn check_alignment(preds: &[SceneGraphPrediction], truth: &[SceneTruth]) -> Result<()> {
    if preds.len() != truth.len() {
        return Err(MetricsError::Misaligned {
            scene: preds.len().min(truth.len()),
            what: "scenes",
            predicted: preds.len(),
            truth: truth.len(),
        });
    }
    for (i, (p, t)) in preds.iter().zip(truth).enumerate() {
        if p.nodes.len() != t.nodes.len() {
            return Err(MetricsError::Misaligned {
                scene: i,
                what: "nodes",
                predicted: p.nodes.len(),
                truth: t.nodes.len(),
            });
        }
        if p.edges.len() != t.edges.len() {
            return Err(MetricsError::Misaligned {
                scene: i,
                what: "edges",
                predicted: p.edges.len(),
                truth: t.edges.len(),
            });
        }
    }
    Ok(())
}

pub fn eval_objects(preds: &[SceneGraphPrediction], truth: &[SceneTruth], classes: usize) -> Result<ClassTally> {
    check_alignment(preds, truth)?;
    let mut tally = ClassTally::new(classes);
    for (p, t) in preds.iter().zip(truth) {
        for (node, gt) in p.nodes.iter().zip(&t.nodes) {
            if let Some(gt) = *gt {
                if gt >= classes {
                    return Err(MetricsError::LabelRange {
                        what: "classes",
                        label: gt,
                        count: classes,
                    });
                }
                tally.record(gt, node.class == gt);
            }
        }
    }
    if tally.instances() == 0 {
        return Err(MetricsError::Empty("nodes"));
    }
    Ok(tally)
}

pub fn eval_predicates(preds: &[SceneGraphPrediction], truth: &[SceneTruth], predicates: usize, exclude_none: bool) -> Result<ClassTally> {
    check_alignment(preds, truth)?;
    let mut tally = ClassTally::new(predicates);
    for (p, t) in preds.iter().zip(truth) {
        for (edge, &(_, _, gt)) in p.edges.iter().zip(&t.edges) {
            let Some(gt) = gt else { continue };
            if gt >= predicates {
                return Err(MetricsError::LabelRange {
                    what: "predicates",
                    label: gt,
                    count: predicates,
                });
            }
            if exclude_none && gt == 0 {
                continue;
            }
            tally.record(gt, edge.predicate == gt);
        }
    }
    if tally.instances() == 0 {
        return Err(MetricsError::Empty("edges"));
    }
    Ok(tally)
}

/// A labeled edge is a correct triplet when subject class, object class and
/// predicate all match. Edges with an unlabeled endpoint are skipped.
pub fn eval_triplets(preds: &[SceneGraphPrediction], truth: &[SceneTruth], exclude_none: bool) -> Result<Rate> {
    check_alignment(preds, truth)?;
    let mut rate = Rate { correct: 0, total: 0 };
    for (p, t) in preds.iter().zip(truth) {
        for (edge, &(s, o, gt)) in p.edges.iter().zip(&t.edges) {
            let (Some(gt), Some(gs), Some(go)) = (gt, t.nodes[s], t.nodes[o]) else {
                continue;
            };
            if exclude_none && gt == 0 {
                continue;
            }
            rate.total += 1;
            if edge.predicate == gt && p.nodes[s].class == gs && p.nodes[o].class == go {
                rate.correct += 1;
            }
        }
    }
    if rate.total == 0 {
        return Err(MetricsError::Empty("triplets"));
    }
    Ok(rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBin {
    pub lower: f64,
    pub upper: f64,
    pub count: u64,
    pub correct: u64,
    /// `None` for empty bins.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median of each half, the middle element excluded for odd lengths.
pub fn quartiles(values: &[f64]) -> Option<Quartiles> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 1 {
        return Some(Quartiles {
            q1: v[0],
            median: v[0],
            q3: v[0],
        });
    }
    let half = n / 2;
    Some(Quartiles {
        q1: median_sorted(&v[..half]),
        median: median_sorted(&v),
        q3: median_sorted(&v[n - half..]),
    })
}

/// Bin index of a confidence: `floor(10 · c)`, with 1.0 in the last bin.
pub fn confidence_bin(confidence: f64) -> usize {
    ((confidence * CONFIDENCE_BINS as f64).floor() as usize).min(CONFIDENCE_BINS - 1)
}

/// Histogram of `(confidence, correct)` pairs.
pub fn histogram(samples: impl IntoIterator<Item = (f64, bool)>) -> Vec<ConfidenceBin> {
    let mut bins: Vec<ConfidenceBin> = (0..CONFIDENCE_BINS)
        .map(|b| ConfidenceBin {
            lower: b as f64 / CONFIDENCE_BINS as f64,
            upper: (b + 1) as f64 / CONFIDENCE_BINS as f64,
            count: 0,
            correct: 0,
            accuracy: None,
        })
        .collect();
    for (c, hit) in samples {
        let bin = &mut bins[confidence_bin(c)];
        bin.count += 1;
        bin.correct += u64::from(hit);
    }
    for bin in &mut bins {
        bin.accuracy = (bin.count > 0).then(|| bin.correct as f64 / bin.count as f64);
    }
    bins
}

/// Node-level calibration before and after rescoring. Without rescoring
/// both halves describe the base distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub histogram_base: Vec<ConfidenceBin>,
    pub histogram_refined: Vec<ConfidenceBin>,
    pub quartiles_base: Option<Quartiles>,
    pub quartiles_refined: Option<Quartiles>,
}

fn max_prob(d: &[f64]) -> f64 {
    d.iter().cloned().fold(0.0, f64::max)
}

pub fn calibration_report(preds: &[SceneGraphPrediction], truth: &[SceneTruth]) -> Result<CalibrationReport> {
    check_alignment(preds, truth)?;
    let labeled: Vec<(&crate::rescore::NodePrediction, usize)> = preds
        .iter()
        .zip(truth)
        .flat_map(|(p, t)| p.nodes.iter().zip(&t.nodes).filter_map(|(n, gt)| gt.map(|g| (n, g))))
        .collect();
    let hit = |d: &[f64], gt: usize| crate::tensor::argmax(d) == gt;
    let base: Vec<(f64, bool)> = labeled.iter().map(|(n, g)| (max_prob(&n.base), hit(&n.base, *g))).collect();
    let refined: Vec<(f64, bool)> = labeled
        .iter()
        .map(|(n, g)| (max_prob(n.final_distribution()), hit(n.final_distribution(), *g)))
        .collect();
    let correct_base: Vec<f64> = labeled.iter().map(|(n, g)| n.base.get(*g).copied().unwrap_or(0.0)).collect();
    let correct_refined: Vec<f64> = labeled
        .iter()
        .map(|(n, g)| n.final_distribution().get(*g).copied().unwrap_or(0.0))
        .collect();
    Ok(CalibrationReport {
        histogram_base: histogram(base),
        histogram_refined: histogram(refined),
        quartiles_base: quartiles(&correct_base),
        quartiles_refined: quartiles(&correct_refined),
    })
}

/// Mean correct-class probability before and after rescoring over labeled
/// nodes whose base confidence is below `threshold`; `None` if there are none.
pub fn low_confidence_shift(preds: &[SceneGraphPrediction], truth: &[SceneTruth], threshold: f64) -> Option<(f64, f64, usize)> {
    let mut before = 0.0;
    let mut after = 0.0;
    let mut n = 0usize;
    for (p, t) in preds.iter().zip(truth) {
        for (node, gt) in p.nodes.iter().zip(&t.nodes) {
            let Some(g) = *gt else { continue };
            if max_prob(&node.base) < threshold {
                before += node.base[g];
                after += node.final_distribution()[g];
                n += 1;
            }
        }
    }
    (n > 0).then(|| (before / n as f64, after / n as f64, n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub name: String,
    pub correct: u64,
    pub total: u64,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall_rel: f64,
    pub recall_obj: f64,
    pub recall_pred: f64,
    pub mrecall_obj: f64,
    pub mrecall_pred: f64,
    pub exclude_none: bool,
    pub per_class_obj: Vec<ClassRow>,
    pub per_class_pred: Vec<ClassRow>,
    pub calibration: CalibrationReport,
}

fn rows(tally: &ClassTally, names: &[String]) -> Vec<ClassRow> {
    names
        .iter()
        .enumerate()
        .map(|(c, name)| ClassRow {
            name: name.clone(),
            correct: tally.correct[c],
            total: tally.total[c],
            recall: tally.class_recall(c),
        })
        .collect()
}

pub fn evaluate(
    preds: &[SceneGraphPrediction],
    truth: &[SceneTruth],
    classes: &[String],
    predicates: &[String],
    exclude_none: bool,
) -> Result<EvalReport> {
    let obj = eval_objects(preds, truth, classes.len())?;
    let pred = eval_predicates(preds, truth, predicates.len(), exclude_none)?;
    let rel = eval_triplets(preds, truth, exclude_none)?;
    Ok(EvalReport {
        recall_rel: rel.value(),
        recall_obj: obj.recall(),
        recall_pred: pred.recall(),
        mrecall_obj: obj.mrecall(),
        mrecall_pred: pred.mrecall(),
        exclude_none,
        per_class_obj: rows(&obj, classes),
        per_class_pred: rows(&pred, predicates),
        calibration: calibration_report(preds, truth)?,
    })
}

impl EvalReport {
    /// Fixed-width summary: Rel, Obj, Pred recall then Obj and Pred mRecall, in percent.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:>8} {:>8} {:>8} | {:>8} {:>8}\n",
            "Rel", "Obj", "Pred", "mR-Obj", "mR-Pred"
        ));
        out.push_str(&format!(
            "{:>8.2} {:>8.2} {:>8.2} | {:>8.2} {:>8.2}\n",
            100.0 * self.recall_rel,
            100.0 * self.recall_obj,
            100.0 * self.recall_pred,
            100.0 * self.mrecall_obj,
            100.0 * self.mrecall_pred
        ));
        out
    }
}
