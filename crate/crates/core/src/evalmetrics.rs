//! F1, per-`(Y, C)` group accuracy, AGA and worst-group accuracy.
//!
//! AGA is the unweighted arithmetic mean of the group accuracies: every
//! `(Y, C)` group counts equally whatever its size. The definition lives in
//! [`aga`] alone so it can be swapped.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::learner::Classifier;
use crate::synthdata::{Group, LabeledDataset};
use crate::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn of(predictions: &[u8], labels: &[u8]) -> Result<Self> {
        check_aligned(predictions.len(), labels.len())?;
        let mut c = Confusion::default();
        for (&p, &y) in predictions.iter().zip(labels) {
            match (p, y) {
                (1, 1) => c.tp += 1,
                (1, _) => c.fp += 1,
                (_, 1) => c.fn_ += 1,
                _ => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn f1(&self) -> f64 {
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn check_aligned(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(
            "metric input",
            format!("misaligned lengths {a} and {b}"),
        ));
    }
    Ok(())
}

pub fn f1_score(predictions: &[u8], labels: &[u8]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::invalid("metric input", "F1 of an empty sequence"));
    }
    Ok(Confusion::of(predictions, labels)?.f1())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupAccuracies {
    #[serde(serialize_with = "by_group_name")]
    pub accuracy: BTreeMap<Group, f64>,
    /// Groups with no members; omitted from `accuracy`.
    pub missing: Vec<Group>,
}

fn by_group_name<S: serde::Serializer>(map: &BTreeMap<Group, f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_map(map.iter().map(|(g, a)| (g.to_string(), a)))
}

pub fn group_accuracies(predictions: &[u8], labels: &[u8], confounders: &[u8]) -> Result<GroupAccuracies> {
    check_aligned(predictions.len(), labels.len())?;
    check_aligned(labels.len(), confounders.len())?;
    let mut tally: BTreeMap<Group, (usize, usize)> = BTreeMap::new();
    for ((&p, &y), &c) in predictions.iter().zip(labels).zip(confounders) {
        let e = tally.entry(Group::new(y, c)).or_default();
        e.0 += usize::from(p == y);
        e.1 += 1;
    }
    let accuracy = tally.iter().map(|(g, &(ok, n))| (*g, ok as f64 / n as f64)).collect();
    let missing = Group::ALL.iter().filter(|g| !tally.contains_key(g)).copied().collect();
    Ok(GroupAccuracies { accuracy, missing })
}

/// Average group accuracy: the unweighted mean over the present groups.
pub fn aga(per_group: &BTreeMap<Group, f64>) -> Result<f64> {
    if per_group.is_empty() {
        return Err(Error::invalid("metric input", "AGA of an empty group map"));
    }
    Ok(per_group.values().sum::<f64>() / per_group.len() as f64)
}

pub fn worst_group(per_group: &BTreeMap<Group, f64>) -> Result<f64> {
    per_group
        .values()
        .copied()
        .reduce(f64::min)
        .ok_or_else(|| Error::invalid("metric input", "worst group of an empty group map"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupedEval {
    pub confusion: Confusion,
    pub per_group: GroupAccuracies,
    pub f1: f64,
    pub aga: f64,
    pub worst_group: f64,
}

impl GroupedEval {
    pub fn from_predictions(predictions: &[u8], labels: &[u8], confounders: &[u8]) -> Result<Self> {
        let per_group = group_accuracies(predictions, labels, confounders)?;
        Ok(Self {
            confusion: Confusion::of(predictions, labels)?,
            f1: f1_score(predictions, labels)?,
            aga: aga(&per_group.accuracy)?,
            worst_group: worst_group(&per_group.accuracy)?,
            per_group,
        })
    }

    pub fn group(&self, g: Group) -> Option<f64> {
        self.per_group.accuracy.get(&g).copied()
    }
}

pub fn evaluate(classifier: &Classifier, data: &LabeledDataset) -> Result<GroupedEval> {
    evaluate_with_threshold(classifier, data, DEFAULT_THRESHOLD)
}

pub fn evaluate_with_threshold(classifier: &Classifier, data: &LabeledDataset, threshold: f64) -> Result<GroupedEval> {
    let predictions: Vec<u8> = if threshold == DEFAULT_THRESHOLD {
        classifier.predict_many(data.samples.iter().map(|s| s.features.as_slice()))
    } else {
        data.samples
            .iter()
            .map(|s| classifier.predict_with_threshold(&s.features, threshold))
            .collect()
    };
    GroupedEval::from_predictions(&predictions, &data.labels(), &data.confounders())
}

pub const METRIC_COLUMNS: [&str; 12] = [
    "dataset",
    "n",
    "k",
    "method",
    "seed",
    "f1",
    "aga",
    "worst_group",
    "group_y0c0",
    "group_y0c1",
    "group_y1c0",
    "group_y1c1",
];

/// One CSV metric row in [`METRIC_COLUMNS`] order. Missing groups and
/// absent metrics render as empty fields.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub dataset: String,
    pub n: usize,
    pub k: usize,
    pub method: String,
    pub seed: u64,
    pub eval: Option<GroupedEval>,
}

impl MetricRow {
    pub fn fields(&self) -> Vec<String> {
        let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let e = self.eval.as_ref();
        let mut row = vec![
            self.dataset.clone(),
            self.n.to_string(),
            self.k.to_string(),
            self.method.clone(),
            self.seed.to_string(),
            num(e.map(|e| e.f1)),
            num(e.map(|e| e.aga)),
            num(e.map(|e| e.worst_group)),
        ];
        row.extend(Group::ALL.iter().map(|&g| num(e.and_then(|e| e.group(g)))));
        row
    }
}
