//! Counterfactual explanations: a minimally perturbed input that moves the
//! classifier's decision to a target class.
//!
//! Three search strategies share one contract:
//!
//! * [`ExplainerMode::LinearClosedForm`]: exact minimum-norm move for linear
//!   classifiers. Under L2 the move is along the weight vector; under L1 it
//!   changes only the feature with the largest absolute weight.
//! * [`ExplainerMode::GradientSearch`]: normalized gradient ascent on the
//!   target logit with a pull back toward the source, followed by a bisection
//!   along the segment to the source to tighten the perturbation.
//! * [`ExplainerMode::BinaryFlipSearch`]: for binary features, enumerates
//!   flip sets by increasing cardinality and returns the first valid one, so
//!   the cardinality is minimal up to the configured cap.
//!
//! A result is valid when the classifier predicts the target and the signed
//! target logit clears `margin`. Any feature may change, including the
//! causal one.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::learner::Classifier;
use crate::synthdata::Sample;
use crate::{Error, Result};

/// Logit slack added to the margin so boundary points land strictly on the
/// target side despite rounding.
pub const BOUNDARY_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplainerMode {
    LinearClosedForm,
    GradientSearch,
    BinaryFlipSearch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    L1,
    L2,
}

impl Norm {
    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainerConfig {
    pub mode: ExplainerMode,
    pub norm: Norm,
    pub margin: f64,
    pub max_steps: usize,
    pub step_size: f64,
    /// Weight of the pull toward the source in gradient search.
    #[serde(default = "default_norm_penalty")]
    pub norm_penalty: f64,
    /// Largest flip set tried by binary flip search.
    #[serde(default = "default_max_flips")]
    pub max_flips: usize,
}

fn default_norm_penalty() -> f64 {
    0.1
}

fn default_max_flips() -> usize {
    12
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        Self {
            mode: ExplainerMode::LinearClosedForm,
            norm: Norm::L2,
            margin: 0.0,
            max_steps: 500,
            step_size: 0.05,
            norm_penalty: default_norm_penalty(),
            max_flips: default_max_flips(),
        }
    }
}

impl ExplainerConfig {
    pub fn with_mode(mode: ExplainerMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(Error::invalid(
                "explainer config",
                "margin must be finite and non-negative",
            ));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::invalid("explainer config", "step_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterfactual {
    pub source_id: u64,
    pub source_label: u8,
    pub source_confounder: u8,
    pub source_features: Vec<f64>,
    /// Classifier probability of class 1 at the source.
    pub source_prob: f64,
    pub features: Vec<f64>,
    pub target_label: u8,
    /// Classifier probability of the target class at the counterfactual.
    pub achieved_prob: f64,
    pub perturbation: Vec<f64>,
    pub norm: f64,
}

impl Counterfactual {
    fn build(f: &Classifier, x: &Sample, target: u8, features: Vec<f64>, norm: Norm) -> Self {
        let perturbation: Vec<f64> = features.iter().zip(&x.features).map(|(a, b)| a - b).collect();
        let p = f.predict_proba(&features);
        Self {
            source_id: x.id,
            source_label: x.label,
            source_confounder: x.confounder,
            source_features: x.features.clone(),
            source_prob: f.predict_proba(&x.features),
            achieved_prob: if target == 1 { p } else { 1.0 - p },
            norm: norm.of(&perturbation),
            features,
            target_label: target,
            perturbation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Explanation {
    Found(Counterfactual),
    NotFound,
}

/// Anything that can produce a counterfactual for a classifier.
pub trait Explainer: Sync {
    /// Errors with [`Error::Precondition`] when `f` already predicts `target`.
    fn explain(&self, f: &Classifier, x: &Sample, target: u8) -> Result<Explanation>;
}

impl Explainer for ExplainerConfig {
    fn explain(&self, f: &Classifier, x: &Sample, target: u8) -> Result<Explanation> {
        explain(f, x, target, self)
    }
}

fn signed(target: u8) -> f64 {
    if target == 1 {
        1.0
    } else {
        -1.0
    }
}

/// Prediction equals `target` and the signed logit clears `margin`.
pub fn is_valid(f: &Classifier, features: &[f64], target: u8, margin: f64) -> bool {
    let z = f.logit(features);
    u8::from(z >= 0.0) == target && signed(target) * z >= margin
}

pub fn explain(f: &Classifier, x: &Sample, target: u8, cfg: &ExplainerConfig) -> Result<Explanation> {
    cfg.validate()?;
    if target > 1 {
        return Err(Error::invalid("target", format!("{target} is not a binary class")));
    }
    if x.features.len() != f.input_dim() {
        return Err(Error::Precondition(format!(
            "sample {} has {} features, classifier expects {}",
            x.id,
            x.features.len(),
            f.input_dim()
        )));
    }
    if f.predict(&x.features) == target {
        return Err(Error::Precondition(format!(
            "sample {} is already classified as {target}",
            x.id
        )));
    }
    let found = match cfg.mode {
        ExplainerMode::LinearClosedForm => linear_closed_form(f, x, target, cfg)?,
        ExplainerMode::GradientSearch => gradient_search(f, x, target, cfg),
        ExplainerMode::BinaryFlipSearch => binary_flip_search(f, x, target, cfg)?,
    };
    Ok(match found {
        Some(features) => Explanation::Found(Counterfactual::build(f, x, target, features, cfg.norm)),
        None => Explanation::NotFound,
    })
}

fn linear_closed_form(f: &Classifier, x: &Sample, target: u8, cfg: &ExplainerConfig) -> Result<Option<Vec<f64>>> {
    let (w, b) = f
        .linear_weights()
        .ok_or_else(|| Error::invalid("explainer config", "closed-form search needs a linear classifier"))?;
    let s = signed(target);
    let z = w.iter().zip(&x.features).map(|(a, b)| a * b).sum::<f64>() + b;
    let gap = s * (cfg.margin + BOUNDARY_SLACK) - z;

    let mut delta = vec![0.0; w.len()];
    match cfg.norm {
        Norm::L2 => {
            let w2: f64 = w.iter().map(|v| v * v).sum();
            if w2 == 0.0 {
                return Ok(None);
            }
            for (d, wi) in delta.iter_mut().zip(w) {
                *d = gap / w2 * wi;
            }
        }
        Norm::L1 => {
            let (j, wj) = w
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .map(|(j, v)| (j, *v))
                .unwrap_or((0, 0.0));
            if wj == 0.0 {
                return Ok(None);
            }
            delta[j] = gap / wj;
        }
    }
    // Rounding can leave the point a hair short of the boundary.
    for attempt in 0..8 {
        let scale = 1.0 + f64::EPSILON * 16f64.powi(attempt);
        let cand: Vec<f64> = x.features.iter().zip(&delta).map(|(a, d)| a + d * scale).collect();
        if is_valid(f, &cand, target, cfg.margin) {
            return Ok(Some(cand));
        }
    }
    Ok(None)
}

fn gradient_search(f: &Classifier, x: &Sample, target: u8, cfg: &ExplainerConfig) -> Option<Vec<f64>> {
    let s = signed(target);
    let mut net = f.network();
    let mut cur = x.features.clone();
    let mut reached = None;
    for step in 0..=cfg.max_steps {
        let (z, g) = net.input_gradient(&f.parameters, &cur);
        if u8::from(z >= 0.0) == target && s * z >= cfg.margin + BOUNDARY_SLACK {
            reached = Some(step);
            break;
        }
        if step == cfg.max_steps {
            break;
        }
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm == 0.0 || !gnorm.is_finite() {
            break;
        }
        for ((c, gi), x0) in cur.iter_mut().zip(&g).zip(&x.features) {
            let pull = match cfg.norm {
                Norm::L2 => *c - x0,
                Norm::L1 => (*c - x0).signum() * f64::from(u8::from(*c != *x0)),
            };
            *c += cfg.step_size * (s * gi / gnorm - cfg.norm_penalty * pull);
        }
    }
    let step = reached?;
    debug!("gradient search for sample {} valid after {step} steps", x.id);

    // Bisect along the segment back to the source for the closest valid point.
    let point = |t: f64| -> Vec<f64> { x.features.iter().zip(&cur).map(|(a, b)| a + t * (b - a)).collect() };
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if is_valid(f, &point(mid), target, cfg.margin) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(point(hi))
}

fn binary_flip_search(f: &Classifier, x: &Sample, target: u8, cfg: &ExplainerConfig) -> Result<Option<Vec<f64>>> {
    if x.features.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(
            "explainer input",
            format!("sample {} has non-binary features", x.id),
        ));
    }
    let d = x.features.len();
    for size in 1..=cfg.max_flips.min(d) {
        let mut combo: Vec<usize> = (0..size).collect();
        loop {
            let mut cand = x.features.clone();
            for &j in &combo {
                cand[j] = 1.0 - cand[j];
            }
            if is_valid(f, &cand, target, cfg.margin) {
                return Ok(Some(cand));
            }
            if !next_combination(&mut combo, d) {
                break;
            }
        }
    }
    Ok(None)
}

/// Advances `combo` to the next `k`-subset of `0..n` in lexicographic order.
fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let k = combo.len();
    let Some(i) = (0..k).rev().find(|&i| combo[i] < n - k + i) else {
        return false;
    };
    combo[i] += 1;
    for j in i + 1..k {
        combo[j] = combo[j - 1] + 1;
    }
    true
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchExplanations {
    pub counterfactuals: Vec<Counterfactual>,
    pub not_found: Vec<u64>,
    /// Samples failing the precondition, with the reason.
    pub skipped: Vec<(u64, String)>,
}

impl BatchExplanations {
    pub fn attempted(&self) -> usize {
        self.counterfactuals.len() + self.not_found.len() + self.skipped.len()
    }
}

/// Explains every sample toward the opposite of its label, preserving input
/// order. Samples the classifier already assigns to that class are skipped.
pub fn explain_batch(f: &Classifier, subset: &[Sample], explainer: &dyn Explainer) -> BatchExplanations {
    let outcomes: Vec<(u64, Result<Explanation>)> = subset
        .par_iter()
        .map(|x| (x.id, explainer.explain(f, x, 1 - x.label)))
        .collect();
    let mut out = BatchExplanations::default();
    for (id, outcome) in outcomes {
        match outcome {
            Ok(Explanation::Found(cf)) => out.counterfactuals.push(cf),
            Ok(Explanation::NotFound) => out.not_found.push(id),
            Err(e) => {
                debug!("skipping sample {id}: {e}");
                out.skipped.push((id, e.to_string()));
            }
        }
    }
    out
}

/// CSV dump: `source_id,target,norm,achieved_prob,f0,...`.
pub fn store_counterfactuals(cfs: &[Counterfactual], dim: usize, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header = vec![
        "source_id".to_string(),
        "target".into(),
        "norm".into(),
        "achieved_prob".into(),
    ];
    header.extend((0..dim).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for cf in cfs {
        let mut row = vec![
            cf.source_id.to_string(),
            cf.target_label.to_string(),
            cf.norm.to_string(),
            cf.achieved_prob.to_string(),
        ];
        row.extend(cf.features.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
