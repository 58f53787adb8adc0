//! The CFKD engine: draw a subset of the training data, explain it with
//! counterfactuals, have a teacher label them, then fine-tune on the training
//! data plus the labeled counterfactuals.
//!
//! The augmentation set always carries the teacher's label. A false
//! counterfactual therefore enters training with its source label, which
//! teaches the classifier that the edited (spurious) features do not decide
//! the class.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::evalmetrics::{evaluate, GroupedEval};
use crate::explainer::{
    explain_batch, store_counterfactuals, Counterfactual, Explainer, ExplainerConfig, ExplainerMode,
};
use crate::learner::{checkpoint, finetune, train, Architecture, Classifier, ModelConfig, TrainConfig};
use crate::rng::{derive_seed, rng_from_seed};
use crate::synthdata::{self, Group, LabeledDataset, Origin, Sample, Split};
use crate::teacher::{self, AnnotationRecord, RunPhase, Teacher, Verdict};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetStrategy {
    /// Proportional to the `(Y, C)` group sizes.
    Stratified,
    /// Only the smaller class.
    MinorityOnly,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    Oracle,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfkdConfig {
    pub subset_size: usize,
    pub subset_strategy: SubsetStrategy,
    pub explainer: ExplainerConfig,
    pub finetune: TrainConfig,
    pub teacher_mode: TeacherMode,
    pub seed: u64,
    /// Copies of each annotated counterfactual added to the fine-tuning set.
    #[serde(default = "one")]
    pub replication: usize,
    /// Fine-tune from the base weights; otherwise retrain from scratch.
    #[serde(default = "yes")]
    pub warm_start: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl Default for CfkdConfig {
    fn default() -> Self {
        Self {
            subset_size: 1000,
            subset_strategy: SubsetStrategy::Stratified,
            explainer: ExplainerConfig::default(),
            finetune: TrainConfig::default().for_finetune(),
            teacher_mode: TeacherMode::Oracle,
            seed: 0,
            replication: 1,
            warm_start: true,
        }
    }
}

impl CfkdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subset_size == 0 {
            return Err(Error::invalid("cfkd config", "subset_size must be at least 1"));
        }
        if self.replication == 0 {
            return Err(Error::invalid("cfkd config", "replication must be at least 1"));
        }
        self.explainer.validate()?;
        self.finetune.validate()
    }
}

/// Closed form for linear models, gradient search otherwise.
pub fn default_explainer_for(model: &ModelConfig) -> ExplainerConfig {
    let mode = match model.architecture {
        Architecture::Linear => ExplainerMode::LinearClosedForm,
        Architecture::Mlp { .. } => ExplainerMode::GradientSearch,
    };
    ExplainerConfig::with_mode(mode)
}

/// Draws `min(size, |data|)` samples. Stratified allocation uses largest
/// remainders, so group shares match the data up to rounding.
pub fn draw_subset(data: &LabeledDataset, size: usize, strategy: SubsetStrategy, seed: u64) -> Vec<Sample> {
    let mut rng = rng_from_seed(derive_seed(seed, "cfkd/subset"));
    let mut picked: Vec<usize> = match strategy {
        SubsetStrategy::Random => {
            let mut idx: Vec<usize> = (0..data.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(size);
            idx
        }
        SubsetStrategy::MinorityOnly => {
            let minority = u8::from(data.group_counts.class(1) <= data.group_counts.class(0));
            let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.samples[i].label == minority).collect();
            idx.shuffle(&mut rng);
            idx.truncate(size);
            idx
        }
        SubsetStrategy::Stratified => {
            let mut groups: BTreeMap<Group, Vec<usize>> = BTreeMap::new();
            for (i, s) in data.samples.iter().enumerate() {
                groups.entry(s.group()).or_default().push(i);
            }
            let total = data.len();
            let want = size.min(total);
            let mut quota: Vec<(Group, usize, f64)> = groups
                .iter()
                .map(|(g, m)| {
                    let exact = want as f64 * m.len() as f64 / total as f64;
                    (*g, exact.floor() as usize, exact - exact.floor())
                })
                .collect();
            let mut left = want - quota.iter().map(|q| q.1).sum::<usize>();
            let mut order: Vec<usize> = (0..quota.len()).collect();
            order.sort_by(|&a, &b| quota[b].2.total_cmp(&quota[a].2).then(a.cmp(&b)));
            for &i in order.iter().cycle() {
                if left == 0 {
                    break;
                }
                if quota[i].1 < groups[&quota[i].0].len() {
                    quota[i].1 += 1;
                    left -= 1;
                }
            }
            let mut idx = Vec::with_capacity(want);
            for (g, q, _) in quota {
                let mut members = groups[&g].clone();
                members.shuffle(&mut rng);
                idx.extend_from_slice(&members[..q]);
            }
            idx
        }
    };
    picked.sort_unstable();
    picked.into_iter().map(|i| data.samples[i].clone()).collect()
}

/// Mean absolute perturbation per feature, split by verdict. `None` where
/// no counterfactual of that verdict exists.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureAttribution {
    pub true_cf: Option<Vec<f64>>,
    pub false_cf: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CfkdReport {
    pub explained_count: usize,
    pub counterfactual_count: usize,
    pub notfound_count: usize,
    pub skipped_count: usize,
    /// Counterfactuals the teacher did not label in time (human mode).
    pub unresolved_count: usize,
    pub true_cf_count: usize,
    pub false_cf_count: usize,
    /// `false / (true + false)`; `None` when nothing was annotated.
    pub false_cf_rate: Option<f64>,
    pub replication: usize,
    pub augmentation_size: usize,
    pub attribution: FeatureAttribution,
    pub pre: Option<GroupedEval>,
    pub post: Option<GroupedEval>,
}

/// Everything a run produced, for the run record.
#[derive(Debug, Clone)]
pub struct CfkdRun {
    pub classifier: Classifier,
    pub report: CfkdReport,
    pub counterfactuals: Vec<Counterfactual>,
    pub annotations: Vec<AnnotationRecord>,
    pub augmentation: Vec<Sample>,
}

/// Runs one CFKD round on `split`: subset from `split.train`, early stopping
/// on `split.val` (originals only), pre/post metrics on `split.test`.
pub fn run_cfkd(
    f: &Classifier,
    split: &Split,
    explainer: &dyn Explainer,
    teacher: &dyn Teacher,
    cfg: &CfkdConfig,
) -> Result<CfkdRun> {
    cfg.validate()?;
    let train_set = &split.train;
    if train_set.is_empty() {
        return Err(Error::Precondition("training split is empty".into()));
    }

    teacher.on_phase(RunPhase::Explaining);
    let subset = draw_subset(train_set, cfg.subset_size, cfg.subset_strategy, cfg.seed);
    let batch = explain_batch(f, &subset, explainer);
    info!(
        "explained {}: {} counterfactuals, {} not found, {} skipped",
        batch.attempted(),
        batch.counterfactuals.len(),
        batch.not_found.len(),
        batch.skipped.len()
    );

    let annotations = if batch.counterfactuals.is_empty() {
        teacher::Annotations::default()
    } else {
        teacher.annotate(&batch.counterfactuals)?
    };

    let by_id: BTreeMap<u64, &Counterfactual> = batch.counterfactuals.iter().map(|c| (c.source_id, c)).collect();
    let next_id = train_set
        .max_id()
        .into_iter()
        .chain(split.val.max_id())
        .chain(split.test.max_id())
        .max()
        .map_or(0, |m| m + 1);
    let mut augmentation = Vec::with_capacity(annotations.records.len() * cfg.replication);
    for r in &annotations.records {
        let cf = by_id[&r.counterfactual_id];
        for _ in 0..cfg.replication {
            augmentation.push(Sample {
                id: next_id + augmentation.len() as u64,
                features: cf.features.clone(),
                label: r.teacher_label,
                confounder: cf.source_confounder,
                origin: Origin::Counterfactual,
            });
        }
    }

    teacher.on_phase(RunPhase::Finetuning);
    let augmented = train_set.union(&augmentation)?;
    let f_prime = if cfg.warm_start {
        finetune(f, &augmented, &split.val, &cfg.finetune)?
    } else {
        train(&f.config, &augmented, &split.val, &cfg.finetune)?
    };

    let (pre, post) = if split.test.is_empty() {
        (None, None)
    } else {
        (Some(evaluate(f, &split.test)?), Some(evaluate(&f_prime, &split.test)?))
    };

    let true_cf_count = annotations
        .records
        .iter()
        .filter(|r| r.verdict == Verdict::TrueCounterfactual)
        .count();
    let false_cf_count = annotations.records.len() - true_cf_count;
    let report = CfkdReport {
        explained_count: batch.attempted(),
        counterfactual_count: batch.counterfactuals.len(),
        notfound_count: batch.not_found.len(),
        skipped_count: batch.skipped.len(),
        unresolved_count: annotations.unresolved,
        true_cf_count,
        false_cf_count,
        false_cf_rate: (!annotations.records.is_empty())
            .then(|| false_cf_count as f64 / annotations.records.len() as f64),
        replication: cfg.replication,
        augmentation_size: augmentation.len(),
        attribution: attribution(&annotations.records, &by_id, f.input_dim()),
        pre,
        post,
    };
    teacher.on_phase(RunPhase::Done);
    Ok(CfkdRun {
        classifier: f_prime,
        report,
        counterfactuals: batch.counterfactuals,
        annotations: annotations.records,
        augmentation,
    })
}

fn attribution(records: &[AnnotationRecord], cfs: &BTreeMap<u64, &Counterfactual>, dim: usize) -> FeatureAttribution {
    let mean_abs = |verdict: Verdict| {
        let picked: Vec<&Counterfactual> = records
            .iter()
            .filter(|r| r.verdict == verdict)
            .map(|r| cfs[&r.counterfactual_id])
            .collect();
        if picked.is_empty() {
            return None;
        }
        let mut acc = vec![0.0; dim];
        for cf in &picked {
            for (a, d) in acc.iter_mut().zip(&cf.perturbation) {
                *a += d.abs();
            }
        }
        Some(acc.into_iter().map(|a| a / picked.len() as f64).collect())
    };
    FeatureAttribution {
        true_cf: mean_abs(Verdict::TrueCounterfactual),
        false_cf: mean_abs(Verdict::FalseCounterfactual),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ChDetection {
    /// No annotated counterfactuals to judge from.
    NoEvidence,
    Clean {
        false_cf_rate: f64,
    },
    CleverHans {
        false_cf_rate: f64,
        implicated: Vec<usize>,
    },
}

/// Flags a Clever-Hans solution when the false-counterfactual rate exceeds
/// `threshold`. Implicated features move more, on average, in false
/// counterfactuals than in true ones.
pub fn detect_ch(report: &CfkdReport, threshold: f64) -> ChDetection {
    let Some(rate) = report.false_cf_rate else {
        return ChDetection::NoEvidence;
    };
    if rate <= threshold {
        return ChDetection::Clean { false_cf_rate: rate };
    }
    let false_means = report.attribution.false_cf.as_deref().unwrap_or_default();
    let implicated = false_means
        .iter()
        .enumerate()
        .filter(|&(j, &m)| {
            let t = report.attribution.true_cf.as_ref().map_or(0.0, |t| t[j]);
            m > t
        })
        .map(|(j, _)| j)
        .collect();
    ChDetection::CleverHans {
        false_cf_rate: rate,
        implicated,
    }
}

/// Writes the run record: `config.json`, `counterfactuals.csv`,
/// `augmentation.csv`, `annotations.jsonl`, `base.ckpt.json`,
/// `finetuned.ckpt.json` and `report.json`.
pub fn write_run_record(
    dir: &Path,
    cfg: &CfkdConfig,
    base: &Classifier,
    run: &CfkdRun,
    data: &LabeledDataset,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    store_counterfactuals(&run.counterfactuals, base.input_dim(), &dir.join("counterfactuals.csv"))?;
    let aug = LabeledDataset::from_samples(data.spec.clone(), run.augmentation.clone())?;
    synthdata::store(&aug, &dir.join("augmentation.csv"))?;
    teacher::write_log(&run.annotations, &dir.join("annotations.jsonl"))?;
    checkpoint::store(base, &dir.join("base.ckpt.json"))?;
    checkpoint::store(&run.classifier, &dir.join("finetuned.ckpt.json"))?;
    fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&run.report)? + "\n",
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explainer::Explanation;
    use crate::synthdata::{generate, split, DatasetSpec, SplitFractions};
    use crate::teacher::OracleTeacher;

    fn planted() -> (Split, Classifier) {
        let spec = DatasetSpec::two_feature_binary(100, 10, 0.9, 0.1, 5);
        let data = generate(&spec).unwrap();
        let s = split(&data, SplitFractions::new(0.8, 0.1, 0.1), 2, true).unwrap();
        // Depends on the spurious feature only.
        let f = Classifier::from_parameters(ModelConfig::linear(2, 0), vec![0.0, 4.0, -2.0]).unwrap();
        (s, f)
    }

    fn quick_cfg(subset: usize) -> CfkdConfig {
        CfkdConfig {
            subset_size: subset,
            finetune: TrainConfig {
                max_epochs: 5,
                patience: 5,
                ..TrainConfig::default()
            },
            ..CfkdConfig::default()
        }
    }

    #[test]
    fn stratified_subset_is_proportional() {
        let (s, _) = planted();
        let sub = draw_subset(&s.train, 100, SubsetStrategy::Stratified, 1);
        assert_eq!(sub.len(), 100);
        let counts = LabeledDataset::from_samples(s.train.spec.clone(), sub)
            .unwrap()
            .group_counts;
        for g in Group::ALL {
            let exact = 100.0 * s.train.group_counts.get(g) as f64 / s.train.len() as f64;
            assert!((counts.get(g) as f64 - exact).abs() < 1.0, "{g}");
        }
        assert_eq!(
            draw_subset(&s.train, 10_000, SubsetStrategy::Stratified, 1).len(),
            s.train.len()
        );
    }

    #[test]
    fn minority_only_subset() {
        let (s, _) = planted();
        let sub = draw_subset(&s.train, 1000, SubsetStrategy::MinorityOnly, 1);
        assert_eq!(sub.len(), s.train.group_counts.class(1));
        assert!(sub.iter().all(|x| x.label == 1));
    }

    #[test]
    fn spurious_only_classifier_gets_all_false_counterfactuals() {
        let (s, f) = planted();
        let teacher = OracleTeacher {
            labeler: synthdata::oracle_label_fn(&s.train.spec),
        };
        let cfg = CfkdConfig {
            explainer: ExplainerConfig::with_mode(ExplainerMode::BinaryFlipSearch),
            ..quick_cfg(1000)
        };
        let run = run_cfkd(&f, &s, &cfg.explainer, &teacher, &cfg).unwrap();
        let r = &run.report;
        assert!(r.counterfactual_count > 0);
        assert_eq!(r.false_cf_rate, Some(1.0));
        assert_eq!(
            r.true_cf_count + r.false_cf_count + r.unresolved_count,
            r.counterfactual_count
        );
        assert_eq!(
            r.counterfactual_count + r.notfound_count + r.skipped_count,
            r.explained_count
        );
        // Augmented samples keep the source label.
        for (a, cf) in run.augmentation.iter().zip(&run.counterfactuals) {
            assert_eq!(a.label, cf.source_label);
            assert_eq!(a.origin, Origin::Counterfactual);
        }
        assert_eq!(
            detect_ch(r, 0.5),
            ChDetection::CleverHans {
                false_cf_rate: 1.0,
                implicated: vec![1]
            }
        );
    }

    struct Never;

    impl Explainer for Never {
        fn explain(&self, _: &Classifier, _: &Sample, _: u8) -> Result<Explanation> {
            Ok(Explanation::NotFound)
        }
    }

    #[test]
    fn empty_augmentation_is_plain_finetune() {
        let (s, f) = planted();
        let teacher = OracleTeacher {
            labeler: synthdata::oracle_label_fn(&s.train.spec),
        };
        let cfg = quick_cfg(50);
        let run = run_cfkd(&f, &s, &Never, &teacher, &cfg).unwrap();
        assert_eq!(run.report.explained_count, 50);
        assert_eq!(run.report.notfound_count, 50);
        assert!(run.augmentation.is_empty());
        assert_eq!(detect_ch(&run.report, 0.5), ChDetection::NoEvidence);
        let plain = finetune(&f, &s.train, &s.val, &cfg.finetune).unwrap();
        assert_eq!(run.classifier, plain);
    }

    #[test]
    fn oracle_runs_are_deterministic() {
        let (s, f) = planted();
        let teacher = OracleTeacher {
            labeler: synthdata::oracle_label_fn(&s.train.spec),
        };
        let cfg = quick_cfg(40);
        let a = run_cfkd(&f, &s, &cfg.explainer, &teacher, &cfg).unwrap();
        let b = run_cfkd(&f, &s, &cfg.explainer, &teacher, &cfg).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.classifier, b.classifier);
    }

    #[test]
    fn replication_multiplies_augmentation() {
        let (s, f) = planted();
        let teacher = OracleTeacher {
            labeler: synthdata::oracle_label_fn(&s.train.spec),
        };
        let cfg = CfkdConfig {
            replication: 3,
            ..quick_cfg(20)
        };
        let run = run_cfkd(&f, &s, &cfg.explainer, &teacher, &cfg).unwrap();
        assert_eq!(run.augmentation.len(), 3 * run.annotations.len());
        let ids: std::collections::BTreeSet<u64> = run.augmentation.iter().map(|a| a.id).collect();
        assert_eq!(ids.len(), run.augmentation.len());
    }

    #[test]
    fn clean_and_no_evidence_outcomes() {
        let base = CfkdReport {
            explained_count: 1,
            counterfactual_count: 1,
            notfound_count: 0,
            skipped_count: 0,
            unresolved_count: 0,
            true_cf_count: 1,
            false_cf_count: 0,
            false_cf_rate: Some(0.0),
            replication: 1,
            augmentation_size: 1,
            attribution: FeatureAttribution {
                true_cf: Some(vec![1.0]),
                false_cf: None,
            },
            pre: None,
            post: None,
        };
        assert_eq!(detect_ch(&base, 0.5), ChDetection::Clean { false_cf_rate: 0.0 });
        let none = CfkdReport {
            counterfactual_count: 0,
            false_cf_rate: None,
            ..base
        };
        assert_eq!(detect_ch(&none, 0.5), ChDetection::NoEvidence);
    }

    #[test]
    fn run_record_layout() {
        let (s, f) = planted();
        let teacher = OracleTeacher {
            labeler: synthdata::oracle_label_fn(&s.train.spec),
        };
        let cfg = quick_cfg(20);
        let run = run_cfkd(&f, &s, &cfg.explainer, &teacher, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_run_record(dir.path(), &cfg, &f, &run, &s.train).unwrap();
        for name in [
            "config.json",
            "counterfactuals.csv",
            "augmentation.csv",
            "annotations.jsonl",
            "base.ckpt.json",
            "finetuned.ckpt.json",
            "report.json",
        ] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        assert_eq!(
            teacher::read_log(&dir.path().join("annotations.jsonl")).unwrap(),
            run.annotations
        );
    }
}
