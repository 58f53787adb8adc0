//! End-to-end CFKD on the two-feature binary dataset with a classifier that
//! reads only the spurious feature.

use cfkd_core::cfkd::{detect_ch, run_cfkd, CfkdConfig, ChDetection};
use cfkd_core::explainer::{is_valid, ExplainerConfig, ExplainerMode};
use cfkd_core::learner::{train, Classifier, ModelConfig, TrainConfig};
use cfkd_core::synthdata::{generate, oracle_label_fn, split, DatasetSpec, LabeledDataset, SplitFractions};
use cfkd_core::teacher::{OracleTeacher, Verdict};

/// Trains a linear model on data whose causal column is zeroed, so it can
/// only use the spurious feature.
fn spurious_only(data: &LabeledDataset, val: &LabeledDataset) -> Classifier {
    let blind = |d: &LabeledDataset| {
        let mut d = d.clone();
        d.samples.iter_mut().for_each(|s| s.features[0] = 0.0);
        d
    };
    let cfg = TrainConfig {
        balanced_batches: true,
        max_epochs: 30,
        patience: 30,
        ..TrainConfig::default()
    };
    let mut f = train(&ModelConfig::linear(2, 0), &blind(data), &blind(val), &cfg).unwrap();
    // No causal weight at all.
    f.parameters[0] = 0.0;
    f
}

#[test]
fn planted_clever_hans_is_detected() {
    let spec = DatasetSpec::two_feature_binary(100, 10, 0.9, 0.1, 21);
    let data = generate(&spec).unwrap();
    let s = split(&data, SplitFractions::default(), 4, true).unwrap();
    let f = spurious_only(&s.train, &s.val);
    assert!(f.parameters[1] > 0.0, "spurious weight should favour class 1");

    let cfg = CfkdConfig {
        explainer: ExplainerConfig::with_mode(ExplainerMode::BinaryFlipSearch),
        ..CfkdConfig::default()
    };
    let teacher = OracleTeacher {
        labeler: oracle_label_fn(&spec),
    };
    let run = run_cfkd(&f, &s, &cfg.explainer, &teacher, &cfg).unwrap();
    let r = &run.report;
    assert_eq!(r.explained_count, s.train.len().min(1000));
    assert!(r.counterfactual_count > 0);
    assert_eq!(r.false_cf_rate, Some(1.0));
    assert!(run
        .annotations
        .iter()
        .all(|a| a.verdict == Verdict::FalseCounterfactual));
    assert!(run
        .counterfactuals
        .iter()
        .all(|cf| is_valid(&f, &cf.features, cf.target_label, 0.0)));
    match detect_ch(r, 0.5) {
        ChDetection::CleverHans { implicated, .. } => assert_eq!(implicated, vec![1]),
        other => panic!("expected a Clever-Hans flag, got {other:?}"),
    }
    // Augmented samples carry the source label, never the explainer target.
    for (a, cf) in run.augmentation.iter().zip(&run.counterfactuals) {
        assert_eq!(a.label, cf.source_label);
    }
    assert!(run.augmentation.len() <= r.explained_count);
}
