//! Explainer results against brute-force oracles.

use cfkd_core::explainer::{explain, is_valid, ExplainerConfig, ExplainerMode, Explanation, Norm, BOUNDARY_SLACK};
use cfkd_core::learner::{Classifier, ModelConfig};
use cfkd_core::rng::rng_from_seed;
use cfkd_core::synthdata::{Origin, Sample};
use proptest::prelude::*;
use rand::Rng;

fn sample(features: Vec<f64>, label: u8) -> Sample {
    Sample {
        id: 0,
        features,
        label,
        confounder: 0,
        origin: Origin::Original,
    }
}

fn linear(w: &[f64], b: f64) -> Classifier {
    let mut p = w.to_vec();
    p.push(b);
    Classifier::from_parameters(ModelConfig::linear(w.len(), 0), p).unwrap()
}

/// Smallest step along any of `steps` directions on the unit circle of
/// `norm` that reaches signed logit `s·(margin + slack)`.
fn angular_minimum(w: [f64; 2], b: f64, x: [f64; 2], target: u8, margin: f64, norm: Norm, steps: usize) -> f64 {
    let s = if target == 1 { 1.0 } else { -1.0 };
    let gap = s * (margin + BOUNDARY_SLACK) - (w[0] * x[0] + w[1] * x[1] + b);
    let mut best = f64::INFINITY;
    for i in 0..steps {
        let theta = std::f64::consts::TAU * i as f64 / steps as f64;
        let (c, sn) = (theta.cos(), theta.sin());
        let u = match norm {
            Norm::L2 => [c, sn],
            // Rescale onto the L1 unit diamond.
            Norm::L1 => {
                let l1 = c.abs() + sn.abs();
                [c / l1, sn / l1]
            }
        };
        let rate = w[0] * u[0] + w[1] * u[1];
        if rate * gap > 0.0 {
            best = best.min(gap / rate);
        }
    }
    best
}

#[test]
fn closed_form_matches_angular_brute_force_on_50_models() {
    let mut rng = rng_from_seed(11);
    for model in 0..50 {
        let w = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let b = rng.random_range(-1.0..1.0);
        let f = linear(&w, b);
        let x = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
        let target = 1 - f.predict(&x);
        for norm in [Norm::L1, Norm::L2] {
            let cfg = ExplainerConfig {
                norm,
                ..ExplainerConfig::default()
            };
            let Explanation::Found(cf) = explain(&f, &sample(x.to_vec(), 1 - target), target, &cfg).unwrap() else {
                panic!("model {model}: closed form found nothing");
            };
            // Grids on both sides of the axes so the L1 vertices are hit exactly.
            let brute = angular_minimum(w, b, x, target, 0.0, norm, 400_000);
            assert!(
                (cf.norm - brute).abs() < 1e-6,
                "model {model} {norm:?}: closed form {} vs brute force {brute}",
                cf.norm
            );
            assert!(is_valid(&f, &cf.features, target, 0.0));
        }
    }
}

#[test]
fn documented_example() {
    let f = linear(&[1.0, 0.0], 0.0);
    let Explanation::Found(cf) = explain(&f, &sample(vec![-2.0, 5.0], 0), 1, &ExplainerConfig::default()).unwrap()
    else {
        panic!("no counterfactual");
    };
    assert!((cf.features[0] - 0.0).abs() < 1e-8 && cf.features[1] == 5.0);
    assert!((cf.norm - 2.0).abs() < 1e-8);
}

/// Smallest number of flipped features that makes `f` predict `target`.
fn exhaustive_min_flips(f: &Classifier, x: &[f64], target: u8) -> Option<usize> {
    let d = x.len();
    (0u32..1 << d)
        .filter(|mask| {
            let cand: Vec<f64> = (0..d)
                .map(|j| if mask >> j & 1 == 1 { 1.0 - x[j] } else { x[j] })
                .collect();
            is_valid(f, &cand, target, 0.0)
        })
        .map(|mask| mask.count_ones() as usize)
        .min()
}

#[test]
fn flip_sets_are_minimal_up_to_12_features() {
    let mut rng = rng_from_seed(12);
    let mut checked = 0;
    for d in 1..=12 {
        for trial in 0..12 {
            let config = if trial % 2 == 0 {
                ModelConfig::linear(d, trial)
            } else {
                ModelConfig::mlp(d, vec![5], trial)
            };
            let params: Vec<f64> = (0..config.parameter_count())
                .map(|_| rng.random_range(-2.0..2.0))
                .collect();
            let f = Classifier::from_parameters(config, params).unwrap();
            let x: Vec<f64> = (0..d).map(|_| f64::from(rng.random_range(0..2u8))).collect();
            let target = 1 - f.predict(&x);
            let cfg = ExplainerConfig::with_mode(ExplainerMode::BinaryFlipSearch);
            let got = match explain(&f, &sample(x.clone(), 1 - target), target, &cfg).unwrap() {
                Explanation::Found(cf) => {
                    assert!(is_valid(&f, &cf.features, target, 0.0));
                    Some(cf.perturbation.iter().filter(|v| **v != 0.0).count())
                }
                Explanation::NotFound => None,
            };
            assert_eq!(got, exhaustive_min_flips(&f, &x, target), "d={d} trial={trial}");
            checked += 1;
        }
    }
    assert_eq!(checked, 144);
}

#[test]
fn gradient_search_results_are_valid_on_random_mlps() {
    let mut rng = rng_from_seed(13);
    let cfg = ExplainerConfig {
        mode: ExplainerMode::GradientSearch,
        max_steps: 2000,
        ..ExplainerConfig::default()
    };
    let mut found = 0;
    for seed in 0..40 {
        let f = Classifier::new(ModelConfig::mlp(4, vec![8], seed)).unwrap();
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let target = 1 - f.predict(&x);
        if let Explanation::Found(cf) = explain(&f, &sample(x, 1 - target), target, &cfg).unwrap() {
            assert_eq!(f.predict(&cf.features), target);
            found += 1;
        }
    }
    assert!(found > 0);
}

proptest! {
    #[test]
    fn larger_margin_never_shrinks_the_move(
        w0 in -3.0..3.0f64, w1 in -3.0..3.0f64, b in -1.0..1.0f64,
        x0 in -4.0..4.0f64, x1 in -4.0..4.0f64,
        m1 in 0.0..2.0f64, extra in 0.0..2.0f64, l1 in any::<bool>(),
    ) {
        prop_assume!(w0.abs() + w1.abs() > 1e-3);
        let f = linear(&[w0, w1], b);
        let x = vec![x0, x1];
        let target = 1 - f.predict(&x);
        let norm = if l1 { Norm::L1 } else { Norm::L2 };
        let run = |margin| {
            let cfg = ExplainerConfig { norm, margin, ..ExplainerConfig::default() };
            match explain(&f, &sample(x.clone(), 1 - target), target, &cfg).unwrap() {
                Explanation::Found(cf) => cf.norm,
                Explanation::NotFound => f64::INFINITY,
            }
        };
        let (a, b2) = (run(m1), run(m1 + extra));
        prop_assert!(a <= b2 + 1e-12, "{a} > {b2}");
    }

    #[test]
    fn closed_form_perturbation_identity(
        w0 in -3.0..3.0f64, w1 in -3.0..3.0f64, w2 in -3.0..3.0f64,
        x0 in -4.0..4.0f64, x1 in -4.0..4.0f64, x2 in -4.0..4.0f64,
        margin in 0.0..1.0f64,
    ) {
        prop_assume!(w0.abs() + w1.abs() + w2.abs() > 1e-3);
        let f = linear(&[w0, w1, w2], 0.1);
        let x = vec![x0, x1, x2];
        let target = 1 - f.predict(&x);
        let cfg = ExplainerConfig { margin, ..ExplainerConfig::default() };
        if let Explanation::Found(cf) = explain(&f, &sample(x.clone(), 1 - target), target, &cfg).unwrap() {
            prop_assert!(is_valid(&f, &cf.features, target, margin));
            for ((d, v), x0) in cf.perturbation.iter().zip(&cf.features).zip(&x) {
                prop_assert_eq!(*d, v - x0);
            }
        }
    }
}
