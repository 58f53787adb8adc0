use log::debug;
use serde::{Deserialize, Serialize};

use super::batches::{balanced_batches, shuffled_batches};
use super::loss::Loss;
use super::model::{Classifier, EpochLog, ModelConfig, Network};
use crate::rng::derive_seed_indexed;
use crate::synthdata::{LabeledDataset, Sample};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: Loss,
    pub l2_lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub balanced_batches: bool,
    pub max_epochs: usize,
    /// Extra epochs tolerated without a validation improvement; training
    /// stops at the first non-improving epoch beyond that.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: Loss::Ce,
            l2_lambda: 1e-3,
            learning_rate: 0.1,
            batch_size: 32,
            balanced_batches: false,
            max_epochs: 100,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |r: &str| Err(Error::invalid("train config", r));
        if !(self.l2_lambda.is_finite() && self.l2_lambda >= 0.0) {
            return bad("l2_lambda must be finite and non-negative");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 || (self.balanced_batches && self.batch_size < 2) {
            return bad("batch_size must be positive, and at least 2 with balanced batches");
        }
        if self.patience > self.max_epochs {
            return bad("patience cannot exceed max_epochs");
        }
        if let Loss::Focal { gamma } = self.loss {
            if !(gamma.is_finite() && gamma >= 0.0) {
                return bad("focal gamma must be finite and non-negative");
            }
        }
        Ok(())
    }

    /// Fine-tuning defaults: same recipe at a tenth of the learning rate.
    pub fn for_finetune(&self) -> Self {
        Self {
            learning_rate: self.learning_rate * 0.1,
            ..self.clone()
        }
    }
}

/// Mean loss over `samples` plus `l2 · ‖params‖²`.
pub fn objective(config: &ModelConfig, params: &[f64], samples: &[&Sample], loss: Loss, l2: f64) -> f64 {
    let mut net = Network::new(config);
    let data = samples
        .iter()
        .map(|s| loss.value_at_logit(net.logit(params, &s.features), s.label))
        .sum::<f64>()
        / samples.len().max(1) as f64;
    data + l2 * params.iter().map(|p| p * p).sum::<f64>()
}

/// Analytic gradient of [`objective`]; also returns the mean data loss.
pub fn objective_gradient(
    config: &ModelConfig,
    params: &[f64],
    samples: &[&Sample],
    loss: Loss,
    l2: f64,
) -> (f64, Vec<f64>) {
    let mut net = Network::new(config);
    let mut grad = vec![0.0; params.len()];
    let mut total = 0.0;
    for s in samples {
        let z = net.accumulate(params, &s.features, |z| loss.grad_logit(z, s.label), &mut grad);
        total += loss.value_at_logit(z, s.label);
    }
    let m = samples.len().max(1) as f64;
    for (g, p) in grad.iter_mut().zip(params) {
        *g = *g / m + 2.0 * l2 * p;
    }
    (total / m, grad)
}

pub fn mean_loss(classifier: &Classifier, data: &LabeledDataset, loss: Loss) -> f64 {
    let refs: Vec<&Sample> = data.samples.iter().collect();
    objective(&classifier.config, &classifier.parameters, &refs, loss, 0.0)
}

/// Trains a fresh classifier from `model`'s initialization.
pub fn train(
    model: &ModelConfig,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<Classifier> {
    fit(Classifier::new(model.clone())?, train, val, cfg)
}

/// Continues optimization from `classifier`'s parameters.
pub fn finetune(
    classifier: &Classifier,
    data: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<Classifier> {
    fit(classifier.clone(), data, val, cfg)
}

fn fit(mut model: Classifier, data: &LabeledDataset, val: &LabeledDataset, cfg: &TrainConfig) -> Result<Classifier> {
    cfg.validate()?;
    for (name, d) in [("training", data), ("validation", val)] {
        if !d.is_empty() && d.dim() != model.input_dim() {
            return Err(Error::Precondition(format!(
                "{name} data has dim {}, model expects {}",
                d.dim(),
                model.input_dim()
            )));
        }
    }
    if data.is_empty() {
        return Err(Error::Precondition("training data is empty".into()));
    }
    let early_stopping = cfg.patience < cfg.max_epochs;
    if early_stopping && val.is_empty() {
        return Err(Error::Precondition(
            "early stopping needs a nonempty validation set".into(),
        ));
    }

    let config = model.config.clone();
    let mut params = std::mem::take(&mut model.parameters);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut stale = 0usize;
    let mut net = Network::new(&config);
    let mut grad = vec![0.0; params.len()];

    for epoch in 1..=cfg.max_epochs {
        let seed = derive_seed_indexed(cfg.seed, "learner/batches", epoch as u64);
        let batches = if cfg.balanced_batches {
            balanced_batches(data, cfg.batch_size, seed)?
        } else {
            shuffled_batches(data.len(), cfg.batch_size, seed)
        };

        let mut epoch_loss = 0.0;
        for batch in &batches {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = &data.samples[i];
                let z = net.accumulate(&params, &s.features, |z| cfg.loss.grad_logit(z, s.label), &mut grad);
                batch_loss += cfg.loss.value_at_logit(z, s.label);
            }
            let m = batch.len() as f64;
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * (g / m + 2.0 * cfg.l2_lambda * *p);
            }
            epoch_loss += batch_loss / m;
        }
        let train_loss = epoch_loss / batches.len() as f64;
        if !train_loss.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                loss: train_loss,
            });
        }

        let val_loss = (!val.is_empty()).then(|| {
            let refs: Vec<&Sample> = val.samples.iter().collect();
            objective(&config, &params, &refs, cfg.loss, 0.0)
        });
        model.training_log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:?}");

        let Some(val_loss) = val_loss.filter(|_| early_stopping) else {
            continue;
        };
        match &best {
            Some((b, _)) if val_loss >= *b => {
                stale += 1;
                if stale > cfg.patience {
                    break;
                }
            }
            _ => {
                best = Some((val_loss, params.clone()));
                stale = 0;
            }
        }
    }

    model.parameters = match best {
        Some((_, p)) => p,
        None => params,
    };
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, split, DatasetSpec, FeatureMode, SplitFractions};

    fn separable() -> (LabeledDataset, LabeledDataset) {
        let spec = DatasetSpec {
            n: 200,
            k: 1,
            dim: 2,
            causal_index: 0,
            spurious_indices: vec![1],
            prevalence_pos: 0.5,
            prevalence_neg: 0.5,
            noise_std: 0.3,
            feature_mode: FeatureMode::Continuous,
            seed: 4,
        };
        let d = generate(&spec).unwrap();
        let s = split(&d, SplitFractions::new(0.8, 0.2, 0.0), 1, true).unwrap();
        (s.train, s.val)
    }

    #[test]
    fn separable_data_is_learned() {
        let (tr, va) = separable();
        let cfg = TrainConfig {
            max_epochs: 200,
            patience: 200,
            l2_lambda: 0.0,
            ..TrainConfig::default()
        };
        let c = train(&ModelConfig::linear(2, 0), &tr, &va, &cfg).unwrap();
        let correct = tr.samples.iter().filter(|s| c.predict(&s.features) == s.label).count();
        assert!(correct as f64 / tr.len() as f64 >= 0.99);
        // The separating direction is +x0; the learned weight must agree.
        let (w, _) = c.linear_weights().unwrap();
        assert!(w[0] > 0.0 && w[0].abs() > w[1].abs());
    }

    #[test]
    fn patience_zero_stops_at_first_non_improvement() {
        let (tr, va) = separable();
        let cfg = TrainConfig {
            max_epochs: 100,
            patience: 0,
            learning_rate: 2.0,
            ..TrainConfig::default()
        };
        let c = train(&ModelConfig::linear(2, 0), &tr, &va, &cfg).unwrap();
        let log = &c.training_log;
        let (last, before) = log.split_last().unwrap();
        assert!(before.windows(2).all(|w| w[1].val_loss < w[0].val_loss));
        if log.len() < 100 {
            let best = before.iter().filter_map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
            assert!(last.val_loss.unwrap() >= best);
        }
    }

    #[test]
    fn returns_argmin_validation_epoch() {
        let (tr, va) = separable();
        let cfg = TrainConfig {
            max_epochs: 40,
            patience: 3,
            learning_rate: 3.0,
            ..TrainConfig::default()
        };
        let c = train(&ModelConfig::mlp(2, vec![6], 1), &tr, &va, &cfg).unwrap();
        let best = c
            .training_log
            .iter()
            .filter_map(|e| e.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(mean_loss(&c, &va, cfg.loss), best);
    }

    #[test]
    fn training_is_deterministic() {
        let (tr, va) = separable();
        let cfg = TrainConfig {
            balanced_batches: true,
            ..TrainConfig::default()
        };
        let a = train(&ModelConfig::mlp(2, vec![4], 3), &tr, &va, &cfg).unwrap();
        let b = train(&ModelConfig::mlp(2, vec![4], 3), &tr, &va, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_learning_rate_finetune_is_identity() {
        let (tr, va) = separable();
        let c = train(&ModelConfig::linear(2, 0), &tr, &va, &TrainConfig::default()).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let f = finetune(&c, &tr, &va, &cfg).unwrap();
        assert_eq!(f.parameters, c.parameters);
    }

    #[test]
    fn divergence_is_reported() {
        let (tr, va) = separable();
        let cfg = TrainConfig {
            learning_rate: 1e300,
            l2_lambda: 1.0,
            ..TrainConfig::default()
        };
        let err = train(&ModelConfig::mlp(2, vec![4], 0), &tr, &va, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn rejects_mismatched_dims_and_missing_validation() {
        let (tr, va) = separable();
        assert!(train(&ModelConfig::linear(3, 0), &tr, &va, &TrainConfig::default()).is_err());
        let empty = LabeledDataset::from_samples(va.spec.clone(), vec![]).unwrap();
        assert!(train(&ModelConfig::linear(2, 0), &tr, &empty, &TrainConfig::default()).is_err());
        let no_es = TrainConfig {
            patience: 100,
            ..TrainConfig::default()
        };
        assert!(train(&ModelConfig::linear(2, 0), &tr, &empty, &no_es).is_ok());
    }
}
