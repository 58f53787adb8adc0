use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{sigmoid, PROB_CLAMP};
use crate::rng::{derive_seed, rng_from_seed};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    /// Fully connected ReLU network with the given hidden widths.
    Mlp {
        hidden: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn linear(input_dim: usize, init_seed: u64) -> Self {
        Self {
            architecture: Architecture::Linear,
            input_dim,
            init_seed,
        }
    }

    pub fn mlp(input_dim: usize, hidden: Vec<usize>, init_seed: u64) -> Self {
        Self {
            architecture: Architecture::Mlp { hidden },
            input_dim,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("model config", "input_dim must be positive"));
        }
        if let Architecture::Mlp { hidden } = &self.architecture {
            if hidden.contains(&0) {
                return Err(Error::invalid("model config", "hidden layer widths must be positive"));
            }
        }
        Ok(())
    }

    /// Layer widths from input to the single output logit.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        if let Architecture::Mlp { hidden } = &self.architecture {
            w.extend_from_slice(hidden);
        }
        w.push(1);
        w
    }

    pub fn parameter_count(&self) -> usize {
        self.widths().windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_parameters(&self) -> Vec<f64> {
        let mut rng = rng_from_seed(derive_seed(self.init_seed, "learner/init"));
        let mut params = Vec::with_capacity(self.parameter_count());
        for w in self.widths().windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-a..=a)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        params
    }
}

/// Forward/backward evaluation over a flat parameter vector.
///
/// Layer `l` stores its `out × in` weight matrix row-major followed by its
/// `out` biases. Hidden layers apply ReLU; the last layer emits the logit.
pub struct Network {
    widths: Vec<usize>,
    offsets: Vec<usize>,
    // Post-activation values per layer; acts[0] is the input.
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Network {
    pub fn new(config: &ModelConfig) -> Self {
        let widths = config.widths();
        let acts = widths.iter().map(|&w| vec![0.0; w]).collect();
        let deltas = widths.iter().map(|&w| vec![0.0; w]).collect();
        let offsets = widths
            .windows(2)
            .scan(0, |acc, w| {
                let o = *acc;
                *acc += w[1] * (w[0] + 1);
                Some(o)
            })
            .collect();
        Self {
            widths,
            offsets,
            acts,
            deltas,
        }
    }

    pub fn logit(&mut self, params: &[f64], x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.widths[0]);
        self.acts[0].copy_from_slice(x);
        let layers = self.widths.len() - 1;
        let mut offset = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let (w, rest) = params[offset..].split_at(n_in * n_out);
            let b = &rest[..n_out];
            let (before, after) = self.acts.split_at_mut(l + 1);
            let input = &before[l];
            for (o, out) in after[0].iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                let z = row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>() + b[o];
                *out = if l + 1 < layers { z.max(0.0) } else { z };
            }
            offset += n_out * (n_in + 1);
        }
        self.acts[layers][0]
    }

    /// Backpropagates `dlogit` through the last forward pass, adding
    /// `dlogit · ∂logit/∂params` into `grad`. Leaves `dlogit · ∂logit/∂input`
    /// in `deltas[0]`.
    fn backward(&mut self, params: &[f64], dlogit: f64, mut grad: Option<&mut [f64]>) {
        let layers = self.widths.len() - 1;
        self.deltas[layers][0] = dlogit;
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let off = self.offsets[l];
            let w = &params[off..off + n_in * n_out];
            let (lower, upper) = self.deltas.split_at_mut(l + 1);
            let delta_out = &upper[0];
            if let Some(g) = grad.as_deref_mut() {
                let input = &self.acts[l];
                for o in 0..n_out {
                    let d = delta_out[o];
                    if d == 0.0 {
                        continue;
                    }
                    let gw = &mut g[off + o * n_in..off + (o + 1) * n_in];
                    for (gi, xi) in gw.iter_mut().zip(input) {
                        *gi += d * xi;
                    }
                    g[off + n_in * n_out + o] += d;
                }
            }
            let delta_in = &mut lower[l];
            delta_in.iter_mut().for_each(|v| *v = 0.0);
            for o in 0..n_out {
                let d = delta_out[o];
                if d == 0.0 {
                    continue;
                }
                for (di, wi) in delta_in.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *di += d * wi;
                }
            }
            if l > 0 {
                // ReLU derivative at the hidden layer's output.
                for (di, a) in delta_in.iter_mut().zip(&self.acts[l]) {
                    if *a <= 0.0 {
                        *di = 0.0;
                    }
                }
            }
        }
    }

    /// Forward pass, then adds `dloss/dlogit · ∂logit/∂params` into `grad`.
    /// `dloss` maps the logit to the loss derivative; returns the logit.
    pub fn accumulate(&mut self, params: &[f64], x: &[f64], dloss: impl FnOnce(f64) -> f64, grad: &mut [f64]) -> f64 {
        let z = self.logit(params, x);
        self.backward(params, dloss(z), Some(grad));
        z
    }

    /// Logit and its gradient with respect to the input.
    pub fn input_gradient(&mut self, params: &[f64], x: &[f64]) -> (f64, Vec<f64>) {
        let z = self.logit(params, x);
        self.backward(params, 1.0, None);
        (z, self.deltas[0].clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Absent when training ran without a validation set.
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub config: ModelConfig,
    pub parameters: Vec<f64>,
    pub training_log: Vec<EpochLog>,
}

impl Classifier {
    /// Freshly initialized, untrained classifier.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let parameters = config.init_parameters();
        Ok(Self {
            config,
            parameters,
            training_log: Vec::new(),
        })
    }

    pub fn from_parameters(config: ModelConfig, parameters: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if parameters.len() != config.parameter_count() {
            return Err(Error::invalid(
                "classifier",
                format!(
                    "expected {} parameters, got {}",
                    config.parameter_count(),
                    parameters.len()
                ),
            ));
        }
        Ok(Self {
            config,
            parameters,
            training_log: Vec::new(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn network(&self) -> Network {
        Network::new(&self.config)
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        self.network().logit(&self.parameters, x)
    }

    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x)).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    }

    /// Class 1 iff the probability is at least one half (logit ≥ 0).
    pub fn predict(&self, x: &[f64]) -> u8 {
        u8::from(self.logit(x) >= 0.0)
    }

    pub fn predict_with_threshold(&self, x: &[f64], threshold: f64) -> u8 {
        u8::from(self.predict_proba(x) >= threshold)
    }

    pub fn predict_many<'a>(&self, xs: impl IntoIterator<Item = &'a [f64]>) -> Vec<u8> {
        let mut net = self.network();
        xs.into_iter()
            .map(|x| u8::from(net.logit(&self.parameters, x) >= 0.0))
            .collect()
    }

    pub fn input_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
        self.network().input_gradient(&self.parameters, x)
    }

    /// Weights and bias of a linear classifier.
    pub fn linear_weights(&self) -> Option<(&[f64], f64)> {
        match self.config.architecture {
            Architecture::Linear => {
                let d = self.config.input_dim;
                Some((&self.parameters[..d], self.parameters[d]))
            }
            Architecture::Mlp { .. } => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts() {
        assert_eq!(ModelConfig::linear(5, 0).parameter_count(), 6);
        assert_eq!(ModelConfig::mlp(4, vec![8, 3], 0).parameter_count(), 8 * 5 + 3 * 9 + 4);
        let c = ModelConfig::mlp(4, vec![8, 3], 0);
        assert_eq!(c.init_parameters().len(), c.parameter_count());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let c = ModelConfig::mlp(6, vec![10], 3);
        assert_eq!(c.init_parameters(), c.init_parameters());
        assert_ne!(c.init_parameters(), ModelConfig::mlp(6, vec![10], 4).init_parameters());
        let a = (6.0f64 / 16.0).sqrt();
        assert!(c.init_parameters()[..60].iter().all(|w| w.abs() <= a));
    }

    #[test]
    fn linear_logit_is_affine() {
        let c = Classifier::from_parameters(ModelConfig::linear(2, 0), vec![1.5, -2.0, 0.25]).unwrap();
        assert_eq!(c.logit(&[2.0, 1.0]), 3.0 - 2.0 + 0.25);
        assert_eq!(c.predict(&[0.0, 0.0]), 1);
        assert_eq!(c.predict(&[0.0, 1.0]), 0);
        let (z, g) = c.input_gradient(&[0.3, 0.3]);
        assert!((z - (0.45 - 0.6 + 0.25)).abs() < 1e-15);
        assert_eq!(g, vec![1.5, -2.0]);
    }

    #[test]
    fn probabilities_stay_open() {
        let c = Classifier::from_parameters(ModelConfig::linear(1, 0), vec![1000.0, 0.0]).unwrap();
        let p = c.predict_proba(&[10.0]);
        assert!(p > 0.0 && p < 1.0);
        let p = c.predict_proba(&[-10.0]);
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn mlp_input_gradient_matches_finite_differences() {
        let c = Classifier::new(ModelConfig::mlp(3, vec![7, 5], 11)).unwrap();
        let x = [0.4, -0.9, 1.3];
        let (_, g) = c.input_gradient(&x);
        let h = 1e-6;
        for j in 0..3 {
            let mut hi = x;
            let mut lo = x;
            hi[j] += h;
            lo[j] -= h;
            let fd = (c.logit(&hi) - c.logit(&lo)) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-7);
        }
    }
}
