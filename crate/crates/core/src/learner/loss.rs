//! Binary losses on the probability of class 1 and their gradients with
//! respect to the logit.

use serde::{Deserialize, Serialize};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before any log.
pub const PROB_CLAMP: f64 = 1e-12;

pub const DEFAULT_FOCAL_GAMMA: f64 = 2.0;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Probability assigned to the true class.
fn p_true(prob: f64, label: u8) -> f64 {
    if label == 1 {
        prob
    } else {
        1.0 - prob
    }
}

pub fn cross_entropy(prob: f64, label: u8) -> f64 {
    -clamp_prob(p_true(prob, label)).ln()
}

/// `-(1 - p_t)^gamma · ln(p_t)`, where `p_t` is the probability of the true class.
pub fn focal_loss(prob: f64, label: u8, gamma: f64) -> f64 {
    let pt = clamp_prob(p_true(prob, label));
    (1.0 - pt).powf(gamma) * -pt.ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Loss {
    Ce,
    Focal { gamma: f64 },
}

impl Loss {
    pub fn focal() -> Self {
        Loss::Focal {
            gamma: DEFAULT_FOCAL_GAMMA,
        }
    }

    pub fn value(&self, prob: f64, label: u8) -> f64 {
        match *self {
            Loss::Ce => cross_entropy(prob, label),
            Loss::Focal { gamma } => focal_loss(prob, label, gamma),
        }
    }

    pub fn value_at_logit(&self, logit: f64, label: u8) -> f64 {
        self.value(sigmoid(logit), label)
    }

    /// Derivative of the loss with respect to the logit.
    ///
    /// With `s = ±1` for label 1/0 and `p_t = σ(s·z)`:
    /// CE gives `σ(z) - y`; focal gives `s (1-p_t)^γ (γ p_t ln p_t - (1-p_t))`.
    pub fn grad_logit(&self, logit: f64, label: u8) -> f64 {
        let prob = sigmoid(logit);
        match *self {
            Loss::Ce => prob - f64::from(label),
            Loss::Focal { gamma } => {
                let s = if label == 1 { 1.0 } else { -1.0 };
                let pt = p_true(prob, label);
                let q = 1.0 - pt;
                let log_pt = clamp_prob(pt).ln();
                s * q.powf(gamma) * (gamma * pt * log_pt - q)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_values() {
        assert!(cross_entropy(1.0 - 1e-15, 1) < 1e-11);
        assert!((cross_entropy(0.5, 1) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((cross_entropy(0.5, 0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((cross_entropy(0.9, 0) - 2.302_585_092_994_045).abs() < 1e-12);
        assert!(cross_entropy(0.0, 1).is_finite());
    }

    #[test]
    fn focal_values() {
        assert!((focal_loss(0.5, 1, 2.0) - 0.25 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((focal_loss(0.5, 1, 2.0) - 0.173_287).abs() < 1e-6);
        assert!(focal_loss(1.0, 1, 0.5) < 1e-11);
        assert!(focal_loss(1.0, 1, 5.0) < 1e-11);
        for &(p, y) in &[(0.1, 0u8), (0.3, 1), (0.99, 0)] {
            assert_eq!(focal_loss(p, y, 0.0), cross_entropy(p, y));
        }
    }

    #[test]
    fn logit_gradients_match_central_differences() {
        let h = 1e-6;
        for loss in [Loss::Ce, Loss::Focal { gamma: 2.0 }, Loss::Focal { gamma: 0.5 }] {
            for &z in &[-4.0, -0.7, 0.0, 0.3, 2.5] {
                for y in [0u8, 1] {
                    let fd = (loss.value_at_logit(z + h, y) - loss.value_at_logit(z - h, y)) / (2.0 * h);
                    let an = loss.grad_logit(z, y);
                    assert!((fd - an).abs() < 1e-7, "{loss:?} z={z} y={y}: {fd} vs {an}");
                }
            }
        }
    }
}
