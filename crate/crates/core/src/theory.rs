//! Closed-form underspecification probabilities for imbalanced data, with
//! Monte Carlo estimators to check them.
//!
//! Setting: `n` positives, `n·k` negatives, a causal binary feature aligned
//! with the label and a spurious binary feature drawn as a fair coin
//! independently of the label.
//!
//! * With few positives the spurious feature can match the label pattern on
//!   every positive by chance. The probability is `2^(1-n)`: of the `2^n`
//!   assignments, two (the pattern and its inversion) are perfectly
//!   predictive.
//! * The negatives estimate the spurious feature's prevalence as
//!   `p_s ~ Bin(nk, 1/2) / nk`, which concentrates around 1/2 with standard
//!   deviation `sqrt(1 / (4nk))`.
//!
//! The simulators split trials into a fixed number of partitions, each with
//! its own derived seed, and reduce partition results in partition order. The
//! output is therefore identical however many threads run the partitions.

use rand::RngCore;
use rayon::prelude::*;
use serde::Serialize;

use crate::rng::{derive_seed_indexed, rng_from_seed};
use crate::{Error, Result};

/// Number of independent partitions used by the simulators.
const PARTITIONS: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ImbalanceSpec {
    n: usize,
    k: usize,
}

impl ImbalanceSpec {
    pub fn new(n: usize, k: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("imbalance spec", "n must be at least 1"));
        }
        if k == 0 {
            return Err(Error::invalid("imbalance spec", "k must be at least 1"));
        }
        if n.checked_mul(k).and_then(|nk| nk.checked_add(n)).is_none() {
            return Err(Error::invalid("imbalance spec", "n·(1+k) overflows"));
        }
        Ok(Self { n, k })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn negatives(&self) -> usize {
        self.n * self.k
    }

    pub fn total(&self) -> usize {
        self.n * (1 + self.k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrevalenceStats {
    pub mean: f64,
    pub std_dev: f64,
    pub sample_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlignmentEstimate {
    pub n: usize,
    pub trials: u64,
    pub aligned: u64,
    pub estimate: f64,
    /// Binomial standard error of the estimate around the closed form.
    pub std_error: f64,
}

/// Probability that a fair binary feature is perfectly predictive
/// (aligned or anti-aligned) on all `n` positives: `2^(1-n)`.
pub fn spurious_alignment_probability(n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid(
            "positive count",
            "alignment probability is undefined for an empty positive class",
        ));
    }
    // Exponents below -1074 underflow to zero, which is the correct limit.
    let exponent = 1i64 - n as i64;
    Ok(2f64.powi(exponent.max(-1100) as i32))
}

/// Distribution of the empirical spurious prevalence among the `n·k`
/// negatives.
pub fn negative_prevalence_stats(spec: ImbalanceSpec) -> PrevalenceStats {
    let m = spec.negatives();
    PrevalenceStats {
        mean: 0.5,
        std_dev: (0.25 / m as f64).sqrt(),
        sample_count: m,
    }
}

fn partition_sizes(trials: u64) -> impl IndexedParallelIterator<Item = (u64, u64)> {
    let base = trials / PARTITIONS;
    let extra = trials % PARTITIONS;
    (0..PARTITIONS as usize)
        .into_par_iter()
        .map(move |i| (i as u64, base + u64::from((i as u64) < extra)))
}

/// Draws `bits` fair coins and reports how many came up 1.
fn count_ones(rng: &mut impl RngCore, bits: usize) -> usize {
    let mut remaining = bits;
    let mut ones = 0usize;
    while remaining > 0 {
        let word = rng.next_u64();
        let take = remaining.min(64);
        let masked = if take == 64 { word } else { word & ((1u64 << take) - 1) };
        ones += masked.count_ones() as usize;
        remaining -= take;
    }
    ones
}

/// Monte Carlo estimate of [`spurious_alignment_probability`].
///
/// Each trial draws the spurious feature for the `n` positives; the trial
/// counts as aligned when the draws all equal the label (1) or all equal its
/// inversion (0).
pub fn simulate_alignment(n: usize, trials: u64, seed: u64) -> Result<AlignmentEstimate> {
    let analytic = spurious_alignment_probability(n)?;
    if trials == 0 {
        return Err(Error::invalid("trial count", "at least one trial is required"));
    }
    let counts: Vec<u64> = partition_sizes(trials)
        .map(|(part, size)| {
            let mut rng = rng_from_seed(derive_seed_indexed(seed, "theory/alignment", part));
            (0..size)
                .filter(|_| {
                    let ones = count_ones(&mut rng, n);
                    ones == 0 || ones == n
                })
                .count() as u64
        })
        .collect();
    let aligned: u64 = counts.iter().sum();
    Ok(AlignmentEstimate {
        n,
        trials,
        aligned,
        estimate: aligned as f64 / trials as f64,
        std_error: (analytic * (1.0 - analytic) / trials as f64).sqrt(),
    })
}

/// Monte Carlo mean and sample standard deviation of the empirical negative
/// prevalence `p_s`.
pub fn simulate_prevalence(spec: ImbalanceSpec, trials: u64, seed: u64) -> Result<PrevalenceStats> {
    if trials < 2 {
        return Err(Error::invalid(
            "trial count",
            "at least two trials are required for a standard deviation",
        ));
    }
    let m = spec.negatives();
    let parts: Vec<Vec<f64>> = partition_sizes(trials)
        .map(|(part, size)| {
            let mut rng = rng_from_seed(derive_seed_indexed(seed, "theory/prevalence", part));
            (0..size).map(|_| count_ones(&mut rng, m) as f64 / m as f64).collect()
        })
        .collect();

    let t = trials as f64;
    let mean = parts.iter().flatten().sum::<f64>() / t;
    let var = parts.iter().flatten().map(|p| (p - mean).powi(2)).sum::<f64>() / (t - 1.0);
    Ok(PrevalenceStats {
        mean,
        std_dev: var.sqrt(),
        sample_count: m,
    })
}
