//! Counterfactual knowledge distillation (CFKD) for imbalanced binary
//! classification.
//!
//! The crate is a small laboratory: it generates imbalanced datasets with a
//! planted confounder, trains desk-scale classifiers with the usual
//! imbalance recipes (cross-entropy, balanced batching, focal loss), explains
//! them with counterfactuals, has a teacher label those counterfactuals, and
//! fine-tunes the classifier on the original data plus the annotated
//! counterfactuals. The [`theory`] module checks the closed-form
//! underspecification probabilities against Monte Carlo estimates.

pub mod cfkd;
pub mod error;
pub mod evalmetrics;
pub mod explainer;
pub mod harness;
pub mod learner;
pub mod rng;
pub mod synthdata;
pub mod teacher;
pub mod theory;

pub use error::{Error, Result};
