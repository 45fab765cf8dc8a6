//! Value-cluster conditioned learning for subjective labels.
//!
//! Annotations are grouped into value clusters (k-means over rationale
//! embeddings, an expert taxonomy, or sociocultural attribute cross-sections).
//! A small dense network is conditioned on the sum of learned cluster
//! embeddings and trained with cross-entropy plus a per-cluster KL term that
//! pulls each cluster's soft-thresholded mean prediction toward its observed
//! label rate. Binary, 3-class ordinal (CORAL) and pairwise preference
//! (Bradley–Terry) heads are supported.
//!
//! Modules follow the pipeline order:
//! [`corpus`] → [`clustering`] → [`model`] / [`loss`] → [`trainer`] → [`metrics`].
//! [`synthgen`] builds synthetic datasets with planted value clusters.

pub mod clustering;
pub mod corpus;
pub mod error;
pub mod featurize;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};

/// Smoothing applied to every probability that ends up inside a logarithm.
pub const PROB_EPS: f64 = 1e-6;

/// Logistic sigmoid, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
