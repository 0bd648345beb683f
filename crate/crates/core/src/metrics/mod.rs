//! Task metrics, cluster geometry and 2-D projections.

mod cluster;
mod pca;
mod tsne;

pub use cluster::{
    cluster_report, davies_bouldin, invariant_distance, ClusterReport, InvariantDistance, LabeledEmbeddingSet,
};
pub use pca::{pca_fit, pca_project, Pca};
pub use tsne::{tsne_kl_divergence, tsne_project, tsne_run, TsneOptions, TsneOutput, MAX_TSNE_POINTS};

use crate::error::{Error, Result};

/// Midpoints (in years) for the decade age buckets.
pub const DEFAULT_AGE_MIDPOINTS: [(&str, f64); 5] = [
    ("twenties", 25.0),
    ("thirties", 35.0),
    ("forties", 45.0),
    ("fifties", 55.0),
    ("sixties", 65.0),
];

/// Fraction of exact matches.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Data("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean absolute difference between the midpoints of predicted and true classes.
pub fn age_mae(predictions: &[usize], labels: &[usize], midpoints: &[Option<f64>]) -> Result<f64> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::Data(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mid = |c: usize| {
        midpoints
            .get(c)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Config(format!("no age midpoint defined for class {c}")))
    };
    let mut total = 0.0;
    for (&p, &l) in predictions.iter().zip(labels) {
        total += (mid(p)? - mid(l)?).abs();
    }
    Ok(total / labels.len() as f64)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
