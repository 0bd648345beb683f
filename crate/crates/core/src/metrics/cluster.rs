use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Embeddings with one class index per row.
#[derive(Clone, Debug)]
pub struct LabeledEmbeddingSet<T> {
    pub embeddings: Matrix<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<T: Scalar> LabeledEmbeddingSet<T> {
    pub fn new(embeddings: Matrix<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != embeddings.rows() {
            return Err(Error::Data(format!(
                "{} labels for {} embeddings",
                labels.len(),
                embeddings.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            embeddings,
            labels,
            num_classes,
        })
    }

    /// Per-class centroids; errors if any class is empty.
    pub fn centroids(&self) -> Result<Matrix<T>> {
        let d = self.embeddings.cols();
        let mut sums = Matrix::zeros(self.num_classes, d);
        let mut counts = vec![0usize; self.num_classes];
        for (row, &c) in self.embeddings.iter_rows().zip(&self.labels) {
            for (s, &v) in sums.row_mut(c).iter_mut().zip(row) {
                *s += v;
            }
            counts[c] += 1;
        }
        if let Some(empty) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Data(format!("class {empty} has no members")));
        }
        for (c, &n) in counts.iter().enumerate() {
            let n = T::from_count(n);
            sums.row_mut(c).iter_mut().for_each(|v| *v /= n);
        }
        Ok(sums)
    }

    /// Mean Euclidean distance of each class's members to its centroid.
    fn scatter(&self, centroids: &Matrix<T>) -> Vec<T> {
        let mut total = vec![T::zero(); self.num_classes];
        let mut counts = vec![0usize; self.num_classes];
        for (row, &c) in self.embeddings.iter_rows().zip(&self.labels) {
            total[c] += euclidean(row, centroids.row(c));
            counts[c] += 1;
        }
        total
            .into_iter()
            .zip(counts)
            .map(|(t, n)| t / T::from_count(n))
            .collect()
    }
}

fn euclidean<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvariantDistance<T> {
    pub per_class: Vec<T>,
    /// Unweighted mean over classes.
    pub mean: T,
}

/// Mean Euclidean distance to the class centroid, per class and averaged over
/// classes.
pub fn invariant_distance<T: Scalar>(set: &LabeledEmbeddingSet<T>) -> Result<InvariantDistance<T>> {
    let centroids = set.centroids()?;
    let per_class = set.scatter(&centroids);
    let mean = per_class.iter().copied().sum::<T>() / T::from_count(per_class.len().max(1));
    Ok(InvariantDistance { per_class, mean })
}

/// Davies-Bouldin index: mean over classes of the worst
/// `(s_c + s_d) / ‖μ_c − μ_d‖`.
pub fn davies_bouldin<T: Scalar>(set: &LabeledEmbeddingSet<T>) -> Result<T> {
    let k = set.num_classes;
    if k < 2 {
        return Err(Error::Data(format!("Davies-Bouldin needs at least 2 classes, got {k}")));
    }
    let centroids = set.centroids()?;
    let scatter = set.scatter(&centroids);
    let mut total = T::zero();
    for c in 0..k {
        let mut worst = T::neg_infinity();
        for d in 0..k {
            if d == c {
                continue;
            }
            let sep = euclidean(centroids.row(c), centroids.row(d));
            if sep == T::zero() {
                return Err(Error::Degenerate(format!(
                    "centroids of classes {} and {} coincide",
                    c.min(d),
                    c.max(d)
                )));
            }
            worst = worst.max((scatter[c] + scatter[d]) / sep);
        }
        total += worst;
    }
    Ok(total / T::from_count(k))
}

#[derive(Clone, Debug, Serialize)]
pub struct ClusterReport {
    pub centroids: Vec<Vec<f64>>,
    pub invariant_distance: Vec<f64>,
    pub mean_invariant_distance: f64,
    pub davies_bouldin: f64,
}

pub fn cluster_report<T: Scalar>(set: &LabeledEmbeddingSet<T>) -> Result<ClusterReport> {
    let centroids = set.centroids()?;
    let inv = invariant_distance(set)?;
    let db = davies_bouldin(set)?;
    Ok(ClusterReport {
        centroids: centroids
            .iter_rows()
            .map(|r| r.iter().map(|v| v.as_f64()).collect())
            .collect(),
        invariant_distance: inv.per_class.iter().map(|v| v.as_f64()).collect(),
        mean_invariant_distance: inv.mean.as_f64(),
        davies_bouldin: db.as_f64(),
    })
}
