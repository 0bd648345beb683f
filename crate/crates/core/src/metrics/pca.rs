use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul, matmul_tn, Matrix};

const MAX_ITERATIONS: usize = 1000;
const CONVERGENCE: f64 = 1e-14;
const RANK_TOLERANCE: f64 = 1e-12;

/// Top-2 principal axes of a data set.
#[derive(Clone, Debug)]
pub struct Pca<T> {
    pub mean: Vec<T>,
    /// `D × 2`, orthonormal columns.
    pub components: Matrix<T>,
    pub explained_variance: [T; 2],
    pub total_variance: T,
}

impl<T: Scalar> Pca<T> {
    pub fn explained_variance_ratio(&self) -> [T; 2] {
        self.explained_variance.map(|v| v / self.total_variance)
    }

    pub fn transform(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.mean.len() {
            return Err(Error::Dimension {
                op: "pca transform",
                left: x.shape(),
                right: (1, self.mean.len()),
            });
        }
        let centered = Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) - self.mean[j]);
        matmul(&centered, &self.components)
    }
}

/// Orthonormalises the two columns of `v` in place; returns false if they are
/// linearly dependent.
fn orthonormalize<T: Scalar>(v: &mut Matrix<T>) -> bool {
    let d = v.rows();
    let tiny = T::lit(1e-300);
    let n0 = (0..d).map(|i| v.get(i, 0) * v.get(i, 0)).sum::<T>().sqrt();
    if n0 <= tiny {
        return false;
    }
    for i in 0..d {
        v.set(i, 0, v.get(i, 0) / n0);
    }
    let dot = (0..d).map(|i| v.get(i, 0) * v.get(i, 1)).sum::<T>();
    for i in 0..d {
        v.set(i, 1, v.get(i, 1) - dot * v.get(i, 0));
    }
    let n1 = (0..d).map(|i| v.get(i, 1) * v.get(i, 1)).sum::<T>().sqrt();
    if n1 <= tiny {
        return false;
    }
    for i in 0..d {
        v.set(i, 1, v.get(i, 1) / n1);
    }
    true
}

/// Eigen-decomposition of a symmetric 2×2 matrix `[[a, b], [b, c]]`, largest first.
fn eig2<T: Scalar>(a: T, b: T, c: T) -> ([T; 2], [[T; 2]; 2]) {
    let half = T::lit(0.5);
    let mean = (a + c) * half;
    let diff = (a - c) * half;
    let r = (diff * diff + b * b).sqrt();
    let (l1, l2) = (mean + r, mean - r);
    // rotation angle of the leading eigenvector
    let theta = half * (b + b).atan2(a - c);
    let (s, co) = theta.sin_cos();
    ([l1, l2], [[co, s], [-s, co]])
}

/// Fits the top-2 principal components by subspace iteration on the covariance
/// matrix from a seeded start, followed by a 2×2 Rayleigh-Ritz step.
pub fn pca_fit<T: Scalar>(x: &Matrix<T>, seed: u64) -> Result<Pca<T>> {
    let (n, d) = x.shape();
    if n < 3 {
        return Err(Error::Data(format!("PCA needs at least 3 points, got {n}")));
    }
    if d < 2 {
        return Err(Error::Degenerate(format!("data of dimension {d} has rank < 2")));
    }
    let mean = x.column_means();
    let centered = x.center_columns();
    let cov = matmul_tn(&centered, &centered)?.scale(T::one() / T::from_count(n - 1));
    let total: T = (0..d).map(|i| cov.get(i, i)).sum();
    if !(total > T::zero()) {
        return Err(Error::Degenerate("all points coincide".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Matrix::from_fn(d, 2, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        T::lit(z)
    });
    if !orthonormalize(&mut v) {
        return Err(Error::Numeric("degenerate PCA start vectors".into()));
    }
    for _ in 0..MAX_ITERATIONS {
        let mut next = matmul(&cov, &v)?;
        if !orthonormalize(&mut next) {
            return Err(Error::Degenerate(format!(
                "centred data has rank < 2 (total variance {total})"
            )));
        }
        // subspace change measured through the projector, insensitive to rotation within it
        let overlap = matmul_tn(&v, &next)?;
        let captured: T = overlap.as_slice().iter().map(|&o| o * o).sum();
        v = next;
        if T::lit(2.0) - captured < T::lit(CONVERGENCE) {
            break;
        }
    }

    let cv = matmul(&cov, &v)?;
    let h = matmul_tn(&v, &cv)?;
    let ([l1, l2], rot) = eig2(h.get(0, 0), h.get(0, 1), h.get(1, 1));
    if l2 <= T::lit(RANK_TOLERANCE) * total {
        return Err(Error::Degenerate(format!(
            "centred data has rank < 2 (second variance {l2}, total {total})"
        )));
    }
    let mut components = Matrix::from_fn(d, 2, |i, k| v.get(i, 0) * rot[k][0] + v.get(i, 1) * rot[k][1]);
    for k in 0..2 {
        let col = components.column(k);
        let lead = crate::metrics::argmax(&col.iter().map(|c| c.abs()).collect::<Vec<_>>());
        if col[lead] < T::zero() {
            for i in 0..d {
                components.set(i, k, -components.get(i, k));
            }
        }
    }
    Ok(Pca {
        mean,
        components,
        explained_variance: [l1, l2],
        total_variance: total,
    })
}

/// `N × 2` coordinates on the top-2 principal axes.
pub fn pca_project<T: Scalar>(x: &Matrix<T>) -> Result<Matrix<T>> {
    pca_fit(x, 0)?.transform(x)
}
