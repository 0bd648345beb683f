//! Exact (O(N²)) t-SNE.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const MAX_TSNE_POINTS: usize = 5000;
const PERPLEXITY_TOLERANCE: f64 = 1e-5;
const BISECTION_STEPS: usize = 200;
const MIN_PROB: f64 = 1e-12;
const MIN_GAIN: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct TsneOptions {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub exaggeration: f64,
    /// Iterations run with exaggerated affinities and initial momentum.
    pub exaggeration_iters: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// Record the KL divergence every this many iterations (and at the end).
    pub record_kl_every: Option<usize>,
}

impl Default for TsneOptions {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            seed: 0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            record_kl_every: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TsneOutput<T> {
    pub coords: Matrix<T>,
    /// `(iteration, KL(P‖Q))` pairs, iteration counted from 1.
    pub kl_history: Vec<(usize, f64)>,
}

fn squared_distances(x: &Matrix<f64>) -> Vec<f64> {
    let n = x.rows();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Conditional affinities `p_{j|i}` with each row's Gaussian precision found by
/// bisection on the entropy.
fn conditional_affinities(dist: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    let mut row = vec![0.0; n];
    for i in 0..n {
        let d = &dist[i * n..(i + 1) * n];
        let dmin = (0..n).filter(|&j| j != i).map(|j| d[j]).fold(f64::INFINITY, f64::min);
        let (mut beta, mut lo, mut hi) = (1.0, f64::NEG_INFINITY, f64::INFINITY);
        let mut converged = false;
        for _ in 0..BISECTION_STEPS {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                row[j] = if j == i { 0.0 } else { (-(d[j] - dmin) * beta).exp() };
                sum += row[j];
                weighted += (d[j] - dmin) * row[j];
            }
            let entropy = sum.ln() + beta * weighted / sum;
            let diff = entropy - target;
            if diff.abs() < PERPLEXITY_TOLERANCE {
                converged = true;
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
            }
        }
        if !converged {
            log::warn!("perplexity search for point {i} did not reach tolerance");
        }
        let sum: f64 = row.iter().sum();
        for j in 0..n {
            p[i * n + j] = row[j] / sum;
        }
    }
    p
}

fn joint_affinities(x: &Matrix<f64>, perplexity: f64) -> Vec<f64> {
    let n = x.rows();
    let cond = conditional_affinities(&squared_distances(x), n, perplexity);
    let mut p = vec![0.0; n * n];
    let denom = 2.0 * n as f64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / denom).max(MIN_PROB);
            }
        }
    }
    p
}

/// Student-t kernel values (zero diagonal) and their sum.
fn student_kernel(y: &Matrix<f64>) -> (Vec<f64>, f64) {
    let n = y.rows();
    let mut num = vec![0.0; n * n];
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = y.row(i).iter().zip(y.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            let v = 1.0 / (1.0 + d);
            num[i * n + j] = v;
            num[j * n + i] = v;
            total += 2.0 * v;
        }
    }
    (num, total)
}

fn kl_from(p: &[f64], num: &[f64], total: f64, n: usize) -> f64 {
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let pij = p[i * n + j];
                let qij = (num[i * n + j] / total).max(MIN_PROB);
                kl += pij * (pij / qij).ln();
            }
        }
    }
    kl
}

/// `KL(P‖Q)` of a 2-D layout against the input affinities at `perplexity`.
pub fn tsne_kl_divergence<T: Scalar>(x: &Matrix<T>, layout: &Matrix<T>, perplexity: f64) -> Result<f64> {
    if x.rows() != layout.rows() {
        return Err(Error::Dimension {
            op: "tsne_kl_divergence",
            left: x.shape(),
            right: layout.shape(),
        });
    }
    let p = joint_affinities(&x.cast(), perplexity);
    let (num, total) = student_kernel(&layout.cast());
    Ok(kl_from(&p, &num, total, x.rows()))
}

fn validate(n: usize, opts: &TsneOptions) -> Result<()> {
    if n > MAX_TSNE_POINTS {
        return Err(Error::Config(format!(
            "exact t-SNE is limited to {MAX_TSNE_POINTS} points, got {n}"
        )));
    }
    if !(opts.perplexity > 0.0) {
        return Err(Error::Config(format!(
            "perplexity must be > 0, got {}",
            opts.perplexity
        )));
    }
    if (n as f64) < 3.0 * opts.perplexity {
        return Err(Error::Config(format!(
            "perplexity {} is too large for {n} points (need N >= 3 * perplexity)",
            opts.perplexity
        )));
    }
    if !(opts.learning_rate > 0.0) {
        return Err(Error::Config("t-SNE learning rate must be > 0".into()));
    }
    Ok(())
}

/// Runs t-SNE and returns the layout plus the requested KL trace.
///
/// Computation is carried out in `f64` whatever `T` is.
pub fn tsne_run<T: Scalar>(x: &Matrix<T>, opts: &TsneOptions) -> Result<TsneOutput<T>> {
    let n = x.rows();
    validate(n, opts)?;
    let p = joint_affinities(&x.cast(), opts.perplexity);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y = Matrix::<f64>::from_fn(n, 2, |_, _| normal.sample(&mut rng));
    let mut update = Matrix::<f64>::zeros(n, 2);
    let mut gains = Matrix::<f64>::from_fn(n, 2, |_, _| 1.0);
    let mut grad = Matrix::<f64>::zeros(n, 2);
    let mut kl_history = Vec::new();

    for iter in 0..opts.iterations {
        let early = iter < opts.exaggeration_iters;
        let exaggeration = if early { opts.exaggeration } else { 1.0 };
        let momentum = if early {
            opts.initial_momentum
        } else {
            opts.final_momentum
        };
        let (num, total) = student_kernel(&y);

        for i in 0..n {
            let (mut g0, mut g1) = (0.0, 0.0);
            let yi = [y.get(i, 0), y.get(i, 1)];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let q = (w / total).max(MIN_PROB);
                let coeff = (exaggeration * p[i * n + j] - q) * w;
                g0 += coeff * (yi[0] - y.get(j, 0));
                g1 += coeff * (yi[1] - y.get(j, 1));
            }
            grad.set(i, 0, 4.0 * g0);
            grad.set(i, 1, 4.0 * g1);
        }

        for ((g, u), gain) in grad
            .as_slice()
            .iter()
            .zip(update.as_mut_slice())
            .zip(gains.as_mut_slice())
        {
            *gain = if (*g > 0.0) != (*u > 0.0) {
                *gain + 0.2
            } else {
                *gain * 0.8
            };
            *gain = gain.max(MIN_GAIN);
            *u = momentum * *u - opts.learning_rate * *gain * *g;
        }
        y.add_assign(&update)?;
        y = y.center_columns();

        let done = iter + 1;
        let record = opts
            .record_kl_every
            .is_some_and(|k| k > 0 && (done % k == 0 || done == opts.iterations));
        if record {
            let (num, total) = student_kernel(&y);
            kl_history.push((done, kl_from(&p, &num, total, n)));
        }
    }
    if !y.is_finite() {
        return Err(Error::Numeric("t-SNE diverged".into()));
    }
    Ok(TsneOutput {
        coords: y.cast(),
        kl_history,
    })
}

/// `N × 2` t-SNE layout.
pub fn tsne_project<T: Scalar>(x: &Matrix<T>, opts: &TsneOptions) -> Result<Matrix<T>> {
    Ok(tsne_run(x, opts)?.coords)
}
