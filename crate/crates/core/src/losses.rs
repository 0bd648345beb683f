//! Finetuning objectives and their analytic gradients.
//!
//! * [`triplet_loss`]: hinge on squared Euclidean distances, summed over the batch.
//! * [`barlow_twins_loss`]: drives the batch cross-correlation of anchor and
//!   positive embeddings towards the identity.
//! * [`combined_loss`]: triplet plus a `beta`-weighted Barlow Twins term.
//! * [`cross_entropy_loss`]: mean softmax cross-entropy for the adapter.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Matrix};

/// Guard added to every column norm of the cross-correlation denominator.
pub const NORM_EPSILON: f64 = 1e-12;

/// Default redundancy-reduction weight.
pub const DEFAULT_LAMBDA: f64 = 0.005;

/// Default Barlow Twins weight in the combined objective.
pub const DEFAULT_BETA: f64 = 0.01;

/// Stage-1 objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Triplet loss only.
    Contrastive,
    /// Barlow Twins only; negatives are not used.
    Noncontrastive,
    /// Triplet plus weighted Barlow Twins.
    Combined,
}

impl LossMode {
    pub fn uses_barlow(self) -> bool {
        !matches!(self, LossMode::Contrastive)
    }

    pub fn uses_negatives(self) -> bool {
        !matches!(self, LossMode::Noncontrastive)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Contrastive => "contrastive",
            LossMode::Noncontrastive => "noncontrastive",
            LossMode::Combined => "combined",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contrastive" => Ok(LossMode::Contrastive),
            "noncontrastive" => Ok(LossMode::Noncontrastive),
            "combined" => Ok(LossMode::Combined),
            other => Err(Error::Config(format!(
                "unknown loss mode '{other}' (expected contrastive, noncontrastive or combined)"
            ))),
        }
    }
}

/// The input a gradient belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Anchor,
    Positive,
    Negative,
    Logits,
}

/// Scalar loss plus one gradient per differentiated input.
#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub loss: T,
    pub grads: BTreeMap<Role, Matrix<T>>,
}

impl<T: Scalar> LossOutput<T> {
    pub fn grad(&self, role: Role) -> Option<&Matrix<T>> {
        self.grads.get(&role)
    }

    pub fn take(&mut self, role: Role) -> Option<Matrix<T>> {
        self.grads.remove(&role)
    }
}

/// Anchor, positive and negative embedding batches of identical shape.
#[derive(Clone, Copy, Debug)]
pub struct TripletBatch<'a, T> {
    pub anchor: &'a Matrix<T>,
    pub positive: &'a Matrix<T>,
    pub negative: &'a Matrix<T>,
}

impl<'a, T: Scalar> TripletBatch<'a, T> {
    pub fn new(anchor: &'a Matrix<T>, positive: &'a Matrix<T>, negative: &'a Matrix<T>) -> Result<Self> {
        for (other, op) in [(positive, "triplet positive"), (negative, "triplet negative")] {
            if other.shape() != anchor.shape() {
                return Err(Error::Dimension {
                    op,
                    left: anchor.shape(),
                    right: other.shape(),
                });
            }
        }
        if anchor.rows() == 0 {
            return Err(Error::BatchSize {
                op: "triplet_loss",
                got: 0,
                min: 1,
            });
        }
        Ok(Self {
            anchor,
            positive,
            negative,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TripletLossOutput<T> {
    pub loss: T,
    /// `‖a_b − p_b‖²` per row.
    pub d_pos: Vec<T>,
    /// `‖a_b − n_b‖²` per row.
    pub d_neg: Vec<T>,
    pub grad_anchor: Matrix<T>,
    pub grad_positive: Matrix<T>,
    pub grad_negative: Matrix<T>,
}

impl<T: Scalar> From<TripletLossOutput<T>> for LossOutput<T> {
    fn from(t: TripletLossOutput<T>) -> Self {
        let mut grads = BTreeMap::new();
        grads.insert(Role::Anchor, t.grad_anchor);
        grads.insert(Role::Positive, t.grad_positive);
        grads.insert(Role::Negative, t.grad_negative);
        LossOutput { loss: t.loss, grads }
    }
}

fn squared_distance<T: Scalar>(x: &[T], y: &[T]) -> T {
    x.iter().zip(y).map(|(&a, &b)| (a - b) * (a - b)).sum()
}

/// `Σ_b max(D_pos − D_neg + margin, 0)`.
///
/// A row whose hinge argument is exactly zero counts as active.
pub fn triplet_loss<T: Scalar>(input: &TripletBatch<'_, T>, margin: T) -> Result<TripletLossOutput<T>> {
    let input = TripletBatch::new(input.anchor, input.positive, input.negative)?;
    if !(margin >= T::zero()) {
        return Err(Error::Config(format!("triplet margin must be >= 0, got {margin}")));
    }
    let (rows, cols) = input.anchor.shape();
    let mut loss = T::zero();
    let mut d_pos = Vec::with_capacity(rows);
    let mut d_neg = Vec::with_capacity(rows);
    let mut grad_anchor = Matrix::zeros(rows, cols);
    let mut grad_positive = Matrix::zeros(rows, cols);
    let mut grad_negative = Matrix::zeros(rows, cols);
    let two = T::lit(2.0);

    for b in 0..rows {
        let a = input.anchor.row(b);
        let p = input.positive.row(b);
        let n = input.negative.row(b);
        let dp = squared_distance(a, p);
        let dn = squared_distance(a, n);
        d_pos.push(dp);
        d_neg.push(dn);
        let hinge = dp - dn + margin;
        if hinge < T::zero() {
            continue;
        }
        loss += hinge;
        let (ga, gp, gn) = (
            grad_anchor.row_mut(b),
            grad_positive.row_mut(b),
            grad_negative.row_mut(b),
        );
        for k in 0..cols {
            ga[k] = two * (n[k] - p[k]);
            gp[k] = two * (p[k] - a[k]);
            gn[k] = two * (a[k] - n[k]);
        }
    }
    Ok(TripletLossOutput {
        loss,
        d_pos,
        d_neg,
        grad_anchor,
        grad_positive,
        grad_negative,
    })
}

/// Batch-normalised cross-correlation between anchor dimension `i` (row) and
/// positive dimension `j` (column).
#[derive(Clone, Debug, PartialEq)]
pub struct CrossCorrelation<T>(pub Matrix<T>);

impl<T: Scalar> CrossCorrelation<T> {
    pub fn get(&self, i: usize, j: usize) -> T {
        self.0.get(i, j)
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.0
    }
}

/// Everything the Barlow Twins loss and its gradient need.
struct CorrelationParts<T> {
    anchor: Matrix<T>,
    positive: Matrix<T>,
    norm_a: Vec<T>,
    norm_p: Vec<T>,
    // guarded denominators; `None` for collapsed columns
    denom_a: Vec<Option<T>>,
    denom_p: Vec<Option<T>>,
    c: Matrix<T>,
}

fn column_norms<T: Scalar>(m: &Matrix<T>) -> Vec<T> {
    let mut sq = vec![T::zero(); m.cols()];
    for row in m.iter_rows() {
        for (s, &v) in sq.iter_mut().zip(row) {
            *s += v * v;
        }
    }
    sq.into_iter().map(|s| s.sqrt()).collect()
}

fn guarded<T: Scalar>(norms: &[T], which: &str) -> Vec<Option<T>> {
    let eps = T::lit(NORM_EPSILON);
    norms
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            if n < eps {
                log::warn!("{which} dimension {i} has collapsed (norm {n}); its correlations are zero");
                None
            } else {
                Some(n + eps)
            }
        })
        .collect()
}

fn correlation_parts<T: Scalar>(anchor: &Matrix<T>, positive: &Matrix<T>, center: bool) -> Result<CorrelationParts<T>> {
    if anchor.shape() != positive.shape() {
        return Err(Error::Dimension {
            op: "cross_correlation",
            left: anchor.shape(),
            right: positive.shape(),
        });
    }
    if anchor.rows() < 2 {
        return Err(Error::BatchSize {
            op: "cross_correlation",
            got: anchor.rows(),
            min: 2,
        });
    }
    let (anchor, positive) = if center {
        (anchor.center_columns(), positive.center_columns())
    } else {
        (anchor.clone(), positive.clone())
    };
    let norm_a = column_norms(&anchor);
    let norm_p = column_norms(&positive);
    let denom_a = guarded(&norm_a, "anchor");
    let denom_p = guarded(&norm_p, "positive");
    let mut c = matmul_tn(&anchor, &positive)?;
    for (i, da) in denom_a.iter().enumerate() {
        for (j, dp) in denom_p.iter().enumerate() {
            let v = match (da, dp) {
                (Some(x), Some(y)) => c.get(i, j) / (*x * *y),
                _ => T::zero(),
            };
            c.set(i, j, v);
        }
    }
    Ok(CorrelationParts {
        anchor,
        positive,
        norm_a,
        norm_p,
        denom_a,
        denom_p,
        c,
    })
}

/// `C(i, j) = ⟨a_i, p_j⟩ / (‖a_i‖ · ‖p_j‖)` over batch columns, uncentred.
pub fn cross_correlation<T: Scalar>(anchor: &Matrix<T>, positive: &Matrix<T>) -> Result<CrossCorrelation<T>> {
    cross_correlation_with(anchor, positive, false)
}

/// Like [`cross_correlation`]; with `center` each dimension is mean-centred
/// over the batch first.
pub fn cross_correlation_with<T: Scalar>(
    anchor: &Matrix<T>,
    positive: &Matrix<T>,
    center: bool,
) -> Result<CrossCorrelation<T>> {
    Ok(CrossCorrelation(correlation_parts(anchor, positive, center)?.c))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BarlowOptions<T> {
    /// Weight of the off-diagonal redundancy term.
    pub lambda: T,
    /// Mean-centre each dimension over the batch before correlating.
    pub center: bool,
}

impl<T: Scalar> Default for BarlowOptions<T> {
    fn default() -> Self {
        Self {
            lambda: T::lit(DEFAULT_LAMBDA),
            center: false,
        }
    }
}

/// `Σ_i (1 − C_ii)² + λ Σ_{i≠j} C_ij²`, with gradients through the normalisation.
pub fn barlow_twins_loss<T: Scalar>(
    anchor: &Matrix<T>,
    positive: &Matrix<T>,
    opts: &BarlowOptions<T>,
) -> Result<LossOutput<T>> {
    if !(opts.lambda >= T::zero()) {
        return Err(Error::Config(format!("lambda must be >= 0, got {}", opts.lambda)));
    }
    let parts = correlation_parts(anchor, positive, opts.center)?;
    let c = &parts.c;
    let d = c.rows();
    let two = T::lit(2.0);

    let mut loss = T::zero();
    // dL/dC, zero where C is pinned to 0 by a collapsed column
    let mut g = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let cij = c.get(i, j);
            if i == j {
                let r = T::one() - cij;
                loss += r * r;
                if parts.denom_a[i].is_some() && parts.denom_p[j].is_some() {
                    g.set(i, j, -two * r);
                }
            } else {
                loss += opts.lambda * cij * cij;
                g.set(i, j, two * opts.lambda * cij);
            }
        }
    }

    // H_ij = G_ij / (den_a_i · den_p_j)
    let h = Matrix::from_fn(d, d, |i, j| match (parts.denom_a[i], parts.denom_p[j]) {
        (Some(x), Some(y)) => g.get(i, j) / (x * y),
        _ => T::zero(),
    });
    let mut grad_a = matmul_nt(&parts.positive, &h)?;
    let mut grad_p = matmul(&parts.anchor, &h)?;

    let row_scale: Vec<T> = (0..d)
        .map(|i| match parts.denom_a[i] {
            Some(den) => {
                let gc: T = (0..d).map(|j| g.get(i, j) * c.get(i, j)).sum();
                gc / (parts.norm_a[i] * den)
            }
            None => T::zero(),
        })
        .collect();
    let col_scale: Vec<T> = (0..d)
        .map(|j| match parts.denom_p[j] {
            Some(den) => {
                let gc: T = (0..d).map(|i| g.get(i, j) * c.get(i, j)).sum();
                gc / (parts.norm_p[j] * den)
            }
            None => T::zero(),
        })
        .collect();
    for b in 0..grad_a.rows() {
        let arow = parts.anchor.row(b);
        for ((ga, &x), &s) in grad_a.row_mut(b).iter_mut().zip(arow).zip(&row_scale) {
            *ga -= x * s;
        }
        let prow = parts.positive.row(b);
        for ((gp, &y), &s) in grad_p.row_mut(b).iter_mut().zip(prow).zip(&col_scale) {
            *gp -= y * s;
        }
    }
    if opts.center {
        grad_a = grad_a.center_columns();
        grad_p = grad_p.center_columns();
    }

    let mut grads = BTreeMap::new();
    grads.insert(Role::Anchor, grad_a);
    grads.insert(Role::Positive, grad_p);
    Ok(LossOutput { loss, grads })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CombinedOptions<T> {
    pub margin: T,
    pub beta: T,
    pub barlow: BarlowOptions<T>,
}

impl<T: Scalar> Default for CombinedOptions<T> {
    fn default() -> Self {
        Self {
            margin: T::one(),
            beta: T::lit(DEFAULT_BETA),
            barlow: BarlowOptions::default(),
        }
    }
}

/// `L_triplet + β · L_bt(anchor, positive)`. The negative batch only receives
/// the triplet gradient.
pub fn combined_loss<T: Scalar>(input: &TripletBatch<'_, T>, opts: &CombinedOptions<T>) -> Result<LossOutput<T>> {
    if !(opts.beta >= T::zero()) {
        return Err(Error::Config(format!("beta must be >= 0, got {}", opts.beta)));
    }
    let mut out: LossOutput<T> = triplet_loss(input, opts.margin)?.into();
    let mut bt = barlow_twins_loss(input.anchor, input.positive, &opts.barlow)?;
    out.loss += opts.beta * bt.loss;
    for role in [Role::Anchor, Role::Positive] {
        let g = bt.take(role).expect("barlow grads present");
        out.grads
            .get_mut(&role)
            .expect("triplet grads present")
            .axpy(opts.beta, &g)?;
    }
    Ok(out)
}

/// Mean over the batch of `−log softmax(logits)[label]`.
pub fn cross_entropy_loss<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<LossOutput<T>> {
    let (rows, k) = logits.shape();
    if labels.len() != rows {
        return Err(Error::Dimension {
            op: "cross_entropy_loss",
            left: logits.shape(),
            right: (labels.len(), 1),
        });
    }
    if rows == 0 {
        return Err(Error::BatchSize {
            op: "cross_entropy_loss",
            got: 0,
            min: 1,
        });
    }
    if let Some((b, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(Error::Data(format!("label {l} at batch row {b} is outside [0, {k})")));
    }
    let inv_n = T::one() / T::from_count(rows);
    let mut loss = T::zero();
    let mut grad = Matrix::zeros(rows, k);
    for (b, &label) in labels.iter().enumerate() {
        let row = logits.row(b);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        let g = grad.row_mut(b);
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = (v - log_z).exp() * inv_n;
        }
        g[label] -= inv_n;
    }
    let mut grads = BTreeMap::new();
    grads.insert(Role::Logits, grad);
    Ok(LossOutput {
        loss: loss * inv_n,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type M = Matrix<f64>;

    /// Direct evaluation of the Barlow objective from per-column cosines.
    fn barlow_oracle(a: &M, p: &M, lambda: f64) -> f64 {
        let d = a.cols();
        let mut loss = 0.0;
        for i in 0..d {
            let ai = a.column(i);
            let na = ai.iter().map(|v| v * v).sum::<f64>().sqrt();
            for j in 0..d {
                let pj = p.column(j);
                let np = pj.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = ai.iter().zip(&pj).map(|(x, y)| x * y).sum();
                let c = dot / (na * np);
                if i == j {
                    loss += (1.0 - c).powi(2);
                } else {
                    loss += lambda * c * c;
                }
            }
        }
        loss
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> M {
        M::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn equal_triples_cost_margin_per_row() {
        let x = M::from_rows(&[[0.3, -1.0], [2.0, 5.0], [1.0, 1.0]]);
        let out = triplet_loss(&TripletBatch::new(&x, &x, &x).unwrap(), 1.0).unwrap();
        assert_eq!(out.loss, 3.0);
        assert_eq!(out.d_pos, vec![0.0; 3]);
    }

    #[test]
    fn triplet_inactive_hinge() {
        let a = M::from_rows(&[[0.0, 0.0]]);
        let p = M::from_rows(&[[1.0, 0.0]]);
        let n = M::from_rows(&[[0.0, 2.0]]);
        let out = triplet_loss(&TripletBatch::new(&a, &p, &n).unwrap(), 1.0).unwrap();
        assert_eq!((out.d_pos[0], out.d_neg[0], out.loss), (1.0, 4.0, 0.0));
        assert!(out.grad_anchor.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn triplet_active_hinge() {
        let a = M::from_rows(&[[0.0, 0.0]]);
        let p = M::from_rows(&[[2.0, 0.0]]);
        let n = M::from_rows(&[[1.0, 0.0]]);
        let out = triplet_loss(&TripletBatch::new(&a, &p, &n).unwrap(), 1.0).unwrap();
        assert_eq!((out.d_pos[0], out.d_neg[0], out.loss), (4.0, 1.0, 4.0));
    }

    #[test]
    fn triplet_boundary_takes_active_branch() {
        // D_pos = 1, D_neg = 2, m = 1 → hinge argument exactly 0
        let a = M::from_rows(&[[0.0, 0.0]]);
        let p = M::from_rows(&[[1.0, 0.0]]);
        let n = M::from_rows(&[[1.0, 1.0]]);
        let out = triplet_loss(&TripletBatch::new(&a, &p, &n).unwrap(), 1.0).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.grad_anchor.row(0), &[0.0, 2.0]);
    }

    #[test]
    fn triplet_errors() {
        let a = M::zeros(2, 2);
        let b = M::zeros(2, 3);
        assert!(matches!(TripletBatch::new(&a, &b, &a), Err(Error::Dimension { .. })));
        let t = TripletBatch::new(&a, &a, &a).unwrap();
        assert!(matches!(triplet_loss(&t, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn cross_correlation_fixtures() {
        let ones = M::from_rows(&[[1.0], [1.0]]);
        // ε in the denominator keeps this a hair below 1
        assert!((cross_correlation(&ones, &ones).unwrap().get(0, 0) - 1.0).abs() < 1e-11);
        let alt = M::from_rows(&[[1.0], [-1.0]]);
        assert_eq!(cross_correlation(&alt, &ones).unwrap().get(0, 0), 0.0);
        let x = M::from_rows(&[[1.0, 1.0], [1.0, -1.0]]);
        let c = cross_correlation(&x, &x).unwrap();
        assert!(c.matrix().max_abs_diff(&M::identity(2)) < 1e-11);
    }

    #[test]
    fn cross_correlation_needs_two_rows() {
        let x = M::from_rows(&[[1.0, 2.0]]);
        assert!(matches!(
            cross_correlation(&x, &x),
            Err(Error::BatchSize { got: 1, min: 2, .. })
        ));
    }

    #[test]
    fn collapsed_column_gives_zero_correlations() {
        let a = M::from_rows(&[[0.0, 1.0], [0.0, 2.0]]);
        let p = M::from_rows(&[[1.0, 1.0], [3.0, 2.0]]);
        let c = cross_correlation(&a, &p).unwrap();
        assert_eq!(c.get(0, 0), 0.0);
        assert_eq!(c.get(0, 1), 0.0);
        let out = barlow_twins_loss(
            &a,
            &p,
            &BarlowOptions {
                lambda: 0.1,
                center: false,
            },
        )
        .unwrap();
        assert!(out.loss.is_finite());
        assert!(out.grad(Role::Anchor).unwrap().is_finite());
    }

    #[test]
    fn barlow_identity_is_zero() {
        let x = M::from_rows(&[[1.0, 1.0], [1.0, -1.0]]);
        let out = barlow_twins_loss(
            &x,
            &x,
            &BarlowOptions {
                lambda: 0.005,
                center: false,
            },
        )
        .unwrap();
        assert!(out.loss.abs() < 1e-9);
    }

    #[test]
    fn barlow_all_ones_is_two_lambda() {
        let x = M::from_rows(&[[1.0, 1.0], [1.0, 1.0]]);
        for lambda in [0.0, 0.005, 0.3, 2.0] {
            let out = barlow_twins_loss(&x, &x, &BarlowOptions { lambda, center: false }).unwrap();
            assert!((out.loss - 2.0 * lambda).abs() < 1e-9, "lambda {lambda}");
        }
    }

    #[test]
    fn barlow_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = random(&mut rng, 6, 4);
            let p = random(&mut rng, 6, 4);
            let got = barlow_twins_loss(
                &a,
                &p,
                &BarlowOptions {
                    lambda: 0.2,
                    center: false,
                },
            )
            .unwrap();
            let want = barlow_oracle(&a, &p, 0.2);
            assert!((got.loss - want).abs() < 1e-9 * want.max(1.0));
        }
    }

    #[test]
    fn centering_matches_oracle_on_centred_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&mut rng, 7, 3);
        let p = random(&mut rng, 7, 3);
        let got = barlow_twins_loss(
            &a,
            &p,
            &BarlowOptions {
                lambda: 0.5,
                center: true,
            },
        )
        .unwrap();
        let want = barlow_oracle(&a.center_columns(), &p.center_columns(), 0.5);
        assert!((got.loss - want).abs() < 1e-9);
    }

    #[test]
    fn barlow_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for center in [false, true] {
            let a = random(&mut rng, 5, 3);
            let p = random(&mut rng, 5, 3);
            let opts = BarlowOptions { lambda: 0.3, center };
            let n = a.as_slice().len();
            let mut flat = a.as_slice().to_vec();
            flat.extend_from_slice(p.as_slice());
            let err = grad_check(
                |x: &[f64]| {
                    let a = M::new(5, 3, x[..n].to_vec())?;
                    let p = M::new(5, 3, x[n..].to_vec())?;
                    let out = barlow_twins_loss(&a, &p, &opts)?;
                    let mut g = out.grad(Role::Anchor).unwrap().as_slice().to_vec();
                    g.extend_from_slice(out.grad(Role::Positive).unwrap().as_slice());
                    Ok((out.loss, g))
                },
                &flat,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "center={center} err={err}");
        }
    }

    #[test]
    fn combined_defaults_to_paper_beta() {
        let opts = CombinedOptions::<f64>::default();
        assert_eq!(opts.beta, 0.01);
        assert_eq!(opts.margin, 1.0);
        assert_eq!(opts.barlow.lambda, 0.005);
        assert!(!opts.barlow.center);
    }

    #[test]
    fn combined_with_far_negatives_is_zero() {
        let a = M::from_rows(&[[1.0, 1.0], [1.0, -1.0]]);
        let n = a.map(|v| v + 10.0);
        let opts = CombinedOptions {
            margin: 1.0,
            beta: 0.01,
            barlow: BarlowOptions {
                lambda: 0.005,
                center: false,
            },
        };
        let out = combined_loss(&TripletBatch::new(&a, &a, &n).unwrap(), &opts).unwrap();
        assert!(out.loss.abs() < 1e-9);
    }

    #[test]
    fn combined_negative_gets_only_triplet_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, p, n) = (random(&mut rng, 4, 3), random(&mut rng, 4, 3), random(&mut rng, 4, 3));
        let batch = TripletBatch::new(&a, &p, &n).unwrap();
        let t = triplet_loss(&batch, 1.0).unwrap();
        let c = combined_loss(
            &batch,
            &CombinedOptions {
                beta: 0.7,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(c.grad(Role::Negative).unwrap(), &t.grad_negative);
    }

    #[test]
    fn cross_entropy_fixtures() {
        let uniform = M::zeros(3, 5);
        let out = cross_entropy_loss(&uniform, &[0, 3, 4]).unwrap();
        assert!((out.loss - 5f64.ln()).abs() < 1e-12);

        let saturated = M::from_rows(&[[1000.0, 0.0]]);
        assert!(cross_entropy_loss(&saturated, &[0]).unwrap().loss.abs() < 1e-12);

        let out = cross_entropy_loss(&M::from_rows(&[[1.0, 0.0]]), &[0]).unwrap();
        assert!((out.loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((out.loss - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let err = cross_entropy_loss(&M::zeros(2, 3), &[0, 3]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn cross_entropy_grad_rows_sum_to_zero() {
        let logits = M::from_rows(&[[0.2, -1.0, 3.0], [1.0, 1.0, 1.0]]);
        let out = cross_entropy_loss(&logits, &[2, 0]).unwrap();
        for row in out.grad(Role::Logits).unwrap().iter_rows() {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
    }

    fn batch(b: usize, d: usize) -> impl Strategy<Value = M> {
        proptest::collection::vec(-3.0f64..3.0, b * d).prop_map(move |v| M::new(b, d, v).unwrap())
    }

    proptest! {
        #[test]
        fn triplet_is_translation_invariant(
            (a, p, n, shift) in (1usize..5, 1usize..5).prop_flat_map(|(b, d)|
                (batch(b, d), batch(b, d), batch(b, d), proptest::collection::vec(-10.0f64..10.0, d))),
            margin in 0.0f64..2.0,
        ) {
            let t = |m: &M| M::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) + shift[j]);
            let base = triplet_loss(&TripletBatch::new(&a, &p, &n).unwrap(), margin).unwrap().loss;
            let (a2, p2, n2) = (t(&a), t(&p), t(&n));
            let moved = triplet_loss(&TripletBatch::new(&a2, &p2, &n2).unwrap(), margin).unwrap().loss;
            prop_assert!((base - moved).abs() <= 1e-9 * base.abs().max(1.0));
        }

        #[test]
        fn triplet_zero_iff_all_satisfied(
            (a, p, n) in (1usize..5, 1usize..4).prop_flat_map(|(b, d)| (batch(b, d), batch(b, d), batch(b, d))),
            margin in 0.0f64..2.0,
        ) {
            let out = triplet_loss(&TripletBatch::new(&a, &p, &n).unwrap(), margin).unwrap();
            let satisfied = out.d_pos.iter().zip(&out.d_neg).all(|(dp, dn)| *dn > dp + margin);
            let boundary = out.d_pos.iter().zip(&out.d_neg).any(|(dp, dn)| *dn == dp + margin);
            prop_assert!(out.d_pos.iter().chain(&out.d_neg).all(|&v| v >= 0.0));
            if !boundary {
                prop_assert_eq!(out.loss == 0.0, satisfied);
            }
        }

        #[test]
        fn correlation_is_bounded((a, p) in (2usize..6, 1usize..5).prop_flat_map(|(b, d)| (batch(b, d), batch(b, d)))) {
            let c = cross_correlation(&a, &p).unwrap();
            prop_assert!(c.matrix().as_slice().iter().all(|v| v.abs() <= 1.0 + 1e-9));
            let s = cross_correlation(&a, &a).unwrap();
            for i in 0..a.cols() {
                if a.column(i).iter().any(|&v| v != 0.0) {
                    prop_assert!((s.get(i, i) - 1.0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn column_scaling_preserves_or_flips_row(
            (a, p) in (2usize..6, 2usize..5).prop_flat_map(|(b, d)| (batch(b, d), batch(b, d))),
            alpha in prop_oneof![0.1f64..10.0, -10.0f64..-0.1],
        ) {
            let base = cross_correlation(&a, &p).unwrap();
            let scaled = M::from_fn(a.rows(), a.cols(), |i, j| if j == 0 { a.get(i, j) * alpha } else { a.get(i, j) });
            let c = cross_correlation(&scaled, &p).unwrap();
            for j in 0..p.cols() {
                prop_assert!((c.get(0, j) - alpha.signum() * base.get(0, j)).abs() < 1e-9);
            }
        }

        #[test]
        fn barlow_nonnegative_and_permutation_invariant(
            (a, p) in (2usize..6, 2usize..5).prop_flat_map(|(b, d)| (batch(b, d), batch(b, d))),
            lambda in 0.0f64..1.0,
            rot in 0usize..5,
        ) {
            let opts = BarlowOptions { lambda, center: false };
            let base = barlow_twins_loss(&a, &p, &opts).unwrap().loss;
            prop_assert!(base >= 0.0);
            let d = a.cols();
            let perm = |m: &M| M::from_fn(m.rows(), d, |i, j| m.get(i, (j + rot) % d));
            let permuted = barlow_twins_loss(&perm(&a), &perm(&p), &opts).unwrap().loss;
            prop_assert!((base - permuted).abs() <= 1e-9 * base.max(1.0));
        }

        #[test]
        fn combined_recomposes(
            (a, p, n) in (2usize..6, 2usize..5).prop_flat_map(|(b, d)| (batch(b, d), batch(b, d), batch(b, d))),
            beta in 0.0f64..1.0,
        ) {
            let batch = TripletBatch::new(&a, &p, &n).unwrap();
            let opts = CombinedOptions { margin: 1.0, beta, barlow: BarlowOptions::default() };
            let c = combined_loss(&batch, &opts).unwrap().loss;
            let t = triplet_loss(&batch, 1.0).unwrap().loss;
            let b = barlow_twins_loss(&a, &p, &opts.barlow).unwrap().loss;
            prop_assert!((c - (t + beta * b)).abs() <= 1e-12 * c.abs().max(1.0));
        }
    }
}
