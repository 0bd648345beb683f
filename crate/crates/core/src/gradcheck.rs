//! Finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::relu_forward;
use crate::losses::{
    barlow_twins_loss, combined_loss, cross_entropy_loss, triplet_loss, BarlowOptions, CombinedOptions, Role,
    TripletBatch,
};
use crate::model::{AdapterParams, AdapterShape, EncoderConfig, EncoderParams};
use crate::optim::Parameters;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Maximum relative error between analytic and finite-difference gradients.
///
/// The numeric derivative uses the fourth-order five-point stencil, so a
/// fairly large `perturbation` keeps round-off small without truncation
/// error. `f` returns the value and analytic gradient at a point. Per
/// coordinate the error is `|analytic − numeric| / max(1e-12, |analytic| + |numeric|)`.
pub fn grad_check<T, F>(mut f: F, params: &[T], perturbation: T) -> Result<T>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<(T, Vec<T>)>,
{
    if !(perturbation > T::zero()) {
        return Err(Error::Config(format!("perturbation must be > 0, got {perturbation}")));
    }
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("function value {value} is not finite")));
    }
    if analytic.len() != params.len() {
        return Err(Error::Dimension {
            op: "grad_check",
            left: (params.len(), 1),
            right: (analytic.len(), 1),
        });
    }
    let floor = T::lit(1e-12);
    let h = perturbation;
    let mut x = params.to_vec();
    let mut worst = T::zero();
    for i in 0..x.len() {
        let orig = x[i];
        let mut at = |offset: T| -> Result<T> {
            x[i] = orig + offset;
            let (v, _) = f(&x)?;
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite function value near coordinate {i}")));
            }
            Ok(v)
        };
        let near = at(h)? - at(-h)?;
        let far = at(h + h)? - at(-(h + h))?;
        x[i] = orig;
        let numeric = (T::lit(8.0) * near - far) / (T::lit(12.0) * h);
        let err = (analytic[i] - numeric).abs() / floor.max(analytic[i].abs() + numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Tolerance every suite entry must meet.
pub const SUITE_TOLERANCE: f64 = 1e-4;
/// Random points per suite entry.
pub const SUITE_POINTS: usize = 10;
const STEP: f64 = 1e-4;
/// Points this close to a hinge or ReLU kink are resampled, so the stencil
/// never straddles one.
const KINK_CLEARANCE: f64 = 2e-2;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub points: usize,
    pub max_relative_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.5..1.5))
}

fn split3(x: &[f64], rows: usize, cols: usize) -> Result<(Matrix<f64>, Matrix<f64>, Matrix<f64>)> {
    let n = rows * cols;
    Ok((
        Matrix::new(rows, cols, x[..n].to_vec())?,
        Matrix::new(rows, cols, x[n..2 * n].to_vec())?,
        Matrix::new(rows, cols, x[2 * n..].to_vec())?,
    ))
}

fn concat(ms: &[&Matrix<f64>]) -> Vec<f64> {
    ms.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
}

fn clear_of_kink(a: &Matrix<f64>, p: &Matrix<f64>, n: &Matrix<f64>, margin: f64) -> bool {
    let out = triplet_loss(
        &TripletBatch {
            anchor: a,
            positive: p,
            negative: n,
        },
        margin,
    )
    .expect("shapes agree");
    out.d_pos
        .iter()
        .zip(&out.d_neg)
        .all(|(dp, dn)| (dp - dn + margin).abs() > KINK_CLEARANCE)
}

/// Draws a triplet batch away from the hinge kink and with at least one
/// active row.
fn triplet_point(rng: &mut ChaCha8Rng, rows: usize, cols: usize, margin: f64) -> Vec<f64> {
    loop {
        let (a, p, n) = (
            random_matrix(rng, rows, cols),
            random_matrix(rng, rows, cols),
            random_matrix(rng, rows, cols),
        );
        let loss = triplet_loss(
            &TripletBatch {
                anchor: &a,
                positive: &p,
                negative: &n,
            },
            margin,
        )
        .expect("shapes agree")
        .loss;
        if loss > 0.0 && clear_of_kink(&a, &p, &n, margin) {
            return concat(&[&a, &p, &n]);
        }
    }
}

/// True when no hidden pre-activation is near zero and no triplet row of the
/// encoder outputs is near the hinge.
fn pipeline_clear_of_kinks(enc: &EncoderParams<f64>, inputs: &[Matrix<f64>; 3], margin: f64) -> Result<bool> {
    let last = enc.0.layers.len() - 1;
    let mut outputs = Vec::with_capacity(3);
    for x in inputs {
        let mut h = x.clone();
        for (l, layer) in enc.0.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if l < last {
                if h.as_slice().iter().any(|z| z.abs() < KINK_CLEARANCE) {
                    return Ok(false);
                }
                h = relu_forward(&h);
            }
        }
        outputs.push(h);
    }
    Ok(clear_of_kink(&outputs[0], &outputs[1], &outputs[2], margin))
}

fn run_entry(
    name: &'static str,
    rng: &mut ChaCha8Rng,
    mut point: impl FnMut(&mut ChaCha8Rng) -> Vec<f64>,
    mut f: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
) -> Result<SuiteEntry> {
    let mut worst = 0.0f64;
    for _ in 0..SUITE_POINTS {
        let x = point(rng);
        worst = worst.max(grad_check(&mut f, &x, STEP)?);
    }
    Ok(SuiteEntry {
        name,
        points: SUITE_POINTS,
        max_relative_error: worst,
    })
}

fn write_params<P: Parameters<f64>>(target: &mut P, flat: &[f64]) {
    let mut off = 0;
    for t in target.tensors_mut() {
        t.copy_from_slice(&flat[off..off + t.len()]);
        off += t.len();
    }
}

/// Gradient checks for every objective and for the full encoder pipeline,
/// each at [`SUITE_POINTS`] seeded random points.
pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = (6, 4);
    let margin = 1.0;
    let mut entries = Vec::new();

    entries.push(run_entry(
        "triplet",
        &mut rng,
        |r| triplet_point(r, rows, cols, margin),
        |x| {
            let (a, p, n) = split3(x, rows, cols)?;
            let out = triplet_loss(&TripletBatch::new(&a, &p, &n)?, margin)?;
            Ok((
                out.loss,
                concat(&[&out.grad_anchor, &out.grad_positive, &out.grad_negative]),
            ))
        },
    )?);

    for (name, center) in [("barlow_twins", false), ("barlow_twins_centered", true)] {
        let opts = BarlowOptions { lambda: 0.05, center };
        entries.push(run_entry(
            name,
            &mut rng,
            |r| concat(&[&random_matrix(r, rows, cols), &random_matrix(r, rows, cols)]),
            |x| {
                let n = rows * cols;
                let a = Matrix::new(rows, cols, x[..n].to_vec())?;
                let p = Matrix::new(rows, cols, x[n..].to_vec())?;
                let out = barlow_twins_loss(&a, &p, &opts)?;
                Ok((
                    out.loss,
                    concat(&[
                        out.grad(Role::Anchor).expect("anchor"),
                        out.grad(Role::Positive).expect("positive"),
                    ]),
                ))
            },
        )?);
    }

    let combined = CombinedOptions {
        margin,
        beta: 0.01,
        barlow: BarlowOptions {
            lambda: 0.005,
            center: false,
        },
    };
    entries.push(run_entry(
        "combined",
        &mut rng,
        |r| triplet_point(r, rows, cols, margin),
        |x| {
            let (a, p, n) = split3(x, rows, cols)?;
            let out = combined_loss(&TripletBatch::new(&a, &p, &n)?, &combined)?;
            let g = |r| out.grad(r).expect("grad");
            Ok((
                out.loss,
                concat(&[g(Role::Anchor), g(Role::Positive), g(Role::Negative)]),
            ))
        },
    )?);

    let classes = 3;
    entries.push(run_entry(
        "cross_entropy",
        &mut rng,
        |r| random_matrix(r, rows, classes).into_vec(),
        |x| {
            let logits = Matrix::new(rows, classes, x.to_vec())?;
            let labels: Vec<usize> = (0..rows).map(|i| i % classes).collect();
            let out = cross_entropy_loss(&logits, &labels)?;
            Ok((out.loss, out.grad(Role::Logits).expect("logits").as_slice().to_vec()))
        },
    )?);

    // Full pipeline: combined loss of encoder outputs, w.r.t. encoder weights.
    let cfg = EncoderConfig {
        input_dim: 4,
        hidden_dims: vec![3],
        bottleneck_dim: 2,
        seed,
    };
    let batch = 8;
    let template = EncoderParams::<f64>::init(&cfg)?;
    let pipeline_inputs: Vec<[Matrix<f64>; 3]> = (0..SUITE_POINTS)
        .map(|_| {
            [
                random_matrix(&mut rng, batch, cfg.input_dim),
                random_matrix(&mut rng, batch, cfg.input_dim),
                random_matrix(&mut rng, batch, cfg.input_dim),
            ]
        })
        .collect();
    let mut worst = 0.0f64;
    for (k, inputs) in pipeline_inputs.iter().enumerate() {
        let mut init_seed = seed.wrapping_add(k as u64 + 1);
        let init = loop {
            let init = EncoderParams::<f64>::init(&EncoderConfig {
                seed: init_seed,
                ..cfg.clone()
            })?;
            if pipeline_clear_of_kinks(&init, inputs, margin)? {
                break init;
            }
            init_seed = init_seed.wrapping_add(SUITE_POINTS as u64);
        };
        let flat: Vec<f64> = init.tensors().concat();
        let err = grad_check(
            |p| {
                let mut enc = template.clone();
                write_params(&mut enc, p);
                let traces = inputs
                    .iter()
                    .map(|x| enc.0.forward_traced(x))
                    .collect::<Result<Vec<_>>>()?;
                let out = combined_loss(
                    &TripletBatch::new(&traces[0].output, &traces[1].output, &traces[2].output)?,
                    &combined,
                )?;
                let mut grads = enc.0.backward(&traces[0], out.grad(Role::Anchor).expect("a"))?.1;
                grads.accumulate(&enc.0.backward(&traces[1], out.grad(Role::Positive).expect("p"))?.1)?;
                grads.accumulate(&enc.0.backward(&traces[2], out.grad(Role::Negative).expect("n"))?.1)?;
                Ok((out.loss, grads.tensors().concat()))
            },
            &flat,
            STEP,
        )?;
        worst = worst.max(err);
    }
    entries.push(SuiteEntry {
        name: "encoder+combined",
        points: SUITE_POINTS,
        max_relative_error: worst,
    });

    // Adapter under cross-entropy, w.r.t. adapter weights.
    let shape = AdapterShape {
        input_dim: 4,
        hidden_dim: 5,
        num_classes: 3,
    };
    let adapter_template = AdapterParams::<f64>::init(&shape, seed)?;
    let mut worst = 0.0f64;
    for k in 0..SUITE_POINTS {
        let x = random_matrix(&mut rng, rows, shape.input_dim);
        let labels: Vec<usize> = (0..rows).map(|i| (i + k) % shape.num_classes).collect();
        let init = AdapterParams::<f64>::init(&shape, seed.wrapping_add(100 + k as u64))?;
        let err = grad_check(
            |p| {
                let mut ad = adapter_template.clone();
                write_params(&mut ad, p);
                let trace = ad.0.forward_traced(&x)?;
                let out = cross_entropy_loss(&trace.output, &labels)?;
                let (_, g) = ad.0.backward(&trace, out.grad(Role::Logits).expect("logits"))?;
                Ok((out.loss, g.tensors().concat()))
            },
            &init.tensors().concat(),
            STEP,
        )?;
        worst = worst.max(err);
    }
    entries.push(SuiteEntry {
        name: "adapter+cross_entropy",
        points: SUITE_POINTS,
        max_relative_error: worst,
    });

    let max = entries.iter().map(|e| e.max_relative_error).fold(0.0, f64::max);
    Ok(SuiteReport {
        entries,
        max_relative_error: max,
        tolerance: SUITE_TOLERANCE,
    })
}
