//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Flat views over every trainable tensor of a parameter set.
///
/// Tensors are listed in a fixed declaration order; a gradient value of the same
/// type lists its tensors in the same order.
pub trait Parameters<T> {
    fn tensors(&self) -> Vec<&[T]>;
    fn tensors_mut(&mut self) -> Vec<&mut [T]>;
    /// `(rows, cols)` of every tensor; biases are reported as `1 × n`.
    fn shapes(&self) -> Vec<(usize, usize)>;

    fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Optimizer state: one first/second moment tensor per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub first_moment: Vec<Matrix<T>>,
    pub second_moment: Vec<Matrix<T>>,
    pub step: u64,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Scalar> AdamState<T> {
    /// Fresh state with the usual constants (0.9, 0.999, 1e-8).
    pub fn new<P: Parameters<T> + ?Sized>(params: &P) -> Self {
        Self::with_constants(params, T::lit(0.9), T::lit(0.999), T::lit(1e-8))
    }

    pub fn with_constants<P: Parameters<T> + ?Sized>(params: &P, beta1: T, beta2: T, epsilon: T) -> Self {
        let zeros: Vec<Matrix<T>> = params.shapes().into_iter().map(|(r, c)| Matrix::zeros(r, c)).collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            beta1,
            beta2,
            epsilon,
        }
    }
}

/// One Adam step, in place.
///
/// A coordinate whose gradient is exactly zero keeps its value (its moments
/// still decay), so an all-zero gradient never moves the parameters. A
/// non-finite gradient aborts the step before anything is modified.
pub fn adam_update<T: Scalar, P: Parameters<T> + ?Sized>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState<T>,
    lr: T,
) -> Result<()> {
    let grad_tensors = grads.tensors();
    let shapes = params.shapes();
    if grad_tensors.len() != shapes.len() || state.first_moment.len() != shapes.len() {
        return Err(Error::Dimension {
            op: "adam_update",
            left: (shapes.len(), 1),
            right: (grad_tensors.len(), 1),
        });
    }
    for (((g, &shape), gs), m) in grad_tensors
        .iter()
        .zip(&shapes)
        .zip(grads.shapes())
        .zip(&state.first_moment)
    {
        if gs != shape || g.len() != shape.0 * shape.1 || m.shape() != shape {
            return Err(Error::Dimension {
                op: "adam_update",
                left: shape,
                right: if gs != shape { gs } else { m.shape() },
            });
        }
        if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient entry {} at flat index {pos}",
                g[pos]
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let correction1 = T::one() - b1.powi(t);
    let correction2 = T::one() - b2.powi(t);

    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grad_tensors)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        for (((pi, &gi), mi), vi) in p.iter_mut().zip(g).zip(m.as_mut_slice()).zip(v.as_mut_slice()) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            if gi == T::zero() {
                continue;
            }
            let m_hat = *mi / correction1;
            let v_hat = *vi / correction2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

impl<T: Scalar> Parameters<T> for Matrix<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![self.as_slice()]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.as_mut_slice()]
    }
    fn shapes(&self) -> Vec<(usize, usize)> {
        vec![self.shape()]
    }
}

impl<T: Scalar> Parameters<T> for crate::layers::Dense<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![self.weight.as_slice(), &self.bias]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.weight.as_mut_slice(), &mut self.bias]
    }
    fn shapes(&self) -> Vec<(usize, usize)> {
        vec![self.weight.shape(), (1, self.bias.len())]
    }
}

impl<T: Scalar, P: Parameters<T>> Parameters<T> for [P] {
    fn tensors(&self) -> Vec<&[T]> {
        self.iter().flat_map(|p| p.tensors()).collect()
    }
    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.iter_mut().flat_map(|p| p.tensors_mut()).collect()
    }
    fn shapes(&self) -> Vec<(usize, usize)> {
        self.iter().flat_map(|p| p.shapes()).collect()
    }
}
