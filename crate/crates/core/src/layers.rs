//! Differentiable layer primitives: affine maps and ReLU.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Matrix};

/// `x · w + bias`, with `bias` broadcast over rows.
pub fn affine_forward<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, bias: &[T]) -> Result<Matrix<T>> {
    if bias.len() != w.cols() {
        return Err(Error::Dimension {
            op: "affine_forward bias",
            left: w.shape(),
            right: (1, bias.len()),
        });
    }
    let mut out = matmul(x, w).map_err(|_| Error::Dimension {
        op: "affine_forward",
        left: x.shape(),
        right: w.shape(),
    })?;
    for i in 0..out.rows() {
        for (v, &b) in out.row_mut(i).iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(out)
}

pub fn relu_forward<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Weight and bias of one fully connected layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    /// `fan_in × fan_out`.
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: vec![T::zero(); fan_out],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        affine_forward(x, &self.weight, &self.bias)
    }
}

/// Which layer a backward pass runs through.
#[derive(Clone, Copy, Debug)]
pub enum LayerKind<'a, T> {
    Affine(&'a Dense<T>),
    Relu,
}

/// Result of [`layer_backward`]. `params` is `None` for parameter-free layers.
#[derive(Clone, Debug)]
pub struct LayerGrads<T> {
    pub input: Matrix<T>,
    pub params: Option<Dense<T>>,
}

/// Analytic backward pass of one layer.
///
/// `cached_input` is the input the layer saw on its forward pass. The ReLU
/// subgradient at exactly zero is zero.
pub fn layer_backward<T: Scalar>(
    kind: LayerKind<'_, T>,
    cached_input: Option<&Matrix<T>>,
    upstream: &Matrix<T>,
) -> Result<LayerGrads<T>> {
    let x = cached_input.ok_or_else(|| Error::State("layer_backward called without a forward cache".into()))?;
    match kind {
        LayerKind::Relu => {
            if x.shape() != upstream.shape() {
                return Err(Error::Dimension {
                    op: "relu_backward",
                    left: x.shape(),
                    right: upstream.shape(),
                });
            }
            let data = x
                .as_slice()
                .iter()
                .zip(upstream.as_slice())
                .map(|(&xi, &g)| if xi > T::zero() { g } else { T::zero() })
                .collect();
            Ok(LayerGrads {
                input: Matrix::new(x.rows(), x.cols(), data)?,
                params: None,
            })
        }
        LayerKind::Affine(layer) => {
            if upstream.shape() != (x.rows(), layer.fan_out()) || x.cols() != layer.fan_in() {
                return Err(Error::Dimension {
                    op: "affine_backward",
                    left: (x.rows(), layer.fan_out()),
                    right: upstream.shape(),
                });
            }
            let input = matmul_nt(upstream, &layer.weight)?;
            let weight = matmul_tn(x, upstream)?;
            let bias = upstream.column_sums();
            Ok(LayerGrads {
                input,
                params: Some(Dense { weight, bias }),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type M = Matrix<f64>;

    #[test]
    fn affine_identity() {
        let y = affine_forward(&M::from_rows(&[[1.0, 0.0]]), &M::identity(2), &[0.0, 0.0]).unwrap();
        assert_eq!(y, M::from_rows(&[[1.0, 0.0]]));
    }

    #[test]
    fn affine_hand_evaluated() {
        let w = M::from_rows(&[[2.0, 0.0], [0.0, 3.0]]);
        let y = affine_forward(&M::from_rows(&[[1.0, 1.0]]), &w, &[1.0, 1.0]).unwrap();
        assert_eq!(y, M::from_rows(&[[3.0, 4.0]]));
    }

    #[test]
    fn affine_bias_only() {
        let w = M::from_rows(&[[7.0, -1.0], [0.5, 3.0]]);
        let y = affine_forward(&M::zeros(1, 2), &w, &[5.0, 5.0]).unwrap();
        assert_eq!(y, M::from_rows(&[[5.0, 5.0]]));
    }

    #[test]
    fn affine_shape_errors() {
        assert!(matches!(
            affine_forward(&M::zeros(1, 3), &M::identity(2), &[0.0, 0.0]),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            affine_forward(&M::zeros(1, 2), &M::identity(2), &[0.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu_forward(&M::from_rows(&[[-1.0, 2.0]])), M::from_rows(&[[0.0, 2.0]]));
        assert_eq!(relu_forward(&M::from_rows(&[[0.0]])), M::from_rows(&[[0.0]]));
        assert_eq!(
            relu_forward(&M::from_rows(&[[3.5, -0.1, 7.0]])),
            M::from_rows(&[[3.5, 0.0, 7.0]])
        );
    }

    #[test]
    fn relu_backward_uses_zero_subgradient() {
        let x = M::from_rows(&[[-1.0, 2.0, 0.0]]);
        let g = layer_backward(LayerKind::Relu, Some(&x), &M::from_rows(&[[1.0, 1.0, 1.0]])).unwrap();
        assert_eq!(g.input, M::from_rows(&[[0.0, 1.0, 0.0]]));
        assert!(g.params.is_none());
    }

    #[test]
    fn affine_backward_by_hand() {
        let layer = Dense {
            weight: M::identity(2),
            bias: vec![0.0, 0.0],
        };
        let x = M::from_rows(&[[1.0, 0.0]]);
        let g = layer_backward(LayerKind::Affine(&layer), Some(&x), &M::from_rows(&[[1.0, 1.0]])).unwrap();
        assert_eq!(g.input, M::from_rows(&[[1.0, 1.0]]));
        let p = g.params.unwrap();
        assert_eq!(p.weight, M::from_rows(&[[1.0, 1.0], [0.0, 0.0]]));
        assert_eq!(p.bias, vec![1.0, 1.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let layer = Dense {
            weight: M::from_rows(&[[1.0, 2.0], [3.0, 4.0]]),
            bias: vec![1.0, 1.0],
        };
        let x = M::from_rows(&[[0.3, -0.7], [1.0, 2.0]]);
        let g = layer_backward(LayerKind::Affine(&layer), Some(&x), &M::zeros(2, 2)).unwrap();
        assert!(g.input.as_slice().iter().all(|&v| v == 0.0));
        let p = g.params.unwrap();
        assert!(p.weight.as_slice().iter().chain(&p.bias).all(|&v| v == 0.0));
        let r = layer_backward(LayerKind::Relu, Some(&x), &M::zeros(2, 2)).unwrap();
        assert!(r.input.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_cache_is_state_error() {
        let err = layer_backward::<f64>(LayerKind::Relu, None, &M::zeros(1, 1)).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }
}
