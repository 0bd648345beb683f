//! Trainable encoder (pooled features → bottleneck embedding) and the
//! two-layer ReLU adapter classifier.

mod checkpoint;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, Stage, TrainingMeta,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::layers::{layer_backward, relu_forward, Dense, LayerKind};
use crate::optim::Parameters;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const DEFAULT_BOTTLENECK_DIM: usize = 128;
pub const DEFAULT_HIDDEN_DIM: usize = 256;
pub const DEFAULT_ADAPTER_HIDDEN: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Frame feature dimension.
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    /// Embedding dimension.
    pub bottleneck_dim: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(input_dim: usize, bottleneck_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: vec![DEFAULT_HIDDEN_DIM],
            bottleneck_dim,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bottleneck_dim < 2 {
            return Err(Error::Config(format!(
                "bottleneck dimension must be at least 2, got {}",
                self.bottleneck_dim
            )));
        }
        if self.bottleneck_dim >= self.input_dim {
            return Err(Error::Config(format!(
                "bottleneck dimension {} must be smaller than the input dimension {}",
                self.bottleneck_dim, self.input_dim
            )));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Layer widths from input to bottleneck.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_dims);
        w.push(self.bottleneck_dim);
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterShape {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl AdapterShape {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "adapter needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("adapter widths must be positive".into()));
        }
        Ok(())
    }
}

/// Stack of dense layers with ReLU between consecutive layers and no
/// activation after the last one.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T> {
    pub layers: Vec<Dense<T>>,
}

/// Intermediate values of a forward pass, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    /// Input seen by each dense layer.
    inputs: Vec<Matrix<T>>,
    /// Pre-activation output of every dense layer except the last.
    pre_activations: Vec<Matrix<T>>,
    pub output: Matrix<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn zeros(widths: &[usize]) -> Self {
        Self {
            layers: widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    /// Uniform weights in `±√(6 / fan_in)`, zero biases.
    pub fn init(widths: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let weight = Matrix::from_fn(fan_in, fan_out, |_, _| T::lit(rng.random_range(-bound..=bound)));
                Dense {
                    weight,
                    bias: vec![T::zero(); fan_out],
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Dense::fan_in)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::fan_out)
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let last = self.layers.len().saturating_sub(1);
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if l < last {
                h = relu_forward(&h);
            }
        }
        Ok(h)
    }

    pub fn forward_traced(&self, x: &Matrix<T>) -> Result<Trace<T>> {
        let last = self.layers.len().saturating_sub(1);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(last);
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h)?;
            inputs.push(h);
            if l < last {
                h = relu_forward(&z);
                pre_activations.push(z);
            } else {
                h = z;
            }
        }
        Ok(Trace {
            inputs,
            pre_activations,
            output: h,
        })
    }

    /// Returns the gradient with respect to the network input and the
    /// parameter gradients (same layout as `self`).
    pub fn backward(&self, trace: &Trace<T>, upstream: &Matrix<T>) -> Result<(Matrix<T>, FeedForward<T>)> {
        if trace.inputs.len() != self.layers.len() {
            return Err(Error::State("trace does not belong to this network".into()));
        }
        let last = self.layers.len().saturating_sub(1);
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = upstream.clone();
        for l in (0..self.layers.len()).rev() {
            if l < last {
                g = layer_backward(LayerKind::Relu, trace.pre_activations.get(l), &g)?.input;
            }
            let lg = layer_backward(LayerKind::Affine(&self.layers[l]), trace.inputs.get(l), &g)?;
            g = lg.input;
            grads.push(lg.params.expect("affine layers have parameters"));
        }
        grads.reverse();
        Ok((g, FeedForward { layers: grads }))
    }

    /// Accumulates `other` into `self`, layer by layer.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_assign(&b.weight)?;
            for (x, &y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Parameters<T> for FeedForward<T> {
    fn tensors(&self) -> Vec<&[T]> {
        self.layers.tensors()
    }
    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers.tensors_mut()
    }
    fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.shapes()
    }
}

/// Encoder weights: one dense layer per hidden width plus the linear bottleneck.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T>(pub FeedForward<T>);

/// Adapter weights: bottleneck → hidden (ReLU) → class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams<T>(pub FeedForward<T>);

impl<T: Scalar> EncoderParams<T> {
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self(FeedForward::init(&config.widths(), config.seed)))
    }

    pub fn matches(&self, config: &EncoderConfig) -> bool {
        self.0.shapes() == FeedForward::<T>::zeros(&config.widths()).shapes()
    }
}

impl<T: Scalar> AdapterParams<T> {
    pub fn init(shape: &AdapterShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        Ok(Self(FeedForward::init(
            &[shape.input_dim, shape.hidden_dim, shape.num_classes],
            seed,
        )))
    }

    pub fn shape(&self) -> AdapterShape {
        AdapterShape {
            input_dim: self.0.input_dim(),
            hidden_dim: self.0.layers.first().map_or(0, Dense::fan_out),
            num_classes: self.0.output_dim(),
        }
    }
}

macro_rules! delegate_parameters {
    ($ty:ident) => {
        impl<T: Scalar> Parameters<T> for $ty<T> {
            fn tensors(&self) -> Vec<&[T]> {
                self.0.tensors()
            }
            fn tensors_mut(&mut self) -> Vec<&mut [T]> {
                self.0.tensors_mut()
            }
            fn shapes(&self) -> Vec<(usize, usize)> {
                self.0.shapes()
            }
        }
    };
}

delegate_parameters!(EncoderParams);
delegate_parameters!(AdapterParams);

/// Pooled features (`B × input_dim`) to embeddings (`B × D`).
pub fn encoder_forward<T: Scalar>(params: &EncoderParams<T>, pooled: &Matrix<T>) -> Result<Matrix<T>> {
    params.0.forward(pooled)
}

/// Embeddings to class logits (no softmax).
pub fn adapter_forward<T: Scalar>(params: &AdapterParams<T>, embeddings: &Matrix<T>) -> Result<Matrix<T>> {
    params.0.forward(embeddings)
}

/// Per-dimension mean over the frames of one utterance.
pub fn mean_pool<T: Scalar>(seq: &FeatureSequence<T>) -> Result<Vec<T>> {
    let frames = seq.values.rows();
    if frames == 0 {
        return Err(Error::Data("cannot pool an empty feature sequence".into()));
    }
    Ok(seq.values.column_means())
}

/// SHA-256 over the little-endian `f64` image of every parameter value.
pub fn params_digest<T: Scalar, P: Parameters<T> + ?Sized>(params: &P) -> String {
    let mut hasher = Sha256::new();
    for (t, shape) in params.tensors().into_iter().zip(params.shapes()) {
        hasher.update((shape.0 as u64).to_le_bytes());
        hasher.update((shape.1 as u64).to_le_bytes());
        for v in t {
            hasher.update(v.as_f64().to_le_bytes());
        }
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::affine_forward;
    use proptest::prelude::*;

    type M = Matrix<f64>;

    #[test]
    fn pooling_fixtures() {
        let constant = FeatureSequence::new(M::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]));
        assert_eq!(mean_pool(&constant).unwrap(), vec![1.0, 2.0]);
        let two = FeatureSequence::new(M::from_rows(&[[0.0, 0.0], [2.0, 4.0]]));
        assert_eq!(mean_pool(&two).unwrap(), vec![1.0, 2.0]);
        let single = FeatureSequence::new(M::from_rows(&[[0.5, -3.0, 7.25]]));
        assert_eq!(mean_pool(&single).unwrap(), vec![0.5, -3.0, 7.25]);
        let empty = FeatureSequence::new(M::zeros(0, 3));
        assert!(matches!(mean_pool(&empty), Err(Error::Data(_))));
    }

    #[test]
    fn identity_slice_encoder() {
        let w = M::identity(5).truncate_cols(3);
        let enc = EncoderParams(FeedForward {
            layers: vec![Dense {
                weight: w,
                bias: vec![0.0; 3],
            }],
        });
        let x = M::from_rows(&[[1.0, 0.0, 0.0, 0.0, 0.0], [0.1, 0.2, 0.3, 0.4, 0.5]]);
        let y = encoder_forward(&enc, &x).unwrap();
        assert_eq!(y, M::from_rows(&[[1.0, 0.0, 0.0], [0.1, 0.2, 0.3]]));
    }

    fn hand_net() -> FeedForward<f64> {
        FeedForward {
            layers: vec![
                Dense {
                    weight: M::from_rows(&[[1.0, -2.0], [0.5, 1.0]]),
                    bias: vec![0.0, 0.25],
                },
                Dense {
                    weight: M::from_rows(&[[2.0, 1.0], [-1.0, 3.0]]),
                    bias: vec![0.5, -0.5],
                },
            ],
        }
    }

    #[test]
    fn encoder_matches_layer_composition() {
        let net = hand_net();
        let x = M::from_rows(&[[1.0, 1.0]]);
        let h = relu_forward(&affine_forward(&x, &net.layers[0].weight, &net.layers[0].bias).unwrap());
        let want = affine_forward(&h, &net.layers[1].weight, &net.layers[1].bias).unwrap();
        // h = relu(1.5, -0.75) = (1.5, 0) → (3.5, 1.0)
        assert_eq!(want, M::from_rows(&[[3.5, 1.0]]));
        assert_eq!(encoder_forward(&EncoderParams(net), &x).unwrap(), want);
    }

    #[test]
    fn adapter_matches_layer_composition() {
        let net = hand_net();
        let x = M::from_rows(&[[1.0, 0.0]]);
        let h = relu_forward(&affine_forward(&x, &net.layers[0].weight, &net.layers[0].bias).unwrap());
        let want = affine_forward(&h, &net.layers[1].weight, &net.layers[1].bias).unwrap();
        assert_eq!(adapter_forward(&AdapterParams(net), &x).unwrap(), want);
    }

    #[test]
    fn zero_weight_adapter_returns_bias() {
        let mut net = FeedForward::<f64>::zeros(&[3, 4, 2]);
        net.layers[1].bias = vec![0.7, -0.2];
        let out = adapter_forward(&AdapterParams(net), &M::from_rows(&[[1.0, 2.0, 3.0], [-4.0, 0.0, 9.0]])).unwrap();
        assert_eq!(out, M::from_rows(&[[0.7, -0.2], [0.7, -0.2]]));
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let cfg = EncoderConfig {
            input_dim: 6,
            hidden_dims: vec![5],
            bottleneck_dim: 3,
            seed: 9,
        };
        let enc = EncoderParams::<f64>::init(&cfg).unwrap();
        let x = M::from_rows(&[[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]]);
        let y = encoder_forward(&enc, &x).unwrap();
        assert_eq!(y.row(0), y.row(1));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = EncoderConfig {
            input_dim: 100,
            hidden_dims: vec![50, 60],
            bottleneck_dim: 20,
            seed: 1,
        };
        let a = EncoderParams::<f64>::init(&cfg).unwrap();
        let b = EncoderParams::<f64>::init(&cfg).unwrap();
        assert_eq!(params_digest(&a), params_digest(&b));
        let c = EncoderParams::<f64>::init(&EncoderConfig { seed: 2, ..cfg.clone() }).unwrap();
        assert_ne!(a, c);
        // 100·50 + 50·60 + 60·20 = 9200 weights; the adapter adds 20·40 + 40·5
        let adapter = AdapterParams::<f64>::init(
            &AdapterShape {
                input_dim: 20,
                hidden_dim: 40,
                num_classes: 5,
            },
            3,
        )
        .unwrap();
        let mut count = 0;
        for net in [&a.0, &adapter.0] {
            for layer in &net.layers {
                let bound = (6.0 / layer.fan_in() as f64).sqrt();
                assert!(layer.weight.as_slice().iter().all(|v| v.abs() <= bound));
                assert!(layer.bias.iter().all(|&v| v == 0.0));
                count += layer.weight.as_slice().len();
            }
        }
        assert!(count >= 10_000);
    }

    #[test]
    fn config_validation() {
        let ok = EncoderConfig {
            input_dim: 8,
            hidden_dims: vec![4],
            bottleneck_dim: 2,
            seed: 0,
        };
        assert!(ok.validate().is_ok());
        assert!(EncoderConfig {
            bottleneck_dim: 1,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(EncoderConfig {
            bottleneck_dim: 8,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(AdapterShape {
            input_dim: 2,
            hidden_dim: 3,
            num_classes: 1
        }
        .validate()
        .is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        use crate::gradcheck::grad_check;
        let cfg = EncoderConfig {
            input_dim: 4,
            hidden_dims: vec![5],
            bottleneck_dim: 3,
            seed: 4,
        };
        let enc = EncoderParams::<f64>::init(&cfg).unwrap();
        let x = M::from_fn(3, 4, |i, j| ((i * 4 + j) as f64 * 0.37).sin());
        let weights = M::from_fn(3, 3, |i, j| (i as f64 - j as f64) * 0.5 + 0.1);
        let flat: Vec<f64> = enc.tensors().concat();
        let err = grad_check(
            |p: &[f64]| {
                let mut e = enc.clone();
                let mut off = 0;
                for t in e.tensors_mut() {
                    t.copy_from_slice(&p[off..off + t.len()]);
                    off += t.len();
                }
                let trace = e.0.forward_traced(&x)?;
                // loss = Σ weights ⊙ output
                let loss: f64 = trace
                    .output
                    .as_slice()
                    .iter()
                    .zip(weights.as_slice())
                    .map(|(a, b)| a * b)
                    .sum();
                let (_, g) = e.0.backward(&trace, &weights)?;
                Ok((loss, g.tensors().concat()))
            },
            &flat,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    proptest! {
        #[test]
        fn forward_is_row_equivariant(rows in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 6), 2..6), seed in 0u64..100, rot in 1usize..5) {
            let cfg = EncoderConfig { input_dim: 6, hidden_dims: vec![7], bottleneck_dim: 3, seed };
            let enc = EncoderParams::<f64>::init(&cfg).unwrap();
            let x = M::from_rows(&rows);
            let n = x.rows();
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let y = encoder_forward(&enc, &x).unwrap();
            let yp = encoder_forward(&enc, &x.select_rows(&perm)).unwrap();
            prop_assert_eq!(yp, y.select_rows(&perm));
        }
    }
}
