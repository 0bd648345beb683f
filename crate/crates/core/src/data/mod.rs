//! Manifests, feature files, synthetic data and triplet sampling.

mod feat;
mod manifest;
mod sampler;
mod synth;

pub use feat::{
    decode_feat, encode_feat, read_feature_file, read_feature_file_any, write_feature_file, FeatureSequence,
    FEAT_MAGIC, FEAT_VERSION,
};
pub use manifest::{load_manifest, parse_manifest, Manifest, Record, Sample, Split};
pub(crate) use sampler::epoch_rng;
pub use sampler::{sample_triplets, Triplet, TripletIndexBatch};
pub use synth::{class_means, synth_generate, SynthSpec, DEV_FRACTION, TRAIN_FRACTION};

use crate::error::{Error, Result};
use crate::model::mean_pool;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Mean-pooled features of every sample in one split, in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledSplit<T> {
    pub ids: Vec<String>,
    /// `N × input_dim`.
    pub features: Matrix<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> PooledSplit<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Reads and mean-pools every feature file of `split`.
pub fn load_pooled<T: Scalar>(manifest: &Manifest, split: Split) -> Result<PooledSplit<T>> {
    let samples: Vec<&Sample> = manifest.split(split).collect();
    if samples.is_empty() {
        return Err(Error::Data(format!("split '{split}' has no samples")));
    }
    let mut dim = manifest.dim;
    let mut data = Vec::new();
    let mut ids = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        let path = manifest.feature_path(s);
        let seq: FeatureSequence<T> = match dim {
            Some(d) => read_feature_file(&path, d)?,
            None => {
                let seq = read_feature_file_any(&path)?;
                dim = Some(seq.dim());
                seq
            }
        };
        data.extend(mean_pool(&seq)?);
        ids.push(s.id.clone());
        labels.push(s.class);
    }
    let features = Matrix::new(ids.len(), dim.unwrap_or(0), data)?;
    Ok(PooledSplit { ids, features, labels })
}
