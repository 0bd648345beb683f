//! Seeded synthetic clustered feature sequences.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::feat::{write_feature_file, FeatureSequence};
use super::manifest::{Manifest, Sample, Split};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Fraction of each class assigned to train; the remainder splits evenly
/// between dev and test.
pub const TRAIN_FRACTION: f64 = 0.7;
pub const DEV_FRACTION: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    /// Minimum pairwise distance between class means.
    pub separation: f64,
    /// Standard deviation of per-frame noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            samples_per_class: 200,
            dim: 64,
            frames_min: 8,
            frames_max: 24,
            separation: 8.0,
            noise: 2.0,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if !(self.separation >= 0.0) || !self.separation.is_finite() {
            return Err(Error::Config(format!(
                "separation must be >= 0, got {}",
                self.separation
            )));
        }
        if !(self.noise > 0.0) || !self.noise.is_finite() {
            return Err(Error::Config(format!("noise must be > 0, got {}", self.noise)));
        }
        if self.samples_per_class == 0 || self.dim == 0 {
            return Err(Error::Config("samples per class and dimension must be positive".into()));
        }
        if self.frames_min == 0 || self.frames_min > self.frames_max {
            return Err(Error::Config(format!(
                "frame range [{}, {}] is invalid",
                self.frames_min, self.frames_max
            )));
        }
        Ok(())
    }

    pub fn label(class: usize) -> String {
        format!("class{class}")
    }
}

/// Split for the `i`-th of `n` samples of a class.
fn split_for(i: usize, n: usize) -> Split {
    let train = (TRAIN_FRACTION * n as f64).round() as usize;
    let dev = ((TRAIN_FRACTION + DEV_FRACTION) * n as f64).round() as usize;
    if i < train {
        Split::Train
    } else if i < dev {
        Split::Dev
    } else {
        Split::Test
    }
}

/// Class mean vectors with minimum pairwise distance equal to `separation`.
pub fn class_means(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..spec.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let mut min_dist = f64::INFINITY;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            let d: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            min_dist = min_dist.min(d.sqrt());
        }
    }
    let scale = if min_dist > 0.0 {
        spec.separation / min_dist
    } else {
        0.0
    };
    for m in &mut means {
        for v in m.iter_mut() {
            *v *= scale;
        }
    }
    means
}

/// Writes `feats/<id>.feat` files and `manifest.jsonl` under `out_dir`.
/// The output is a pure function of `spec`.
pub fn synth_generate(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let feat_dir = out_dir.join("feats");
    std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = class_means(spec, &mut rng);
    let mut samples = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    let mut label_map = BTreeMap::new();

    for (class, mean) in means.iter().enumerate() {
        let label = SynthSpec::label(class);
        label_map.insert(label.clone(), class);
        for i in 0..spec.samples_per_class {
            let frames = rng.random_range(spec.frames_min..=spec.frames_max);
            let values = Matrix::<f64>::from_fn(frames, spec.dim, |_, j| {
                let n: f64 = rng.sample(StandardNormal);
                // stored as f32; round here so in-memory and on-disk agree
                (mean[j] + spec.noise * n) as f32 as f64
            });
            let id = format!("{label}_{i:05}");
            let rel = format!("feats/{id}.feat");
            write_feature_file(&FeatureSequence::new(values), out_dir.join(&rel))?;
            samples.push(Sample {
                id,
                feature_path: rel,
                label: label.clone(),
                class,
                split: split_for(i, spec.samples_per_class),
            });
        }
    }

    let manifest = Manifest {
        samples,
        label_map,
        label_midpoints: BTreeMap::new(),
        dim: Some(spec.dim),
        base_dir: out_dir.to_path_buf(),
    };
    manifest.write(out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
