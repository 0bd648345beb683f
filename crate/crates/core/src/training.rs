//! Two-stage finetuning (encoder, then frozen-encoder adapter) and the
//! single-stage end-to-end baseline.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{epoch_rng, load_pooled, sample_triplets, Manifest, PooledSplit, Split};
use crate::error::{Error, Result};
use crate::losses::{
    barlow_twins_loss, combined_loss, cross_entropy_loss, triplet_loss, BarlowOptions, CombinedOptions, LossMode,
    LossOutput, Role, TripletBatch, DEFAULT_BETA, DEFAULT_LAMBDA,
};
use crate::metrics::{accuracy, age_mae, argmax};
use crate::model::{
    adapter_forward, encoder_forward, AdapterParams, AdapterShape, EncoderConfig, EncoderParams, FeedForward,
};
use crate::optim::{adam_update, AdamState};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_EPOCHS: u32 = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss_mode: LossMode,
    pub margin: f64,
    pub lambda: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: u32,
    pub seed: u64,
    pub center: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_mode: LossMode::Combined,
            margin: 1.0,
            lambda: DEFAULT_LAMBDA,
            beta: DEFAULT_BETA,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: DEFAULT_EPOCHS,
            seed: 0,
            center: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            ("margin", self.margin),
            ("lambda", self.lambda),
            ("beta", self.beta),
            ("learning rate", self.learning_rate),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }

    fn combined_options<T: Scalar>(&self) -> CombinedOptions<T> {
        CombinedOptions {
            margin: T::lit(self.margin),
            beta: T::lit(self.beta),
            barlow: BarlowOptions {
                lambda: T::lit(self.lambda),
                center: self.center,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub mean_loss: f64,
    /// Dev-split accuracy, when the manifest has a dev split.
    pub dev_metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
    pub checkpoint: Option<PathBuf>,
}

impl RunLog {
    /// One JSON object per epoch, then `{"checkpoint": ...}` if set.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        if let Some(path) = &self.checkpoint {
            out.push_str(&serde_json::json!({ "checkpoint": path }).to_string());
            out.push('\n');
        }
        out
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.mean_loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.mean_loss)
    }
}

fn load_train<T: Scalar>(manifest: &Manifest) -> Result<PooledSplit<T>> {
    let train = load_pooled(manifest, Split::Train)?;
    let mut seen = train.labels.clone();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() < 2 {
        return Err(Error::Data(format!(
            "train split needs at least 2 classes, found {}",
            seen.len()
        )));
    }
    Ok(train)
}

fn load_dev<T: Scalar>(manifest: &Manifest) -> Result<Option<PooledSplit<T>>> {
    if manifest.split(Split::Dev).next().is_none() {
        return Ok(None);
    }
    load_pooled(manifest, Split::Dev).map(Some)
}

/// Nearest-train-centroid accuracy of `dev` in embedding space.
fn centroid_accuracy<T: Scalar>(
    encoder: &EncoderParams<T>,
    train: &PooledSplit<T>,
    dev: &PooledSplit<T>,
    num_classes: usize,
) -> Result<f64> {
    let emb = encoder_forward(encoder, &train.features)?;
    let d = emb.cols();
    let mut centroids = Matrix::zeros(num_classes, d);
    let mut counts = vec![0usize; num_classes];
    for (row, &c) in emb.iter_rows().zip(&train.labels) {
        for (s, &v) in centroids.row_mut(c).iter_mut().zip(row) {
            *s += v;
        }
        counts[c] += 1;
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            let n = T::from_count(n);
            centroids.row_mut(c).iter_mut().for_each(|v| *v /= n);
        }
    }
    let dev_emb = encoder_forward(encoder, &dev.features)?;
    let preds: Vec<usize> = dev_emb
        .iter_rows()
        .map(|row| {
            let neg_dist: Vec<T> = (0..num_classes)
                .map(|c| {
                    if counts[c] == 0 {
                        T::neg_infinity()
                    } else {
                        -row.iter()
                            .zip(centroids.row(c))
                            .map(|(&a, &b)| (a - b) * (a - b))
                            .sum::<T>()
                    }
                })
                .collect();
            argmax(&neg_dist)
        })
        .collect();
    accuracy(&preds, &dev.labels)
}

fn stage1_loss<T: Scalar>(
    cfg: &TrainConfig,
    anchor: &Matrix<T>,
    positive: &Matrix<T>,
    negative: Option<&Matrix<T>>,
) -> Result<LossOutput<T>> {
    let opts = cfg.combined_options::<T>();
    match (cfg.loss_mode, negative) {
        (LossMode::Noncontrastive, _) => barlow_twins_loss(anchor, positive, &opts.barlow),
        (LossMode::Contrastive, Some(n)) => {
            Ok(triplet_loss(&TripletBatch::new(anchor, positive, n)?, opts.margin)?.into())
        }
        (LossMode::Combined, Some(n)) => combined_loss(&TripletBatch::new(anchor, positive, n)?, &opts),
        (_, None) => Err(Error::State("negative batch required for this loss mode".into())),
    }
}

/// Stage 1: finetunes a freshly initialised encoder on the train split.
///
/// Every batch has exactly `batch_size` triplets (a trailing partial batch is
/// dropped) so the three loss modes see identical data order.
pub fn train_stage1<T: Scalar>(
    manifest: &Manifest,
    encoder_config: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<(EncoderParams<T>, RunLog)> {
    cfg.validate()?;
    encoder_config.validate()?;
    let train = load_train::<T>(manifest)?;
    if train.features.cols() != encoder_config.input_dim {
        return Err(Error::Config(format!(
            "encoder input dimension {} does not match feature dimension {}",
            encoder_config.input_dim,
            train.features.cols()
        )));
    }
    let dev = load_dev::<T>(manifest)?;

    let mut encoder = EncoderParams::<T>::init(encoder_config)?;
    let mut adam = AdamState::new(&encoder);
    let lr = T::lit(cfg.learning_rate);
    let mut log = RunLog::default();

    for epoch in 1..=cfg.epochs {
        let batches = sample_triplets(&train.labels, cfg.batch_size, cfg.seed, u64::from(epoch))?;
        let mut total = 0.0;
        let mut steps = 0usize;
        for batch in batches.iter().filter(|b| b.len() == cfg.batch_size) {
            let net = &encoder.0;
            let ta = net.forward_traced(&train.features.select_rows(&batch.anchors()))?;
            let tp = net.forward_traced(&train.features.select_rows(&batch.positives()))?;
            let tn = if cfg.loss_mode.uses_negatives() {
                Some(net.forward_traced(&train.features.select_rows(&batch.negatives()))?)
            } else {
                None
            };
            let mut out = stage1_loss(cfg, &ta.output, &tp.output, tn.as_ref().map(|t| &t.output))?;
            if !out.loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss in epoch {epoch}")));
            }

            let (_, mut grads) = net.backward(&ta, &out.take(Role::Anchor).expect("anchor gradient"))?;
            let (_, gp) = net.backward(&tp, &out.take(Role::Positive).expect("positive gradient"))?;
            grads.accumulate(&gp)?;
            if let Some(tn) = &tn {
                let (_, gn) = net.backward(tn, &out.take(Role::Negative).expect("negative gradient"))?;
                grads.accumulate(&gn)?;
            }
            adam_update(&mut encoder, &EncoderParams(grads), &mut adam, lr)?;
            total += out.loss.as_f64();
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::Data(format!(
                "train split yields no full batch of {} triplets",
                cfg.batch_size
            )));
        }
        let dev_metric = match &dev {
            Some(dev) => Some(centroid_accuracy(&encoder, &train, dev, manifest.num_classes())?),
            None => None,
        };
        let mean_loss = total / steps as f64;
        log::info!("stage1 epoch {epoch}: loss {mean_loss:.6}");
        log.records.push(EpochRecord {
            epoch,
            mean_loss,
            dev_metric,
        });
    }
    Ok((encoder, log))
}

/// Per-epoch shuffled mini-batches of row indices; the last batch may be short.
fn classifier_batches(n: usize, batch_size: usize, seed: u64, epoch: u32) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut epoch_rng(seed, u64::from(epoch)));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= num_classes) {
        Some(l) => Err(Error::Data(format!(
            "label {l} is outside the adapter's {num_classes} classes"
        ))),
        None => Ok(()),
    }
}

fn adapter_dev_accuracy<T: Scalar>(
    encoder: &EncoderParams<T>,
    adapter: &AdapterParams<T>,
    dev: &PooledSplit<T>,
) -> Result<f64> {
    let logits = adapter_forward(adapter, &encoder_forward(encoder, &dev.features)?)?;
    let preds: Vec<usize> = logits.iter_rows().map(argmax).collect();
    accuracy(&preds, &dev.labels)
}

/// Stage 2: trains a fresh adapter on embeddings of the frozen `encoder`.
pub fn train_stage2<T: Scalar>(
    manifest: &Manifest,
    encoder: &EncoderParams<T>,
    shape: &AdapterShape,
    cfg: &TrainConfig,
) -> Result<(AdapterParams<T>, RunLog)> {
    cfg.validate()?;
    shape.validate()?;
    if shape.input_dim != encoder.0.output_dim() {
        return Err(Error::Config(format!(
            "adapter input dimension {} does not match embedding dimension {}",
            shape.input_dim,
            encoder.0.output_dim()
        )));
    }
    let train = load_train::<T>(manifest)?;
    check_labels(&train.labels, shape.num_classes)?;
    let dev = load_dev::<T>(manifest)?;
    // the encoder is frozen, so its embeddings are computed once
    let embeddings = encoder_forward(encoder, &train.features)?;

    let mut adapter = AdapterParams::<T>::init(shape, cfg.seed)?;
    let mut adam = AdamState::new(&adapter);
    let lr = T::lit(cfg.learning_rate);
    let mut log = RunLog::default();

    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        let batches = classifier_batches(train.len(), cfg.batch_size, cfg.seed, epoch);
        for idx in &batches {
            let net = &adapter.0;
            let trace = net.forward_traced(&embeddings.select_rows(idx))?;
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let mut out = cross_entropy_loss(&trace.output, &labels)?;
            let (_, grads) = net.backward(&trace, &out.take(Role::Logits).expect("logit gradient"))?;
            adam_update(&mut adapter, &AdapterParams(grads), &mut adam, lr)?;
            total += out.loss.as_f64();
        }
        let dev_metric = match &dev {
            Some(dev) => Some(adapter_dev_accuracy(encoder, &adapter, dev)?),
            None => None,
        };
        let mean_loss = total / batches.len() as f64;
        log::info!("stage2 epoch {epoch}: loss {mean_loss:.6}");
        log.records.push(EpochRecord {
            epoch,
            mean_loss,
            dev_metric,
        });
    }
    Ok((adapter, log))
}

/// Baseline: encoder and adapter trained jointly under cross-entropy alone.
pub fn train_end2end_baseline<T: Scalar>(
    manifest: &Manifest,
    encoder_config: &EncoderConfig,
    shape: &AdapterShape,
    cfg: &TrainConfig,
) -> Result<(EncoderParams<T>, AdapterParams<T>, RunLog)> {
    cfg.validate()?;
    encoder_config.validate()?;
    shape.validate()?;
    if shape.input_dim != encoder_config.bottleneck_dim {
        return Err(Error::Config(format!(
            "adapter input dimension {} does not match bottleneck dimension {}",
            shape.input_dim, encoder_config.bottleneck_dim
        )));
    }
    let train = load_train::<T>(manifest)?;
    check_labels(&train.labels, shape.num_classes)?;
    let dev = load_dev::<T>(manifest)?;

    let mut encoder = EncoderParams::<T>::init(encoder_config)?;
    let mut adapter = AdapterParams::<T>::init(shape, cfg.seed)?;
    let mut enc_adam = AdamState::new(&encoder);
    let mut ada_adam = AdamState::new(&adapter);
    let lr = T::lit(cfg.learning_rate);
    let mut log = RunLog::default();

    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        let batches = classifier_batches(train.len(), cfg.batch_size, cfg.seed, epoch);
        for idx in &batches {
            let te = encoder.0.forward_traced(&train.features.select_rows(idx))?;
            let ta = adapter.0.forward_traced(&te.output)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let mut out = cross_entropy_loss(&ta.output, &labels)?;
            let (emb_grad, ada_grads) = adapter
                .0
                .backward(&ta, &out.take(Role::Logits).expect("logit gradient"))?;
            let (_, enc_grads) = encoder.0.backward(&te, &emb_grad)?;
            adam_update(&mut adapter, &AdapterParams(ada_grads), &mut ada_adam, lr)?;
            adam_update(&mut encoder, &EncoderParams(enc_grads), &mut enc_adam, lr)?;
            total += out.loss.as_f64();
        }
        let dev_metric = match &dev {
            Some(dev) => Some(adapter_dev_accuracy(&encoder, &adapter, dev)?),
            None => None,
        };
        let mean_loss = total / batches.len() as f64;
        log::info!("end-to-end epoch {epoch}: loss {mean_loss:.6}");
        log.records.push(EpochRecord {
            epoch,
            mean_loss,
            dev_metric,
        });
    }
    Ok((encoder, adapter, log))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: Split,
    pub samples: usize,
    pub accuracy: f64,
    /// Present when the manifest defines label midpoints.
    pub mae: Option<f64>,
}

/// Embeddings of every sample in `split`, in manifest order.
pub fn embed_split<T: Scalar>(
    manifest: &Manifest,
    split: Split,
    encoder: &EncoderParams<T>,
) -> Result<(PooledSplit<T>, Matrix<T>)> {
    let pooled = load_pooled(manifest, split)?;
    let emb = encoder_forward(encoder, &pooled.features)?;
    Ok((pooled, emb))
}

/// Class predictions (argmax of the adapter logits, ties to the lowest index).
pub fn predict<T: Scalar>(
    encoder: &EncoderParams<T>,
    adapter: &AdapterParams<T>,
    pooled: &Matrix<T>,
) -> Result<Vec<usize>> {
    let logits = adapter_forward(adapter, &encoder_forward(encoder, pooled)?)?;
    Ok(logits.iter_rows().map(argmax).collect())
}

pub fn evaluate<T: Scalar>(
    manifest: &Manifest,
    split: Split,
    encoder: &EncoderParams<T>,
    adapter: Option<&AdapterParams<T>>,
) -> Result<EvalReport> {
    let adapter = adapter.ok_or_else(|| Error::State("evaluation needs a trained adapter".into()))?;
    let pooled = load_pooled::<T>(manifest, split)?;
    let preds = predict(encoder, adapter, &pooled.features)?;
    let mae = if manifest.label_midpoints.is_empty() {
        None
    } else {
        Some(age_mae(&preds, &pooled.labels, &manifest.midpoints_by_class())?)
    };
    Ok(EvalReport {
        split,
        samples: pooled.len(),
        accuracy: accuracy(&preds, &pooled.labels)?,
        mae,
    })
}

/// Fresh encoder with every parameter zeroed; handy as a shape template.
pub fn zero_encoder<T: Scalar>(config: &EncoderConfig) -> EncoderParams<T> {
    EncoderParams(FeedForward::zeros(&config.widths()))
}
