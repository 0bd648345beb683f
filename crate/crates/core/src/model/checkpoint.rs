//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EMTN"            4 bytes magic
//! version           u16
//! metadata length   u32
//! metadata          JSON document (encoder config, adapter shape, training info)
//! values            f64 LE, encoder tensors then adapter tensors, declaration order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdapterParams, AdapterShape, EncoderConfig, EncoderParams, FeedForward};
use crate::error::{Error, Result};
use crate::losses::LossMode;
use crate::optim::Parameters;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EMTN";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Initial,
    Encoder,
    Adapter,
    EndToEnd,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub stage: Stage,
    pub loss_mode: Option<LossMode>,
    pub epoch: u32,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub encoder_config: EncoderConfig,
    pub encoder: EncoderParams<T>,
    pub adapter: Option<AdapterParams<T>>,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    encoder: EncoderConfig,
    adapter: Option<AdapterShape>,
    training: TrainingMeta,
}

pub fn encode_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    if !ckpt.encoder.matches(&ckpt.encoder_config) {
        return Err(Error::State(
            "encoder parameters do not match the encoder configuration".into(),
        ));
    }
    let header = Header {
        encoder: ckpt.encoder_config.clone(),
        adapter: ckpt.adapter.as_ref().map(AdapterParams::shape),
        training: ckpt.meta.clone(),
    };
    let meta = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let meta_len = u32::try_from(meta.len()).map_err(|_| Error::Format("metadata too large".into()))?;

    let n_values = ckpt.encoder.num_values() + ckpt.adapter.as_ref().map_or(0, |a| a.num_values());
    let mut out = Vec::with_capacity(10 + meta.len() + 8 * n_values);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&meta_len.to_le_bytes());
    out.extend_from_slice(&meta);
    let adapter_tensors = ckpt.adapter.as_ref().map(|a| a.tensors()).unwrap_or_default();
    for t in ckpt.encoder.tensors().into_iter().chain(adapter_tensors) {
        for v in t {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_string(),
                offset: self.bytes.len(),
                msg: format!("expected {n} bytes of {what} at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn fill<T: Scalar>(&mut self, net: &mut FeedForward<T>) -> Result<()> {
        for t in net.tensors_mut() {
            for v in t.iter_mut() {
                let raw = self.take(8, "parameter values")?;
                *v = T::lit(f64::from_le_bytes(raw.try_into().expect("8 bytes")));
            }
        }
        Ok(())
    }
}

/// Decodes a checkpoint image. `origin` names the source in error messages.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], origin: &str) -> Result<Checkpoint<T>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path: origin,
    };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "{origin}: bad magic bytes {magic:?}, not a checkpoint"
        )));
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().expect("2 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "{origin}: unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let meta_len = u32::from_le_bytes(r.take(4, "metadata length")?.try_into().expect("4 bytes")) as usize;
    let meta_start = r.pos;
    let meta = r.take(meta_len, "metadata")?;
    let header: Header = serde_json::from_slice(meta)
        .map_err(|e| Error::Format(format!("{origin}: metadata at byte {meta_start} is invalid: {e}")))?;
    header.encoder.validate()?;

    let mut encoder = FeedForward::zeros(&header.encoder.widths());
    r.fill(&mut encoder)?;
    let adapter = match header.adapter {
        Some(shape) => {
            shape.validate()?;
            let mut net = FeedForward::zeros(&[shape.input_dim, shape.hidden_dim, shape.num_classes]);
            r.fill(&mut net)?;
            Some(AdapterParams(net))
        }
        None => None,
    };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{origin}: {} trailing bytes after byte {}",
            bytes.len() - r.pos,
            r.pos
        )));
    }
    Ok(Checkpoint {
        encoder_config: header.encoder,
        encoder: EncoderParams(encoder),
        adapter,
        meta: header.training,
    })
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ckpt)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}
