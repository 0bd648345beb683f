//! FEAT binary feature files.
//!
//! ```text
//! "FEAT" | version u32 = 1 | frames u32 | dim u32 | frames·dim f32, row-major
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const FEAT_MAGIC: &[u8; 4] = b"FEAT";
pub const FEAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Frame-level features of one utterance, `frames × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence<T> {
    pub values: Matrix<T>,
}

impl<T: Scalar> FeatureSequence<T> {
    pub fn new(values: Matrix<T>) -> Self {
        Self { values }
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

/// Values are narrowed to `f32`; a sequence that was read from a FEAT file
/// re-encodes to the identical bytes.
pub fn encode_feat<T: Scalar>(seq: &FeatureSequence<T>) -> Result<Vec<u8>> {
    let frames = u32::try_from(seq.frames()).map_err(|_| Error::Data("too many frames".into()))?;
    let dim = u32::try_from(seq.dim()).map_err(|_| Error::Data("dimension too large".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * seq.values.as_slice().len());
    out.extend_from_slice(FEAT_MAGIC);
    out.extend_from_slice(&FEAT_VERSION.to_le_bytes());
    out.extend_from_slice(&frames.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for v in seq.values.as_slice() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    Ok(out)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses a FEAT image. `origin` names the source in error messages.
pub fn decode_feat<T: Scalar>(bytes: &[u8], expected_dim: Option<usize>, origin: &str) -> Result<FeatureSequence<T>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: origin.to_string(),
            offset: bytes.len(),
            msg: format!("header needs {HEADER_LEN} bytes"),
        });
    }
    if &bytes[..4] != FEAT_MAGIC {
        return Err(Error::Format(format!(
            "{origin}: bad magic {:?}, not a FEAT file",
            &bytes[..4]
        )));
    }
    let version = u32_at(bytes, 4);
    if version != FEAT_VERSION {
        return Err(Error::Format(format!(
            "{origin}: unsupported FEAT version {version} (expected {FEAT_VERSION})"
        )));
    }
    let frames = u32_at(bytes, 8) as usize;
    let dim = u32_at(bytes, 12) as usize;
    if let Some(expected) = expected_dim {
        if dim != expected {
            return Err(Error::Data(format!(
                "{origin}: feature dimension {dim} does not match expected dimension {expected}"
            )));
        }
    }
    if frames == 0 {
        return Err(Error::Data(format!("{origin}: sequence has no frames")));
    }
    let need = HEADER_LEN + 4 * frames * dim;
    if bytes.len() < need {
        return Err(Error::Truncated {
            path: origin.to_string(),
            offset: bytes.len(),
            msg: format!("payload of {frames}x{dim} floats needs {need} bytes"),
        });
    }
    if bytes.len() > need {
        return Err(Error::Format(format!(
            "{origin}: {} trailing bytes after byte {need}",
            bytes.len() - need
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
        .collect();
    Ok(FeatureSequence::new(Matrix::new(frames, dim, data)?))
}

pub fn read_feature_file<T: Scalar>(path: impl AsRef<Path>, expected_dim: usize) -> Result<FeatureSequence<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feat(&bytes, Some(expected_dim), &path.display().to_string())
}

/// Reads a file without checking its dimension.
pub fn read_feature_file_any<T: Scalar>(path: impl AsRef<Path>) -> Result<FeatureSequence<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feat(&bytes, None, &path.display().to_string())
}

pub fn write_feature_file<T: Scalar>(seq: &FeatureSequence<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_feat(seq)?).map_err(|e| Error::io(path, e))
}
