//! Binary checkpoint format.
//!
//! All integers little-endian:
//!
//! ```text
//! magic      b"TFLB"
//! version    u32
//! descriptor u32 length + UTF-8 canonical architecture text
//! fingerprint u64 (hash of the descriptor)
//! dataset_id u32 length + UTF-8
//! seed       u64
//! iterations u64
//! layers     u32 count, then per layer:
//!     origin u32 length + UTF-8
//!     frozen u8
//!     weights u32 count + f32 values
//!     bias    u32 count + f32 values
//!     crc32   u32 over the preceding bytes of this layer blob
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nncore::{LayerState, Model, ModelSpec, ShapeError, Tensor};

pub const MAGIC: &[u8; 4] = b"TFLB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("architecture fingerprint mismatch: checkpoint {found:016x}, expected {expected:016x}")]
    Fingerprint { expected: u64, found: u64 },
    #[error("checksum mismatch in weight layer {layer}")]
    Checksum { layer: usize },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Where a set of weights came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub dataset_id: String,
    pub seed: u64,
    pub iterations: u64,
}

/// Hash of a canonical architecture descriptor.
pub fn fingerprint(spec: &ModelSpec) -> u64 {
    descriptor_hash(&spec.descriptor())
}

fn descriptor_hash(descriptor: &str) -> u64 {
    let digest = Sha256::digest(descriptor.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Immutable snapshot of trained weights plus provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    spec: ModelSpec,
    layers: Vec<LayerState<f32>>,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, provenance: Provenance) -> Self {
        Checkpoint {
            spec: model.spec().clone(),
            layers: model.layers().to_vec(),
            provenance,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerState<f32>] {
        &self.layers
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint(&self.spec)
    }

    pub fn to_model(&self) -> Model<f32> {
        Model::new(self.spec.clone(), self.layers.clone()).expect("checkpoint layers match spec")
    }

    /// Short hash of the serialized bytes, used as a provenance key.
    pub fn content_hash(&self) -> String {
        crate::io_util::short_hash(&self.to_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let descriptor = self.spec.descriptor();
        put_str(&mut out, &descriptor);
        out.extend_from_slice(&descriptor_hash(&descriptor).to_le_bytes());
        put_str(&mut out, &self.provenance.dataset_id);
        out.extend_from_slice(&self.provenance.seed.to_le_bytes());
        out.extend_from_slice(&self.provenance.iterations.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            let start = out.len();
            put_str(&mut out, &layer.origin);
            out.push(layer.frozen as u8);
            for t in [&layer.weights, &layer.bias] {
                out.extend_from_slice(&(t.len() as u32).to_le_bytes());
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            let crc = crc32fast::hash(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::Corrupt("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let descriptor = r.string()?;
        let stored = r.u64()?;
        let computed = descriptor_hash(&descriptor);
        if stored != computed {
            return Err(CheckpointError::Fingerprint {
                expected: computed,
                found: stored,
            });
        }
        let spec: ModelSpec = descriptor
            .parse()
            .map_err(|e| CheckpointError::Corrupt(format!("descriptor: {e}")))?;
        let provenance = Provenance {
            dataset_id: r.string()?,
            seed: r.u64()?,
            iterations: r.u64()?,
        };
        let count = r.u32()? as usize;
        let indices = spec.weight_layer_indices();
        if count != indices.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{count} layer blobs for {} weight layers",
                indices.len()
            )));
        }
        let mut layers = Vec::with_capacity(count);
        for (ordinal, &index) in indices.iter().enumerate() {
            let start = r.pos;
            let origin = r.string()?;
            let frozen = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(CheckpointError::Corrupt(format!("frozen flag {b}"))),
            };
            let (wshape, bshape) = spec.param_shapes(index).expect("weight layer");
            let weights = r.floats(&wshape)?;
            let bias = r.floats(&bshape)?;
            let crc = crc32fast::hash(&bytes[start..r.pos]);
            if r.u32()? != crc {
                return Err(CheckpointError::Checksum { layer: ordinal + 1 });
            }
            layers.push(LayerState {
                weights,
                bias,
                frozen,
                origin,
            });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Model::new(spec.clone(), layers.clone())?;
        Ok(Checkpoint {
            spec,
            layers,
            provenance,
        })
    }

    /// Loads and additionally checks the architecture against `spec`.
    pub fn load_for(path: &Path, spec: &ModelSpec) -> Result<Self, CheckpointError> {
        let ckpt = load(path)?;
        let expected = fingerprint(spec);
        if ckpt.fingerprint() != expected {
            return Err(CheckpointError::Fingerprint {
                expected,
                found: ckpt.fingerprint(),
            });
        }
        Ok(ckpt)
    }
}

/// Atomic write: a temp file is renamed over `path`.
pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    crate::io_util::write_atomic(path, &ckpt.to_bytes()).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            CheckpointError::Corrupt(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("invalid UTF-8 string".into()))
    }

    fn floats(&mut self, shape: &[usize]) -> Result<Tensor<f32>, CheckpointError> {
        let count = self.u32()? as usize;
        let expected: usize = shape.iter().product();
        if count != expected {
            return Err(CheckpointError::Corrupt(format!(
                "blob holds {count} values, shape {shape:?} needs {expected}"
            )));
        }
        let raw = self.take(count * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::from_vec(shape, data)?)
    }
}
