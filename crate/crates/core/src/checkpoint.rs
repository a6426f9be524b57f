//! Binary container for parameters and cached latents.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "PVLCKPT\0" | u32 version | u64 header_len | header JSON
//! u64 tensor_count
//! per tensor: u32 name_len | name | u32 ndim | u64 dims[ndim] | u64 byte_len | f32 data
//! 32-byte SHA-256 of every preceding byte
//! ```

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::vocab;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{ParamStore, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"PVLCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Header JSON plus named f32 tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&((t.numel() * 4) as u64).to_le_bytes());
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + DIGEST_LEN {
            return Err(Error::Checksum);
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum);
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = r.u64()? as usize;
        let header = serde_json::from_slice(r.take(header_len)?)?;
        let count = r.u64()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        let mut seen = HashSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            if !seen.insert(name.clone()) {
                return Err(Error::Format(format!("tensor `{name}` appears twice")));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let byte_len = r.u64()? as usize;
            let numel: usize = shape.iter().product();
            if byte_len != numel * 4 {
                return Err(Error::Format(format!(
                    "tensor `{name}` declares {byte_len} bytes for shape {shape:?}"
                )));
            }
            let data = r
                .take(byte_len)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after tensor records".into()));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub size: usize,
    pub pad: usize,
    pub mask: usize,
    pub cls: usize,
    pub unk: usize,
}

impl Default for VocabSpec {
    fn default() -> Self {
        Self {
            size: vocab::SIZE,
            pad: vocab::PAD,
            mask: vocab::MASK,
            cls: vocab::CLS,
            unk: vocab::UNK,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub vocab: VocabSpec,
    pub seed: u64,
    pub step: u64,
}

/// Writes every parameter of `store` in registration order.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &ModelConfig,
    store: &ParamStore<T>,
    seed: u64,
    step: u64,
) -> Result<()> {
    checkpoint_container(model, store, seed, step)?.save(path)
}

pub fn checkpoint_container<T: Scalar>(
    model: &ModelConfig,
    store: &ParamStore<T>,
    seed: u64,
    step: u64,
) -> Result<Container> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        model: model.clone(),
        vocab: VocabSpec::default(),
        seed,
        step,
    };
    Ok(Container {
        header: serde_json::to_value(&header)?,
        tensors: store
            .ids()
            .map(|id| (store.name(id).to_string(), store.tensor(id).cast()))
            .collect(),
    })
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub container: Container,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_container(Container::load(path)?)
}

pub fn checkpoint_from_container(container: Container) -> Result<Checkpoint> {
    let header: CheckpointHeader = serde_json::from_value(container.header.clone())?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            found: header.format_version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(Checkpoint { header, container })
}

impl Checkpoint {
    /// Copies every parameter of `store` from the checkpoint. Each name must
    /// be present with a matching shape.
    pub fn restore<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.name(id).to_string();
            let t = self
                .container
                .tensor(&name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            store.set(id, t.cast())?;
        }
        let expected = store.len();
        if self.container.tensors.len() != expected {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model has {expected}",
                self.container.tensors.len()
            )));
        }
        Ok(())
    }
}
