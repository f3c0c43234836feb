//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SCM1" | u32 version | u32 len, config text | u32 len, vocabulary lines
//! | u32 count | count × (u32 len, name | u32 ndim | ndim × u32 | f32 data)
//! | 32-byte SHA-256 of everything before it
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::RunConfig;
use crate::encoders::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::ranking::Model;

pub const MAGIC: &[u8; 4] = b"SCM1";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Decoded container contents. Values are widened back to f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

/// Serializes the model. Parameters are narrowed to f32.
pub fn encode(model: &Model, config: &RunConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION as usize);
    let mut cfg = config.clone();
    cfg.model = model.config.clone();
    put_str(&mut out, &cfg.to_text(false));
    put_str(&mut out, &model.vocab.to_lines());
    put_u32(&mut out, model.store.len());
    for (_, p) in model.store.iter() {
        put_str(&mut out, &p.name);
        put_u32(&mut out, p.value.shape().len());
        for &s in p.value.shape() {
            put_u32(&mut out, s);
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, config: &RunConfig) -> Result<()> {
    fs::write(path, encode(model, config))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(Error::Checksum)?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Data("checkpoint string is not UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 + DIGEST_LEN || &bytes[..4] != MAGIC {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(Error::Data("not a checkpoint file (bad magic)".into()));
        }
        return Err(Error::Checksum);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum);
    }
    let mut r = Reader { buf: body, at: 8 };
    let config = RunConfig::from_text(&r.string()?)?;
    let vocab = Vocabulary::from_lines(&r.string()?)?;
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or(Error::Checksum)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.at != body.len() {
        return Err(Error::Data("trailing bytes in checkpoint".into()));
    }
    Ok(Checkpoint {
        config,
        vocab,
        tensors,
    })
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

impl Checkpoint {
    /// Builds a model for `config` and fills every parameter it implies.
    pub fn into_model_with(self, config: &RunConfig) -> Result<Model> {
        let mut model = Model::new(config.model.clone(), self.vocab, config.train.seed)?;
        let mut seen = HashSet::new();
        for (name, t) in self.tensors {
            if !seen.insert(name.clone()) {
                return Err(Error::Inventory(format!("tensor {name} appears twice")));
            }
            if model.store.find(&name).is_none() {
                return Err(Error::Inventory(format!("unexpected tensor {name}")));
            }
            model.store.assign(&name, t)?;
        }
        if let Some((_, p)) = model.store.iter().find(|(_, p)| !seen.contains(&p.name)) {
            return Err(Error::Inventory(format!("missing tensor {}", p.name)));
        }
        Ok(model)
    }

    pub fn into_model(self) -> Result<(Model, RunConfig)> {
        let config = self.config.clone();
        Ok((self.into_model_with(&config)?, config))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, RunConfig)> {
    read_checkpoint(path)?.into_model()
}
