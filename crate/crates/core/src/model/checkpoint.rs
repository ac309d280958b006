//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PCAPSCKP"              8 bytes
//! version                 u32 (= 1)
//! scalar width            u8  (4 or 8)
//! config hash             32 bytes, SHA-256 of the canonical model file
//! iteration               u64
//! seed                    u64
//! config text             u32 length + UTF-8 TOML
//! weights                 bundle
//! optimizer kind          u32 length + UTF-8 ("" when absent)
//! optimizer step          u64
//! moment bundles          u32 count + bundles
//! checksum                32 bytes, SHA-256 of everything above
//!
//! bundle = u32 tensor count, then per tensor:
//!          u32 rank, rank x u64 extents, raw scalars
//! ```
//!
//! Weights are written layer by layer in declaration order.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::ParamBundle;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PCAPSCKP";
const VERSION: u32 = 1;

/// Saved optimizer state: a kind tag, the step counter and moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub kind: String,
    pub step: u64,
    pub moments: Vec<ParamBundle<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub iteration: u64,
    pub seed: u64,
    pub params: ParamBundle<T>,
    pub optimizer: Option<OptimizerState<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::BYTES as u8);
        out.extend_from_slice(&self.config.content_hash());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_str(&mut out, &self.config.to_toml());
        put_bundle(&mut out, &self.params);
        match &self.optimizer {
            Some(opt) => {
                put_str(&mut out, &opt.kind);
                out.extend_from_slice(&opt.step.to_le_bytes());
                out.extend_from_slice(&(opt.moments.len() as u32).to_le_bytes());
                for m in &opt.moments {
                    put_bundle(&mut out, m);
                }
            }
            None => {
                put_str(&mut out, "");
                out.extend_from_slice(&0u64.to_le_bytes());
                out.extend_from_slice(&0u32.to_le_bytes());
            }
        }
        let digest: [u8; 32] = Sha256::digest(&out).into();
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let width = r.take(1)?[0] as usize;
        if width != T::BYTES {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {width}-byte scalars, reader expects {} ({})",
                T::BYTES,
                T::TAG
            )));
        }
        let hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let iteration = r.u64()?;
        let seed = r.u64()?;
        let config = ModelConfig::from_toml(&r.string()?)?;
        if config.content_hash() != hash {
            return Err(Error::Checkpoint("config hash does not match stored config".into()));
        }
        let params = r.bundle::<T>()?;
        params.check(&config)?;
        let kind = r.string()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let moments = (0..count)
            .map(|_| r.bundle::<T>())
            .collect::<Result<Vec<_>>>()?;
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let optimizer = (!kind.is_empty()).then_some(OptimizerState {
            kind,
            step,
            moments,
        });
        Ok(Checkpoint {
            config,
            iteration,
            seed,
            params,
            optimizer,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}

/// Scalar width recorded in a checkpoint file, without decoding the rest.
pub fn scalar_width(path: &Path) -> Result<usize> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if bytes.len() < 13 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    Ok(bytes[12] as usize)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_bundle<T: Scalar>(out: &mut Vec<u8>, bundle: &ParamBundle<T>) {
    out.extend_from_slice(&(bundle.kernels.len() as u32).to_le_bytes());
    for k in &bundle.kernels {
        out.extend_from_slice(&(k.shape().len() as u32).to_le_bytes());
        for &d in k.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in k.data() {
            v.write_le(out);
        }
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
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
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

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }

    fn bundle<T: Scalar>(&mut self) -> Result<ParamBundle<T>> {
        let count = self.u32()? as usize;
        let mut kernels = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let rank = self.u32()? as usize;
            let dims = (0..rank)
                .map(|_| self.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint("tensor extents overflow".into()))?;
            let raw = self.take(
                len.checked_mul(T::BYTES)
                    .ok_or_else(|| Error::Checkpoint("tensor extents overflow".into()))?,
            )?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            kernels.push(Tensor::new(dims, data)?);
        }
        Ok(ParamBundle { kernels })
    }
}
