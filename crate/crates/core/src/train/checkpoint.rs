//! Checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "IDOLCKP1" | version u32 | manifest_len u32 | manifest (UTF-8 JSON) | manifest_crc u32
//! per tensor, in manifest order:
//!   name_len u32 | name | ndim u32 | dims u64 * ndim | f32 * numel | crc u32
//! ```
//!
//! Each record's CRC32 covers everything from `name_len` through the data.
//! Tensors are written in sorted name order and the manifest carries no
//! timestamps, so equal contents give byte-identical files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::denoiser::ParameterStore;
use crate::error::{Error, Result};
use crate::schedule::ScheduleParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"IDOLCKP1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub step: usize,
    pub schedule: ScheduleParams,
    pub config: RunConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParameterStore<f32>,
    pub config: RunConfig,
    pub step: usize,
}

pub fn encode_checkpoint(params: &ParameterStore<f32>, config: &RunConfig, step: usize) -> Result<Vec<u8>> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        step,
        schedule: config.schedule,
        config: config.clone(),
        tensors: params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(json.len() + 4 * params.num_scalars() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&crc32fast::hash(&json).to_le_bytes());
    for (name, t) in params.iter() {
        let start = out.len();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Integrity(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("missing IDOLCKP1 magic bytes".into()));
    }
    r.pos = MAGIC.len();
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = r.u32("manifest length")? as usize;
    let json = r.take(len, "manifest")?;
    if r.u32("manifest checksum")? != crc32fast::hash(json) {
        return Err(Error::Integrity("manifest checksum mismatch".into()));
    }
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| Error::Integrity(format!("manifest unreadable: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let mut params = ParameterStore::new();
    for entry in &manifest.tensors {
        let start = r.pos;
        let name_len = r.u32("name length")? as usize;
        let name = r.take(name_len, "tensor name")?;
        let ndim = r.u32("rank")? as usize;
        if ndim > 8 {
            return Err(Error::Integrity(format!("implausible rank {ndim} for `{}`", entry.name)));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("dimension")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| Error::Integrity(format!("implausible shape {shape:?}")))?;
        let data = r.take(numel * 4, "tensor data")?;
        let body = &bytes[start..r.pos];
        if r.u32("tensor checksum")? != crc32fast::hash(body) {
            return Err(Error::Integrity(format!("checksum mismatch in tensor `{}`", entry.name)));
        }
        if name != entry.name.as_bytes() || shape != entry.shape {
            return Err(Error::Integrity(format!("record does not match manifest entry `{}`", entry.name)));
        }
        let values = data
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params.insert(entry.name.clone(), Tensor::from_vec(&shape, values)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Integrity(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if params.len() != manifest.tensors.len() {
        return Err(Error::Integrity("duplicate tensor names".into()));
    }
    Ok(Checkpoint {
        params,
        config: manifest.config,
        step: manifest.step,
    })
}

pub fn save_checkpoint(params: &ParameterStore<f32>, config: &RunConfig, step: usize, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params, config, step)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{Denoiser, DenoiserConfig};

    fn small() -> (ParameterStore<f32>, RunConfig) {
        let mut run = RunConfig::default();
        run.model = DenoiserConfig::tiny();
        run.data.size = 8;
        let params = Denoiser::new(run.model.clone()).unwrap().init_params(3);
        (params, run)
    }

    #[test]
    fn round_trip_is_exact_and_canonical() {
        let (params, run) = small();
        let bytes = encode_checkpoint(&params, &run, 17).unwrap();
        let ck = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ck.params, params);
        assert_eq!(ck.config, run);
        assert_eq!(ck.step, 17);
        assert_eq!(encode_checkpoint(&ck.params, &ck.config, ck.step).unwrap(), bytes);
    }

    #[test]
    fn payload_tampering_is_an_integrity_error() {
        let (params, run) = small();
        let mut bytes = encode_checkpoint(&params, &run, 0).unwrap();
        let last = bytes.len() - 10;
        bytes[last] ^= 0x01;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Integrity(_))));
    }

    #[test]
    fn version_and_magic_are_checked() {
        let (params, run) = small();
        let mut bytes = encode_checkpoint(&params, &run, 0).unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::Version { found: 2, expected: 1 })
        ));
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode_checkpoint(&[]), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_and_trailing_bytes_are_detected() {
        let (params, run) = small();
        let bytes = encode_checkpoint(&params, &run, 0).unwrap();
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Integrity(_))));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode_checkpoint(&longer), Err(Error::Integrity(_))));
    }
}
