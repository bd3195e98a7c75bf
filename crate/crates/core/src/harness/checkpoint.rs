//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "ADVLCKPT"
//! version    u32      1 or 2
//! t          u64
//! spec       u32 length + UTF-8 JSON model spec
//! metrics    u32 count, then per entry: u32 length + UTF-8 name, f64      (version 2 only)
//! tensors    u32 count, then per tensor: u32 length + UTF-8 name,
//!            u32 ndim, ndim × u64 dims, product(dims) × f64
//! checksum   32 bytes SHA-256 of every preceding byte
//! ```
//!
//! Version 1 files carry no metrics section and load with an empty metrics list.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{ModelSpec, Params};
use crate::tensor::Tensor;
use crate::training::Checkpoint;

pub const MAGIC: &[u8; 8] = b"ADVLCKPT";
pub const CURRENT_VERSION: u32 = 2;
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCheckpoint {
    pub checkpoint: Checkpoint,
    /// Set when the file used an older format version.
    pub upgraded_from: Option<u32>,
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u32::try_from(s.len()).map_err(|_| Error::InvalidConfig("string too long for checkpoint".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidConfig("count too large for checkpoint".into()))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serialises a checkpoint in the given format version.
pub fn encode_checkpoint(ck: &Checkpoint, version: u32) -> Result<Vec<u8>> {
    if version == 0 || version > CURRENT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(ck.t as u64).to_le_bytes());
    let spec = serde_json::to_string(ck.params.spec()).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    put_str(&mut out, &spec)?;
    if version >= 2 {
        put_u32(&mut out, ck.metrics.len())?;
        for (name, v) in &ck.metrics {
            put_str(&mut out, name)?;
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    put_u32(&mut out, ck.params.tensors().len())?;
    for (name, t) in ck.params.tensors() {
        put_str(&mut out, name)?;
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
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
            .ok_or_else(|| Error::CorruptCheckpoint(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::CorruptCheckpoint(e.to_string()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::CorruptCheckpoint("dimension overflows usize".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<LoadedCheckpoint> {
    if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN {
        return Err(Error::CorruptCheckpoint(format!("file too short ({} bytes)", bytes.len())));
    }
    let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != sum {
        return Err(Error::ChecksumMismatch);
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version == 0 || version > CURRENT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let t = usize::try_from(r.u64()?).map_err(|_| Error::CorruptCheckpoint("t overflows usize".into()))?;
    let spec: ModelSpec =
        serde_json::from_str(&r.string()?).map_err(|e| Error::CorruptCheckpoint(format!("model spec: {e}")))?;
    let mut metrics = Vec::new();
    if version >= 2 {
        for _ in 0..r.u32()? {
            let name = r.string()?;
            metrics.push((name, r.f64()?));
        }
    }
    let count = r.u32()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= (body.len() - r.pos) / 8)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("tensor `{name}` larger than file")))?;
        let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    let params = Params::from_tensors(spec, tensors).map_err(|e| Error::SpecMismatch(e.to_string()))?;
    Ok(LoadedCheckpoint {
        checkpoint: Checkpoint { t, params, metrics },
        upgraded_from: (version < CURRENT_VERSION).then_some(version),
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ck, CURRENT_VERSION)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let loaded = load_checkpoint_detailed(path)?;
    if let Some(v) = loaded.upgraded_from {
        log::info!("{}: upgraded checkpoint from format version {v}", path.display());
    }
    Ok(loaded.checkpoint)
}

pub fn load_checkpoint_detailed(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and checks that it was saved for `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelSpec) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.params.spec() != expected {
        return Err(Error::SpecMismatch(format!(
            "file has {:?}, expected {:?}",
            ck.params.spec(),
            expected
        )));
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::init;

    fn sample() -> Checkpoint {
        let spec = ModelSpec::small_cnn([1, 8, 8], 3);
        Checkpoint {
            t: 7,
            params: init(&spec, 4).unwrap(),
            metrics: vec![("train_loss".into(), 0.25)],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = decode_checkpoint(&encode_checkpoint(&ck, CURRENT_VERSION).unwrap()).unwrap();
        assert_eq!(back.checkpoint, ck);
        assert_eq!(back.upgraded_from, None);
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let mut bytes = encode_checkpoint(&sample(), CURRENT_VERSION).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::ChecksumMismatch)));
    }

    #[test]
    fn version_one_loads_with_upgrade_note() {
        let ck = sample();
        let back = decode_checkpoint(&encode_checkpoint(&ck, 1).unwrap()).unwrap();
        assert_eq!(back.upgraded_from, Some(1));
        assert_eq!(back.checkpoint.params, ck.params);
        assert!(back.checkpoint.metrics.is_empty());
    }

    #[test]
    fn future_version_rejected() {
        let mut bytes = encode_checkpoint(&sample(), CURRENT_VERSION).unwrap();
        bytes.truncate(bytes.len() - CHECKSUM_LEN);
        bytes[8..12].copy_from_slice(&9u32.to_le_bytes());
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::UnsupportedVersion(9))));
    }

    #[test]
    fn spec_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        let other = ModelSpec::mlp(vec![64, 3]);
        assert!(matches!(load_checkpoint_for(&path, &other), Err(Error::SpecMismatch(_))));
        assert_eq!(load_checkpoint(&path).unwrap(), sample());
    }

    #[test]
    fn truncated_file_rejected() {
        assert!(decode_checkpoint(b"ADVLCKPT").is_err());
    }
}
