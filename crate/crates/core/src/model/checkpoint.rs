//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `HGCK`, format version `u32`, config JSON
//! length `u32` and bytes, tensor count `u32`, then per tensor a `u16` name
//! length and name, `u8` rank and `u32` dims, and `f32` values. A SHA-256
//! of everything before it closes the file.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::params::{ModelParams, Tensor};
use super::Model;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HGCK";
const VERSION: u32 = 1;

pub fn encode(model: &Model) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config())?;
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg);
    let tensors = &model.params().tensors;
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(digest.as_slice());
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("content hash mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()? as usize;
    let cfg: ModelConfig = serde_json::from_slice(r.take(n)?)?;
    cfg.validate()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        tensors.push(Tensor { name, shape, data });
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    Model::from_params(cfg, ModelParams { tensors }).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Writes atomically: a temporary file in the same directory, then rename.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    write_atomic(path, &encode(model)?)
}

pub fn load(path: &Path) -> Result<Model> {
    decode(&std::fs::read(path)?)
}

/// Loads and rejects a checkpoint whose config differs from `expected`.
pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Model> {
    let model = load(path)?;
    if model.config() != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint config does not match: stored {:?}, expected {:?}",
            model.config(),
            expected
        )));
    }
    Ok(model)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        Model::init(ModelConfig::desk(2, 4, 3), 3).unwrap()
    }

    #[test]
    fn round_trip_rounds_to_f32() {
        let m = model();
        let back = decode(&encode(&m).unwrap()).unwrap();
        assert_eq!(back.config(), m.config());
        for (a, b) in m.params().tensors.iter().zip(&back.params().tensors) {
            assert_eq!(a.name, b.name);
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| *x as f32 as f64 == *y));
        }
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = encode(&model()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(_))));
        assert!(decode(b"nope").is_err());
    }

    #[test]
    fn config_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&model(), &path).unwrap();
        let other = ModelConfig { layers: 3, ..ModelConfig::desk(2, 4, 3) };
        assert!(matches!(load_expecting(&path, &other), Err(Error::Checkpoint(_))));
        load_expecting(&path, &ModelConfig::desk(2, 4, 3)).unwrap();
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m = model();
        let mut params = m.params().clone();
        params.tensors[2].shape = vec![params.tensors[2].data.len()];
        let bad = Model { config: m.config().clone(), index: m.index.clone(), params };
        assert!(matches!(decode(&encode(&bad).unwrap()), Err(Error::Checkpoint(_))));
    }
}
