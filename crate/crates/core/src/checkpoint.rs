//! Checkpoint serialization.
//!
//! Layout: an 8-byte magic, a format version, the resolved run configuration
//! as a JSON blob, a tensor table of (name, dtype, shape, data offset), and
//! the raw tensor values in little-endian f64. Values round-trip bit-exactly,
//! so a reloaded model reproduces decoding output identically.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Result, SiclError};
use crate::model::Model;
use crate::params::ParamStore;

pub const CKPT_MAGIC: &[u8; 8] = b"SICLCKPT";
pub const CKPT_VERSION: u32 = 1;
/// The only dtype currently written.
const DTYPE_F64: u8 = 0;

fn bad(path: &Path, what: impl std::fmt::Display) -> SiclError {
    SiclError::Format(format!("{}: {what}", path.display()))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(bad(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("eight bytes")))
    }
}

/// Writes the model weights and the fully resolved configuration.
pub fn save_checkpoint(path: &Path, cfg: &RunConfig, model: &Model) -> Result<()> {
    let config_json = serde_json::to_vec(cfg)?;
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&config_json);

    let params: Vec<_> = model.params.iter().collect();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for p in &params {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(DTYPE_F64);
        out.push(p.shape.len() as u8);
        for &d in &p.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += (p.data.len() * 8) as u64;
    }
    for p in &params {
        for &v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a checkpoint back into a model plus its configuration.
pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, Model)> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { path, bytes: &bytes, pos: 0 };
    if r.take(8)? != CKPT_MAGIC {
        return Err(bad(path, "bad checkpoint magic"));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(bad(path, format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let cfg: RunConfig = serde_json::from_slice(r.take(cfg_len)?)?;
    cfg.model.validate()?;

    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| bad(path, "tensor name is not utf-8"))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(bad(path, format!("unsupported dtype {dtype} for {name}")));
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let offset = r.u64()? as usize;
        entries.push((name, shape, offset));
    }
    let data = &bytes[r.pos..];
    let mut store = ParamStore::new();
    for (name, shape, offset) in entries {
        let n: usize = shape.iter().product();
        if offset % 8 != 0 || offset + n * 8 > data.len() {
            return Err(bad(path, format!("tensor {name} overruns the data section")));
        }
        let values: Vec<f64> = data[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        let id = store.zeros(&name, shape);
        store.get_mut(id).data = values;
    }

    let model = Model::from_store(cfg.model.clone(), store);
    // The walk must agree with the stored table; a mismatch means the
    // checkpoint belongs to a different architecture.
    let expected = model.num_values();
    let actual: usize = model.params.total_values();
    if expected != actual {
        return Err(bad(
            path,
            format!("checkpoint holds {actual} values, configuration expects {expected}"),
        ));
    }
    Ok((cfg, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn tiny_run_config() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.model.feature_dim = 4;
        cfg.model.model_dim = 8;
        cfg.model.num_heads = 2;
        cfg.model.ff_dim = 10;
        cfg.model.enc_layers = 1;
        cfg.model.dec_layers = 1;
        cfg
    }

    #[test]
    fn save_and_load_round_trip_bit_exactly() {
        let run = tiny_run_config();
        let model = Model::new(run.model.clone(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &run, &model).unwrap();
        let (run2, model2) = load_checkpoint(&path).unwrap();
        assert_eq!(run, run2);
        for (a, b) in model.params.iter().zip(model2.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert_eq!(a.data, b.data, "values drifted for {}", a.name);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let run = tiny_run_config();
        let model = Model::new(run.model.clone(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &run, &model).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(SiclError::Format(_))));

        let mut bad_version = good.clone();
        bad_version[8] = 99;
        std::fs::write(&path, &bad_version).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(SiclError::Format(_))));

        std::fs::write(&path, &good[..good.len() - 16]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
