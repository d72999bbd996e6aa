//! Binary checkpoints and map snapshots with JSON sidecars.
//!
//! Every binary file starts with a little-endian `u32` version followed by
//! an eight byte magic tag. All numbers are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mapping::{ConvLstmParams, SemanticMap};
use crate::pose::DiscretePose;
use crate::tensor::Grid3;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const SNAPSHOT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"SSLMCKPT";
const SNAPSHOT_MAGIC: &[u8; 8] = b"SSLMMAP\0";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn header(&mut self, magic: &[u8; 8], version: u32, what: &str) -> Result<()> {
        let v = self.u32()?;
        if v != version {
            return Err(Error::Format(format!("{what} version {v}, expected {version}")));
        }
        if self.take(8)? != magic {
            return Err(Error::Format(format!("not a {what} file")));
        }
        Ok(())
    }

    fn finish(&self, what: &str) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes in {what}", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Layout: version, magic, `L`, `k` (u32), logit scale (f64), block count
/// (u32), then per block a name (u32 length + UTF-8), a u64 value count and
/// the values.
pub fn params_to_bytes(params: &ConvLstmParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(params.classes() as u32).to_le_bytes());
    out.extend_from_slice(&(params.kernel() as u32).to_le_bytes());
    out.extend_from_slice(&params.logit_scale().to_le_bytes());
    let blocks = params.blocks();
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, values) in blocks {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        put_f64s(&mut out, values);
    }
    out
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<ConvLstmParams> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")?;
    let classes = r.u32()? as usize;
    let kernel = r.u32()? as usize;
    let scale = r.f64()?;
    let mut params = ConvLstmParams::zeros(classes, kernel, scale)?;
    let count = r.u32()? as usize;
    let names = ConvLstmParams::block_names();
    if count != names.len() {
        return Err(Error::Format(format!("{count} parameter blocks, expected {}", names.len())));
    }
    let mut flat = Vec::with_capacity(params.len());
    for (expected, (_, block)) in names.iter().zip(params.blocks()) {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Format("block name is not UTF-8".into()))?;
        if name != expected {
            return Err(Error::Format(format!("block '{name}' where '{expected}' was expected")));
        }
        let len = r.u64()? as usize;
        if len != block.len() {
            return Err(Error::Format(format!("block {name} has {len} values, expected {}", block.len())));
        }
        flat.extend(r.f64s(len)?);
    }
    r.finish("checkpoint")?;
    params.set_flat(&flat)?;
    Ok(params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub epoch: usize,
    pub loss: Option<f64>,
    pub config_hash: String,
}

/// SHA-256 of the value's JSON encoding, as hex.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let json = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

/// Sidecar path: `foo.ckpt` -> `foo.json`.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

pub fn save_checkpoint(path: &Path, params: &ConvLstmParams, manifest: &CheckpointManifest) -> Result<()> {
    std::fs::write(path, params_to_bytes(params))?;
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ConvLstmParams> {
    params_from_bytes(&std::fs::read(path)?)
}

pub fn load_manifest(path: &Path) -> Result<CheckpointManifest> {
    let m: CheckpointManifest = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    if m.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("manifest version {}, expected {CHECKPOINT_VERSION}", m.version)));
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub version: u32,
    pub step: usize,
    pub pose: DiscretePose,
    pub source: String,
}

/// Layout: version, magic, `L`, `H`, `W` (u32), then the grid and the cell
/// state as row-major f64.
pub fn map_to_bytes(map: &SemanticMap) -> Vec<u8> {
    let (l, h, w) = map.grid.shape();
    let mut out = Vec::with_capacity(24 + 16 * l * h * w);
    out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
    out.extend_from_slice(SNAPSHOT_MAGIC);
    for d in [l, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    put_f64s(&mut out, map.grid.data());
    put_f64s(&mut out, map.cell.data());
    out
}

pub fn map_from_bytes(bytes: &[u8]) -> Result<SemanticMap> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, "map snapshot")?;
    let (l, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let n = l
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Format("snapshot dimensions overflow".into()))?;
    let grid = Grid3::from_vec(l, h, w, r.f64s(n)?)?;
    let cell = Grid3::from_vec(l, h, w, r.f64s(n)?)?;
    r.finish("map snapshot")?;
    Ok(SemanticMap { grid, cell })
}

pub fn save_snapshot(path: &Path, map: &SemanticMap, meta: &SnapshotMeta) -> Result<()> {
    std::fs::write(path, map_to_bytes(map))?;
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn load_snapshot(path: &Path) -> Result<(SemanticMap, SnapshotMeta)> {
    let map = map_from_bytes(&std::fs::read(path)?)?;
    let meta: SnapshotMeta = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    if meta.version != SNAPSHOT_VERSION {
        return Err(Error::Format(format!("snapshot sidecar version {}", meta.version)));
    }
    Ok((map, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_round_trip_bit_exact() {
        let p = ConvLstmParams::init(3, 3, 5.0, 7).unwrap();
        let bytes = params_to_bytes(&p);
        assert_eq!(&bytes[..4], &CHECKPOINT_VERSION.to_le_bytes());
        let q = params_from_bytes(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(params_to_bytes(&q), bytes);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let p = ConvLstmParams::init(2, 3, 5.0, 1).unwrap();
        let bytes = params_to_bytes(&p);
        assert!(params_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(params_from_bytes(&extra).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = 9;
        assert!(matches!(params_from_bytes(&wrong), Err(Error::Format(_))));
        let mut magic = bytes;
        magic[5] = b'x';
        assert!(params_from_bytes(&magic).is_err());
    }

    #[test]
    fn map_round_trip() {
        let mut m = SemanticMap::new(2, 3, 4);
        m.grid.set(1, 2, 3, 0.25);
        m.cell.set(0, 0, 1, -1.5);
        let back = map_from_bytes(&map_to_bytes(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = config_hash(&serde_json::json!({"x": 1})).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a, config_hash(&serde_json::json!({"x": 1})).unwrap());
        assert_ne!(a, config_hash(&serde_json::json!({"x": 2})).unwrap());
    }
}
