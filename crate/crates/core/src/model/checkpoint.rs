//! Versioned binary checkpoint.
//!
//! Layout (little endian): magic `OBBNCKPT`, `u32` version, `u32` length and
//! JSON-encoded [`NetworkConfig`], `u64` step counter, `u32` tensor count, then
//! per tensor a `u32` name length, the UTF-8 name, a `u64` element count and
//! the `f32` values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::network::{Network, NetworkConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"OBBNCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub step: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.network.config).map_err(|e| Error::Json {
            context: "checkpoint config".into(),
            source: e,
        })?;
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&self.step.to_le_bytes());
        let tensors = self.network.named_tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, values) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let cfg_len = read_u32(&mut r)? as usize;
        let mut cfg = vec![0u8; cfg_len];
        read_exact(&mut r, &mut cfg)?;
        let config: NetworkConfig = serde_json::from_slice(&cfg).map_err(|e| Error::Json {
            context: "checkpoint config".into(),
            source: e,
        })?;
        let step = read_u64(&mut r)?;
        let count = read_u32(&mut r)? as usize;
        let mut stored = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let len = read_u64(&mut r)? as usize;
            if len.checked_mul(4).is_none_or(|b| b > r.len()) {
                return Err(Error::Checkpoint(format!("tensor {name} truncated")));
            }
            let mut values = Vec::with_capacity(len);
            for chunk in r[..len * 4].chunks_exact(4) {
                values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
            r = &r[len * 4..];
            stored.push((name, values));
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        let mut network = Network::new(config, 0)?;
        load_tensors(&mut network, stored)?;
        Ok(Checkpoint { network, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks the stored configuration against `expected`.
    pub fn load_compatible(path: &Path, expected: &NetworkConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        let got = &ck.network.config;
        let mut diffs = Vec::new();
        if got.variant != expected.variant {
            diffs.push(format!("variant {} vs {}", got.variant, expected.variant));
        }
        for (name, a, b) in [
            ("depth", got.depth, expected.depth),
            ("base_filters", got.base_filters, expected.base_filters),
            ("bb_levels", got.bb_levels, expected.bb_levels),
            ("input_channels", got.input_channels, expected.input_channels),
            ("bbox_channels", got.bbox_channels, expected.bbox_channels),
            ("output_channels", got.output_channels, expected.output_channels),
        ] {
            if a != b {
                diffs.push(format!("{name} {a} vs {b}"));
            }
        }
        if diffs.is_empty() {
            Ok(ck)
        } else {
            Err(Error::Checkpoint(format!(
                "checkpoint incompatible with configuration: {}",
                diffs.join(", ")
            )))
        }
    }
}

fn load_tensors(network: &mut Network, stored: Vec<(String, Vec<f32>)>) -> Result<()> {
    let mut slots = network.named_tensors_mut();
    let mut mismatches = Vec::new();
    if slots.len() != stored.len() {
        mismatches.push(format!("tensor count {} vs expected {}", stored.len(), slots.len()));
    }
    for ((name, dst), (sname, values)) in slots.iter_mut().zip(stored) {
        if *name != sname {
            mismatches.push(format!("{sname} where {name} expected"));
        } else if dst.len() != values.len() {
            mismatches.push(format!("{name}: {} values, expected {}", values.len(), dst.len()));
        } else if values.iter().any(|v| !v.is_finite()) {
            mismatches.push(format!("{name}: non-finite values"));
        } else {
            **dst = values;
        }
    }
    if !mismatches.is_empty() {
        return Err(Error::Checkpoint(format!("shape mismatch: {}", mismatches.join("; "))));
    }
    for p in network.params_mut() {
        p.zero_grad();
    }
    Ok(())
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Checkpoint("unexpected end of file".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
