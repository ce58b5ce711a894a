//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//! - magic bytes `NCAC`
//! - format version: u32 (currently 1)
//! - config: channels, steps, update_hidden, classifier_hidden,
//!   num_classes as u32, fire_rate as f32
//! - ten named parameter arrays in fixed order (k1, k2, W1, b1, W2, b2,
//!   W3, b3, W4, b4), each as: name length u32, name bytes, rank u32,
//!   dims as u32 each, values as f32
//! - trailing u64 FNV-1a checksum of all preceding bytes
//!
//! Save -> load -> save is byte-identical; any single-byte corruption of
//! the payload fails the checksum on load.

use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{count_params, NcaConfig, NcaParams, PARAM_NAMES};

pub const MAGIC: [u8; 4] = *b"NCAC";
pub const FORMAT_VERSION: u32 = 1;

/// FNV-1a, 64-bit.
pub fn checksum(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn array_dims(config: &NcaConfig) -> [Vec<u32>; 10] {
    let n = config.channels as u32;
    let hu = config.update_hidden as u32;
    let hc = config.classifier_hidden as u32;
    let c = config.num_classes as u32;
    [
        vec![n, 3, 3],
        vec![n, 3, 3],
        vec![hu, 3 * n],
        vec![hu],
        vec![n, hu],
        vec![n],
        vec![hc, n],
        vec![hc],
        vec![c, hc],
        vec![c],
    ]
}

/// Serializes params and config to `path`.
pub fn save_checkpoint(params: &NcaParams<f32>, config: &NcaConfig, path: &Path) -> Result<()> {
    std::fs::write(path, encode(params, config)).map_err(|e| Error::io(path, e))
}

pub fn encode(params: &NcaParams<f32>, config: &NcaConfig) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + count_params(config) * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for field in [
        config.channels,
        config.steps,
        config.update_hidden,
        config.classifier_hidden,
        config.num_classes,
    ] {
        out.extend_from_slice(&(field as u32).to_le_bytes());
    }
    out.extend_from_slice(&(config.fire_rate as f32).to_le_bytes());
    for ((name, block), dims) in
        PARAM_NAMES.iter().zip(params.blocks()).zip(array_dims(config))
    {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in &dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        if self.pos + len > self.bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let slice = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(slice)
    }

    fn u32(&mut self) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> std::result::Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Loads and verifies a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(NcaParams<f32>, NcaConfig)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|kind| Error::Checkpoint { path: path.to_path_buf(), kind })
}

pub fn decode(bytes: &[u8]) -> std::result::Result<(NcaParams<f32>, NcaConfig), CheckpointError> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(CheckpointError::Truncated);
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = checksum(payload);
    if payload[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }
    let mut r = Reader { bytes: payload, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnknownVersion(version));
    }
    let config = NcaConfig {
        channels: r.u32()? as usize,
        steps: r.u32()? as usize,
        update_hidden: r.u32()? as usize,
        classifier_hidden: r.u32()? as usize,
        num_classes: r.u32()? as usize,
        fire_rate: r.f32()? as f64,
    };
    let mut params = NcaParams::zeros(&config);
    let expected_dims = array_dims(&config);
    for ((name, block), dims) in
        PARAM_NAMES.iter().zip(params.blocks_mut()).zip(expected_dims)
    {
        let name_len = r.u32()? as usize;
        let got_name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::BadArray {
                name: name.to_string(),
                detail: "non-UTF-8 array name".into(),
            })?
            .to_string();
        if got_name != *name {
            return Err(CheckpointError::BadArray {
                name: name.to_string(),
                detail: format!("found array '{got_name}' where '{name}' was expected"),
            });
        }
        let rank = r.u32()? as usize;
        if rank != dims.len() {
            return Err(CheckpointError::BadArray {
                name: name.to_string(),
                detail: format!("rank {rank}, expected {}", dims.len()),
            });
        }
        let mut got_dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            got_dims.push(r.u32()?);
        }
        if got_dims != dims {
            return Err(CheckpointError::BadArray {
                name: name.to_string(),
                detail: format!("dims {got_dims:?}, expected {dims:?}"),
            });
        }
        for slot in block.iter_mut() {
            *slot = r.f32()?;
        }
    }
    if r.pos != payload.len() {
        return Err(CheckpointError::BadArray {
            name: "trailer".into(),
            detail: format!("{} unexpected trailing bytes", payload.len() - r.pos),
        });
    }
    Ok((params, config))
}
