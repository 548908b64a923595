//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "ESCN" | u32 version | u64 input_dim | u64 hidden_dim | u64 residual_blocks
//!        | u64 output_dim | f64 dropout_rate | u64 seed | u64 tensor_count
//!        | tensor_count x (u64 len | len x f64)
//! ```
//!
//! Tensors follow declaration order, with each batch-norm layer's running
//! mean and variance stored right after its scale and shift.

use std::fs;
use std::path::Path;

use super::{Mode, Network, NetworkConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ESCN";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn network_to_bytes(net: &Network) -> Vec<u8> {
    let cfg = net.config();
    let tensors = net.checkpoint_tensors();
    let total: usize = tensors.iter().map(|t| 8 + 8 * t.len()).sum();
    let mut out = Vec::with_capacity(64 + total);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [cfg.input_dim, cfg.hidden_dim, cfg.residual_blocks, cfg.output_dim] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&cfg.dropout_rate.to_le_bytes());
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
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
            .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos)))?;
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

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::CorruptCheckpoint("size overflow".into()))
    }
}

/// Decodes a checkpoint. The returned network is in eval mode.
pub fn network_from_bytes(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r
        .take(4)
        .map_err(|_| Error::IncompatibleCheckpoint("missing magic bytes".into()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::IncompatibleCheckpoint(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::IncompatibleCheckpoint(format!(
            "format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let config = NetworkConfig {
        input_dim: r.usize()?,
        hidden_dim: r.usize()?,
        residual_blocks: r.usize()?,
        output_dim: r.usize()?,
        dropout_rate: r.f64()?,
        seed: r.u64()?,
    };
    config
        .validate()
        .map_err(|e| Error::CorruptCheckpoint(format!("invalid config block: {e}")))?;
    let count = r.usize()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = r.usize()?;
        let raw = r.take(len.checked_mul(8).ok_or_else(|| {
            Error::CorruptCheckpoint("tensor length overflow".into())
        })?)?;
        tensors.push(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let mut net = Network::from_parts(config, tensors)?;
    net.set_mode(Mode::Eval);
    Ok(net)
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, network_to_bytes(net))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    network_from_bytes(&fs::read(path)?)
}

/// Loads a checkpoint and rejects it unless its layout matches `expected`.
pub fn load_checkpoint_expecting(
    path: impl AsRef<Path>,
    expected: &NetworkConfig,
) -> Result<Network> {
    let net = load_checkpoint(path)?;
    if !net.config().same_shape(expected) {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint layout {:?} does not match expected {:?}",
            net.config(),
            expected
        )));
    }
    Ok(net)
}
