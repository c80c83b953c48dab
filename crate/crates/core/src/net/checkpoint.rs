//! SRW1 weight checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! 0..4    b"SRW1"
//! 4..24   u32 levels, base_channels, convs_per_level, final_kernel, residual (0/1)
//! 24..    f32 parameters in declaration order (kernel then bias per layer)
//! ```
//!
//! Weights are always stored as `f32`, whatever precision they were trained in.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::unet::{NetworkConfig, NetworkWeights};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const SRW1_MAGIC: [u8; 4] = *b"SRW1";
const HEADER_LEN: usize = 24;

pub fn encode_weights<T: Real>(w: &NetworkWeights<T>) -> Vec<u8> {
    let cfg = w.config();
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * w.len());
    buf.extend_from_slice(&SRW1_MAGIC);
    for field in [
        cfg.levels,
        cfg.base_channels,
        cfg.convs_per_level,
        cfg.final_kernel,
        cfg.residual as usize,
    ] {
        buf.write_u32::<LittleEndian>(field as u32).unwrap();
    }
    for p in w.params() {
        buf.write_f32::<LittleEndian>(p.as_f64() as f32).unwrap();
    }
    buf
}

pub fn decode_weights<T: Real>(bytes: &[u8]) -> Result<NetworkWeights<T>> {
    if bytes.len() >= 4 && bytes[..4] != SRW1_MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(&bytes[..4]);
        return Err(Error::BadMagic {
            expected: SRW1_MAGIC,
            found,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let mut rd = Cursor::new(&bytes[4..HEADER_LEN]);
    let mut fields = [0usize; 5];
    for f in &mut fields {
        *f = rd.read_u32::<LittleEndian>().unwrap() as usize;
    }
    let residual = match fields[4] {
        0 => false,
        1 => true,
        other => return Err(Error::Parse(format!("residual flag must be 0 or 1, got {other}"))),
    };
    let config = NetworkConfig {
        levels: fields[0],
        base_channels: fields[1],
        convs_per_level: fields[2],
        final_kernel: fields[3],
        residual,
    };
    config.validate()?;
    let expected = HEADER_LEN + 4 * config.param_count();
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::TrailingBytes(bytes.len() - expected));
    }
    let params = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    NetworkWeights::from_params(config, params)
}

pub fn read_weights<T: Real>(path: impl AsRef<Path>) -> Result<NetworkWeights<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_weights(&bytes)
}

/// Atomic: readers never observe a partial checkpoint.
pub fn write_weights<T: Real>(path: impl AsRef<Path>, w: &NetworkWeights<T>) -> Result<()> {
    crate::io_util::write_atomic(path.as_ref(), &encode_weights(w))
}
