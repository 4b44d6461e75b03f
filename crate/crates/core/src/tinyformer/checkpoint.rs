//! `PSR1` checkpoint files.
//!
//! Layout: the magic bytes `PSR1`, nine little-endian u32 header fields
//! `[version, L, d, heads, ffn_dim, vocab_size, max_positions, k_max, seed]`,
//! every parameter tensor as little-endian f32 in declaration order, then a
//! little-endian CRC32 of everything between the magic and the checksum.

use std::io::{Read, Write};

use thiserror::Error;

use super::{Model, ModelConfig, ModelError, Params};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PSR1";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
    #[error("BadMagic: expected PSR1")]
    BadMagic,
    #[error("UnsupportedVersion: {0}")]
    UnsupportedVersion(u32),
    #[error("CrcMismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("Truncated: expected {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn header(config: &ModelConfig) -> [u32; 9] {
    [
        VERSION,
        config.num_layers as u32,
        config.model_dim as u32,
        config.num_heads as u32,
        config.ffn_dim as u32,
        config.vocab_size as u32,
        config.max_positions as u32,
        config.num_expert_slots as u32,
        config.seed,
    ]
}

/// Serialized checkpoint bytes; returns the CRC written in the trailer.
pub fn write_checkpoint<W: Write>(model: &Model, mut out: W) -> Result<u32, CheckpointError> {
    model.config.validate()?;
    let mut payload = Vec::with_capacity(36 + 4 * model.params.len());
    for v in header(&model.config) {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    for t in model.params.tensors() {
        for &x in t {
            payload.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&payload);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&payload)?;
    out.write_all(&crc.to_le_bytes())?;
    Ok(crc)
}

/// CRC the checkpoint trailer would carry for this model.
pub fn model_fingerprint(model: &Model) -> Result<u32, CheckpointError> {
    write_checkpoint(model, std::io::sink())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(Model, u32), CheckpointError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 4 + 36 + 4 {
        return Err(CheckpointError::Truncated {
            expected: 40,
            found: bytes.len().saturating_sub(8),
        });
    }
    let payload = &bytes[4..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(CheckpointError::CrcMismatch { stored, computed });
    }
    let word = |i: usize| u32::from_le_bytes(payload[4 * i..4 * i + 4].try_into().unwrap());
    if word(0) != VERSION {
        return Err(CheckpointError::UnsupportedVersion(word(0)));
    }
    let config = ModelConfig {
        num_layers: word(1) as usize,
        model_dim: word(2) as usize,
        num_heads: word(3) as usize,
        ffn_dim: word(4) as usize,
        vocab_size: word(5) as usize,
        max_positions: word(6) as usize,
        num_expert_slots: word(7) as usize,
        seed: word(8),
    };
    config.validate()?;
    let mut params = Params::zeros(&config);
    let expected = 36 + 4 * params.len();
    if payload.len() != expected {
        return Err(CheckpointError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let mut floats = payload[36..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())));
    for t in params.tensors_mut() {
        for x in t.iter_mut() {
            *x = floats.next().expect("length checked");
        }
    }
    Ok((Model { config, params }, stored))
}
