//! Binary checkpoints of [`TrainState`], so forward and reverse passes can run
//! in separate processes.
//!
//! Layout, little-endian: magic, `u32` version, `u32` frac bits, `u64` t,
//! 8-byte config hash, `u64` length, raw `w`, raw `v`, then one buffer per
//! element as written by [`InfoBuffer::write_le`].

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::TrainState;
use crate::error::{Error, Result};
use crate::fixed::FixedVec;
use crate::revbuf::{take, InfoBuffer};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"RVLNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// First 8 bytes of SHA-256 over a canonical config serialization.
pub fn config_hash(canonical: &[u8]) -> [u8; 8] {
    let digest = Sha256::digest(canonical);
    digest[..8].try_into().unwrap()
}

impl TrainState {
    pub fn to_checkpoint(&self, config_hash: [u8; 8]) -> Vec<u8> {
        let n = self.len();
        let mut out = Vec::with_capacity(40 + 16 * n + 4 * n);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.frac_bits().to_le_bytes());
        out.extend_from_slice(&(self.t as u64).to_le_bytes());
        out.extend_from_slice(&config_hash);
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for x in self.w.as_raw().iter().chain(self.v.as_raw()) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for b in &self.buffers {
            b.write_le(&mut out);
        }
        out
    }

    /// Parses a checkpoint. With `expected_hash`, a different config hash is
    /// rejected.
    pub fn from_checkpoint(bytes: &[u8], expected_hash: Option<[u8; 8]>) -> Result<(Self, [u8; 8])> {
        let mut input = bytes;
        if take::<8>(&mut input)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a revlearn checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take::<4>(&mut input)?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let frac_bits = u32::from_le_bytes(take::<4>(&mut input)?);
        if frac_bits > 62 {
            return Err(Error::Checkpoint(format!("frac_bits {frac_bits} out of range")));
        }
        let t = u64::from_le_bytes(take::<8>(&mut input)?) as usize;
        let hash = take::<8>(&mut input)?;
        if let Some(want) = expected_hash {
            if want != hash {
                return Err(Error::Checkpoint("checkpoint was written under a different configuration".into()));
            }
        }
        let n = u64::from_le_bytes(take::<8>(&mut input)?) as usize;
        if input.len() < n.saturating_mul(16) {
            return Err(Error::Checkpoint(format!("checkpoint declares {n} elements but is too short")));
        }
        let read_words = |input: &mut &[u8]| -> Vec<i64> {
            (0..n).map(|_| i64::from_le_bytes(take::<8>(input).unwrap())).collect()
        };
        let w = read_words(&mut input);
        let v = read_words(&mut input);
        let buffers = (0..n).map(|_| InfoBuffer::read_le(&mut input)).collect::<Result<Vec<_>>>()?;
        if !input.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after checkpoint", input.len())));
        }
        let state = TrainState {
            w: FixedVec::from_raw(w, frac_bits),
            v: FixedVec::from_raw(v, frac_bits),
            buffers,
            t,
        };
        Ok((state, hash))
    }

    pub fn save(&self, path: &Path, config_hash: [u8; 8]) -> Result<()> {
        fs::write(path, self.to_checkpoint(config_hash)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, expected_hash: Option<[u8; 8]>) -> Result<(Self, [u8; 8])> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(&bytes, expected_hash)
    }
}
