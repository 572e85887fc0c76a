//! Hybrid checkpoint container shared by parameter blocks and replay buffers.
//!
//! Layout:
//!
//! ```text
//! magic     8 bytes   b"DMARLCK1"
//! meta_len  u64 LE    length of the JSON metadata in bytes
//! meta      meta_len  UTF-8 JSON object (caller-defined schema)
//! count     u64 LE    number of f64 values that follow
//! payload   count * 8 little-endian IEEE-754 f64
//! ```

use std::io::{Read, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"DMARLCK1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint layout: {0}")]
    Layout(String),
}

pub fn write<M: Serialize>(mut out: impl Write, meta: &M, values: &[f64]) -> Result<(), CheckpointError> {
    let meta = serde_json::to_vec(meta)?;
    out.write_all(MAGIC)?;
    out.write_all(&(meta.len() as u64).to_le_bytes())?;
    out.write_all(&meta)?;
    out.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read<M: DeserializeOwned>(mut input: impl Read) -> Result<(M, Vec<f64>), CheckpointError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let meta_len = read_u64(&mut input)? as usize;
    let mut meta = vec![0u8; meta_len];
    input.read_exact(&mut meta)?;
    let meta = serde_json::from_slice(&meta)?;
    let count = read_u64(&mut input)? as usize;
    let mut values = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        input.read_exact(&mut buf)?;
        values.push(f64::from_le_bytes(buf));
    }
    Ok((meta, values))
}

fn read_u64(input: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let values = [0.1, -0.0, f64::MIN_POSITIVE, 1e300, -3.25];
        let mut buf = Vec::new();
        write(&mut buf, &serde_json::json!({"k": 1}), &values).unwrap();
        let (meta, back): (serde_json::Value, Vec<f64>) = read(&buf[..]).unwrap();
        assert_eq!(meta["k"], 1);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&values));
        assert!(matches!(read::<serde_json::Value>(&b"nope0000"[..]), Err(CheckpointError::BadMagic)));
    }
}
