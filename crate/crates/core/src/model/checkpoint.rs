//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! "IBRO" | version u32 | vocab u32 | d_model u32 | n_layers u32 | n_heads u32
//!        | max_seq_len u32 | has_value_head u8 | seed u64 | param_count u64
//!        | param_count x f32 (declaration order)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::PolicyParams;
use super::{ModelConfig, ModelError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IBRO";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(params: &PolicyParams<f32>, mut w: W) -> Result<(), ModelError> {
    let c = params.config();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for v in [c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.max_seq_len] {
        let v = u32::try_from(v).map_err(|_| ModelError::Checkpoint(format!("{v} does not fit u32")))?;
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&[c.has_value_head as u8])?;
    w.write_all(&c.seed.to_le_bytes())?;
    w.write_all(&(params.param_count() as u64).to_le_bytes())?;
    for t in params.tensors() {
        for x in t.values() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint. When `expected` is given, the stored config must match
/// it exactly.
pub fn read_checkpoint<R: Read>(mut r: R, expected: Option<&ModelConfig>) -> Result<PolicyParams<f32>, ModelError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        *d = read_u32(&mut r)? as usize;
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let seed = read_u64(&mut r)?;
    let config = ModelConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_layers: dims[2],
        n_heads: dims[3],
        max_seq_len: dims[4],
        has_value_head: match flag[0] {
            0 => false,
            1 => true,
            b => return Err(ModelError::Checkpoint(format!("bad value-head flag {b}"))),
        },
        seed,
    };
    config.validate()?;
    if let Some(exp) = expected {
        if exp != &config {
            return Err(ModelError::Checkpoint(format!(
                "config mismatch: checkpoint has {config:?}, expected {exp:?}"
            )));
        }
    }
    let count = read_u64(&mut r)? as usize;
    let mut buf = vec![0u8; count.checked_mul(4).ok_or_else(|| ModelError::Checkpoint("parameter count overflow".into()))?];
    r.read_exact(&mut buf)?;
    let flat: Vec<f32> = buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(ModelError::Checkpoint("trailing bytes after parameters".into()));
    }
    PolicyParams::from_flat(&config, &flat)
}

pub fn save_checkpoint(params: &PolicyParams<f32>, path: &Path) -> Result<(), ModelError> {
    write_checkpoint(params, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<PolicyParams<f32>, ModelError> {
    read_checkpoint(BufReader::new(File::open(path)?), expected)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
