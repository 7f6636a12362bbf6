//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "GLAYCKPT"
//! version    u32      1
//! config     6 × u64  n_layers, d_model, n_heads, d_mlp, context_len, vocab_size
//! seed       u64
//! tag        u64      caller-defined (the CLI stores a config hash prefix)
//! count      u64      number of parameters
//! params     count × f64, in layout order
//! ```

use std::path::Path;

use super::{Layout, ModelConfig, ToyModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GLAYCKPT";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 6 * 8 + 8 + 8 + 8;

pub fn write_checkpoint(model: &ToyModel, tag: u64) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::with_capacity(HEADER_LEN + model.params.len() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [c.n_layers, c.d_model, c.n_heads, c.d_mlp, c.context_len, c.vocab_size] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&model.seed.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for p in &model.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

fn u64_at(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
}

/// Parses a checkpoint; returns the model and its tag.
pub fn read_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<(ToyModel, u64)> {
    if bytes.len() < 12 {
        return Err(Error::Corruption(format!("{} bytes is too short for a header", bytes.len())));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Corruption("truncated header".into()));
    }
    let dims: Vec<usize> = (0..6).map(|i| u64_at(bytes, 12 + 8 * i) as usize).collect();
    let config = ModelConfig {
        n_layers: dims[0],
        d_model: dims[1],
        n_heads: dims[2],
        d_mlp: dims[3],
        context_len: dims[4],
        vocab_size: dims[5],
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("invalid config block: {e}")))?;
    if let Some(exp) = expected {
        if *exp != config {
            return Err(Error::Format(format!(
                "checkpoint config {config:?} does not match expected {exp:?}"
            )));
        }
    }
    let seed = u64_at(bytes, 60);
    let tag = u64_at(bytes, 68);
    let count = u64_at(bytes, 76) as usize;
    let layout = Layout::new(&config);
    if count != layout.total {
        return Err(Error::Corruption(format!(
            "parameter count {count} does not match config ({})",
            layout.total
        )));
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() != count * 8 {
        return Err(Error::Corruption(format!(
            "expected {} parameter bytes, found {}",
            count * 8,
            body.len()
        )));
    }
    let params = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((
        ToyModel {
            config,
            layout,
            params,
            seed,
        },
        tag,
    ))
}

pub fn save_checkpoint(model: &ToyModel, path: &Path, tag: u64) -> Result<()> {
    std::fs::write(path, write_checkpoint(model, tag)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<(ToyModel, u64)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ToyModel {
        let c = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_mlp: 16,
            context_len: 6,
            vocab_size: 11,
        };
        ToyModel::init(c, 9).unwrap()
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let m = model();
        let bytes = write_checkpoint(&m, 42);
        let (back, tag) = read_checkpoint(&bytes, Some(&m.config)).unwrap();
        assert_eq!(tag, 42);
        assert_eq!(back, m);
        assert_eq!(write_checkpoint(&back, tag), bytes);
    }

    #[test]
    fn detects_damage() {
        let m = model();
        let bytes = write_checkpoint(&m, 0);
        assert!(matches!(
            read_checkpoint(&bytes[..bytes.len() - 3], None),
            Err(Error::Corruption(_))
        ));
        assert!(matches!(read_checkpoint(&bytes[..20], None), Err(Error::Corruption(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&bad, None), Err(Error::Format(_))));
        let mut other = m.config;
        other.d_mlp = 32;
        assert!(matches!(read_checkpoint(&bytes, Some(&other)), Err(Error::Format(_))));
    }
}
