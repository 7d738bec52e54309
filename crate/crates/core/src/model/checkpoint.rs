//! Binary checkpoint format.
//!
//! Little-endian: magic `PDCK`, `u32` version, config block, `u32` tensor
//! count, then per tensor `u32` name length, UTF-8 name, `u32` rank, `u64`
//! dims and raw `f32` values.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::params::Params;
use super::{ModelConfig, ModelError};

const MAGIC: &[u8; 4] = b"PDCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("tensor mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated
        } else {
            CheckpointError::Io(e)
        }
    }
}

fn write_config(out: &mut Vec<u8>, c: &ModelConfig) {
    for v in [c.d_model, c.d_ff, c.n_layers, c.n_heads, c.vocab_size, c.max_len] {
        out.extend((v as u32).to_le_bytes());
    }
    out.extend(c.dropout.to_le_bytes());
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn save_checkpoint(params: &Params<f32>, path: &Path) -> Result<(), CheckpointError> {
    let mut out = Vec::with_capacity(params.num_params() * 4 + 4096);
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    write_config(&mut out, &params.config);
    out.extend((params.layout.specs.len() as u32).to_le_bytes());
    for spec in &params.layout.specs {
        out.extend((spec.name.len() as u32).to_le_bytes());
        out.extend(spec.name.as_bytes());
        out.extend((spec.shape.len() as u32).to_le_bytes());
        for &d in &spec.shape {
            out.extend((d as u64).to_le_bytes());
        }
        for v in params.tensor(params.layout.find(&spec.name).expect("own layout")) {
            out.extend(v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Reads a checkpoint. With `expected`, the embedded config must agree on
/// every shape-determining field.
pub fn load_checkpoint(
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<Params<f32>, CheckpointError> {
    let bytes = fs::read(path)?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = read_u32(&mut r)? as usize;
    }
    let dropout = f64::from_bits(read_u64(&mut r)?);
    let config = ModelConfig {
        d_model: dims[0],
        d_ff: dims[1],
        n_layers: dims[2],
        n_heads: dims[3],
        vocab_size: dims[4],
        max_len: dims[5],
        dropout,
    };
    config.validate()?;
    if let Some(exp) = expected {
        let key = |c: &ModelConfig| (c.d_model, c.d_ff, c.n_layers, c.n_heads, c.vocab_size);
        if key(exp) != key(&config) {
            return Err(CheckpointError::Shape(format!(
                "checkpoint has d_model={} d_ff={} layers={} heads={} vocab={}, expected d_model={} d_ff={} layers={} heads={} vocab={}",
                config.d_model, config.d_ff, config.n_layers, config.n_heads, config.vocab_size,
                exp.d_model, exp.d_ff, exp.n_layers, exp.n_heads, exp.vocab_size
            )));
        }
    }
    let layout = super::Layout::new(&config);
    let count = read_u32(&mut r)? as usize;
    if count != layout.specs.len() {
        return Err(CheckpointError::Shape(format!(
            "{count} tensors stored, config implies {}",
            layout.specs.len()
        )));
    }
    let mut values = vec![0f32; layout.num_params()];
    for spec in &layout.specs {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > r.len() {
            return Err(CheckpointError::Truncated);
        }
        let (name, rest) = r.split_at(name_len);
        r = rest;
        if name != spec.name.as_bytes() {
            return Err(CheckpointError::Shape(format!(
                "expected tensor {}, found {}",
                spec.name,
                String::from_utf8_lossy(name)
            )));
        }
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        if shape != spec.shape {
            return Err(CheckpointError::Shape(format!(
                "{}: stored shape {shape:?}, expected {:?}",
                spec.name, spec.shape
            )));
        }
        let n = spec.numel();
        if r.len() < n * 4 {
            return Err(CheckpointError::Truncated);
        }
        let (data, rest) = r.split_at(n * 4);
        r = rest;
        for (v, chunk) in values[spec.offset..spec.offset + n]
            .iter_mut()
            .zip(data.chunks_exact(4))
        {
            *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
    }
    Ok(Params::from_values(config, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(v: usize) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_ff: 16,
            n_layers: 1,
            n_heads: 2,
            dropout: 0.1,
            vocab_size: v,
            max_len: 32,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = Params::<f32>::init(&config(50), 4).unwrap();
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path, Some(&config(50))).unwrap();
        assert_eq!(q.config, p.config);
        assert!(p
            .values
            .iter()
            .zip(&q.values)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"PDCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = Params::<f32>::init(&config(50), 4).unwrap();
        save_checkpoint(&p, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            fs::write(&path, &bytes[..cut]).unwrap();
            assert!(matches!(
                load_checkpoint(&path, None),
                Err(CheckpointError::Truncated)
            ));
        }
    }

    #[test]
    fn vocab_mismatch_is_a_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&Params::<f32>::init(&config(1000), 1).unwrap(), &path).unwrap();
        assert!(matches!(
            load_checkpoint(&path, Some(&config(999))),
            Err(CheckpointError::Shape(_))
        ));
    }

    #[test]
    fn bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&Params::<f32>::init(&config(20), 1).unwrap(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 2;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path, None),
            Err(CheckpointError::Version(2))
        ));
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path, None),
            Err(CheckpointError::BadMagic)
        ));
    }
}
