//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!   magic "FRIH" | version u32 | tensor count u32
//!   per tensor: name length u32, UTF-8 name, rank u32,
//!               extents u64 each, raw f32 values
//! Tensors round-trip bit-exactly and in order.

use crate::error::{Error, Result};
use crate::model::ModelParameters;
use crate::tensor::Tensor;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"FRIH";
pub const FORMAT_VERSION: u32 = 1;

pub fn save_checkpoint(params: &ModelParameters, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params.iter() {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &extent in tensor.shape() {
            w.write_all(&(extent as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| Error::Checkpoint {
            offset: at,
            reason: format!("{what}: {e}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParameters> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
    let mut r = Cursor {
        inner: BufReader::new(file),
        offset: 0,
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint {
            offset: 0,
            reason: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version_at = r.offset;
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint {
            offset: version_at,
            reason: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("tensor count")?;

    let mut params = ModelParameters::new();
    for t in 0..count {
        let name_at = r.offset;
        let name_len = r.u32("name length")? as usize;
        if name_len > 1 << 16 {
            return Err(Error::Checkpoint {
                offset: name_at,
                reason: format!("implausible name length {name_len}"),
            });
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf, "name")?;
        let name = String::from_utf8(name_buf).map_err(|e| Error::Checkpoint {
            offset: name_at,
            reason: format!("name is not UTF-8: {e}"),
        })?;
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Checkpoint {
                offset: r.offset - 4,
                reason: format!("tensor {name}: implausible rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel == 0 || numel > 1 << 30 {
            return Err(Error::Checkpoint {
                offset: r.offset,
                reason: format!("tensor {name}: implausible element count {numel}"),
            });
        }
        let mut data = vec![0f32; numel];
        for v in data.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b, "tensor data")?;
            *v = f32::from_le_bytes(b);
        }
        params
            .insert(name.clone(), Tensor::new(shape, data)?)
            .map_err(|_| Error::Checkpoint {
                offset: name_at,
                reason: format!("duplicate tensor name {name} (tensor {t})"),
            })?;
    }
    Ok(params)
}
