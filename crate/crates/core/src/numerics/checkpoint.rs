//! Binary parameter checkpoint format.
//!
//! Layout: the magic string `RQVA1`, then per parameter: name length (u32),
//! name bytes (UTF-8), rank (u32), dims (u32 each), then the float32 payload.
//! All integers and floats little-endian. Parameters follow the registry's
//! iteration order and a save/load/save round trip is bitwise exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tensor::{Params, Real, Tensor};
use super::{NumericsError, Result};

const MAGIC: &[u8; 5] = b"RQVA1";

pub fn save<R: Real>(params: &Params<R>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    for (_, p) in params.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in p.tensor.data() {
            w.write_all(&v.as_f32().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<T: Read> {
    inner: T,
    offset: u64,
}

impl<T: Read> Reader<T> {
    fn err(&self, reason: impl Into<String>) -> NumericsError {
        NumericsError::CheckpointFormat {
            offset: self.offset,
            reason: reason.into(),
        }
    }

    fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|e| self.err(format!("truncated read: {e}")))?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    /// Ok(None) at a clean end of stream, Ok(Some) otherwise.
    fn read_u32_or_eof(&mut self) -> Result<Option<u32>> {
        let mut b = [0u8; 4];
        let mut filled = 0;
        while filled < 4 {
            let n = self
                .inner
                .read(&mut b[filled..])
                .map_err(|e| self.err(format!("read failed: {e}")))?;
            if n == 0 {
                if filled == 0 {
                    return Ok(None);
                }
                return Err(self.err("truncated u32"));
            }
            filled += n;
            self.offset += n as u64;
        }
        Ok(Some(u32::from_le_bytes(b)))
    }
}

/// Reads every `(name, shape, f32 data)` record.
pub fn load_raw(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NumericsError::CheckpointFormat {
            offset: 0,
            reason: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let mut out = Vec::new();
    while let Some(name_len) = r.read_u32_or_eof()? {
        if name_len > 4096 {
            return Err(r.err(format!("implausible name length {name_len}")));
        }
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| r.err(format!("bad utf-8 name: {e}")))?;
        let rank = r.read_u32()?;
        if rank > 8 {
            return Err(r.err(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(r.read_u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            data.push(f32::from_le_bytes(b));
        }
        out.push((name, shape, data));
    }
    Ok(out)
}

/// Loads a checkpoint into an existing registry. Every parameter must be
/// present with a matching shape, and no extra records are tolerated.
pub fn load_into<R: Real>(params: &mut Params<R>, path: &Path) -> Result<()> {
    let records = load_raw(path)?;
    if records.len() != params.len() {
        return Err(NumericsError::Contract(format!(
            "checkpoint has {} parameters, model expects {}",
            records.len(),
            params.len()
        )));
    }
    for (name, shape, data) in records {
        let id = params.id_of(&name).ok_or_else(|| {
            NumericsError::Contract(format!("checkpoint parameter {name:?} unknown to model"))
        })?;
        let p = params.get_mut(id);
        if p.tensor.shape() != shape.as_slice() {
            return Err(NumericsError::Contract(format!(
                "parameter {name:?}: checkpoint shape {:?} vs model {:?}",
                shape,
                p.tensor.shape()
            )));
        }
        let cast: Vec<R> = data.iter().map(|&v| R::from_f32(v)).collect();
        let mut t = Tensor::new(shape, cast)?;
        t.requires_grad = true;
        p.tensor = t;
    }
    Ok(())
}
