//! Binary checkpoint format.
//!
//! Layout: magic bytes `PETK`, format version `u32`, then one record per
//! parameter in serialization order:
//! `{name_len u32, name utf-8, rank u32, extents u32 x rank, trainable u8,
//! payload f32}`. All integers and floats little-endian. Round-trips are
//! bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use petkit_core::params::{Parameter, ParamSet};
use petkit_core::tensor::Tensor;

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PETK";
pub const VERSION: u32 = 1;

pub fn write_checkpoint(path: &Path, params: &ParamSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for p in params.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&[p.trainable as u8])?;
        for &v in p.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format {
                    offset: self.offset,
                    detail: format!("truncated record (wanted {n} bytes)"),
                }
            } else {
                Error::Io(e)
            }
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Returns None at a clean end of file (record boundary).
    fn maybe_u32(&mut self) -> Result<Option<u32>> {
        let mut buf = [0u8; 4];
        let mut read = 0;
        while read < 4 {
            let n = self.inner.read(&mut buf[read..])?;
            if n == 0 {
                if read == 0 {
                    return Ok(None);
                }
                return Err(Error::Format {
                    offset: self.offset + read as u64,
                    detail: "truncated record length".into(),
                });
            }
            read += n;
        }
        self.offset += 4;
        Ok(Some(u32::from_le_bytes(buf)))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<ParamSet> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let magic = r.bytes(4)?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported checkpoint version {version}"),
        });
    }
    let mut params = ParamSet::new();
    while let Some(name_len) = r.maybe_u32()? {
        let name_bytes = r.bytes(name_len as usize)?;
        let name = String::from_utf8(name_bytes).map_err(|_| Error::Format {
            offset: r.offset,
            detail: "parameter name is not valid UTF-8".into(),
        })?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let trainable = r.bytes(1)?[0] != 0;
        let numel: usize = shape.iter().product();
        let payload = r.bytes(numel * 4)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(Error::Core)?;
        params
            .insert(Parameter::new(name, tensor, trainable))
            .map_err(Error::Core)?;
    }
    Ok(params)
}

/// Copies tensors from `loaded` into `target` by name, verifying shapes.
/// Trainable flags of `target` are preserved (modes are reapplied by the
/// caller); every parameter of `target` must be present in `loaded`.
pub fn load_into(target: &mut ParamSet, loaded: &ParamSet) -> Result<()> {
    for i in 0..target.len() {
        let name = target.at(i).name.clone();
        let src = loaded.get(&name).ok_or_else(|| {
            Error::Core(petkit_core::Error::Incompatible(format!(
                "checkpoint lacks parameter {name}"
            )))
        })?;
        if src.tensor.shape() != target.at(i).tensor.shape() {
            return Err(Error::Core(petkit_core::Error::Incompatible(format!(
                "parameter {name} has shape {:?} in checkpoint, {:?} in model",
                src.tensor.shape(),
                target.at(i).tensor.shape()
            ))));
        }
        target.at_mut(i).tensor = src.tensor.clone();
    }
    Ok(())
}

/// FNV-1a checksum over names, shapes and payload bits of parameters
/// selected by `pred`; the freeze-invariant fingerprint.
pub fn param_checksum(params: &ParamSet, mut pred: impl FnMut(&Parameter) -> bool) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    };
    for p in params.iter() {
        if !pred(p) {
            continue;
        }
        eat(p.name.as_bytes());
        for &d in p.tensor.shape() {
            eat(&(d as u32).to_le_bytes());
        }
        for &v in p.tensor.data() {
            eat(&v.to_bits().to_le_bytes());
        }
    }
    hash
}
