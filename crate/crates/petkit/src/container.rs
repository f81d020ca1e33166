//! Dataset container and feature-dump formats.
//!
//! Dataset container: magic `PETD`, version `u32`, class_count `u32`,
//! sample_count `u32`, then per sample `{label u32, C u32, H u32, W u32,
//! pixels u8 x C*H*W}`. Little-endian throughout. Every sample must share
//! one geometry.
//!
//! Feature dump: header `{n u32, d u32}` followed by `n*d` f32 rows,
//! little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use petkit_core::analysis::Features;
use petkit_core::data::RawDataset;

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PETD";
pub const VERSION: u32 = 1;

pub fn write_dataset(path: &Path, data: &RawDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(data.class_count as u32).to_le_bytes())?;
    w.write_all(&(data.len() as u32).to_le_bytes())?;
    let sample = data.c * data.h * data.w;
    for (i, &label) in data.labels.iter().enumerate() {
        w.write_all(&label.to_le_bytes())?;
        w.write_all(&(data.c as u32).to_le_bytes())?;
        w.write_all(&(data.h as u32).to_le_bytes())?;
        w.write_all(&(data.w as u32).to_le_bytes())?;
        w.write_all(&data.pixels[i * sample..(i + 1) * sample])?;
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format {
                    offset: self.offset,
                    detail: format!("truncated {what}"),
                }
            } else {
                Error::Io(e)
            }
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_dataset(path: &Path) -> Result<RawDataset> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let magic = r.bytes(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported container version {version}"),
        });
    }
    let class_count = r.u32("class count")? as usize;
    let sample_count = r.u32("sample count")? as usize;
    let mut labels = Vec::with_capacity(sample_count);
    let mut pixels = Vec::new();
    let mut dims: Option<(usize, usize, usize)> = None;
    for i in 0..sample_count {
        let label = r.u32("label")?;
        if label as usize >= class_count {
            return Err(Error::Format {
                offset: r.offset - 4,
                detail: format!("sample {i}: label {label} out of range for {class_count} classes"),
            });
        }
        let c = r.u32("channel extent")? as usize;
        let h = r.u32("height")? as usize;
        let w = r.u32("width")? as usize;
        match dims {
            None => dims = Some((c, h, w)),
            Some(d) if d != (c, h, w) => {
                return Err(Error::Format {
                    offset: r.offset - 12,
                    detail: format!(
                        "sample {i} geometry {c}x{h}x{w} differs from {}x{}x{}",
                        d.0, d.1, d.2
                    ),
                });
            }
            _ => {}
        }
        labels.push(label);
        pixels.extend(r.bytes(c * h * w, "pixel payload")?);
    }
    let (c, h, w) = dims.ok_or_else(|| Error::Format {
        offset: r.offset,
        detail: "container holds no samples".into(),
    })?;
    RawDataset::new(c, h, w, class_count, labels, pixels).map_err(Error::Core)
}

pub fn write_features(path: &Path, features: &Features) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(features.n as u32).to_le_bytes())?;
    w.write_all(&(features.d as u32).to_le_bytes())?;
    for &v in &features.data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Features> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let n = r.u32("row count")? as usize;
    let d = r.u32("feature dim")? as usize;
    let payload = r.bytes(n * d * 4, "feature payload")?;
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Features::new(n, d, data).map_err(Error::Core)
}

/// FNV-1a over a whole file; fixture fingerprinting.
pub fn file_checksum(path: &Path) -> Result<u64> {
    let bytes = std::fs::read(path)?;
    let mut hash = 0xcbf29ce484222325u64;
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    Ok(hash)
}

#[cfg(test)]
mod tests {
    use super::*;
    use petkit_core::synth::{make_synthetic_task, OrientationFamily, SynthKind};

    fn fixture() -> RawDataset {
        make_synthetic_task(
            &SynthKind::Orientation(OrientationFamily::default()),
            3,
            4,
            8,
            2,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_preserves_pixels_bit_exactly() {
        let data = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.petd");
        write_dataset(&path, &data).unwrap();
        let loaded = read_dataset(&path).unwrap();
        assert_eq!(loaded, data);
    }

    #[test]
    fn record_count_matches_header() {
        let data = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.petd");
        write_dataset(&path, &data).unwrap();
        let loaded = read_dataset(&path).unwrap();
        assert_eq!(loaded.len(), data.len());
    }

    #[test]
    fn generator_fixture_checksum_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.petd");
        let b = dir.path().join("b.petd");
        write_dataset(&a, &fixture()).unwrap();
        write_dataset(&b, &fixture()).unwrap();
        assert_eq!(file_checksum(&a).unwrap(), file_checksum(&b).unwrap());
    }

    #[test]
    fn malformed_label_names_byte_offset() {
        let data = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.petd");
        write_dataset(&path, &data).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // First label lives right after the 16-byte header.
        bytes[16..20].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match read_dataset(&path) {
            Err(Error::Format { offset: 16, detail }) => {
                assert!(detail.contains("label"), "{detail}")
            }
            other => panic!("expected format error at byte 16, got {other:?}"),
        }
    }

    #[test]
    fn features_round_trip() {
        let f = Features::new(3, 2, vec![0.5, -1.0, 2.25, 0.0, 7.5, -0.125]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.petf");
        write_features(&path, &f).unwrap();
        assert_eq!(read_features(&path).unwrap(), f);
    }
}
