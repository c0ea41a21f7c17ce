//! Readers and writers for the `.fvecs` family and raw float dumps.
//!
//! Each `.fvecs` / `.ivecs` / `.bvecs` row is a little-endian `i32`
//! dimension followed by that many `f32`, `i32` or `u8` values.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use sieve_core::{Dataset, Matrix};

use crate::error::{BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Fvecs,
    Bvecs,
    Ivecs,
    /// Headerless `f32` rows; the dimension must be given.
    RawF32,
}

impl FromStr for Format {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fvecs" => Ok(Format::Fvecs),
            "bvecs" => Ok(Format::Bvecs),
            "ivecs" => Ok(Format::Ivecs),
            "raw" | "raw_f32" => Ok(Format::RawF32),
            _ => Err(BenchError::InvalidArgument(format!("unknown format {s:?}"))),
        }
    }
}

impl Format {
    /// Guess from the file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "fvecs" => Some(Format::Fvecs),
            "bvecs" => Some(Format::Bvecs),
            "ivecs" => Some(Format::Ivecs),
            "f32" | "bin" | "raw" => Some(Format::RawF32),
            _ => None,
        }
    }
}

fn bad(path: &Path, msg: impl Into<String>) -> BenchError {
    BenchError::Format { path: path.to_path_buf(), msg: msg.into() }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

/// Split a vecs file into `(dim, payload)` rows of `width`-byte elements.
fn split_rows<'a>(path: &Path, bytes: &'a [u8], width: usize) -> Result<(usize, Vec<&'a [u8]>)> {
    let mut rows = Vec::new();
    let mut dim = None;
    let mut at = 0;
    while at < bytes.len() {
        if bytes.len() - at < 4 {
            return Err(bad(path, format!("truncated header at byte {at}")));
        }
        let d = i32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        if d <= 0 {
            return Err(bad(path, format!("row {} has dimension {d}", rows.len())));
        }
        let d = d as usize;
        match dim {
            None => dim = Some(d),
            Some(prev) if prev != d => {
                return Err(bad(path, format!("row {} has dimension {d}, earlier rows {prev}", rows.len())))
            }
            _ => {}
        }
        at += 4;
        let len = d * width;
        if bytes.len() - at < len {
            return Err(bad(path, format!("row {} truncated", rows.len())));
        }
        rows.push(&bytes[at..at + len]);
        at += len;
    }
    Ok((dim.unwrap_or(0), rows))
}

pub fn read_fvecs(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    let (d, rows) = split_rows(path, &bytes, 4)?;
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in &rows {
        data.extend(r.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))));
    }
    Ok(Matrix::from_vec(rows.len(), d, data)?)
}

pub fn read_bvecs(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    let (d, rows) = split_rows(path, &bytes, 1)?;
    let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().map(|&b| b as f32)).collect();
    Ok(Matrix::from_vec(rows.len(), d, data)?)
}

pub fn read_ivecs(path: impl AsRef<Path>) -> Result<Vec<Vec<i32>>> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    let (_, rows) = split_rows(path, &bytes, 4)?;
    Ok(rows
        .iter()
        .map(|r| r.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
        .collect())
}

pub fn read_raw_f32(path: impl AsRef<Path>, d: usize) -> Result<Matrix> {
    let path = path.as_ref();
    if d == 0 {
        return Err(BenchError::InvalidArgument("raw f32 input needs a positive dimension".into()));
    }
    let bytes = read_all(path)?;
    if bytes.len() % (4 * d) != 0 {
        return Err(bad(path, format!("{} bytes is not a whole number of {d}-dim rows", bytes.len())));
    }
    let data: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(Matrix::from_vec(data.len() / d, d, data)?)
}

pub fn write_fvecs(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in m.iter_rows() {
        w.write_all(&(row.len() as i32).to_le_bytes())?;
        for x in row {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_ivecs(path: impl AsRef<Path>, rows: &[Vec<i32>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        w.write_all(&(row.len() as i32).to_le_bytes())?;
        for x in row {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a file as vectors with ids `0..n`. `dim` is required for raw
/// input and checked otherwise.
pub fn ingest(path: impl AsRef<Path>, format: Format, dim: Option<usize>, normalize: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let m = match format {
        Format::Fvecs => read_fvecs(path)?,
        Format::Bvecs => read_bvecs(path)?,
        Format::Ivecs => {
            let rows = read_ivecs(path)?;
            let d = rows.first().map_or(0, Vec::len);
            let data = rows.iter().flat_map(|r| r.iter().map(|&x| x as f32)).collect();
            Matrix::from_vec(rows.len(), d, data)?
        }
        Format::RawF32 => read_raw_f32(path, dim.ok_or_else(|| bad(path, "raw input needs --dim"))?)?,
    };
    if let Some(d) = dim {
        if m.rows() > 0 && m.cols() != d {
            return Err(bad(path, format!("expected dimension {d}, file has {}", m.cols())));
        }
    }
    let ds = Dataset::with_sequential_ids(m)?;
    Ok(if normalize { ds.normalized()? } else { ds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn write_bytes(dir: &TempDir, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, bytes).unwrap();
        p
    }

    fn fvecs_row(values: &[f32]) -> Vec<u8> {
        let mut b = (values.len() as i32).to_le_bytes().to_vec();
        for v in values {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn single_fvecs_row() {
        let dir = TempDir::new().unwrap();
        let p = write_bytes(&dir, "a.fvecs", &fvecs_row(&[1.0, 2.0, 3.0]));
        let ds = ingest(&p, Format::Fvecs, None, false).unwrap();
        assert_eq!((ds.len(), ds.dim()), (1, 3));
        assert_eq!(ds.get(0), (0, &[1.0f32, 2.0, 3.0][..]));
    }

    #[test]
    fn fvecs_round_trip() {
        let dir = TempDir::new().unwrap();
        let m = Matrix::from_vec(3, 2, vec![0.5, -1.0, 3.25, 1e-8, f32::MAX, -0.0]).unwrap();
        let p = dir.path().join("m.fvecs");
        write_fvecs(&p, &m).unwrap();
        let back = read_fvecs(&p).unwrap();
        let bits = |m: &Matrix| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
    }

    #[test]
    fn bvecs_bytes_cast_to_floats() {
        let dir = TempDir::new().unwrap();
        let raw: [u8; 8] = [4, 0, 0, 0, 0, 7, 128, 255];
        let p = write_bytes(&dir, "b.bvecs", &raw);
        let m = read_bvecs(&p).unwrap();
        let manual: Vec<f32> = raw[4..].iter().map(|&b| f32::from(b)).collect();
        assert_eq!(m.as_slice(), &manual[..]);
    }

    #[test]
    fn ivecs_round_trip() {
        let dir = TempDir::new().unwrap();
        let rows = vec![vec![1, -2, 3], vec![4, 5, 6]];
        let p = dir.path().join("g.ivecs");
        write_ivecs(&p, &rows).unwrap();
        assert_eq!(read_ivecs(&p).unwrap(), rows);
    }

    #[test]
    fn raw_floats() {
        let dir = TempDir::new().unwrap();
        let bytes: Vec<u8> = [1.0f32, 2.0, 3.0, 4.0].iter().flat_map(|x| x.to_le_bytes()).collect();
        let p = write_bytes(&dir, "r.f32", &bytes);
        let ds = ingest(&p, Format::RawF32, Some(2), false).unwrap();
        assert_eq!(ds.len(), 2);
        assert!(ingest(&p, Format::RawF32, Some(3), false).is_err());
        assert!(ingest(&p, Format::RawF32, None, false).is_err());
    }

    #[test]
    fn truncated_and_inconsistent_files() {
        let dir = TempDir::new().unwrap();
        let mut bytes = fvecs_row(&[1.0, 2.0]);
        bytes.truncate(bytes.len() - 1);
        assert!(read_fvecs(write_bytes(&dir, "t.fvecs", &bytes)).is_err());

        let mut mixed = fvecs_row(&[1.0, 2.0]);
        mixed.extend(fvecs_row(&[1.0, 2.0, 3.0]));
        let err = read_fvecs(write_bytes(&dir, "m.fvecs", &mixed)).unwrap_err();
        assert!(err.to_string().contains("dimension 3"), "{err}");

        assert!(read_fvecs(write_bytes(&dir, "h.fvecs", &[1, 0])).is_err());
    }

    #[test]
    fn normalize_flag() {
        let dir = TempDir::new().unwrap();
        let p = write_bytes(&dir, "n.fvecs", &fvecs_row(&[3.0, 4.0]));
        let ds = ingest(&p, Format::Fvecs, Some(2), true).unwrap();
        let v = ds.get(0).1;
        assert!((v[0] - 0.6).abs() < 1e-6 && (v[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn format_names() {
        assert_eq!("raw".parse::<Format>().unwrap(), Format::RawF32);
        assert!("csv".parse::<Format>().is_err());
        assert_eq!(Format::from_path(Path::new("x/base.bvecs")), Some(Format::Bvecs));
    }
}
