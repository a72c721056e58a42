//! Embedding export: CSV with a header row, or raw little-endian f32.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::memory_bank::MemoryBank;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingFormat {
    /// `index,d0,...` header, then one row per vector with 9 significant digits.
    Csv,
    /// `u32 N`, `u32 D`, then `N * D` f32 values.
    Raw,
}

impl FromStr for EmbeddingFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(EmbeddingFormat::Csv),
            "raw" => Ok(EmbeddingFormat::Raw),
            other => Err(Error::Config(format!("unknown export format {other:?}"))),
        }
    }
}

pub fn write_embeddings<W: Write>(out: &mut W, vectors: &MemoryBank, format: EmbeddingFormat) -> std::io::Result<()> {
    match format {
        EmbeddingFormat::Csv => {
            write!(out, "index")?;
            for d in 0..vectors.dim() {
                write!(out, ",d{d}")?;
            }
            writeln!(out)?;
            for (i, row) in vectors.rows().enumerate() {
                write!(out, "{i}")?;
                for x in row {
                    write!(out, ",{x:.8e}")?;
                }
                writeln!(out)?;
            }
        }
        EmbeddingFormat::Raw => {
            out.write_all(&(vectors.len() as u32).to_le_bytes())?;
            out.write_all(&(vectors.dim() as u32).to_le_bytes())?;
            for &x in vectors.as_flat() {
                out.write_all(&(x as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn export_embeddings(vectors: &MemoryBank, format: EmbeddingFormat, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    write_embeddings(&mut out, vectors, format)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

/// Reads the raw format back as rows.
pub fn import_raw(bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    if bytes.len() < 8 {
        return Err(Error::Format {
            offset: 0,
            message: "raw embeddings shorter than their header".into(),
        });
    }
    let n = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = n.checked_mul(d).and_then(|v| v.checked_mul(4)).map(|v| v + 8);
    if expected != Some(bytes.len()) {
        return Err(Error::Format {
            offset: 8,
            message: format!("{} bytes do not hold {n} x {d} values", bytes.len()),
        });
    }
    let values: Vec<f64> = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(values.chunks(d.max(1)).take(n).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank() -> MemoryBank {
        MemoryBank::init(4, 3, 2).unwrap()
    }

    #[test]
    fn csv_layout() {
        let b = bank();
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &b, EmbeddingFormat::Csv).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "index,d0,d1,d2");
        assert_eq!(lines.len(), 5);
        for (i, line) in lines[1..].iter().enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields[0], i.to_string());
            for (d, f) in fields[1..].iter().enumerate() {
                let x: f64 = f.parse().unwrap();
                assert!((x - b.row(i)[d]).abs() <= 1e-8 * b.row(i)[d].abs().max(1e-300));
            }
        }
    }

    #[test]
    fn raw_round_trip() {
        let b = bank();
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &b, EmbeddingFormat::Raw).unwrap();
        assert_eq!(buf.len(), 8 + 4 * 12);
        let rows = import_raw(&buf).unwrap();
        for (i, row) in rows.iter().enumerate() {
            for (a, e) in row.iter().zip(b.row(i)) {
                assert_eq!(*a, *e as f32 as f64);
            }
        }
        assert!(import_raw(&buf[..buf.len() - 1]).is_err());
    }
}
