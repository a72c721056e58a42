//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! 1024 red, 1024 green and 1024 blue bytes, each plane row-major 32x32.

use std::path::Path;

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::image::Image;

pub const SIDE: usize = 32;
pub const RECORD_BYTES: usize = 1 + 3 * SIDE * SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Parses one batch file's bytes.
pub fn parse_records(bytes: &[u8]) -> Result<(Vec<Image>, Vec<u32>)> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        let offset = (bytes.len() / RECORD_BYTES * RECORD_BYTES) as u64;
        return Err(Error::Format {
            offset,
            message: format!(
                "{} bytes is not a whole number of {RECORD_BYTES}-byte records",
                bytes.len()
            ),
        });
    }
    let mut images = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    let mut labels = Vec::with_capacity(images.capacity());
    for (r, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format {
                offset: (r * RECORD_BYTES) as u64,
                message: format!("label byte {} outside 0..=9", rec[0]),
            });
        }
        labels.push(rec[0] as u32);
        let data = rec[1..].iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Image::new(SIDE, SIDE, 3, data)?);
    }
    Ok((images, labels))
}

pub fn load_cifar10_file(path: &Path) -> Result<(Vec<Image>, Vec<u32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_records(&bytes).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

/// Loads `data_batch_1.bin` .. `data_batch_5.bin` (whichever exist) or
/// `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut found = 0;
    for f in files {
        let path = dir.join(&f);
        if !path.exists() {
            continue;
        }
        found += 1;
        let (im, lb) = load_cifar10_file(&path)?;
        images.extend(im);
        labels.extend(lb);
    }
    if found == 0 {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no CIFAR-10 batch files found"),
        ));
    }
    let split_name = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    Dataset::new("cifar10", split_name, images, Some(labels))
}
