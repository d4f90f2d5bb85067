use std::path::Path;

use super::{DataError, Dataset};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::TruncatedFile { needed: at + 4, have: bytes.len() })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), DataError> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(DataError::BadMagic { found, expected });
    }
    Ok(())
}

/// `[n, rows, cols]` images scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor, DataError> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let h = be_u32(bytes, 8)? as usize;
    let w = be_u32(bytes, 12)? as usize;
    let needed = 16 + n * h * w;
    if bytes.len() < needed {
        return Err(DataError::TruncatedFile { needed, have: bytes.len() });
    }
    let data = bytes[16..needed].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::from_parts(vec![n, h, w], data))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, DataError> {
    check_magic(bytes, LABELS_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let needed = 8 + n;
    if bytes.len() < needed {
        return Err(DataError::TruncatedFile { needed, have: bytes.len() });
    }
    Ok(bytes[8..needed].iter().map(|&b| b as usize).collect())
}

/// Reads an IDX image/label file pair. The class count is one more than
/// the largest label (at least 2).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let x = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    if x.shape()[0] != labels.len() {
        return Err(DataError::CountMismatch { images: x.shape()[0], labels: labels.len() });
    }
    let classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new(x, labels, classes)
}
