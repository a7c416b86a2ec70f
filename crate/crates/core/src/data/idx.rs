//! Big-endian IDX files (MNIST layout): `u32` magic, `u32` dimension sizes,
//! then unsigned bytes.

use std::path::Path;

use super::{DataError, LabeledSample, SamplePool};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Format(format!("{what}: truncated header")))
}

/// Returns `(rows, cols, pixels)` with pixels scaled by `1/255`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<f64>>), DataError> {
    let magic = read_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::Format(format!(
            "images: magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_u32(bytes, 4, "images")? as usize;
    let rows = read_u32(bytes, 8, "images")? as usize;
    let cols = read_u32(bytes, 12, "images")? as usize;
    let body = &bytes[16..];
    let per = rows * cols;
    if per == 0 || body.len() != count * per {
        return Err(DataError::Format(format!(
            "images: header declares {count}x{rows}x{cols} but body has {} bytes",
            body.len()
        )));
    }
    let images = body
        .chunks(per)
        .map(|img| img.iter().map(|&b| f64::from(b) / 255.0).collect())
        .collect();
    Ok((rows, cols, images))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, DataError> {
    let magic = read_u32(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::Format(format!(
            "labels: magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = read_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(DataError::Format(format!(
            "labels: header declares {count} labels but body has {} bytes",
            body.len()
        )));
    }
    Ok(body.iter().map(|&b| usize::from(b)).collect())
}

/// Loads an image file and a label file into a pool. Sample ids follow file
/// order; the class count is one past the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<SamplePool, DataError> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|source| DataError::Io {
            path: p.display().to_string(),
            source,
        })
    };
    let (height, width, images) = parse_idx_images(&read(images_path)?)?;
    let labels = parse_idx_labels(&read(labels_path)?)?;
    if images.len() != labels.len() {
        return Err(DataError::Consistency(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let class_count = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    let samples = images
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(id, (pixels, label))| LabeledSample { id, pixels, label })
        .collect();
    Ok(SamplePool {
        height,
        width,
        class_count,
        samples,
    })
}
