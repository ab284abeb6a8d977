use std::path::Path;

use super::LabeledPool;
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Ingestion {
            path: path.to_path_buf(),
            offset: offset as u64,
            message: "file truncated inside header".into(),
        })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an IDX image/label file pair (MNIST layout). Pixels are scaled to
/// `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledPool> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = read(ip)?;
    let labels = read(lp)?;

    let magic = read_u32(&images, 0, ip)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Ingestion {
            path: ip.into(),
            offset: 0,
            message: format!("bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        });
    }
    let n_images = read_u32(&images, 4, ip)? as usize;
    let rows = read_u32(&images, 8, ip)? as usize;
    let cols = read_u32(&images, 12, ip)? as usize;
    let dim = rows * cols;
    let needed = 16 + n_images * dim;
    if images.len() < needed {
        return Err(Error::Ingestion {
            path: ip.into(),
            offset: images.len() as u64,
            message: format!("truncated: expected {needed} bytes for {n_images} images"),
        });
    }

    let magic = read_u32(&labels, 0, lp)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Ingestion {
            path: lp.into(),
            offset: 0,
            message: format!("bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        });
    }
    let n_labels = read_u32(&labels, 4, lp)? as usize;
    if n_labels != n_images {
        return Err(Error::Ingestion {
            path: lp.into(),
            offset: 4,
            message: format!("{n_labels} labels for {n_images} images"),
        });
    }
    if labels.len() < 8 + n_labels {
        return Err(Error::Ingestion {
            path: lp.into(),
            offset: labels.len() as u64,
            message: format!("truncated: expected {} bytes", 8 + n_labels),
        });
    }

    let features = images[16..needed].iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = labels[8..8 + n_labels].iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(LabeledPool {
        features,
        dim,
        labels,
        n_labels: n_classes,
    })
}
