//! CIFAR-10 binary batches: 3073-byte records, 1 label byte followed by
//! 3072 pixel bytes in planar R, G, B order.

use crate::{Error, Result, Tensor};
use std::path::{Path, PathBuf};

const RECORD_LEN: usize = 1 + 3 * 32 * 32;

/// Loads one or more CIFAR-10 binary files, concatenated in order.
pub fn load_cifar_binary(paths: &[PathBuf]) -> Result<(Tensor, Vec<usize>)> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        read_batch(path, &mut images, &mut labels)?;
    }
    let n = labels.len();
    Ok((Tensor::from_vec(&[n, 3, 32, 32], images)?, labels))
}

fn read_batch(path: &Path, images: &mut Vec<f64>, labels: &mut Vec<usize>) -> Result<()> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() || bytes.len() % RECORD_LEN != 0 {
        return Err(Error::CorruptFile {
            path: path.display().to_string(),
            reason: format!("{} bytes is not a multiple of {}", bytes.len(), RECORD_LEN),
        });
    }
    for record in bytes.chunks_exact(RECORD_LEN) {
        let label = record[0] as usize;
        if label > 9 {
            return Err(Error::CorruptFile {
                path: path.display().to_string(),
                reason: format!("label byte {label} out of range"),
            });
        }
        labels.push(label);
        images.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(())
}
