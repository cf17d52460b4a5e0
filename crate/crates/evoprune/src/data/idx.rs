//! IDX file format (big-endian magic + dimensions, u8 payload).

use crate::{Error, Result, Tensor};
use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const DTYPE_U8: u8 = 0x08;

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptFile {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Reads an IDX file with unsigned-byte payload; returns (dims, payload).
pub fn read_idx_u8(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    reader
        .read_exact(&mut magic)
        .map_err(|_| corrupt(path, "missing magic"))?;
    if magic[0] != 0 || magic[1] != 0 {
        return Err(corrupt(path, "bad magic prefix"));
    }
    if magic[2] != DTYPE_U8 {
        return Err(corrupt(path, format!("unsupported dtype 0x{:02x}", magic[2])));
    }
    let ndim = magic[3] as usize;
    if !(1..=4).contains(&ndim) {
        return Err(corrupt(path, format!("unsupported rank {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = reader
            .read_u32::<BigEndian>()
            .map_err(|_| corrupt(path, "truncated header"))? as usize;
        dims.push(d);
    }
    let expected: usize = dims.iter().product();
    let mut payload = Vec::with_capacity(expected);
    reader.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(corrupt(
            path,
            format!("payload {} bytes, header wants {}", payload.len(), expected),
        ));
    }
    Ok((dims, payload))
}

/// Loads an images/labels IDX pair as a `[0, 1]`-scaled `N x C x H x W`
/// tensor plus labels. 3-d image files are treated as single-channel.
pub fn load_idx_pair(images: &Path, labels: &Path) -> Result<(Tensor, Vec<usize>)> {
    let (idims, ipayload) = read_idx_u8(images)?;
    let (n, c, h, w) = match idims.as_slice() {
        [n, h, w] => (*n, 1usize, *h, *w),
        [n, c, h, w] => (*n, *c, *h, *w),
        other => {
            return Err(corrupt(
                images,
                format!("image file must be rank 3 or 4, got {other:?}"),
            ))
        }
    };
    let (ldims, lpayload) = read_idx_u8(labels)?;
    if ldims.len() != 1 {
        return Err(corrupt(labels, "label file must be rank 1"));
    }
    if ldims[0] != n {
        return Err(corrupt(
            labels,
            format!("{} labels for {} images", ldims[0], n),
        ));
    }
    let data = ipayload.iter().map(|&b| b as f64 / 255.0).collect();
    let tensor = Tensor::from_vec(&[n, c, h, w], data)?;
    let label_vec = lpayload.iter().map(|&b| b as usize).collect();
    Ok((tensor, label_vec))
}

/// Writes a `[0, 1]`-scaled image tensor as a rank-3 (single channel) or
/// rank-4 IDX file of unsigned bytes.
pub fn write_idx_images(path: &Path, images: &Tensor) -> Result<()> {
    let [c, h, w] = images.chw()?;
    let n = images.batch();
    let mut writer = BufWriter::new(File::create(path)?);
    let dims: Vec<usize> = if c == 1 {
        vec![n, h, w]
    } else {
        vec![n, c, h, w]
    };
    writer.write_all(&[0, 0, DTYPE_U8, dims.len() as u8])?;
    for d in &dims {
        writer.write_u32::<BigEndian>(*d as u32)?;
    }
    for &v in images.data() {
        writer.write_all(&[(v.clamp(0.0, 1.0) * 255.0).round() as u8])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    writer.write_all(&[0, 0, DTYPE_U8, 1])?;
    writer.write_u32::<BigEndian>(labels.len() as u32)?;
    for &l in labels {
        writer.write_all(&[l as u8])?;
    }
    writer.flush()?;
    Ok(())
}
