//! IDX (big-endian magic, dimension sizes, raw `u8` payload), optionally
//! gzip-compressed. Images are read as `[N, 1, H, W]` for 3-d files, `[N, d]`
//! for 2-d files and `[N, C, H, W]` for 4-d files.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::Dataset;
use crate::error::{Error, IdxError, Result};
use crate::fsutil::write_atomic;
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, file: &str) -> std::result::Result<u32, IdxError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            file: file.to_string(),
            expected: offset + 4,
            found: bytes.len(),
        })
}

/// Header dims and payload for a `u8` IDX buffer with `ndims` in `allowed`.
fn decode<'a>(bytes: &'a [u8], file: &str, allowed: &[u32], expected: u32) -> std::result::Result<(Vec<usize>, &'a [u8]), IdxError> {
    let magic = be_u32(bytes, 0, file)?;
    let ndims = magic & 0xff;
    if magic >> 8 != 0x08 || !allowed.contains(&ndims) {
        return Err(IdxError::BadMagic {
            file: file.to_string(),
            offset: 0,
            found: magic,
            expected,
        });
    }
    let dims = (0..ndims as usize)
        .map(|i| be_u32(bytes, 4 + 4 * i, file).map(|v| v as usize))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let start = 4 + 4 * ndims as usize;
    let len: usize = dims.iter().product();
    let payload = bytes.get(start..start + len).ok_or(IdxError::Truncated {
        file: file.to_string(),
        expected: start + len,
        found: bytes.len(),
    })?;
    Ok((dims, payload))
}

/// Images scaled to `[0, 1]`.
pub fn decode_idx_images(bytes: &[u8], file: &str) -> Result<Tensor> {
    let (dims, payload) = decode(bytes, file, &[2, 3, 4], IMAGES_MAGIC)?;
    let mut shape = dims.clone();
    if dims.len() == 3 {
        shape.insert(1, 1);
    }
    Tensor::new(shape, payload.iter().map(|&b| f64::from(b) / 255.0).collect())
}

pub fn decode_idx_labels(bytes: &[u8], file: &str) -> Result<Vec<usize>> {
    let (_, payload) = decode(bytes, file, &[1], LABELS_MAGIC)?;
    Ok(payload.iter().map(|&b| usize::from(b)).collect())
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Loads an image file and a label file; `num_classes` is one more than the
/// largest label.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let x = decode_idx_images(&read_maybe_gz(ip)?, &ip.display().to_string())?;
    let y = decode_idx_labels(&read_maybe_gz(lp)?, &lp.display().to_string())?;
    if x.rows() != y.len() {
        return Err(IdxError::CountMismatch {
            images: x.rows(),
            labels: y.len(),
        }
        .into());
    }
    let k = y.iter().max().map_or(1, |m| m + 1);
    Dataset::new(x, y, k)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes inputs as an IDX image buffer. `[N, 1, H, W]` is written as a 3-d
/// file so that standard readers see MNIST layout.
pub fn encode_idx_images(inputs: &Tensor) -> Result<Vec<u8>> {
    let mut dims: Vec<usize> = inputs.shape().to_vec();
    if dims.len() == 4 && dims[1] == 1 {
        dims.remove(1);
    }
    if !(2..=4).contains(&dims.len()) {
        return Err(Error::Domain {
            op: "write_idx",
            detail: format!("cannot encode inputs of shape {:?}", inputs.shape()),
        });
    }
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + inputs.len());
    out.extend_from_slice(&(0x0800 | dims.len() as u32).to_be_bytes());
    for &d in &dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(inputs.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::Domain {
            op: "write_idx",
            detail: format!("label {l} does not fit in a byte"),
        })?);
    }
    Ok(out)
}

fn write_maybe_gz(path: &Path, bytes: &[u8]) -> Result<()> {
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        let gz = enc.finish().map_err(|e| Error::io(path, e))?;
        write_atomic(path, &gz)
    } else {
        write_atomic(path, bytes)
    }
}

/// Writes the dataset as an image/label file pair (gzip when a path ends in
/// `.gz`). Pixels are rounded to the nearest multiple of 1/255.
pub fn write_idx(dataset: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    write_maybe_gz(images.as_ref(), &encode_idx_images(dataset.inputs())?)?;
    write_maybe_gz(labels.as_ref(), &encode_idx_labels(dataset.labels())?)
}
