use std::path::Path;

use rand::Rng;

use crate::diff::Tensor;
use crate::error::{Error, Result};

pub const IDX_IMAGES: u32 = 0x0000_0803;
pub const IDX_LABELS: u32 = 0x0000_0801;

/// Raw contents of an unsigned-byte IDX file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxFile {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub payload: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx(format!("header truncated at byte {at}")))
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxFile> {
    let magic = be_u32(bytes, 0)?;
    let ndims = match magic {
        IDX_IMAGES => 3,
        IDX_LABELS => 1,
        other => return Err(Error::Idx(format!("bad magic 0x{other:08x}"))),
    };
    let dims = (0..ndims)
        .map(|k| be_u32(bytes, 4 + 4 * k).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndims;
    let expected: usize = dims.iter().product();
    let actual = bytes.len() - start;
    if actual != expected {
        return Err(Error::Idx(format!(
            "payload has {actual} bytes, header implies {expected}"
        )));
    }
    Ok(IdxFile {
        magic,
        dims,
        payload: bytes[start..].to_vec(),
    })
}

/// Serializes an [`IdxFile`] back to bytes.
pub fn encode_idx(file: &IdxFile) -> Vec<u8> {
    let mut out = file.magic.to_be_bytes().to_vec();
    for &d in &file.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&file.payload);
    out
}

fn read(path: &Path) -> Result<IdxFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes).map_err(|e| Error::Idx(format!("{}: {e}", path.display())))
}

/// Images as `[N, rows·cols]` with each byte `v` mapped to `(v + u)/256`,
/// `u ~ U(0, 1)`, so values lie in `[0, 1)`. Also returns `(rows, cols)`.
pub fn load_idx<R: Rng + ?Sized>(path: impl AsRef<Path>, rng: &mut R) -> Result<(Tensor, (usize, usize))> {
    let f = read(path.as_ref())?;
    if f.magic != IDX_IMAGES {
        return Err(Error::Idx(format!("expected an image file, got magic 0x{:08x}", f.magic)));
    }
    dequantize(&f, rng)
}

pub(crate) fn dequantize<R: Rng + ?Sized>(f: &IdxFile, rng: &mut R) -> Result<(Tensor, (usize, usize))> {
    let (n, h, w) = (f.dims[0], f.dims[1], f.dims[2]);
    let data = f
        .payload
        .iter()
        .map(|&v| (v as f64 + rng.random::<f64>()) / 256.0)
        .collect();
    Ok((Tensor::new(vec![n, h * w], data)?, (h, w)))
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let f = read(path.as_ref())?;
    if f.magic != IDX_LABELS {
        return Err(Error::Idx(format!("expected a label file, got magic 0x{:08x}", f.magic)));
    }
    Ok(f.payload)
}
