//! IDX containers of unsigned-byte image stacks (`N×H×W`).

use std::path::Path;

use super::{Dataset, IoError, Result};

pub const MAGIC_U8_3D: u32 = 0x0000_0803;

/// Parses an IDX u8 rank-3 payload into `([n, h, w], pixels)`.
pub fn decode(bytes: &[u8], path: &Path) -> Result<([usize; 3], Vec<u8>)> {
    if bytes.len() < 16 {
        return Err(IoError::format(path, "truncated IDX header"));
    }
    let word = |i: usize| u32::from_be_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap());
    let magic = word(0);
    if magic != MAGIC_U8_3D {
        return Err(IoError::format(
            path,
            format!("bad IDX magic {magic:#010x}, expected {MAGIC_U8_3D:#010x}"),
        ));
    }
    let dims = [word(1) as usize, word(2) as usize, word(3) as usize];
    let total = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| IoError::format(path, format!("IDX dimensions {dims:?} overflow")))?;
    let payload = &bytes[16..];
    if payload.len() < total {
        return Err(IoError::format(
            path,
            format!(
                "truncated IDX payload: {} bytes for dimensions {dims:?}",
                payload.len()
            ),
        ));
    }
    if payload.len() > total {
        return Err(IoError::format(
            path,
            format!("{} trailing bytes after IDX payload", payload.len() - total),
        ));
    }
    Ok((dims, payload.to_vec()))
}

pub fn encode(dims: [usize; 3], pixels: &[u8]) -> Vec<u8> {
    assert_eq!(dims.iter().product::<usize>(), pixels.len());
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&MAGIC_U8_3D.to_be_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

/// Loads grayscale images, mapping each byte `b` to `b/255 − 0.5`.
pub fn load(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
    let ([n, h, w], pixels) = decode(&bytes, path)?;
    Dataset::from_bytes(&pixels, [n, 1, h, w], path.display().to_string())
}

pub fn save(path: &Path, dims: [usize; 3], pixels: &[u8]) -> Result<()> {
    super::write_atomic(path, &encode(dims, pixels))
}
