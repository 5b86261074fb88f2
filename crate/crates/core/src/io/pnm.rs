//! Binary PGM (P5) and PPM (P6) images with maxval 255.

use std::path::Path;

use super::{byte_to_unit, unit_to_byte, Dataset, IoError, Result};
use crate::tensor::Tensor;

/// Parses a P5/P6 file into `(channels, height, width, samples)` with
/// samples interleaved per pixel.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(IoError::format(path, "truncated PNM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(IoError::format(path, format!("unsupported PNM magic `{m}`"))),
    };
    let mut num = |what: &str| -> Result<usize> {
        let t = token()?;
        t.parse()
            .map_err(|_| IoError::format(path, format!("bad PNM {what} `{t}`")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(IoError::format(path, format!("maxval {maxval} is not 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let len = channels * width * height;
    if bytes.len() < start + len {
        return Err(IoError::format(path, "truncated PNM raster"));
    }
    Ok((channels, height, width, bytes[start..start + len].to_vec()))
}

pub fn encode(channels: usize, height: usize, width: usize, samples: &[u8]) -> Vec<u8> {
    let magic = if channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(samples);
    out
}

/// Loads one image as a `1×C×H×W` tensor in `[−0.5, 0.5]`.
pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| IoError::io(path, e))?;
    let (c, h, w, px) = decode(&bytes, path)?;
    let mut data = vec![0.0f32; c * h * w];
    for ci in 0..c {
        for p in 0..h * w {
            data[ci * h * w + p] = byte_to_unit(px[p * c + ci]);
        }
    }
    Tensor::new([1, c, h, w], data).map_err(|e| IoError::format(path, e.to_string()))
}

/// Converts a `C×H×W` (or `1×C×H×W`) tensor to interleaved bytes.
pub fn to_samples(img: &Tensor) -> (usize, usize, usize, Vec<u8>) {
    let s = img.shape();
    let (c, h, w) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
    let mut px = vec![0u8; c * h * w];
    for ci in 0..c {
        for p in 0..h * w {
            px[p * c + ci] = unit_to_byte(img.data()[ci * h * w + p]);
        }
    }
    (c, h, w, px)
}

/// Writes a single image (C ∈ {1, 3}) as P5 or P6.
pub fn save(img: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w, px) = to_samples(img);
    if !matches!(c, 1 | 3) || img.numel() != c * h * w {
        return Err(IoError::format(
            path,
            format!("cannot save tensor of shape {:?} as an image", img.shape()),
        ));
    }
    super::write_atomic(path, &encode(c, h, w, &px))
}

/// Loads every `.pgm`/`.ppm`/`.pnm` file of a directory in file-name order.
pub fn load_dir(dir: &Path) -> Result<Dataset> {
    let rd = std::fs::read_dir(dir).map_err(|e| IoError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| IoError::io(dir, e))?.path();
        let ext = p
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("pgm" | "ppm" | "pnm")) {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(IoError::format(dir, "no PGM/PPM images in directory"));
    }
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    for f in &files {
        let img = load(f)?;
        match &shape {
            None => shape = Some(img.shape().to_vec()),
            Some(s) if s[..] != *img.shape() => {
                return Err(IoError::format(
                    f,
                    format!("image shape {:?} differs from {:?}", &img.shape()[1..], &s[1..]),
                ))
            }
            _ => {}
        }
        data.extend_from_slice(img.data());
    }
    let s = shape.unwrap();
    let images = Tensor::new([files.len(), s[1], s[2], s[3]], data)
        .map_err(|e| IoError::format(dir, e.to_string()))?;
    Ok(Dataset {
        images,
        source: dir.display().to_string(),
        split: "train".into(),
    })
}
