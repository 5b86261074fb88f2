//! Dataset ingestion, image files, run configuration, checkpoints and the
//! metrics log.

pub mod checkpoint;
pub mod config;
pub mod idx;
pub mod metrics;
pub mod pnm;
pub mod synth;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("config line {line}: {detail}")]
    Config { line: usize, detail: String },
}

impl IoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(path: &Path, detail: impl Into<String>) -> Self {
        IoError::Format {
            path: path.to_path_buf(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, IoError>;

/// Maps an 8-bit level to `[−0.5, 0.5]`.
pub fn byte_to_unit(b: u8) -> f32 {
    b as f32 / 255.0 - 0.5
}

/// Inverse of [`byte_to_unit`]: clamps to `[−0.5, 0.5]`, rescales to
/// `[0, 255]` and rounds half up.
pub fn unit_to_byte(v: f32) -> u8 {
    let v = if v.is_nan() { -0.5 } else { v.clamp(-0.5, 0.5) };
    ((v + 0.5) * 255.0 + 0.5).floor() as u8
}

/// Images in `[−0.5, 0.5]`, `N×C×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub source: String,
    pub split: String,
}

impl Dataset {
    pub fn from_bytes(
        bytes: &[u8],
        shape: [usize; 4],
        source: impl Into<String>,
    ) -> Result<Self> {
        let images = Tensor::new(shape, bytes.iter().map(|&b| byte_to_unit(b)).collect())
            .map_err(|e| IoError::Format {
                path: PathBuf::new(),
                detail: e.to_string(),
            })?;
        Ok(Dataset {
            images,
            source: source.into(),
            split: "train".into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(C, H, W)` of every image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }
}

/// Loads a dataset from an IDX file or a directory of PGM/PPM images.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    if path.is_dir() {
        pnm::load_dir(path)
    } else {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        match ext.as_deref() {
            Some("pgm" | "ppm" | "pnm") => {
                let images = pnm::load(path)?;
                Ok(Dataset {
                    images,
                    source: path.display().to_string(),
                    split: "train".into(),
                })
            }
            _ => idx::load(path),
        }
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// followed by a rename, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(|e| IoError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| IoError::io(&tmp, e))?;
    f.sync_all().map_err(|e| IoError::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| IoError::io(path, e))
}
