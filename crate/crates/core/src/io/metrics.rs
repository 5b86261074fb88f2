//! Line-delimited JSON metrics stream.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{IoError, Result};

pub struct MetricsLog {
    file: File,
    path: PathBuf,
}

impl MetricsLog {
    /// Opens `path` for appending, creating it if needed.
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| IoError::io(path, e))?;
        Ok(MetricsLog {
            file,
            path: path.to_path_buf(),
        })
    }

    /// Truncates `path` and opens it for writing.
    pub fn create(path: &Path) -> Result<Self> {
        File::create(path).map_err(|e| IoError::io(path, e))?;
        Self::append(path)
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let mut line = serde_json::to_string(record).map_err(|e| IoError::format(&self.path, e.to_string()))?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .map_err(|e| IoError::io(&self.path, e))
    }
}

/// Drops records with `step > keep_through` so that a resumed run can append
/// from its checkpoint step.
pub fn truncate_after(path: &Path, keep_through: u64) -> Result<()> {
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(IoError::io(path, e)),
    };
    let mut kept = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| IoError::io(path, e))?;
        let v: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| IoError::format(path, format!("bad metrics line: {e}")))?;
        if v.get("step").and_then(|s| s.as_u64()).unwrap_or(0) <= keep_through {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    super::write_atomic(path, kept.as_bytes())
}

/// Every record of a metrics file.
pub fn read_all(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    text.lines()
        .map(|l| {
            serde_json::from_str(l).map_err(|e| IoError::format(path, format!("bad metrics line: {e}")))
        })
        .collect()
}
