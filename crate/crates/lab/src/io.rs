//! File helpers. Every artifact goes through these so that errors carry
//! the path and output is byte-stable.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use r3_core::mask_store::{deserialize_trace, serialize_trace};
use r3_core::model::{decode_checkpoint, encode_checkpoint, MaskTable, PolicyParams, RoutingTrace};
use serde::Serialize;

use crate::error::{LabError, Result};

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| LabError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| LabError::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| LabError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn save_trace(path: &Path, trace: &RoutingTrace) -> Result<()> {
    write_bytes(path, &serialize_trace(trace))
}

pub fn load_trace(path: &Path) -> Result<MaskTable> {
    Ok(deserialize_trace(&read_bytes(path)?)?)
}

pub fn save_checkpoint(path: &Path, params: &PolicyParams) -> Result<()> {
    write_bytes(path, &encode_checkpoint(params))
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams> {
    Ok(decode_checkpoint(&read_bytes(path)?)?)
}

/// Append-only JSON-lines writer; each record is flushed as written.
#[derive(Debug)]
pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlWriter {
    /// Create (truncating) the file at `path`.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| LabError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record)?;
        let path = &self.path;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| LabError::io(path, e))
    }
}
