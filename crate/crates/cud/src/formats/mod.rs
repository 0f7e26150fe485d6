//! On-disk formats: checkpoints, datasets, circuits and CSV tables.

pub mod checkpoint;
pub mod circuit;
pub mod dataset;
pub mod tables;

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{AppError, AppResult};

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> AppResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(AppError::json(path.display().to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> AppResult<T> {
    let text = fs::read_to_string(path).map_err(AppError::io(path))?;
    serde_json::from_str(&text).map_err(AppError::json(path.display().to_string()))
}

/// Writes via a temporary sibling and a rename so readers never see a
/// partial file.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> AppResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(AppError::io(dir))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(AppError::io(&tmp))?;
    fs::rename(&tmp, path).map_err(AppError::io(path))
}
