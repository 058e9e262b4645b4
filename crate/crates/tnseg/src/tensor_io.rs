//! Tensor file format: a flat little-endian binary payload (`<name>.bin`)
//! plus a JSON sidecar header (`<name>.json`) carrying shape and dtype.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "f64")]
    F64,
    #[serde(rename = "f32")]
    F32,
}

#[derive(Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
    dtype: DType,
}

/// Appends `.ext` to the full file name, preserving dots inside the stem
/// (tensor names such as `enc0.conv0.weight` are legal stems).
fn add_ext(stem: &Path, ext: &str) -> std::path::PathBuf {
    let mut name = stem.as_os_str().to_os_string();
    name.push(".");
    name.push(ext);
    std::path::PathBuf::from(name)
}

/// Writes `<stem>.bin` and `<stem>.json`. `stem` is the path without extension.
pub fn write_tensor(stem: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    let header = Header { shape: t.shape().to_vec(), dtype };
    let json = serde_json::to_string(&header)
        .map_err(|e| Error::FileFormat { path: stem.display().to_string(), msg: e.to_string() })?;
    fs::write(add_ext(stem, "json"), json)?;

    let mut bytes = Vec::with_capacity(t.numel() * if dtype == DType::F64 { 8 } else { 4 });
    match dtype {
        DType::F64 => {
            for &v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        DType::F32 => {
            for &v in t.data() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    fs::write(add_ext(stem, "bin"), bytes)?;
    Ok(())
}

/// Reads a tensor written by [`write_tensor`]; f32 payloads widen to f64.
pub fn read_tensor(stem: &Path) -> Result<Tensor> {
    let json_path = add_ext(stem, "json");
    let text = fs::read_to_string(&json_path)?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::FileFormat {
        path: json_path.display().to_string(),
        msg: e.to_string(),
    })?;

    let bin_path = add_ext(stem, "bin");
    let bytes = fs::read(&bin_path)?;
    let numel: usize = header.shape.iter().product();
    let width = if header.dtype == DType::F64 { 8 } else { 4 };
    if bytes.len() != numel * width {
        return Err(Error::FileFormat {
            path: bin_path.display().to_string(),
            msg: format!("expected {} bytes, found {}", numel * width, bytes.len()),
        });
    }
    let data: Vec<f64> = match header.dtype {
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Tensor::new(&header.shape, data)
}
