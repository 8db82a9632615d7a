//! On-disk formats. JSON documents are written through [`crate::jsonio`]
//! for bit-stable output and parsed with serde_json.

pub mod basis;
pub mod config;
pub mod keypoints;
pub mod mask;
pub mod obj;
pub mod observation;
pub mod result;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Mesh(#[from] ttp_core::mesh::MeshError),
}

impl FormatError {
    pub fn invalid(path: &std::path::Path, message: impl Into<String>) -> Self {
        FormatError::Invalid {
            path: path.display().to_string(),
            message: message.into(),
        }
    }
}

pub(crate) fn read_json(path: &std::path::Path) -> Result<serde_json::Value, FormatError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| FormatError::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub(crate) fn json_f64(
    value: &serde_json::Value,
    path: &std::path::Path,
    what: &str,
) -> Result<f64, FormatError> {
    value
        .as_f64()
        .ok_or_else(|| FormatError::invalid(path, format!("{what} is not a number")))
}

pub(crate) fn json_array<'v>(
    value: &'v serde_json::Value,
    path: &std::path::Path,
    what: &str,
) -> Result<&'v Vec<serde_json::Value>, FormatError> {
    value
        .as_array()
        .ok_or_else(|| FormatError::invalid(path, format!("{what} is not an array")))
}
