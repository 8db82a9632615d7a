//! Optional JSON config file mirroring the CLI flags; explicit flags win.

use std::path::Path;

use serde::Deserialize;

use super::FormatError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub iters: Option<usize>,
    pub k: Option<usize>,
    pub gamma: Option<f64>,
    pub seed: Option<u64>,
    pub res: Option<usize>,
    pub threads: Option<usize>,
    pub out_dir: Option<String>,
    pub mesh: Option<String>,
    pub noise: Option<f64>,
    pub occlusion: Option<f64>,
    pub cone_degrees: Option<f64>,
    pub vis_mode: Option<String>,
    pub samples: Option<usize>,
    pub step: Option<f64>,
    pub tolerance: Option<f64>,
}

pub fn load(path: &Path) -> Result<FileConfig, FormatError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| FormatError::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}
