//! Keypoint files. Regressor:
//! `{ "rows": [ { "indices": [...], "weights": [...] }, ... ] }`;
//! annotations: `{ "keypoints": [[x, y], ...] }`.

use std::path::Path;

use super::{json_array, json_f64, read_json, FormatError};
use crate::jsonio::JsonWriter;
use nalgebra::Vector2;
use ttp_core::losses::KeypointRegressor;

pub fn regressor_to_json(regressor: &KeypointRegressor) -> String {
    let mut w = JsonWriter::new();
    w.begin_object();
    w.key("rows").begin_array();
    for (indices, weights) in regressor.rows() {
        w.begin_object();
        w.key("indices").array_usize(indices.iter().copied());
        w.key("weights").array_f64(weights.iter().copied());
        w.end_object();
    }
    w.end_array();
    w.end_object();
    w.finish()
}

pub fn load_regressor(path: &Path) -> Result<KeypointRegressor, FormatError> {
    let doc = read_json(path)?;
    let mut rows = Vec::new();
    for row in json_array(&doc["rows"], path, "\"rows\"")? {
        let indices_json = json_array(&row["indices"], path, "\"indices\"")?;
        let weights_json = json_array(&row["weights"], path, "\"weights\"")?;
        let mut indices = Vec::with_capacity(indices_json.len());
        for v in indices_json {
            indices.push(
                v.as_u64()
                    .ok_or_else(|| FormatError::invalid(path, "index is not an integer"))?
                    as usize,
            );
        }
        let mut weights = Vec::with_capacity(weights_json.len());
        for v in weights_json {
            weights.push(json_f64(v, path, "weight")?);
        }
        rows.push((indices, weights));
    }
    KeypointRegressor::new(rows).map_err(|e| FormatError::invalid(path, e.to_string()))
}

pub fn annotations_to_json(keypoints: &[Vector2<f64>]) -> String {
    let mut w = JsonWriter::new();
    w.begin_object();
    w.key("keypoints").begin_array();
    for k in keypoints {
        w.array_f64([k.x, k.y]);
    }
    w.end_array();
    w.end_object();
    w.finish()
}

pub fn load_annotations(path: &Path) -> Result<Vec<Vector2<f64>>, FormatError> {
    let doc = read_json(path)?;
    let mut out = Vec::new();
    for entry in json_array(&doc["keypoints"], path, "\"keypoints\"")? {
        let pair = json_array(entry, path, "keypoint")?;
        if pair.len() != 2 {
            return Err(FormatError::invalid(path, "keypoints must be [x, y] pairs"));
        }
        out.push(Vector2::new(
            json_f64(&pair[0], path, "keypoint x")?,
            json_f64(&pair[1], path, "keypoint y")?,
        ));
    }
    Ok(out)
}
