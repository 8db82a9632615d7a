//! Observation files: `{ "points": [[x, y], ...], "visibility": [v, ...] }`.

use std::path::Path;

use super::{json_array, json_f64, read_json, FormatError};
use crate::jsonio::JsonWriter;
use nalgebra::Vector2;
use ttp_core::solver::Observation;

pub fn to_json(observation: &Observation) -> String {
    let mut w = JsonWriter::new();
    w.begin_object();
    w.key("points").begin_array();
    for p in &observation.points {
        w.array_f64([p.x, p.y]);
    }
    w.end_array();
    w.key("visibility")
        .array_f64(observation.visibility.iter().copied());
    w.end_object();
    w.finish()
}

pub fn load(path: &Path) -> Result<Observation, FormatError> {
    let doc = read_json(path)?;
    let points_json = json_array(&doc["points"], path, "\"points\"")?;
    let mut points = Vec::with_capacity(points_json.len());
    for entry in points_json {
        let pair = json_array(entry, path, "point")?;
        if pair.len() != 2 {
            return Err(FormatError::invalid(path, "points must be [x, y] pairs"));
        }
        points.push(Vector2::new(
            json_f64(&pair[0], path, "point x")?,
            json_f64(&pair[1], path, "point y")?,
        ));
    }
    let vis_json = json_array(&doc["visibility"], path, "\"visibility\"")?;
    let mut visibility = Vec::with_capacity(vis_json.len());
    for entry in vis_json {
        visibility.push(json_f64(entry, path, "visibility")?);
    }
    Observation::new(points, visibility).map_err(|e| FormatError::invalid(path, e.to_string()))
}
