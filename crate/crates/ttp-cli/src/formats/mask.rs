//! Silhouette mask files: binary PGM (P5) for eyeballing and a run-length
//! JSON for tests:
//! `{ "width": W, "height": H, "runs": [[start, len], ...],
//!    "window": { "cx": f, "cy": f, "half_extent": f } }`
//! with runs of set pixels over the row-major flattening. The window block
//! records the image-to-pixel mapping the mask was rendered with so point
//! losses can be evaluated against it.

use std::path::Path;

use super::{json_array, json_f64, read_json, FormatError};
use crate::jsonio::JsonWriter;
use nalgebra::Vector2;
use ttp_core::raster::{RasterWindow, SilhouetteMask};

/// Binary PGM: 0 background, 255 silhouette.
pub fn to_pgm(mask: &SilhouetteMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.iter().map(|b| if b { 255u8 } else { 0u8 }));
    out
}

pub fn to_rle_json(mask: &SilhouetteMask, window: Option<&RasterWindow>) -> String {
    let mut w = JsonWriter::new();
    w.begin_object();
    w.key("width").value_usize(mask.width);
    w.key("height").value_usize(mask.height);
    w.key("runs").begin_array();
    let mut run_start: Option<usize> = None;
    let mut flat = 0usize;
    for bit in mask.iter() {
        match (bit, run_start) {
            (true, None) => run_start = Some(flat),
            (false, Some(start)) => {
                w.array_usize([start, flat - start]);
                run_start = None;
            }
            _ => {}
        }
        flat += 1;
    }
    if let Some(start) = run_start {
        w.array_usize([start, flat - start]);
    }
    w.end_array();
    if let Some(win) = window {
        w.key("window").begin_object();
        w.key("cx").value_f64(win.center.x);
        w.key("cy").value_f64(win.center.y);
        w.key("half_extent").value_f64(win.half_extent);
        w.end_object();
    }
    w.end_object();
    w.finish()
}

pub fn load_rle(path: &Path) -> Result<(SilhouetteMask, Option<RasterWindow>), FormatError> {
    let doc = read_json(path)?;
    let width = doc["width"]
        .as_u64()
        .ok_or_else(|| FormatError::invalid(path, "missing \"width\""))? as usize;
    let height = doc["height"]
        .as_u64()
        .ok_or_else(|| FormatError::invalid(path, "missing \"height\""))? as usize;
    let mut mask = SilhouetteMask::new(width, height);
    for run in json_array(&doc["runs"], path, "\"runs\"")? {
        let pair = json_array(run, path, "run")?;
        if pair.len() != 2 {
            return Err(FormatError::invalid(path, "runs must be [start, len]"));
        }
        let start = pair[0]
            .as_u64()
            .ok_or_else(|| FormatError::invalid(path, "run start"))? as usize;
        let len = pair[1]
            .as_u64()
            .ok_or_else(|| FormatError::invalid(path, "run length"))? as usize;
        for flat in start..start + len {
            if flat >= width * height {
                return Err(FormatError::invalid(path, "run exceeds the mask"));
            }
            mask.set(flat % width, flat / width, true);
        }
    }
    let window = if doc["window"].is_object() {
        Some(RasterWindow::new(
            Vector2::new(
                json_f64(&doc["window"]["cx"], path, "window cx")?,
                json_f64(&doc["window"]["cy"], path, "window cy")?,
            ),
            json_f64(&doc["window"]["half_extent"], path, "window half_extent")?,
        ))
    } else {
        None
    };
    Ok((mask, window))
}
