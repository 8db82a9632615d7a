//! Fit result files:
//! `{ "r": [3], "t": [2], "s": f, "c": [K], "trace": [...], "converged": b,
//!    "evals": n }`
//! plus the ground-truth sidecar written by `synth` (same pose fields).

use std::path::Path;

use super::{json_array, json_f64, read_json, FormatError};
use crate::jsonio::JsonWriter;
use nalgebra::{DVector, Vector2, Vector3};
use ttp_core::solver::FitResult;

pub fn to_json(result: &FitResult) -> String {
    let mut w = JsonWriter::new();
    w.begin_object();
    w.key("r")
        .array_f64([result.rotation.x, result.rotation.y, result.rotation.z]);
    w.key("t")
        .array_f64([result.translation.x, result.translation.y]);
    w.key("s").value_f64(result.scale);
    w.key("c").array_f64(result.coefficients.iter().copied());
    w.key("trace")
        .array_f64(result.objective_trace.iter().copied());
    w.key("converged").value_bool(result.converged);
    w.key("evals").value_usize(result.evals);
    w.end_object();
    w.finish()
}

fn fixed_array<const N: usize>(
    doc: &serde_json::Value,
    key: &str,
    path: &Path,
) -> Result<[f64; N], FormatError> {
    let arr = json_array(&doc[key], path, key)?;
    if arr.len() != N {
        return Err(FormatError::invalid(
            path,
            format!("\"{key}\" must have {N} entries"),
        ));
    }
    let mut out = [0.0; N];
    for (slot, value) in out.iter_mut().zip(arr) {
        *slot = json_f64(value, path, key)?;
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<FitResult, FormatError> {
    let doc = read_json(path)?;
    let r: [f64; 3] = fixed_array(&doc, "r", path)?;
    let t: [f64; 2] = fixed_array(&doc, "t", path)?;
    let s = json_f64(&doc["s"], path, "\"s\"")?;
    let c_json = json_array(&doc["c"], path, "\"c\"")?;
    let mut c = Vec::with_capacity(c_json.len());
    for v in c_json {
        c.push(json_f64(v, path, "coefficient")?);
    }
    let trace_json = json_array(&doc["trace"], path, "\"trace\"")?;
    let mut trace = Vec::with_capacity(trace_json.len());
    for v in trace_json {
        trace.push(json_f64(v, path, "trace value")?);
    }
    Ok(FitResult {
        rotation: Vector3::new(r[0], r[1], r[2]),
        translation: Vector2::new(t[0], t[1]),
        scale: s,
        coefficients: DVector::from_vec(c),
        objective_trace: trace,
        converged: doc["converged"]
            .as_bool()
            .ok_or_else(|| FormatError::invalid(path, "missing \"converged\""))?,
        evals: doc["evals"]
            .as_u64()
            .ok_or_else(|| FormatError::invalid(path, "missing \"evals\""))? as usize,
    })
}

/// Ground truth written by the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub rotation: Vector3<f64>,
    pub translation: Vector2<f64>,
    pub scale: f64,
    pub coefficients: DVector<f64>,
    pub seed: u64,
}

pub fn ground_truth_to_json(gt: &GroundTruth) -> String {
    let mut w = JsonWriter::new();
    w.begin_object();
    w.key("r")
        .array_f64([gt.rotation.x, gt.rotation.y, gt.rotation.z]);
    w.key("t").array_f64([gt.translation.x, gt.translation.y]);
    w.key("s").value_f64(gt.scale);
    w.key("c").array_f64(gt.coefficients.iter().copied());
    w.key("seed").value_u64(gt.seed);
    w.end_object();
    w.finish()
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth, FormatError> {
    let doc = read_json(path)?;
    let r: [f64; 3] = fixed_array(&doc, "r", path)?;
    let t: [f64; 2] = fixed_array(&doc, "t", path)?;
    let c_json = json_array(&doc["c"], path, "\"c\"")?;
    let mut c = Vec::with_capacity(c_json.len());
    for v in c_json {
        c.push(json_f64(v, path, "coefficient")?);
    }
    Ok(GroundTruth {
        rotation: Vector3::new(r[0], r[1], r[2]),
        translation: Vector2::new(t[0], t[1]),
        scale: json_f64(&doc["s"], path, "\"s\"")?,
        coefficients: DVector::from_vec(c),
        seed: doc["seed"].as_u64().unwrap_or(0),
    })
}
