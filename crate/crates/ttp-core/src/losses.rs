//! Geometric losses over fit outputs: chamfer consistency/coverage against a
//! silhouette distance field, cycle, visibility, keypoint reprojection, and
//! silhouette overlap metrics.
//!
//! Chamfer terms operate in pixel coordinates (pixel centers at integer
//! coordinates); map image-space points through a `RasterWindow` first.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use crate::float::FloatExt;
use crate::geometry::WeakPerspectiveCamera;
use crate::raster::SilhouetteMask;
use nalgebra::{Matrix3, Vector2, Vector3};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LossError {
    #[error("mask has no set pixels")]
    EmptyMask,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(&'static str),
    #[error("masks have different resolutions")]
    ResolutionMismatch,
    #[error("keypoint regressor row {row} is invalid: {reason}")]
    InvalidRegressor { row: usize, reason: &'static str },
}

/// Euclidean distance (in pixels) to the nearest mask-interior pixel;
/// exactly zero on mask pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    pub width: usize,
    pub height: usize,
    values: Vec<f64>,
}

impl DistanceField {
    /// Exact Euclidean distance transform of the mask complement.
    ///
    /// Column pass: per-column squared distance to the nearest set pixel in
    /// that column. Row pass: lower envelope of parabolas (the two-pass
    /// exact EDT). All squared distances are integer-valued f64, so the
    /// result equals a brute-force nearest-pixel scan bit for bit.
    pub fn from_mask(mask: &SilhouetteMask) -> Result<Self, LossError> {
        if mask.area() == 0 {
            return Err(LossError::EmptyMask);
        }
        let (w, h) = (mask.width, mask.height);
        // Squared vertical distance per column.
        let mut colsq = vec![f64::INFINITY; w * h];
        for x in 0..w {
            let mut dist = f64::INFINITY;
            for y in 0..h {
                dist = if mask.get(x, y) { 0.0 } else { dist + 1.0 };
                colsq[y * w + x] = dist * dist;
            }
            dist = f64::INFINITY;
            for y in (0..h).rev() {
                dist = if mask.get(x, y) { 0.0 } else { dist + 1.0 };
                let cell = &mut colsq[y * w + x];
                *cell = cell.min(dist * dist);
            }
        }
        let mut values = vec![0.0; w * h];
        let mut hull_x = vec![0usize; w];
        let mut hull_b = vec![0.0f64; w + 1];
        for y in 0..h {
            let row = &colsq[y * w..(y + 1) * w];
            lower_envelope(row, &mut values[y * w..(y + 1) * w], &mut hull_x, &mut hull_b);
        }
        for v in values.iter_mut() {
            *v = v.sqrt();
        }
        Ok(Self {
            width: w,
            height: h,
            values,
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Bilinear sample at fractional pixel coordinates; queries outside the
    /// grid clamp to the border.
    pub fn sample(&self, p: &Vector2<f64>) -> f64 {
        let x = p.x.clamp(0.0, (self.width - 1) as f64);
        let y = p.y.clamp(0.0, (self.height - 1) as f64);
        let x0 = (x.floor() as usize).min(self.width - 1);
        let y0 = (y.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x1, y0) * fx;
        let bottom = self.at(x0, y1) * (1.0 - fx) + self.at(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// 1D squared-distance lower envelope (Felzenszwalb-Huttenlocher): given
/// per-cell costs `f`, fill `out[q] = min_p (q - p)^2 + f[p]`.
fn lower_envelope(f: &[f64], out: &mut [f64], hull_x: &mut [usize], hull_b: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let mut started = false;
    for q in 0..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        if !started {
            hull_x[0] = q;
            hull_b[0] = f64::NEG_INFINITY;
            hull_b[1] = f64::INFINITY;
            started = true;
            continue;
        }
        loop {
            let p = hull_x[k];
            // Intersection of the parabolas rooted at p and q.
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2 * (q - p)) as f64;
            if s <= hull_b[k] {
                if k == 0 {
                    hull_x[0] = q;
                    hull_b[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                hull_x[k] = q;
                hull_b[k] = s;
                hull_b[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    debug_assert!(started, "envelope needs at least one finite cost");
    let mut j = 0usize;
    for q in 0..n {
        while hull_b[j + 1] < q as f64 {
            j += 1;
        }
        let p = hull_x[j];
        let d = q as f64 - p as f64;
        out[q] = d * d + f[p];
    }
}

/// Points-vs-silhouette chamfer terms, both in pixel units.
///
/// Consistency penalizes points outside the mask by their distance to it
/// (bilinear field lookup). Coverage sums, over every mask pixel center, the
/// distance to the nearest point; the nearest-point search uses a uniform
/// bucket grid but returns exactly the brute-force minimum.
pub fn chamfer_loss(
    points: &[Vector2<f64>],
    mask: &SilhouetteMask,
    field: &DistanceField,
) -> Result<(f64, f64), LossError> {
    if mask.width != field.width || mask.height != field.height {
        return Err(LossError::ResolutionMismatch);
    }
    if points.is_empty() {
        return Err(LossError::DimensionMismatch("no points"));
    }
    let consistency = points.iter().map(|p| field.sample(p)).sum();

    // Bucket points by pixel cell, clamped into the grid; clamped points are
    // merely examined earlier than their true distance warrants, which keeps
    // the ring search exact.
    let (w, h) = (mask.width, mask.height);
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); w * h];
    for (idx, p) in points.iter().enumerate() {
        let bx = (p.x.floor().max(0.0) as usize).min(w - 1);
        let by = (p.y.floor().max(0.0) as usize).min(h - 1);
        buckets[by * w + bx].push(idx);
    }
    let mut coverage = 0.0;
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let q = Vector2::new(x as f64, y as f64);
            let mut best = f64::INFINITY;
            let max_ring = w.max(h);
            for ring in 0..=max_ring {
                // Cells at Chebyshev distance `ring` hold points no closer
                // than `ring - 1`; once that bound exceeds the best distance
                // the search is complete.
                if ring >= 2 && ((ring - 1) as f64) > best {
                    break;
                }
                let x_lo = x as isize - ring as isize;
                let x_hi = x as isize + ring as isize;
                let y_lo = y as isize - ring as isize;
                let y_hi = y as isize + ring as isize;
                let visit = |cx: isize, cy: isize, coverage_best: &mut f64| {
                    if cx < 0 || cy < 0 || cx >= w as isize || cy >= h as isize {
                        return;
                    }
                    for &idx in &buckets[cy as usize * w + cx as usize] {
                        let d = (points[idx] - q).norm();
                        if d < *coverage_best {
                            *coverage_best = d;
                        }
                    }
                };
                if ring == 0 {
                    visit(x as isize, y as isize, &mut best);
                } else {
                    for cx in x_lo..=x_hi {
                        visit(cx, y_lo, &mut best);
                        visit(cx, y_hi, &mut best);
                    }
                    for cy in (y_lo + 1)..y_hi {
                        visit(x_lo, cy, &mut best);
                        visit(x_hi, cy, &mut best);
                    }
                }
            }
            coverage += best;
        }
    }
    Ok((consistency, coverage))
}

/// Squared-distance cycle term between observed points and the projection of
/// the reconstructed vertices.
pub fn cycle_loss(
    observed: &[Vector2<f64>],
    projected: &[Vector2<f64>],
) -> Result<f64, LossError> {
    if observed.len() != projected.len() {
        return Err(LossError::DimensionMismatch("point sets differ in length"));
    }
    Ok(observed
        .iter()
        .zip(projected)
        .map(|(u, p)| (u - p).norm_squared())
        .sum())
}

/// L1 visibility discrepancy `sum_i |v_i - v^gt_i|`.
pub fn visibility_loss(v: &[f64], v_gt: &[f64]) -> Result<f64, LossError> {
    if v.len() != v_gt.len() {
        return Err(LossError::DimensionMismatch(
            "visibility vectors differ in length",
        ));
    }
    Ok(v.iter().zip(v_gt).map(|(a, b)| (a - b).abs()).sum())
}

/// Fixed linear regressor extracting semantic 3D keypoints from the mesh:
/// each row is a sparse convex combination of vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointRegressor {
    rows: Vec<(Vec<usize>, Vec<f64>)>,
}

impl KeypointRegressor {
    pub fn new(rows: Vec<(Vec<usize>, Vec<f64>)>) -> Result<Self, LossError> {
        for (row, (indices, weights)) in rows.iter().enumerate() {
            if indices.len() != weights.len() {
                return Err(LossError::InvalidRegressor {
                    row,
                    reason: "indices and weights differ in length",
                });
            }
            if weights.iter().any(|&w| w < 0.0) {
                return Err(LossError::InvalidRegressor {
                    row,
                    reason: "negative weight",
                });
            }
            let sum: f64 = weights.iter().sum();
            if (sum - 1.0).abs() > 1e-10 {
                return Err(LossError::InvalidRegressor {
                    row,
                    reason: "weights do not sum to 1",
                });
            }
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[(Vec<usize>, Vec<f64>)] {
        &self.rows
    }

    /// Regressed 3D keypoints `K_i V`.
    pub fn apply(&self, vertices: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>, LossError> {
        self.rows
            .iter()
            .enumerate()
            .map(|(row, (indices, weights))| {
                let mut p = Vector3::zeros();
                for (&i, &w) in indices.iter().zip(weights) {
                    if i >= vertices.len() {
                        return Err(LossError::InvalidRegressor {
                            row,
                            reason: "vertex index out of range",
                        });
                    }
                    p += vertices[i] * w;
                }
                Ok(p)
            })
            .collect()
    }
}

/// L1 reprojection error of regressed keypoints against 2D annotations:
/// `sum_i |k_i - project(K_i V)|_1`.
pub fn keypoint_loss(
    regressor: &KeypointRegressor,
    vertices: &[Vector3<f64>],
    camera: &WeakPerspectiveCamera,
    rotation: &Matrix3<f64>,
    annotations: &[Vector2<f64>],
) -> Result<f64, LossError> {
    if annotations.len() != regressor.len() {
        return Err(LossError::DimensionMismatch(
            "annotation count differs from regressor rows",
        ));
    }
    let keypoints = regressor.apply(vertices)?;
    let projected = camera.project(rotation, &keypoints);
    Ok(annotations
        .iter()
        .zip(&projected)
        .map(|(a, p)| (a.x - p.x).abs() + (a.y - p.y).abs())
        .sum())
}

/// Silhouette overlap: IoU plus the absolute-difference pixel count.
/// Two empty masks have IoU 1 by convention.
pub fn silhouette_iou(a: &SilhouetteMask, b: &SilhouetteMask) -> Result<(f64, usize), LossError> {
    if a.width != b.width || a.height != b.height {
        return Err(LossError::ResolutionMismatch);
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    let mut diff = 0usize;
    for (pa, pb) in a.iter().zip(b.iter()) {
        inter += (pa && pb) as usize;
        union += (pa || pb) as usize;
        diff += (pa != pb) as usize;
    }
    let iou = if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    };
    Ok((iou, diff))
}
