//! Rotations on SO(3) in angle-axis form, the weak-perspective camera, and
//! projection of 3D vertex sets to 2D image points.
//!
//! A rotation is the 3-vector `r` with `R = exp [r]_x`: the direction of `r`
//! is the axis and its norm the angle in radians. The camera applies `R`,
//! drops z, scales by `s` and shifts by a 2D image translation; the model
//! stores the observable 2-vector translation directly, since a 3D
//! translation's z-component is unidentifiable under this projection.

use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use crate::float::FloatExt;
use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};

/// Errors from camera construction and scale estimation.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    /// Fewer than 3 usable points or zero spread; the scale is unidentifiable.
    #[error("degenerate observation: {0}")]
    DegenerateObservation(&'static str),
    /// Camera scale must be positive and finite.
    #[error("camera scale must be positive and finite, got {0}")]
    InvalidScale(f64),
}

/// Skew-symmetric matrix `[v]_x` implementing the cross product `v × ·`.
#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Scalar coefficients of the Rodrigues formula and their radial derivatives,
/// all regular at the origin.
///
/// With `theta = |r|` and `u = theta^2`:
///   a  = sin(theta)/theta                  (so R = I + a K + b K^2)
///   b  = (1 - cos(theta))/theta^2
///   da = a'(theta)/theta,  db = b'(theta)/theta
///   a2 = (a'/theta)'/theta, b2 = (b'/theta)'/theta
/// The primed quantities divided by theta are exactly what the chain rule
/// through `theta(r)` needs, which is why they (and not the bare primes) are
/// the stored values: each has a finite limit at theta = 0.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RodriguesCoeffs {
    pub a: f64,
    pub b: f64,
    pub da: f64,
    pub db: f64,
    pub a2: f64,
    pub b2: f64,
}

impl RodriguesCoeffs {
    pub fn new(theta: f64) -> Self {
        let u = theta * theta;
        // Closed forms cancel catastrophically near zero; each coefficient
        // switches to its Taylor series below the angle where the series
        // truncation already beats the cancellation error. b uses the
        // half-angle identity (1 - cos)/t^2 = 2 sin^2(t/2)/t^2, which is
        // stable for every t > 0.
        let (a, b) = if theta < 1e-6 {
            (1.0 - u / 6.0 + u * u / 120.0, 0.5 - u / 24.0 + u * u / 720.0)
        } else {
            let half = (0.5 * theta).sin();
            ((theta.sin()) / theta, 2.0 * half * half / u)
        };
        let (da, db) = if theta < 1e-2 {
            (
                -1.0 / 3.0 + u / 30.0 - u * u / 840.0 + u * u * u / 45360.0,
                -1.0 / 12.0 + u / 180.0 - u * u / 6720.0 + u * u * u / 453600.0,
            )
        } else {
            let (s, c) = (theta.sin(), theta.cos());
            (
                (theta * c - s) / (u * theta),
                (theta * s + 2.0 * c - 2.0) / (u * u),
            )
        };
        let (a2, b2) = if theta < 1e-1 {
            (
                1.0 / 15.0 - u / 210.0 + u * u / 7560.0,
                1.0 / 90.0 - u / 1680.0 + u * u / 75600.0,
            )
        } else {
            let (s, c) = (theta.sin(), theta.cos());
            let t5 = u * u * theta;
            (
                (3.0 * s - 3.0 * theta * c - u * s) / t5,
                (u * c - 5.0 * theta * s - 8.0 * c + 8.0) / (t5 * theta),
            )
        };
        Self { a, b, da, db, a2, b2 }
    }
}

/// Rodrigues formula: the rotation matrix `exp [r]_x`.
///
/// Total on finite input; returns the identity exactly at `r = 0` and stays
/// orthogonal to machine precision for all angles (the small-angle branch
/// keeps the coefficients finite).
pub fn exp_map(r: &Vector3<f64>) -> Matrix3<f64> {
    let theta = r.norm();
    let c = RodriguesCoeffs::new(theta);
    let k = skew(r);
    Matrix3::identity() + k * c.a + k * k * c.b
}

/// Derivative of `exp_map`: `out[k] = dR/dr_k`.
///
/// Each entry of `out[k]` is the partial derivative of the corresponding
/// entry of the rotation matrix with respect to component `k` of `r`.
pub fn exp_map_jacobian(r: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let theta = r.norm();
    let c = RodriguesCoeffs::new(theta);
    let k = skew(r);
    let k2 = k * k;
    let mut out = [Matrix3::zeros(); 3];
    for (j, d) in out.iter_mut().enumerate() {
        let g = skew(&Vector3::ith(j, 1.0));
        *d = k * (c.da * r[j]) + g * c.a + k2 * (c.db * r[j]) + (g * k + k * g) * c.b;
    }
    out
}

/// Second derivatives of `exp_map`: `out[k][l] = d^2 R / dr_k dr_l`.
///
/// Symmetric in `(k, l)`; needed for the analytic Hessian of the
/// reprojection objective.
pub fn exp_map_second_derivatives(r: &Vector3<f64>) -> [[Matrix3<f64>; 3]; 3] {
    let theta = r.norm();
    let c = RodriguesCoeffs::new(theta);
    let k = skew(r);
    let k2 = k * k;
    let g: [Matrix3<f64>; 3] = [
        skew(&Vector3::x()),
        skew(&Vector3::y()),
        skew(&Vector3::z()),
    ];
    let gk: [Matrix3<f64>; 3] = [g[0] * k + k * g[0], g[1] * k + k * g[1], g[2] * k + k * g[2]];
    let mut out = [[Matrix3::zeros(); 3]; 3];
    for p in 0..3 {
        for q in p..3 {
            let delta = if p == q { 1.0 } else { 0.0 };
            let m = k * (c.a2 * r[p] * r[q] + c.da * delta)
                + (g[q] * r[p] + g[p] * r[q]) * c.da
                + k2 * (c.b2 * r[p] * r[q] + c.db * delta)
                + (gk[q] * r[p] + gk[p] * r[q]) * c.db
                + (g[p] * g[q] + g[q] * g[p]) * c.b;
            out[p][q] = m;
            out[q][p] = m;
        }
    }
    out
}

/// Geodesic distance between two rotations, in radians.
///
/// `arccos((tr(R1^T R2) - 1)/2)`, clamped against round-off; symmetric and
/// in `[0, pi]`.
pub fn geodesic_distance(r1: &Matrix3<f64>, r2: &Matrix3<f64>) -> f64 {
    let t = (r1.transpose() * r2).trace();
    (0.5 * (t - 1.0)).clamp(-1.0, 1.0).acos()
}

/// Re-parametrize an angle-axis vector so its norm lies in `[0, pi]`,
/// flipping the axis where required. Same rotation, better-conditioned chart.
pub fn wrap_angle_axis(r: &Vector3<f64>) -> Vector3<f64> {
    let theta = r.norm();
    if theta <= core::f64::consts::PI {
        return *r;
    }
    let two_pi = 2.0 * core::f64::consts::PI;
    let wrapped = theta - two_pi * ((theta + core::f64::consts::PI) / two_pi).floor();
    r * (wrapped / theta)
}

/// Weak-perspective camera: uniform scale `s > 0` (image units per model
/// unit) and an image-plane translation, both applied after rotation and
/// orthographic z-drop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakPerspectiveCamera {
    pub scale: f64,
    pub translation: Vector2<f64>,
}

impl WeakPerspectiveCamera {
    pub fn new(scale: f64, translation: Vector2<f64>) -> Result<Self, GeometryError> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(GeometryError::InvalidScale(scale));
        }
        Ok(Self { scale, translation })
    }

    /// The 2x3 map `v -> s * (R v)_xy`, i.e. the scaled top two rows of `R`.
    pub fn projection(&self, rotation: &Matrix3<f64>) -> Matrix2x3<f64> {
        let mut p = Matrix2x3::zeros();
        for i in 0..2 {
            for j in 0..3 {
                p[(i, j)] = self.scale * rotation[(i, j)];
            }
        }
        p
    }

    /// Project a vertex set: `u_i = s * (R v_i)_xy + t`.
    pub fn project(&self, rotation: &Matrix3<f64>, vertices: &[Vector3<f64>]) -> Vec<Vector2<f64>> {
        let p = self.projection(rotation);
        vertices.iter().map(|v| p * v + self.translation).collect()
    }
}

/// Which points the scale estimator uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScaleRule {
    /// All points, weighted by their visibility value.
    #[default]
    Weighted,
    /// Only points with visibility above 0.5, each with unit weight.
    VisibleOnly,
}

/// Camera scale from the spread of the observed 2D points.
///
/// Returns the visibility-weighted per-coordinate standard deviation of the
/// points about their weighted centroid. Against a template normalized to
/// zero centroid and unit per-coordinate RMS radius (see the mesh module),
/// a scale of 1 reproduces an orthographic view of the template.
pub fn estimate_scale(
    points: &[Vector2<f64>],
    visibility: &[f64],
    rule: ScaleRule,
) -> Result<f64, GeometryError> {
    assert_eq!(points.len(), visibility.len());
    let weight = |v: f64| match rule {
        ScaleRule::Weighted => v,
        ScaleRule::VisibleOnly => {
            if v > 0.5 {
                1.0
            } else {
                0.0
            }
        }
    };
    let usable = visibility.iter().filter(|&&v| v > 0.5).count();
    if usable < 3 {
        return Err(GeometryError::DegenerateObservation(
            "fewer than 3 points with visibility above 0.5",
        ));
    }
    let mut wsum = 0.0;
    let mut centroid = Vector2::zeros();
    for (u, &v) in points.iter().zip(visibility) {
        let w = weight(v);
        wsum += w;
        centroid += u * w;
    }
    centroid /= wsum;
    let mut var = 0.0;
    for (u, &v) in points.iter().zip(visibility) {
        var += weight(v) * (u - centroid).norm_squared();
    }
    let s = (var / (2.0 * wsum)).sqrt();
    if !(s.is_finite() && s > 1e-12) {
        return Err(GeometryError::DegenerateObservation("zero spread"));
    }
    Ok(s)
}
