//! Error metrics of a fit against synthetic ground truth.

use nalgebra::Vector3;
use ttp_core::deform::DeformationBasis;
use ttp_core::geometry::{exp_map, geodesic_distance, WeakPerspectiveCamera};
use ttp_core::losses::silhouette_iou;
use ttp_core::mesh::TemplateMesh;
use ttp_core::raster::{rasterize_silhouette, RasterWindow};
use ttp_core::solver::{FitResult, Observation};

use crate::formats::result::GroundTruth;

/// One evaluated sample. All columns are nonnegative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMetrics {
    /// Geodesic rotation error, radians.
    pub rotation_error: f64,
    /// Euclidean image-translation error.
    pub translation_error: f64,
    /// Relative scale error `|s - s_gt| / s_gt`.
    pub scale_error: f64,
    /// Max-norm coefficient error.
    pub coefficient_error: f64,
    /// RMS reprojection distance against the observed points.
    pub reprojection_rmse: f64,
    /// RMS 3D vertex distance between fitted and true deformed shapes.
    pub vertex_rmse: f64,
    /// Silhouette IoU between the fitted and ground-truth renders.
    pub silhouette_iou: f64,
}

impl SampleMetrics {
    pub const COLUMNS: [&'static str; 7] = [
        "rot_err",
        "t_err",
        "s_err",
        "c_err",
        "reproj_rmse",
        "vertex_rmse",
        "iou",
    ];

    pub fn column(&self, idx: usize) -> f64 {
        [
            self.rotation_error,
            self.translation_error,
            self.scale_error,
            self.coefficient_error,
            self.reprojection_rmse,
            self.vertex_rmse,
            self.silhouette_iou,
        ][idx]
    }
}

fn deformed(mesh: &TemplateMesh, basis: &DeformationBasis, c: &nalgebra::DVector<f64>) -> Vec<Vector3<f64>> {
    mesh.vertices()
        .iter()
        .zip(basis.blocks())
        .map(|(v, b)| v + b * c)
        .collect()
}

/// Reprojection RMSE of a state against the observation, over all points.
pub fn reprojection_rmse(
    mesh: &TemplateMesh,
    basis: &DeformationBasis,
    observation: &Observation,
    result: &FitResult,
) -> f64 {
    let vertices = deformed(mesh, basis, &result.coefficients);
    let cam = WeakPerspectiveCamera::new(result.scale, result.translation).unwrap();
    let projected = cam.project(&exp_map(&result.rotation), &vertices);
    let sum: f64 = projected
        .iter()
        .zip(&observation.points)
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    (sum / mesh.vertex_count() as f64).sqrt()
}

/// Full metric row for one fitted sample. Both silhouettes render through
/// the ground-truth camera window so they are comparable.
pub fn evaluate(
    mesh: &TemplateMesh,
    basis: &DeformationBasis,
    observation: &Observation,
    truth: &GroundTruth,
    result: &FitResult,
    resolution: usize,
) -> SampleMetrics {
    let rotation_error = geodesic_distance(&exp_map(&result.rotation), &exp_map(&truth.rotation));
    let translation_error = (result.translation - truth.translation).norm();
    let scale_error = (result.scale - truth.scale).abs() / truth.scale;
    let coefficient_error = if truth.coefficients.is_empty() {
        result.coefficients.amax()
    } else {
        (&result.coefficients - &truth.coefficients).amax()
    };

    let fitted = deformed(mesh, basis, &result.coefficients);
    let true_shape = deformed(mesh, basis, &truth.coefficients);
    let vertex_rmse = (fitted
        .iter()
        .zip(&true_shape)
        .map(|(a, b)| (a - b).norm_squared())
        .sum::<f64>()
        / mesh.vertex_count() as f64)
        .sqrt();

    let truth_cam = WeakPerspectiveCamera::new(truth.scale, truth.translation).unwrap();
    let fit_cam = WeakPerspectiveCamera::new(result.scale, result.translation).unwrap();
    let window = RasterWindow::from_camera(&truth_cam);
    let truth_mask = rasterize_silhouette(
        &true_shape,
        mesh.faces(),
        &truth_cam,
        &exp_map(&truth.rotation),
        &window,
        resolution,
    );
    let fit_mask = rasterize_silhouette(
        &fitted,
        mesh.faces(),
        &fit_cam,
        &exp_map(&result.rotation),
        &window,
        resolution,
    );
    let (iou, _) = silhouette_iou(&fit_mask, &truth_mask).expect("same resolution");

    SampleMetrics {
        rotation_error,
        translation_error,
        scale_error,
        coefficient_error,
        reprojection_rmse: reprojection_rmse(mesh, basis, observation, result),
        vertex_rmse,
        silhouette_iou: iou,
    }
}
