//! Recovery of weak-perspective camera pose and low-rank non-rigid mesh
//! deformation from 2D vertex observations.
//!
//! The crate fits a rotation, an image-plane translation, a global scale and
//! deformation-basis coefficients to per-vertex 2D points by alternating a
//! quasi-Newton pose update with a closed-form coefficient solve, and can
//! differentiate the fitted parameters with respect to the observations and
//! the basis through the implicit function theorem. Geometric losses (chamfer
//! against silhouette distance fields, cycle, visibility, keypoint
//! reprojection) and an as-rigid-as-possible regularizer operate on the fit
//! outputs. A z-buffer rasterizer provides ground-truth visibility and
//! silhouette-overlap metrics.
//!
//! `ttp-core` is `no_std`-compatible (`default-features = false, features =
//! ["libm"]`); it performs no IO. File formats and the `ttp` command line
//! live in the companion `ttp-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

mod float;

pub mod deform;
pub mod diff;
pub mod geometry;
pub mod lbfgs;
pub mod losses;
pub mod mesh;
pub mod raster;
pub mod solver;

pub use geometry::{exp_map, exp_map_jacobian, geodesic_distance, WeakPerspectiveCamera};
pub use mesh::TemplateMesh;
pub use solver::{fit, FitProblem, FitResult, FitSettings, Observation};
