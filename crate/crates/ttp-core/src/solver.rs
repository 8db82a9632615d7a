//! Alternating estimation of camera pose and deformation coefficients.
//!
//! The objective is the visibility-weighted squared reprojection error of
//! the deformed, posed, projected template against the observed 2D points,
//! plus a coefficient regularizer:
//!
//! `l(r, t, c) = sum_i v_i |u_i - uhat_i|^2 + gamma |c|^2`
//!
//! with `uhat_i = s (R (T_i + B_i c))_xy + t`. Each outer iteration solves
//! the pose subproblem over `(r, t)` with L-BFGS (analytic gradients through
//! the exponential-map Jacobian, warm-started from the previous iterate) and
//! then the coefficients in closed form by a symmetric positive-definite
//! solve. The scale is estimated once from the observation spread before
//! iterating and is never re-optimized.

use alloc::vec;
use alloc::vec::Vec;

use crate::deform::DeformationBasis;
use crate::geometry::{
    estimate_scale, exp_map, exp_map_jacobian, wrap_angle_axis, GeometryError, ScaleRule,
};
use crate::lbfgs::{self, LbfgsParams};
use crate::mesh::TemplateMesh;
use nalgebra::{DMatrix, DVector, Matrix2xX, Matrix3, Matrix2x3, Vector2, Vector3};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SolveError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(&'static str),
    #[error("invalid problem: {0}")]
    InvalidProblem(&'static str),
    #[error("normal matrix is singular (gamma = 0 with rank-deficient basis)")]
    SingularSystem,
}

/// Observed 2D points with per-vertex visibility weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub points: Vec<Vector2<f64>>,
    pub visibility: Vec<f64>,
}

impl Observation {
    pub fn new(points: Vec<Vector2<f64>>, visibility: Vec<f64>) -> Result<Self, SolveError> {
        if points.len() != visibility.len() {
            return Err(SolveError::DimensionMismatch(
                "points and visibility lengths differ",
            ));
        }
        if points.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(SolveError::InvalidProblem("non-finite observation point"));
        }
        if visibility.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(SolveError::InvalidProblem("visibility outside [0, 1]"));
        }
        Ok(Self { points, visibility })
    }

    /// Skips the `[0, 1]` visibility check; used by finite-difference probes
    /// that nudge visibilities outside the valid range.
    pub fn new_unchecked(points: Vec<Vector2<f64>>, visibility: Vec<f64>) -> Self {
        Self { points, visibility }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Solver configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitSettings {
    /// Coefficient regularizer weight `gamma >= 0`.
    pub gamma: f64,
    /// Outer alternation count.
    pub iterations: usize,
    pub lbfgs: LbfgsParams,
    pub scale_rule: ScaleRule,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            gamma: 1e-3,
            iterations: 4,
            lbfgs: LbfgsParams::default(),
            scale_rule: ScaleRule::Weighted,
        }
    }
}

/// An immutable fitting problem; reentrant and safe to fit concurrently.
#[derive(Debug, Clone)]
pub struct FitProblem<'a> {
    pub mesh: &'a TemplateMesh,
    pub basis: &'a DeformationBasis,
    pub observation: &'a Observation,
    pub settings: FitSettings,
}

impl<'a> FitProblem<'a> {
    pub fn new(
        mesh: &'a TemplateMesh,
        basis: &'a DeformationBasis,
        observation: &'a Observation,
        settings: FitSettings,
    ) -> Result<Self, SolveError> {
        let n = mesh.vertex_count();
        if basis.vertex_count() != n {
            return Err(SolveError::DimensionMismatch(
                "basis vertex count differs from mesh",
            ));
        }
        if observation.len() != n {
            return Err(SolveError::DimensionMismatch(
                "observation length differs from mesh",
            ));
        }
        if !(settings.gamma >= 0.0) {
            return Err(SolveError::InvalidProblem("gamma must be nonnegative"));
        }
        if settings.iterations == 0 {
            return Err(SolveError::InvalidProblem("iterations must be at least 1"));
        }
        Ok(Self {
            mesh,
            basis,
            observation,
            settings,
        })
    }

    /// Parameter dimension `3 + 2 + K`.
    pub fn dim(&self) -> usize {
        5 + self.basis.components()
    }
}

/// Fitted pose and deformation.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    /// Angle-axis rotation.
    pub rotation: Vector3<f64>,
    /// Image-plane translation.
    pub translation: Vector2<f64>,
    /// Camera scale (fixed by the spread rule, not optimized).
    pub scale: f64,
    pub coefficients: DVector<f64>,
    /// Objective value after each outer iteration; non-increasing.
    pub objective_trace: Vec<f64>,
    /// The final iterate is a stationary point of the full objective
    /// (gradient norm below [`STATIONARITY_TOLERANCE`]), which is also the
    /// precondition for differentiating the fit.
    pub converged: bool,
    /// Total objective evaluations across all pose subproblems.
    pub evals: usize,
}

/// Gradient norm under which a fit counts as converged to a stationary
/// point. Matches the implicit-function-theorem gate in the diff module.
pub const STATIONARITY_TOLERANCE: f64 = 1e-6;

/// Scaled projection rows `s * (R)_xy` and their rotation derivatives.
pub(crate) struct ProjectionOperator {
    /// `s P R`, the 2x3 map applied to vertices.
    pub q: Matrix2x3<f64>,
    /// `s P dR/dr_k`.
    pub dq: [Matrix2x3<f64>; 3],
}

impl ProjectionOperator {
    pub fn new(scale: f64, r: &Vector3<f64>) -> Self {
        let rot = exp_map(r);
        let jac = exp_map_jacobian(r);
        let top2 = |m: &Matrix3<f64>| -> Matrix2x3<f64> {
            Matrix2x3::new(m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)])
                * scale
        };
        Self {
            q: top2(&rot),
            dq: [top2(&jac[0]), top2(&jac[1]), top2(&jac[2])],
        }
    }
}

/// Objective value and its analytic gradient stacked as `(dr, dt, dc)`.
pub fn objective(
    problem: &FitProblem,
    scale: f64,
    r: &Vector3<f64>,
    t: &Vector2<f64>,
    c: &DVector<f64>,
) -> (f64, DVector<f64>) {
    let k = problem.basis.components();
    let op = ProjectionOperator::new(scale, r);
    let template = problem.mesh.vertices();
    let obs = problem.observation;
    let gamma = problem.settings.gamma;

    let mut value = gamma * c.norm_squared();
    let mut grad = DVector::zeros(5 + k);
    for j in 0..k {
        grad[5 + j] = 2.0 * gamma * c[j];
    }
    for i in 0..template.len() {
        let v = obs.visibility[i];
        if v == 0.0 {
            continue;
        }
        let block = problem.basis.block(i);
        let vertex = if k == 0 {
            template[i]
        } else {
            template[i] + block * c
        };
        let e = obs.points[i] - (op.q * vertex + t);
        value += v * e.norm_squared();
        let w = -2.0 * v;
        for axis in 0..3 {
            grad[axis] += w * e.dot(&(op.dq[axis] * vertex));
        }
        grad[3] += w * e.x;
        grad[4] += w * e.y;
        if k > 0 {
            // d/dc = -2 v (q B_i)^T e
            let qe = op.q.transpose() * e;
            for j in 0..k {
                grad[5 + j] += w * block.column(j).dot(&qe);
            }
        }
    }
    (value, grad)
}

/// Objective value only.
pub fn objective_value(
    problem: &FitProblem,
    scale: f64,
    r: &Vector3<f64>,
    t: &Vector2<f64>,
    c: &DVector<f64>,
) -> f64 {
    let op = ProjectionOperator::new(scale, r);
    let k = problem.basis.components();
    let mut value = problem.settings.gamma * c.norm_squared();
    for i in 0..problem.mesh.vertex_count() {
        let v = problem.observation.visibility[i];
        if v == 0.0 {
            continue;
        }
        let vertex = if k == 0 {
            problem.mesh.vertices()[i]
        } else {
            problem.mesh.vertices()[i] + problem.basis.block(i) * c
        };
        let e = problem.observation.points[i] - (op.q * vertex + t);
        value += v * e.norm_squared();
    }
    value
}

/// Outcome of one pose subproblem.
#[derive(Debug, Clone)]
pub struct RotationStep {
    pub rotation: Vector3<f64>,
    pub translation: Vector2<f64>,
    pub objective: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Minimize the objective over `(r, t)` with the coefficients held fixed.
///
/// L-BFGS with analytic gradients; the returned rotation is re-wrapped to
/// `|r| <= pi`. A line-search failure is reported as `converged = false`
/// with the best iterate so far.
pub fn rotation_step(
    problem: &FitProblem,
    scale: f64,
    c: &DVector<f64>,
    init_r: &Vector3<f64>,
    init_t: &Vector2<f64>,
) -> RotationStep {
    // The deformed shape is constant during this step.
    let vertices: Vec<Vector3<f64>> = if problem.basis.components() == 0 {
        problem.mesh.vertices().to_vec()
    } else {
        problem
            .mesh
            .vertices()
            .iter()
            .zip(problem.basis.blocks())
            .map(|(t, b)| t + b * c)
            .collect()
    };
    let obs = problem.observation;
    // The coefficient regularizer is constant over (r, t); leaving it out of
    // the line-search objective keeps tiny decreases measurable near the
    // optimum. It is added back to the reported objective.
    let reg = problem.settings.gamma * c.norm_squared();
    let eval = |x: &DVector<f64>| -> (f64, DVector<f64>) {
        let r = Vector3::new(x[0], x[1], x[2]);
        let t = Vector2::new(x[3], x[4]);
        let op = ProjectionOperator::new(scale, &r);
        let mut value = 0.0;
        let mut grad = DVector::zeros(5);
        for (i, vertex) in vertices.iter().enumerate() {
            let v = obs.visibility[i];
            if v == 0.0 {
                continue;
            }
            let e = obs.points[i] - (op.q * vertex + t);
            value += v * e.norm_squared();
            let w = -2.0 * v;
            for axis in 0..3 {
                grad[axis] += w * e.dot(&(op.dq[axis] * vertex));
            }
            grad[3] += w * e.x;
            grad[4] += w * e.y;
        }
        (value, grad)
    };
    let x0 = DVector::from_vec(vec![init_r.x, init_r.y, init_r.z, init_t.x, init_t.y]);
    let out = lbfgs::minimize(eval, x0, &problem.settings.lbfgs);
    RotationStep {
        rotation: wrap_angle_axis(&Vector3::new(out.x[0], out.x[1], out.x[2])),
        translation: Vector2::new(out.x[3], out.x[4]),
        objective: out.value + reg,
        evals: out.evals,
        converged: out.converged,
    }
}

/// Closed-form coefficient update with the pose held fixed:
/// `c = (Omega^T X Omega + gamma I)^{-1} Omega^T X Upsilon`, solved by
/// Cholesky (with a trace-scaled jitter retry), never by explicit inversion.
pub fn coefficient_step(
    problem: &FitProblem,
    scale: f64,
    r: &Vector3<f64>,
    t: &Vector2<f64>,
) -> Result<DVector<f64>, SolveError> {
    let k = problem.basis.components();
    if k == 0 {
        return Ok(DVector::zeros(0));
    }
    let op = ProjectionOperator::new(scale, r);
    let mut normal = DMatrix::<f64>::zeros(k, k);
    let mut rhs = DVector::<f64>::zeros(k);
    for i in 0..problem.mesh.vertex_count() {
        let v = problem.observation.visibility[i];
        if v == 0.0 {
            continue;
        }
        // Omega_i = s P R B_i (2 x K), Upsilon_i = u_i - s P R T_i - t.
        let omega: Matrix2xX<f64> = op.q * problem.basis.block(i);
        let y = problem.observation.points[i] - op.q * problem.mesh.vertices()[i] - t;
        for a in 0..k {
            let col_a = omega.column(a);
            rhs[a] += v * col_a.dot(&y);
            for b in a..k {
                let dot = v * col_a.dot(&omega.column(b));
                normal[(a, b)] += dot;
            }
        }
    }
    for a in 0..k {
        normal[(a, a)] += problem.settings.gamma;
        for b in 0..a {
            normal[(a, b)] = normal[(b, a)];
        }
    }
    spd_solve(normal, rhs)
}

/// Cholesky solve with one jitter retry (`1e-12 * trace` added to the
/// diagonal) before giving up.
fn spd_solve(mut a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>, SolveError> {
    if let Some(chol) = a.clone().cholesky() {
        return Ok(chol.solve(&b));
    }
    let jitter = 1e-12 * a.trace();
    if jitter > 0.0 {
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
        if let Some(chol) = a.clone().cholesky() {
            return Ok(chol.solve(&b));
        }
    }
    Err(SolveError::SingularSystem)
}

/// Visibility-weighted centroid of the observed points; the default
/// translation initializer (the normalized template projects to its own
/// centroid at `c = 0`).
fn weighted_centroid(obs: &Observation) -> Vector2<f64> {
    let mut wsum = 0.0;
    let mut sum = Vector2::zeros();
    for (u, &v) in obs.points.iter().zip(&obs.visibility) {
        wsum += v;
        sum += u * v;
    }
    if wsum > 0.0 {
        sum / wsum
    } else {
        let n = obs.len().max(1) as f64;
        obs.points.iter().sum::<Vector2<f64>>() / n
    }
}

/// Full alternating fit. The scale is estimated once from the observation;
/// the pose starts at `init` (default: zero rotation, weighted centroid
/// translation) and the coefficients at zero.
pub fn fit(
    problem: &FitProblem,
    init: Option<(Vector3<f64>, Vector2<f64>)>,
) -> Result<FitResult, SolveError> {
    let scale = estimate_scale(
        &problem.observation.points,
        &problem.observation.visibility,
        problem.settings.scale_rule,
    )?;
    fit_with_scale(problem, scale, init)
}

/// `fit` with the camera scale supplied by the caller instead of estimated.
///
/// This is the entry point for finite-difference probes, which must hold the
/// scale constant while perturbing the observation (gradients do not flow
/// through the scale rule).
pub fn fit_with_scale(
    problem: &FitProblem,
    scale: f64,
    init: Option<(Vector3<f64>, Vector2<f64>)>,
) -> Result<FitResult, SolveError> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(SolveError::InvalidProblem("scale must be positive"));
    }
    let (mut r, mut t) =
        init.unwrap_or_else(|| (Vector3::zeros(), weighted_centroid(problem.observation)));
    let mut c = DVector::zeros(problem.basis.components());
    let mut trace = Vec::with_capacity(problem.settings.iterations);
    let mut evals = 0;
    for _ in 0..problem.settings.iterations {
        let step = rotation_step(problem, scale, &c, &r, &t);
        r = step.rotation;
        t = step.translation;
        evals += step.evals;
        c = coefficient_step(problem, scale, &r, &t)?;
        trace.push(objective_value(problem, scale, &r, &t, &c));
    }
    let (_, gradient) = objective(problem, scale, &r, &t, &c);
    Ok(FitResult {
        rotation: r,
        translation: t,
        scale,
        coefficients: c,
        objective_trace: trace,
        converged: gradient.norm() < STATIONARITY_TOLERANCE,
        evals,
    })
}
