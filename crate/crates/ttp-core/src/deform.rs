//! Low-rank deformation model `V = T + B c`, the as-rigid-as-possible energy
//! with per-vertex best-fit rotations, and the L2 deformation penalty.

use alloc::vec::Vec;

use crate::mesh::TemplateMesh;
use nalgebra::{DVector, Matrix3, Matrix3xX, Vector3};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DeformError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(&'static str),
    #[error("edge covariance is numerically zero; no rotation is determined")]
    DegenerateCovariance,
}

/// Per-vertex deformation basis: one `3 x K` block per vertex. `K = 0` is a
/// rigid-only model. The flat `3N x K` view is derived, never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationBasis {
    blocks: Vec<Matrix3xX<f64>>,
    components: usize,
}

impl DeformationBasis {
    pub fn new(blocks: Vec<Matrix3xX<f64>>) -> Result<Self, DeformError> {
        let components = blocks.first().map_or(0, |b| b.ncols());
        if blocks.iter().any(|b| b.ncols() != components) {
            return Err(DeformError::DimensionMismatch(
                "basis blocks disagree on the number of components",
            ));
        }
        Ok(Self { blocks, components })
    }

    /// All-zero basis with `K` components over `n` vertices.
    pub fn zeros(n: usize, k: usize) -> Self {
        Self {
            blocks: (0..n).map(|_| Matrix3xX::zeros(k)).collect(),
            components: k,
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.blocks.len()
    }

    /// Number of basis components `K`.
    pub fn components(&self) -> usize {
        self.components
    }

    pub fn block(&self, i: usize) -> &Matrix3xX<f64> {
        &self.blocks[i]
    }

    pub fn blocks(&self) -> &[Matrix3xX<f64>] {
        &self.blocks
    }

    /// Per-vertex offsets of a single component, i.e. `B e_k`. Feeding
    /// `T + B e_k` to `arap_energy` reproduces the per-component regularizer.
    pub fn component_offsets(&self, k: usize) -> Vec<Vector3<f64>> {
        self.blocks.iter().map(|b| b.column(k).into()).collect()
    }
}

/// Deformed vertices `V_i = T_i + B_i c`.
pub fn synthesize(
    template: &[Vector3<f64>],
    basis: &DeformationBasis,
    coefficients: &DVector<f64>,
) -> Result<Vec<Vector3<f64>>, DeformError> {
    if basis.vertex_count() != template.len() {
        return Err(DeformError::DimensionMismatch(
            "basis vertex count differs from template",
        ));
    }
    if coefficients.len() != basis.components() {
        return Err(DeformError::DimensionMismatch(
            "coefficient length differs from basis components",
        ));
    }
    Ok(template
        .iter()
        .zip(basis.blocks())
        .map(|(t, b)| t + b * coefficients)
        .collect())
}

/// Rotation minimizing `sum_m w_m |target_m - R source_m|^2` over SO(3)
/// (weighted Kabsch): SVD of the weighted covariance with the determinant
/// corrected to +1.
pub fn best_fit_rotation(
    edges_source: &[Vector3<f64>],
    edges_target: &[Vector3<f64>],
    weights: &[f64],
) -> Result<Matrix3<f64>, DeformError> {
    if edges_source.len() != edges_target.len() || edges_source.len() != weights.len() {
        return Err(DeformError::DimensionMismatch(
            "edge lists and weights must have equal length",
        ));
    }
    if edges_source.is_empty() {
        return Err(DeformError::DimensionMismatch("no edges"));
    }
    let mut cov = Matrix3::zeros();
    for ((s, t), &w) in edges_source.iter().zip(edges_target).zip(weights) {
        cov += (t * s.transpose()) * w;
    }
    polar_rotation(&cov)
}

/// Rotation factor of a 3x3 matrix via SVD with reflection fix. Rank-deficient
/// but nonzero inputs still yield a valid rotation (the SVD completes the
/// null directions orthogonally); an all-zero matrix is an error.
fn polar_rotation(cov: &Matrix3<f64>) -> Result<Matrix3<f64>, DeformError> {
    let norm = cov.norm();
    if !(norm.is_finite() && norm > 1e-300) {
        return Err(DeformError::DegenerateCovariance);
    }
    let svd = cov.svd(true, true);
    let u = svd.u.ok_or(DeformError::DegenerateCovariance)?;
    let v_t = svd.v_t.ok_or(DeformError::DegenerateCovariance)?;
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        // Flip the weakest singular direction.
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    Ok(r)
}

/// Which residual norm the ARAP energy sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ArapVariant {
    /// Unsquared per-edge residual norm.
    #[default]
    Unsquared,
    /// Classic squared-residual energy, for comparison.
    Squared,
}

/// As-rigid-as-possible energy of a deformed shape against the template:
///
/// `(1/N) sum_i sum_{j in N(i)} w_ij |(V_i - V_j) - R_i (T_i - T_j)|`
///
/// with `R_i` the per-vertex best-fit rotation of the weighted edge fan
/// (SVD, determinant corrected to +1). The default sums the unsquared
/// residual norm; `ArapVariant::Squared` squares it.
pub fn arap_energy(mesh: &TemplateMesh, deformed: &[Vector3<f64>], variant: ArapVariant) -> f64 {
    assert_eq!(
        mesh.vertex_count(),
        deformed.len(),
        "deformed vertex count differs from template"
    );
    let template = mesh.vertices();
    let n = mesh.vertex_count();
    let mut total = 0.0;
    let mut src = Vec::new();
    let mut tgt = Vec::new();
    for i in 0..n {
        let (ns, ws) = mesh.neighbors(i);
        src.clear();
        tgt.clear();
        for &j in ns {
            src.push(template[i] - template[j]);
            tgt.push(deformed[i] - deformed[j]);
        }
        // Identity fan short-circuit keeps the undeformed energy exactly
        // zero; a vertex whose edge fan collapsed contributes with R_i = I.
        let rot = if src == tgt {
            Matrix3::identity()
        } else {
            best_fit_rotation(&src, &tgt, ws).unwrap_or_else(|_| Matrix3::identity())
        };
        for (k, &w) in ws.iter().enumerate() {
            let residual = (tgt[k] - rot * src[k]).norm();
            total += w
                * match variant {
                    ArapVariant::Unsquared => residual,
                    ArapVariant::Squared => residual * residual,
                };
        }
    }
    total / n as f64
}

/// Mean squared per-vertex deformation offset `sum_i |B_i c|^2 / N`.
pub fn l2_deformation_penalty(basis: &DeformationBasis, coefficients: &DVector<f64>) -> f64 {
    if basis.vertex_count() == 0 {
        return 0.0;
    }
    let sum: f64 = basis
        .blocks()
        .iter()
        .map(|b| (b * coefficients).norm_squared())
        .sum();
    sum / basis.vertex_count() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::exp_map;
    use crate::mesh::primitives;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_basis(rng: &mut ChaCha8Rng, n: usize, k: usize) -> DeformationBasis {
        let blocks = (0..n)
            .map(|_| Matrix3xX::from_fn(k, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        DeformationBasis::new(blocks).unwrap()
    }

    fn random_vec3(rng: &mut ChaCha8Rng, radius: f64) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-radius..radius),
            rng.random_range(-radius..radius),
            rng.random_range(-radius..radius),
        )
    }

    #[test]
    fn synthesize_zero_coefficients_returns_template() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let template: Vec<Vector3<f64>> = (0..10).map(|_| random_vec3(&mut rng, 1.0)).collect();
        let basis = random_basis(&mut rng, 10, 4);
        let v = synthesize(&template, &basis, &DVector::zeros(4)).unwrap();
        assert_eq!(v, template);
    }

    #[test]
    fn synthesize_uniform_offset() {
        let template = vec![Vector3::zeros(); 6];
        let blocks = (0..6)
            .map(|_| Matrix3xX::from_columns(&[Vector3::z()]))
            .collect();
        let basis = DeformationBasis::new(blocks).unwrap();
        let v = synthesize(&template, &basis, &DVector::from_element(1, 2.0)).unwrap();
        for p in v {
            assert_eq!(p, Vector3::new(0.0, 0.0, 2.0));
        }
    }

    #[test]
    fn synthesize_matches_flat_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 15;
        let k = 5;
        let template: Vec<Vector3<f64>> = (0..n).map(|_| random_vec3(&mut rng, 1.0)).collect();
        let basis = random_basis(&mut rng, n, k);
        let c = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
        // Dense 3N x K multiply as the oracle.
        let mut flat = DMatrix::zeros(3 * n, k);
        for i in 0..n {
            for row in 0..3 {
                for col in 0..k {
                    flat[(3 * i + row, col)] = basis.block(i)[(row, col)];
                }
            }
        }
        let offsets = &flat * &c;
        let v = synthesize(&template, &basis, &c).unwrap();
        for i in 0..n {
            let expected = template[i] + Vector3::new(offsets[3 * i], offsets[3 * i + 1], offsets[3 * i + 2]);
            assert_relative_eq!(v[i], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn synthesize_rejects_mismatched_dimensions() {
        let template = vec![Vector3::zeros(); 3];
        let basis = DeformationBasis::zeros(4, 2);
        assert!(synthesize(&template, &basis, &DVector::zeros(2)).is_err());
        let basis = DeformationBasis::zeros(3, 2);
        assert!(synthesize(&template, &basis, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn best_fit_rotation_identity_on_equal_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let edges: Vec<Vector3<f64>> = (0..5).map(|_| random_vec3(&mut rng, 1.0)).collect();
        let r = best_fit_rotation(&edges, &edges, &[1.0; 5]).unwrap();
        assert_relative_eq!(r, Matrix3::identity(), epsilon = 1e-10);
    }

    #[test]
    fn best_fit_rotation_recovers_exact_alignment() {
        let rot = exp_map(&Vector3::new(0.0, 0.0, 0.4));
        let src = vec![
            Vector3::new(1.0, 0.2, -0.3),
            Vector3::new(-0.5, 1.0, 0.8),
            Vector3::new(0.3, -0.7, 1.0),
        ];
        let tgt: Vec<Vector3<f64>> = src.iter().map(|e| rot * e).collect();
        let est = best_fit_rotation(&src, &tgt, &[1.0; 3]).unwrap();
        assert!((est - rot).norm() < 1e-8);
    }

    #[test]
    fn best_fit_rotation_beats_random_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src: Vec<Vector3<f64>> = (0..6).map(|_| random_vec3(&mut rng, 1.0)).collect();
        let tgt: Vec<Vector3<f64>> = src
            .iter()
            .map(|e| exp_map(&Vector3::new(0.3, -0.2, 0.5)) * e + random_vec3(&mut rng, 0.05))
            .collect();
        let w = vec![1.0; 6];
        let objective = |r: &Matrix3<f64>| -> f64 {
            src.iter()
                .zip(&tgt)
                .zip(&w)
                .map(|((s, t), &wi)| wi * (t - r * s).norm_squared())
                .sum()
        };
        let best = objective(&best_fit_rotation(&src, &tgt, &w).unwrap());
        for _ in 0..1000 {
            let random = exp_map(&random_vec3(&mut rng, core::f64::consts::PI));
            assert!(best <= objective(&random) + 1e-12);
        }
    }

    #[test]
    fn best_fit_rotation_has_positive_determinant_under_reflection() {
        // Target edges are a mirror image; the unconstrained polar factor
        // would be a reflection.
        let src = vec![
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
        ];
        let tgt: Vec<Vector3<f64>> = src.iter().map(|e| Vector3::new(e.x, e.y, -e.z)).collect();
        let r = best_fit_rotation(&src, &tgt, &[1.0; 3]).unwrap();
        assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn best_fit_rotation_handles_parallel_edges() {
        let src = vec![Vector3::x(), Vector3::x() * 2.0];
        let tgt = vec![Vector3::y(), Vector3::y() * 2.0];
        let r = best_fit_rotation(&src, &tgt, &[1.0; 2]).unwrap();
        assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-10);
        assert!((r * Vector3::x() - Vector3::y()).norm() < 1e-10);
    }

    #[test]
    fn best_fit_rotation_rejects_zero_covariance() {
        let src = vec![Vector3::zeros()];
        let tgt = vec![Vector3::zeros()];
        assert_eq!(
            best_fit_rotation(&src, &tgt, &[1.0]),
            Err(DeformError::DegenerateCovariance)
        );
    }

    #[test]
    fn arap_zero_for_identity() {
        let mesh = primitives::icosphere(1);
        let e = arap_energy(&mesh, mesh.vertices(), ArapVariant::Unsquared);
        assert_eq!(e, 0.0);
    }

    #[test]
    fn arap_zero_under_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for mesh in [primitives::tetrahedron(), primitives::icosphere(1), primitives::grid(5, 4)] {
            for _ in 0..100 {
                let rot = exp_map(&random_vec3(&mut rng, core::f64::consts::PI));
                let t = random_vec3(&mut rng, 2.0);
                let moved: Vec<Vector3<f64>> = mesh.vertices().iter().map(|v| rot * v + t).collect();
                let e = arap_energy(&mesh, &moved, ArapVariant::Unsquared);
                assert!(e.abs() < 1e-9, "rigid ARAP energy {e}");
            }
        }
    }

    #[test]
    fn arap_invariant_to_global_rotation_of_the_deformed_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mesh = primitives::icosphere(1);
        let deformed: Vec<Vector3<f64>> = mesh
            .vertices()
            .iter()
            .map(|v| v + random_vec3(&mut rng, 0.1))
            .collect();
        let base = arap_energy(&mesh, &deformed, ArapVariant::Unsquared);
        for _ in 0..20 {
            let q = exp_map(&random_vec3(&mut rng, core::f64::consts::PI));
            let rotated: Vec<Vector3<f64>> = deformed.iter().map(|v| q * v).collect();
            let e = arap_energy(&mesh, &rotated, ArapVariant::Unsquared);
            assert!((e - base).abs() < 1e-8, "{e} vs {base}");
        }
    }

    #[test]
    fn arap_uniform_scale_matches_closed_form() {
        // Single triangle scaled by 2: by symmetry the optimal R_i is the
        // identity, so each edge residual is its own length and the energy is
        // (1/N) sum_i sum_j w_ij |T_i - T_j|.
        let vertices = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.5, 3.0_f64.sqrt() / 2.0, 0.0),
        ];
        let mesh = TemplateMesh::new(vertices, vec![[0, 1, 2]]).unwrap();
        let doubled: Vec<Vector3<f64>> = mesh.vertices().iter().map(|v| v * 2.0).collect();
        let energy = arap_energy(&mesh, &doubled, ArapVariant::Unsquared);
        let mut expected = 0.0;
        for i in 0..3 {
            let (ns, ws) = mesh.neighbors(i);
            for (&j, &w) in ns.iter().zip(ws) {
                expected += w * (mesh.vertices()[i] - mesh.vertices()[j]).norm();
            }
        }
        expected /= 3.0;
        assert_relative_eq!(energy, expected, epsilon = 1e-10);
    }

    #[test]
    fn l2_penalty_examples() {
        let basis = DeformationBasis::zeros(5, 3);
        assert_eq!(l2_deformation_penalty(&basis, &DVector::zeros(3)), 0.0);

        let blocks = (0..5)
            .map(|_| Matrix3xX::from_columns(&[Vector3::z()]))
            .collect();
        let basis = DeformationBasis::new(blocks).unwrap();
        let c = DVector::from_element(1, 2.0);
        assert_relative_eq!(l2_deformation_penalty(&basis, &c), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn l2_penalty_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 12;
        let k = 4;
        let basis = random_basis(&mut rng, n, k);
        let c = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
        let mut oracle = 0.0;
        for i in 0..n {
            let mut offset = Vector3::<f64>::zeros();
            for col in 0..k {
                for row in 0..3 {
                    offset[row] += basis.block(i)[(row, col)] * c[col];
                }
            }
            oracle += offset.norm_squared();
        }
        oracle /= n as f64;
        assert_relative_eq!(l2_deformation_penalty(&basis, &c), oracle, epsilon = 1e-12);
    }

    #[test]
    fn synthesize_is_linear_in_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 9;
        let k = 3;
        let template: Vec<Vector3<f64>> = (0..n).map(|_| random_vec3(&mut rng, 1.0)).collect();
        let basis = random_basis(&mut rng, n, k);
        let c1 = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
        let c2 = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
        let (a, b) = (0.7, -1.3);
        let combo = synthesize(&template, &basis, &(&c1 * a + &c2 * b)).unwrap();
        let v1 = synthesize(&template, &basis, &c1).unwrap();
        let v2 = synthesize(&template, &basis, &c2).unwrap();
        for i in 0..n {
            let lhs = combo[i] - template[i];
            let rhs = (v1[i] - template[i]) * a + (v2[i] - template[i]) * b;
            assert_relative_eq!(lhs, rhs, epsilon = 1e-12);
        }
    }
}
