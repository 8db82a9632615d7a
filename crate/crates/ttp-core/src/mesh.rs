//! Template mesh: vertices, triangles, per-vertex neighborhoods and cotangent
//! edge weights, normalized to zero centroid and unit per-coordinate RMS
//! radius so the camera scale rule is well defined.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use crate::float::FloatExt;
use nalgebra::Vector3;

/// Topology errors raised while building a mesh.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MeshError {
    #[error("mesh has no vertices or no faces")]
    Empty,
    #[error("face {face} references vertex {index}, but the mesh has {vertex_count} vertices")]
    FaceIndexOutOfRange {
        face: usize,
        index: usize,
        vertex_count: usize,
    },
    #[error("face {face} repeats a vertex index")]
    DegenerateFace { face: usize },
    #[error("edge ({i}, {j}) appears in more than two faces")]
    NonManifoldEdge { i: usize, j: usize },
}

/// Construction options.
#[derive(Debug, Clone, Copy)]
pub struct MeshOptions {
    /// Clamp negative cotangent weights (obtuse triangles) to zero. The
    /// ARAP energy is better conditioned with nonnegative weights.
    pub clamp_cotangent: bool,
}

impl Default for MeshOptions {
    fn default() -> Self {
        Self {
            clamp_cotangent: true,
        }
    }
}

/// An immutable triangle mesh with precomputed adjacency and cotangent
/// weights. Vertices are normalized at construction.
#[derive(Debug, Clone)]
pub struct TemplateMesh {
    vertices: Vec<Vector3<f64>>,
    faces: Vec<[usize; 3]>,
    neighbors: Vec<Vec<usize>>,
    neighbor_weights: Vec<Vec<f64>>,
}

impl TemplateMesh {
    pub fn new(vertices: Vec<Vector3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        Self::with_options(vertices, faces, MeshOptions::default())
    }

    pub fn with_options(
        mut vertices: Vec<Vector3<f64>>,
        faces: Vec<[usize; 3]>,
        options: MeshOptions,
    ) -> Result<Self, MeshError> {
        if vertices.is_empty() || faces.is_empty() {
            return Err(MeshError::Empty);
        }
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                if v >= vertices.len() {
                    return Err(MeshError::FaceIndexOutOfRange {
                        face: fi,
                        index: v,
                        vertex_count: vertices.len(),
                    });
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(MeshError::DegenerateFace { face: fi });
            }
        }
        normalize_vertices(&mut vertices);
        let weights = cotangent_weights(&vertices, &faces, options)?;
        let mut neighbors = vec![Vec::new(); vertices.len()];
        let mut neighbor_weights = vec![Vec::new(); vertices.len()];
        // BTreeMap iteration is sorted, so neighbor lists come out sorted.
        for (&(i, j), &w) in &weights {
            neighbors[i].push(j);
            neighbor_weights[i].push(w);
            neighbors[j].push(i);
            neighbor_weights[j].push(w);
        }
        Ok(Self {
            vertices,
            faces,
            neighbors,
            neighbor_weights,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    /// Sorted neighbor indices of vertex `i` with the matching edge weights.
    pub fn neighbors(&self, i: usize) -> (&[usize], &[f64]) {
        (&self.neighbors[i], &self.neighbor_weights[i])
    }

    /// Every undirected edge `(i, j)` with `i < j` and its cotangent weight.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.neighbors.iter().enumerate().flat_map(move |(i, ns)| {
            ns.iter()
                .zip(&self.neighbor_weights[i])
                .filter(move |(&j, _)| i < j)
                .map(move |(&j, &w)| (i, j, w))
        })
    }
}

/// Translate the centroid to the origin and scale the per-coordinate RMS
/// radius `sqrt(sum |v|^2 / 3N)` to one. A second application detects the
/// already-normalized state and leaves the vertices bit-for-bit unchanged.
pub fn normalize_vertices(vertices: &mut [Vector3<f64>]) {
    let n = vertices.len() as f64;
    let centroid: Vector3<f64> = vertices.iter().sum::<Vector3<f64>>() / n;
    let rms = (vertices
        .iter()
        .map(|v| (v - centroid).norm_squared())
        .sum::<f64>()
        / (3.0 * n))
        .sqrt();
    if centroid.norm() <= 1e-13 * rms.max(1e-300) && (rms - 1.0).abs() <= 1e-13 {
        return;
    }
    for v in vertices.iter_mut() {
        *v = (*v - centroid) / rms;
    }
}

/// Cotangent edge weights `w_ij = 1/2 * sum over faces containing (i,j) of
/// cot(opposite angle)`, optionally clamped below at zero.
///
/// Fails if an edge is shared by more than two faces.
pub fn cotangent_weights(
    vertices: &[Vector3<f64>],
    faces: &[[usize; 3]],
    options: MeshOptions,
) -> Result<BTreeMap<(usize, usize), f64>, MeshError> {
    let mut weights: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut counts: BTreeMap<(usize, usize), u8> = BTreeMap::new();
    for f in faces {
        for corner in 0..3 {
            let opposite = f[corner];
            let i = f[(corner + 1) % 3];
            let j = f[(corner + 2) % 3];
            let e1 = vertices[i] - vertices[opposite];
            let e2 = vertices[j] - vertices[opposite];
            // cot = cos/sin = (e1 . e2) / |e1 x e2|
            let cross = e1.cross(&e2).norm();
            let cot = if cross > 0.0 { e1.dot(&e2) / cross } else { 0.0 };
            let key = (i.min(j), i.max(j));
            *weights.entry(key).or_insert(0.0) += 0.5 * cot;
            let c = counts.entry(key).or_insert(0);
            *c += 1;
            if *c > 2 {
                return Err(MeshError::NonManifoldEdge { i: key.0, j: key.1 });
            }
        }
    }
    if options.clamp_cotangent {
        for w in weights.values_mut() {
            *w = w.max(0.0);
        }
    }
    Ok(weights)
}

/// Built-in test meshes. All are returned already normalized.
pub mod primitives {
    use super::*;

    /// Regular tetrahedron, outward-wound faces.
    pub fn tetrahedron() -> TemplateMesh {
        let vertices = vec![
            Vector3::new(1.0, 1.0, 1.0),
            Vector3::new(1.0, -1.0, -1.0),
            Vector3::new(-1.0, 1.0, -1.0),
            Vector3::new(-1.0, -1.0, 1.0),
        ];
        let faces = vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]];
        TemplateMesh::new(vertices, faces).expect("tetrahedron is valid")
    }

    /// Icosahedron subdivided `subdivisions` times with vertices projected to
    /// the unit sphere. Vertex counts: 12, 42, 162, 642, ...
    pub fn icosphere(subdivisions: usize) -> TemplateMesh {
        let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
        let mut vertices: Vec<Vector3<f64>> = vec![
            Vector3::new(-1.0, phi, 0.0),
            Vector3::new(1.0, phi, 0.0),
            Vector3::new(-1.0, -phi, 0.0),
            Vector3::new(1.0, -phi, 0.0),
            Vector3::new(0.0, -1.0, phi),
            Vector3::new(0.0, 1.0, phi),
            Vector3::new(0.0, -1.0, -phi),
            Vector3::new(0.0, 1.0, -phi),
            Vector3::new(phi, 0.0, -1.0),
            Vector3::new(phi, 0.0, 1.0),
            Vector3::new(-phi, 0.0, -1.0),
            Vector3::new(-phi, 0.0, 1.0),
        ]
        .into_iter()
        .map(|v| v.normalize())
        .collect();
        let mut faces: Vec<[usize; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut midpoints: BTreeMap<(usize, usize), usize> = BTreeMap::new();
            let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<Vector3<f64>>| -> usize {
                let key = (a.min(b), a.max(b));
                *midpoints.entry(key).or_insert_with(|| {
                    let m = ((vertices[a] + vertices[b]) / 2.0).normalize();
                    vertices.push(m);
                    vertices.len() - 1
                })
            };
            let mut next = Vec::with_capacity(faces.len() * 4);
            for [a, b, c] in faces {
                let ab = midpoint(a, b, &mut vertices);
                let bc = midpoint(b, c, &mut vertices);
                let ca = midpoint(c, a, &mut vertices);
                next.push([a, ab, ca]);
                next.push([b, bc, ab]);
                next.push([c, ca, bc]);
                next.push([ab, bc, ca]);
            }
            faces = next;
        }
        TemplateMesh::new(vertices, faces).expect("icosphere is valid")
    }

    /// Planar grid of `w x h` vertices in the xy-plane, triangulated with
    /// +z-facing winding.
    pub fn grid(w: usize, h: usize) -> TemplateMesh {
        assert!(w >= 2 && h >= 2, "grid needs at least 2x2 vertices");
        let mut vertices = Vec::with_capacity(w * h);
        for row in 0..h {
            for col in 0..w {
                vertices.push(Vector3::new(col as f64, row as f64, 0.0));
            }
        }
        let mut faces = Vec::with_capacity(2 * (w - 1) * (h - 1));
        for row in 0..h - 1 {
            for col in 0..w - 1 {
                let a = row * w + col;
                let b = a + 1;
                let c = a + w;
                let d = c + 1;
                faces.push([a, b, d]);
                faces.push([a, d, c]);
            }
        }
        TemplateMesh::new(vertices, faces).expect("grid is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn tetrahedron_adjacency() {
        let mesh = primitives::tetrahedron();
        assert_eq!(mesh.vertex_count(), 4);
        assert_eq!(mesh.face_count(), 4);
        for i in 0..4 {
            let (ns, ws) = mesh.neighbors(i);
            assert_eq!(ns.len(), 3);
            assert_eq!(ws.len(), 3);
            assert!(ns.windows(2).all(|w| w[0] < w[1]), "neighbors sorted");
        }
    }

    #[test]
    fn neighborhoods_are_symmetric() {
        let mesh = primitives::icosphere(1);
        for i in 0..mesh.vertex_count() {
            for &j in mesh.neighbors(i).0 {
                assert!(mesh.neighbors(j).0.contains(&i));
            }
        }
    }

    #[test]
    fn normalization_invariants() {
        let mesh = primitives::icosphere(2);
        let n = mesh.vertex_count() as f64;
        let centroid: Vector3<f64> = mesh.vertices().iter().sum::<Vector3<f64>>() / n;
        assert!(centroid.norm() < 1e-10);
        let rms = (mesh.vertices().iter().map(|v| v.norm_squared()).sum::<f64>() / (3.0 * n)).sqrt();
        assert!((rms - 1.0).abs() < 1e-10);
    }

    #[test]
    fn normalization_is_idempotent_bit_for_bit() {
        let mesh = primitives::grid(5, 4);
        let mut once = mesh.vertices().to_vec();
        normalize_vertices(&mut once);
        let mut twice = once.clone();
        normalize_vertices(&mut twice);
        for (a, b) in once.iter().zip(&twice) {
            for k in 0..3 {
                assert_eq!(a[k].to_bits(), b[k].to_bits());
            }
        }
    }

    #[test]
    fn degenerate_face_is_rejected() {
        let vertices = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ];
        let err = TemplateMesh::new(vertices, vec![[0, 0, 1]]).unwrap_err();
        assert_eq!(err, MeshError::DegenerateFace { face: 0 });
    }

    #[test]
    fn out_of_range_index_is_rejected() {
        let vertices = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ];
        let err = TemplateMesh::new(vertices, vec![[0, 1, 3]]).unwrap_err();
        assert!(matches!(err, MeshError::FaceIndexOutOfRange { index: 3, .. }));
    }

    #[test]
    fn over_shared_edge_is_rejected() {
        let vertices = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(1.0, 1.0, 1.0),
        ];
        let faces = vec![[0, 1, 2], [0, 1, 3], [0, 1, 4]];
        let err = TemplateMesh::new(vertices, faces).unwrap_err();
        assert_eq!(err, MeshError::NonManifoldEdge { i: 0, j: 1 });
    }

    #[test]
    fn right_isoceles_weight_opposite_right_angle_is_zero() {
        // Right angle at vertex 0; the edge (1,2) sits opposite it.
        let vertices = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ];
        let w = cotangent_weights(&vertices, &[[0, 1, 2]], MeshOptions::default()).unwrap();
        assert_relative_eq!(w[&(1, 2)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(w[&(0, 1)], 0.5, epsilon = 1e-12);
        assert_relative_eq!(w[&(0, 2)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn equilateral_weight_is_half_cot_sixty() {
        let vertices = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.5, 3.0_f64.sqrt() / 2.0, 0.0),
        ];
        let w = cotangent_weights(&vertices, &[[0, 1, 2]], MeshOptions::default()).unwrap();
        let expected = 0.5 / 3.0_f64.sqrt();
        for value in w.values() {
            assert_relative_eq!(*value, expected, epsilon = 1e-12);
        }
    }

    /// Direct per-triangle half-cotangent summation, written independently of
    /// `cotangent_weights` (explicit angle computation via acos).
    fn half_cot_oracle(
        vertices: &[Vector3<f64>],
        faces: &[[usize; 3]],
    ) -> BTreeMap<(usize, usize), f64> {
        let mut out = BTreeMap::new();
        for f in faces {
            for corner in 0..3 {
                let o = f[corner];
                let i = f[(corner + 1) % 3];
                let j = f[(corner + 2) % 3];
                let a = (vertices[i] - vertices[o]).normalize();
                let b = (vertices[j] - vertices[o]).normalize();
                let angle = a.dot(&b).clamp(-1.0, 1.0).acos();
                *out.entry((i.min(j), i.max(j))).or_insert(0.0) += 0.5 / angle.tan();
            }
        }
        out
    }

    #[test]
    fn icosahedron_weights_are_equal_and_match_oracle() {
        let mesh = primitives::icosphere(0);
        let edges: Vec<_> = mesh.edges().collect();
        assert_eq!(edges.len(), 30);
        let oracle = half_cot_oracle(mesh.vertices(), mesh.faces());
        let first = edges[0].2;
        for (i, j, w) in edges {
            assert_relative_eq!(w, first, epsilon = 1e-10);
            assert_relative_eq!(w, oracle[&(i, j)], epsilon = 1e-10);
        }
    }

    #[test]
    fn icosphere_counts() {
        assert_eq!(primitives::icosphere(0).vertex_count(), 12);
        assert_eq!(primitives::icosphere(1).vertex_count(), 42);
        assert_eq!(primitives::icosphere(2).vertex_count(), 162);
    }
}
