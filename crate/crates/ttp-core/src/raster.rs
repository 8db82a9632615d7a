//! Minimal z-buffer triangle rasterizer for ground-truth visibility and
//! silhouette metrics. Not differentiable and not anti-aliased.
//!
//! Depth convention: depths are camera-frame z values after rotation and
//! smaller z is closer (the camera sits at z = -inf). All modules follow
//! this convention.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use crate::float::FloatExt;
use crate::geometry::WeakPerspectiveCamera;
use nalgebra::{Matrix3, Vector2, Vector3};

/// Binary occupancy mask of a rendered silhouette, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SilhouetteMask {
    pub width: usize,
    pub height: usize,
    bits: Vec<bool>,
}

impl SilhouetteMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    /// Number of set pixels.
    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        self.bits.iter().copied()
    }

    /// Nearest-neighbor upsampling by an integer factor.
    pub fn upsample(&self, factor: usize) -> SilhouetteMask {
        let mut out = SilhouetteMask::new(self.width * factor, self.height * factor);
        for y in 0..out.height {
            for x in 0..out.width {
                out.set(x, y, self.get(x / factor, y / factor));
            }
        }
        out
    }
}

/// Square image-space window mapped onto the pixel grid.
///
/// Pixel centers sit at integer pixel coordinates; the window spans
/// `center +- half_extent` in image units across `resolution` pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterWindow {
    pub center: Vector2<f64>,
    pub half_extent: f64,
}

impl RasterWindow {
    pub fn new(center: Vector2<f64>, half_extent: f64) -> Self {
        assert!(half_extent > 0.0);
        Self {
            center,
            half_extent,
        }
    }

    /// Default framing for a camera over a normalized template: centered on
    /// the image translation with half-extent `3 s`, which covers the unit
    /// RMS-radius template with margin for deformation.
    pub fn from_camera(camera: &WeakPerspectiveCamera) -> Self {
        Self::new(camera.translation, 3.0 * camera.scale)
    }

    /// Image coordinates -> fractional pixel coordinates.
    #[inline]
    pub fn to_pixel(&self, p: &Vector2<f64>, resolution: usize) -> Vector2<f64> {
        let res = resolution as f64;
        Vector2::new(
            ((p.x - self.center.x) / (2.0 * self.half_extent) + 0.5) * res - 0.5,
            ((p.y - self.center.y) / (2.0 * self.half_extent) + 0.5) * res - 0.5,
        )
    }

    /// Pixels per image unit at the given resolution.
    #[inline]
    pub fn pixels_per_unit(&self, resolution: usize) -> f64 {
        resolution as f64 / (2.0 * self.half_extent)
    }
}

struct ZBuffer {
    resolution: usize,
    depth: Vec<f64>,
    mask: SilhouetteMask,
}

impl ZBuffer {
    /// Occlusion reference depth at fractional pixel coordinates: the
    /// farthest covered sample in the 3x3 pixel neighborhood of the
    /// position, or infinity when none is covered. A vertex counts as
    /// occluded only if everything within a pixel of its projection lies in
    /// front of it; comparing against a single sample misjudges vertices
    /// wherever the surface depth changes steeply within one pixel
    /// (silhouette rims, edge-on triangles).
    fn sample_depth(&self, x: f64, y: f64) -> f64 {
        let res = self.resolution as isize;
        let xc = (x + 0.5).floor() as isize;
        let yc = (y + 0.5).floor() as isize;
        let mut farthest = f64::NEG_INFINITY;
        for ys in (yc - 3).max(0)..=(yc + 3).min(res - 1) {
            for xs in (xc - 3).max(0)..=(xc + 3).min(res - 1) {
                let z = self.depth[(ys * res + xs) as usize];
                if z.is_finite() && z > farthest {
                    farthest = z;
                }
            }
        }
        if farthest == f64::NEG_INFINITY {
            f64::INFINITY
        } else {
            farthest
        }
    }
}

/// Rasterize every projected triangle into a z-buffered mask.
///
/// Coverage uses a pixel-center barycentric inside test with the top-left
/// fill rule breaking on-edge ties, so shared edges are filled exactly once.
fn rasterize(
    vertices: &[Vector3<f64>],
    faces: &[[usize; 3]],
    camera: &WeakPerspectiveCamera,
    rotation: &Matrix3<f64>,
    window: &RasterWindow,
    resolution: usize,
) -> ZBuffer {
    assert!(resolution >= 8, "resolution must be at least 8x8");
    let proj = camera.projection(rotation);
    let pixels: Vec<Vector2<f64>> = vertices
        .iter()
        .map(|v| window.to_pixel(&(proj * v + camera.translation), resolution))
        .collect();
    let depths: Vec<f64> = vertices.iter().map(|v| (rotation * v).z).collect();

    let mut zb = ZBuffer {
        resolution,
        depth: vec![f64::INFINITY; resolution * resolution],
        mask: SilhouetteMask::new(resolution, resolution),
    };
    for f in faces {
        let (a, mut b, mut c) = (f[0], f[1], f[2]);
        let area2 = cross2(&(pixels[b] - pixels[a]), &(pixels[c] - pixels[a]));
        if area2 == 0.0 {
            continue;
        }
        if area2 < 0.0 {
            core::mem::swap(&mut b, &mut c);
        }
        fill_triangle(
            &mut zb,
            [pixels[a], pixels[b], pixels[c]],
            [depths[a], depths[b], depths[c]],
        );
    }
    zb
}

#[inline]
fn cross2(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Accept an on-edge pixel only for top and left edges. With positive-inside
/// edge functions in y-down pixel space: left edges run upward (d.y < 0) and
/// top edges are horizontal with d.x > 0.
#[inline]
fn edge_accepts_ties(d: &Vector2<f64>) -> bool {
    d.y < 0.0 || (d.y == 0.0 && d.x > 0.0)
}

fn fill_triangle(zb: &mut ZBuffer, p: [Vector2<f64>; 3], z: [f64; 3]) {
    let res = zb.resolution as f64;
    let min_x = p[0].x.min(p[1].x).min(p[2].x).max(0.0);
    let max_x = p[0].x.max(p[1].x).max(p[2].x).min(res - 1.0);
    let min_y = p[0].y.min(p[1].y).min(p[2].y).max(0.0);
    let max_y = p[0].y.max(p[1].y).max(p[2].y).min(res - 1.0);
    if min_x > max_x || min_y > max_y {
        return;
    }
    let (x0, x1) = (min_x.ceil() as usize, max_x.floor() as usize);
    let (y0, y1) = (min_y.ceil() as usize, max_y.floor() as usize);
    let area2 = cross2(&(p[1] - p[0]), &(p[2] - p[0]));
    // Edge k runs from vertex k to vertex k+1; its weight is the barycentric
    // coordinate of the opposite vertex k+2.
    let d = [p[1] - p[0], p[2] - p[1], p[0] - p[2]];
    let ties = [
        edge_accepts_ties(&d[0]),
        edge_accepts_ties(&d[1]),
        edge_accepts_ties(&d[2]),
    ];
    for py in y0..=y1 {
        for px in x0..=x1 {
            let q = Vector2::new(px as f64, py as f64);
            let w = [
                cross2(&d[0], &(q - p[0])),
                cross2(&d[1], &(q - p[1])),
                cross2(&d[2], &(q - p[2])),
            ];
            let inside = (0..3).all(|k| w[k] > 0.0 || (w[k] == 0.0 && ties[k]));
            if !inside {
                continue;
            }
            let depth = (w[0] * z[2] + w[1] * z[0] + w[2] * z[1]) / area2;
            zb.mask.set(px, py, true);
            let cell = &mut zb.depth[py * zb.resolution + px];
            if depth < *cell {
                *cell = depth;
            }
        }
    }
}

/// Silhouette of the posed mesh: a pixel is set iff some projected triangle
/// covers its center.
pub fn rasterize_silhouette(
    vertices: &[Vector3<f64>],
    faces: &[[usize; 3]],
    camera: &WeakPerspectiveCamera,
    rotation: &Matrix3<f64>,
    window: &RasterWindow,
    resolution: usize,
) -> SilhouetteMask {
    rasterize(vertices, faces, camera, rotation, window, resolution).mask
}

/// Binary ground-truth visibility from the z-buffer.
///
/// Vertex `i` is visible iff its camera-frame depth is within
/// `1e-3 * bounding-box diagonal` of the z-buffer sampled at its projected
/// position (bilinear over the covered neighboring pixels; a comparison
/// against a single pixel center misjudges vertices wherever the surface
/// depth changes steeply within one pixel, i.e. near the silhouette rim).
/// Vertices projecting outside the frame are marked 0.
pub fn render_visibility(
    vertices: &[Vector3<f64>],
    faces: &[[usize; 3]],
    camera: &WeakPerspectiveCamera,
    rotation: &Matrix3<f64>,
    window: &RasterWindow,
    resolution: usize,
) -> Vec<f64> {
    let zb = rasterize(vertices, faces, camera, rotation, window, resolution);
    let rotated: Vec<Vector3<f64>> = vertices.iter().map(|v| rotation * v).collect();
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for v in &rotated {
        lo = lo.inf(v);
        hi = hi.sup(v);
    }
    let eps_z = 1e-3 * (hi - lo).norm();
    let proj = camera.projection(rotation);
    vertices
        .iter()
        .zip(&rotated)
        .map(|(v, rv)| {
            let px = window.to_pixel(&(proj * v + camera.translation), resolution);
            if px.x < -0.5
                || px.y < -0.5
                || px.x >= resolution as f64 - 0.5
                || px.y >= resolution as f64 - 0.5
            {
                return 0.0;
            }
            if rv.z <= zb.sample_depth(px.x, px.y) + eps_z {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}
