//! Triangle-mesh handling and DeepSDF-style signed-distance sampling.

mod sdf;
mod shapes;

pub use sdf::{MeshQuery, SdfCloud, SdfSamplingCfg};
pub use shapes::icosphere;

use crate::data::{Container, DataError};
use crate::tensor::Tensor;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("mesh has no vertices")]
    EmptyMesh,
    #[error("mesh has no triangles")]
    NoTriangles,
    #[error("triangle {tri} references vertex {vertex}, mesh has {count}")]
    IndexOutOfRange { tri: usize, vertex: usize, count: usize },
    #[error("surface noise std must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("sdf sampling needs at least 10 points, asked for {0}")]
    TooFewPoints(usize),
    #[error("obj parse error at line {line}: {detail}")]
    ObjParse { line: usize, detail: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{0}")]
    Invalid(String),
}

pub type Vec3 = [f64; 3];

#[inline]
pub(crate) fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub(crate) fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub(crate) fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub(crate) fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

/// Triangle surface mesh. Immutable after load; degenerate (zero-area)
/// triangles are dropped at construction and counted.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub normals: Option<Vec<Vec3>>,
    pub dropped_degenerate: usize,
}

/// Centering + scaling applied by [`Mesh::normalize_to_unit_sphere`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitSphereTransform {
    pub centroid: Vec3,
    pub scale: f64,
}

/// Padding inside the unit sphere so noisy surface samples stay in the box.
pub const UNIT_SPHERE_PAD: f64 = 0.05;

impl UnitSphereTransform {
    pub fn apply(&self, p: Vec3) -> Vec3 {
        scale3(sub3(p, self.centroid), self.scale)
    }

    pub fn invert(&self, p: Vec3) -> Vec3 {
        add3(scale3(p, 1.0 / self.scale), self.centroid)
    }
}

impl Mesh {
    /// Build a mesh, validating indices and dropping degenerate triangles.
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self, GeometryError> {
        if vertices.is_empty() {
            return Err(GeometryError::EmptyMesh);
        }
        let mut kept = Vec::with_capacity(triangles.len());
        let mut dropped = 0usize;
        let diag = {
            let (lo, hi) = bounds(&vertices);
            norm3(sub3(hi, lo)).max(f64::MIN_POSITIVE)
        };
        let area_floor = 1e-14 * diag * diag;
        for (ti, t) in triangles.iter().enumerate() {
            for &v in t {
                if v >= vertices.len() {
                    return Err(GeometryError::IndexOutOfRange {
                        tri: ti,
                        vertex: v,
                        count: vertices.len(),
                    });
                }
            }
            let [a, b, c] = [vertices[t[0]], vertices[t[1]], vertices[t[2]]];
            let area2 = norm3(cross3(sub3(b, a), sub3(c, a)));
            if area2 * 0.5 <= area_floor {
                dropped += 1;
            } else {
                kept.push(*t);
            }
        }
        Ok(Mesh { vertices, triangles: kept, normals: None, dropped_degenerate: dropped })
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn triangle(&self, i: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[i];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn triangle_area(&self, i: usize) -> f64 {
        let [a, b, c] = self.triangle(i);
        0.5 * norm3(cross3(sub3(b, a), sub3(c, a)))
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        bounds(&self.vertices)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounds();
        norm3(sub3(hi, lo))
    }

    /// Center the vertex centroid at the origin and scale so the farthest
    /// vertex sits at radius `1 - UNIT_SPHERE_PAD`.
    pub fn normalize_to_unit_sphere(&self) -> Result<(Mesh, UnitSphereTransform), GeometryError> {
        if self.vertices.is_empty() {
            return Err(GeometryError::EmptyMesh);
        }
        let n = self.vertices.len() as f64;
        let mut centroid = [0.0; 3];
        for v in &self.vertices {
            centroid = add3(centroid, *v);
        }
        centroid = scale3(centroid, 1.0 / n);
        let max_r = self
            .vertices
            .iter()
            .map(|&v| norm3(sub3(v, centroid)))
            .fold(0.0f64, f64::max);
        if max_r == 0.0 {
            return Err(GeometryError::Invalid("all vertices coincide".into()));
        }
        let scale = (1.0 - UNIT_SPHERE_PAD) / max_r;
        let tf = UnitSphereTransform { centroid, scale };
        let mut out = self.clone();
        for v in &mut out.vertices {
            *v = tf.apply(*v);
        }
        // Normals are direction-only; translation and uniform scaling keep them.
        Ok((out, tf))
    }

    /// Area-weighted average of incident face normals, normalized.
    /// Returns the normals and the indices of isolated vertices (zero normal).
    pub fn vertex_normals(&self) -> Result<(Vec<Vec3>, Vec<usize>), GeometryError> {
        if self.triangles.is_empty() {
            return Err(GeometryError::NoTriangles);
        }
        let mut acc = vec![[0.0; 3]; self.vertices.len()];
        for t in &self.triangles {
            let [a, b, c] = [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]];
            // Cross product length is twice the area; using it unnormalized
            // gives the area weighting directly.
            let fnormal = cross3(sub3(b, a), sub3(c, a));
            for &v in t {
                acc[v] = add3(acc[v], fnormal);
            }
        }
        let mut isolated = Vec::new();
        for (i, n) in acc.iter_mut().enumerate() {
            let len = norm3(*n);
            if len < 1e-300 {
                *n = [0.0; 3];
                isolated.push(i);
            } else {
                *n = scale3(*n, 1.0 / len);
            }
        }
        Ok((acc, isolated))
    }

    /// Attach precomputed per-vertex normals.
    pub fn with_computed_normals(mut self) -> Result<Self, GeometryError> {
        let (normals, _) = self.vertex_normals()?;
        self.normals = Some(normals);
        Ok(self)
    }

    // ── persistence ─────────────────────────────────────────────────

    pub fn to_container(&self) -> Result<Container, GeometryError> {
        let mut c = Container::new();
        let flat: Vec<f64> = self.vertices.iter().flatten().copied().collect();
        c.push_f64("vertices", vec![self.vertices.len(), 3], flat)?;
        let tris: Vec<u32> =
            self.triangles.iter().flatten().map(|&i| i as u32).collect();
        c.push_u32("triangles", vec![self.triangles.len(), 3], tris)?;
        if let Some(normals) = &self.normals {
            let flat: Vec<f64> = normals.iter().flatten().copied().collect();
            c.push_f64("normals", vec![normals.len(), 3], flat)?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self, GeometryError> {
        let verts = c.tensor("vertices")?;
        if verts.rank() != 2 || verts.shape()[1] != 3 {
            return Err(GeometryError::Invalid(format!(
                "vertices must be [N, 3], got {:?}",
                verts.shape()
            )));
        }
        let vertices: Vec<Vec3> =
            verts.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let tris = c.u32s("triangles")?;
        let triangles: Vec<[usize; 3]> = tris
            .chunks_exact(3)
            .map(|c| [c[0] as usize, c[1] as usize, c[2] as usize])
            .collect();
        let mut mesh = Mesh::new(vertices, triangles)?;
        if c.contains("normals") {
            let n = c.tensor("normals")?;
            mesh.normals =
                Some(n.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect());
        }
        Ok(mesh)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GeometryError> {
        self.to_container()?.write(path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GeometryError> {
        Mesh::from_container(&Container::read(path)?)
    }

    /// Parse the ASCII OBJ subset: `v x y z` and triangle `f` lines.
    pub fn from_obj(text: &str) -> Result<Self, GeometryError> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let mut tok = line.split_whitespace();
            match tok.next() {
                Some("v") => {
                    let mut coord = [0.0; 3];
                    for c in &mut coord {
                        *c = tok
                            .next()
                            .and_then(|s| s.parse::<f64>().ok())
                            .ok_or_else(|| GeometryError::ObjParse {
                                line: ln + 1,
                                detail: "vertex needs three numeric coordinates".into(),
                            })?;
                    }
                    vertices.push(coord);
                }
                Some("f") => {
                    let idx: Vec<usize> = tok
                        .map(|s| {
                            let first = s.split('/').next().unwrap_or(s);
                            first.parse::<usize>().map_err(|_| GeometryError::ObjParse {
                                line: ln + 1,
                                detail: format!("bad face index `{s}`"),
                            })
                        })
                        .collect::<Result<_, _>>()?;
                    if idx.len() != 3 {
                        return Err(GeometryError::ObjParse {
                            line: ln + 1,
                            detail: format!("only triangle faces supported, got {}", idx.len()),
                        });
                    }
                    if idx.iter().any(|&i| i == 0) {
                        return Err(GeometryError::ObjParse {
                            line: ln + 1,
                            detail: "obj face indices are 1-based".into(),
                        });
                    }
                    triangles.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
                }
                _ => {} // comments, vn/vt, empty lines
            }
        }
        Mesh::new(vertices, triangles)
    }

    pub fn load_obj(path: impl AsRef<Path>) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(&path).map_err(|e| {
            GeometryError::Data(DataError::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.as_ref().display()),
            )))
        })?;
        Mesh::from_obj(&text)
    }

    /// Vertices as an `[N, 3]` tensor.
    pub fn vertices_tensor(&self) -> Tensor {
        let flat: Vec<f64> = self.vertices.iter().flatten().copied().collect();
        Tensor::new(vec![self.vertices.len(), 3], flat).expect("sized by construction")
    }
}

fn bounds(vertices: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in vertices {
        for k in 0..3 {
            lo[k] = lo[k].min(v[k]);
            hi[k] = hi[k].max(v[k]);
        }
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_cube() -> Mesh {
        // 8 vertices, 12 triangles, outward winding.
        let v = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [1.0, 0.0, 1.0],
            [1.0, 1.0, 1.0],
            [0.0, 1.0, 1.0],
        ];
        let t = vec![
            [0, 2, 1],
            [0, 3, 2], // bottom (z=0, outward -z)
            [4, 5, 6],
            [4, 6, 7], // top
            [0, 1, 5],
            [0, 5, 4], // front (y=0)
            [1, 2, 6],
            [1, 6, 5], // right
            [2, 3, 7],
            [2, 7, 6], // back
            [3, 0, 4],
            [3, 4, 7], // left
        ];
        Mesh::new(v, t).unwrap()
    }

    #[test]
    fn degenerate_triangles_dropped_and_counted() {
        let v = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let t = vec![[0, 1, 2], [0, 1, 1], [2, 2, 2]];
        let m = Mesh::new(v, t).unwrap();
        assert_eq!(m.num_triangles(), 1);
        assert_eq!(m.dropped_degenerate, 2);
    }

    #[test]
    fn out_of_range_index_rejected() {
        let v = vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert!(matches!(
            Mesh::new(v, vec![[0, 1, 7]]),
            Err(GeometryError::IndexOutOfRange { vertex: 7, .. })
        ));
    }

    #[test]
    fn unit_sphere_normalization() {
        let m = unit_cube();
        let (nm, tf) = m.normalize_to_unit_sphere().unwrap();
        let max_r = nm.vertices.iter().map(|&v| norm3(v)).fold(0.0f64, f64::max);
        assert!((max_r - 0.95).abs() < 1e-12);
        let centroid: Vec3 = nm
            .vertices
            .iter()
            .fold([0.0; 3], |acc, &v| add3(acc, v));
        assert!(norm3(centroid) < 1e-12);
        // Round trip < 1e-12.
        for (orig, now) in m.vertices.iter().zip(&nm.vertices) {
            let back = tf.invert(*now);
            assert!(norm3(sub3(back, *orig)) < 1e-12);
        }
    }

    #[test]
    fn scaling_invariance_of_normalization() {
        let m = unit_cube();
        let mut scaled = m.clone();
        for v in &mut scaled.vertices {
            *v = scale3(*v, 10.0);
        }
        let (a, _) = m.normalize_to_unit_sphere().unwrap();
        let (b, _) = scaled.normalize_to_unit_sphere().unwrap();
        for (x, y) in a.vertices.iter().zip(&b.vertices) {
            assert!(norm3(sub3(*x, *y)) < 1e-12);
        }
    }

    #[test]
    fn already_normalized_mesh_is_near_identity() {
        let (nm, _) = unit_cube().normalize_to_unit_sphere().unwrap();
        let (_, tf2) = nm.normalize_to_unit_sphere().unwrap();
        assert!(norm3(tf2.centroid) < 1e-12);
        assert!((tf2.scale - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flat_square_normals_point_up() {
        let v = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
        ];
        let t = vec![[0, 1, 2], [0, 2, 3]];
        let m = Mesh::new(v, t).unwrap();
        let (normals, isolated) = m.vertex_normals().unwrap();
        assert!(isolated.is_empty());
        for n in &normals {
            assert!(norm3(sub3(*n, [0.0, 0.0, 1.0])) < 1e-12);
        }
        // Flipping the winding negates the normals.
        let flipped = Mesh::new(m.vertices.clone(), vec![[2, 1, 0], [3, 2, 0]]).unwrap();
        let (fn_, _) = flipped.vertex_normals().unwrap();
        for n in &fn_ {
            assert!(norm3(sub3(*n, [0.0, 0.0, -1.0])) < 1e-12);
        }
    }

    #[test]
    fn icosphere_normals_are_radial() {
        let m = icosphere(3);
        let (normals, isolated) = m.vertex_normals().unwrap();
        assert!(isolated.is_empty());
        let mut max_angle = 0.0f64;
        for (v, n) in m.vertices.iter().zip(&normals) {
            let radial = scale3(*v, 1.0 / norm3(*v));
            let cosang = dot3(radial, *n).clamp(-1.0, 1.0);
            max_angle = max_angle.max(cosang.acos().to_degrees());
        }
        assert!(max_angle < 2.0, "max angular error {max_angle} deg");
    }

    #[test]
    fn isolated_vertex_flagged() {
        let v = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [9.0, 9.0, 9.0],
        ];
        let m = Mesh::new(v, vec![[0, 1, 2]]).unwrap();
        let (normals, isolated) = m.vertex_normals().unwrap();
        assert_eq!(isolated, vec![3]);
        assert_eq!(normals[3], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn obj_round_trip() {
        let obj = "# comment\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1 2 3\n";
        let m = Mesh::from_obj(obj).unwrap();
        assert_eq!(m.num_vertices(), 3);
        assert_eq!(m.num_triangles(), 1);
        // Slash-form faces parse too.
        let m2 = Mesh::from_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1//1 2//1 3//1\n").unwrap();
        assert_eq!(m2.triangles, m.triangles);
        // Quads are rejected.
        assert!(Mesh::from_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n").is_err());
    }

    #[test]
    fn container_round_trip() {
        let m = unit_cube().with_computed_normals().unwrap();
        let c = m.to_container().unwrap();
        let back = Mesh::from_container(&c).unwrap();
        assert_eq!(back.vertices, m.vertices);
        assert_eq!(back.triangles, m.triangles);
        assert_eq!(back.normals, m.normals);
    }
}
