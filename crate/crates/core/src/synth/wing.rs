//! Parametric 3D wing family: closed lofted meshes, analytic surface fields,
//! by-shape dataset emission.

use crate::data::{DataError, Manifest, SampleEntry, SCHEMA_VERSION};
use crate::geometry::{GeometryError, Mesh, MeshQuery};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;
use std::path::Path;

/// The three shape parameters varied across the family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WingShapeParams {
    pub span: f64,
    pub thickness: f64,
    pub sweep: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Wing3DCfg {
    pub n_shapes: usize,
    pub conditions_per_shape: usize,
    /// Spanwise sections of the loft.
    pub span_sections: usize,
    /// Points around each profile ring.
    pub ring_points: usize,
    pub seed: u64,
}

impl Default for Wing3DCfg {
    fn default() -> Self {
        Wing3DCfg {
            n_shapes: 12,
            conditions_per_shape: 16,
            span_sections: 20,
            ring_points: 24,
            seed: 0,
        }
    }
}

fn smooth_step(t: f64) -> f64 {
    0.5 * (1.0 + t.tanh())
}

impl Wing3DCfg {
    /// Surface position for chordwise angle `theta` at span fraction `s`.
    fn surface_point(shape: &WingShapeParams, s: f64, theta: f64) -> [f64; 3] {
        let c = 0.5 * (1.0 - theta.cos());
        let up = theta.sin();
        let chord = 1.0 - 0.45 * s;
        let half_thickness = shape.thickness * up * (1.15 - 0.75 * c);
        [
            shape.sweep * s + c * chord,
            shape.span * s,
            chord * half_thickness + 0.2 * shape.sweep * s * s,
        ]
    }

    /// Analytic surface field at chord fraction `c`, span fraction `s` and
    /// upper/lower coordinate `up = sin(theta)`, for parameters
    /// `mu = [m_like, a_like, ail_like]`.
    pub fn field_value(shape: &WingShapeParams, mu: &[f64], c: f64, s: f64, up: f64) -> f64 {
        let (m, a, ail) = (mu[0], mu[1], mu[2]);
        let suction = c.max(1e-9).powf(0.35) * (1.0 - c);
        let base = -(0.4 + 0.8 * a) * suction * up * (1.0 - 0.35 * s);
        let c_front = 0.25 + 0.45 * m - 1.5 * (shape.thickness - 0.1) - 0.3 * shape.sweep.abs()
            + 0.1 * s
            + 0.05 * (shape.span - 1.0);
        let amp = (0.3 + 0.7 * m) * (0.3 + 0.5 * a) * up.max(0.0);
        let front = amp * ((c - c_front) / 0.06).tanh();
        let flap = 0.8 * ail * up * smooth_step((s - 0.65) / 0.1) * smooth_step((c - 0.65) / 0.08);
        let ambient = 0.1 * (1.0 - c) * (1.0 - 0.4 * s);
        base + front + flap + ambient
    }

    /// Build the closed loft for one shape. Returns the mesh (with vertex
    /// normals) and per-vertex `(c, s, up)` surface coordinates.
    pub fn build_mesh(
        &self,
        shape: &WingShapeParams,
    ) -> Result<(Mesh, Vec<[f64; 3]>), GeometryError> {
        let (nj, nk) = (self.span_sections, self.ring_points);
        if nj < 2 || nk < 6 {
            return Err(GeometryError::Invalid(format!(
                "loft resolution too low ({nj} sections, {nk} ring points)"
            )));
        }
        let mut vertices = Vec::with_capacity((nj + 1) * nk + 2);
        let mut coords = Vec::with_capacity((nj + 1) * nk + 2);
        for j in 0..=nj {
            let s = j as f64 / nj as f64;
            for k in 0..nk {
                let theta = TAU * k as f64 / nk as f64;
                vertices.push(Self::surface_point(shape, s, theta));
                coords.push([0.5 * (1.0 - theta.cos()), s, theta.sin()]);
            }
        }
        let mut triangles = Vec::new();
        for j in 0..nj {
            for k in 0..nk {
                let k1 = (k + 1) % nk;
                let a = j * nk + k;
                let b = j * nk + k1;
                let c = (j + 1) * nk + k1;
                let d = (j + 1) * nk + k;
                triangles.push([a, b, c]);
                triangles.push([a, c, d]);
            }
        }
        // Tip caps: fan to ring centroids.
        let centroid = |j: usize, vertices: &[[f64; 3]]| -> [f64; 3] {
            let mut acc = [0.0; 3];
            for k in 0..nk {
                let v = vertices[j * nk + k];
                acc = [acc[0] + v[0], acc[1] + v[1], acc[2] + v[2]];
            }
            [acc[0] / nk as f64, acc[1] / nk as f64, acc[2] / nk as f64]
        };
        let root_c = centroid(0, &vertices);
        let tip_c = centroid(nj, &vertices);
        let root_idx = vertices.len();
        vertices.push(root_c);
        coords.push([0.5, 0.0, 0.0]);
        let tip_idx = vertices.len();
        vertices.push(tip_c);
        coords.push([0.5, 1.0, 0.0]);
        for k in 0..nk {
            let k1 = (k + 1) % nk;
            triangles.push([root_idx, k, k1]);
            triangles.push([tip_idx, nj * nk + k1, nj * nk + k]);
        }

        let mut mesh = Mesh::new(vertices, triangles)?;
        // Decide orientation empirically and flip to outward if needed.
        let interior = {
            let mid = Self::surface_point(shape, 0.5, 0.0);
            let upper = Self::surface_point(shape, 0.5, TAU / 4.0);
            [(mid[0] + upper[0]) * 0.5 - 0.25 * (upper[0] - mid[0]), mid[1], (mid[2] + upper[2]) * 0.5]
        };
        let interior = [
            Self::surface_point(shape, 0.5, 0.0)[0] + 0.4,
            interior[1],
            0.2 * shape.sweep * 0.25,
        ];
        let q = MeshQuery::new(&mesh)?;
        if q.winding_number(interior) < 0.5 {
            for t in &mut mesh.triangles {
                t.swap(1, 2);
            }
        }
        let mesh = mesh.with_computed_normals()?;
        Ok((mesh, coords))
    }

    fn shape_params(&self, rng: &mut ChaCha8Rng) -> WingShapeParams {
        WingShapeParams {
            span: rng.gen_range(0.8..1.3),
            thickness: rng.gen_range(0.07..0.13),
            sweep: rng.gen_range(-0.25..0.25),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Wing3D {
    pub cfg: Wing3DCfg,
    pub shapes: Vec<(WingShapeParams, Mesh)>,
    /// Per shape: per-vertex `(c, s, up)` used by the analytic field.
    pub surface_coords: Vec<Vec<[f64; 3]>>,
    /// (shape index, mu, field `[N, 1]`).
    pub samples: Vec<(usize, [f64; 3], Tensor)>,
}

pub fn gen_wing_3d(cfg: &Wing3DCfg) -> Result<Wing3D, GeometryError> {
    if cfg.n_shapes == 0 || cfg.conditions_per_shape == 0 {
        return Err(GeometryError::Invalid("empty wing dataset requested".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut shapes = Vec::with_capacity(cfg.n_shapes);
    let mut surface_coords = Vec::with_capacity(cfg.n_shapes);
    for _ in 0..cfg.n_shapes {
        let params = cfg.shape_params(&mut rng);
        let (mesh, coords) = cfg.build_mesh(&params)?;
        shapes.push((params, mesh));
        surface_coords.push(coords);
    }
    let mut samples = Vec::with_capacity(cfg.n_shapes * cfg.conditions_per_shape);
    for si in 0..cfg.n_shapes {
        for _ in 0..cfg.conditions_per_shape {
            let mu = [
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
            ];
            let (params, _) = &shapes[si];
            let data: Vec<f64> = surface_coords[si]
                .iter()
                .map(|&[c, s, up]| Wing3DCfg::field_value(params, &mu, c, s, up))
                .collect();
            let n = data.len();
            samples.push((si, mu, Tensor::new(vec![n, 1], data).expect("sized")));
        }
    }
    Ok(Wing3D { cfg: cfg.clone(), shapes, surface_coords, samples })
}

impl Wing3D {
    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn shape_id(i: usize) -> String {
        format!("wing_{i:03}")
    }

    /// Emit meshes, fields and a manifest; SDF cloud paths are listed and
    /// filled in later by the sdf preparation step.
    pub fn write_dataset(&self, dir: impl AsRef<Path>) -> Result<(), DataError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (i, (_, mesh)) in self.shapes.iter().enumerate() {
            mesh.save(dir.join(format!("meshes/{}.nfsb", Self::shape_id(i))))
                .map_err(|e| DataError::Invalid(e.to_string()))?;
        }
        let mut entries = Vec::with_capacity(self.samples.len());
        for (i, (si, mu, field)) in self.samples.iter().enumerate() {
            let rel = format!("fields/s{i:04}.nfsb");
            super::write_field(dir, &rel, field)?;
            entries.push(SampleEntry {
                id: format!("s{i:04}"),
                shape_id: Self::shape_id(*si),
                mesh: format!("meshes/{}.nfsb", Self::shape_id(*si)),
                field: rel,
                mu: mu.to_vec(),
                sdf_cloud: Some(format!("sdf/{}.nfsb", Self::shape_id(*si))),
            });
        }
        Manifest {
            schema_version: SCHEMA_VERSION,
            field_names: vec!["p".into()],
            parameter_names: vec!["m_like".into(), "a_like".into(), "ail_like".into()],
            samples: entries,
        }
        .save(dir.join("manifest.json"))
    }
}
