//! Signed distances on triangle meshes and DeepSDF-style point sampling.
//!
//! Distance magnitude is the exact minimum point-to-triangle distance,
//! accelerated by an AABB tree. The sign comes from the generalized winding
//! number (robust on thin trailing edges where nearest-face normals flip).

use super::{add3, cross3, dot3, norm3, scale3, sub3, GeometryError, Mesh, Vec3};
use crate::data::{Container, DataError};
use crate::tensor::Tensor;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use std::f64::consts::PI;
use std::path::Path;

const LEAF_SIZE: usize = 8;

enum NodeKind {
    Leaf { start: usize, count: usize },
    Inner { left: usize, right: usize },
}

struct BvhNode {
    lo: Vec3,
    hi: Vec3,
    kind: NodeKind,
}

/// Read-only query structure over one mesh: AABB tree for distances plus
/// winding-number sign evaluation. Build once, share freely.
pub struct MeshQuery<'a> {
    mesh: &'a Mesh,
    nodes: Vec<BvhNode>,
    tri_order: Vec<usize>,
}

impl<'a> MeshQuery<'a> {
    pub fn new(mesh: &'a Mesh) -> Result<Self, GeometryError> {
        if mesh.triangles.is_empty() {
            return Err(GeometryError::NoTriangles);
        }
        let mut tri_order: Vec<usize> = (0..mesh.num_triangles()).collect();
        let mut nodes = Vec::new();
        build_node(mesh, &mut tri_order, 0, mesh.num_triangles(), &mut nodes);
        Ok(MeshQuery { mesh, nodes, tri_order })
    }

    /// Unsigned distance to the surface.
    pub fn distance(&self, p: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        self.query(0, p, &mut best);
        best.sqrt()
    }

    fn query(&self, node: usize, p: Vec3, best: &mut f64) {
        let n = &self.nodes[node];
        if aabb_dist2(p, n.lo, n.hi) >= *best {
            return;
        }
        match n.kind {
            NodeKind::Leaf { start, count } => {
                for &ti in &self.tri_order[start..start + count] {
                    let [a, b, c] = self.mesh.triangle(ti);
                    let q = closest_point_on_triangle(p, a, b, c);
                    let d2 = dist2(p, q);
                    if d2 < *best {
                        *best = d2;
                    }
                }
            }
            NodeKind::Inner { left, right } => {
                let dl = aabb_dist2(p, self.nodes[left].lo, self.nodes[left].hi);
                let dr = aabb_dist2(p, self.nodes[right].lo, self.nodes[right].hi);
                if dl <= dr {
                    self.query(left, p, best);
                    self.query(right, p, best);
                } else {
                    self.query(right, p, best);
                    self.query(left, p, best);
                }
            }
        }
    }

    /// Generalized winding number; ~1 inside a watertight mesh, ~0 outside.
    pub fn winding_number(&self, p: Vec3) -> f64 {
        let mut total = 0.0;
        for t in &self.mesh.triangles {
            let a = sub3(self.mesh.vertices[t[0]], p);
            let b = sub3(self.mesh.vertices[t[1]], p);
            let c = sub3(self.mesh.vertices[t[2]], p);
            total += solid_angle(a, b, c);
        }
        total / (4.0 * PI)
    }

    pub fn is_inside(&self, p: Vec3) -> bool {
        self.winding_number(p) >= 0.5
    }

    /// Signed distance: negative inside.
    pub fn signed_distance(&self, p: Vec3) -> f64 {
        let d = self.distance(p);
        if self.is_inside(p) {
            -d
        } else {
            d
        }
    }
}

/// Signed solid angle of the triangle `(a, b, c)` as seen from the origin.
fn solid_angle(a: Vec3, b: Vec3, c: Vec3) -> f64 {
    let la = norm3(a);
    let lb = norm3(b);
    let lc = norm3(c);
    let det = dot3(a, cross3(b, c));
    let denom = la * lb * lc + dot3(a, b) * lc + dot3(b, c) * la + dot3(c, a) * lb;
    2.0 * det.atan2(denom)
}

/// Closest point on a triangle (Voronoi-region walk).
fn closest_point_on_triangle(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Vec3 {
    let ab = sub3(b, a);
    let ac = sub3(c, a);
    let ap = sub3(p, a);
    let d1 = dot3(ab, ap);
    let d2 = dot3(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = sub3(p, b);
    let d3 = dot3(ab, bp);
    let d4 = dot3(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return add3(a, scale3(ab, v));
    }
    let cp = sub3(p, c);
    let d5 = dot3(ab, cp);
    let d6 = dot3(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return add3(a, scale3(ac, w));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return add3(b, scale3(sub3(c, b), w));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    add3(a, add3(scale3(ab, v), scale3(ac, w)))
}

fn dist2(a: Vec3, b: Vec3) -> f64 {
    let d = sub3(a, b);
    dot3(d, d)
}

fn aabb_dist2(p: Vec3, lo: Vec3, hi: Vec3) -> f64 {
    let mut d2 = 0.0;
    for k in 0..3 {
        let d = (lo[k] - p[k]).max(0.0).max(p[k] - hi[k]);
        d2 += d * d;
    }
    d2
}

fn build_node(
    mesh: &Mesh,
    order: &mut [usize],
    start: usize,
    count: usize,
    nodes: &mut Vec<BvhNode>,
) -> usize {
    let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
    for &ti in &order[start..start + count] {
        for v in mesh.triangle(ti) {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
    }
    let id = nodes.len();
    nodes.push(BvhNode { lo, hi, kind: NodeKind::Leaf { start, count } });
    if count <= LEAF_SIZE {
        return id;
    }
    // Median split along the longest extent of the centroid bounds.
    let centroid = |ti: usize| -> Vec3 {
        let [a, b, c] = mesh.triangle(ti);
        [
            (a[0] + b[0] + c[0]) / 3.0,
            (a[1] + b[1] + c[1]) / 3.0,
            (a[2] + b[2] + c[2]) / 3.0,
        ]
    };
    let (mut clo, mut chi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
    for &ti in &order[start..start + count] {
        let c = centroid(ti);
        for k in 0..3 {
            clo[k] = clo[k].min(c[k]);
            chi[k] = chi[k].max(c[k]);
        }
    }
    let mut axis = 0;
    for k in 1..3 {
        if chi[k] - clo[k] > chi[axis] - clo[axis] {
            axis = k;
        }
    }
    let mid = count / 2;
    order[start..start + count].select_nth_unstable_by(mid, |&x, &y| {
        centroid(x)[axis].total_cmp(&centroid(y)[axis])
    });
    let left = build_node(mesh, order, start, mid, nodes);
    let right = build_node(mesh, order, start + mid, count - mid, nodes);
    nodes[id].kind = NodeKind::Inner { left, right };
    id
}

// ── SDF point clouds ───────────────────────────────────────────────────

/// Sampling configuration for one shape's SDF cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfSamplingCfg {
    pub n_total: usize,
    /// Fraction of points drawn uniformly in the mesh bounding box.
    pub uniform_fraction: f64,
    /// Noise stds for the near-surface tiers; the non-uniform points are
    /// split equally across tiers.
    pub surface_sigmas: Vec<f64>,
    pub seed: u64,
}

impl Default for SdfSamplingCfg {
    fn default() -> Self {
        SdfSamplingCfg {
            n_total: 60_000,
            uniform_fraction: 0.10,
            surface_sigmas: vec![0.005, 0.0005],
            seed: 0,
        }
    }
}

/// Sampled 3D points with signed-distance values for one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfCloud {
    pub shape_id: String,
    /// `[N, 3]` sample positions.
    pub points: Tensor,
    /// Signed distance at each point.
    pub sdf: Vec<f64>,
    pub cfg: SdfSamplingCfg,
}

impl SdfCloud {
    /// Sample an SDF cloud for a (normalized) mesh.
    ///
    /// `uniform_fraction` of the points are uniform in the mesh's bounding
    /// box; the rest are surface samples (area-weighted triangle, uniform
    /// barycentric) perturbed by isotropic Gaussian noise, one tier per
    /// entry of `surface_sigmas`.
    pub fn sample(mesh: &Mesh, shape_id: &str, cfg: &SdfSamplingCfg) -> Result<Self, GeometryError> {
        if cfg.n_total < 10 {
            return Err(GeometryError::TooFewPoints(cfg.n_total));
        }
        if !(0.0..=1.0).contains(&cfg.uniform_fraction) {
            return Err(GeometryError::Invalid(format!(
                "uniform fraction {} outside [0, 1]",
                cfg.uniform_fraction
            )));
        }
        for &s in &cfg.surface_sigmas {
            if s <= 0.0 {
                return Err(GeometryError::NonPositiveSigma(s));
            }
        }
        if cfg.uniform_fraction < 1.0 && cfg.surface_sigmas.is_empty() {
            return Err(GeometryError::Invalid(
                "surface sampling requested but no noise tiers given".into(),
            ));
        }
        let query = MeshQuery::new(mesh)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (lo, hi) = mesh.bounds();
        let n_uniform = (cfg.n_total as f64 * cfg.uniform_fraction).round() as usize;
        let n_surface = cfg.n_total - n_uniform;

        let mut points: Vec<Vec3> = Vec::with_capacity(cfg.n_total);
        let unit = Uniform::new_inclusive(0.0f64, 1.0);
        for _ in 0..n_uniform {
            let mut p = [0.0; 3];
            for k in 0..3 {
                p[k] = lo[k] + (hi[k] - lo[k]) * unit.sample(&mut rng);
            }
            points.push(p);
        }

        if n_surface > 0 {
            // Cumulative areas for area-weighted triangle selection.
            let mut cum = Vec::with_capacity(mesh.num_triangles());
            let mut acc = 0.0;
            for i in 0..mesh.num_triangles() {
                acc += mesh.triangle_area(i);
                cum.push(acc);
            }
            let total_area = acc;
            let tiers = cfg.surface_sigmas.len();
            let base = n_surface / tiers;
            let extra = n_surface % tiers;
            for (tier, &sigma) in cfg.surface_sigmas.iter().enumerate() {
                let n_tier = base + usize::from(tier < extra);
                let noise = Normal::new(0.0, sigma).expect("sigma checked positive");
                for _ in 0..n_tier {
                    let u = unit.sample(&mut rng) * total_area;
                    let ti = cum.partition_point(|&a| a < u).min(cum.len() - 1);
                    let [a, b, c] = mesh.triangle(ti);
                    let (r1, r2) = (unit.sample(&mut rng), unit.sample(&mut rng));
                    let s = r1.sqrt();
                    let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
                    let mut p = add3(add3(scale3(a, wa), scale3(b, wb)), scale3(c, wc));
                    for coord in &mut p {
                        *coord += noise.sample(&mut rng);
                    }
                    points.push(p);
                }
            }
        }

        let sdf: Vec<f64> = points.iter().map(|&p| query.signed_distance(p)).collect();
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        Ok(SdfCloud {
            shape_id: shape_id.to_string(),
            points: Tensor::new(vec![cfg.n_total, 3], flat)
                .map_err(|e| GeometryError::Invalid(e.to_string()))?,
            sdf,
            cfg: cfg.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.sdf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sdf.is_empty()
    }

    /// SDF values as an `[N, 1]` column.
    pub fn sdf_tensor(&self) -> Tensor {
        Tensor::new(vec![self.sdf.len(), 1], self.sdf.clone()).expect("sized")
    }

    pub fn to_container(&self) -> Result<Container, DataError> {
        let mut c = Container::new();
        c.push_tensor("points", &self.points)?;
        c.push_f64("sdf", vec![self.sdf.len()], self.sdf.clone())?;
        c.push_f64(
            "sigmas",
            vec![self.cfg.surface_sigmas.len()],
            self.cfg.surface_sigmas.clone(),
        )?;
        c.push_f64("uniform_fraction", vec![1], vec![self.cfg.uniform_fraction])?;
        c.push_u32(
            "seed",
            vec![2],
            vec![(self.cfg.seed & 0xFFFF_FFFF) as u32, (self.cfg.seed >> 32) as u32],
        )?;
        c.push_text("shape_id", &self.shape_id)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self, DataError> {
        let points = c.tensor("points")?;
        let sdf = c.tensor("sdf")?.data().to_vec();
        let sigmas = c.tensor("sigmas")?.data().to_vec();
        let uniform_fraction = c.tensor("uniform_fraction")?.item();
        let seed_halves = c.u32s("seed")?;
        let seed = u64::from(seed_halves[0]) | (u64::from(seed_halves[1]) << 32);
        Ok(SdfCloud {
            shape_id: c.text("shape_id")?,
            cfg: SdfSamplingCfg {
                n_total: sdf.len(),
                uniform_fraction,
                surface_sigmas: sigmas,
                seed,
            },
            points,
            sdf,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        self.to_container()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        SdfCloud::from_container(&Container::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::super::icosphere;
    use super::*;
    use rand::Rng;

    #[test]
    fn distance_zero_at_vertices() {
        let m = icosphere(2);
        let q = MeshQuery::new(&m).unwrap();
        for &v in m.vertices.iter().step_by(17) {
            assert!(q.distance(v) < 1e-12);
        }
    }

    #[test]
    fn bvh_matches_brute_force() {
        let m = icosphere(2);
        let q = MeshQuery::new(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let p = [
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
            ];
            let brute = (0..m.num_triangles())
                .map(|i| {
                    let [a, b, c] = m.triangle(i);
                    dist2(p, closest_point_on_triangle(p, a, b, c))
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt();
            let fast = q.distance(p);
            assert!((brute - fast).abs() < 1e-12, "{brute} vs {fast}");
        }
    }

    #[test]
    fn icosphere_sdf_matches_analytic_sphere() {
        let m = icosphere(4);
        let q = MeshQuery::new(&m).unwrap();
        let inside = q.signed_distance([0.5, 0.0, 0.0]);
        assert!((inside + 0.5).abs() < 2e-3, "inside sdf {inside}");
        let outside = q.signed_distance([2.0, 0.0, 0.0]);
        assert!((outside - 1.0).abs() < 2e-3, "outside sdf {outside}");
    }

    #[test]
    fn winding_sign_flips_once_along_ray() {
        let m = icosphere(2);
        let q = MeshQuery::new(&m).unwrap();
        let mut flips = 0;
        let mut prev = q.signed_distance([3.0, 0.004, 0.002]) > 0.0;
        let steps = 3000;
        for i in 1..=steps {
            let t = i as f64 / steps as f64;
            let p = [3.0 * (1.0 - t), 0.004, 0.002];
            let now = q.signed_distance(p) > 0.0;
            if now != prev {
                flips += 1;
            }
            prev = now;
        }
        assert_eq!(flips, 1);
    }

    #[test]
    fn sampling_is_deterministic_and_validated() {
        let m = icosphere(1);
        let cfg = SdfSamplingCfg {
            n_total: 200,
            uniform_fraction: 0.1,
            surface_sigmas: vec![0.05, 0.005],
            seed: 3,
        };
        let a = SdfCloud::sample(&m, "s", &cfg).unwrap();
        let b = SdfCloud::sample(&m, "s", &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 200);

        let bad = SdfSamplingCfg { surface_sigmas: vec![0.0], ..cfg.clone() };
        assert!(matches!(
            SdfCloud::sample(&m, "s", &bad),
            Err(GeometryError::NonPositiveSigma(_))
        ));
        assert!(matches!(
            SdfCloud::sample(&m, "s", &SdfSamplingCfg { n_total: 5, ..cfg.clone() }),
            Err(GeometryError::TooFewPoints(5))
        ));
    }

    #[test]
    fn pure_box_sampling_when_fraction_is_one() {
        let m = icosphere(1);
        let cfg = SdfSamplingCfg {
            n_total: 100,
            uniform_fraction: 1.0,
            surface_sigmas: vec![],
            seed: 1,
        };
        let cloud = SdfCloud::sample(&m, "s", &cfg).unwrap();
        let (lo, hi) = m.bounds();
        for r in 0..100 {
            let p = cloud.points.row(r);
            for k in 0..3 {
                assert!(p[k] >= lo[k] && p[k] <= hi[k]);
            }
        }
    }

    #[test]
    fn surface_tier_sdf_magnitudes_scale_with_sigma() {
        let m = icosphere(3);
        let cfg = SdfSamplingCfg {
            n_total: 4000,
            uniform_fraction: 0.0,
            surface_sigmas: vec![0.05, 0.005],
            seed: 11,
        };
        let cloud = SdfCloud::sample(&m, "s", &cfg).unwrap();
        // Points come out tier by tier: first 2000 with sigma .05, rest .005.
        for (range, sigma) in [(0..2000, 0.05f64), (2000..4000, 0.005)] {
            let mut mags: Vec<f64> = cloud.sdf[range].iter().map(|v| v.abs()).collect();
            mags.sort_by(f64::total_cmp);
            let median = mags[mags.len() / 2];
            assert!(median <= 2.0 * sigma, "median {median} for sigma {sigma}");
        }
    }

    #[test]
    fn triangle_order_does_not_change_sdf_distribution() {
        let m = icosphere(2);
        let mut shuffled = m.clone();
        shuffled.triangles.rotate_left(57);
        shuffled.triangles.swap(0, 99);
        let cfg = SdfSamplingCfg {
            n_total: 2000,
            uniform_fraction: 0.0,
            surface_sigmas: vec![0.02],
            seed: 21,
        };
        let a = SdfCloud::sample(&m, "s", &cfg).unwrap();
        let b = SdfCloud::sample(&shuffled, "s", &cfg).unwrap();
        // Two-sample Kolmogorov-Smirnov on |sdf|.
        let mut xs: Vec<f64> = a.sdf.iter().map(|v| v.abs()).collect();
        let mut ys: Vec<f64> = b.sdf.iter().map(|v| v.abs()).collect();
        xs.sort_by(f64::total_cmp);
        ys.sort_by(f64::total_cmp);
        let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
        while i < xs.len() && j < ys.len() {
            if xs[i] <= ys[j] {
                i += 1;
            } else {
                j += 1;
            }
            let fx = i as f64 / xs.len() as f64;
            let fy = j as f64 / ys.len() as f64;
            d = d.max((fx - fy).abs());
        }
        // alpha = 0.001 critical value for n = m = 2000.
        let crit = 1.95 * (2.0 / 2000.0f64).sqrt();
        assert!(d < crit, "KS statistic {d} over critical {crit}");
    }

    #[test]
    fn cloud_container_round_trip() {
        let m = icosphere(1);
        let cfg = SdfSamplingCfg {
            n_total: 50,
            uniform_fraction: 0.2,
            surface_sigmas: vec![0.01],
            seed: 9,
        };
        let cloud = SdfCloud::sample(&m, "wing_003", &cfg).unwrap();
        let back = SdfCloud::from_container(&cloud.to_container().unwrap()).unwrap();
        assert_eq!(back, cloud);
    }
}
