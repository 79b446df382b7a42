//! Fixed-mesh 2D dataset with a parameter-driven moving front.
//!
//! The field is a smooth circulation-like component plus a tanh front whose
//! position moves with the Mach-like parameter; linear reduced bases smear
//! exactly this kind of feature, which is what the baseline comparisons need.

use crate::data::{DataError, Manifest, SampleEntry, SCHEMA_VERSION};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Airfoil2DCfg {
    /// Shared node count for every sample.
    pub n_nodes: usize,
    /// Parameter grid resolution: (Mach-like, alpha-like) in [0,1] each.
    pub grid: (usize, usize),
    /// Tanh front half-width; the transonic analogue of shock sharpness.
    pub front_width: f64,
    pub seed: u64,
}

impl Default for Airfoil2DCfg {
    fn default() -> Self {
        Airfoil2DCfg { n_nodes: 3000, grid: (8, 8), front_width: 0.03, seed: 0 }
    }
}

impl Airfoil2DCfg {
    /// Chordwise front position for a given parameter pair and height.
    pub fn front_position(&self, mu: &[f64], y: f64) -> f64 {
        0.2 + 0.55 * mu[0] - 0.1 * y * y
    }

    /// Distance to the front curve in the x direction.
    pub fn front_distance(&self, mu: &[f64], x: f64, y: f64) -> f64 {
        (x - self.front_position(mu, y)).abs()
    }

    /// Exact field value at any point for parameters `mu = [m_like, a_like]`.
    pub fn field_value(&self, mu: &[f64], x: f64, y: f64) -> f64 {
        let (m, a) = (mu[0], mu[1]);
        // Smooth circulation-like flow around the quarter-chord point.
        let dx = x - 0.25;
        let r2 = dx * dx + y * y;
        let smooth = -(0.25 + 0.75 * a) * y / (r2 + 0.15)
            - 0.5 * (0.3 + 0.7 * m) * dx / (r2 + 0.3)
            + 0.15 * (x * 2.1).sin() * (y * 1.7).cos();
        // Front on the upper side, moving downstream with m.
        let amp = (0.35 + 0.65 * m) * (0.4 + 0.6 * a);
        let upper = (-((y - 0.12) / 0.35) * ((y - 0.12) / 0.35)).exp();
        let front = amp * ((x - self.front_position(mu, y)) / self.front_width).tanh() * upper;
        smooth + front
    }
}

#[derive(Debug, Clone)]
pub struct Airfoil2D {
    pub cfg: Airfoil2DCfg,
    /// Shared node coordinates `[N, 2]`.
    pub points: Tensor,
    /// One parameter pair per sample.
    pub mus: Vec<[f64; 2]>,
    /// One `[N, 1]` field per sample.
    pub fields: Vec<Tensor>,
}

pub fn gen_airfoil_2d(cfg: &Airfoil2DCfg) -> Airfoil2D {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_nodes;
    // Two thirds of the nodes cluster around the chord region where the
    // front lives; the rest cover the far field.
    let n_near = n * 2 / 3;
    let mut coords = Vec::with_capacity(2 * n);
    for i in 0..n {
        let (x, y) = if i < n_near {
            (
                rng.gen_range(-0.4..1.4),
                rng.gen_range(-0.8..1.0),
            )
        } else {
            (rng.gen_range(-1.5..2.5), rng.gen_range(-1.5..1.5))
        };
        coords.push(x);
        coords.push(y);
    }
    let points = Tensor::new(vec![n, 2], coords).expect("sized");

    let (gm, ga) = cfg.grid;
    let mut mus = Vec::with_capacity(gm * ga);
    for im in 0..gm {
        for ia in 0..ga {
            let m = if gm > 1 { im as f64 / (gm - 1) as f64 } else { 0.5 };
            let a = if ga > 1 { ia as f64 / (ga - 1) as f64 } else { 0.5 };
            mus.push([m, a]);
        }
    }
    let fields = mus
        .iter()
        .map(|mu| {
            let data: Vec<f64> = (0..n)
                .map(|r| {
                    let p = points.row(r);
                    cfg.field_value(mu, p[0], p[1])
                })
                .collect();
            Tensor::new(vec![n, 1], data).expect("sized")
        })
        .collect();
    Airfoil2D { cfg: cfg.clone(), points, mus, fields }
}

impl Airfoil2D {
    pub fn num_samples(&self) -> usize {
        self.mus.len()
    }

    pub fn write_dataset(&self, dir: impl AsRef<Path>) -> Result<(), DataError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        super::write_points_mesh(dir, "mesh.nfsb", &self.points)?;
        let mut samples = Vec::with_capacity(self.num_samples());
        for (i, (mu, field)) in self.mus.iter().zip(&self.fields).enumerate() {
            let rel = format!("fields/s{i:04}.nfsb");
            super::write_field(dir, &rel, field)?;
            samples.push(SampleEntry {
                id: format!("s{i:04}"),
                shape_id: "airfoil".into(),
                mesh: "mesh.nfsb".into(),
                field: rel,
                mu: mu.to_vec(),
                sdf_cloud: None,
            });
        }
        Manifest {
            schema_version: SCHEMA_VERSION,
            field_names: vec!["p".into()],
            parameter_names: vec!["m_like".into(), "a_like".into()],
            samples,
        }
        .save(dir.join("manifest.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_mu_identical_fields() {
        let d = gen_airfoil_2d(&Airfoil2DCfg { n_nodes: 100, grid: (2, 2), ..Default::default() });
        let a: Vec<f64> = (0..100).map(|r| {
            let p = d.points.row(r);
            d.cfg.field_value(&d.mus[1], p[0], p[1])
        }).collect();
        assert_eq!(a, d.fields[1].data());
    }

    #[test]
    fn front_moves_monotonically_with_m() {
        let cfg = Airfoil2DCfg::default();
        // Argmax of |du/dx| along a horizontal cut tracks the front.
        let locate = |m: f64| -> f64 {
            let mu = [m, 0.5];
            let y = 0.12;
            let mut best = (0.0, 0.0);
            let mut prev = cfg.field_value(&mu, -0.4, y);
            for i in 1..2000 {
                let x = -0.4 + 1.8 * i as f64 / 2000.0;
                let v = cfg.field_value(&mu, x, y);
                let g = (v - prev).abs();
                if g > best.1 {
                    best = (x, g);
                }
                prev = v;
            }
            best.0
        };
        let xs: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|&m| locate(m)).collect();
        for w in xs.windows(2) {
            assert!(w[1] > w[0], "front positions not monotone: {xs:?}");
        }
        // And the located front sits near the analytic position.
        for (&m, &x) in [0.0, 0.25, 0.5, 0.75, 1.0].iter().zip(&xs) {
            let expected = cfg.front_position(&[m, 0.5], 0.12);
            assert!((x - expected).abs() < 0.05, "m={m}: {x} vs {expected}");
        }
    }

    #[test]
    fn default_configuration_shape() {
        let d = gen_airfoil_2d(&Airfoil2DCfg { grid: (3, 2), n_nodes: 50, ..Default::default() });
        assert_eq!(d.num_samples(), 6);
        assert_eq!(d.points.shape(), &[50, 2]);
        assert_eq!(Airfoil2DCfg::default().n_nodes, 3000);
        // Fields stay bounded.
        for f in &d.fields {
            assert!(f.data().iter().all(|v| v.abs() < 10.0));
        }
    }

    #[test]
    fn dataset_round_trips_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_airfoil_2d(&Airfoil2DCfg { n_nodes: 40, grid: (2, 2), ..Default::default() });
        d.write_dataset(dir.path()).unwrap();
        let ds = crate::data::Dataset::load(dir.path().join("manifest.json")).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.d_p(), 2);
        assert_eq!(ds.samples[2].field.data(), d.fields[2].data());
        // All samples share one geometry.
        assert!(std::sync::Arc::ptr_eq(
            &ds.samples[0].geometry,
            &ds.samples[3].geometry
        ));
    }
}
