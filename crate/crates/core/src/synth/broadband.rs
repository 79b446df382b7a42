//! Single broadband 1D signal for frequency-scale studies.

use crate::data::{DataError, Manifest, SampleEntry, SCHEMA_VERSION};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use std::f64::consts::TAU;
use std::path::Path;

/// Sum-of-sines target on the unit interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Broadband1DCfg {
    /// (frequency in cycles over [0,1], amplitude) pairs.
    pub components: Vec<(f64, f64)>,
    /// Regular grid resolution on [0, 1].
    pub n_points: usize,
    /// Fraction of grid points used for training; the rest are held out.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for Broadband1DCfg {
    fn default() -> Self {
        // Bandwidth spans [1, 50] cycles with a slowly decaying envelope.
        Broadband1DCfg {
            components: vec![
                (1.0, 1.0),
                (3.0, 0.75),
                (7.0, 0.6),
                (13.0, 0.45),
                (23.0, 0.35),
                (37.0, 0.28),
                (50.0, 0.22),
            ],
            n_points: 2048,
            train_fraction: 0.5,
            seed: 0,
        }
    }
}

impl Broadband1DCfg {
    /// Exact signal value at any x; phases are seed-deterministic.
    pub fn signal(&self, x: f64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5157_1D51);
        self.components
            .iter()
            .map(|&(f, a)| {
                let phase: f64 = rng.gen_range(0.0..TAU);
                a * (TAU * f * x + phase).sin()
            })
            .sum()
    }

    /// Highest component frequency (cycles over the unit interval).
    pub fn top_band(&self) -> f64 {
        self.components.iter().map(|&(f, _)| f).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct Broadband1D {
    pub cfg: Broadband1DCfg,
    /// Regular grid on [0, 1], length `cfg.n_points`.
    pub xs: Vec<f64>,
    pub values: Vec<f64>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

pub fn gen_broadband_1d(cfg: &Broadband1DCfg) -> Broadband1D {
    let n = cfg.n_points;
    let xs: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
    let values: Vec<f64> = xs.iter().map(|&x| cfg.signal(x)).collect();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    idx.shuffle(&mut rng);
    let n_train = ((n as f64) * cfg.train_fraction).round() as usize;
    let mut train_idx = idx[..n_train].to_vec();
    let mut test_idx = idx[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Broadband1D { cfg: cfg.clone(), xs, values, train_idx, test_idx }
}

impl Broadband1D {
    pub fn points_tensor(&self, idx: &[usize]) -> Tensor {
        Tensor::new(vec![idx.len(), 1], idx.iter().map(|&i| self.xs[i]).collect()).expect("sized")
    }

    pub fn values_tensor(&self, idx: &[usize]) -> Tensor {
        Tensor::new(vec![idx.len(), 1], idx.iter().map(|&i| self.values[i]).collect())
            .expect("sized")
    }

    /// Write as a one-sample dataset in the manifest format.
    pub fn write_dataset(&self, dir: impl AsRef<Path>) -> Result<(), DataError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let points = Tensor::new(vec![self.xs.len(), 1], self.xs.clone())
            .map_err(|e| DataError::Invalid(e.to_string()))?;
        super::write_points_mesh(dir, "grid.nfsb", &points)?;
        let field = Tensor::new(vec![self.values.len(), 1], self.values.clone())
            .map_err(|e| DataError::Invalid(e.to_string()))?;
        super::write_field(dir, "signal.nfsb", &field)?;
        Manifest {
            schema_version: SCHEMA_VERSION,
            field_names: vec!["u".into()],
            parameter_names: vec![],
            samples: vec![SampleEntry {
                id: "signal".into(),
                shape_id: "interval".into(),
                mesh: "grid.nfsb".into(),
                field: "signal.nfsb".into(),
                mu: vec![],
                sdf_cloud: None,
            }],
        }
        .save(dir.join("manifest.json"))
    }
}

/// One-sided power spectrum of a regularly sampled signal; entry k holds the
/// power at k cycles over the sampled interval.
pub fn power_spectrum(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let mut buf: Vec<Complex<f64>> =
        values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft.process(&mut buf);
    let half = n / 2 + 1;
    (0..half).map(|k| (buf[k].norm_sqr()) / (n as f64 * n as f64)).collect()
}

/// Total spectral power above `band` cycles.
///
/// A Hann window suppresses the boundary-wrap leakage of non-periodic
/// reconstructions (which otherwise floods the high bins with a 1/k^2 tail);
/// a 3-bin guard clears the window's main lobe around in-band components.
pub fn energy_above_band(values: &[f64], band: f64) -> f64 {
    let n = values.len();
    let windowed: Vec<f64> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let w = 0.5 * (1.0 - (TAU * i as f64 / n as f64).cos());
            v * w
        })
        .collect();
    let spec = power_spectrum(&windowed);
    spec.iter()
        .enumerate()
        .filter(|(k, _)| *k as f64 > band + 3.0)
        .map(|(_, &p)| p)
        .sum()
}
