//! Gaussian Fourier-feature input encodings, single- and multi-scale.
//!
//! A frequency matrix `B` (n rows, one per frequency, d columns) maps a
//! point `x` to `[sin(2π B x), cos(2π B x)]`. Several matrices sampled with
//! distinct standard deviations form a multiscale encoder; the network stack
//! is shared across scales, so every scale must produce the same width.

use crate::tensor::{Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::TAU;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncodingError {
    #[error("sampling std must be strictly positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("frequency count and input dim must be >= 1 (n={n}, d={d})")]
    EmptyMatrix { n: usize, d: usize },
    #[error("point has dim {got}, encoder expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("encoder needs at least one scale")]
    NoScales,
    #[error("scales disagree: {0}")]
    InconsistentScales(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Frequencies for one encoding scale, sampled i.i.d. from N(0, sigma^2).
///
/// The matrix is kept explicitly so that serialized models survive RNG
/// implementation changes; `(n, d, sigma, seed)` regenerate it bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqMatrix {
    b: Tensor,
    sigma: f64,
    seed: u64,
}

impl FreqMatrix {
    /// Sample an `n x d` frequency matrix. Deterministic per seed.
    pub fn sample(n: usize, d: usize, sigma: f64, seed: u64) -> Result<Self, EncodingError> {
        if sigma <= 0.0 {
            return Err(EncodingError::NonPositiveSigma(sigma));
        }
        if n == 0 || d == 0 {
            return Err(EncodingError::EmptyMatrix { n, d });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).expect("sigma checked positive");
        let data: Vec<f64> = (0..n * d).map(|_| normal.sample(&mut rng)).collect();
        Ok(FreqMatrix { b: Tensor::new(vec![n, d], data)?, sigma, seed })
    }

    /// Rebuild from an explicit matrix (checkpoint load path).
    pub fn from_matrix(b: Tensor, sigma: f64, seed: u64) -> Result<Self, EncodingError> {
        if sigma <= 0.0 {
            return Err(EncodingError::NonPositiveSigma(sigma));
        }
        if b.rank() != 2 || b.numel() == 0 {
            return Err(EncodingError::EmptyMatrix { n: b.rows(), d: b.cols() });
        }
        Ok(FreqMatrix { b, sigma, seed })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.b
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_freqs(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.b.shape()[1]
    }

    /// `[sin(2π B x), cos(2π B x)]`, length `2n`.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>, EncodingError> {
        let (n, d) = (self.num_freqs(), self.input_dim());
        if x.len() != d {
            return Err(EncodingError::DimMismatch { expected: d, got: x.len() });
        }
        let mut out = vec![0.0; 2 * n];
        for i in 0..n {
            let row = self.b.row(i);
            let phase = TAU * row.iter().zip(x).map(|(&b, &xi)| b * xi).sum::<f64>();
            out[i] = phase.sin();
            out[n + i] = phase.cos();
        }
        Ok(out)
    }
}

/// One branch of a multiscale encoder.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderScale {
    Fourier(FreqMatrix),
    /// Raw coordinate passthrough; the explicit alternative to a degenerate
    /// sigma = 0 Gaussian.
    Identity { dim: usize },
}

impl EncoderScale {
    pub fn input_dim(&self) -> usize {
        match self {
            EncoderScale::Fourier(fm) => fm.input_dim(),
            EncoderScale::Identity { dim } => *dim,
        }
    }

    pub fn output_width(&self) -> usize {
        match self {
            EncoderScale::Fourier(fm) => 2 * fm.num_freqs(),
            EncoderScale::Identity { dim } => *dim,
        }
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>, EncodingError> {
        match self {
            EncoderScale::Fourier(fm) => fm.encode(x),
            EncoderScale::Identity { dim } => {
                if x.len() != *dim {
                    return Err(EncodingError::DimMismatch { expected: *dim, got: x.len() });
                }
                Ok(x.to_vec())
            }
        }
    }
}

/// Ordered list of encoding scales sharing input dim and output width.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiscaleEncoder {
    scales: Vec<EncoderScale>,
}

impl MultiscaleEncoder {
    pub fn new(scales: Vec<EncoderScale>) -> Result<Self, EncodingError> {
        let first = scales.first().ok_or(EncodingError::NoScales)?;
        let (d, w) = (first.input_dim(), first.output_width());
        for s in &scales[1..] {
            if s.input_dim() != d {
                return Err(EncodingError::InconsistentScales(format!(
                    "input dims {} vs {}",
                    d,
                    s.input_dim()
                )));
            }
            if s.output_width() != w {
                return Err(EncodingError::InconsistentScales(format!(
                    "output widths {} vs {} (shared hidden layers need equal widths)",
                    w,
                    s.output_width()
                )));
            }
        }
        Ok(MultiscaleEncoder { scales })
    }

    /// Gaussian scales with `n` frequencies each, one per sigma. The per-scale
    /// seed is derived from `seed` and the scale index.
    pub fn gaussian(n: usize, d: usize, sigmas: &[f64], seed: u64) -> Result<Self, EncodingError> {
        let scales = sigmas
            .iter()
            .enumerate()
            .map(|(i, &s)| Ok(EncoderScale::Fourier(FreqMatrix::sample(n, d, s, scale_seed(seed, i))?)))
            .collect::<Result<Vec<_>, EncodingError>>()?;
        MultiscaleEncoder::new(scales)
    }

    pub fn scales(&self) -> &[EncoderScale] {
        &self.scales
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn input_dim(&self) -> usize {
        self.scales[0].input_dim()
    }

    pub fn output_width(&self) -> usize {
        self.scales[0].output_width()
    }

    /// Per-scale encodings of a single point, order-preserving.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<Vec<f64>>, EncodingError> {
        self.scales.iter().map(|s| s.encode(x)).collect()
    }

    /// Per-scale encodings of `points` (`[N, d]`), each `[N, width]`.
    pub fn encode_batch(&self, points: &Tensor) -> Result<Vec<Tensor>, EncodingError> {
        if points.rank() != 2 || points.shape()[1] != self.input_dim() {
            return Err(EncodingError::DimMismatch {
                expected: self.input_dim(),
                got: if points.rank() == 2 { points.shape()[1] } else { points.rank() },
            });
        }
        let n_pts = points.shape()[0];
        let w = self.output_width();
        let mut out = Vec::with_capacity(self.scales.len());
        for s in &self.scales {
            let mut data = Vec::with_capacity(n_pts * w);
            for i in 0..n_pts {
                data.extend_from_slice(&s.encode(points.row(i))?);
            }
            out.push(Tensor::new(vec![n_pts, w], data)?);
        }
        Ok(out)
    }
}

/// Per-scale seed derivation (splitmix-style, collision-free for small i).
pub fn scale_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let a = FreqMatrix::sample(64, 2, 1.0, 7).unwrap();
        let b = FreqMatrix::sample(64, 2, 1.0, 7).unwrap();
        assert_eq!(a.matrix().data(), b.matrix().data());
        let c = FreqMatrix::sample(64, 2, 1.0, 8).unwrap();
        assert_ne!(a.matrix().data(), c.matrix().data());
    }

    #[test]
    fn sample_std_matches_sigma() {
        let fm = FreqMatrix::sample(200, 50, 5.0, 1).unwrap();
        let data = fm.matrix().data();
        let mean: f64 = data.iter().sum::<f64>() / data.len() as f64;
        let var: f64 = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / data.len() as f64;
        let std = var.sqrt();
        assert!((4.5..=5.5).contains(&std), "sample std {std}");
    }

    #[test]
    fn nonpositive_sigma_rejected() {
        assert!(FreqMatrix::sample(4, 2, 0.0, 0).is_err());
        assert!(FreqMatrix::sample(4, 2, -1.0, 0).is_err());
    }

    #[test]
    fn zero_point_gives_zero_one_pattern() {
        let fm = FreqMatrix::sample(16, 3, 2.0, 3).unwrap();
        let e = fm.encode(&[0.0, 0.0, 0.0]).unwrap();
        assert!(e[..16].iter().all(|&v| v == 0.0));
        assert!(e[16..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identity_b_quarter_period() {
        // B = I (4x4), x = 0.25 everywhere: phases are all pi/2.
        let eye = Tensor::new(vec![4, 4], {
            let mut d = vec![0.0; 16];
            for i in 0..4 {
                d[i * 4 + i] = 1.0;
            }
            d
        })
        .unwrap();
        let fm = FreqMatrix::from_matrix(eye, 1.0, 0).unwrap();
        let e = fm.encode(&[0.25; 4]).unwrap();
        for &s in &e[..4] {
            assert!((s - 1.0).abs() < 1e-15);
        }
        for &c in &e[4..] {
            assert!(c.abs() < 1e-15);
        }
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let fm = FreqMatrix::sample(32, 5, 3.0, 11).unwrap();
        let x: Vec<f64> = (0..5).map(|i| 0.17 * i as f64 - 0.4).collect();
        let got = fm.encode(&x).unwrap();
        // Independent scalar loop.
        for i in 0..32 {
            let mut phase = 0.0;
            for j in 0..5 {
                phase += fm.matrix().at(i, j) * x[j];
            }
            phase *= TAU;
            assert!((got[i] - phase.sin()).abs() < 1e-12);
            assert!((got[32 + i] - phase.cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn encoded_values_bounded() {
        let fm = FreqMatrix::sample(64, 2, 10.0, 5).unwrap();
        for k in 0..100 {
            let x = [k as f64 * 0.37 - 18.0, k as f64 * -0.73 + 11.0];
            assert!(fm.encode(&x).unwrap().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn periodicity_under_integer_b() {
        // Integer B rows make x -> x + e1 a full-period shift.
        let b = Tensor::new(vec![3, 2], vec![1.0, 0.5, 2.0, -1.5, 3.0, 0.25]).unwrap();
        let fm = FreqMatrix::from_matrix(b, 1.0, 0).unwrap();
        let x = [0.123, -0.456];
        let shifted = [x[0] + 1.0, x[1]];
        let a = fm.encode(&x).unwrap();
        let c = fm.encode(&shifted).unwrap();
        for (u, v) in a.iter().zip(&c) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn multiscale_singleton_equals_encode() {
        let enc = MultiscaleEncoder::gaussian(8, 2, &[1.0], 9).unwrap();
        let x = [0.2, -0.7];
        let multi = enc.encode(&x).unwrap();
        assert_eq!(multi.len(), 1);
        let single = enc.scales()[0].encode(&x).unwrap();
        assert_eq!(multi[0], single);
    }

    #[test]
    fn airfoil_default_shapes() {
        // 64 frequencies per scale, scales sigma = [1, 5].
        let enc = MultiscaleEncoder::gaussian(64, 2, &[1.0, 5.0], 0).unwrap();
        assert_eq!(enc.num_scales(), 2);
        assert_eq!(enc.output_width(), 128);
        let e = enc.encode(&[0.0, 0.0]).unwrap();
        assert_eq!(e.len(), 2);
        for scale in &e {
            assert_eq!(scale.len(), 128);
            assert!(scale[..64].iter().all(|&v| v == 0.0));
            assert!(scale[64..].iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn mixed_widths_rejected() {
        let f = EncoderScale::Fourier(FreqMatrix::sample(8, 2, 1.0, 0).unwrap());
        let id = EncoderScale::Identity { dim: 2 };
        assert!(MultiscaleEncoder::new(vec![f, id]).is_err());
    }

    #[test]
    fn batch_encoding_matches_pointwise() {
        let enc = MultiscaleEncoder::gaussian(8, 3, &[1.0, 5.0], 4).unwrap();
        let pts = Tensor::new(vec![4, 3], (0..12).map(|i| i as f64 * 0.1 - 0.5).collect()).unwrap();
        let batches = enc.encode_batch(&pts).unwrap();
        for (si, batch) in batches.iter().enumerate() {
            for r in 0..4 {
                let single = enc.scales()[si].encode(pts.row(r)).unwrap();
                assert_eq!(batch.row(r), &single[..]);
            }
        }
    }
}
