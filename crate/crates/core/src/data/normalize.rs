//! Featurewise standardization to zero mean, unit variance.

use super::DataError;
use crate::tensor::Tensor;

/// Per-column mean and standard deviation. Constant columns get std = 1 and
/// are listed in `constant_features`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub constant_features: Vec<usize>,
}

const STD_FLOOR: f64 = 1e-12;

impl Normalizer {
    /// Fit from row-major `[N, w]` blocks (population statistics).
    pub fn fit<'a>(blocks: impl IntoIterator<Item = &'a Tensor>) -> Result<Self, DataError> {
        let mut width = None;
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sumsq: Vec<f64> = Vec::new();
        for block in blocks {
            if block.rank() != 2 {
                return Err(DataError::Invalid(format!(
                    "normalizer expects [N, w] blocks, got {:?}",
                    block.shape()
                )));
            }
            let w = block.shape()[1];
            match width {
                None => {
                    width = Some(w);
                    sum = vec![0.0; w];
                    sumsq = vec![0.0; w];
                }
                Some(prev) if prev != w => {
                    return Err(DataError::Invalid(format!(
                        "normalizer blocks disagree on width: {prev} vs {w}"
                    )));
                }
                _ => {}
            }
            for r in 0..block.shape()[0] {
                for (j, &v) in block.row(r).iter().enumerate() {
                    sum[j] += v;
                    sumsq[j] += v * v;
                }
            }
            count += block.shape()[0];
        }
        let w = width.ok_or_else(|| DataError::Invalid("normalizer fit on no blocks".into()))?;
        if count == 0 {
            return Err(DataError::Invalid("normalizer fit on zero rows".into()));
        }
        let mut mean = vec![0.0; w];
        let mut std = vec![0.0; w];
        let mut constant = Vec::new();
        for j in 0..w {
            mean[j] = sum[j] / count as f64;
            let var = (sumsq[j] / count as f64 - mean[j] * mean[j]).max(0.0);
            let s = var.sqrt();
            if s < STD_FLOOR {
                std[j] = 1.0;
                constant.push(j);
            } else {
                std[j] = s;
            }
        }
        Ok(Normalizer { mean, std, constant_features: constant })
    }

    pub fn identity(width: usize) -> Self {
        Normalizer { mean: vec![0.0; width], std: vec![1.0; width], constant_features: vec![] }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, x: &Tensor) -> Result<Tensor, DataError> {
        self.apply(x, |v, m, s| (v - m) / s)
    }

    pub fn inverse(&self, x: &Tensor) -> Result<Tensor, DataError> {
        self.apply(x, |v, m, s| v * s + m)
    }

    pub fn transform_row(&self, row: &[f64]) -> Result<Vec<f64>, DataError> {
        if row.len() != self.width() {
            return Err(DataError::Invalid(format!(
                "row width {} vs normalizer width {}",
                row.len(),
                self.width()
            )));
        }
        Ok(row
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| (v - m) / s)
            .collect())
    }

    fn apply(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor, DataError> {
        if x.rank() != 2 || x.shape()[1] != self.width() {
            return Err(DataError::Invalid(format!(
                "tensor {:?} vs normalizer width {}",
                x.shape(),
                self.width()
            )));
        }
        let w = self.width();
        let mut data = Vec::with_capacity(x.numel());
        for r in 0..x.shape()[0] {
            for (j, &v) in x.row(r).iter().enumerate() {
                data.push(f(v, self.mean[j], self.std[j]));
            }
        }
        Ok(Tensor::new(vec![x.shape()[0], w], data).expect("same shape"))
    }
}
