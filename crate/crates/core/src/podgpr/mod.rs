//! Classical reduced-order baseline: truncated POD of the snapshot matrix
//! plus Gaussian-process regression of the modal coefficients. Fixed mesh
//! only; every snapshot must live on the same node set.

mod gpr;
mod linalg;
mod pod;

pub use gpr::{fit_gpr, GprConfig, GprModel, NoiseMode, MAX_JITTER};
pub use pod::{fit_pod, PodBasis};

use crate::data::{checkpoint, Container, DataError, Normalizer};
use crate::tensor::Tensor;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PodGprError {
    #[error("dimension error: {0}")]
    Dim(String),
    #[error("kernel matrix not positive definite after jitter {jitter}")]
    NonPdKernel { jitter: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// POD basis + GP regressor from parameters to modal coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct PodGpr {
    pub basis: PodBasis,
    pub gpr: GprModel,
    pub mu_norm: Normalizer,
}

#[derive(Debug, Clone)]
pub struct PodGprPrediction {
    pub field: Vec<f64>,
    /// Shared posterior variance of the latent coefficients.
    pub coeff_variance: f64,
    /// Diagonal field variance from propagating the coefficient variance.
    pub field_variance: Vec<f64>,
    /// Set when the query lies more than three lengthscales outside the
    /// training hull in any input dimension.
    pub outside_hull: bool,
}

/// Fit the full baseline: `snapshots` is `[M, N]` (one field per row, all on
/// the same mesh), `mus` is `[M, d_p]` raw parameters.
pub fn fit_pod_gpr(
    snapshots: &Tensor,
    mus: &Tensor,
    num_modes: usize,
    cfg: &GprConfig,
) -> Result<PodGpr, PodGprError> {
    if snapshots.rank() != 2 || mus.rank() != 2 || snapshots.shape()[0] != mus.shape()[0] {
        return Err(PodGprError::Dim(format!(
            "snapshots {:?} vs parameters {:?}",
            snapshots.shape(),
            mus.shape()
        )));
    }
    let basis = fit_pod(snapshots, num_modes)?;
    let m = snapshots.shape()[0];
    let r = basis.num_modes();
    let mut coeffs = Vec::with_capacity(m * r);
    for i in 0..m {
        coeffs.extend(basis.project(snapshots.row(i))?);
    }
    let targets = Tensor::new(vec![m, r], coeffs).expect("sized");
    let mu_norm = Normalizer::fit([mus])?;
    let x = mu_norm.transform(mus)?;
    let gpr = fit_gpr(&x, &targets, cfg)?;
    Ok(PodGpr { basis, gpr, mu_norm })
}

impl PodGpr {
    pub fn predict(&self, mu_raw: &[f64]) -> Result<PodGprPrediction, PodGprError> {
        let x = self
            .mu_norm
            .transform_row(mu_raw)
            .map_err(|e| PodGprError::Dim(e.to_string()))?;
        let outside_hull = self.outside_hull(&x);
        let (coeffs, var) = self.gpr.predict(&x)?;
        let field = self.basis.reconstruct(&coeffs)?;
        let n = self.basis.field_len();
        let r = self.basis.num_modes();
        let mut field_variance = vec![0.0; n];
        for (i, fv) in field_variance.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..r {
                let m = self.basis.modes.at(i, j);
                acc += m * m;
            }
            *fv = var * acc;
        }
        Ok(PodGprPrediction { field, coeff_variance: var, field_variance, outside_hull })
    }

    fn outside_hull(&self, x: &[f64]) -> bool {
        let m = self.gpr.x_train.shape()[0];
        let d = self.gpr.x_train.shape()[1];
        for k in 0..d {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for i in 0..m {
                let v = self.gpr.x_train.at(i, k);
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let margin = 3.0 * self.gpr.lengthscales[k];
            if x[k] < lo - margin || x[k] > hi + margin {
                return true;
            }
        }
        false
    }

    pub fn to_container(&self) -> Result<Container, DataError> {
        let mut c = Container::new();
        c.push_f64("pod/mean", vec![self.basis.mean.len()], self.basis.mean.clone())?;
        c.push_tensor("pod/modes", &self.basis.modes)?;
        c.push_f64(
            "pod/singular_values",
            vec![self.basis.singular_values.len()],
            self.basis.singular_values.clone(),
        )?;
        c.push_u32("pod/truncated", vec![1], vec![self.basis.truncated_to_rank as u32])?;
        c.push_f64(
            "gpr/lengthscales",
            vec![self.gpr.lengthscales.len()],
            self.gpr.lengthscales.clone(),
        )?;
        c.push_f64("gpr/signal_var", vec![1], vec![self.gpr.signal_var])?;
        c.push_f64("gpr/noise_var", vec![1], vec![self.gpr.noise_var])?;
        c.push_f64("gpr/jitter", vec![1], vec![self.gpr.jitter])?;
        c.push_tensor("gpr/x_train", &self.gpr.x_train)?;
        let m = self.gpr.x_train.shape()[0];
        c.push_f64("gpr/chol", vec![m, m], self.gpr.chol.clone())?;
        c.push_tensor("gpr/weights", &self.gpr.weights)?;
        checkpoint::put_normalizer(&mut c, "norm/mu", &self.mu_norm)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self, DataError> {
        Ok(PodGpr {
            basis: PodBasis {
                mean: c.tensor("pod/mean")?.data().to_vec(),
                modes: c.tensor("pod/modes")?,
                singular_values: c.tensor("pod/singular_values")?.data().to_vec(),
                truncated_to_rank: c.u32s("pod/truncated")?[0] != 0,
            },
            gpr: GprModel {
                lengthscales: c.tensor("gpr/lengthscales")?.data().to_vec(),
                signal_var: c.tensor("gpr/signal_var")?.item(),
                noise_var: c.tensor("gpr/noise_var")?.item(),
                jitter: c.tensor("gpr/jitter")?.item(),
                x_train: c.tensor("gpr/x_train")?,
                chol: c.tensor("gpr/chol")?.data().to_vec(),
                weights: c.tensor("gpr/weights")?,
            },
            mu_norm: checkpoint::get_normalizer(c, "norm/mu")?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        self.to_container()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        Self::from_container(&Container::read(path)?)
    }
}
