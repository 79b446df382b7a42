//! Fitting one unconditioned field (no latent, no hypernetwork); the
//! workhorse of the frequency-scale studies.

use super::{PipelineError, TrainReport};
use crate::data::Normalizer;
use crate::encoding::{EncoderScale, MultiscaleEncoder};
use crate::field::{FieldVars, NeuralField};
use crate::tensor::{AdamState, Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SingleFitCfg {
    pub hidden: Vec<usize>,
    pub n_freqs: usize,
    /// Gaussian scale stds; empty list means a raw-coordinate identity scale.
    pub sigmas: Vec<f64>,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SingleFitCfg {
    fn default() -> Self {
        SingleFitCfg {
            hidden: vec![64, 64, 64],
            n_freqs: 64,
            sigmas: vec![1.0, 5.0],
            epochs: 2000,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// A trained single-signal model together with its normalization.
#[derive(Debug, Clone)]
pub struct SingleFieldModel {
    pub field: NeuralField,
    pub input_norm: Normalizer,
    pub target_norm: Normalizer,
}

impl SingleFieldModel {
    /// Predictions in normalized target units.
    pub fn predict_normalized(&self, points_raw: &Tensor) -> Result<Tensor, PipelineError> {
        let x = self.input_norm.transform(points_raw)?;
        let phis: Vec<Tensor> =
            self.field.modulation_widths().iter().map(|&w| Tensor::zeros(&[w])).collect();
        Ok(self.field.query_field(&x, &phis)?)
    }

    /// Predictions in physical units.
    pub fn predict(&self, points_raw: &Tensor) -> Result<Tensor, PipelineError> {
        Ok(self.target_norm.inverse(&self.predict_normalized(points_raw)?)?)
    }
}

/// Full-batch Adam fit of a single field sample.
pub fn fit_single_field(
    points_raw: &Tensor,
    targets_raw: &Tensor,
    cfg: &SingleFitCfg,
) -> Result<(SingleFieldModel, TrainReport), PipelineError> {
    if points_raw.rank() != 2 || targets_raw.rank() != 2
        || points_raw.shape()[0] != targets_raw.shape()[0]
    {
        return Err(PipelineError::Config(format!(
            "points {:?} and targets {:?} must be row-aligned rank-2 tensors",
            points_raw.shape(),
            targets_raw.shape()
        )));
    }
    let d = points_raw.shape()[1];
    let d_u = targets_raw.shape()[1];
    let input_norm = Normalizer::fit([points_raw])?;
    let target_norm = Normalizer::fit([targets_raw])?;
    let x = input_norm.transform(points_raw)?;
    let y = target_norm.transform(targets_raw)?;

    let encoder = if cfg.sigmas.is_empty() {
        MultiscaleEncoder::new(vec![EncoderScale::Identity { dim: d }])?
    } else {
        MultiscaleEncoder::gaussian(cfg.n_freqs, d, &cfg.sigmas, cfg.seed)?
    };
    let mut field = NeuralField::init(encoder, &cfg.hidden, d_u, cfg.seed.wrapping_add(1))?;

    // The points never move, so the encodings are fixed for the whole fit.
    let encodings = field.encoder.encode_batch(&x)?;
    let mut params = field.params();
    let mut adam = AdamState::new(&params);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|p| tape.var(p.clone())).collect();
        let fv = FieldVars::from_param_vars(&vars, field.encoder.num_scales());
        let enc_vars: Vec<_> = encodings.iter().map(|e| tape.constant(e.clone())).collect();
        let (loss, grads) = (|| -> Result<_, PipelineError> {
            let pred = fv.forward(&mut tape, &enc_vars, None)?;
            let tgt = tape.constant(y.clone());
            let loss = tape.mse(pred, tgt)?;
            let value = tape.value(loss).item();
            let grads = tape.grad(loss, &vars)?;
            Ok((value, grads))
        })()
        .map_err(|e| PipelineError::Training {
            epoch,
            sample: "signal".into(),
            detail: e.to_string(),
        })?;
        // Cosine decay to lr/25 settles each model at its own floor.
        let t = epoch as f64 / cfg.epochs.max(1) as f64;
        let lr = cfg.lr * (0.02 + 0.98 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()));
        adam.update(&mut params, &grads, lr)?;
        history.push(loss);
    }
    field.set_params(&params);
    Ok((
        SingleFieldModel { field, input_norm, target_norm },
        TrainReport { train_history: history, val_history: vec![], best_epoch: None },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fits_a_low_frequency_signal() {
        let n = 128;
        let xs = Tensor::new(vec![n, 1], (0..n).map(|i| i as f64 / n as f64).collect()).unwrap();
        let ys = Tensor::new(
            vec![n, 1],
            (0..n).map(|i| (std::f64::consts::TAU * 2.0 * i as f64 / n as f64).sin()).collect(),
        )
        .unwrap();
        let cfg = SingleFitCfg {
            hidden: vec![32, 32],
            n_freqs: 16,
            sigmas: vec![1.0],
            epochs: 600,
            lr: 3e-3,
            seed: 0,
        };
        let (model, report) = fit_single_field(&xs, &ys, &cfg).unwrap();
        let final_loss = *report.train_history.last().unwrap();
        assert!(final_loss < 5e-3, "final training mse {final_loss}");
        // Held-out points between grid nodes.
        let qs = Tensor::new(vec![64, 1], (0..64).map(|i| (i as f64 + 0.5) / 64.0).collect())
            .unwrap();
        let pred = model.predict(&qs).unwrap();
        let mut err = 0.0f64;
        for r in 0..64 {
            let x = qs.at(r, 0);
            let truth = (std::f64::consts::TAU * 2.0 * x).sin();
            err = err.max((pred.at(r, 0) - truth).abs());
        }
        assert!(err < 0.25, "max held-out error {err}");
    }

    #[test]
    fn identity_scale_variant_trains() {
        let n = 64;
        let xs = Tensor::new(vec![n, 1], (0..n).map(|i| i as f64 / n as f64).collect()).unwrap();
        let ys = xs.map(|x| 2.0 * x - 0.5);
        let cfg = SingleFitCfg {
            hidden: vec![16, 16],
            n_freqs: 0,
            sigmas: vec![],
            epochs: 300,
            lr: 1e-2,
            seed: 1,
        };
        let (_, report) = fit_single_field(&xs, &ys, &cfg).unwrap();
        assert!(*report.train_history.last().unwrap() < 1e-2);
    }
}
