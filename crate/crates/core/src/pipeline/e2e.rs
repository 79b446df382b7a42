//! End-to-end framework: the hypernetwork consumes the raw parameter vector
//! and the whole model trains by minimizing the pointwise loss over samples
//! and coordinates, with per-epoch dynamic subsampling.

use super::{dynamic_subsample, map_indexed, PipelineError, PreparedSample, TrainConfig, TrainReport};
use crate::data::{checkpoint, Container, DataError, Normalizer};
use crate::encoding::MultiscaleEncoder;
use crate::field::{hypernet_forward, FieldVars, Hypernetwork, LinearVars, NeuralField, Activation};
use crate::tensor::{AdamState, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Architecture of an end-to-end model (paper-default values).
#[derive(Debug, Clone, PartialEq)]
pub struct E2eModelCfg {
    pub hidden: Vec<usize>,
    pub n_freqs: usize,
    pub sigmas: Vec<f64>,
    pub hyper_hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for E2eModelCfg {
    fn default() -> Self {
        E2eModelCfg {
            hidden: vec![128, 128, 128, 128],
            n_freqs: 64,
            sigmas: vec![1.0, 5.0],
            hyper_hidden: vec![128, 128],
            seed: 0,
        }
    }
}

/// Field network + hypernetwork conditioned directly on parameters, plus the
/// train-split normalization it was fitted with.
#[derive(Debug, Clone, PartialEq)]
pub struct EndToEndModel {
    pub field: NeuralField,
    pub hyper: Hypernetwork,
    pub input_norm: Normalizer,
    pub mu_norm: Normalizer,
    pub target_norm: Normalizer,
}

impl EndToEndModel {
    pub fn init(
        cfg: &E2eModelCfg,
        input_norm: Normalizer,
        mu_norm: Normalizer,
        target_norm: Normalizer,
    ) -> Result<Self, PipelineError> {
        let d_coord = input_norm.width();
        let d_p = mu_norm.width();
        let d_u = target_norm.width();
        if d_p == 0 {
            return Err(PipelineError::Config(
                "end-to-end model needs at least one conditioning parameter".into(),
            ));
        }
        let encoder = MultiscaleEncoder::gaussian(cfg.n_freqs, d_coord, &cfg.sigmas, cfg.seed)?;
        let field = NeuralField::init(encoder, &cfg.hidden, d_u, cfg.seed.wrapping_add(1))?;
        let hyper = Hypernetwork::init(
            d_p,
            &cfg.hyper_hidden,
            field.modulation_widths(),
            Activation::Relu,
            cfg.seed.wrapping_add(2),
        );
        Ok(EndToEndModel { field, hyper, input_norm, mu_norm, target_norm })
    }

    /// Flat parameter list: field parameters then hypernetwork parameters.
    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.field.params();
        p.extend(self.hyper.params());
        p
    }

    pub fn set_params(&mut self, params: &[Tensor]) {
        let nf = self.field.num_params();
        self.field.set_params(&params[..nf]);
        self.hyper.set_params(&params[nf..]);
    }

    /// Scalar loss of one prepared sample on a tape. `pvars` lists the
    /// parameters in [`Self::params`] order.
    fn loss_on_tape(
        &self,
        tape: &mut Tape,
        pvars: &[Var],
        encodings: &[Tensor],
        mu: &[f64],
        targets: &Tensor,
    ) -> Result<Var, PipelineError> {
        let nf = self.field.num_params();
        let fv = FieldVars::from_param_vars(&pvars[..nf], self.field.encoder.num_scales());
        let hv: LinearVars = pvars[nf..].chunks(2).map(|c| (c[0], c[1])).collect();
        let cond = tape.constant(Tensor::new(vec![1, mu.len()], mu.to_vec())?);
        let phis = hypernet_forward(
            tape,
            &hv,
            self.hyper.activation,
            &self.field.modulation_widths(),
            cond,
        )?;
        let enc_vars: Vec<Var> = encodings.iter().map(|e| tape.constant(e.clone())).collect();
        let pred = fv.forward(tape, &enc_vars, Some(&phis))?;
        let tgt = tape.constant(targets.clone());
        Ok(tape.mse(pred, tgt)?)
    }

    fn sample_loss_and_grads(
        &self,
        sample: &PreparedSample,
    ) -> Result<(f64, Vec<Tensor>), PipelineError> {
        let params = self.params();
        let encodings = self.field.encoder.encode_batch(&sample.inputs)?;
        let mut tape = Tape::new();
        let pvars: Vec<Var> = params.iter().map(|p| tape.var(p.clone())).collect();
        let loss = self.loss_on_tape(&mut tape, &pvars, &encodings, &sample.mu, &sample.targets)?;
        let value = tape.value(loss).item();
        let grads = tape.grad(loss, &pvars)?;
        Ok((value, grads))
    }

    /// Loss of one prepared sample without gradients.
    pub fn sample_loss(&self, sample: &PreparedSample) -> Result<f64, PipelineError> {
        let params = self.params();
        let encodings = self.field.encoder.encode_batch(&sample.inputs)?;
        let mut tape = Tape::new();
        let pvars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = self.loss_on_tape(&mut tape, &pvars, &encodings, &sample.mu, &sample.targets)?;
        Ok(tape.value(loss).item())
    }

    /// Field prediction in normalized units for raw points and parameters.
    pub fn predict_normalized(
        &self,
        points_raw: &Tensor,
        mu_raw: &[f64],
    ) -> Result<Tensor, PipelineError> {
        let x = self.input_norm.transform(points_raw)?;
        let mu = self.mu_norm.transform_row(mu_raw)?;
        let phis = self.hyper.modulations(&mu)?;
        Ok(self.field.query_field(&x, &phis)?)
    }

    /// Field prediction in physical units.
    pub fn predict(&self, points_raw: &Tensor, mu_raw: &[f64]) -> Result<Tensor, PipelineError> {
        Ok(self.target_norm.inverse(&self.predict_normalized(points_raw, mu_raw)?)?)
    }

    pub fn to_container(&self) -> Result<Container, DataError> {
        let mut c = Container::new();
        checkpoint::put_field(&mut c, "field", &self.field)?;
        checkpoint::put_hypernet(&mut c, "hyper", &self.hyper)?;
        checkpoint::put_normalizer(&mut c, "norm/input", &self.input_norm)?;
        checkpoint::put_normalizer(&mut c, "norm/mu", &self.mu_norm)?;
        checkpoint::put_normalizer(&mut c, "norm/target", &self.target_norm)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self, DataError> {
        Ok(EndToEndModel {
            field: checkpoint::get_field(c, "field")?,
            hyper: checkpoint::get_hypernet(c, "hyper")?,
            input_norm: checkpoint::get_normalizer(c, "norm/input")?,
            mu_norm: checkpoint::get_normalizer(c, "norm/mu")?,
            target_norm: checkpoint::get_normalizer(c, "norm/target")?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        self.to_container()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Train by summed per-sample MSE over shuffled mini-batches, resampling
/// each sample's points at the start of every epoch.
pub fn train_end_to_end(
    model: &mut EndToEndModel,
    train: &[PreparedSample],
    val: Option<&[PreparedSample]>,
    cfg: &TrainConfig,
) -> Result<TrainReport, PipelineError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(PipelineError::Config("end-to-end training set is empty".into()));
    }
    let mut params = model.params();
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;

    for epoch in 0..cfg.epochs {
        // Dynamic downsampling at the beginning of the epoch.
        let resolved: Vec<PreparedSample> = train
            .iter()
            .map(|s| match cfg.training_resolution {
                Some(r) => dynamic_subsample(s, r.min(s.num_points()), &mut rng),
                None => Ok(s.clone()),
            })
            .collect::<Result<_, _>>()?;
        let mut order: Vec<usize> = (0..resolved.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            model.set_params(&params);
            let per_sample = map_indexed(batch.len(), cfg.threads, |bi| {
                model.sample_loss_and_grads(&resolved[batch[bi]])
            })
            .map_err(|e| match e {
                PipelineError::Tensor(t) => PipelineError::Training {
                    epoch,
                    sample: resolved[batch[0]].id.clone(),
                    detail: t.to_string(),
                },
                other => other,
            })?;
            let mut grad_sum: Option<Vec<Tensor>> = None;
            for (bi, (loss, grads)) in per_sample.into_iter().enumerate() {
                if !loss.is_finite() {
                    return Err(PipelineError::Training {
                        epoch,
                        sample: resolved[batch[bi]].id.clone(),
                        detail: "non-finite loss".into(),
                    });
                }
                epoch_loss += loss;
                grad_sum = Some(match grad_sum {
                    None => grads,
                    Some(mut acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                        acc
                    }
                });
            }
            adam.update(&mut params, &grad_sum.expect("non-empty batch"), cfg.lr)?;
        }
        report.train_history.push(epoch_loss / train.len() as f64);

        if let Some(val_set) = val {
            model.set_params(&params);
            let losses = map_indexed(val_set.len(), cfg.threads, |i| {
                model.sample_loss(&val_set[i])
            })?;
            let val_loss = losses.iter().sum::<f64>() / val_set.len() as f64;
            report.val_history.push(val_loss);
            let improved = best.as_ref().map_or(true, |(b, _, _)| val_loss < *b);
            if improved {
                best = Some((val_loss, epoch, params.clone()));
            }
            if let Some(patience) = cfg.patience {
                let best_epoch = best.as_ref().map(|(_, e, _)| *e).unwrap_or(0);
                if epoch - best_epoch >= patience {
                    break;
                }
            }
        }
    }

    if let Some((_, epoch, best_params)) = best {
        params = best_params;
        report.best_epoch = Some(epoch);
    }
    model.set_params(&params);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_sample(c: f64, n: usize) -> PreparedSample {
        PreparedSample {
            id: format!("c{c}"),
            shape_id: "fixed".into(),
            inputs: Tensor::new(vec![n, 2], (0..2 * n).map(|i| (i as f64 * 0.37).sin()).collect())
                .unwrap(),
            targets: Tensor::filled(&[n, 1], c),
            mu: vec![c],
        }
    }

    fn tiny_model() -> EndToEndModel {
        let cfg = E2eModelCfg {
            hidden: vec![16, 16],
            n_freqs: 8,
            sigmas: vec![1.0],
            hyper_hidden: vec![8],
            seed: 7,
        };
        EndToEndModel::init(
            &cfg,
            Normalizer::identity(2),
            Normalizer::identity(1),
            Normalizer::identity(1),
        )
        .unwrap()
    }

    #[test]
    fn single_constant_sample_is_memorized() {
        // A constant field is representable through the output bias alone.
        let mut model = tiny_model();
        let sample = constant_sample(0.75, 10);
        let cfg = TrainConfig {
            epochs: 2000,
            batch_size: 1,
            lr: 3e-3,
            ..Default::default()
        };
        let report = train_end_to_end(&mut model, &[sample.clone()], None, &cfg).unwrap();
        let final_loss = *report.train_history.last().unwrap();
        assert!(final_loss < 1e-6, "final training mse {final_loss}");
        let pred = model.predict_normalized(&sample.inputs, &sample.mu).unwrap();
        for r in 0..sample.num_points() {
            assert!((pred.at(r, 0) - 0.75).abs() < 5e-3);
        }
    }

    #[test]
    fn loss_invariant_to_sample_order_within_batch() {
        let model = tiny_model();
        let samples = vec![constant_sample(0.2, 6), constant_sample(-0.4, 6), constant_sample(0.9, 6)];
        let forward: f64 = samples.iter().map(|s| model.sample_loss(s).unwrap()).sum();
        let reversed: f64 =
            samples.iter().rev().map(|s| model.sample_loss(s).unwrap()).sum();
        assert_eq!(forward, reversed);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let mut model = tiny_model();
        assert!(matches!(
            train_end_to_end(&mut model, &[], None, &TrainConfig::default()),
            Err(PipelineError::Config(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let model = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e2e.nfsb");
        model.save(&path).unwrap();
        let back = EndToEndModel::load(&path).unwrap();
        assert_eq!(back, model);
        let pts = Tensor::new(vec![2, 2], vec![0.3, -0.2, 0.8, 0.1]).unwrap();
        let a = model.predict(&pts, &[0.4]).unwrap();
        let b = back.predict(&pts, &[0.4]).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn threaded_training_matches_serial() {
        let samples = vec![
            constant_sample(0.3, 8),
            constant_sample(-0.2, 8),
            constant_sample(0.6, 8),
            constant_sample(0.1, 8),
        ];
        let cfg_base = TrainConfig { epochs: 5, batch_size: 4, lr: 1e-3, ..Default::default() };
        let mut m1 = tiny_model();
        let r1 = train_end_to_end(&mut m1, &samples, None, &cfg_base).unwrap();
        let mut m2 = tiny_model();
        let cfg_threaded = TrainConfig { threads: 3, ..cfg_base };
        let r2 = train_end_to_end(&mut m2, &samples, None, &cfg_threaded).unwrap();
        assert_eq!(r1.train_history, r2.train_history);
        assert_eq!(m1.params().last().unwrap().data(), m2.params().last().unwrap().data());
    }
}
