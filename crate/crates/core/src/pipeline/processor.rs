//! Latent-space regression: residual SiLU MLP mapping (z_in, mu) to z_out,
//! trained with early stopping on validation loss.

use super::latent::{latent_matrices, LatentPair};
use super::{PipelineError, TrainConfig, TrainReport};
use crate::data::{checkpoint, Container, DataError, Normalizer};
use crate::field::{residual_forward, Activation, ResidualMlp};
use crate::tensor::{AdamState, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct ProcessorCfg {
    /// Hidden widths between the `d_z_in + d_p` input and `d_z_out` output.
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for ProcessorCfg {
    fn default() -> Self {
        ProcessorCfg { hidden: vec![128, 128, 128], seed: 0 }
    }
}

/// Trained latent processor plus the parameter normalizer it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct Processor {
    pub mlp: ResidualMlp,
    pub mu_norm: Normalizer,
    pub d_z_in: usize,
    pub d_z_out: usize,
}

impl Processor {
    pub fn init(
        cfg: &ProcessorCfg,
        d_z_in: usize,
        d_z_out: usize,
        mu_norm: Normalizer,
    ) -> Self {
        let mut dims = Vec::with_capacity(cfg.hidden.len() + 2);
        dims.push(d_z_in + mu_norm.width());
        dims.extend_from_slice(&cfg.hidden);
        dims.push(d_z_out);
        Processor {
            mlp: ResidualMlp::init(&dims, Activation::Silu, cfg.seed),
            mu_norm,
            d_z_in,
            d_z_out,
        }
    }

    /// Map a geometry latent and raw parameters to the output latent.
    pub fn predict(&self, z_in: &[f64], mu_raw: &[f64]) -> Result<Vec<f64>, PipelineError> {
        if z_in.len() != self.d_z_in {
            return Err(PipelineError::Config(format!(
                "z_in has dim {}, processor expects {}",
                z_in.len(),
                self.d_z_in
            )));
        }
        let mut input = z_in.to_vec();
        input.extend(self.mu_norm.transform_row(mu_raw)?);
        Ok(self.mlp.forward(&input)?)
    }

    pub fn to_container(&self) -> Result<Container, DataError> {
        let mut c = Container::new();
        checkpoint::put_mlp(&mut c, "mlp", &self.mlp)?;
        checkpoint::put_normalizer(&mut c, "norm/mu", &self.mu_norm)?;
        c.push_u32("dims", vec![2], vec![self.d_z_in as u32, self.d_z_out as u32])?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self, DataError> {
        let dims = c.u32s("dims")?;
        Ok(Processor {
            mlp: checkpoint::get_mlp(c, "mlp")?,
            mu_norm: checkpoint::get_normalizer(c, "norm/mu")?,
            d_z_in: dims[0] as usize,
            d_z_out: dims[1] as usize,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        self.to_container()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        Self::from_container(&Container::read(path)?)
    }
}

fn batch_loss_and_grads(
    proc: &Processor,
    params: &[Tensor],
    xs: &Tensor,
    ys: &Tensor,
    with_grads: bool,
) -> Result<(f64, Option<Vec<Tensor>>), PipelineError> {
    let mut tape = Tape::new();
    let vars: Vec<_> = if with_grads {
        params.iter().map(|p| tape.var(p.clone())).collect()
    } else {
        params.iter().map(|p| tape.constant(p.clone())).collect()
    };
    let layers = vars.chunks(2).map(|c| (c[0], c[1])).collect::<Vec<_>>();
    let x = tape.constant(xs.clone());
    let pred = residual_forward(&mut tape, &layers, proc.mlp.activation, x)?;
    let tgt = tape.constant(ys.clone());
    let loss = tape.mse(pred, tgt)?;
    let value = tape.value(loss).item();
    let grads = if with_grads { Some(tape.grad(loss, &vars)?) } else { None };
    Ok((value, grads))
}

/// Minimize latent-space MSE with Adam; an optional validation set drives
/// early stopping (patience) and best-parameter restoration.
pub fn train_processor(
    proc: &mut Processor,
    train: &[LatentPair],
    val: Option<&[LatentPair]>,
    cfg: &TrainConfig,
) -> Result<TrainReport, PipelineError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(PipelineError::Config("latent training set is empty".into()));
    }
    let (xs, ys) = latent_matrices(train, &proc.mu_norm)?;
    let val_mats = match val {
        Some(v) if !v.is_empty() => Some(latent_matrices(v, &proc.mu_norm)?),
        _ => None,
    };
    let n = train.len();
    let mut params = proc.mlp.params();
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let d_in = xs.shape()[1];
    let d_out = ys.shape()[1];

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let bx: Vec<f64> = chunk.iter().flat_map(|&i| xs.row(i).to_vec()).collect();
            let by: Vec<f64> = chunk.iter().flat_map(|&i| ys.row(i).to_vec()).collect();
            let bx = Tensor::new(vec![chunk.len(), d_in], bx)?;
            let by = Tensor::new(vec![chunk.len(), d_out], by)?;
            let (loss, grads) = batch_loss_and_grads(proc, &params, &bx, &by, true)
                .map_err(|e| PipelineError::Training {
                    epoch,
                    sample: format!("batch[{}..]", chunk[0]),
                    detail: e.to_string(),
                })?;
            adam.update(&mut params, &grads.expect("grads requested"), cfg.lr)?;
            epoch_loss += loss;
            batches += 1;
        }
        report.train_history.push(epoch_loss / batches as f64);

        if let Some((vx, vy)) = &val_mats {
            let (val_loss, _) = batch_loss_and_grads(proc, &params, vx, vy, false)?;
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
    proc.mlp.set_params(&params);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn linear_teacher(n: usize, seed: u64) -> Vec<LatentPair> {
        // z_out = A [z_in; mu], a linear map the processor must recover.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (0..n)
            .map(|i| {
                let z_in: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let mu = vec![rng.gen_range(0.0..1.0)];
                let full: Vec<f64> = z_in.iter().chain(&mu).copied().collect();
                let z_out: Vec<f64> = (0..3)
                    .map(|r| (0..4).map(|c| a[r * 4 + c] * full[c]).sum())
                    .collect();
                LatentPair {
                    sample_id: format!("p{i}"),
                    shape_id: format!("sh{}", i % 5),
                    z_in,
                    mu,
                    z_out,
                }
            })
            .collect()
    }

    #[test]
    fn recovers_linear_latent_map() {
        let pairs = linear_teacher(160, 3);
        let (train, val) = pairs.split_at(128);
        let mu_block = Tensor::new(
            vec![train.len(), 1],
            train.iter().map(|p| p.mu[0]).collect(),
        )
        .unwrap();
        let mu_norm = Normalizer::fit([&mu_block]).unwrap();
        let mut proc =
            Processor::init(&ProcessorCfg { hidden: vec![32, 32], seed: 1 }, 3, 3, mu_norm);
        let cfg = TrainConfig {
            epochs: 1000,
            batch_size: 32,
            lr: 3e-3,
            patience: Some(200),
            ..Default::default()
        };
        let report = train_processor(&mut proc, train, Some(val), &cfg).unwrap();
        let best_val = report.val_history.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(best_val < 1e-4, "validation mse {best_val}");
    }

    #[test]
    fn single_pair_is_memorized() {
        let pairs = linear_teacher(1, 9);
        let mu_norm = Normalizer::identity(1);
        let mut proc =
            Processor::init(&ProcessorCfg { hidden: vec![16, 16], seed: 2 }, 3, 3, mu_norm);
        let cfg = TrainConfig { epochs: 3000, batch_size: 1, lr: 3e-3, ..Default::default() };
        let report = train_processor(&mut proc, &pairs, None, &cfg).unwrap();
        assert!(*report.train_history.last().unwrap() < 1e-8);
    }

    #[test]
    fn early_stopping_restores_best_epoch() {
        let pairs = linear_teacher(40, 5);
        let (train, val) = pairs.split_at(30);
        let mu_norm = Normalizer::identity(1);
        let mut proc =
            Processor::init(&ProcessorCfg { hidden: vec![8], seed: 3 }, 3, 3, mu_norm);
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 8,
            lr: 1e-2,
            patience: Some(10),
            ..Default::default()
        };
        let report = train_processor(&mut proc, train, Some(val), &cfg).unwrap();
        let best = report.best_epoch.expect("validation used");
        let best_val = report.val_history[best];
        assert!(report.val_history.iter().all(|&v| v >= best_val));
    }

    #[test]
    fn checkpoint_round_trip() {
        let proc = Processor::init(
            &ProcessorCfg { hidden: vec![8, 8], seed: 4 },
            3,
            2,
            Normalizer::identity(1),
        );
        let dir = tempfile::tempdir().unwrap();
        proc.save(dir.path().join("proc.nfsb")).unwrap();
        let back = Processor::load(dir.path().join("proc.nfsb")).unwrap();
        assert_eq!(back, proc);
    }
}
