//! Training and inference pipelines: the end-to-end parametric framework and
//! the encode-process-decode framework with meta-learned latent codes.

mod cavia;
mod e2e;
mod latent;
mod predict;
mod processor;
mod single;

pub use cavia::{cavia_fit_epoch, infer_latent, train_encoder, EncoderModel, EncoderModelCfg};
pub use e2e::{train_end_to_end, E2eModelCfg, EndToEndModel};
pub use latent::{encode_dataset, LatentDataset, LatentPair};
pub use predict::{predict, LatentCache};
pub use processor::{train_processor, Processor, ProcessorCfg};
pub use single::{fit_single_field, SingleFieldModel, SingleFitCfg};

/// Per-epoch loss traces of one training run.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub train_history: Vec<f64>,
    pub val_history: Vec<f64>,
    /// Epoch of the restored best-validation parameters, when early
    /// stopping was active.
    pub best_epoch: Option<usize>,
}

use crate::data::{DataError, Normalizer, Sample};
use crate::encoding::EncodingError;
use crate::field::FieldError;
use crate::geometry::GeometryError;
use crate::tensor::{Tensor, TensorError};
use rand::seq::index::sample as index_sample;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<PipelineError>,
    },
    #[error("training aborted at epoch {epoch}, sample `{sample}`: {detail}")]
    Training { epoch: usize, sample: String, detail: String },
    #[error("no SDF cloud available for shape `{0}`")]
    MissingSdfCloud(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl PipelineError {
    pub fn stage(stage: &'static str, source: PipelineError) -> Self {
        PipelineError::Stage { stage, source: Box::new(source) }
    }
}

/// Shared training knobs. `inner_*` apply to the CAVIA pipelines only.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub inner_steps: usize,
    pub inner_lr: f64,
    /// Points drawn per sample per epoch; `None` trains on full resolution.
    pub training_resolution: Option<usize>,
    pub seed: u64,
    /// Early-stopping patience on validation loss, when a validation set is
    /// supplied.
    pub patience: Option<usize>,
    /// First-order meta-learning (adapted latents treated as constants).
    pub first_order: bool,
    /// Worker threads for per-sample loss/gradient evaluation. Results are
    /// reduced in sample order, so metrics do not depend on this value.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 16,
            lr: 1e-3,
            inner_steps: 3,
            inner_lr: 0.01,
            training_resolution: None,
            seed: 0,
            patience: None,
            first_order: false,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(PipelineError::Config("epochs and batch size must be positive".into()));
        }
        if self.lr <= 0.0 || self.inner_lr <= 0.0 {
            return Err(PipelineError::Config("learning rates must be positive".into()));
        }
        if self.training_resolution == Some(0) {
            return Err(PipelineError::Config("training resolution must be positive".into()));
        }
        Ok(())
    }
}

/// A sample in network units: normalized inputs (`[N, d_in]`), normalized
/// targets (`[N, d_u]`) and the normalized parameter vector.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub shape_id: String,
    pub inputs: Tensor,
    pub targets: Tensor,
    pub mu: Vec<f64>,
}

impl PreparedSample {
    pub fn num_points(&self) -> usize {
        self.inputs.shape()[0]
    }
}

/// Raw network inputs for a dataset sample: coordinates, with per-vertex
/// normals appended when requested.
pub fn raw_inputs(sample: &Sample, with_normals: bool) -> Result<Tensor, PipelineError> {
    let pts = &sample.geometry.points;
    if !with_normals {
        return Ok(pts.clone());
    }
    let normals = sample.geometry.normals.as_ref().ok_or_else(|| {
        PipelineError::Config(format!("sample `{}` has no normals", sample.id))
    })?;
    let (n, d) = (pts.shape()[0], pts.shape()[1]);
    let mut data = Vec::with_capacity(n * 2 * d);
    for r in 0..n {
        data.extend_from_slice(pts.row(r));
        data.extend_from_slice(normals.row(r));
    }
    Ok(Tensor::new(vec![n, 2 * d], data)?)
}

/// Fit input/mu/target normalizers on the listed (train) samples.
pub fn fit_normalizers(
    ds: &crate::data::Dataset,
    idx: &[usize],
    with_normals: bool,
) -> Result<(Normalizer, Normalizer, Normalizer), PipelineError> {
    if idx.is_empty() {
        return Err(PipelineError::Config("normalizer fit on empty index set".into()));
    }
    let inputs: Vec<Tensor> = idx
        .iter()
        .map(|&i| raw_inputs(&ds.samples[i], with_normals))
        .collect::<Result<_, _>>()?;
    let input_norm = Normalizer::fit(inputs.iter())?;
    let mu_rows: Vec<f64> = idx.iter().flat_map(|&i| ds.samples[i].mu.iter().copied()).collect();
    let mu_block = Tensor::new(vec![idx.len(), ds.d_p()], mu_rows)?;
    let mu_norm = Normalizer::fit([&mu_block])?;
    let targets: Vec<&Tensor> = idx.iter().map(|&i| &ds.samples[i].field).collect();
    let target_norm = Normalizer::fit(targets)?;
    Ok((input_norm, mu_norm, target_norm))
}

/// Normalize the listed samples into network units.
pub fn prepare_samples(
    ds: &crate::data::Dataset,
    idx: &[usize],
    input_norm: &Normalizer,
    mu_norm: &Normalizer,
    target_norm: &Normalizer,
    with_normals: bool,
) -> Result<Vec<PreparedSample>, PipelineError> {
    idx.iter()
        .map(|&i| {
            let s = &ds.samples[i];
            Ok(PreparedSample {
                id: s.id.clone(),
                shape_id: s.shape_id().to_string(),
                inputs: input_norm.transform(&raw_inputs(s, with_normals)?)?,
                targets: target_norm.transform(&s.field)?,
                mu: mu_norm.transform_row(&s.mu)?,
            })
        })
        .collect()
}

/// Uniform without-replacement point subsampling; coordinates and targets
/// stay row-aligned. `n_points == N` returns the sample unchanged.
pub fn dynamic_subsample(
    sample: &PreparedSample,
    n_points: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedSample, PipelineError> {
    let n = sample.num_points();
    if n_points > n {
        return Err(PipelineError::Config(format!(
            "cannot subsample {n_points} of {n} points (sample `{}`)",
            sample.id
        )));
    }
    if n_points == n {
        return Ok(sample.clone());
    }
    let idx = index_sample(rng, n, n_points);
    let d_in = sample.inputs.shape()[1];
    let d_u = sample.targets.shape()[1];
    let mut inputs = Vec::with_capacity(n_points * d_in);
    let mut targets = Vec::with_capacity(n_points * d_u);
    for i in idx.iter() {
        inputs.extend_from_slice(sample.inputs.row(i));
        targets.extend_from_slice(sample.targets.row(i));
    }
    Ok(PreparedSample {
        id: sample.id.clone(),
        shape_id: sample.shape_id.clone(),
        inputs: Tensor::new(vec![n_points, d_in], inputs)?,
        targets: Tensor::new(vec![n_points, d_u], targets)?,
        mu: sample.mu.clone(),
    })
}

/// Evaluate `f(0..n)` with up to `threads` workers and return results in
/// index order; with one thread (or on wasm) this is a plain serial loop.
pub(crate) fn map_indexed<T, F>(n: usize, threads: usize, f: F) -> Result<Vec<T>, PipelineError>
where
    T: Send,
    F: Fn(usize) -> Result<T, PipelineError> + Sync,
{
    #[cfg(target_arch = "wasm32")]
    let threads = 1;
    let threads = threads.max(1).min(n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<Result<T, PipelineError>>> = Vec::with_capacity(n);
    slots.resize_with(n, || None);
    let chunk = n.div_ceil(threads);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (t, slot_chunk) in slots.chunks_mut(chunk).enumerate() {
            let f = &f;
            handles.push(scope.spawn(move || {
                for (j, slot) in slot_chunk.iter_mut().enumerate() {
                    *slot = Some(f(t * chunk + j));
                }
            }));
        }
        for h in handles {
            h.join().expect("worker panicked");
        }
    });
    slots.into_iter().map(|s| s.expect("all slots filled")).collect()
}
