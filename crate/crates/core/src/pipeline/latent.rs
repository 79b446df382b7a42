//! Latent dataset: one (z_in, mu) -> z_out pair per sample, produced by the
//! two frozen encoders. Geometry codes are shared across samples of the same
//! shape; output codes come from a fresh frozen-encoder fit.

use super::cavia::{infer_latent, EncoderModel};
use super::{PipelineError, PreparedSample};
use crate::data::{Container, DataError, Dataset};
use crate::geometry::SdfCloud;
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentPair {
    pub sample_id: String,
    pub shape_id: String,
    pub z_in: Vec<f64>,
    /// Raw (unnormalized) parameter vector; the processor owns normalization.
    pub mu: Vec<f64>,
    pub z_out: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatentDataset {
    pub pairs: Vec<LatentPair>,
}

impl LatentDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.pairs.first().map(|p| p.z_in.len()).unwrap_or(0)
    }

    pub fn d_out(&self) -> usize {
        self.pairs.first().map(|p| p.z_out.len()).unwrap_or(0)
    }

    pub fn d_p(&self) -> usize {
        self.pairs.first().map(|p| p.mu.len()).unwrap_or(0)
    }

    pub fn to_container(&self) -> Result<Container, DataError> {
        let n = self.pairs.len();
        let mut c = Container::new();
        let flat = |f: &dyn Fn(&LatentPair) -> &[f64]| -> Vec<f64> {
            self.pairs.iter().flat_map(|p| f(p).iter().copied()).collect()
        };
        c.push_f64("z_in", vec![n, self.d_in()], flat(&|p| &p.z_in))?;
        c.push_f64("mu", vec![n, self.d_p()], flat(&|p| &p.mu))?;
        c.push_f64("z_out", vec![n, self.d_out()], flat(&|p| &p.z_out))?;
        let ids: Vec<String> = self.pairs.iter().map(|p| p.sample_id.clone()).collect();
        let shapes: Vec<String> = self.pairs.iter().map(|p| p.shape_id.clone()).collect();
        c.push_text("sample_ids", &serde_json::to_string(&ids).expect("string list"))?;
        c.push_text("shape_ids", &serde_json::to_string(&shapes).expect("string list"))?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self, DataError> {
        let z_in = c.tensor("z_in")?;
        let mu = c.tensor("mu")?;
        let z_out = c.tensor("z_out")?;
        let ids: Vec<String> = serde_json::from_str(&c.text("sample_ids")?)
            .map_err(|e| DataError::Invalid(e.to_string()))?;
        let shapes: Vec<String> = serde_json::from_str(&c.text("shape_ids")?)
            .map_err(|e| DataError::Invalid(e.to_string()))?;
        let n = z_in.shape()[0];
        if ids.len() != n || shapes.len() != n || mu.shape()[0] != n || z_out.shape()[0] != n {
            return Err(DataError::Invalid("latent dataset arrays disagree on length".into()));
        }
        let pairs = (0..n)
            .map(|i| LatentPair {
                sample_id: ids[i].clone(),
                shape_id: shapes[i].clone(),
                z_in: z_in.row(i).to_vec(),
                mu: mu.row(i).to_vec(),
                z_out: z_out.row(i).to_vec(),
            })
            .collect();
        Ok(LatentDataset { pairs })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        self.to_container()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Prepare an SDF cloud for the geometry encoder.
pub fn prepare_cloud(
    enc_in: &EncoderModel,
    cloud: &SdfCloud,
) -> Result<PreparedSample, PipelineError> {
    enc_in.prepare_raw(&cloud.shape_id, &cloud.shape_id, &cloud.points, &cloud.sdf_tensor())
}

/// Build the latent dataset for the listed samples.
///
/// `clouds` maps shape id to its SDF cloud; geometry latents are inferred
/// once per shape. Output latents come from a fresh inner-loop fit of the
/// frozen output encoder on each sample's surface data.
pub fn encode_dataset(
    enc_in: &EncoderModel,
    enc_out: &EncoderModel,
    ds: &Dataset,
    idx: &[usize],
    clouds: &BTreeMap<String, SdfCloud>,
    with_normals: bool,
) -> Result<LatentDataset, PipelineError> {
    let mut z_in_by_shape: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut pairs = Vec::with_capacity(idx.len());
    for &i in idx {
        let sample = &ds.samples[i];
        let shape_id = sample.shape_id().to_string();
        if !z_in_by_shape.contains_key(&shape_id) {
            let cloud = clouds
                .get(&shape_id)
                .ok_or_else(|| PipelineError::MissingSdfCloud(shape_id.clone()))?;
            let prepared = prepare_cloud(enc_in, cloud)?;
            let (z, _) = infer_latent(enc_in, &prepared)
                .map_err(|e| PipelineError::stage("encode", e))?;
            z_in_by_shape.insert(shape_id.clone(), z);
        }
        let inputs_raw = super::raw_inputs(sample, with_normals)?;
        let prepared = enc_out.prepare_raw(&sample.id, &shape_id, &inputs_raw, &sample.field)?;
        let (z_out, _) =
            infer_latent(enc_out, &prepared).map_err(|e| PipelineError::stage("encode", e))?;
        pairs.push(LatentPair {
            sample_id: sample.id.clone(),
            shape_id: shape_id.clone(),
            z_in: z_in_by_shape[&shape_id].clone(),
            mu: sample.mu.clone(),
            z_out,
        });
    }
    Ok(LatentDataset { pairs })
}

/// Latent pairs as (input, target) training matrices; inputs are
/// `[z_in, mu_normalized]` rows.
pub(crate) fn latent_matrices(
    pairs: &[LatentPair],
    mu_norm: &crate::data::Normalizer,
) -> Result<(Tensor, Tensor), PipelineError> {
    if pairs.is_empty() {
        return Err(PipelineError::Config("no latent pairs".into()));
    }
    let d_in = pairs[0].z_in.len() + pairs[0].mu.len();
    let d_out = pairs[0].z_out.len();
    let mut xs = Vec::with_capacity(pairs.len() * d_in);
    let mut ys = Vec::with_capacity(pairs.len() * d_out);
    for p in pairs {
        xs.extend_from_slice(&p.z_in);
        xs.extend_from_slice(&mu_norm.transform_row(&p.mu)?);
        ys.extend_from_slice(&p.z_out);
    }
    Ok((
        Tensor::new(vec![pairs.len(), d_in], xs)?,
        Tensor::new(vec![pairs.len(), d_out], ys)?,
    ))
}
