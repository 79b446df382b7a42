//! Encode-process-decode inference with a per-shape geometry-latent cache.

use super::cavia::{infer_latent, EncoderModel};
use super::latent::prepare_cloud;
use super::processor::Processor;
use super::PipelineError;
use crate::geometry::SdfCloud;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Geometry latents keyed by shape id, bound to one encoder checkpoint via
/// its fingerprint. Loading a cache written by a different encoder clears it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LatentCache {
    pub encoder_fingerprint: u64,
    pub entries: BTreeMap<String, Vec<f64>>,
}

impl LatentCache {
    pub fn new(encoder: &EncoderModel) -> Self {
        LatentCache { encoder_fingerprint: encoder.fingerprint(), entries: BTreeMap::new() }
    }

    pub fn matches(&self, encoder: &EncoderModel) -> bool {
        self.encoder_fingerprint == encoder.fingerprint()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PipelineError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Load a cache for this encoder; mismatched or missing files yield a
    /// fresh empty cache.
    pub fn load_for(path: impl AsRef<Path>, encoder: &EncoderModel) -> Self {
        match std::fs::read_to_string(path) {
            Ok(text) => match serde_json::from_str::<LatentCache>(&text) {
                Ok(cache) if cache.matches(encoder) => cache,
                _ => LatentCache::new(encoder),
            },
            Err(_) => LatentCache::new(encoder),
        }
    }
}

/// Full inference for one geometry and parameter vector.
///
/// The geometry latent is inferred from the SDF cloud once per shape and
/// cached; repeated parameter queries on the same shape skip that step.
/// `query_inputs_raw` holds the decoder inputs (coordinates, plus normals
/// when the output encoder was trained with them). The result is in
/// physical field units.
pub fn predict(
    enc_in: &EncoderModel,
    proc: &Processor,
    enc_out: &EncoderModel,
    cloud: &SdfCloud,
    mu_raw: &[f64],
    query_inputs_raw: &Tensor,
    cache: Option<&mut LatentCache>,
) -> Result<Tensor, PipelineError> {
    let z_in: Vec<f64> = match cache {
        Some(cache) => {
            if !cache.matches(enc_in) {
                *cache = LatentCache::new(enc_in);
            }
            match cache.entries.get(&cloud.shape_id) {
                Some(z) => z.clone(),
                None => {
                    let z = infer_geometry_latent(enc_in, cloud)?;
                    cache.entries.insert(cloud.shape_id.clone(), z.clone());
                    z
                }
            }
        }
        None => infer_geometry_latent(enc_in, cloud)?,
    };
    let z_out = proc
        .predict(&z_in, mu_raw)
        .map_err(|e| PipelineError::stage("process", e))?;
    enc_out
        .decode(query_inputs_raw, &z_out)
        .map_err(|e| PipelineError::stage("decode", e))
}

fn infer_geometry_latent(
    enc_in: &EncoderModel,
    cloud: &SdfCloud,
) -> Result<Vec<f64>, PipelineError> {
    let prepared = prepare_cloud(enc_in, cloud).map_err(|e| PipelineError::stage("encode", e))?;
    let (z, _) = infer_latent(enc_in, &prepared).map_err(|e| PipelineError::stage("encode", e))?;
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::super::cavia::EncoderModelCfg;
    use super::super::processor::ProcessorCfg;
    use super::*;
    use crate::data::Normalizer;
    use crate::geometry::{icosphere, SdfSamplingCfg};

    fn setup() -> (EncoderModel, Processor, EncoderModel, SdfCloud) {
        let enc_in = EncoderModel::init(
            &EncoderModelCfg {
                hidden: vec![8, 8],
                n_freqs: 4,
                sigmas: vec![1.0],
                d_z: 3,
                hyper_hidden: vec![],
                seed: 1,
            },
            2,
            0.05,
            Normalizer::identity(3),
            Normalizer::identity(1),
        )
        .unwrap();
        let enc_out = EncoderModel::init(
            &EncoderModelCfg {
                hidden: vec![8, 8],
                n_freqs: 4,
                sigmas: vec![1.0],
                d_z: 4,
                hyper_hidden: vec![],
                seed: 2,
            },
            2,
            0.05,
            Normalizer::identity(3),
            Normalizer::identity(1),
        )
        .unwrap();
        let proc = Processor::init(
            &ProcessorCfg { hidden: vec![8], seed: 3 },
            3,
            4,
            Normalizer::identity(2),
        );
        let mesh = icosphere(1);
        let cloud = SdfCloud::sample(
            &mesh,
            "sphere",
            &SdfSamplingCfg {
                n_total: 60,
                uniform_fraction: 0.5,
                surface_sigmas: vec![0.05],
                seed: 4,
            },
        )
        .unwrap();
        (enc_in, proc, enc_out, cloud)
    }

    #[test]
    fn cached_and_fresh_latents_agree_bitwise() {
        let (enc_in, proc, enc_out, cloud) = setup();
        let query = Tensor::new(vec![4, 3], (0..12).map(|i| i as f64 * 0.1 - 0.5).collect())
            .unwrap();
        let mu = [0.4, 0.7];
        let fresh = predict(&enc_in, &proc, &enc_out, &cloud, &mu, &query, None).unwrap();
        let mut cache = LatentCache::new(&enc_in);
        let first =
            predict(&enc_in, &proc, &enc_out, &cloud, &mu, &query, Some(&mut cache)).unwrap();
        let second =
            predict(&enc_in, &proc, &enc_out, &cloud, &mu, &query, Some(&mut cache)).unwrap();
        for ((a, b), c) in fresh.data().iter().zip(first.data()).zip(second.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
            assert_eq!(a.to_bits(), c.to_bits());
        }
        assert_eq!(cache.entries.len(), 1);
    }

    #[test]
    fn query_supersets_preserve_shared_points() {
        let (enc_in, proc, enc_out, cloud) = setup();
        let coarse = Tensor::new(vec![3, 3], (0..9).map(|i| i as f64 * 0.07).collect()).unwrap();
        let mut refined_data = coarse.data().to_vec();
        refined_data.extend((0..9).map(|i| i as f64 * 0.03 - 0.2));
        let refined = Tensor::new(vec![6, 3], refined_data).unwrap();
        let mu = [0.1, 0.2];
        let a = predict(&enc_in, &proc, &enc_out, &cloud, &mu, &coarse, None).unwrap();
        let b = predict(&enc_in, &proc, &enc_out, &cloud, &mu, &refined, None).unwrap();
        for r in 0..3 {
            assert_eq!(a.row(r), b.row(r));
        }
    }

    #[test]
    fn stale_cache_is_invalidated() {
        let (enc_in, proc, enc_out, cloud) = setup();
        let mut cache = LatentCache { encoder_fingerprint: 12345, entries: Default::default() };
        cache.entries.insert("sphere".into(), vec![9.0, 9.0, 9.0]);
        let query = Tensor::new(vec![1, 3], vec![0.0, 0.1, 0.2]).unwrap();
        let with_cache =
            predict(&enc_in, &proc, &enc_out, &cloud, &[0.3, 0.3], &query, Some(&mut cache))
                .unwrap();
        let fresh = predict(&enc_in, &proc, &enc_out, &cloud, &[0.3, 0.3], &query, None).unwrap();
        assert_eq!(with_cache.data(), fresh.data());
        assert_eq!(cache.encoder_fingerprint, enc_in.fingerprint());
    }

    #[test]
    fn cache_round_trips_through_disk() {
        let (enc_in, _, _, _) = setup();
        let mut cache = LatentCache::new(&enc_in);
        cache.entries.insert("shape_a".into(), vec![1.0, 2.0, 3.0]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.json");
        cache.save(&path).unwrap();
        let loaded = LatentCache::load_for(&path, &enc_in);
        assert_eq!(loaded, cache);
    }
}
