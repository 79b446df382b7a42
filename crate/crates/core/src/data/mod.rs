//! Dataset manifests, on-disk formats, normalization, splits and metrics.

pub mod checkpoint;
pub mod container;
pub mod manifest;
pub mod metrics;
pub mod normalize;
pub mod split;

pub use container::{ArrayData, Container, NamedArray};
pub use manifest::{Dataset, Manifest, Sample, SampleEntry, SampleGeometry, SCHEMA_VERSION};
pub use metrics::{dataset_mse, mse, variance};
pub use normalize::Normalizer;
pub use split::{split_dataset, Split, SplitMode};

use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a binary array container (bad magic)")]
    BadMagic,
    #[error("unsupported container/schema version {0}")]
    UnsupportedVersion(u32),
    #[error("container truncated at byte {at} (wanted {wanted} more)")]
    Truncated { at: usize, wanted: usize },
    #[error("array `{0}` not present in container")]
    MissingArray(String),
    #[error("array `{name}` declared {expected} values, payload has {got}")]
    SizeMismatch { name: String, expected: usize, got: usize },
    #[error("array `{name}` has the wrong dtype, expected {expected}")]
    WrongType { name: String, expected: &'static str },
    #[error("sample `{id}`: {detail}")]
    Sample { id: String, detail: String },
    #[error("{0}")]
    Invalid(String),
}

/// The per-block normalizers of one training run: coordinates, optional
/// normals, parameters and output fields. Fitted on the train split only and
/// stored inside every checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetNormalizer {
    pub coords: Normalizer,
    pub normals: Option<Normalizer>,
    pub mu: Normalizer,
    pub field: Normalizer,
}

impl DatasetNormalizer {
    /// Fit on the listed samples (the train split).
    pub fn fit(ds: &Dataset, indices: &[usize]) -> Result<Self, DataError> {
        if indices.is_empty() {
            return Err(DataError::Invalid("normalizer fit on an empty split".into()));
        }
        let coord_blocks: Vec<&Tensor> =
            indices.iter().map(|&i| &ds.samples[i].geometry.points).collect();
        let coords = Normalizer::fit(coord_blocks)?;
        let normals = if ds.samples.iter().all(|s| s.geometry.normals.is_some()) {
            let blocks: Vec<&Tensor> = indices
                .iter()
                .map(|&i| ds.samples[i].geometry.normals.as_ref().unwrap())
                .collect();
            Some(Normalizer::fit(blocks)?)
        } else {
            None
        };
        let mu_rows: Vec<f64> =
            indices.iter().flat_map(|&i| ds.samples[i].mu.iter().copied()).collect();
        let mu_block = Tensor::new(vec![indices.len(), ds.d_p()], mu_rows)
            .map_err(|e| DataError::Invalid(e.to_string()))?;
        let mu = Normalizer::fit([&mu_block])?;
        let field_blocks: Vec<&Tensor> = indices.iter().map(|&i| &ds.samples[i].field).collect();
        let field = Normalizer::fit(field_blocks)?;
        Ok(DatasetNormalizer { coords, normals, mu, field })
    }

    pub fn save(&self, c: &mut Container, prefix: &str) -> Result<(), DataError> {
        checkpoint::put_normalizer(c, &format!("{prefix}/coords"), &self.coords)?;
        checkpoint::put_normalizer(c, &format!("{prefix}/mu"), &self.mu)?;
        checkpoint::put_normalizer(c, &format!("{prefix}/field"), &self.field)?;
        c.push_u32(
            format!("{prefix}/has_normals"),
            vec![1],
            vec![self.normals.is_some() as u32],
        )?;
        if let Some(n) = &self.normals {
            checkpoint::put_normalizer(c, &format!("{prefix}/normals"), n)?;
        }
        Ok(())
    }

    pub fn load(c: &Container, prefix: &str) -> Result<Self, DataError> {
        let has_normals = c.u32s(&format!("{prefix}/has_normals"))?[0] != 0;
        Ok(DatasetNormalizer {
            coords: checkpoint::get_normalizer(c, &format!("{prefix}/coords"))?,
            normals: if has_normals {
                Some(checkpoint::get_normalizer(c, &format!("{prefix}/normals"))?)
            } else {
                None
            },
            mu: checkpoint::get_normalizer(c, &format!("{prefix}/mu"))?,
            field: checkpoint::get_normalizer(c, &format!("{prefix}/field"))?,
        })
    }
}
