//! Dataset manifest (JSON) and sample loading.
//!
//! A manifest lists samples by id with paths (relative to the manifest file)
//! to a geometry container and a field container, plus the parameter vector.
//! Geometry containers hold `vertices` (`[N, d]`) and optionally `normals`
//! and `triangles`; field containers hold `field` (`[N, d_u]`).

use super::container::Container;
use super::DataError;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub shape_id: String,
    pub mesh: String,
    pub field: String,
    pub mu: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sdf_cloud: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub field_names: Vec<String>,
    pub parameter_names: Vec<String>,
    pub samples: Vec<SampleEntry>,
}

impl Manifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        if let Some(parent) = path.as_ref().parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| DataError::Invalid(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let text = fs::read_to_string(&path).map_err(|e| {
            DataError::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.as_ref().display()),
            ))
        })?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| DataError::Invalid(format!("manifest: {e}")))?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(DataError::UnsupportedVersion(m.schema_version));
        }
        Ok(m)
    }
}

/// Node coordinates (and optional normals) shared by samples of one shape.
#[derive(Debug)]
pub struct SampleGeometry {
    pub shape_id: String,
    pub points: Tensor,
    pub normals: Option<Tensor>,
    /// Path to this shape's SDF cloud container, when listed.
    pub sdf_cloud: Option<PathBuf>,
    /// Path to the geometry container itself (for mesh-level reloads).
    pub mesh_path: PathBuf,
}

/// One simulation instance.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub mu: Vec<f64>,
    pub geometry: Arc<SampleGeometry>,
    pub field: Tensor,
}

impl Sample {
    pub fn shape_id(&self) -> &str {
        &self.geometry.shape_id
    }

    pub fn num_points(&self) -> usize {
        self.geometry.points.shape()[0]
    }
}

/// An in-memory dataset: samples plus naming metadata.
#[derive(Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub field_names: Vec<String>,
    pub parameter_names: Vec<String>,
    /// Directory of the manifest; relative paths resolve against it.
    pub root: PathBuf,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn d_u(&self) -> usize {
        self.field_names.len()
    }

    pub fn d_p(&self) -> usize {
        self.parameter_names.len()
    }

    pub fn coord_dim(&self) -> usize {
        self.samples.first().map(|s| s.geometry.points.shape()[1]).unwrap_or(0)
    }

    pub fn shape_ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.shape_id().to_string()).collect()
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self, DataError> {
        let manifest_path = manifest_path.as_ref();
        let manifest = Manifest::load(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();

        let mut seen = BTreeSet::new();
        for s in &manifest.samples {
            if !seen.insert(&s.id) {
                return Err(DataError::Sample {
                    id: s.id.clone(),
                    detail: "duplicate sample id".into(),
                });
            }
        }

        let d_u = manifest.field_names.len();
        let d_p = manifest.parameter_names.len();
        let mut geometry_cache: HashMap<String, Arc<SampleGeometry>> = HashMap::new();
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for entry in &manifest.samples {
            let err = |detail: String| DataError::Sample { id: entry.id.clone(), detail };
            if entry.mu.len() != d_p {
                return Err(err(format!("mu has dim {}, manifest says {}", entry.mu.len(), d_p)));
            }
            let geometry = match geometry_cache.get(&entry.mesh) {
                Some(g) => {
                    if g.shape_id != entry.shape_id {
                        return Err(err(format!(
                            "mesh {} already loaded for shape {}, now claimed by shape {}",
                            entry.mesh, g.shape_id, entry.shape_id
                        )));
                    }
                    Arc::clone(g)
                }
                None => {
                    let mesh_path = root.join(&entry.mesh);
                    let c = Container::read(&mesh_path)
                        .map_err(|e| err(format!("mesh {}: {e}", entry.mesh)))?;
                    let points = c.tensor("vertices").map_err(|e| err(e.to_string()))?;
                    if points.rank() != 2 {
                        return Err(err(format!("vertices must be [N, d], got {:?}", points.shape())));
                    }
                    let normals = if c.contains("normals") {
                        let n = c.tensor("normals").map_err(|e| err(e.to_string()))?;
                        if n.shape() != points.shape() {
                            return Err(err("normals shape differs from vertices".into()));
                        }
                        Some(n)
                    } else {
                        None
                    };
                    if !points.is_finite() {
                        return Err(err("non-finite vertex coordinates".into()));
                    }
                    let g = Arc::new(SampleGeometry {
                        shape_id: entry.shape_id.clone(),
                        points,
                        normals,
                        sdf_cloud: entry.sdf_cloud.as_ref().map(|p| root.join(p)),
                        mesh_path,
                    });
                    geometry_cache.insert(entry.mesh.clone(), Arc::clone(&g));
                    g
                }
            };
            let field = Container::read(root.join(&entry.field))
                .map_err(|e| err(format!("field {}: {e}", entry.field)))?
                .tensor("field")
                .map_err(|e| err(e.to_string()))?;
            if field.rank() != 2 || field.shape()[1] != d_u {
                return Err(err(format!(
                    "field shape {:?}, expected [N, {d_u}]",
                    field.shape()
                )));
            }
            if field.shape()[0] != geometry.points.shape()[0] {
                return Err(err(format!(
                    "field has {} rows but mesh has {} nodes",
                    field.shape()[0],
                    geometry.points.shape()[0]
                )));
            }
            if !field.is_finite() {
                return Err(err("non-finite field values".into()));
            }
            samples.push(Sample {
                id: entry.id.clone(),
                mu: entry.mu.clone(),
                geometry,
                field,
            });
        }
        if samples.is_empty() {
            return Err(DataError::Invalid("manifest lists no samples".into()));
        }
        Ok(Dataset {
            samples,
            field_names: manifest.field_names,
            parameter_names: manifest.parameter_names,
            root,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_sample(dir: &Path, name: &str, n: usize, d_u: usize) {
        let mut mesh = Container::new();
        mesh.push_f64("vertices", vec![n, 2], (0..2 * n).map(|i| i as f64).collect()).unwrap();
        mesh.write(dir.join(format!("{name}_mesh.nfsb"))).unwrap();
        let mut field = Container::new();
        field
            .push_f64("field", vec![n, d_u], (0..n * d_u).map(|i| i as f64 * 0.5).collect())
            .unwrap();
        field.write(dir.join(format!("{name}_field.nfsb"))).unwrap();
    }

    fn manifest(samples: Vec<SampleEntry>) -> Manifest {
        Manifest {
            schema_version: SCHEMA_VERSION,
            field_names: vec!["p".into()],
            parameter_names: vec!["mach".into(), "alpha".into()],
            samples,
        }
    }

    #[test]
    fn load_round_trip_and_geometry_sharing() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(dir.path(), "a", 4, 1);
        // Second sample reuses the same mesh.
        let mut field = Container::new();
        field.push_f64("field", vec![4, 1], vec![9.0; 4]).unwrap();
        field.write(dir.path().join("b_field.nfsb")).unwrap();
        let m = manifest(vec![
            SampleEntry {
                id: "s0".into(),
                shape_id: "shape".into(),
                mesh: "a_mesh.nfsb".into(),
                field: "a_field.nfsb".into(),
                mu: vec![0.5, 1.0],
                sdf_cloud: None,
            },
            SampleEntry {
                id: "s1".into(),
                shape_id: "shape".into(),
                mesh: "a_mesh.nfsb".into(),
                field: "b_field.nfsb".into(),
                mu: vec![0.7, 2.0],
                sdf_cloud: None,
            },
        ]);
        m.save(dir.path().join("manifest.json")).unwrap();
        let ds = Dataset::load(dir.path().join("manifest.json")).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.d_u(), 1);
        assert_eq!(ds.d_p(), 2);
        assert!(Arc::ptr_eq(&ds.samples[0].geometry, &ds.samples[1].geometry));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(dir.path(), "a", 3, 1);
        let entry = SampleEntry {
            id: "dup".into(),
            shape_id: "shape".into(),
            mesh: "a_mesh.nfsb".into(),
            field: "a_field.nfsb".into(),
            mu: vec![0.0, 0.0],
            sdf_cloud: None,
        };
        let m = manifest(vec![entry.clone(), entry]);
        m.save(dir.path().join("manifest.json")).unwrap();
        match Dataset::load(dir.path().join("manifest.json")) {
            Err(DataError::Sample { id, .. }) => assert_eq!(id, "dup"),
            other => panic!("expected duplicate-id error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_names_sample() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(vec![SampleEntry {
            id: "ghost".into(),
            shape_id: "shape".into(),
            mesh: "missing.nfsb".into(),
            field: "also_missing.nfsb".into(),
            mu: vec![0.0, 0.0],
            sdf_cloud: None,
        }]);
        m.save(dir.path().join("manifest.json")).unwrap();
        match Dataset::load(dir.path().join("manifest.json")) {
            Err(DataError::Sample { id, .. }) => assert_eq!(id, "ghost"),
            other => panic!("expected sample error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_field_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(dir.path(), "a", 2, 1);
        let mut field = Container::new();
        field.push_f64("field", vec![2, 1], vec![1.0, f64::NAN]).unwrap();
        field.write(dir.path().join("bad_field.nfsb")).unwrap();
        let m = manifest(vec![SampleEntry {
            id: "bad".into(),
            shape_id: "shape".into(),
            mesh: "a_mesh.nfsb".into(),
            field: "bad_field.nfsb".into(),
            mu: vec![0.0, 0.0],
            sdf_cloud: None,
        }]);
        m.save(dir.path().join("manifest.json")).unwrap();
        assert!(matches!(
            Dataset::load(dir.path().join("manifest.json")),
            Err(DataError::Sample { .. })
        ));
    }
}
