//! Shared CLI plumbing: dataset/split loading, list parsing, config merging.

use anyhow::{bail, Context, Result};
use nfs_core::data::{Dataset, SplitMode};
use nfs_core::geometry::SdfCloud;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Resolve the dataset directory: explicit flag, else `NFS_DATA_ROOT`.
pub fn data_dir(flag: Option<PathBuf>) -> Result<PathBuf> {
    match flag {
        Some(p) => Ok(p),
        None => match std::env::var_os("NFS_DATA_ROOT") {
            Some(root) => Ok(PathBuf::from(root)),
            None => bail!("no --data given and NFS_DATA_ROOT is not set"),
        },
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir.join("manifest.json"))
        .with_context(|| format!("loading dataset from {}", dir.display()))
}

/// Persisted split: sample ids per part.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Splits {
    pub seed: u64,
    pub mode: String,
    pub fractions: (f64, f64, f64),
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn compute(
        ds: &Dataset,
        fractions: (f64, f64, f64),
        mode: SplitMode,
        seed: u64,
    ) -> Result<Self> {
        let split = nfs_core::data::split_dataset(&ds.shape_ids(), fractions, mode, seed)?;
        let ids = |idx: &[usize]| idx.iter().map(|&i| ds.samples[i].id.clone()).collect();
        Ok(Splits {
            seed,
            mode: match mode {
                SplitMode::BySample => "by-sample".into(),
                SplitMode::ByShape => "by-shape".into(),
            },
            fractions,
            train: ids(&split.train),
            val: ids(&split.val),
            test: ids(&split.test),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading splits from {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Load `<data>/splits.json`, or compute and persist a default
    /// 70/10/20 by-sample split when none exists yet.
    pub fn load_or_init(ds: &Dataset, dir: &Path) -> Result<Self> {
        let path = dir.join("splits.json");
        if path.exists() {
            Splits::load(&path)
        } else {
            eprintln!(
                "note: {} not found; creating a default 70/10/20 by-sample split (seed 0)",
                path.display()
            );
            let s = Splits::compute(ds, (0.7, 0.1, 0.2), SplitMode::BySample, 0)?;
            s.save(&path)?;
            Ok(s)
        }
    }

    /// Map the id lists back to dataset indices.
    pub fn indices(&self, ds: &Dataset) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
        let by_id: BTreeMap<&str, usize> =
            ds.samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
        let lookup = |ids: &[String]| -> Result<Vec<usize>> {
            ids.iter()
                .map(|id| {
                    by_id
                        .get(id.as_str())
                        .copied()
                        .with_context(|| format!("split references unknown sample `{id}`"))
                })
                .collect()
        };
        Ok((lookup(&self.train)?, lookup(&self.val)?, lookup(&self.test)?))
    }

    pub fn part(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => bail!("unknown split `{other}` (expected train|val|test)"),
        }
    }
}

pub fn parse_split_mode(s: &str) -> Result<SplitMode> {
    match s {
        "by-sample" => Ok(SplitMode::BySample),
        "by-shape" => Ok(SplitMode::ByShape),
        other => bail!("unknown split mode `{other}` (expected by-sample|by-shape)"),
    }
}

/// Load the SDF clouds referenced by the samples' shapes, one per shape id.
pub fn load_clouds(ds: &Dataset, idx: &[usize]) -> Result<BTreeMap<String, SdfCloud>> {
    let mut clouds = BTreeMap::new();
    for &i in idx {
        let geom = &ds.samples[i].geometry;
        if clouds.contains_key(&geom.shape_id) {
            continue;
        }
        let path = geom.sdf_cloud.as_ref().with_context(|| {
            format!("shape `{}` lists no SDF cloud; run `nfs sdf prepare` first", geom.shape_id)
        })?;
        let cloud = SdfCloud::load(path)
            .with_context(|| format!("loading SDF cloud for shape `{}`", geom.shape_id))?;
        clouds.insert(geom.shape_id.clone(), cloud);
    }
    Ok(clouds)
}

pub fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad number `{t}`")))
        .collect()
}

pub fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<usize>().with_context(|| format!("bad count `{t}`")))
        .collect()
}

/// Resolve a config struct: start from `base`, overlay any keys present in
/// the JSON config file, then let explicit flags override.
pub fn resolve_config<C>(
    base: C,
    config_file: Option<&Path>,
    apply_flags: impl FnOnce(&mut C),
) -> Result<C>
where
    C: Serialize + for<'de> Deserialize<'de>,
{
    let mut cfg = match config_file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let overlay: serde_json::Value = serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?;
            let mut value = serde_json::to_value(&base)?;
            match (&mut value, overlay) {
                (serde_json::Value::Object(dst), serde_json::Value::Object(src)) => {
                    for (k, v) in src {
                        if !dst.contains_key(&k) {
                            bail!("config {} has unknown key `{k}`", path.display());
                        }
                        dst.insert(k, v);
                    }
                }
                _ => bail!("config {} must be a JSON object", path.display()),
            }
            serde_json::from_value(value)?
        }
        None => base,
    };
    apply_flags(&mut cfg);
    Ok(cfg)
}

pub fn maybe_print_config<C: Serialize>(print: bool, cfg: &C) -> Result<bool> {
    if print {
        println!("{}", serde_json::to_string_pretty(cfg)?);
    }
    Ok(print)
}
