//! Non-training subcommands: dataset generation, validation, SDF
//! preparation, prediction, evaluation and the classical baseline.

use crate::common::{self, Splits};
use crate::runrecord::{fmt_f64, write_csv, RunRecord};
use anyhow::{bail, Context, Result};
use nfs_core::data::{mse, Container, Normalizer};
use nfs_core::geometry::{Mesh, SdfCloud, SdfSamplingCfg};
use nfs_core::pipeline::{predict, EncoderModel, EndToEndModel, LatentCache, Processor};
use nfs_core::podgpr::{fit_pod_gpr, GprConfig, NoiseMode, PodGpr};
use nfs_core::synth::{gen_airfoil_2d, gen_broadband_1d, gen_wing_3d};
use nfs_core::tensor::Tensor;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

// ── synth ──────────────────────────────────────────────────────────────

pub fn run_synth_broadband(out: &Path, cfg: nfs_core::synth::Broadband1DCfg) -> Result<()> {
    let mut record = RunRecord::new("synth broadband1d", &SerializableBroadband::from(&cfg), cfg.seed);
    let data = record.stage("generate", || gen_broadband_1d(&cfg));
    record.stage("write", || data.write_dataset(out))?;
    record.write(out)?;
    println!("wrote broadband 1d dataset ({} points) -> {}", cfg.n_points, out.display());
    Ok(())
}

// Synth configs are plain core structs; mirror them for serde output.
#[derive(Serialize)]
struct SerializableBroadband {
    components: Vec<(f64, f64)>,
    n_points: usize,
    train_fraction: f64,
    seed: u64,
}

impl From<&nfs_core::synth::Broadband1DCfg> for SerializableBroadband {
    fn from(c: &nfs_core::synth::Broadband1DCfg) -> Self {
        SerializableBroadband {
            components: c.components.clone(),
            n_points: c.n_points,
            train_fraction: c.train_fraction,
            seed: c.seed,
        }
    }
}

pub fn run_synth_airfoil(out: &Path, cfg: nfs_core::synth::Airfoil2DCfg) -> Result<()> {
    #[derive(Serialize)]
    struct Cfg<'a> {
        n_nodes: usize,
        grid: (usize, usize),
        front_width: f64,
        seed: u64,
        out: &'a str,
    }
    let mut record = RunRecord::new(
        "synth airfoil2d",
        &Cfg {
            n_nodes: cfg.n_nodes,
            grid: cfg.grid,
            front_width: cfg.front_width,
            seed: cfg.seed,
            out: &out.display().to_string(),
        },
        cfg.seed,
    );
    let data = record.stage("generate", || gen_airfoil_2d(&cfg));
    record.stage("write", || data.write_dataset(out))?;
    record.metric("samples", data.num_samples() as f64);
    record.write(out)?;
    println!(
        "wrote airfoil 2d dataset ({} samples x {} nodes) -> {}",
        data.num_samples(),
        cfg.n_nodes,
        out.display()
    );
    Ok(())
}

pub fn run_synth_wing(out: &Path, cfg: nfs_core::synth::Wing3DCfg) -> Result<()> {
    #[derive(Serialize)]
    struct Cfg {
        n_shapes: usize,
        conditions_per_shape: usize,
        span_sections: usize,
        ring_points: usize,
        seed: u64,
    }
    let mut record = RunRecord::new(
        "synth wing3d",
        &Cfg {
            n_shapes: cfg.n_shapes,
            conditions_per_shape: cfg.conditions_per_shape,
            span_sections: cfg.span_sections,
            ring_points: cfg.ring_points,
            seed: cfg.seed,
        },
        cfg.seed,
    );
    let data = record.stage("generate", || gen_wing_3d(&cfg))?;
    record.stage("write", || data.write_dataset(out))?;
    record.metric("samples", data.num_samples() as f64);
    record.write(out)?;
    println!(
        "wrote wing 3d dataset ({} shapes x {} conditions) -> {}",
        cfg.n_shapes,
        cfg.conditions_per_shape,
        out.display()
    );
    Ok(())
}

// ── data ───────────────────────────────────────────────────────────────

pub fn run_data_check(data: &Path) -> Result<()> {
    let ds = common::load_dataset(data)?;
    let mut missing_sdf = 0usize;
    let mut shapes = std::collections::BTreeSet::new();
    for s in &ds.samples {
        shapes.insert(s.shape_id().to_string());
        if let Some(p) = &s.geometry.sdf_cloud {
            if !p.exists() {
                missing_sdf += 1;
            }
        }
    }
    println!("manifest ok: {} samples, {} shapes", ds.len(), shapes.len());
    println!(
        "fields: {:?} (d_u = {}), parameters: {:?} (d_p = {}), coord dim {}",
        ds.field_names,
        ds.d_u(),
        ds.parameter_names,
        ds.d_p(),
        ds.coord_dim()
    );
    if missing_sdf > 0 {
        println!("warning: {missing_sdf} samples reference SDF clouds that do not exist yet (run `nfs sdf prepare`)");
    }
    Ok(())
}

pub fn run_data_split(
    data: &Path,
    fractions: (f64, f64, f64),
    mode: &str,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<()> {
    let ds = common::load_dataset(data)?;
    let splits = Splits::compute(&ds, fractions, common::parse_split_mode(mode)?, seed)?;
    let path = out.unwrap_or_else(|| data.join("splits.json"));
    splits.save(&path)?;
    println!(
        "split {} samples into {}/{}/{} ({}) -> {}",
        ds.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        mode,
        path.display()
    );
    Ok(())
}

// ── sdf prepare ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdfPrepareCfg {
    pub n_total: usize,
    pub uniform_fraction: f64,
    pub sigmas: Vec<f64>,
    pub seed: u64,
}

impl Default for SdfPrepareCfg {
    fn default() -> Self {
        SdfPrepareCfg {
            n_total: 60_000,
            uniform_fraction: 0.10,
            sigmas: vec![0.005, 0.0005],
            seed: 0,
        }
    }
}

pub fn run_sdf_prepare(data: &Path, cfg: SdfPrepareCfg) -> Result<()> {
    let mut record = RunRecord::new("sdf prepare", &cfg, cfg.seed);
    let ds = common::load_dataset(data)?;
    let mut done = std::collections::BTreeSet::new();
    let mut count = 0usize;
    record.stage("sample", || -> Result<()> {
        for s in &ds.samples {
            let geom = &s.geometry;
            if !done.insert(geom.shape_id.clone()) {
                continue;
            }
            let target = geom
                .sdf_cloud
                .clone()
                .unwrap_or_else(|| data.join(format!("sdf/{}.nfsb", geom.shape_id)));
            let mesh = Mesh::load(&geom.mesh_path)
                .with_context(|| format!("loading mesh for shape `{}`", geom.shape_id))?;
            let (normalized, _) = mesh.normalize_to_unit_sphere()?;
            let sampling = SdfSamplingCfg {
                n_total: cfg.n_total,
                uniform_fraction: cfg.uniform_fraction,
                surface_sigmas: cfg.sigmas.clone(),
                seed: cfg.seed ^ nfs_core::encoding::scale_seed(cfg.seed, count + 1),
            };
            let cloud = SdfCloud::sample(&normalized, &geom.shape_id, &sampling)?;
            if let Some(parent) = target.parent() {
                std::fs::create_dir_all(parent)?;
            }
            cloud.save(&target)?;
            count += 1;
        }
        Ok(())
    })?;
    record.metric("shapes", count as f64);
    record.write(data)?;
    println!("sampled SDF clouds for {count} shapes ({} points each)", cfg.n_total);
    Ok(())
}

// ── predict (encode-process-decode) ────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictCfg {
    pub resolution: Option<usize>,
    pub sdf: SdfPrepareCfg,
    pub seed: u64,
}

impl Default for PredictCfg {
    fn default() -> Self {
        PredictCfg { resolution: None, sdf: SdfPrepareCfg::default(), seed: 0 }
    }
}

pub struct PredictArgs {
    pub enc_in: PathBuf,
    pub processor: PathBuf,
    pub enc_out: PathBuf,
    pub shape: PathBuf,
    pub sdf_cloud: Option<PathBuf>,
    pub mu: Vec<f64>,
    pub out: PathBuf,
    pub cache: Option<PathBuf>,
}

pub fn run_predict(args: PredictArgs, cfg: PredictCfg) -> Result<()> {
    let mut record = RunRecord::new("predict", &cfg, cfg.seed);
    let enc_in = EncoderModel::load(&args.enc_in).context("loading input encoder")?;
    let proc = Processor::load(&args.processor).context("loading processor")?;
    let enc_out = EncoderModel::load(&args.enc_out).context("loading output encoder")?;

    let mesh = record.stage("load shape", || -> Result<Mesh> {
        let mesh = if args.shape.extension().map(|e| e == "obj").unwrap_or(false) {
            Mesh::load_obj(&args.shape)?
        } else {
            Mesh::load(&args.shape)?
        };
        if mesh.normals.is_some() {
            Ok(mesh)
        } else {
            Ok(mesh.with_computed_normals()?)
        }
    })?;
    let shape_id = args
        .shape
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "shape".into());

    let cloud = record.stage("sdf", || -> Result<SdfCloud> {
        match &args.sdf_cloud {
            Some(path) => Ok(SdfCloud::load(path)?),
            None => {
                let (normalized, _) = mesh.normalize_to_unit_sphere()?;
                let sampling = SdfSamplingCfg {
                    n_total: cfg.sdf.n_total,
                    uniform_fraction: cfg.sdf.uniform_fraction,
                    surface_sigmas: cfg.sdf.sigmas.clone(),
                    seed: cfg.sdf.seed,
                };
                Ok(SdfCloud::sample(&normalized, &shape_id, &sampling)?)
            }
        }
    })?;

    // Query inputs: surface nodes (optionally subsampled), with normals when
    // the output encoder was trained on them.
    let with_normals = enc_out.input_norm.width() == 6;
    let all_points = mesh.vertices_tensor();
    let normals = mesh.normals.as_ref().expect("computed above");
    let n = all_points.shape()[0];
    let rows: Vec<usize> = match cfg.resolution {
        Some(r) if r < n => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
            let idx = rand::seq::index::sample(&mut rng, n, r);
            idx.iter().collect()
        }
        _ => (0..n).collect(),
    };
    let d_in = if with_normals { 6 } else { 3 };
    let mut data = Vec::with_capacity(rows.len() * d_in);
    for &r in &rows {
        data.extend_from_slice(all_points.row(r));
        if with_normals {
            data.extend_from_slice(&normals[r]);
        }
    }
    let query = Tensor::new(vec![rows.len(), d_in], data)?;

    let mut cache = args.cache.as_ref().map(|p| LatentCache::load_for(p, &enc_in));
    let field = record.stage("predict", || {
        predict(&enc_in, &proc, &enc_out, &cloud, &args.mu, &query, cache.as_mut())
    })?;
    if let (Some(path), Some(cache)) = (&args.cache, &cache) {
        cache.save(path).map_err(|e| anyhow::anyhow!("{e}"))?;
    }

    record.stage("write", || -> Result<()> {
        let mut c = Container::new();
        c.push_tensor("points", &query)?;
        c.push_tensor("field", &field)?;
        if let Some(parent) = args.out.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        c.write(&args.out)?;
        Ok(())
    })?;
    record.metric("query_points", rows.len() as f64);
    record.write(args.out.parent().unwrap_or(Path::new(".")))?;
    println!("predicted {} values -> {}", rows.len(), args.out.display());
    Ok(())
}

// ── eval ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalCfg {
    pub split: String,
    pub resolution: Option<usize>,
    pub physical_units: bool,
    pub seed: u64,
}

impl Default for EvalCfg {
    fn default() -> Self {
        EvalCfg { split: "test".into(), resolution: None, physical_units: false, seed: 0 }
    }
}

pub enum EvalModel {
    E2e(PathBuf),
    Epd { enc_in: PathBuf, processor: PathBuf, enc_out: PathBuf },
}

fn subsample_rows(n: usize, resolution: Option<usize>, seed: u64) -> Vec<usize> {
    match resolution {
        Some(r) if r < n => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, n, r).iter().collect()
        }
        _ => (0..n).collect(),
    }
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let w = t.shape()[1];
    let data: Vec<f64> = rows.iter().flat_map(|&r| t.row(r).to_vec()).collect();
    Tensor::new(vec![rows.len(), w], data).expect("sized")
}

pub fn run_eval(model: EvalModel, data: &Path, out: &Path, cfg: EvalCfg) -> Result<()> {
    let mut record = RunRecord::new("eval", &cfg, cfg.seed);
    let ds = common::load_dataset(data)?;
    let splits = Splits::load_or_init(&ds, data)?;
    let part_ids = splits.part(&cfg.split)?.to_vec();
    let (train_idx, val_idx, test_idx) = splits.indices(&ds)?;
    let idx = match cfg.split.as_str() {
        "train" => train_idx,
        "val" => val_idx,
        _ => test_idx,
    };
    if idx.is_empty() {
        bail!("split `{}` is empty", cfg.split);
    }
    drop(part_ids);

    let mut rows: Vec<Vec<String>> = Vec::with_capacity(idx.len());
    let mut per_sample = Vec::with_capacity(idx.len());

    match model {
        EvalModel::E2e(path) => {
            let model = EndToEndModel::load(&path).context("loading end-to-end model")?;
            record.stage("eval", || -> Result<()> {
                for (k, &i) in idx.iter().enumerate() {
                    let s = &ds.samples[i];
                    let sel = subsample_rows(
                        s.num_points(),
                        cfg.resolution,
                        cfg.seed.wrapping_add(k as u64),
                    );
                    let pts = select_rows(&s.geometry.points, &sel);
                    let truth = select_rows(&s.field, &sel);
                    let (pred, truth) = if cfg.physical_units {
                        (model.predict(&pts, &s.mu)?, truth)
                    } else {
                        (
                            model.predict_normalized(&pts, &s.mu)?,
                            model.target_norm.transform(&truth)?,
                        )
                    };
                    let e = mse(pred.data(), truth.data())?;
                    per_sample.push(e);
                    rows.push(vec![s.id.clone(), s.shape_id().to_string(), fmt_f64(e)]);
                }
                Ok(())
            })?;
        }
        EvalModel::Epd { enc_in, processor, enc_out } => {
            let enc_in = EncoderModel::load(&enc_in).context("loading input encoder")?;
            let proc = Processor::load(&processor).context("loading processor")?;
            let enc_out = EncoderModel::load(&enc_out).context("loading output encoder")?;
            let clouds = common::load_clouds(&ds, &idx)?;
            let with_normals = enc_out.input_norm.width() == 2 * ds.coord_dim();
            let mut cache = LatentCache::new(&enc_in);
            record.stage("eval", || -> Result<()> {
                for (k, &i) in idx.iter().enumerate() {
                    let s = &ds.samples[i];
                    let sel = subsample_rows(
                        s.num_points(),
                        cfg.resolution,
                        cfg.seed.wrapping_add(k as u64),
                    );
                    let inputs = nfs_core::pipeline::raw_inputs(s, with_normals)?;
                    let query = select_rows(&inputs, &sel);
                    let truth = select_rows(&s.field, &sel);
                    let cloud = clouds
                        .get(s.shape_id())
                        .with_context(|| format!("no cloud for `{}`", s.shape_id()))?;
                    let pred =
                        predict(&enc_in, &proc, &enc_out, cloud, &s.mu, &query, Some(&mut cache))?;
                    let (pred, truth) = if cfg.physical_units {
                        (pred, truth)
                    } else {
                        (
                            enc_out.target_norm.transform(&pred)?,
                            enc_out.target_norm.transform(&truth)?,
                        )
                    };
                    let e = mse(pred.data(), truth.data())?;
                    per_sample.push(e);
                    rows.push(vec![s.id.clone(), s.shape_id().to_string(), fmt_f64(e)]);
                }
                Ok(())
            })?;
        }
    }

    let mean = nfs_core::data::dataset_mse(&per_sample)?;
    record.metric("mean_mse", mean);
    record.metric("samples", per_sample.len() as f64);
    std::fs::create_dir_all(out)?;
    write_csv(&out.join("metrics.csv"), "sample_id,shape_id,mse", &rows)?;
    let summary = serde_json::json!({
        "split": cfg.split,
        "samples": per_sample.len(),
        "mean_mse": mean,
        "physical_units": cfg.physical_units,
    });
    std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&summary)?)?;
    record.write(out)?;
    println!("evaluated {} samples: mean mse {mean:.6e} -> {}", per_sample.len(), out.display());
    Ok(())
}

// ── podgpr ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PodGprFitCfg {
    pub modes: usize,
    pub restarts: usize,
    pub iters: usize,
    pub lr: f64,
    pub noise_floor: f64,
    pub seed: u64,
}

impl Default for PodGprFitCfg {
    fn default() -> Self {
        PodGprFitCfg { modes: 50, restarts: 5, iters: 80, lr: 0.08, noise_floor: 1e-10, seed: 0 }
    }
}

pub fn run_podgpr_fit(data: &Path, out: &Path, cfg: PodGprFitCfg) -> Result<()> {
    let mut record = RunRecord::new("podgpr fit", &cfg, cfg.seed);
    let ds = common::load_dataset(data)?;
    let splits = Splits::load_or_init(&ds, data)?;
    let (train_idx, _, _) = splits.indices(&ds)?;
    // POD needs one shared mesh.
    let first = &ds.samples[train_idx[0]].geometry;
    for &i in &train_idx {
        if !std::sync::Arc::ptr_eq(&ds.samples[i].geometry, first) {
            bail!("podgpr requires a fixed mesh; sample `{}` uses a different geometry", ds.samples[i].id);
        }
    }
    let n_values = first.points.shape()[0] * ds.d_u();
    let m = train_idx.len();

    // Standardize fields with train statistics; the GP then regresses
    // coefficients of standardized snapshots.
    let field_blocks: Vec<&Tensor> = train_idx.iter().map(|&i| &ds.samples[i].field).collect();
    let field_norm = Normalizer::fit(field_blocks)?;
    let mut snaps = Vec::with_capacity(m * n_values);
    for &i in &train_idx {
        snaps.extend(field_norm.transform(&ds.samples[i].field)?.data().to_vec());
    }
    let snapshots = Tensor::new(vec![m, n_values], snaps)?;
    let mus = Tensor::new(
        vec![m, ds.d_p()],
        train_idx.iter().flat_map(|&i| ds.samples[i].mu.clone()).collect(),
    )?;
    let modes = cfg.modes.min(m).min(n_values);
    if modes < cfg.modes {
        eprintln!("note: clamping mode count {} -> {modes} (min of snapshots and field size)", cfg.modes);
    }
    let gpr_cfg = GprConfig {
        restarts: cfg.restarts,
        iters: cfg.iters,
        lr: cfg.lr,
        noise: NoiseMode::Optimize { floor: cfg.noise_floor },
        seed: cfg.seed,
    };
    let model = record.stage("fit", || fit_pod_gpr(&snapshots, &mus, modes, &gpr_cfg))?;
    record.stage("save", || -> Result<()> {
        let mut c = model.to_container()?;
        nfs_core::data::checkpoint::put_normalizer(&mut c, "norm/field", &field_norm)?;
        c.push_u32("meta/d_u", vec![1], vec![ds.d_u() as u32])?;
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        c.write(out)?;
        Ok(())
    })?;
    record.metric("modes", model.basis.num_modes() as f64);
    record.write(out.parent().unwrap_or(Path::new(".")))?;
    println!(
        "fitted POD+GPR ({} modes, {} snapshots) -> {}",
        model.basis.num_modes(),
        m,
        out.display()
    );
    Ok(())
}

pub fn run_podgpr_predict(model_path: &Path, mu: Vec<f64>, out: &Path) -> Result<()> {
    let container = Container::read(model_path)?;
    let model = PodGpr::from_container(&container)?;
    let field_norm = nfs_core::data::checkpoint::get_normalizer(&container, "norm/field")?;
    let d_u = container.u32s("meta/d_u")?[0] as usize;
    let pred = model.predict(&mu)?;
    if pred.outside_hull {
        eprintln!("warning: query parameters lie outside the training hull (> 3 lengthscales)");
    }
    let n = pred.field.len() / d_u;
    let standardized = Tensor::new(vec![n, d_u], pred.field.clone())?;
    let physical = field_norm.inverse(&standardized)?;
    let mut c = Container::new();
    c.push_tensor("field", &physical)?;
    c.push_f64("field_standardized", vec![n, d_u], pred.field)?;
    c.push_f64("field_variance", vec![n, d_u], pred.field_variance)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    c.write(out)?;
    println!("pod+gpr prediction ({n} nodes) -> {}", out.display());
    Ok(())
}
