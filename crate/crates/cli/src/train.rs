//! Training subcommands: end-to-end model, the two CAVIA encoders, latent
//! encoding and the latent processor.

use crate::common::{self, Splits};
use crate::runrecord::RunRecord;
use anyhow::{bail, Context, Result};
use nfs_core::data::Normalizer;
use nfs_core::pipeline::{
    encode_dataset, fit_normalizers, prepare_samples, train_encoder, train_end_to_end,
    train_processor, E2eModelCfg, EncoderModel, EncoderModelCfg, EndToEndModel, LatentDataset,
    PreparedSample, Processor, ProcessorCfg, TrainConfig,
};
use nfs_core::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

fn write_checkpoint(path: &Path, container: nfs_core::data::Container) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    container.write(path)?;
    Ok(())
}

// ── end-to-end ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct E2eTrainCfg {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub sigmas: Vec<f64>,
    pub freqs: usize,
    pub hidden: Vec<usize>,
    pub hyper_hidden: Vec<usize>,
    pub train_res: Option<usize>,
    pub patience: Option<usize>,
    pub seed: u64,
    pub threads: usize,
}

impl Default for E2eTrainCfg {
    fn default() -> Self {
        E2eTrainCfg {
            epochs: 5000,
            batch: 16,
            lr: 2e-5,
            sigmas: vec![1.0, 5.0],
            freqs: 64,
            hidden: vec![128, 128, 128, 128],
            hyper_hidden: vec![128, 128],
            train_res: Some(5000),
            patience: None,
            seed: 0,
            threads: 1,
        }
    }
}

impl E2eTrainCfg {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            lr: self.lr,
            training_resolution: self.train_res,
            seed: self.seed,
            patience: self.patience,
            threads: self.threads,
            ..Default::default()
        }
    }
}

pub fn run_train_e2e(data: &Path, out: &Path, cfg: E2eTrainCfg) -> Result<()> {
    let mut record = RunRecord::new("train e2e", &cfg, cfg.seed);
    let ds = common::load_dataset(data)?;
    let splits = Splits::load_or_init(&ds, data)?;
    let (train_idx, val_idx, _) = splits.indices(&ds)?;
    let (input_norm, mu_norm, target_norm) = fit_normalizers(&ds, &train_idx, false)?;
    let train = prepare_samples(&ds, &train_idx, &input_norm, &mu_norm, &target_norm, false)?;
    let val = prepare_samples(&ds, &val_idx, &input_norm, &mu_norm, &target_norm, false)?;

    let model_cfg = E2eModelCfg {
        hidden: cfg.hidden.clone(),
        n_freqs: cfg.freqs,
        sigmas: cfg.sigmas.clone(),
        hyper_hidden: cfg.hyper_hidden.clone(),
        seed: cfg.seed,
    };
    let mut model = EndToEndModel::init(&model_cfg, input_norm, mu_norm, target_norm)?;
    let tc = cfg.train_config();
    let val_opt = if cfg.patience.is_some() { Some(&val[..]) } else { None };
    let report = record.stage("train", || train_end_to_end(&mut model, &train, val_opt, &tc))?;
    record.stage("save", || write_checkpoint(out, model.to_container()?))?;
    if let Some(last) = report.train_history.last() {
        record.metric("final_train_loss", *last);
    }
    if let Some(best) = report.best_epoch {
        record.metric("best_epoch", best as f64);
    }
    record.write(out.parent().unwrap_or(Path::new(".")))?;
    println!("trained end-to-end model on {} samples -> {}", train.len(), out.display());
    Ok(())
}

// ── encoders ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderTrainCfg {
    pub hidden: Vec<usize>,
    pub sigmas: Vec<f64>,
    pub freqs: usize,
    pub d_z: usize,
    pub hyper_hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub batch: usize,
    pub train_res: Option<usize>,
    pub first_order: bool,
    pub seed: u64,
    pub threads: usize,
}

impl Default for EncoderTrainCfg {
    fn default() -> Self {
        // Geometry (input) encoder defaults.
        EncoderTrainCfg {
            hidden: vec![128; 5],
            sigmas: vec![1.0],
            freqs: 64,
            d_z: 64,
            hyper_hidden: vec![],
            epochs: 7500,
            lr: 3e-5,
            inner_steps: 3,
            inner_lr: 0.01,
            batch: 32,
            train_res: Some(5000),
            first_order: false,
            seed: 0,
            threads: 1,
        }
    }
}

impl EncoderTrainCfg {
    pub fn default_for_role(role: &str) -> Result<Self> {
        match role {
            "input" => Ok(Self::default()),
            "output" => Ok(EncoderTrainCfg {
                hidden: vec![256; 5],
                sigmas: vec![1.0, 5.0],
                d_z: 128,
                epochs: 1000,
                ..Self::default()
            }),
            other => bail!("unknown encoder role `{other}` (expected input|output)"),
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            lr: self.lr,
            inner_steps: self.inner_steps,
            inner_lr: self.inner_lr,
            training_resolution: self.train_res,
            seed: self.seed,
            first_order: self.first_order,
            threads: self.threads,
            ..Default::default()
        }
    }

    fn model_cfg(&self) -> EncoderModelCfg {
        EncoderModelCfg {
            hidden: self.hidden.clone(),
            n_freqs: self.freqs,
            sigmas: self.sigmas.clone(),
            d_z: self.d_z,
            hyper_hidden: self.hyper_hidden.clone(),
            seed: self.seed,
        }
    }
}

/// Build the geometry-encoder training set: one sample per train shape,
/// points and SDF values from its cloud.
fn sdf_training_samples(
    ds: &nfs_core::data::Dataset,
    train_idx: &[usize],
) -> Result<(Vec<PreparedSample>, Normalizer, Normalizer)> {
    let clouds = common::load_clouds(ds, train_idx)?;
    if clouds.is_empty() {
        bail!("no SDF clouds found for the training shapes");
    }
    let points: Vec<Tensor> = clouds.values().map(|c| c.points.clone()).collect();
    let sdfs: Vec<Tensor> = clouds.values().map(|c| c.sdf_tensor()).collect();
    let input_norm = Normalizer::fit(points.iter())?;
    let target_norm = Normalizer::fit(sdfs.iter())?;
    let samples = clouds
        .values()
        .map(|c| {
            Ok(PreparedSample {
                id: c.shape_id.clone(),
                shape_id: c.shape_id.clone(),
                inputs: input_norm.transform(&c.points)?,
                targets: target_norm.transform(&c.sdf_tensor())?,
                mu: vec![],
            })
        })
        .collect::<Result<Vec<_>, nfs_core::data::DataError>>()?;
    Ok((samples, input_norm, target_norm))
}

pub fn run_train_encoder(role: &str, data: &Path, out: &Path, cfg: EncoderTrainCfg) -> Result<()> {
    let mut record = RunRecord::new(&format!("train encoder --role {role}"), &cfg, cfg.seed);
    let ds = common::load_dataset(data)?;
    let splits = Splits::load_or_init(&ds, data)?;
    let (train_idx, _, _) = splits.indices(&ds)?;

    let (samples, input_norm, target_norm) = match role {
        "input" => sdf_training_samples(&ds, &train_idx)?,
        "output" => {
            let with_normals = ds.samples.iter().all(|s| s.geometry.normals.is_some());
            let (input_norm, mu_norm, target_norm) =
                fit_normalizers(&ds, &train_idx, with_normals)?;
            let samples = prepare_samples(
                &ds,
                &train_idx,
                &input_norm,
                &mu_norm,
                &target_norm,
                with_normals,
            )?;
            (samples, input_norm, target_norm)
        }
        other => bail!("unknown encoder role `{other}`"),
    };

    let mut model = EncoderModel::init(
        &cfg.model_cfg(),
        cfg.inner_steps,
        cfg.inner_lr,
        input_norm,
        target_norm,
    )?;
    let tc = cfg.train_config();
    let report = record.stage("train", || train_encoder(&mut model, &samples, &tc))?;
    record.stage("save", || {
        let mut c = model.to_container()?;
        c.push_text("role", role)?;
        write_checkpoint(out, c)
    })?;
    if let Some(last) = report.train_history.last() {
        record.metric("final_train_loss", *last);
    }
    record.write(out.parent().unwrap_or(Path::new(".")))?;
    println!(
        "trained {role} encoder on {} samples ({} epochs) -> {}",
        samples.len(),
        cfg.epochs,
        out.display()
    );
    Ok(())
}

// ── latent encoding ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodeLatentsCfg {
    /// Splits whose samples get latent pairs (processor train/val data).
    pub parts: Vec<String>,
    pub seed: u64,
}

impl Default for EncodeLatentsCfg {
    fn default() -> Self {
        EncodeLatentsCfg { parts: vec!["train".into(), "val".into()], seed: 0 }
    }
}

pub fn run_encode_latents(
    data: &Path,
    enc_in_path: &Path,
    enc_out_path: &Path,
    out: &Path,
    cfg: EncodeLatentsCfg,
) -> Result<()> {
    let mut record = RunRecord::new("encode latents", &cfg, cfg.seed);
    let ds = common::load_dataset(data)?;
    let splits = Splits::load_or_init(&ds, data)?;
    let enc_in = EncoderModel::load(enc_in_path).context("loading input encoder")?;
    let enc_out = EncoderModel::load(enc_out_path).context("loading output encoder")?;

    let mut idx = Vec::new();
    let (train_idx, val_idx, test_idx) = splits.indices(&ds)?;
    for part in &cfg.parts {
        match part.as_str() {
            "train" => idx.extend(&train_idx),
            "val" => idx.extend(&val_idx),
            "test" => idx.extend(&test_idx),
            other => bail!("unknown split part `{other}` in encode latents"),
        }
    }
    let clouds = common::load_clouds(&ds, &idx)?;
    let with_normals = enc_out.input_norm.width() == 2 * ds.coord_dim();
    let latents = record.stage("encode", || {
        encode_dataset(&enc_in, &enc_out, &ds, &idx, &clouds, with_normals)
    })?;
    record.stage("save", || -> Result<()> {
        write_checkpoint(out, latents.to_container()?)
    })?;
    record.metric("pairs", latents.len() as f64);
    record.write(out.parent().unwrap_or(Path::new(".")))?;
    println!("encoded {} latent pairs -> {}", latents.len(), out.display());
    Ok(())
}

// ── processor ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProcessorTrainCfg {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for ProcessorTrainCfg {
    fn default() -> Self {
        ProcessorTrainCfg {
            hidden: vec![128, 128, 128],
            epochs: 1000,
            batch: 128,
            lr: 5e-6,
            patience: Some(200),
            seed: 0,
        }
    }
}

pub fn run_train_processor(
    data: &Path,
    latents_path: &Path,
    out: &Path,
    cfg: ProcessorTrainCfg,
) -> Result<()> {
    let mut record = RunRecord::new("train processor", &cfg, cfg.seed);
    let ds = common::load_dataset(data)?;
    let splits = Splits::load_or_init(&ds, data)?;
    let latents = LatentDataset::load(latents_path).context("loading latent dataset")?;
    if latents.is_empty() {
        bail!("latent dataset {} is empty", latents_path.display());
    }
    let in_part = |ids: &[String], id: &str| ids.iter().any(|x| x == id);
    let train: Vec<_> = latents
        .pairs
        .iter()
        .filter(|p| in_part(&splits.train, &p.sample_id))
        .cloned()
        .collect();
    let val: Vec<_> = latents
        .pairs
        .iter()
        .filter(|p| in_part(&splits.val, &p.sample_id))
        .cloned()
        .collect();
    if train.is_empty() {
        bail!("no latent pairs belong to the train split");
    }

    let mu_rows: Vec<f64> = train.iter().flat_map(|p| p.mu.iter().copied()).collect();
    let mu_block = Tensor::new(vec![train.len(), latents.d_p()], mu_rows)?;
    let mu_norm = Normalizer::fit([&mu_block])?;
    let mut proc = Processor::init(
        &ProcessorCfg { hidden: cfg.hidden.clone(), seed: cfg.seed },
        latents.d_in(),
        latents.d_out(),
        mu_norm,
    );
    let tc = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch,
        lr: cfg.lr,
        patience: cfg.patience,
        seed: cfg.seed,
        ..Default::default()
    };
    let val_opt = if val.is_empty() { None } else { Some(&val[..]) };
    let report = record.stage("train", || train_processor(&mut proc, &train, val_opt, &tc))?;
    record.stage("save", || write_checkpoint(out, proc.to_container()?))?;
    if let Some(last) = report.train_history.last() {
        record.metric("final_train_loss", *last);
    }
    if let Some(best) = report.best_epoch {
        record.metric("best_epoch", best as f64);
        record.metric("best_val_loss", report.val_history[best]);
    }
    record.write(out.parent().unwrap_or(Path::new(".")))?;
    println!(
        "trained processor on {} pairs (val {}) -> {}",
        train.len(),
        val.len(),
        out.display()
    );
    Ok(())
}
