//! Protocol studies: frequency-scale comparison on a single broadband
//! signal, and the train/eval resolution matrix.

use crate::common::{self, Splits};
use crate::runrecord::{fmt_f64, write_csv, RunRecord};
use anyhow::{Context, Result};
use nfs_core::data::mse;
use nfs_core::pipeline::{
    fit_normalizers, fit_single_field, prepare_samples, train_end_to_end, E2eModelCfg,
    EndToEndModel, SingleFitCfg, TrainConfig,
};
use nfs_core::synth::{energy_above_band, gen_airfoil_2d, gen_broadband_1d, Broadband1DCfg};
use nfs_core::tensor::Tensor;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::path::Path;

// ── sigma study ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SigmaStudyCfg {
    pub points: usize,
    pub train_fraction: f64,
    /// (frequency, amplitude) pairs of the target signal.
    pub components: Vec<(f64, f64)>,
    pub hidden: Vec<usize>,
    pub freqs: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Each entry trains one single-scale model.
    pub single_sigmas: Vec<f64>,
    /// Scales of the one multiscale model.
    pub multi_sigmas: Vec<f64>,
    /// Dense grid used for the reconstruction spectrum.
    pub spectrum_points: usize,
    pub seed: u64,
}

impl Default for SigmaStudyCfg {
    fn default() -> Self {
        let base = Broadband1DCfg::default();
        SigmaStudyCfg {
            points: base.n_points,
            train_fraction: base.train_fraction,
            components: base.components,
            hidden: vec![64, 64, 64],
            freqs: 64,
            epochs: 3000,
            lr: 1e-3,
            single_sigmas: vec![1.0, 5.0],
            multi_sigmas: vec![1.0, 5.0],
            spectrum_points: 4096,
            seed: 0,
        }
    }
}

fn sigma_label(sigmas: &[f64]) -> String {
    sigmas.iter().map(|s| fmt_f64(*s)).collect::<Vec<_>>().join("_")
}

#[derive(Debug, Clone)]
pub struct SigmaRow {
    pub model: String,
    pub heldout_mse: f64,
    pub energy_above_band: f64,
}

pub fn run_study_sigma(out: &Path, cfg: SigmaStudyCfg) -> Result<Vec<SigmaRow>> {
    let mut record = RunRecord::new("study sigma", &cfg, cfg.seed);
    let signal_cfg = Broadband1DCfg {
        components: cfg.components.clone(),
        n_points: cfg.points,
        train_fraction: cfg.train_fraction,
        seed: cfg.seed,
    };
    let data = gen_broadband_1d(&signal_cfg);
    let train_x = data.points_tensor(&data.train_idx);
    let train_y = data.values_tensor(&data.train_idx);
    let test_x = data.points_tensor(&data.test_idx);
    let test_y = data.values_tensor(&data.test_idx);
    let top_band = signal_cfg.top_band();

    // Dense uniform grid for spectral analysis of the reconstructions.
    let grid = Tensor::new(
        vec![cfg.spectrum_points, 1],
        (0..cfg.spectrum_points)
            .map(|i| i as f64 / cfg.spectrum_points as f64)
            .collect(),
    )?;

    let mut variants: Vec<(String, Vec<f64>)> = cfg
        .single_sigmas
        .iter()
        .map(|&s| (format!("sigma_{}", fmt_f64(s)), vec![s]))
        .collect();
    variants.push((format!("multiscale_{}", sigma_label(&cfg.multi_sigmas)), cfg.multi_sigmas.clone()));

    let mut rows = Vec::with_capacity(variants.len());
    for (label, sigmas) in variants {
        let fit_cfg = SingleFitCfg {
            hidden: cfg.hidden.clone(),
            n_freqs: cfg.freqs,
            sigmas,
            epochs: cfg.epochs,
            lr: cfg.lr,
            seed: cfg.seed,
        };
        let (model, _) = record.stage(&format!("fit_{label}"), || {
            fit_single_field(&train_x, &train_y, &fit_cfg)
        })?;
        let pred = model.predict_normalized(&test_x)?;
        let truth = model.target_norm.transform(&test_y)?;
        let heldout = mse(pred.data(), truth.data())?;
        let dense = model.predict_normalized(&grid)?;
        let energy = energy_above_band(dense.data(), top_band);
        record.metric(&format!("{label}_mse"), heldout);
        record.metric(&format!("{label}_energy_above_band"), energy);
        rows.push(SigmaRow { model: label, heldout_mse: heldout, energy_above_band: energy });
    }

    std::fs::create_dir_all(out)?;
    write_csv(
        &out.join("metrics.csv"),
        "model,heldout_mse,energy_above_band",
        &rows
            .iter()
            .map(|r| vec![r.model.clone(), fmt_f64(r.heldout_mse), fmt_f64(r.energy_above_band)])
            .collect::<Vec<_>>(),
    )?;
    record.write(out)?;
    for r in &rows {
        println!(
            "{:>20}: held-out mse {:.4e}, above-band energy {:.4e}",
            r.model, r.heldout_mse, r.energy_above_band
        );
    }
    Ok(rows)
}

// ── discretization study ───────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscretizationStudyCfg {
    /// Training resolutions; `full` means every node.
    pub resolutions: Vec<String>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub sigmas: Vec<f64>,
    pub freqs: usize,
    pub hidden: Vec<usize>,
    pub hyper_hidden: Vec<usize>,
    pub eval_split: String,
    pub seed: u64,
    pub threads: usize,
    /// Generate this synthetic airfoil dataset when the data directory has
    /// no manifest yet (nodes, grid m, grid a).
    pub gen_nodes: usize,
    pub gen_grid: (usize, usize),
}

impl Default for DiscretizationStudyCfg {
    fn default() -> Self {
        DiscretizationStudyCfg {
            resolutions: vec!["500".into(), "5000".into(), "full".into()],
            epochs: 5000,
            batch: 16,
            lr: 2e-5,
            sigmas: vec![1.0, 5.0],
            freqs: 64,
            hidden: vec![128, 128, 128, 128],
            hyper_hidden: vec![128, 128],
            eval_split: "test".into(),
            seed: 0,
            threads: 1,
            gen_nodes: 3000,
            gen_grid: (8, 8),
        }
    }
}

fn parse_resolution(s: &str) -> Result<Option<usize>> {
    if s == "full" {
        Ok(None)
    } else {
        Ok(Some(s.parse::<usize>().with_context(|| format!("bad resolution `{s}`"))?))
    }
}

#[derive(Debug, Clone)]
pub struct DiscretizationRow {
    pub train_res: String,
    pub eval_res: String,
    pub mse: f64,
}

pub fn run_study_discretization(
    data: &Path,
    out: &Path,
    cfg: DiscretizationStudyCfg,
) -> Result<Vec<DiscretizationRow>> {
    let mut record = RunRecord::new("study discretization", &cfg, cfg.seed);
    if !data.join("manifest.json").exists() {
        eprintln!("note: no dataset at {}; generating the synthetic 2d dataset", data.display());
        let gen_cfg = nfs_core::synth::Airfoil2DCfg {
            n_nodes: cfg.gen_nodes,
            grid: cfg.gen_grid,
            front_width: 0.03,
            seed: cfg.seed,
        };
        gen_airfoil_2d(&gen_cfg).write_dataset(data)?;
    }
    let ds = common::load_dataset(data)?;
    let splits = Splits::load_or_init(&ds, data)?;
    let (train_idx, val_idx, test_idx) = splits.indices(&ds)?;
    let eval_idx = match cfg.eval_split.as_str() {
        "train" => &train_idx,
        "val" => &val_idx,
        _ => &test_idx,
    };

    let (input_norm, mu_norm, target_norm) = fit_normalizers(&ds, &train_idx, false)?;
    let train = prepare_samples(&ds, &train_idx, &input_norm, &mu_norm, &target_norm, false)?;

    let mut rows = Vec::new();
    for res_label in &cfg.resolutions {
        let train_res = parse_resolution(res_label)?;
        let model_cfg = E2eModelCfg {
            hidden: cfg.hidden.clone(),
            n_freqs: cfg.freqs,
            sigmas: cfg.sigmas.clone(),
            hyper_hidden: cfg.hyper_hidden.clone(),
            seed: cfg.seed,
        };
        let mut model = EndToEndModel::init(
            &model_cfg,
            input_norm.clone(),
            mu_norm.clone(),
            target_norm.clone(),
        )?;
        let tc = TrainConfig {
            epochs: cfg.epochs,
            batch_size: cfg.batch,
            lr: cfg.lr,
            training_resolution: train_res,
            seed: cfg.seed,
            threads: cfg.threads,
            ..Default::default()
        };
        record.stage(&format!("train_res_{res_label}"), || {
            train_end_to_end(&mut model, &train, None, &tc)
        })?;
        model.save(out.join(format!("e2e_res_{res_label}.nfsb")))?;

        for eval_label in &cfg.resolutions {
            let eval_res = parse_resolution(eval_label)?;
            let mut per_sample = Vec::with_capacity(eval_idx.len());
            for (k, &i) in eval_idx.iter().enumerate() {
                let s = &ds.samples[i];
                let n = s.num_points();
                let rows_sel: Vec<usize> = match eval_res {
                    Some(r) if r < n => {
                        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
                            cfg.seed.wrapping_add(k as u64),
                        );
                        rand::seq::index::sample(&mut rng, n, r).iter().collect()
                    }
                    _ => (0..n).collect(),
                };
                let w = s.geometry.points.shape()[1];
                let pts = Tensor::new(
                    vec![rows_sel.len(), w],
                    rows_sel.iter().flat_map(|&r| s.geometry.points.row(r).to_vec()).collect(),
                )?;
                let truth = Tensor::new(
                    vec![rows_sel.len(), ds.d_u()],
                    rows_sel.iter().flat_map(|&r| s.field.row(r).to_vec()).collect(),
                )?;
                let pred = model.predict_normalized(&pts, &s.mu)?;
                let truth_n = model.target_norm.transform(&truth)?;
                per_sample.push(mse(pred.data(), truth_n.data())?);
            }
            let mean = nfs_core::data::dataset_mse(&per_sample)?;
            record.metric(&format!("mse_train_{res_label}_eval_{eval_label}"), mean);
            rows.push(DiscretizationRow {
                train_res: res_label.clone(),
                eval_res: eval_label.clone(),
                mse: mean,
            });
        }
    }

    std::fs::create_dir_all(out)?;
    write_csv(
        &out.join("metrics.csv"),
        "train_res,eval_res,mse",
        &rows
            .iter()
            .map(|r| vec![r.train_res.clone(), r.eval_res.clone(), fmt_f64(r.mse)])
            .collect::<Vec<_>>(),
    )?;
    record.write(out)?;
    for r in &rows {
        println!("train {:>6} eval {:>6}: mse {:.5e}", r.train_res, r.eval_res, r.mse);
    }
    Ok(rows)
}
