//! `nfs`: batch command-line surface for the neural-field surrogate
//! pipelines. Every flag has a default; a JSON config file (--config) can
//! override defaults, and explicit flags override both. Each run writes a
//! `run_record.json` with the resolved config, seed and stage timings.

mod commands;
mod common;
mod runrecord;
mod study;
mod train;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "nfs", version, about = "Neural-field surrogate models for steady fields on meshes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic datasets
    Synth {
        #[command(subcommand)]
        what: SynthCmd,
    },
    /// Validate manifests and build splits
    Data {
        #[command(subcommand)]
        what: DataCmd,
    },
    /// Signed-distance preprocessing
    Sdf {
        #[command(subcommand)]
        what: SdfCmd,
    },
    /// Train models
    Train {
        #[command(subcommand)]
        what: TrainCmd,
    },
    /// Encode latent datasets from trained encoders
    Encode {
        #[command(subcommand)]
        what: EncodeCmd,
    },
    /// Encode-process-decode prediction for one shape and parameter vector
    Predict(PredictArgs),
    /// Per-sample and aggregate MSE of a trained model on a dataset split
    Eval(EvalArgs),
    /// Classical POD+GPR baseline
    Podgpr {
        #[command(subcommand)]
        what: PodgprCmd,
    },
    /// Experimental protocols (resolution matrix, frequency scales)
    Study {
        #[command(subcommand)]
        what: StudyCmd,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON file whose keys override the built-in defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the fully resolved config as JSON and exit
    #[arg(long)]
    print_config: bool,
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Single broadband 1D signal
    Broadband1d {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        train_fraction: Option<f64>,
        /// Components as freq:amp pairs, e.g. "2:1,11:0.5,37:0.25"
        #[arg(long)]
        components: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fixed-mesh 2D dataset with a moving front
    Airfoil2d {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        nodes: Option<usize>,
        /// Parameter grid, e.g. "8x8"
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        front_width: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Parametric 3D wing family with meshes and surface fields
    Wing3d {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        shapes: Option<usize>,
        #[arg(long)]
        conditions: Option<usize>,
        #[arg(long)]
        span_sections: Option<usize>,
        #[arg(long)]
        ring_points: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Subcommand)]
enum DataCmd {
    /// Validate a dataset manifest and its referenced files
    Check {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Create a persistent train/val/test split
    Split {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Fractions, e.g. "0.7,0.1,0.2"
        #[arg(long, default_value = "0.7,0.1,0.2")]
        fractions: String,
        /// by-sample | by-shape
        #[arg(long, default_value = "by-sample")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum SdfCmd {
    /// Sample SDF clouds for every shape in a dataset
    Prepare {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        n_total: Option<usize>,
        #[arg(long)]
        uniform_fraction: Option<f64>,
        /// Surface noise stds, e.g. "0.005,0.0005"
        #[arg(long)]
        sigmas: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Args)]
struct CommonTrainFlags {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Subcommand)]
enum TrainCmd {
    /// End-to-end model: hypernetwork on raw parameters
    E2e {
        #[command(flatten)]
        common: CommonTrainFlags,
        /// Encoding scale stds, e.g. "1,5"
        #[arg(long)]
        sigmas: Option<String>,
        /// Frequencies per scale
        #[arg(long)]
        freqs: Option<usize>,
        /// Hidden widths, e.g. "128,128,128,128"
        #[arg(long)]
        hidden: Option<String>,
        #[arg(long)]
        hyper_hidden: Option<String>,
        /// Points per sample per epoch ("full" disables subsampling)
        #[arg(long)]
        train_res: Option<String>,
        #[arg(long)]
        patience: Option<usize>,
    },
    /// Meta-learned encoder (geometry or output fields)
    Encoder {
        /// input (SDF geometry) | output (surface fields)
        #[arg(long)]
        role: String,
        #[command(flatten)]
        common: CommonTrainFlags,
        #[arg(long)]
        sigmas: Option<String>,
        #[arg(long)]
        freqs: Option<usize>,
        #[arg(long)]
        hidden: Option<String>,
        #[arg(long)]
        hyper_hidden: Option<String>,
        #[arg(long)]
        d_z: Option<usize>,
        #[arg(long)]
        inner_steps: Option<usize>,
        #[arg(long)]
        inner_lr: Option<f64>,
        #[arg(long)]
        train_res: Option<String>,
        /// First-order meta-learning (cheaper, less accurate gradients)
        #[arg(long)]
        first_order: bool,
    },
    /// Latent processor MLP
    Processor {
        #[command(flatten)]
        common: CommonTrainFlags,
        /// Latent dataset produced by `nfs encode latents`
        #[arg(long)]
        latents: PathBuf,
        #[arg(long)]
        hidden: Option<String>,
        #[arg(long)]
        patience: Option<usize>,
    },
}

#[derive(Subcommand)]
enum EncodeCmd {
    /// Build the latent-pair dataset from the two trained encoders
    Latents {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        encoder_in: PathBuf,
        #[arg(long)]
        encoder_out: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Splits to encode, e.g. "train,val"
        #[arg(long)]
        parts: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    encoder_in: PathBuf,
    #[arg(long)]
    processor: PathBuf,
    #[arg(long)]
    encoder_out: PathBuf,
    /// Shape mesh (.obj or binary container)
    #[arg(long)]
    shape: PathBuf,
    /// Precomputed SDF cloud (skips sampling); conflicts with --sdf-* flags
    #[arg(long)]
    sdf_cloud: Option<PathBuf>,
    /// Parameter vector, e.g. "0.8,3,0"
    #[arg(long)]
    mu: String,
    #[arg(long)]
    out: PathBuf,
    /// Geometry-latent cache file (JSON), reused across calls
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Query at this many surface nodes instead of all
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    sdf_n_total: Option<usize>,
    #[arg(long)]
    sdf_uniform_fraction: Option<f64>,
    #[arg(long)]
    sdf_sigmas: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// End-to-end checkpoint; conflicts with the encoder/processor trio
    #[arg(long)]
    e2e: Option<PathBuf>,
    #[arg(long)]
    encoder_in: Option<PathBuf>,
    #[arg(long)]
    processor: Option<PathBuf>,
    #[arg(long)]
    encoder_out: Option<PathBuf>,
    /// train | val | test
    #[arg(long)]
    split: Option<String>,
    /// Evaluate on this many nodes per sample (seeded subsample)
    #[arg(long)]
    resolution: Option<usize>,
    /// Report MSE in physical units instead of standardized units
    #[arg(long)]
    physical_units: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Subcommand)]
enum PodgprCmd {
    /// Fit the POD basis and GP regressor on the train split
    Fit {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        modes: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        noise_floor: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Reconstruct the field at a parameter vector
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        mu: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum StudyCmd {
    /// Cross-resolution MSE matrix (train low, evaluate high)
    Discretization {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Training/eval resolutions, e.g. "500,5000,full"
        #[arg(long)]
        resolutions: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        sigmas: Option<String>,
        #[arg(long)]
        freqs: Option<usize>,
        #[arg(long)]
        hidden: Option<String>,
        #[arg(long)]
        hyper_hidden: Option<String>,
        #[arg(long)]
        gen_nodes: Option<usize>,
        #[arg(long)]
        gen_grid: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Single- vs multi-scale encoding on the broadband 1D signal
    Sigma {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        train_fraction: Option<f64>,
        #[arg(long)]
        components: Option<String>,
        #[arg(long)]
        hidden: Option<String>,
        #[arg(long)]
        freqs: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Stds of the single-scale variants, e.g. "1,5"
        #[arg(long)]
        single_sigmas: Option<String>,
        /// Stds of the multiscale variant, e.g. "1,5"
        #[arg(long)]
        multi_sigmas: Option<String>,
        #[arg(long)]
        spectrum_points: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn parse_components(s: &str) -> Result<Vec<(f64, f64)>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            let (f, a) = t
                .split_once(':')
                .ok_or_else(|| anyhow::anyhow!("component `{t}` must be freq:amp"))?;
            Ok((f.trim().parse()?, a.trim().parse()?))
        })
        .collect()
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once('x')
        .ok_or_else(|| anyhow::anyhow!("grid `{s}` must look like 8x8"))?;
    Ok((a.parse()?, b.parse()?))
}

fn parse_train_res(s: &str) -> Result<Option<usize>> {
    if s == "full" {
        Ok(None)
    } else {
        Ok(Some(s.parse()?))
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth { what } => match what {
            SynthCmd::Broadband1d { out, points, train_fraction, components, seed } => {
                let mut cfg = nfs_core::synth::Broadband1DCfg::default();
                if let Some(p) = points {
                    cfg.n_points = p;
                }
                if let Some(f) = train_fraction {
                    cfg.train_fraction = f;
                }
                if let Some(c) = components {
                    cfg.components = parse_components(&c)?;
                }
                if let Some(s) = seed {
                    cfg.seed = s;
                }
                commands::run_synth_broadband(&out, cfg)
            }
            SynthCmd::Airfoil2d { out, nodes, grid, front_width, seed } => {
                let mut cfg = nfs_core::synth::Airfoil2DCfg::default();
                if let Some(n) = nodes {
                    cfg.n_nodes = n;
                }
                if let Some(g) = grid {
                    cfg.grid = parse_grid(&g)?;
                }
                if let Some(w) = front_width {
                    cfg.front_width = w;
                }
                if let Some(s) = seed {
                    cfg.seed = s;
                }
                commands::run_synth_airfoil(&out, cfg)
            }
            SynthCmd::Wing3d { out, shapes, conditions, span_sections, ring_points, seed } => {
                let mut cfg = nfs_core::synth::Wing3DCfg::default();
                if let Some(n) = shapes {
                    cfg.n_shapes = n;
                }
                if let Some(k) = conditions {
                    cfg.conditions_per_shape = k;
                }
                if let Some(j) = span_sections {
                    cfg.span_sections = j;
                }
                if let Some(k) = ring_points {
                    cfg.ring_points = k;
                }
                if let Some(s) = seed {
                    cfg.seed = s;
                }
                commands::run_synth_wing(&out, cfg)
            }
        },
        Command::Data { what } => match what {
            DataCmd::Check { data } => commands::run_data_check(&common::data_dir(data)?),
            DataCmd::Split { data, fractions, mode, seed, out } => {
                let f = common::parse_f64_list(&fractions)?;
                if f.len() != 3 {
                    bail!("--fractions needs three values");
                }
                commands::run_data_split(
                    &common::data_dir(data)?,
                    (f[0], f[1], f[2]),
                    &mode,
                    seed,
                    out,
                )
            }
        },
        Command::Sdf { what } => match what {
            SdfCmd::Prepare { data, n_total, uniform_fraction, sigmas, seed, config } => {
                let cfg = common::resolve_config(
                    commands::SdfPrepareCfg::default(),
                    config.config.as_deref(),
                    |c: &mut commands::SdfPrepareCfg| {
                        if let Some(n) = n_total {
                            c.n_total = n;
                        }
                        if let Some(f) = uniform_fraction {
                            c.uniform_fraction = f;
                        }
                        if let Some(s) = &sigmas {
                            c.sigmas = common::parse_f64_list(s).unwrap_or(c.sigmas.clone());
                        }
                        if let Some(s) = seed {
                            c.seed = s;
                        }
                    },
                )?;
                if common::maybe_print_config(config.print_config, &cfg)? {
                    return Ok(());
                }
                commands::run_sdf_prepare(&common::data_dir(data)?, cfg)
            }
        },
        Command::Train { what } => match what {
            TrainCmd::E2e { common: c, sigmas, freqs, hidden, hyper_hidden, train_res, patience } => {
                let cfg = common::resolve_config(
                    train::E2eTrainCfg::default(),
                    c.config.config.as_deref(),
                    |cfg: &mut train::E2eTrainCfg| {
                        apply_common(cfg_common_mut_e2e(cfg), &c);
                        if let Some(s) = &sigmas {
                            cfg.sigmas = common::parse_f64_list(s).unwrap_or(cfg.sigmas.clone());
                        }
                        if let Some(f) = freqs {
                            cfg.freqs = f;
                        }
                        if let Some(h) = &hidden {
                            cfg.hidden = common::parse_usize_list(h).unwrap_or(cfg.hidden.clone());
                        }
                        if let Some(h) = &hyper_hidden {
                            cfg.hyper_hidden =
                                common::parse_usize_list(h).unwrap_or(cfg.hyper_hidden.clone());
                        }
                        if let Some(r) = &train_res {
                            cfg.train_res = parse_train_res(r).unwrap_or(cfg.train_res);
                        }
                        if patience.is_some() {
                            cfg.patience = patience;
                        }
                    },
                )?;
                if common::maybe_print_config(c.config.print_config, &cfg)? {
                    return Ok(());
                }
                train::run_train_e2e(&common::data_dir(c.data)?, &c.out, cfg)
            }
            TrainCmd::Encoder {
                role,
                common: c,
                sigmas,
                freqs,
                hidden,
                hyper_hidden,
                d_z,
                inner_steps,
                inner_lr,
                train_res,
                first_order,
            } => {
                let base = train::EncoderTrainCfg::default_for_role(&role)?;
                let cfg = common::resolve_config(
                    base,
                    c.config.config.as_deref(),
                    |cfg: &mut train::EncoderTrainCfg| {
                        if let Some(e) = c.epochs {
                            cfg.epochs = e;
                        }
                        if let Some(b) = c.batch {
                            cfg.batch = b;
                        }
                        if let Some(l) = c.lr {
                            cfg.lr = l;
                        }
                        if let Some(s) = c.seed {
                            cfg.seed = s;
                        }
                        if let Some(t) = c.threads {
                            cfg.threads = t;
                        }
                        if let Some(s) = &sigmas {
                            cfg.sigmas = common::parse_f64_list(s).unwrap_or(cfg.sigmas.clone());
                        }
                        if let Some(f) = freqs {
                            cfg.freqs = f;
                        }
                        if let Some(h) = &hidden {
                            cfg.hidden = common::parse_usize_list(h).unwrap_or(cfg.hidden.clone());
                        }
                        if let Some(h) = &hyper_hidden {
                            cfg.hyper_hidden =
                                common::parse_usize_list(h).unwrap_or(cfg.hyper_hidden.clone());
                        }
                        if let Some(d) = d_z {
                            cfg.d_z = d;
                        }
                        if let Some(k) = inner_steps {
                            cfg.inner_steps = k;
                        }
                        if let Some(l) = inner_lr {
                            cfg.inner_lr = l;
                        }
                        if let Some(r) = &train_res {
                            cfg.train_res = parse_train_res(r).unwrap_or(cfg.train_res);
                        }
                        if first_order {
                            cfg.first_order = true;
                        }
                    },
                )?;
                if common::maybe_print_config(c.config.print_config, &cfg)? {
                    return Ok(());
                }
                train::run_train_encoder(&role, &common::data_dir(c.data)?, &c.out, cfg)
            }
            TrainCmd::Processor { common: c, latents, hidden, patience } => {
                let cfg = common::resolve_config(
                    train::ProcessorTrainCfg::default(),
                    c.config.config.as_deref(),
                    |cfg: &mut train::ProcessorTrainCfg| {
                        if let Some(e) = c.epochs {
                            cfg.epochs = e;
                        }
                        if let Some(b) = c.batch {
                            cfg.batch = b;
                        }
                        if let Some(l) = c.lr {
                            cfg.lr = l;
                        }
                        if let Some(s) = c.seed {
                            cfg.seed = s;
                        }
                        if let Some(h) = &hidden {
                            cfg.hidden = common::parse_usize_list(h).unwrap_or(cfg.hidden.clone());
                        }
                        if patience.is_some() {
                            cfg.patience = patience;
                        }
                    },
                )?;
                if common::maybe_print_config(c.config.print_config, &cfg)? {
                    return Ok(());
                }
                train::run_train_processor(&common::data_dir(c.data)?, &latents, &c.out, cfg)
            }
        },
        Command::Encode { what } => match what {
            EncodeCmd::Latents { data, encoder_in, encoder_out, out, parts, seed, config } => {
                let cfg = common::resolve_config(
                    train::EncodeLatentsCfg::default(),
                    config.config.as_deref(),
                    |cfg: &mut train::EncodeLatentsCfg| {
                        if let Some(p) = &parts {
                            cfg.parts = p.split(',').map(|s| s.trim().to_string()).collect();
                        }
                        if let Some(s) = seed {
                            cfg.seed = s;
                        }
                    },
                )?;
                if common::maybe_print_config(config.print_config, &cfg)? {
                    return Ok(());
                }
                train::run_encode_latents(
                    &common::data_dir(data)?,
                    &encoder_in,
                    &encoder_out,
                    &out,
                    cfg,
                )
            }
        },
        Command::Predict(args) => {
            if args.sdf_cloud.is_some()
                && (args.sdf_n_total.is_some()
                    || args.sdf_uniform_fraction.is_some()
                    || args.sdf_sigmas.is_some())
            {
                bail!(
                    "conflicting flags: --sdf-cloud cannot be combined with \
                     --sdf-n-total/--sdf-uniform-fraction/--sdf-sigmas"
                );
            }
            let cfg = common::resolve_config(
                commands::PredictCfg::default(),
                args.config.config.as_deref(),
                |cfg: &mut commands::PredictCfg| {
                    if args.resolution.is_some() {
                        cfg.resolution = args.resolution;
                    }
                    if let Some(n) = args.sdf_n_total {
                        cfg.sdf.n_total = n;
                    }
                    if let Some(f) = args.sdf_uniform_fraction {
                        cfg.sdf.uniform_fraction = f;
                    }
                    if let Some(s) = &args.sdf_sigmas {
                        cfg.sdf.sigmas = common::parse_f64_list(s).unwrap_or(cfg.sdf.sigmas.clone());
                    }
                    if let Some(s) = args.seed {
                        cfg.seed = s;
                        cfg.sdf.seed = s;
                    }
                },
            )?;
            if common::maybe_print_config(args.config.print_config, &cfg)? {
                return Ok(());
            }
            let mu = common::parse_f64_list(&args.mu)?;
            commands::run_predict(
                commands::PredictArgs {
                    enc_in: args.encoder_in,
                    processor: args.processor,
                    enc_out: args.encoder_out,
                    shape: args.shape,
                    sdf_cloud: args.sdf_cloud,
                    mu,
                    out: args.out,
                    cache: args.cache,
                },
                cfg,
            )
        }
        Command::Eval(args) => {
            let trio =
                [&args.encoder_in, &args.processor, &args.encoder_out].iter().filter(|p| p.is_some()).count();
            let model = match (&args.e2e, trio) {
                (Some(_), n) if n > 0 => bail!(
                    "conflicting flags: --e2e cannot be combined with \
                     --encoder-in/--processor/--encoder-out"
                ),
                (Some(p), _) => commands::EvalModel::E2e(p.clone()),
                (None, 3) => commands::EvalModel::Epd {
                    enc_in: args.encoder_in.clone().unwrap(),
                    processor: args.processor.clone().unwrap(),
                    enc_out: args.encoder_out.clone().unwrap(),
                },
                (None, 0) => bail!("eval needs --e2e or the full --encoder-in/--processor/--encoder-out trio"),
                (None, _) => bail!("eval needs all three of --encoder-in, --processor, --encoder-out"),
            };
            let cfg = common::resolve_config(
                commands::EvalCfg::default(),
                args.config.config.as_deref(),
                |cfg: &mut commands::EvalCfg| {
                    if let Some(s) = &args.split {
                        cfg.split = s.clone();
                    }
                    if args.resolution.is_some() {
                        cfg.resolution = args.resolution;
                    }
                    if args.physical_units {
                        cfg.physical_units = true;
                    }
                    if let Some(s) = args.seed {
                        cfg.seed = s;
                    }
                },
            )?;
            if common::maybe_print_config(args.config.print_config, &cfg)? {
                return Ok(());
            }
            commands::run_eval(model, &common::data_dir(args.data)?, &args.out, cfg)
        }
        Command::Podgpr { what } => match what {
            PodgprCmd::Fit { data, out, modes, restarts, iters, lr, noise_floor, seed, config } => {
                let cfg = common::resolve_config(
                    commands::PodGprFitCfg::default(),
                    config.config.as_deref(),
                    |cfg: &mut commands::PodGprFitCfg| {
                        if let Some(m) = modes {
                            cfg.modes = m;
                        }
                        if let Some(r) = restarts {
                            cfg.restarts = r;
                        }
                        if let Some(i) = iters {
                            cfg.iters = i;
                        }
                        if let Some(l) = lr {
                            cfg.lr = l;
                        }
                        if let Some(n) = noise_floor {
                            cfg.noise_floor = n;
                        }
                        if let Some(s) = seed {
                            cfg.seed = s;
                        }
                    },
                )?;
                if common::maybe_print_config(config.print_config, &cfg)? {
                    return Ok(());
                }
                commands::run_podgpr_fit(&common::data_dir(data)?, &out, cfg)
            }
            PodgprCmd::Predict { model, mu, out } => {
                commands::run_podgpr_predict(&model, common::parse_f64_list(&mu)?, &out)
            }
        },
        Command::Study { what } => match what {
            StudyCmd::Discretization {
                data,
                out,
                resolutions,
                epochs,
                batch,
                lr,
                sigmas,
                freqs,
                hidden,
                hyper_hidden,
                gen_nodes,
                gen_grid,
                seed,
                threads,
                config,
            } => {
                let cfg = common::resolve_config(
                    study::DiscretizationStudyCfg::default(),
                    config.config.as_deref(),
                    |cfg: &mut study::DiscretizationStudyCfg| {
                        if let Some(r) = &resolutions {
                            cfg.resolutions = r.split(',').map(|s| s.trim().to_string()).collect();
                        }
                        if let Some(e) = epochs {
                            cfg.epochs = e;
                        }
                        if let Some(b) = batch {
                            cfg.batch = b;
                        }
                        if let Some(l) = lr {
                            cfg.lr = l;
                        }
                        if let Some(s) = &sigmas {
                            cfg.sigmas = common::parse_f64_list(s).unwrap_or(cfg.sigmas.clone());
                        }
                        if let Some(f) = freqs {
                            cfg.freqs = f;
                        }
                        if let Some(h) = &hidden {
                            cfg.hidden = common::parse_usize_list(h).unwrap_or(cfg.hidden.clone());
                        }
                        if let Some(h) = &hyper_hidden {
                            cfg.hyper_hidden =
                                common::parse_usize_list(h).unwrap_or(cfg.hyper_hidden.clone());
                        }
                        if let Some(n) = gen_nodes {
                            cfg.gen_nodes = n;
                        }
                        if let Some(g) = &gen_grid {
                            cfg.gen_grid = parse_grid(g).unwrap_or(cfg.gen_grid);
                        }
                        if let Some(s) = seed {
                            cfg.seed = s;
                        }
                        if let Some(t) = threads {
                            cfg.threads = t;
                        }
                    },
                )?;
                if common::maybe_print_config(config.print_config, &cfg)? {
                    return Ok(());
                }
                study::run_study_discretization(&common::data_dir(data)?, &out, cfg).map(|_| ())
            }
            StudyCmd::Sigma {
                out,
                points,
                train_fraction,
                components,
                hidden,
                freqs,
                epochs,
                lr,
                single_sigmas,
                multi_sigmas,
                spectrum_points,
                seed,
                config,
            } => {
                let cfg = common::resolve_config(
                    study::SigmaStudyCfg::default(),
                    config.config.as_deref(),
                    |cfg: &mut study::SigmaStudyCfg| {
                        if let Some(p) = points {
                            cfg.points = p;
                        }
                        if let Some(f) = train_fraction {
                            cfg.train_fraction = f;
                        }
                        if let Some(c) = &components {
                            cfg.components = parse_components(c).unwrap_or(cfg.components.clone());
                        }
                        if let Some(h) = &hidden {
                            cfg.hidden = common::parse_usize_list(h).unwrap_or(cfg.hidden.clone());
                        }
                        if let Some(f) = freqs {
                            cfg.freqs = f;
                        }
                        if let Some(e) = epochs {
                            cfg.epochs = e;
                        }
                        if let Some(l) = lr {
                            cfg.lr = l;
                        }
                        if let Some(s) = &single_sigmas {
                            cfg.single_sigmas =
                                common::parse_f64_list(s).unwrap_or(cfg.single_sigmas.clone());
                        }
                        if let Some(s) = &multi_sigmas {
                            cfg.multi_sigmas =
                                common::parse_f64_list(s).unwrap_or(cfg.multi_sigmas.clone());
                        }
                        if let Some(n) = spectrum_points {
                            cfg.spectrum_points = n;
                        }
                        if let Some(s) = seed {
                            cfg.seed = s;
                        }
                    },
                )?;
                if common::maybe_print_config(config.print_config, &cfg)? {
                    return Ok(());
                }
                study::run_study_sigma(&out, cfg).map(|_| ())
            }
        },
    }
}

/// Shared mutation for the common train flags on the e2e config.
fn cfg_common_mut_e2e(cfg: &mut train::E2eTrainCfg) -> (&mut usize, &mut usize, &mut f64, &mut u64, &mut usize) {
    // Destructure once so apply_common stays generic-free.
    let train::E2eTrainCfg { epochs, batch, lr, seed, threads, .. } = cfg;
    (epochs, batch, lr, seed, threads)
}

fn apply_common(
    (epochs, batch, lr, seed, threads): (&mut usize, &mut usize, &mut f64, &mut u64, &mut usize),
    c: &CommonTrainFlags,
) {
    if let Some(e) = c.epochs {
        *epochs = e;
    }
    if let Some(b) = c.batch {
        *batch = b;
    }
    if let Some(l) = c.lr {
        *lr = l;
    }
    if let Some(s) = c.seed {
        *seed = s;
    }
    if let Some(t) = c.threads {
        *threads = t;
    }
}
