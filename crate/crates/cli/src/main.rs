//! `stas`: train, evaluate and analyze the spiking-transformer halting
//! engine from the command line.
//!
//! Exit codes: 0 success, 2 bad configuration/usage, 3 data or file error,
//! 4 numeric failure (non-finite loss, violated monotonicity).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use stas_core::analysis;
use stas_core::checkpoint;
use stas_core::data::{self, Dataset, NormStats};
use stas_core::error::Error;
use stas_core::halting::AccumulationMode;
use stas_core::model::{HeadKind, Model, ModelConfig};
use stas_core::train::{self, EvalOpts, Phase, TrainConfig};

#[derive(Parser)]
#[command(name = "stas", version, about = "Spiking transformer with two-dimensional token halting")]
struct Cli {
    /// JSON config file: {"model": {...}, "train": {...}} (either key optional)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the model/train seeds
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (or file for gen-data/sweep/similarity)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Pretrain,
    HaltingFinetune,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    MeanField,
    Averaged,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    BlockOnly,
    TwoDimensional,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Small,
    Tiny,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one phase and write per-epoch checkpoints plus a metrics log
    Train {
        /// Dataset spec: synthetic:N:SEED | cifar10:PATH | cifar100:PATH | file:PATH
        #[arg(long)]
        data: String,
        #[arg(long, value_enum, default_value = "pretrain")]
        phase: PhaseArg,
        /// Start from an existing checkpoint's weights
        #[arg(long)]
        init_from: Option<PathBuf>,
        /// Resume an interrupted run of the same phase from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Built-in model shape when no config file is given
        #[arg(long, value_enum, default_value = "small")]
        preset: PresetArg,
    },
    /// Evaluate a checkpoint on a dataset
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: String,
        /// Inference halting threshold override
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long, value_enum, default_value = "mean-field")]
        head: HeadArg,
        /// Disable halting entirely
        #[arg(long)]
        no_halting: bool,
    },
    /// Evaluate across a halting-threshold grid; fails on non-monotone cost
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: String,
        /// Comma-separated strictly increasing thresholds
        #[arg(long, default_value = "0,0.01,0.05,0.1,0.2,0.5,1.0")]
        eps_grid: String,
        /// Cap on evaluated samples
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
    /// Cosine similarity of block inputs across blocks and timesteps
    Similarity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long, default_value_t = 32)]
        samples: usize,
    },
    /// Per-token processed-count map for one input (CSV + PGM)
    Haltmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: String,
        /// Sample index within the dataset
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Accumulation-mode ablation on a frozen checkpoint
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long, value_enum, default_value = "both")]
        mode: ModeArg,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
    /// Generate the synthetic dataset and export it in the CIFAR layout
    GenData {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// Output file (falls back to --out)
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

#[derive(Serialize, Deserialize)]
struct RunConfig {
    #[serde(default = "ModelConfig::desk_default")]
    model: ModelConfig,
    #[serde(default)]
    train: TrainConfig,
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Dimension { .. } => 2,
        Error::Format { .. } | Error::Io(_) | Error::Checkpoint(_) => 3,
        Error::Numeric(_) | Error::Sequencing { .. } => 4,
    }
}

fn load_dataset(spec: &str, cap: Option<usize>) -> Result<Dataset, Error> {
    let mut parts = spec.splitn(3, ':');
    let kind = parts.next().unwrap_or_default();
    let mut ds = match kind {
        "synthetic" => {
            let n: usize = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Config(format!("bad synthetic spec {spec}")))?;
            let seed: u64 = parts.next().and_then(|v| v.parse().ok()).unwrap_or(0);
            data::gen_synthetic(n, seed)?
        }
        "cifar10" => data::load_cifar10_binary(Path::new(
            parts.next().ok_or_else(|| Error::Config("cifar10 needs a path".into()))?,
        ))?,
        "cifar100" => data::load_cifar100_binary(Path::new(
            parts.next().ok_or_else(|| Error::Config("cifar100 needs a path".into()))?,
        ))?,
        "file" => data::load_synthetic_binary(Path::new(
            parts.next().ok_or_else(|| Error::Config("file needs a path".into()))?,
        ))?,
        other => {
            return Err(Error::Config(format!(
                "unknown dataset spec '{other}' (use synthetic:N:SEED, cifar10:PATH, cifar100:PATH, file:PATH)"
            )))
        }
    };
    if let Some(cap) = cap {
        ds.images.truncate(cap.max(1));
    }
    Ok(ds)
}

fn load_run_config(cli: &Cli, preset: Option<PresetArg>) -> Result<RunConfig, Error> {
    let mut rc: RunConfig = match &cli.config {
        Some(path) => serde_json::from_slice(&fs::read(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        None => RunConfig {
            model: match preset {
                Some(PresetArg::Desk) | None => ModelConfig::desk_default(),
                Some(PresetArg::Small) => ModelConfig::small_train(),
                Some(PresetArg::Tiny) => ModelConfig::tiny(),
            },
            train: TrainConfig::default(),
        },
    };
    if let Some(seed) = cli.seed {
        rc.model.seed = seed;
        rc.train.seed = seed;
    }
    Ok(rc)
}

fn load_model_for_eval(path: &Path) -> Result<(Model<f32>, NormStats), Error> {
    let (model, ckpt) = checkpoint::load_model::<f32>(path)?;
    let norm = ckpt
        .manifest
        .norm
        .unwrap_or_else(|| NormStats::identity(model.config().in_channels));
    Ok((model, norm))
}

fn write_or_print(out: &Option<PathBuf>, default_name: &str, contents: &str) -> Result<(), Error> {
    match out {
        Some(dir) if dir.extension().is_some() => {
            fs::write(dir, contents)?;
            eprintln!("wrote {}", dir.display());
        }
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join(default_name);
            fs::write(&path, contents)?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{contents}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.cmd {
        Cmd::GenData { n, file } => {
            let seed = cli.seed.unwrap_or(0);
            let ds = data::gen_synthetic(*n, seed)?;
            let path = file
                .clone()
                .or_else(|| cli.out.clone())
                .ok_or_else(|| Error::Config("gen-data needs --file or --out".into()))?;
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            data::save_cifar_format(&ds, &path)?;
            println!(
                "{}",
                serde_json::json!({"written": path.display().to_string(), "n": n, "seed": seed})
            );
            Ok(())
        }
        Cmd::Train { data: spec, phase, init_from, resume, preset } => {
            let rc = load_run_config(&cli, Some(*preset))?;
            let dataset = load_dataset(spec, None)?;
            let mut mcfg = rc.model.clone();
            mcfg.num_classes = dataset.num_classes.max(2);
            let mut tcfg = rc.train.clone();
            tcfg.phase = match phase {
                PhaseArg::Pretrain => Phase::Pretrain,
                PhaseArg::HaltingFinetune => Phase::HaltingFinetune,
            };
            let norm = NormStats::from_dataset(&dataset);

            let mut resume_ckpt = None;
            let mut model = if let Some(path) = resume {
                let (m, ck) = checkpoint::load_model::<f32>(path)?;
                resume_ckpt = Some(ck);
                m
            } else if let Some(path) = init_from {
                let (m, _) = checkpoint::load_model::<f32>(path)?;
                m
            } else {
                Model::new(mcfg.clone())?
            };

            let out_dir = cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from(format!("runs/{}", tcfg.phase.as_str())));
            fs::create_dir_all(&out_dir)?;
            let mut log = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(out_dir.join("metrics.jsonl"))?;
            let outcome = train::train_phase(
                &mut model,
                &dataset,
                &norm,
                &tcfg,
                resume_ckpt.as_ref(),
                Some(&mut log),
                Some(&out_dir),
            )?;
            train::calibrate_bn(&mut model, &dataset, &norm, 64)?;
            checkpoint::save(
                &out_dir.join("final.stas"),
                &mut model,
                &[],
                Some(checkpoint::TrainState {
                    phase: tcfg.phase.as_str().to_string(),
                    epoch: tcfg.epochs as u64,
                    step: outcome.steps,
                    optimizer: "final".to_string(),
                }),
                Some(norm.clone()),
            )?;
            let last = outcome.history.last().cloned();
            println!(
                "{}",
                serde_json::json!({
                    "phase": tcfg.phase.as_str(),
                    "steps": outcome.steps,
                    "checkpoint": out_dir.join("final.stas").display().to_string(),
                    "last": last,
                })
            );
            Ok(())
        }
        Cmd::Eval { checkpoint: ckpt, data: spec, eps, head, no_halting } => {
            let (model, norm) = load_model_for_eval(ckpt)?;
            let dataset = load_dataset(spec, None)?;
            let metrics = train::evaluate(
                &model,
                &dataset,
                &norm,
                &EvalOpts {
                    eps: *eps,
                    head: match head {
                        HeadArg::MeanField => HeadKind::MeanField,
                        HeadArg::Averaged => HeadKind::Averaged,
                    },
                    halting: !no_halting,
                    ..Default::default()
                },
            )?;
            println!("{}", serde_json::to_string(&metrics).unwrap());
            Ok(())
        }
        Cmd::Sweep { checkpoint: ckpt, data: spec, eps_grid, samples } => {
            let (model, norm) = load_model_for_eval(ckpt)?;
            let dataset = load_dataset(spec, Some(*samples))?;
            let grid: Vec<f64> = eps_grid
                .split(',')
                .map(|v| v.trim().parse().map_err(|_| Error::Config(format!("bad eps '{v}'"))))
                .collect::<Result<_, _>>()?;
            let rows = analysis::sweep_epsilon(&model, &dataset, &norm, &grid, true)?;
            let comment = analysis::csv_header_comment(model.config(), cli.seed.unwrap_or(model.config().seed));
            write_or_print(&cli.out, "sweep.csv", &analysis::sweep_csv(&rows, &comment))
        }
        Cmd::Similarity { checkpoint: ckpt, data: spec, samples } => {
            let (model, norm) = load_model_for_eval(ckpt)?;
            let dataset = load_dataset(spec, Some(*samples))?;
            let rows = analysis::similarity(&model, &dataset, &norm, *samples)?;
            let comment = analysis::csv_header_comment(model.config(), cli.seed.unwrap_or(model.config().seed));
            write_or_print(&cli.out, "similarity.csv", &analysis::similarity_csv(&rows, &comment))
        }
        Cmd::Haltmap { checkpoint: ckpt, data: spec, index, eps } => {
            let (model, norm) = load_model_for_eval(ckpt)?;
            let dataset = load_dataset(spec, None)?;
            let img = dataset
                .images
                .get(*index)
                .ok_or_else(|| Error::Config(format!("index {index} out of range ({} samples)", dataset.len())))?;
            let x = norm.apply(&img.pixels);
            let map = analysis::halting_map(&model, &x, *eps)?;
            let comment = analysis::csv_header_comment(model.config(), cli.seed.unwrap_or(model.config().seed));
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("haltmap"));
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("counts.csv"), map.counts_csv(&comment))?;
            fs::write(dir.join("halted.csv"), map.halted_csv(&comment))?;
            fs::write(dir.join("map.pgm"), map.to_pgm())?;
            println!(
                "{}",
                serde_json::json!({
                    "avg_tokens": map.avg_tokens,
                    "grid": [map.grid.0, map.grid.1],
                    "max_count": map.max_count,
                    "out": dir.display().to_string(),
                })
            );
            Ok(())
        }
        Cmd::Ablate { checkpoint: ckpt, data: spec, mode, eps, samples } => {
            let (model, norm) = load_model_for_eval(ckpt)?;
            let dataset = load_dataset(spec, Some(*samples))?;
            let modes: Vec<AccumulationMode> = match mode {
                ModeArg::BlockOnly => vec![AccumulationMode::BlockOnly],
                ModeArg::TwoDimensional => vec![AccumulationMode::TwoDimensional],
                ModeArg::Both => vec![AccumulationMode::BlockOnly, AccumulationMode::TwoDimensional],
            };
            let mut rows = Vec::new();
            for m in modes {
                rows.push(analysis::ablate(&model, &dataset, &norm, m, *eps)?);
            }
            let comment = analysis::csv_header_comment(model.config(), cli.seed.unwrap_or(model.config().seed));
            write_or_print(&cli.out, "ablate.csv", &analysis::ablate_csv(&rows, &comment))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut stderr = std::io::stderr();
            let _ = writeln!(stderr, "error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
