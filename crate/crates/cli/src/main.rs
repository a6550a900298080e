use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use uvanet::bench::{bench_fps, MIN_REPEATS};
use uvanet::config::RunConfig;
use uvanet::data::{frame_name, gen_synthetic, load_dataset, FileTeacher, Split};
use uvanet::distill::{self, AdamConfig, DistillConfig, JointConfig};
use uvanet::eval::{evaluate, evaluate_maps, predict_map, Output};
use uvanet::metrics::SaliencyMap;
use uvanet::model_io::{load_model, save_model, Model};
use uvanet::netpbm;
use uvanet::networks::{
    flop_count, flop_count_with, param_count, DepthwiseCost, NetKind, SUPPORTED_RESOLUTIONS,
};

#[derive(Parser)]
#[command(
    name = "uvanet",
    version,
    about = "Lightweight video saliency networks: data, training, evaluation and benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every command. Flags override the config file.
#[derive(Args, Clone, Default)]
struct Common {
    /// `key = value` config file
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    resolution: Option<String>,
    #[arg(long)]
    block_kind: Option<String>,
    #[arg(long)]
    mu: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let overrides = [
            ("resolution", &self.resolution),
            ("block_kind", &self.block_kind),
            ("mu", &self.mu),
            ("lr", &self.lr),
            ("batch", &self.batch),
            ("epochs", &self.epochs),
            ("seed", &self.seed),
            ("dataset", &self.dataset),
            ("out", &self.out),
        ];
        for (k, v) in overrides {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic moving-blob corpus into `out`
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 40)]
        clips: usize,
        #[arg(long, default_value_t = 16)]
        frames: usize,
    },
    /// Distill the two-branch student from teacher maps and ground truth
    TrainDistill {
        #[command(flatten)]
        common: Common,
        /// Train only one branch
        #[arg(long)]
        only: Option<String>,
    },
    /// Transfer a student into the fused network and fine-tune it
    TrainJoint {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        student: PathBuf,
        /// Keep the transferred encoder fixed
        #[arg(long)]
        freeze_encoder: bool,
    },
    /// Report metric means over the test split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "maps")]
        model: Option<PathBuf>,
        /// Score saved PGM maps (layout `clipNNN/F%04d.pgm`) instead of a model
        #[arg(long, conflicts_with = "model")]
        maps: Option<PathBuf>,
        /// fused, spatial or temporal
        #[arg(long)]
        output: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write predicted maps as PGM files under `out`
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        output: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Time single-threaded inference
    Bench {
        #[command(flatten)]
        common: Common,
        /// Trained model; a freshly initialized fused network otherwise
        #[arg(long)]
        model: Option<PathBuf>,
        /// Comma-separated list; defaults to the configured resolution
        #[arg(long, value_delimiter = ',')]
        resolutions: Vec<usize>,
        #[arg(long, default_value_t = MIN_REPEATS)]
        repeats: usize,
    },
    /// Print parameter counts
    Params {
        #[command(flatten)]
        common: Common,
    },
    /// Print forward FLOP counts at the configured resolution
    Flops {
        #[command(flatten)]
        common: Common,
    },
}

fn required<'a>(v: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| anyhow!("missing `{key}`: set it in the config file or pass --{key}"))
}

fn parse_output(s: &Option<String>, model: &Model) -> Result<Output> {
    Ok(match s {
        Some(s) => s.parse()?,
        None => Output::default_for(model),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            common,
            clips,
            frames,
        } => {
            let cfg = common.resolve()?;
            let out = required(&cfg.out, "out")?;
            let (index, _) = gen_synthetic(out, clips, frames, cfg.resolution, cfg.seed)?;
            log::info!(
                "wrote {clips} clips of {frames} frames to {}",
                out.display()
            );
            for split in [Split::Train, Split::Val, Split::Test] {
                println!("{split} {}", index.clips_in(split).count());
            }
        }
        Command::TrainDistill { common, only } => {
            let cfg = common.resolve()?;
            let net_cfg = cfg.network()?;
            let index = load_dataset(required(&cfg.dataset, "dataset")?)?;
            let out = required(&cfg.out, "out")?;
            let samples = index.samples(Split::Train, cfg.resolution)?;
            let teachers = FileTeacher::load(&index, cfg.resolution)?;
            let (spatial_weight, temporal_weight) = match only.as_deref() {
                None => (1.0, 1.0),
                Some("spatial") => (1.0, 0.0),
                Some("temporal") => (0.0, 1.0),
                Some(o) => bail!("--only takes `spatial` or `temporal`, got `{o}`"),
            };
            let dc = DistillConfig {
                epochs: cfg.epochs.unwrap_or(5),
                batch_size: cfg.batch,
                adam: AdamConfig {
                    lr: cfg.lr,
                    ..AdamConfig::default()
                },
                mu: cfg.mu,
                seed: cfg.seed,
                spatial_weight,
                temporal_weight,
            };
            log::info!("distilling on {} frame pairs", samples.len());
            let outcome = distill::train_distill(&samples, &teachers, &net_cfg, &dc)?;
            for rec in &outcome.log {
                println!("{rec}");
            }
            save_model(out, &Model::Student(outcome.net))?;
            log::info!("saved student to {}", out.display());
        }
        Command::TrainJoint {
            common,
            student,
            freeze_encoder,
        } => {
            let cfg = common.resolve()?;
            let Model::Student(student) = load_model(&student)? else {
                bail!("{}: not a student model", student.display());
            };
            let index = load_dataset(required(&cfg.dataset, "dataset")?)?;
            let out = required(&cfg.out, "out")?;
            let samples = index.samples(Split::Train, student.config.input_resolution)?;
            let jc = JointConfig {
                epochs: cfg.epochs.unwrap_or(10),
                batch_size: cfg.batch,
                adam: AdamConfig {
                    lr: cfg.lr,
                    ..AdamConfig::default()
                },
                seed: cfg.seed,
                freeze_encoder,
            };
            log::info!("fine-tuning on {} frame pairs", samples.len());
            let outcome = distill::transfer_and_finetune(&student, &samples, &jc)?;
            for rec in &outcome.log {
                println!("{rec}");
            }
            save_model(out, &Model::Spatiotemporal(outcome.net))?;
            log::info!("saved spatiotemporal model to {}", out.display());
        }
        Command::Eval {
            common,
            model,
            maps,
            output,
            split,
        } => {
            let cfg = common.resolve()?;
            let index = load_dataset(required(&cfg.dataset, "dataset")?)?;
            let split: Split = split.parse()?;
            let report = if let Some(dir) = maps {
                let samples = index.samples(split, cfg.resolution)?;
                let maps = samples
                    .iter()
                    .map(|s| {
                        let p = dir.join(&s.clip).join(frame_name(s.index, "pgm"));
                        Ok(SaliencyMap::from_tensor(&netpbm::read_pgm(&p)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                evaluate_maps(&samples, &maps, cfg.seed)?
            } else {
                let path = model.expect("clap enforces --model or --maps");
                let model = load_model(&path)?;
                let samples = index.samples(split, model.config().input_resolution)?;
                evaluate(&model, parse_output(&output, &model)?, &samples, cfg.seed)?
            };
            print!("{report}");
            if let Some(out) = &cfg.out {
                fs::write(out, report.to_string())
                    .with_context(|| format!("writing {}", out.display()))?;
            }
        }
        Command::Predict {
            common,
            model,
            output,
            split,
        } => {
            let cfg = common.resolve()?;
            let model = load_model(&model)?;
            let output = parse_output(&output, &model)?;
            let index = load_dataset(required(&cfg.dataset, "dataset")?)?;
            let out = required(&cfg.out, "out")?;
            let samples = index.samples(split.parse()?, model.config().input_resolution)?;
            for s in &samples {
                let dir = out.join(&s.clip);
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                let map = predict_map(&model, output, s)?;
                netpbm::write_pgm(&dir.join(frame_name(s.index, "pgm")), &map.to_tensor())?;
            }
            println!("wrote {} maps to {}", samples.len(), out.display());
        }
        Command::Bench {
            common,
            model,
            resolutions,
            repeats,
        } => {
            let cfg = common.resolve()?;
            let loaded = model.as_deref().map(load_model).transpose()?;
            let resolutions = if resolutions.is_empty() {
                vec![loaded
                    .as_ref()
                    .map_or(cfg.resolution, |m| m.config().input_resolution)]
            } else {
                resolutions
            };
            for (i, r) in resolutions.into_iter().enumerate() {
                let m = match &loaded {
                    Some(m) if m.config().input_resolution == r => m.clone(),
                    Some(m) => {
                        let mut resized =
                            Model::build(m.kind(), m.config().clone().with_resolution(r))?;
                        copy_weights(m, &mut resized);
                        resized
                    }
                    None => {
                        Model::build(NetKind::Spatiotemporal, cfg.network()?.with_resolution(r))?
                    }
                };
                if i > 0 {
                    println!();
                }
                print!("{}", bench_fps(&m, r, repeats)?);
            }
        }
        Command::Params { common } => {
            let net = common.resolve()?.network()?;
            for kind in [NetKind::Student, NetKind::Spatiotemporal] {
                println!("{kind} {}", param_count(&net, kind));
            }
        }
        Command::Flops { common } => {
            let cfg = common.resolve()?;
            let net = cfg.network()?;
            for kind in [NetKind::Student, NetKind::Spatiotemporal] {
                println!("{kind} {}", flop_count(&net, kind, cfg.resolution));
            }
            let dense = flop_count_with(
                &net,
                NetKind::Spatiotemporal,
                cfg.resolution,
                DepthwiseCost::Dense,
            );
            println!("spatiotemporal_dense {dense}");
        }
    }
    Ok(())
}

/// Weights do not depend on resolution, so a model can be timed at any
/// supported size.
fn copy_weights(src: &Model, dst: &mut Model) {
    let values: Vec<_> = src.store().iter().map(|(_, p)| p.tensor.clone()).collect();
    let store = match dst {
        Model::Student(n) => &mut n.store,
        Model::Spatiotemporal(n) => &mut n.store,
    };
    for (p, t) in store.iter_mut().zip(values) {
        p.tensor = t;
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            eprintln!(
                "run `uvanet --help` for usage (supported resolutions: {SUPPORTED_RESOLUTIONS:?})"
            );
            ExitCode::from(2)
        }
    }
}
