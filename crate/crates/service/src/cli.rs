//! `factor` command line: dataset, train, generate, eval, serve.

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use factor_core::evalsuite::EvalReport;
use factor_core::experiment::{evaluate_model, ExperimentConfig, HeldOut};
use factor_core::inference::{generate, parse_request, DecodeConfig, RequestContext};
use factor_core::model::{attach_control, build_model, load_checkpoint, ModelConfig};
use factor_core::synthworld::{build_dataset, read_records, swatch_catalog, write_records, SynthConfig, Vocabulary};
use factor_core::training::{prepare_examples, run_training, RunPaths, Stage, TrainConfig};
use serde_json::json;

use crate::http::{serve, ServiceConfig, SWATCH_SIZE};
use crate::render::{strip_png, DEFAULT_SCALE};

pub const CHECKPOINT_ENV: &str = "FACTOR_CHECKPOINT";
const DEFAULT_CHECKPOINT: &str = "model.fckp";
pub const RECORDS_FILE: &str = "records.frec";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "factor", version, about = "Controllable video-token generation on a synthetic shapes world")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    /// 4 blocks, width 128.
    Desk,
    /// 2 blocks, width 64; the controllability experiment model.
    Experiment,
    /// 1 block, width 16; for smoke tests.
    Compact,
}

impl Preset {
    fn config(self) -> ModelConfig {
        match self {
            Preset::Desk => ModelConfig::desk(),
            Preset::Experiment => ExperimentConfig::desk().model,
            Preset::Compact => ModelConfig::compact(),
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum StageArg {
    Pretrain,
    Adapt,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a deterministic synthetic dataset.
    Dataset {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain a text-only model or adapt one with entity control.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Directory written by `dataset`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for model.fckp and metrics.ndjson.
        #[arg(long)]
        out: PathBuf,
        /// Pretrained checkpoint to adapt (adapt stage only).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Training settings as JSON (a serialized `TrainConfig`); the
        /// flags below override it. Defaults to the desk settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Preset::Experiment)]
        preset: Preset,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Continue from the checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Generate a clip from a JSON request file.
    Generate {
        #[arg(long)]
        request: PathBuf,
        /// Output directory for clip.fclp and strip.png.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_SCALE)]
        scale: u32,
    },
    /// Generate every record of a dataset and score the clips.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, default_value_t = 2.0)]
        guidance_scale: f64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve the HTTP job API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        max_concurrency: usize,
        #[arg(long, default_value_t = 256)]
        retention: usize,
        #[arg(long, default_value_t = 32)]
        queue_capacity: usize,
        #[arg(long, default_value = "factor-state")]
        state_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SCALE)]
        scale: u32,
    },
}

/// A failure and the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad input from the user; exit 2.
    Usage(String),
    /// Anything else; exit 1.
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// `--checkpoint`, then `$FACTOR_CHECKPOINT`, then `model.fckp`.
pub fn resolve_checkpoint(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(CHECKPOINT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_CHECKPOINT))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn load_records(dir: &Path) -> Result<Vec<factor_core::synthworld::DatasetRecord>, CliError> {
    read_records(&dir.join(RECORDS_FILE)).map_err(runtime)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Dataset { seed, count, out } => {
            let config = SynthConfig::default();
            let records = build_dataset(seed, count, &config, &Vocabulary::default()).map_err(runtime)?;
            create_dir(&out)?;
            write_records(&out.join(RECORDS_FILE), &records).map_err(runtime)?;
            let manifest = json!({ "seed": seed, "count": count, "synth": config });
            write_file(&out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest).expect("json").as_bytes())?;
            println!("wrote {count} records to {}", out.display());
            Ok(())
        }
        Command::Train {
            stage,
            data,
            out,
            init,
            config,
            preset,
            steps,
            batch_size,
            lr,
            seed,
            checkpoint_every,
            resume,
        } => {
            let stage = match stage {
                StageArg::Pretrain => Stage::Pretrain,
                StageArg::Adapt => Stage::Adapt,
            };
            let base = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
                    let base: TrainConfig = serde_json::from_str(&text)
                        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
                    if base.stage != stage {
                        return Err(CliError::Usage(format!(
                            "{} is a {:?} config but --stage is {:?}",
                            path.display(),
                            base.stage,
                            stage
                        )));
                    }
                    base
                }
                None => TrainConfig::desk(stage),
            };
            let config = TrainConfig {
                steps: steps.unwrap_or(base.steps),
                batch_size: batch_size.unwrap_or(base.batch_size),
                lr: lr.unwrap_or(base.lr),
                seed: seed.unwrap_or(base.seed),
                checkpoint_every: checkpoint_every.unwrap_or(base.checkpoint_every),
                ..base
            };
            config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let seed = config.seed;
            let examples = prepare_examples(&load_records(&data)?).map_err(runtime)?;
            create_dir(&out)?;
            let paths = RunPaths {
                checkpoint: out.join("model.fckp"),
                metrics: out.join("metrics.ndjson"),
            };
            let (state, snapshot) = if resume {
                load_checkpoint(&paths.checkpoint).map_err(runtime)?
            } else {
                let state = match (stage, init) {
                    (Stage::Pretrain, None) => {
                        let mut cfg = preset.config();
                        cfg.control_enabled = false;
                        build_model(&cfg, seed).map_err(runtime)?
                    }
                    (Stage::Adapt, Some(init)) => {
                        let (pre, _) = load_checkpoint(&init).map_err(runtime)?;
                        attach_control(&pre, seed).map_err(runtime)?
                    }
                    (Stage::Pretrain, Some(_)) => {
                        return Err(CliError::Usage("--init only applies to the adapt stage".into()))
                    }
                    (Stage::Adapt, None) => {
                        return Err(CliError::Usage("the adapt stage needs --init <pretrained checkpoint>".into()))
                    }
                };
                (state, None)
            };
            let outcome = run_training(state, &examples, &config, &paths, snapshot.as_ref()).map_err(runtime)?;
            let tail = &outcome.losses[outcome.losses.len().saturating_sub(20)..];
            let loss = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
            println!(
                "trained to step {}; recent loss {loss:.4}; checkpoint {}",
                outcome.steps_done,
                paths.checkpoint.display()
            );
            Ok(())
        }
        Command::Generate {
            request,
            out,
            checkpoint,
            scale,
        } => {
            let text = std::fs::read_to_string(&request)
                .map_err(|e| CliError::Usage(format!("{}: {e}", request.display())))?;
            let wire = parse_request(&text).map_err(|e| CliError::Usage(e.to_string()))?;
            let path = resolve_checkpoint(checkpoint);
            let (model, _) = load_checkpoint(&path).map_err(runtime)?;
            let vocab = Vocabulary::default();
            let swatches = swatch_catalog(SWATCH_SIZE);
            let cfg = &model.config;
            let ctx = RequestContext {
                vocab: &vocab,
                swatches: &swatches,
                palette_size: cfg.vocab,
                prompt_len: cfg.conditioning.prompt_len,
                slots: cfg.conditioning.slots,
                max_extensions: usize::MAX,
            };
            let req = wire.resolve(&ctx).map_err(|e| CliError::Usage(e.to_string()))?;
            let generation = generate(&model, &req).map_err(runtime)?;
            create_dir(&out)?;
            write_file(&out.join("clip.fclp"), &generation.clip.to_bytes())?;
            write_file(&out.join("strip.png"), &strip_png(&generation.clip, scale))?;
            println!("wrote {} frames to {}", generation.clip.len(), out.display());
            Ok(())
        }
        Command::Eval {
            data,
            out,
            checkpoint,
            steps,
            guidance_scale,
            temperature,
            seed,
        } => {
            let decode = DecodeConfig {
                steps,
                guidance_scale,
                temperature,
                seed,
            };
            decode.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let (model, _) = load_checkpoint(&resolve_checkpoint(checkpoint)).map_err(runtime)?;
            let heldout = HeldOut::from_records(load_records(&data)?, SynthConfig::default().bins).map_err(runtime)?;
            let report: EvalReport = evaluate_model(&model, &heldout, &decode, seed).map_err(runtime)?;
            write_file(&out, report.to_json().as_bytes())?;
            println!("{}", report.summary());
            Ok(())
        }
        Command::Serve {
            bind,
            checkpoint,
            max_concurrency,
            retention,
            queue_capacity,
            state_dir,
            scale,
        } => {
            let config = ServiceConfig {
                bind,
                checkpoint: resolve_checkpoint(checkpoint),
                max_concurrency,
                retention,
                queue_capacity,
                state_dir,
                pixel_scale: scale,
                ..ServiceConfig::default()
            };
            config.validate().map_err(CliError::Usage)?;
            let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
            rt.block_on(serve(config)).map_err(CliError::Runtime)
        }
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message().replace('\n', " "));
            e.code()
        }
    }
}
