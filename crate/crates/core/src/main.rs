use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tokentrack::commands::{self, apply_mode, exit_code, InferRequest, TokenizeMode, TrainRequest};
use tokentrack::config::RunConfig;
use tokentrack::merge_eval::Granularity;
use tokentrack::model::FusionMode;
use tokentrack::Error;

#[derive(Parser)]
#[command(
    name = "tokentrack",
    version,
    about = "Token-based video object detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed (falls back to the config file, then TOKENTRACK_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of moving-rectangle clips.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        clips: usize,
        /// Frames per clip.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Write one token row per (clip, window) plus the vocabulary manifest.
    Tokenize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Vocabulary manifest path (default: vocab.json next to --out).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// static, 2d or 1d.
        #[arg(long)]
        mode: Option<TokenizeMode>,
        #[arg(long)]
        full_span: bool,
        #[arg(long)]
        cls_eq: bool,
        #[command(flatten)]
        window: WindowFlags,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        fusion: Option<FusionMode>,
        #[arg(long)]
        cls_eq: bool,
        #[arg(long)]
        freeze_backbone: bool,
        #[arg(long)]
        steps: Option<u64>,
        /// Stop after this step; resume later with --resume.
        #[arg(long)]
        until: Option<u64>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// CSV log `step,loss,lr,tokens_per_sec`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        window: WindowFlags,
    },
    /// Decode every window, merge across windows and write detection JSONL.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Window stride T (default: the training stride).
        #[arg(long)]
        stride: Option<usize>,
        /// Window length N; must match the checkpoint.
        #[arg(long)]
        window_len: Option<usize>,
        /// Also write unmerged per-window detections here.
        #[arg(long)]
        dump_raw: Option<PathBuf>,
    },
    /// Score detections against a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSON metric report (printed to stdout as well).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        pr_csv: Option<PathBuf>,
        #[arg(long)]
        iou: Option<f64>,
        #[arg(long)]
        class_agnostic: bool,
        #[arg(long)]
        granularity: Option<Granularity>,
    },
}

#[derive(Args, Clone)]
struct WindowFlags {
    /// Window length N.
    #[arg(long = "window", short = 'n')]
    length: Option<usize>,
    /// Window stride T.
    #[arg(long)]
    stride: Option<usize>,
    /// Frame gap G.
    #[arg(long)]
    gap: Option<usize>,
}

impl WindowFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(n) = self.length {
            cfg.window.length = n;
        }
        if let Some(t) = self.stride {
            cfg.window.stride = t;
        }
        if let Some(g) = self.gap {
            cfg.window.gap = g;
        }
    }
}

fn load_config(common: &Common) -> tokentrack::Result<(RunConfig, u64)> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = cfg.resolve_seed(common.seed)?;
    cfg.apply_seed(seed);
    Ok((cfg, seed))
}

fn finish(cfg: &mut RunConfig) -> tokentrack::Result<()> {
    cfg.sync_derived();
    cfg.validate()
}

fn manifest_path(out: &Path, manifest: Option<PathBuf>) -> PathBuf {
    manifest.unwrap_or_else(|| out.with_file_name("vocab.json"))
}

fn run(cli: Cli) -> tokentrack::Result<()> {
    match cli.command {
        Command::Synth {
            common,
            out,
            clips,
            frames,
        } => {
            let (mut cfg, _) = load_config(&common)?;
            if let Some(f) = frames {
                cfg.scene.frames = f;
            }
            let dirs = commands::synth(&cfg.scene, clips, &out)?;
            log::info!("wrote {} clips to {}", dirs.len(), out.display());
        }
        Command::Tokenize {
            common,
            data,
            out,
            manifest,
            mode,
            full_span,
            cls_eq,
            window,
        } => {
            let (mut cfg, seed) = load_config(&common)?;
            window.apply(&mut cfg);
            if let Some(m) = mode {
                apply_mode(&mut cfg, m);
            }
            cfg.window.full_span |= full_span;
            if mode == Some(TokenizeMode::Static) {
                cfg.model.fusion = FusionMode::Static;
            }
            finish(&mut cfg)?;
            let manifest = manifest_path(&out, manifest);
            let rows = commands::tokenize(
                &data,
                cfg.vocab,
                cfg.window,
                cls_eq || cfg.train.cls_eq,
                seed,
                &out,
                &manifest,
            )?;
            log::info!("wrote {rows} token rows to {}", out.display());
        }
        Command::Train {
            common,
            data,
            checkpoint,
            fusion,
            cls_eq,
            freeze_backbone,
            steps,
            until,
            resume,
            log,
            window,
        } => {
            let (mut cfg, seed) = load_config(&common)?;
            window.apply(&mut cfg);
            if let Some(f) = fusion {
                cfg.model.fusion = f;
                if f == FusionMode::Static {
                    cfg.window.length = 1;
                }
            }
            cfg.train.cls_eq |= cls_eq;
            cfg.train.freeze_backbone |= freeze_backbone;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            finish(&mut cfg)?;
            let summary = commands::train(&TrainRequest {
                config: cfg,
                seed,
                data,
                checkpoint: checkpoint.clone(),
                resume,
                log,
                until,
            })?;
            log::info!(
                "trained to step {}; checkpoint {}",
                summary.steps,
                checkpoint.display()
            );
        }
        Command::Infer {
            common,
            data,
            checkpoint,
            out,
            stride,
            window_len,
            dump_raw,
        } => {
            let (cfg, seed) = load_config(&common)?;
            let dets = commands::infer(&InferRequest {
                config: cfg,
                data,
                checkpoint,
                out: out.clone(),
                stride,
                window_len,
                dump_raw,
                seed,
            })?;
            log::info!("wrote {} detections to {}", dets.len(), out.display());
        }
        Command::Eval {
            common,
            detections,
            data,
            out,
            pr_csv,
            iou,
            class_agnostic,
            granularity,
        } => {
            let (cfg, _) = load_config(&common)?;
            let mut mc = cfg.eval;
            if let Some(t) = iou {
                mc.iou_threshold = t;
            }
            mc.class_agnostic |= class_agnostic;
            if let Some(g) = granularity {
                mc.granularity = g;
            }
            if !(mc.iou_threshold > 0.0 && mc.iou_threshold <= 1.0) {
                return Err(Error::Config(format!(
                    "IoU threshold {} outside (0, 1]",
                    mc.iou_threshold
                )));
            }
            let report =
                commands::eval(&detections, &data, &mc, out.as_deref(), pr_csv.as_deref())?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
