//! The `tokentrack` subcommands. Pipelines compose through files only:
//! `synth` → `tokenize` / `train` → `infer` → `eval`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codec::{build_vocabulary, CoordMode, VocabConfig};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::merge_eval::{
    evaluate, ground_truth_from_annotations, merge_windows, read_detections_jsonl,
    write_detections_jsonl, Detection, MetricReport,
};
use crate::model::checkpoint::{self, Checkpoint};
use crate::model::{Model, Sample, Trainer};
use crate::pipeline::{
    batch_indices, build_samples, derive_seed, detect_clip, load_dataset, tokenize_clip,
    InferOptions, TokenizeOptions,
};
use crate::synth::{export_clip, generate_clip, SceneConfig};
use crate::windows::WindowSpec;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

pub fn clip_dir_name(index: usize) -> String {
    format!("clip_{index:04}")
}

/// Writes `count` clips under `out`; clip `i` uses scene seed `derive(seed, i)`.
pub fn synth(scene: &SceneConfig, count: usize, out: &Path) -> Result<Vec<PathBuf>> {
    scene.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    if count == 0 {
        log::warn!("clip count is 0; wrote an empty dataset");
    }
    let mut dirs = Vec::with_capacity(count);
    for i in 0..count {
        let cfg = SceneConfig {
            seed: derive_seed(scene.seed, &[i as u64]),
            ..scene.clone()
        };
        let dir = out.join(clip_dir_name(i));
        export_clip(&generate_clip(&cfg)?, &dir)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenizeMode {
    Static,
    TwoD,
    OneD,
}

impl std::str::FromStr for TokenizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(TokenizeMode::Static),
            "2d" => Ok(TokenizeMode::TwoD),
            "1d" => Ok(TokenizeMode::OneD),
            other => Err(Error::Config(format!("unknown tokenize mode `{other}`"))),
        }
    }
}

/// Applies a `--mode` choice to the vocabulary and window sections.
pub fn apply_mode(cfg: &mut RunConfig, mode: TokenizeMode) {
    match mode {
        TokenizeMode::Static => {
            cfg.vocab.mode = CoordMode::TwoD;
            cfg.window.length = 1;
        }
        TokenizeMode::TwoD => cfg.vocab.mode = CoordMode::TwoD,
        TokenizeMode::OneD => cfg.vocab.mode = CoordMode::OneD,
    }
}

/// One JSONL row per (clip, window) plus the vocabulary manifest. Returns the row count.
pub fn tokenize(
    data: &Path,
    vocab_cfg: VocabConfig,
    spec: WindowSpec,
    equalize: bool,
    seed: u64,
    out: &Path,
    manifest: &Path,
) -> Result<usize> {
    let vocab = build_vocabulary(vocab_cfg)?;
    let clips = load_dataset(data)?;
    let opts = TokenizeOptions {
        vocab: &vocab,
        spec,
        equalize,
        seed,
    };
    let mut w = create(out)?;
    let mut rows = 0;
    for (i, clip) in clips.iter().enumerate() {
        for rec in tokenize_clip(clip, i, &opts)? {
            serde_json::to_writer(&mut w, &rec).map_err(|e| Error::parse("token row", e))?;
            w.write_all(b"\n").map_err(|e| Error::io(out, e))?;
            rows += 1;
        }
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    let m = create(manifest)?;
    serde_json::to_writer_pretty(m, &vocab.manifest())
        .map_err(|e| Error::parse("vocabulary manifest", e))?;
    Ok(rows)
}

/// Settings a checkpoint carries besides the network, so `infer` needs nothing else.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub vocab: VocabConfig,
    pub window: WindowSpec,
    pub cls_eq: bool,
    pub seed: u64,
    pub batch_size: usize,
    pub steps: u64,
}

impl RunMeta {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        serde_json::from_value(ck.meta.clone()).map_err(|e| Error::parse("checkpoint metadata", e))
    }
}

#[derive(Clone, Debug)]
pub struct TrainRequest {
    pub config: RunConfig,
    pub seed: u64,
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub resume: Option<PathBuf>,
    pub log: Option<PathBuf>,
    /// Stop after this step while keeping the schedule of the full run.
    pub until: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub losses: Vec<(u64, f64)>,
}

fn save_checkpoint(path: &Path, t: &Trainer, meta: &RunMeta) -> Result<()> {
    let meta = serde_json::to_value(meta).expect("metadata serializes");
    checkpoint::save(path, &t.model, &t.config, &t.state, &meta)
}

/// Trains from scratch or resumes. Batches depend only on `(seed, step)`, so a resumed run
/// logs the same losses as an uninterrupted one. On a non-finite loss the last checkpoint on
/// disk is left untouched and a numeric error is returned.
pub fn train(req: &TrainRequest) -> Result<TrainSummary> {
    let cfg = &req.config;
    cfg.validate()?;
    let (trainer, meta) = match &req.resume {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            let mut meta = RunMeta::from_checkpoint(&ck)?;
            meta.steps = cfg.train.steps;
            let mut train_cfg = ck.train.clone();
            train_cfg.total_steps = cfg.train.steps;
            let begin = build_vocabulary(meta.vocab)?.pad();
            (Trainer::resume(ck.model, train_cfg, ck.state, begin)?, meta)
        }
        None => {
            let model = Model::new(cfg.model.clone())?;
            let meta = RunMeta {
                vocab: cfg.vocab,
                window: cfg.window,
                cls_eq: cfg.train.cls_eq,
                seed: req.seed,
                batch_size: cfg.model.batch_size,
                steps: cfg.train.steps,
            };
            let begin = build_vocabulary(cfg.vocab)?.pad();
            (Trainer::new(model, cfg.train.optimizer(), begin)?, meta)
        }
    };
    let mut trainer = trainer;
    let vocab = build_vocabulary(meta.vocab)?;
    let clips = load_dataset(&req.data)?;
    let opts = TokenizeOptions {
        vocab: &vocab,
        spec: meta.window,
        equalize: meta.cls_eq,
        seed: meta.seed,
    };
    let samples = build_samples(&clips, &opts, trainer.model.config().max_seq_len)?;
    if samples.is_empty() {
        return Err(Error::Data {
            path: req.data.clone(),
            message: "dataset yields no training windows".into(),
        });
    }
    log::info!(
        "training {} on {} windows from {} clips ({} parameters)",
        trainer.model.config().fusion,
        samples.len(),
        clips.len(),
        trainer.model.params().num_scalars()
    );

    let mut log_w = match &req.log {
        Some(p) => {
            let fresh = req.resume.is_none() || !p.exists();
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            let mut w = BufWriter::new(f);
            if fresh {
                writeln!(w, "step,loss,lr,tokens_per_sec").map_err(|e| Error::io(p, e))?;
            }
            Some((p.clone(), w))
        }
        None => None,
    };

    let every_log = cfg.train.log_every.max(1);
    let every_ckpt = cfg.train.checkpoint_every;
    let mut losses = Vec::new();
    let mut tokens = 0usize;
    let mut clock = Instant::now();
    let stop = req.until.map_or(meta.steps, |u| u.min(meta.steps));
    while trainer.state.step < stop {
        let step = trainer.state.step;
        let idx = batch_indices(samples.len(), meta.batch_size, meta.seed, step);
        let batch: Vec<Sample> = idx.iter().map(|&i| samples[i].clone()).collect();
        tokens += batch.iter().map(|s| s.targets.len()).sum::<usize>();
        let report = trainer.step(&batch).map_err(|e| {
            log::error!(
                "{e}; last good checkpoint kept at {}",
                req.checkpoint.display()
            );
            e
        })?;
        losses.push((report.step, report.loss));
        if report.step % every_log == 0 || report.step == meta.steps {
            let secs = clock.elapsed().as_secs_f64().max(1e-9);
            let tps = tokens as f64 / secs;
            log::info!(
                "step {} loss {:.5} lr {:.2e}",
                report.step,
                report.loss,
                report.lr
            );
            if let Some((p, w)) = log_w.as_mut() {
                writeln!(
                    w,
                    "{},{},{},{:.1}",
                    report.step, report.loss, report.lr, tps
                )
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&*p, e))?;
            }
            tokens = 0;
            clock = Instant::now();
        }
        if every_ckpt > 0 && report.step % every_ckpt == 0 {
            save_checkpoint(&req.checkpoint, &trainer, &meta)?;
        }
    }
    save_checkpoint(&req.checkpoint, &trainer, &meta)?;
    Ok(TrainSummary {
        steps: trainer.state.step,
        losses,
    })
}

#[derive(Clone, Debug)]
pub struct InferRequest {
    pub config: RunConfig,
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub stride: Option<usize>,
    pub window_len: Option<usize>,
    pub dump_raw: Option<PathBuf>,
    pub seed: u64,
}

/// Decodes every window of every clip, merges per clip and writes detection JSONL.
pub fn infer(req: &InferRequest) -> Result<Vec<Detection>> {
    let ck = checkpoint::load(&req.checkpoint)?;
    let meta = RunMeta::from_checkpoint(&ck)?;
    let mut spec = meta.window;
    if let Some(t) = req.stride {
        spec.stride = t;
    }
    if let Some(n) = req.window_len {
        spec.length = n;
    }
    spec.validate()?;
    crate::pipeline::check_window_compat(&ck.model, &spec)?;
    let vocab = build_vocabulary(meta.vocab)?;
    let clips = load_dataset(&req.data)?;
    let infer_cfg = &req.config.infer;
    let opts = InferOptions {
        vocab: &vocab,
        spec,
        strategy: infer_cfg.strategy(),
        score: infer_cfg.score,
        seed: req.seed,
    };
    let mut merged = Vec::new();
    let mut raw_all = Vec::new();
    for (i, clip) in clips.iter().enumerate() {
        let raw = detect_clip(&ck.model, clip, i, &opts)?;
        let m = merge_windows(
            &raw,
            &spec,
            infer_cfg.merge_policy,
            infer_cfg.merge_iou,
            infer_cfg.class_agnostic_merge,
        )?;
        log::info!(
            "{}: {} raw detections over {} windows, {} after merging",
            clip.id,
            raw.iter().map(|(_, d)| d.len()).sum::<usize>(),
            raw.len(),
            m.len()
        );
        merged.extend(m);
        if req.dump_raw.is_some() {
            raw_all.extend(raw.into_iter().flat_map(|(_, d)| d));
        }
    }
    let mut w = create(&req.out)?;
    write_detections_jsonl(&merged, &mut w)?;
    w.flush().map_err(|e| Error::io(&req.out, e))?;
    if let Some(p) = &req.dump_raw {
        let mut w = create(p)?;
        write_detections_jsonl(&raw_all, &mut w)?;
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    Ok(merged)
}

/// Scores a detection file against a dataset; writes the JSON report and optional PR curve.
pub fn eval(
    detections: &Path,
    data: &Path,
    config: &crate::merge_eval::MatchConfig,
    out: Option<&Path>,
    pr_csv: Option<&Path>,
) -> Result<MetricReport> {
    let dets = read_detections_jsonl(open(detections)?)?;
    let clips = load_dataset(data)?;
    let mut gt = Vec::new();
    for c in &clips {
        gt.extend(ground_truth_from_annotations(
            &c.id,
            &c.annotations,
            config.granularity,
        ));
    }
    let known: std::collections::HashSet<&str> = clips.iter().map(|c| c.id.as_str()).collect();
    if let Some(d) = dets.iter().find(|d| !known.contains(d.video_id.as_str())) {
        return Err(Error::Data {
            path: detections.to_path_buf(),
            message: format!("detection for unknown video `{}`", d.video_id),
        });
    }
    let (report, curve) = evaluate(&dets, &gt, config);
    if let Some(p) = out {
        let w = create(p)?;
        serde_json::to_writer_pretty(w, &report).map_err(|e| Error::parse("metric report", e))?;
    }
    if let Some(p) = pr_csv {
        let mut w = create(p)?;
        curve.write_csv(&mut w).map_err(|e| Error::io(p, e))?;
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    Ok(report)
}

/// Token rows written by [`tokenize`].
pub fn read_token_rows(path: &Path) -> Result<Vec<crate::pipeline::WindowRecord>> {
    let mut rows = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::parse("token row", format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(rows)
}

/// Exit status for an error: 1 usage/config, 2 data, 3 numeric.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Contract(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}
