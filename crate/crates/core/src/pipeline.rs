//! End-to-end plumbing shared by the CLI and tests: clips to training samples, the seeded
//! training loop, and window-by-window inference feeding the merger.

use std::path::Path;

use image::GrayImage;
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::VideoAnnotations;
use crate::codec::{decode_video, encode_tracklets_auto, token_weights, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::merge_eval::{merge_windows, Detection, Granularity};
use crate::model::{generate_from_memory, Matrix, Model, Sample, Strategy};
use crate::synth::{load_clip, RenderedClip};
use crate::windows::{enumerate_windows, extract_window_tracklets, TemporalWindow, WindowSpec};

/// SplitMix64 finalizer; mixes `parts` into `seed` so every (clip, window, step) gets its own
/// reproducible stream.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Pixel intensities scaled to `[0, 1]`.
pub fn image_to_matrix(img: &GrayImage) -> Matrix {
    let (w, h) = img.dimensions();
    Matrix::from_vec(
        h as usize,
        w as usize,
        img.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
    )
}

/// A video held in model-ready form.
#[derive(Clone, Debug)]
pub struct Clip {
    pub id: String,
    pub frames: Vec<Matrix>,
    pub annotations: VideoAnnotations,
}

impl Clip {
    pub fn from_rendered(id: impl Into<String>, clip: &RenderedClip) -> Self {
        Self {
            id: id.into(),
            frames: clip.frames.iter().map(image_to_matrix).collect(),
            annotations: clip.annotations.clone(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Self::from_rendered(id, &load_clip(dir)?))
    }

    /// Frames of one window, in window order.
    pub fn window_frames(&self, window: &TemporalWindow) -> Vec<Matrix> {
        window
            .frames
            .iter()
            .map(|&f| self.frames[f as usize - 1].clone())
            .collect()
    }
}

/// Loads every clip subdirectory of `dir`, sorted by name.
pub fn load_dataset(dir: &Path) -> Result<Vec<Clip>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut dirs = Vec::new();
    for e in entries {
        let e = e.map_err(|err| Error::io(dir, err))?;
        if e.path().is_dir() {
            dirs.push(e.path());
        }
    }
    dirs.sort();
    dirs.iter().map(|d| Clip::load(d)).collect()
}

/// One tokenized window of one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub video_id: String,
    #[serde(flatten)]
    pub window: TemporalWindow,
    pub tokens: Vec<u32>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TokenizeOptions<'a> {
    pub vocab: &'a Vocabulary,
    pub spec: WindowSpec,
    pub equalize: bool,
    pub seed: u64,
}

/// Target sequence for one window; object order is shuffled from `(seed, clip, window)`.
pub fn tokenize_window(
    clip: &Clip,
    clip_index: usize,
    window: &TemporalWindow,
    opts: &TokenizeOptions,
) -> Result<TokenSequence> {
    let tracklets = extract_window_tracklets(&clip.annotations, window, opts.spec.full_span);
    let slots = opts.spec.target_slots();
    let order = derive_seed(opts.seed, &[clip_index as u64, window.index as u64]);
    let mut seq = encode_tracklets_auto(&tracklets, opts.vocab, slots, order)?;
    seq.weights = token_weights(&seq.tokens, opts.vocab, slots, opts.equalize);
    Ok(seq)
}

pub fn tokenize_clip(
    clip: &Clip,
    clip_index: usize,
    opts: &TokenizeOptions,
) -> Result<Vec<WindowRecord>> {
    let windows = enumerate_windows(clip.annotations.frame_count, &opts.spec)?;
    if let Some(d) = &windows.diagnostic {
        log::warn!("{}: {d}", clip.id);
    }
    windows
        .windows
        .iter()
        .map(|w| {
            let seq = tokenize_window(clip, clip_index, w, opts)?;
            Ok(WindowRecord {
                video_id: clip.id.clone(),
                window: w.clone(),
                tokens: seq.tokens,
                weights: seq.weights,
            })
        })
        .collect()
}

/// Training samples for every window of every clip.
pub fn build_samples(
    clips: &[Clip],
    opts: &TokenizeOptions,
    max_seq_len: usize,
) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (ci, clip) in clips.iter().enumerate() {
        for rec in tokenize_clip(clip, ci, opts)? {
            if rec.tokens.len() > max_seq_len {
                return Err(Error::Config(format!(
                    "{} window {} needs {} tokens but L = {max_seq_len}",
                    clip.id,
                    rec.window.index,
                    rec.tokens.len()
                )));
            }
            out.push(Sample {
                frames: clip.window_frames(&rec.window),
                targets: rec.tokens,
                weights: rec.weights,
            });
        }
    }
    Ok(out)
}

/// Sample indices for step `step`: `batch` distinct draws from a stream keyed by
/// `(seed, step)`, so a resumed run sees exactly the batches of an uninterrupted one.
pub fn batch_indices(num_samples: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[step]));
    sample_indices(&mut rng, num_samples, batch.min(num_samples)).into_vec()
}

/// How a decoded object's confidence is computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// Probability of the emitted class token.
    #[default]
    ClassToken,
    /// Geometric mean of the probabilities of all the object's tokens.
    GeometricMean,
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class-token" => Ok(ScoreMode::ClassToken),
            "geometric-mean" => Ok(ScoreMode::GeometricMean),
            other => Err(Error::Config(format!("unknown score mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct InferOptions<'a> {
    pub vocab: &'a Vocabulary,
    pub spec: WindowSpec,
    pub strategy: Strategy,
    pub score: ScoreMode,
    pub seed: u64,
}

/// Decodes one window and re-anchors its objects to absolute frames.
pub fn detect_window(
    model: &Model,
    clip: &Clip,
    clip_index: usize,
    window: &TemporalWindow,
    opts: &InferOptions,
) -> Result<Vec<Detection>> {
    let frames = clip.window_frames(window);
    let (memory, _) = model.memory(&frames)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        opts.seed,
        &[clip_index as u64, window.index as u64],
    ));
    let vocab = opts.vocab;
    let gen = generate_from_memory(
        model,
        &memory,
        vocab.pad(),
        vocab.eos(),
        model.config().max_seq_len,
        opts.strategy,
        &mut rng,
    )?;
    let slots = opts.spec.target_slots();
    let decoded = decode_video(&gen.tokens, vocab, slots);
    for d in &decoded.diagnostics {
        log::debug!("{} window {}: {:?}", clip.id, window.index, d);
    }
    let slot_frames = window.slot_frames(opts.spec.full_span);
    Ok(decoded
        .tracklets
        .iter()
        .zip(&decoded.spans)
        .filter(|(t, _)| t.present_count() > 0)
        .map(|(t, span)| {
            let score = match opts.score {
                ScoreMode::ClassToken => gen.probs[span.end - 1],
                ScoreMode::GeometricMean => {
                    let logs: f64 = gen.probs[span.clone()].iter().map(|p| p.ln()).sum();
                    (logs / span.len() as f64).exp()
                }
            };
            Detection {
                video_id: clip.id.clone(),
                frames: slot_frames.clone(),
                boxes: t.slots.clone(),
                class_index: t.class_index,
                score,
                source_window: window.index,
            }
        })
        .collect())
}

/// Raw per-window detections for a whole clip.
pub fn detect_clip(
    model: &Model,
    clip: &Clip,
    clip_index: usize,
    opts: &InferOptions,
) -> Result<Vec<(TemporalWindow, Vec<Detection>)>> {
    check_window_compat(model, &opts.spec)?;
    let windows = enumerate_windows(clip.annotations.frame_count, &opts.spec)?;
    if let Some(d) = &windows.diagnostic {
        log::warn!("{}: {d}", clip.id);
    }
    windows
        .windows
        .into_iter()
        .map(|w| {
            let dets = detect_window(model, clip, clip_index, &w, opts)?;
            Ok((w, dets))
        })
        .collect()
}

/// Decodes and merges every window of a clip.
pub fn infer_clip(
    model: &Model,
    clip: &Clip,
    clip_index: usize,
    opts: &InferOptions,
    policy: Granularity,
    merge_iou: f64,
    class_agnostic: bool,
) -> Result<Vec<Detection>> {
    let raw = detect_clip(model, clip, clip_index, opts)?;
    merge_windows(&raw, &opts.spec, policy, merge_iou, class_agnostic)
}

/// A model trained on `N`-frame windows only accepts windows of the same length.
pub fn check_window_compat(model: &Model, spec: &WindowSpec) -> Result<()> {
    let n = model.config().window_len;
    if spec.length != n {
        return Err(Error::Config(format!(
            "model was trained with N = {n} but the window spec asks for N = {}",
            spec.length
        )));
    }
    Ok(())
}
