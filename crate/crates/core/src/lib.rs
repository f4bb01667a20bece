//! Token-based video object detection at desk scale.
//!
//! Objects in an `N`-frame temporal window are written as token sequences (four coordinate
//! tokens or four NA tokens per frame, then a class token), predicted autoregressively by a
//! small encoder–decoder transformer, and merged across overlapping windows with NMS before
//! recall-precision evaluation.
//!
//! - [`codec`]: vocabulary, quantization, tracklet encode/decode, class-token weights
//! - [`windows`]: temporal window enumeration, coverage and per-window targets
//! - [`annotations`]: per-video ground truth and its CSV form
//! - [`synth`]: synthetic moving-rectangle clips
//! - [`model`]: transformer with static, early, middle, late and first-frame-only fusion
//! - [`merge_eval`]: cross-window NMS, matching, RP-AUC / cRP-AUC
//! - [`config`]: run configuration file
//! - [`pipeline`]: clips, training samples and per-window inference
//! - [`commands`]: the `synth`, `tokenize`, `train`, `infer` and `eval` subcommands

pub mod annotations;
pub mod codec;
pub mod commands;
pub mod config;
pub mod error;
pub mod merge_eval;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod windows;

pub use error::{Error, Result};
