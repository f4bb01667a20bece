//! Miniature encoder–decoder detector: patch backbone, self-attention encoder, video fusion
//! (early, middle pairwise/hierarchical, late), weight-tied autoregressive decoder, training
//! and decoding.
//!
//! Computation runs in `f64` on a per-sample tape; stored parameters and optimizer moments are
//! kept `f32`-exact so checkpoints round-trip bitwise.

pub mod checkpoint;
pub mod decode;
pub mod gradcheck;
pub mod graph;
pub mod network;
pub mod params;
pub mod tensor;
pub mod train;

pub use decode::{generate, generate_from_memory, Generation, Strategy};
pub use gradcheck::{gradient_check, GradCheckReport, GroupCheck};
pub use network::{patchify, weighted_loss, ForwardStats, FusionMode, Model, ModelConfig, Sample};
pub use params::{ParamId, ParamStore};
pub use tensor::Matrix;
pub use train::{AdamState, StepReport, TrainConfig, Trainer};
