//! Run configuration: a TOML file with one section per module.
//!
//! ```toml
//! seed = 7
//! [scene]
//! frames = 8
//! [vocab]
//! H = 32
//! [window]
//! length = 2
//! [model]
//! fusion = "middle-pairwise"
//! [train]
//! steps = 4000
//! ```
//!
//! `model.vocab_size`, `model.window_len`, `model.image_size` and `vocab.C` are derived from
//! the vocabulary, window and scene sections when omitted, and must agree with them when
//! given. Command-line flags override file values; the seed falls back to `TOKENTRACK_SEED`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::VocabConfig;
use crate::error::{Error, Result};
use crate::merge_eval::{Granularity, MatchConfig};
use crate::model::{FusionMode, ModelConfig, Strategy, TrainConfig};
use crate::pipeline::ScoreMode;
use crate::synth::SceneConfig;
use crate::windows::WindowSpec;

pub const SEED_ENV: &str = "TOKENTRACK_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: u64,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub freeze_backbone: bool,
    /// Class-token weight equalization.
    pub cls_eq: bool,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: 2000,
            learning_rate: t.learning_rate,
            warmup_fraction: t.warmup_fraction,
            clip_norm: t.clip_norm.unwrap_or(0.0),
            freeze_backbone: false,
            cls_eq: false,
            log_every: 50,
            checkpoint_every: 500,
        }
    }
}

impl TrainSection {
    pub fn optimizer(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            warmup_fraction: self.warmup_fraction,
            total_steps: self.steps,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            freeze_backbone: self.freeze_backbone,
            ..TrainConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    #[default]
    Greedy,
    Nucleus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferSection {
    pub strategy: StrategyKind,
    pub top_p: f64,
    pub temperature: f64,
    pub score: ScoreMode,
    pub merge_policy: Granularity,
    pub merge_iou: f64,
    pub class_agnostic_merge: bool,
}

impl Default for InferSection {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::Greedy,
            top_p: 0.9,
            temperature: 1.0,
            score: ScoreMode::ClassToken,
            merge_policy: Granularity::PerFrame,
            merge_iou: 0.5,
            class_agnostic_merge: false,
        }
    }
}

impl InferSection {
    pub fn strategy(&self) -> Strategy {
        match self.strategy {
            StrategyKind::Greedy => Strategy::Greedy,
            StrategyKind::Nucleus => Strategy::Nucleus {
                top_p: self.top_p,
                temperature: self.temperature,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub paths: Paths,
    pub scene: SceneConfig,
    pub vocab: VocabConfig,
    pub window: WindowSpec,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub infer: InferSection,
    pub eval: MatchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        let vocab = VocabConfig {
            bins: 32,
            classes: scene.classes,
            ..VocabConfig::default()
        };
        let window = WindowSpec::default();
        let model = ModelConfig {
            image_size: scene.image_size,
            window_len: window.length,
            vocab_size: vocab.vocab_size(),
            ..ModelConfig::default()
        };
        Self {
            seed: None,
            paths: Paths::default(),
            scene,
            vocab,
            window,
            model,
            train: TrainSection::default(),
            infer: InferSection::default(),
            eval: MatchConfig::default(),
        }
    }
}

fn has_key(table: &toml::Table, section: &str, key: &str) -> bool {
    table
        .get(section)
        .and_then(|s| s.as_table())
        .is_some_and(|s| s.contains_key(key))
}

impl RunConfig {
    /// Parses a config file's text, derives omitted cross-section fields and validates.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        let mut cfg: RunConfig = table
            .clone()
            .try_into()
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        if !has_key(&table, "vocab", "C") && !has_key(&table, "vocab", "classes") {
            cfg.vocab.classes = cfg.scene.classes;
        }
        if !has_key(&table, "model", "image_size") {
            cfg.model.image_size = cfg.scene.image_size;
        }
        if !has_key(&table, "model", "window_len") {
            cfg.model.window_len = cfg.window.length;
        }
        if !has_key(&table, "model", "vocab_size") {
            cfg.model.vocab_size = cfg.vocab.vocab_size();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Re-derives fields that follow other sections after command-line overrides.
    pub fn sync_derived(&mut self) {
        self.model.window_len = self.window.length;
        self.model.vocab_size = self.vocab.vocab_size();
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.vocab.validate()?;
        self.window.validate()?;
        self.model.validate()?;
        self.train.optimizer().validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.model.vocab_size != self.vocab.vocab_size() {
            return fail(format!(
                "model.vocab_size {} does not match the {:?} vocabulary size {}",
                self.model.vocab_size,
                self.vocab.mode,
                self.vocab.vocab_size()
            ));
        }
        if self.model.window_len != self.window.length {
            return fail(format!(
                "model.window_len {} does not match window.length {}",
                self.model.window_len, self.window.length
            ));
        }
        if self.model.fusion == FusionMode::Static && self.window.length != 1 {
            return fail("static fusion needs window.length = 1".into());
        }
        if self.model.image_size != self.scene.image_size {
            return fail(format!(
                "model.image_size {} does not match scene.image_size {}",
                self.model.image_size, self.scene.image_size
            ));
        }
        if self.vocab.classes < self.scene.classes {
            return fail(format!(
                "vocabulary has {} classes but scenes draw {}",
                self.vocab.classes, self.scene.classes
            ));
        }
        let per_object = self.vocab.mode.tokens_per_box() * self.window.target_slots() + 1;
        let longest = self.scene.max_objects * per_object + 1;
        if longest > self.model.max_seq_len {
            return fail(format!(
                "model.max_seq_len {} is shorter than the longest target ({longest} tokens)",
                self.model.max_seq_len
            ));
        }
        if !(self.eval.iou_threshold > 0.0 && self.eval.iou_threshold <= 1.0)
            || !(self.infer.merge_iou > 0.0 && self.infer.merge_iou <= 1.0)
        {
            return fail("IoU thresholds must lie in (0, 1]".into());
        }
        Ok(())
    }

    /// Seed precedence: command line, then config file, then `TOKENTRACK_SEED`, then 0.
    pub fn resolve_seed(&self, cli: Option<u64>) -> Result<u64> {
        if let Some(s) = cli.or(self.seed) {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an integer"))),
            Err(_) => Ok(0),
        }
    }

    /// Routes the single run seed into every seeded component.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.scene.seed = seed;
        self.model.seed = seed;
    }
}
