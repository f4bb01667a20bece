//! Conversion between box/tracklet annotations and discrete token sequences.
//!
//! The token-id space is laid out as `[coordinates | classes | EOS, PAD, NA | extra reserved]`.
//! In 2D mode each box is four tokens `ty, lx, by, rx` drawn from `H` shared bins; in 1D mode
//! the image plane is flattened row-major and each box is two tokens (top-left, bottom-right)
//! drawn from `H²` bins.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CoordMode {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "1d")]
    OneD,
}

impl CoordMode {
    /// Coordinate tokens emitted per box.
    pub fn tokens_per_box(self) -> usize {
        match self {
            CoordMode::TwoD => 4,
            CoordMode::OneD => 2,
        }
    }
}

impl std::str::FromStr for CoordMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "2d" => Ok(CoordMode::TwoD),
            "1d" => Ok(CoordMode::OneD),
            other => Err(Error::Config(format!("unknown coordinate mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    /// Coordinate bins per axis.
    #[serde(rename = "H", alias = "bins")]
    pub bins: usize,
    #[serde(rename = "C", alias = "classes")]
    pub classes: usize,
    /// Reserved tokens; the first three are EOS, PAD and NA.
    #[serde(rename = "r", alias = "reserved")]
    pub reserved: usize,
    pub mode: CoordMode,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            bins: 2000,
            classes: 1,
            reserved: 3,
            mode: CoordMode::TwoD,
        }
    }
}

impl VocabConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::Config(format!("H must be >= 2, got {}", self.bins)));
        }
        if self.classes < 1 {
            return Err(Error::Config("C must be >= 1".into()));
        }
        if self.reserved < 3 {
            return Err(Error::Config(format!(
                "r must be >= 3 (EOS, PAD, NA), got {}",
                self.reserved
            )));
        }
        Ok(())
    }

    pub fn coord_tokens(&self) -> usize {
        match self.mode {
            CoordMode::TwoD => self.bins,
            CoordMode::OneD => self.bins * self.bins,
        }
    }

    /// `H + C + r` (2D) or `H² + C + r` (1D).
    pub fn vocab_size(&self) -> usize {
        self.coord_tokens() + self.classes + self.reserved
    }
}

/// What a token id stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Coord(u32),
    Class(usize),
    Eos,
    Pad,
    Na,
    Reserved,
    Invalid,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    config: VocabConfig,
    coord: Range<TokenId>,
    class: Range<TokenId>,
    eos: TokenId,
    pad: TokenId,
    na: TokenId,
    extra: Range<TokenId>,
}

/// Serializable description of a vocabulary layout, written next to token dumps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabManifest {
    #[serde(flatten)]
    pub config: VocabConfig,
    #[serde(rename = "V")]
    pub size: usize,
    pub ranges: ManifestRanges,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRanges {
    pub coord: [TokenId; 2],
    pub class: [TokenId; 2],
    pub eos: TokenId,
    pub pad: TokenId,
    pub na: TokenId,
    pub extra: [TokenId; 2],
}

/// Lays out coordinate ids first, then class ids, then the reserved block.
pub fn build_vocabulary(config: VocabConfig) -> Result<Vocabulary> {
    config.validate()?;
    let total = config.vocab_size();
    if total > TokenId::MAX as usize {
        return Err(Error::Config(format!(
            "vocabulary of {total} ids overflows u32"
        )));
    }
    let coord_end = config.coord_tokens() as TokenId;
    let class_end = coord_end + config.classes as TokenId;
    let eos = class_end;
    Ok(Vocabulary {
        config,
        coord: 0..coord_end,
        class: coord_end..class_end,
        eos,
        pad: eos + 1,
        na: eos + 2,
        extra: eos + 3..total as TokenId,
    })
}

impl Vocabulary {
    pub fn config(&self) -> &VocabConfig {
        &self.config
    }

    pub fn mode(&self) -> CoordMode {
        self.config.mode
    }

    pub fn bins(&self) -> usize {
        self.config.bins
    }

    pub fn num_classes(&self) -> usize {
        self.config.classes
    }

    pub fn size(&self) -> usize {
        self.extra.end as usize
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn pad(&self) -> TokenId {
        self.pad
    }

    pub fn na(&self) -> TokenId {
        self.na
    }

    pub fn coord_range(&self) -> Range<TokenId> {
        self.coord.clone()
    }

    pub fn class_range(&self) -> Range<TokenId> {
        self.class.clone()
    }

    pub fn class_token(&self, class_index: usize) -> Result<TokenId> {
        if class_index >= self.config.classes {
            return Err(Error::Encoding(format!(
                "class index {class_index} outside [0, {})",
                self.config.classes
            )));
        }
        Ok(self.class.start + class_index as TokenId)
    }

    pub fn coord_token(&self, bin: u32) -> Result<TokenId> {
        if bin as usize >= self.config.coord_tokens() {
            return Err(Error::Range {
                what: "coordinate token",
                value: bin as u64,
                limit: self.config.coord_tokens() as u64,
            });
        }
        Ok(self.coord.start + bin)
    }

    pub fn kind(&self, token: TokenId) -> TokenKind {
        if self.coord.contains(&token) {
            TokenKind::Coord(token - self.coord.start)
        } else if self.class.contains(&token) {
            TokenKind::Class((token - self.class.start) as usize)
        } else if token == self.eos {
            TokenKind::Eos
        } else if token == self.pad {
            TokenKind::Pad
        } else if token == self.na {
            TokenKind::Na
        } else if self.extra.contains(&token) {
            TokenKind::Reserved
        } else {
            TokenKind::Invalid
        }
    }

    pub fn manifest(&self) -> VocabManifest {
        VocabManifest {
            config: self.config,
            size: self.size(),
            ranges: ManifestRanges {
                coord: [self.coord.start, self.coord.end],
                class: [self.class.start, self.class.end],
                eos: self.eos,
                pad: self.pad,
                na: self.na,
                extra: [self.extra.start, self.extra.end],
            },
        }
    }

    /// Rebuilds a vocabulary from its manifest and checks the recorded layout agrees.
    pub fn from_manifest(manifest: &VocabManifest) -> Result<Self> {
        let vocab = build_vocabulary(manifest.config)?;
        if vocab.manifest() != *manifest {
            return Err(Error::parse(
                "vocabulary manifest",
                "recorded ranges do not match the H/C/r/mode layout",
            ));
        }
        Ok(vocab)
    }
}

/// Axis-aligned box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub ty: f64,
    pub lx: f64,
    pub by: f64,
    pub rx: f64,
}

impl BBox {
    pub fn from_ltrb(lx: f64, ty: f64, rx: f64, by: f64) -> Self {
        Self { ty, lx, by, rx }
    }

    pub fn ltrb(&self) -> [f64; 4] {
        [self.lx, self.ty, self.rx, self.by]
    }

    pub fn is_valid(&self) -> bool {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        in_unit(self.lx)
            && in_unit(self.rx)
            && in_unit(self.ty)
            && in_unit(self.by)
            && self.lx <= self.rx
            && self.ty <= self.by
    }

    pub fn width(&self) -> f64 {
        self.rx - self.lx
    }

    pub fn height(&self) -> f64 {
        self.by - self.ty
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectAnnotation {
    pub bbox: BBox,
    pub class_index: usize,
}

/// One object's boxes over the slots of a temporal window; `None` marks a missing frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackletAnnotation {
    pub slots: Vec<Option<BBox>>,
    pub class_index: usize,
    pub track_id: u64,
}

impl TrackletAnnotation {
    pub fn present_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<TokenId>,
    pub weights: Vec<f64>,
    /// Coordinates that had to be clamped into [0, 1] while encoding.
    pub clamped: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Appends PAD tokens (weight 0) up to `len`.
    pub fn pad_to(&mut self, len: usize, vocab: &Vocabulary) {
        while self.tokens.len() < len {
            self.tokens.push(vocab.pad());
            self.weights.push(0.0);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Quantized {
    pub bin: u32,
    /// Input was outside [0, 1] (or NaN) and got clamped.
    pub clamped: bool,
}

/// `round(x·(H−1))`, rounding half away from zero, clamped to `[0, H−1]`.
pub fn quantize(x: f64, bins: usize) -> Quantized {
    let top = (bins - 1) as f64;
    if x.is_nan() {
        return Quantized {
            bin: 0,
            clamped: true,
        };
    }
    let clamped = !(0.0..=1.0).contains(&x);
    let bin = (x.clamp(0.0, 1.0) * top).round().clamp(0.0, top) as u32;
    Quantized { bin, clamped }
}

pub fn dequantize(bin: u32, bins: usize) -> Result<f64> {
    if bin as usize >= bins {
        return Err(Error::Range {
            what: "bin",
            value: bin as u64,
            limit: bins as u64,
        });
    }
    Ok(bin as f64 / (bins - 1) as f64)
}

/// Row-major flattening: `y·H + x`.
pub fn flatten_coord(y_bin: u32, x_bin: u32, bins: usize) -> Result<u32> {
    for (what, v) in [("y bin", y_bin), ("x bin", x_bin)] {
        if v as usize >= bins {
            return Err(Error::Range {
                what,
                value: v as u64,
                limit: bins as u64,
            });
        }
    }
    Ok(y_bin * bins as u32 + x_bin)
}

/// Inverse of [`flatten_coord`], returns `(y_bin, x_bin)`.
pub fn unflatten_coord(index: u32, bins: usize) -> Result<(u32, u32)> {
    if index as usize >= bins * bins {
        return Err(Error::Range {
            what: "flattened coordinate",
            value: index as u64,
            limit: (bins * bins) as u64,
        });
    }
    let h = bins as u32;
    Ok((index / h, index % h))
}

fn shuffled_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

struct Emitter<'a> {
    vocab: &'a Vocabulary,
    tokens: Vec<TokenId>,
    clamped: usize,
}

impl<'a> Emitter<'a> {
    fn new(vocab: &'a Vocabulary) -> Self {
        Self {
            vocab,
            tokens: Vec::new(),
            clamped: 0,
        }
    }

    fn bin(&mut self, x: f64) -> u32 {
        let q = quantize(x, self.vocab.bins());
        if q.clamped {
            self.clamped += 1;
        }
        q.bin
    }

    fn push_box(&mut self, b: &BBox) -> Result<()> {
        match self.vocab.mode() {
            CoordMode::TwoD => {
                for v in [b.ty, b.lx, b.by, b.rx] {
                    let bin = self.bin(v);
                    self.tokens.push(self.vocab.coord_token(bin)?);
                }
            }
            CoordMode::OneD => {
                let h = self.vocab.bins();
                let (ty, lx, by, rx) = (
                    self.bin(b.ty),
                    self.bin(b.lx),
                    self.bin(b.by),
                    self.bin(b.rx),
                );
                self.tokens
                    .push(self.vocab.coord_token(flatten_coord(ty, lx, h)?)?);
                self.tokens
                    .push(self.vocab.coord_token(flatten_coord(by, rx, h)?)?);
            }
        }
        Ok(())
    }

    fn push_missing(&mut self) {
        let na = self.vocab.na();
        for _ in 0..self.vocab.mode().tokens_per_box() {
            self.tokens.push(na);
        }
    }

    fn finish(mut self) -> TokenSequence {
        self.tokens.push(self.vocab.eos());
        let weights = token_weights(&self.tokens, self.vocab, 1, false);
        if self.clamped > 0 {
            log::warn!(
                "{} coordinates clamped into [0, 1] while encoding",
                self.clamped
            );
        }
        TokenSequence {
            tokens: self.tokens,
            weights,
            clamped: self.clamped,
        }
    }
}

/// Encodes a still image's objects as `[ty, lx, by, rx, cls]*` followed by EOS.
pub fn encode_static(
    objects: &[ObjectAnnotation],
    vocab: &Vocabulary,
    order_seed: u64,
) -> Result<TokenSequence> {
    if vocab.mode() != CoordMode::TwoD {
        return Err(Error::Encoding(
            "static encoding requires a 2D vocabulary".into(),
        ));
    }
    let mut out = Emitter::new(vocab);
    for i in shuffled_order(objects.len(), order_seed) {
        let obj = &objects[i];
        let cls = vocab.class_token(obj.class_index)?;
        out.push_box(&obj.bbox)?;
        out.tokens.push(cls);
    }
    Ok(out.finish())
}

fn encode_tracklets(
    tracklets: &[TrackletAnnotation],
    vocab: &Vocabulary,
    slots: usize,
    order_seed: u64,
) -> Result<TokenSequence> {
    let mut out = Emitter::new(vocab);
    for i in shuffled_order(tracklets.len(), order_seed) {
        let t = &tracklets[i];
        if t.slots.len() != slots {
            return Err(Error::Encoding(format!(
                "tracklet {} has {} slots, window has {slots}",
                t.track_id,
                t.slots.len()
            )));
        }
        if t.present_count() == 0 {
            return Err(Error::Encoding(format!(
                "tracklet {} is absent from every frame",
                t.track_id
            )));
        }
        let cls = vocab.class_token(t.class_index)?;
        for slot in &t.slots {
            match slot {
                Some(b) => out.push_box(b)?,
                None => out.push_missing(),
            }
        }
        out.tokens.push(cls);
    }
    Ok(out.finish())
}

/// Encodes tracklets as `N` groups of four coordinate tokens (or four NA) plus the class token.
pub fn encode_video(
    tracklets: &[TrackletAnnotation],
    vocab: &Vocabulary,
    slots: usize,
    order_seed: u64,
) -> Result<TokenSequence> {
    if vocab.mode() != CoordMode::TwoD {
        return Err(Error::Encoding(
            "encode_video requires a 2D vocabulary".into(),
        ));
    }
    encode_tracklets(tracklets, vocab, slots, order_seed)
}

/// As [`encode_video`] with flattened corners: two tokens (or two NA) per frame.
pub fn encode_video_1d(
    tracklets: &[TrackletAnnotation],
    vocab: &Vocabulary,
    slots: usize,
    order_seed: u64,
) -> Result<TokenSequence> {
    if vocab.mode() != CoordMode::OneD {
        return Err(Error::Encoding(
            "encode_video_1d requires a 1D vocabulary".into(),
        ));
    }
    encode_tracklets(tracklets, vocab, slots, order_seed)
}

/// Encodes with whichever coordinate mode the vocabulary uses.
pub fn encode_tracklets_auto(
    tracklets: &[TrackletAnnotation],
    vocab: &Vocabulary,
    slots: usize,
    order_seed: u64,
) -> Result<TokenSequence> {
    encode_tracklets(tracklets, vocab, slots, order_seed)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DiagnosticKind {
    /// The last token of an object group was not a class token.
    InvalidClassToken,
    /// A frame group held something other than coordinate or NA tokens.
    InvalidCoordToken,
    /// A frame group mixed NA with coordinate tokens; the frame is treated as missing.
    PartialNa,
    /// Decoded corners were inverted (`rx < lx` or `by < ty`); the frame is dropped.
    InvertedBox,
    /// Every frame of the object was NA or dropped.
    NoPresentFrames,
    /// The sequence ended (by EOS or exhaustion) in the middle of an object.
    TruncatedObject,
    /// The sequence ran out without an EOS.
    MissingEos,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    /// Index of the first token of the offending object (or of the anomaly).
    pub position: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Decoded {
    pub tracklets: Vec<TrackletAnnotation>,
    /// Token positions each decoded tracklet was parsed from, parallel to `tracklets`.
    pub spans: Vec<Range<usize>>,
    pub diagnostics: Vec<Diagnostic>,
}

enum Frame {
    Present(BBox),
    Missing,
}

fn decode_frame(
    group: &[TokenId],
    vocab: &Vocabulary,
    start: usize,
    diagnostics: &mut Vec<Diagnostic>,
) -> Option<Frame> {
    let kinds: Vec<TokenKind> = group.iter().map(|&t| vocab.kind(t)).collect();
    let na = kinds.iter().filter(|k| **k == TokenKind::Na).count();
    if na > 0 {
        if na < group.len() {
            diagnostics.push(Diagnostic {
                kind: DiagnosticKind::PartialNa,
                position: start,
            });
        }
        // a non-coordinate token alongside NA still makes the object malformed
        if kinds
            .iter()
            .any(|k| !matches!(k, TokenKind::Na | TokenKind::Coord(_)))
        {
            diagnostics.push(Diagnostic {
                kind: DiagnosticKind::InvalidCoordToken,
                position: start,
            });
            return None;
        }
        return Some(Frame::Missing);
    }
    let mut bins = Vec::with_capacity(kinds.len());
    for k in kinds {
        match k {
            TokenKind::Coord(b) => bins.push(b),
            _ => {
                diagnostics.push(Diagnostic {
                    kind: DiagnosticKind::InvalidCoordToken,
                    position: start,
                });
                return None;
            }
        }
    }
    let h = vocab.bins();
    let deq = |b: u32| b as f64 / (h - 1) as f64;
    let bbox = match vocab.mode() {
        CoordMode::TwoD => BBox {
            ty: deq(bins[0]),
            lx: deq(bins[1]),
            by: deq(bins[2]),
            rx: deq(bins[3]),
        },
        CoordMode::OneD => {
            let (ty, lx) = (bins[0] / h as u32, bins[0] % h as u32);
            let (by, rx) = (bins[1] / h as u32, bins[1] % h as u32);
            BBox {
                ty: deq(ty),
                lx: deq(lx),
                by: deq(by),
                rx: deq(rx),
            }
        }
    };
    if bbox.rx < bbox.lx || bbox.by < bbox.ty {
        diagnostics.push(Diagnostic {
            kind: DiagnosticKind::InvertedBox,
            position: start,
        });
        return Some(Frame::Missing);
    }
    Some(Frame::Present(bbox))
}

/// Parses raw (possibly malformed) model output back into tracklets with `slots` frames each.
///
/// Never fails: anomalies are collected as diagnostics and structurally invalid objects skipped.
pub fn decode_video(tokens: &[TokenId], vocab: &Vocabulary, slots: usize) -> Decoded {
    let per_frame = vocab.mode().tokens_per_box();
    let group = per_frame * slots + 1;
    let mut out = Decoded::default();
    let mut pos = 0;
    loop {
        if pos >= tokens.len() {
            out.diagnostics.push(Diagnostic {
                kind: DiagnosticKind::MissingEos,
                position: pos,
            });
            break;
        }
        if tokens[pos] == vocab.eos() {
            break;
        }
        let end = (pos + group).min(tokens.len());
        let chunk = &tokens[pos..end];
        if let Some(k) = chunk.iter().position(|&t| t == vocab.eos()) {
            out.diagnostics.push(Diagnostic {
                kind: DiagnosticKind::TruncatedObject,
                position: pos,
            });
            pos += k;
            continue;
        }
        if chunk.len() < group {
            out.diagnostics.push(Diagnostic {
                kind: DiagnosticKind::TruncatedObject,
                position: pos,
            });
            out.diagnostics.push(Diagnostic {
                kind: DiagnosticKind::MissingEos,
                position: tokens.len(),
            });
            break;
        }
        let object_start = pos;
        pos += group;

        let class_index = match vocab.kind(chunk[group - 1]) {
            TokenKind::Class(c) => c,
            _ => {
                out.diagnostics.push(Diagnostic {
                    kind: DiagnosticKind::InvalidClassToken,
                    position: object_start,
                });
                continue;
            }
        };
        let mut frames = Vec::with_capacity(slots);
        let mut valid = true;
        for (i, g) in chunk[..group - 1].chunks(per_frame).enumerate() {
            match decode_frame(g, vocab, object_start + i * per_frame, &mut out.diagnostics) {
                Some(Frame::Present(b)) => frames.push(Some(b)),
                Some(Frame::Missing) => frames.push(None),
                None => {
                    valid = false;
                    break;
                }
            }
        }
        if !valid {
            continue;
        }
        if frames.iter().all(Option::is_none) {
            out.diagnostics.push(Diagnostic {
                kind: DiagnosticKind::NoPresentFrames,
                position: object_start,
            });
            continue;
        }
        out.tracklets.push(TrackletAnnotation {
            slots: frames,
            class_index,
            track_id: out.tracklets.len() as u64,
        });
        out.spans.push(object_start..pos);
    }
    out
}

/// Per-token training weights.
///
/// PAD gets 0 and everything else 1; with `equalize`, each class token instead carries the
/// combined weight of its object's coordinate/NA tokens (`4·slots` in 2D, `2·slots` in 1D).
pub fn token_weights(
    tokens: &[TokenId],
    vocab: &Vocabulary,
    slots: usize,
    equalize: bool,
) -> Vec<f64> {
    let class_weight = if equalize {
        (vocab.mode().tokens_per_box() * slots) as f64
    } else {
        1.0
    };
    tokens
        .iter()
        .map(|&t| match vocab.kind(t) {
            TokenKind::Pad => 0.0,
            TokenKind::Class(_) => class_weight,
            _ => 1.0,
        })
        .collect()
}
