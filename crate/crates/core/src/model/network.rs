use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Var};
use super::params::{Init, ParamId, ParamStore};
use super::tensor::Matrix;
use crate::error::{Error, Result};

/// Where per-frame information is merged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Single image in, single image out (`N = 1`).
    Static,
    /// 3D patch embedding over time inside the backbone.
    Early,
    /// Shared cross-attention folded left to right over frame encodings.
    MiddlePairwise,
    /// Levelled cross-attention over consecutive pairs.
    MiddleHierarchical,
    /// Frame encodings plus a 3D position embedding, concatenated as decoder memory.
    Late,
    /// Only frame 1 is encoded; targets still cover all `N` frames.
    FirstFrameOnly,
}

impl FusionMode {
    pub const ALL: [FusionMode; 6] = [
        FusionMode::Static,
        FusionMode::Early,
        FusionMode::MiddlePairwise,
        FusionMode::MiddleHierarchical,
        FusionMode::Late,
        FusionMode::FirstFrameOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Static => "static",
            FusionMode::Early => "early",
            FusionMode::MiddlePairwise => "middle-pairwise",
            FusionMode::MiddleHierarchical => "middle-hierarchical",
            FusionMode::Late => "late",
            FusionMode::FirstFrameOnly => "first-frame-only",
        }
    }

    fn is_middle(self) -> bool {
        matches!(
            self,
            FusionMode::MiddlePairwise | FusionMode::MiddleHierarchical
        )
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input frame side `D`.
    pub image_size: usize,
    /// Patch side `p`; the backbone yields `(D/p)²` features per frame.
    pub patch_size: usize,
    pub d_model: usize,
    pub d_backbone: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// Input frames per window `N`.
    pub window_len: usize,
    pub fusion: FusionMode,
    /// Longest decoder sequence `L`.
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub batch_size: usize,
    pub mlp_ratio: usize,
    /// Temporal extent of the early-fusion 3D patches (capped at `N`).
    pub early_temporal_kernel: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            d_model: 32,
            d_backbone: 64,
            encoder_layers: 1,
            decoder_layers: 2,
            heads: 2,
            window_len: 2,
            fusion: FusionMode::MiddlePairwise,
            max_seq_len: 64,
            vocab_size: 70,
            batch_size: 8,
            mlp_ratio: 4,
            early_temporal_kernel: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "patch size {} must divide image size {}",
                self.patch_size, self.image_size
            ));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_model == 0 || self.d_backbone == 0 || self.mlp_ratio == 0 {
            return fail("widths must be positive".into());
        }
        if self.window_len == 0 {
            return fail("window length must be >= 1".into());
        }
        if self.fusion == FusionMode::Static && self.window_len != 1 {
            return fail(format!(
                "static fusion requires N = 1, got {}",
                self.window_len
            ));
        }
        if self.vocab_size < 4 || self.max_seq_len == 0 || self.batch_size == 0 {
            return fail("vocab_size, max_seq_len and batch_size must be positive".into());
        }
        if self.early_temporal_kernel == 0 {
            return fail("early temporal kernel must be >= 1".into());
        }
        Ok(())
    }

    /// Patches per axis.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Features per frame `S`.
    pub fn seq_per_frame(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Decoder memory length for this fusion mode.
    pub fn memory_len(&self) -> usize {
        match self.fusion {
            FusionMode::Late => self.seq_per_frame() * self.window_len,
            _ => self.seq_per_frame(),
        }
    }

    /// Frames each input window must supply.
    pub fn frames_consumed(&self) -> usize {
        match self.fusion {
            FusionMode::Static | FusionMode::FirstFrameOnly => 1,
            _ => self.window_len,
        }
    }

    fn temporal_kernel(&self) -> usize {
        self.early_temporal_kernel.min(self.window_len)
    }

    /// Scalar parameter count of the model this config builds (saturating).
    pub fn param_count(&self) -> usize {
        let mul = |a: usize, b: usize| a.saturating_mul(b);
        let sum = |xs: &[usize]| xs.iter().fold(0usize, |a, &b| a.saturating_add(b));
        let d = self.d_model;
        let hidden = mul(d, self.mlp_ratio);
        let ln = mul(2, d);
        let attn = mul(4, mul(d, d).saturating_add(d));
        let mlp = sum(&[mul(d, hidden), hidden, mul(hidden, d), d]);
        let kt = if self.fusion == FusionMode::Early {
            self.temporal_kernel()
        } else {
            1
        };
        let patch_in = mul(kt, mul(self.patch_size, self.patch_size));
        let s = mul(self.grid(), self.grid());
        let backbone = mul(patch_in, self.d_backbone).saturating_add(self.d_backbone);
        let proj = mul(self.d_backbone, d).saturating_add(d);
        let enc_block = sum(&[mul(2, ln), attn, mlp]);
        let dec_block = sum(&[mul(4, ln), mul(2, attn), mlp]);
        let fusion = if self.fusion.is_middle() {
            sum(&[mul(2, ln), attn])
        } else {
            0
        };
        let pos3d = if self.fusion == FusionMode::Late {
            mul(mul(self.window_len, s), d)
        } else {
            0
        };
        sum(&[
            backbone,
            proj,
            mul(s, d),
            mul(self.encoder_layers, enc_block),
            fusion,
            pos3d,
            mul(self.vocab_size, d),
            mul(self.max_seq_len, d),
            mul(self.decoder_layers, dec_block),
            ln,
        ])
    }
}

#[derive(Clone, Copy, Debug)]
struct LnIds {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct MlpIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct EncoderBlock {
    ln1: LnIds,
    attn: AttnIds,
    ln2: LnIds,
    mlp: MlpIds,
}

#[derive(Clone, Copy, Debug)]
struct DecoderBlock {
    ln1: LnIds,
    self_attn: AttnIds,
    ln2: LnIds,
    ln_mem: LnIds,
    cross_attn: AttnIds,
    ln3: LnIds,
    mlp: MlpIds,
}

#[derive(Clone, Copy, Debug)]
struct CrossFusion {
    ln_q: LnIds,
    ln_kv: LnIds,
    attn: AttnIds,
}

#[derive(Clone, Debug)]
struct Layout {
    patch_w: ParamId,
    patch_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    enc_pos: ParamId,
    encoder: Vec<EncoderBlock>,
    fusion: Option<CrossFusion>,
    pos3d: Option<ParamId>,
    embed: ParamId,
    dec_pos: ParamId,
    decoder: Vec<DecoderBlock>,
    ln_f: LnIds,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> ParamId {
        self.store.add(name, rows, cols, init, self.rng)
    }

    fn linear(
        &mut self,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
    ) -> (ParamId, ParamId) {
        let w = self.add(
            &format!("{prefix}.w"),
            fan_in,
            fan_out,
            Init::Normal(gain / (fan_in as f64).sqrt()),
        );
        let b = self.add(&format!("{prefix}.b"), 1, fan_out, Init::Zeros);
        (w, b)
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIds {
        LnIds {
            g: self.add(&format!("{prefix}.g"), 1, d, Init::Ones),
            b: self.add(&format!("{prefix}.b"), 1, d, Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize, out_gain: f64) -> AttnIds {
        let (wq, bq) = self.linear(&format!("{prefix}.q"), d, d, 1.0);
        let (wk, bk) = self.linear(&format!("{prefix}.k"), d, d, 1.0);
        let (wv, bv) = self.linear(&format!("{prefix}.v"), d, d, 1.0);
        let (wo, bo) = self.linear(&format!("{prefix}.o"), d, d, out_gain);
        AttnIds {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn mlp(&mut self, prefix: &str, d: usize, hidden: usize, out_gain: f64) -> MlpIds {
        let (w1, b1) = self.linear(&format!("{prefix}.fc1"), d, hidden, 1.0);
        let (w2, b2) = self.linear(&format!("{prefix}.fc2"), hidden, d, out_gain);
        MlpIds { w1, b1, w2, b2 }
    }
}

/// Counters recorded during one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardStats {
    /// Video cross-attention applications in the middle-fusion stage.
    pub fusion_cross_attention: usize,
}

/// One training/evaluation example: input frames plus the target sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub frames: Vec<Matrix>,
    pub targets: Vec<u32>,
    pub weights: Vec<f64>,
}

/// A single forward pass: the tape plus a per-parameter node cache, so each parameter enters
/// the graph once no matter how many frames or positions use it.
pub struct Forward<'m> {
    model: &'m Model,
    pub graph: Graph,
    vars: Vec<Option<Var>>,
    pub stats: ForwardStats,
}

impl<'m> Forward<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self {
            model,
            graph: Graph::new(),
            vars: vec![None; model.params.tensors().len()],
            stats: ForwardStats::default(),
        }
    }

    fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = self.graph.param(&self.model.params, id);
        self.vars[id.0] = Some(v);
        v
    }

    fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let (w, b) = (self.p(w), self.p(b));
        let y = self.graph.matmul(x, w);
        self.graph.add_row(y, b)
    }

    fn ln(&mut self, x: Var, ids: LnIds) -> Var {
        let (g, b) = (self.p(ids.g), self.p(ids.b));
        self.graph.layer_norm(x, g, b)
    }

    fn attention(&mut self, query: Var, context: Var, ids: AttnIds, causal: bool) -> Var {
        let q = self.linear(query, ids.wq, ids.bq);
        let k = self.linear(context, ids.wk, ids.bk);
        let v = self.linear(context, ids.wv, ids.bv);
        let heads = self.model.config.heads;
        let a = self.graph.attention(q, k, v, heads, causal);
        self.linear(a, ids.wo, ids.bo)
    }

    fn mlp(&mut self, x: Var, ids: MlpIds) -> Var {
        let h = self.linear(x, ids.w1, ids.b1);
        let h = self.graph.gelu(h);
        self.linear(h, ids.w2, ids.b2)
    }
}

/// Non-overlapping `p×p` patches of a `D×D` frame, one row per patch in row-major order.
pub fn patchify(frame: &Matrix, patch: usize) -> Matrix {
    let grid = frame.rows / patch;
    let mut out = Matrix::zeros(grid * grid, patch * patch);
    for gy in 0..grid {
        for gx in 0..grid {
            let row = out.row_mut(gy * grid + gx);
            for dy in 0..patch {
                let src = &frame.row(gy * patch + dy)[gx * patch..(gx + 1) * patch];
                row[dy * patch..(dy + 1) * patch].copy_from_slice(src);
            }
        }
    }
    out
}

/// Encoder–decoder detector with a tied token embedding / output projection.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let d = config.d_model;
        let s = config.seq_per_frame();
        let patch_in = config.patch_size * config.patch_size;
        let hidden = d * config.mlp_ratio;
        let residual_gain =
            1.0 / ((2 * (config.encoder_layers + config.decoder_layers + 1)) as f64).sqrt();

        let (patch_w, patch_b) = if config.fusion == FusionMode::Early {
            b.linear(
                "backbone.patch3d",
                config.temporal_kernel() * patch_in,
                config.d_backbone,
                1.0,
            )
        } else {
            b.linear("backbone.patch", patch_in, config.d_backbone, 1.0)
        };
        let (proj_w, proj_b) = b.linear("encoder.proj", config.d_backbone, d, 1.0);
        let enc_pos = b.add("encoder.pos", s, d, Init::Normal(0.1));
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderBlock {
                ln1: b.ln(&format!("encoder.{i}.ln1"), d),
                attn: b.attn(&format!("encoder.{i}.attn"), d, residual_gain),
                ln2: b.ln(&format!("encoder.{i}.ln2"), d),
                mlp: b.mlp(&format!("encoder.{i}.mlp"), d, hidden, residual_gain),
            })
            .collect();
        let fusion = config.fusion.is_middle().then(|| CrossFusion {
            ln_q: b.ln("fusion.ln_q", d),
            ln_kv: b.ln("fusion.ln_kv", d),
            attn: b.attn("fusion.attn", d, residual_gain),
        });
        let pos3d = (config.fusion == FusionMode::Late)
            .then(|| b.add("fusion.pos3d", config.window_len * s, d, Init::Normal(0.1)));
        let embed = b.add("decoder.embed", config.vocab_size, d, Init::Normal(0.1));
        let dec_pos = b.add("decoder.pos", config.max_seq_len, d, Init::Normal(0.1));
        let decoder = (0..config.decoder_layers)
            .map(|i| DecoderBlock {
                ln1: b.ln(&format!("decoder.{i}.ln1"), d),
                self_attn: b.attn(&format!("decoder.{i}.self"), d, residual_gain),
                ln2: b.ln(&format!("decoder.{i}.ln2"), d),
                ln_mem: b.ln(&format!("decoder.{i}.ln_mem"), d),
                cross_attn: b.attn(&format!("decoder.{i}.cross"), d, residual_gain),
                ln3: b.ln(&format!("decoder.{i}.ln3"), d),
                mlp: b.mlp(&format!("decoder.{i}.mlp"), d, hidden, residual_gain),
            })
            .collect();
        let ln_f = b.ln("decoder.ln_f", d);
        let layout = Layout {
            patch_w,
            patch_b,
            proj_w,
            proj_b,
            enc_pos,
            encoder,
            fusion,
            pos3d,
            embed,
            dec_pos,
            decoder,
            ln_f,
        };
        Ok(Self {
            config,
            params: b.store,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// The `V×d` token embedding table.
    pub fn token_embedding(&self) -> &Matrix {
        self.params.get(self.layout.embed)
    }

    /// The output projection; the same stored tensor as [`Model::token_embedding`].
    pub fn output_projection(&self) -> &Matrix {
        self.params.get(self.layout.embed)
    }

    pub fn token_embedding_mut(&mut self) -> &mut Matrix {
        self.params.get_mut(self.layout.embed)
    }

    /// Parameters belonging to the patch backbone (frozen by `--freeze-backbone`).
    pub fn backbone_params(&self) -> Vec<ParamId> {
        vec![self.layout.patch_w, self.layout.patch_b]
    }

    fn check_frames(&self, frames: &[Matrix]) -> Result<()> {
        let need = self.config.frames_consumed();
        if frames.len() < need {
            return Err(Error::Contract(format!(
                "{} fusion needs {need} frames, got {}",
                self.config.fusion,
                frames.len()
            )));
        }
        let d = self.config.image_size;
        if let Some(f) = frames.iter().find(|f| f.shape() != (d, d)) {
            return Err(Error::Contract(format!(
                "frame is {}x{}, model expects {d}x{d}",
                f.rows, f.cols
            )));
        }
        Ok(())
    }

    /// Per-frame backbone features `S×d_backbone`; early fusion returns one pooled clip map.
    pub fn backbone_forward(&self, f: &mut Forward, frames: &[Matrix]) -> Result<Vec<Var>> {
        self.check_frames(frames)?;
        let p = self.config.patch_size;
        let (w, b) = (self.layout.patch_w, self.layout.patch_b);
        match self.config.fusion {
            FusionMode::Early => {
                let n = self.config.window_len;
                let kt = self.config.temporal_kernel();
                let patches: Vec<Matrix> = frames[..n].iter().map(|fr| patchify(fr, p)).collect();
                let mut pooled = None;
                let steps = n - kt + 1;
                for t in 0..steps {
                    let s = patches[0].rows;
                    let width = patches[0].cols;
                    let mut tube = Matrix::zeros(s, kt * width);
                    for r in 0..s {
                        let row = tube.row_mut(r);
                        for k in 0..kt {
                            row[k * width..(k + 1) * width].copy_from_slice(patches[t + k].row(r));
                        }
                    }
                    let x = f.graph.input(tube);
                    let h = f.linear(x, w, b);
                    let h = f.graph.gelu(h);
                    pooled = Some(match pooled {
                        None => h,
                        Some(acc) => f.graph.add(acc, h),
                    });
                }
                let pooled = pooled.expect("at least one temporal step");
                Ok(vec![f.graph.scale(pooled, 1.0 / steps as f64)])
            }
            _ => {
                let used = self.config.frames_consumed();
                Ok(frames[..used]
                    .iter()
                    .map(|fr| {
                        let x = f.graph.input(patchify(fr, p));
                        let h = f.linear(x, w, b);
                        f.graph.gelu(h)
                    })
                    .collect())
            }
        }
    }

    /// Projection, position embedding and the self-attention stack for one feature map.
    pub fn encoder_forward(&self, f: &mut Forward, features: Var) -> Var {
        let l = &self.layout;
        let x = f.linear(features, l.proj_w, l.proj_b);
        let pos = f.p(l.enc_pos);
        let mut x = f.graph.add(x, pos);
        for blk in &l.encoder {
            let h = f.ln(x, blk.ln1);
            let a = f.attention(h, h, blk.attn, false);
            x = f.graph.add(x, a);
            let h = f.ln(x, blk.ln2);
            let m = f.mlp(h, blk.mlp);
            x = f.graph.add(x, m);
        }
        x
    }

    /// `acc + CrossAttn(LN(acc), LN(next))` with the shared fusion weights.
    fn cross_fuse(&self, f: &mut Forward, acc: Var, next: Var) -> Var {
        let c = self.layout.fusion.expect("middle fusion weights");
        f.stats.fusion_cross_attention += 1;
        let q = f.ln(acc, c.ln_q);
        let kv = f.ln(next, c.ln_kv);
        let a = f.attention(q, kv, c.attn, false);
        f.graph.add(acc, a)
    }

    /// Left-to-right fold: `A₁ = x(F₁, F₂)`, `Aᵢ = x(Aᵢ₋₁, Fᵢ₊₁)`; `N − 1` applications.
    pub fn fuse_middle_pairwise(&self, f: &mut Forward, frames: &[Var]) -> Var {
        let mut acc = frames[0];
        for &next in &frames[1..] {
            acc = self.cross_fuse(f, acc, next);
        }
        acc
    }

    /// Consecutive pairs per level until one map remains; `N(N−1)/2` applications.
    pub fn fuse_middle_hierarchical(&self, f: &mut Forward, frames: &[Var]) -> Var {
        let mut level = frames.to_vec();
        while level.len() > 1 {
            level = level
                .windows(2)
                .map(|pair| self.cross_fuse(f, pair[0], pair[1]))
                .collect();
        }
        level[0]
    }

    /// Adds the per-frame, per-position embedding and concatenates frames along the token axis.
    pub fn fuse_late(&self, f: &mut Forward, frames: &[Var]) -> Var {
        let pos3d = self.layout.pos3d.expect("late fusion weights");
        let s = self.config.seq_per_frame();
        let table = f.p(pos3d);
        let parts: Vec<Var> = frames
            .iter()
            .enumerate()
            .map(|(t, &m)| {
                let ids: Vec<usize> = (t * s..(t + 1) * s).collect();
                let e = f.graph.gather(table, &ids);
                f.graph.add(m, e)
            })
            .collect();
        f.graph.concat_rows(&parts)
    }

    /// Decoder memory for one window of frames.
    pub fn memory_forward(&self, f: &mut Forward, frames: &[Matrix]) -> Result<Var> {
        let feats = self.backbone_forward(f, frames)?;
        let encoded: Vec<Var> = feats.iter().map(|&x| self.encoder_forward(f, x)).collect();
        Ok(match self.config.fusion {
            FusionMode::Static | FusionMode::FirstFrameOnly | FusionMode::Early => encoded[0],
            FusionMode::MiddlePairwise => self.fuse_middle_pairwise(f, &encoded),
            FusionMode::MiddleHierarchical => self.fuse_middle_hierarchical(f, &encoded),
            FusionMode::Late => self.fuse_late(f, &encoded),
        })
    }

    /// Logits `L_t×V` for decoder input ids under a causal mask.
    pub fn decoder_forward(&self, f: &mut Forward, memory: Var, inputs: &[u32]) -> Result<Var> {
        let v = self.config.vocab_size;
        if inputs.len() > self.config.max_seq_len {
            return Err(Error::Contract(format!(
                "sequence of {} tokens exceeds L = {}",
                inputs.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(t) = inputs.iter().find(|&&t| t as usize >= v) {
            return Err(Error::Contract(format!(
                "token {t} outside vocabulary of {v}"
            )));
        }
        let l = &self.layout;
        let ids: Vec<usize> = inputs.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..inputs.len()).collect();
        let embed = f.p(l.embed);
        let tok = f.graph.gather(embed, &ids);
        let pos_table = f.p(l.dec_pos);
        let pos = f.graph.gather(pos_table, &positions);
        let mut x = f.graph.add(tok, pos);
        for blk in &l.decoder {
            let h = f.ln(x, blk.ln1);
            let a = f.attention(h, h, blk.self_attn, true);
            x = f.graph.add(x, a);
            let h = f.ln(x, blk.ln2);
            let mem = f.ln(memory, blk.ln_mem);
            let c = f.attention(h, mem, blk.cross_attn, false);
            x = f.graph.add(x, c);
            let h = f.ln(x, blk.ln3);
            let m = f.mlp(h, blk.mlp);
            x = f.graph.add(x, m);
        }
        let h = f.ln(x, l.ln_f);
        Ok(f.graph.matmul_nt(h, embed))
    }

    /// Teacher-forcing inputs: a PAD-role begin token followed by all but the last target.
    pub fn shift_right(targets: &[u32], begin: u32) -> Vec<u32> {
        let mut inputs = Vec::with_capacity(targets.len());
        inputs.push(begin);
        inputs.extend_from_slice(&targets[..targets.len().saturating_sub(1)]);
        inputs
    }

    /// Teacher-forced logits for one sample, plus the forward counters.
    pub fn logits(&self, frames: &[Matrix], inputs: &[u32]) -> Result<(Matrix, ForwardStats)> {
        let mut f = Forward::new(self);
        let mem = self.memory_forward(&mut f, frames)?;
        let out = self.decoder_forward(&mut f, mem, inputs)?;
        Ok((f.graph.value(out).clone(), f.stats))
    }

    /// Decoder memory value for one window (used by autoregressive decoding).
    pub fn memory(&self, frames: &[Matrix]) -> Result<(Matrix, ForwardStats)> {
        let mut f = Forward::new(self);
        let mem = self.memory_forward(&mut f, frames)?;
        Ok((f.graph.value(mem).clone(), f.stats))
    }

    /// Logits for the decoder inputs given a precomputed memory.
    pub fn logits_from_memory(&self, memory: &Matrix, inputs: &[u32]) -> Result<Matrix> {
        let mut f = Forward::new(self);
        let mem = f.graph.input(memory.clone());
        let out = self.decoder_forward(&mut f, mem, inputs)?;
        Ok(f.graph.value(out).clone())
    }

    fn batch_weight(batch: &[Sample]) -> Result<f64> {
        let mut total = 0.0;
        for s in batch {
            if s.targets.len() != s.weights.len() {
                return Err(Error::Contract(
                    "targets and weights differ in length".into(),
                ));
            }
            total += s.weights.iter().sum::<f64>();
        }
        if total <= 0.0 {
            return Err(Error::Numeric(
                "empty target: all token weights are zero".into(),
            ));
        }
        Ok(total)
    }

    fn sample_loss(&self, f: &mut Forward, s: &Sample, begin: u32, total: f64) -> Result<Var> {
        let mem = self.memory_forward(f, &s.frames)?;
        let inputs = Self::shift_right(&s.targets, begin);
        let logits = self.decoder_forward(f, mem, &inputs)?;
        let targets: Vec<usize> = s.targets.iter().map(|&t| t as usize).collect();
        let coeffs: Vec<f64> = s.weights.iter().map(|w| w / total).collect();
        Ok(f.graph.weighted_cross_entropy(logits, &targets, &coeffs))
    }

    /// Weighted cross-entropy over a batch, normalized by the batch's total weight.
    pub fn batch_loss(&self, batch: &[Sample], begin: u32) -> Result<f64> {
        let total = Self::batch_weight(batch)?;
        let mut loss = 0.0;
        for s in batch {
            let mut f = Forward::new(self);
            let l = self.sample_loss(&mut f, s, begin, total)?;
            loss += f.graph.value(l).data[0];
        }
        Ok(loss)
    }

    /// Batch loss and its gradient with respect to every parameter.
    pub fn batch_loss_and_grads(&self, batch: &[Sample], begin: u32) -> Result<(f64, Gradients)> {
        let total = Self::batch_weight(batch)?;
        let mut grads = Gradients::zeros_like(&self.params);
        let mut loss = 0.0;
        for s in batch {
            let mut f = Forward::new(self);
            let l = self.sample_loss(&mut f, s, begin, total)?;
            loss += f.graph.value(l).data[0];
            f.graph.backward(l, &mut grads);
        }
        Ok((loss, grads))
    }
}

/// Weighted cross-entropy `Σ wᵢ·CE(logitsᵢ, targetᵢ) / Σ wᵢ` on precomputed logits.
pub fn weighted_loss(logits: &Matrix, targets: &[u32], weights: &[f64]) -> Result<f64> {
    if targets.len() != logits.rows || weights.len() != logits.rows {
        return Err(Error::Contract(
            "logits, targets and weights must align".into(),
        ));
    }
    if let Some(t) = targets.iter().find(|&&t| t as usize >= logits.cols) {
        return Err(Error::Contract(format!(
            "target {t} outside {} logits",
            logits.cols
        )));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::Numeric(
            "empty target: all token weights are zero".into(),
        ));
    }
    let mut g = Graph::new();
    let x = g.input(logits.clone());
    let t: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let c: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let l = g.weighted_cross_entropy(x, &t, &c);
    Ok(g.value(l).data[0])
}
