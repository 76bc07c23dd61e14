use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use crate::attention::{attention_groups, full_group, AttentionLayer, QueryProjection, Variant};
use crate::checkpoint::{read_records, write_records, Checkpoint, Record};
use crate::datagen::{PromptTokens, PROMPT_LEN, VOCAB_SIZE};
use crate::diffusion::{NoisePredictor, DEFAULT_T_MAX};
use crate::error::{invalid, Error, Result};
use crate::linalg::{gaussian_matrix_with, Matrix};
use crate::spectral::{LoraLayer, SpectralLayer};

/// Standard deviation of every freshly initialized weight.
pub const INIT_STD: f64 = 0.02;

const CONFIG_RECORD: &str = "config";
const TIME_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub d: usize,
    pub blocks: usize,
    pub prompt_vocab: usize,
    pub prompt_len: usize,
    pub t_max: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            h: 16,
            w: 16,
            c: 3,
            d: 32,
            blocks: 2,
            prompt_vocab: VOCAB_SIZE,
            prompt_len: PROMPT_LEN,
            t_max: DEFAULT_T_MAX,
        }
    }
}

impl DenoiserConfig {
    /// The gradient-check configuration.
    pub fn tiny() -> Self {
        Self {
            h: 8,
            w: 8,
            d: 8,
            blocks: 1,
            ..Self::default()
        }
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn frame_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("h", self.h),
            ("w", self.w),
            ("c", self.c),
            ("d", self.d),
            ("blocks", self.blocks),
            ("prompt_vocab", self.prompt_vocab),
            ("prompt_len", self.prompt_len),
            ("t_max", self.t_max),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(format!("model.{name} must be positive")));
        }
        if !self.d.is_multiple_of(2) {
            return Err(invalid(format!("model.d must be even, got {}", self.d)));
        }
        Ok(())
    }
}

/// Which tensors an optimizer may write.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tuning {
    /// Spectral shifts of every query projection plus the prompt table.
    Save,
    /// LoRA factors of every query projection plus the prompt table.
    Lora,
    /// Every dense weight.
    Full,
}

impl Tuning {
    pub fn trains(self, role: Role) -> bool {
        match self {
            Tuning::Save => matches!(role, Role::Delta | Role::Prompt),
            Tuning::Lora => matches!(role, Role::LoraFactor | Role::Prompt),
            Tuning::Full => matches!(role, Role::Query | Role::Other | Role::Prompt),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tuning::Save => "save",
            Tuning::Lora => "lora",
            Tuning::Full => "full",
        }
    }
}

impl FromStr for Tuning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "save" => Ok(Tuning::Save),
            "lora" => Ok(Tuning::Lora),
            "full" => Ok(Tuning::Full),
            other => Err(invalid(format!("unknown tuning mode {other:?} (save|lora|full)"))),
        }
    }
}

impl fmt::Display for Tuning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    /// Dense query weight.
    Query,
    Delta,
    /// Frozen `U`, `σ`, `V` of a spectral layer.
    SpectralBasis,
    LoraFactor,
    LoraBase,
    Prompt,
    Other,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
}

impl LayerNorm {
    fn identity(d: usize) -> Self {
        Self {
            gamma: Matrix::filled(1, d, 1.0),
            beta: Matrix::zeros(1, d),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub frame_ln: LayerNorm,
    pub frame_attn: AttentionLayer,
    pub cross_ln: LayerNorm,
    pub cross_attn: AttentionLayer,
    /// Absent in the image model.
    pub temporal: Option<(LayerNorm, AttentionLayer)>,
    pub mlp_ln: LayerNorm,
    pub fc1_w: Matrix,
    pub fc1_b: Matrix,
    pub fc2_w: Matrix,
    pub fc2_b: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDenoiser {
    pub config: DenoiserConfig,
    pub pixel_w: Matrix,
    pub pixel_b: Matrix,
    pub pos: Matrix,
    pub time_w: Matrix,
    pub time_b: Matrix,
    pub blocks: Vec<Block>,
    pub out_ln: LayerNorm,
    pub out_w: Matrix,
    pub out_b: Matrix,
    pub prompt: Matrix,
}

/// Owned copy of one named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub role: Role,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

/// Mutable view of one named parameter tensor.
pub struct TensorMut<'a> {
    pub name: String,
    pub role: Role,
    pub dims: Vec<usize>,
    pub data: &'a mut [f64],
}

fn push_mat<'a>(out: &mut Vec<TensorMut<'a>>, name: String, role: Role, m: &'a mut Matrix) {
    let dims = vec![m.rows(), m.cols()];
    out.push(TensorMut {
        name,
        role,
        dims,
        data: m.data_mut(),
    });
}

fn push_vec<'a>(out: &mut Vec<TensorMut<'a>>, name: String, role: Role, v: &'a mut [f64]) {
    out.push(TensorMut {
        name,
        role,
        dims: vec![v.len()],
        data: v,
    });
}

fn push_ln<'a>(out: &mut Vec<TensorMut<'a>>, prefix: &str, ln: &'a mut LayerNorm) {
    push_mat(out, format!("{prefix}.ln.gamma"), Role::Other, &mut ln.gamma);
    push_mat(out, format!("{prefix}.ln.beta"), Role::Other, &mut ln.beta);
}

fn push_attn<'a>(out: &mut Vec<TensorMut<'a>>, prefix: &str, layer: &'a mut AttentionLayer) {
    let q = format!("{prefix}.q");
    match &mut layer.w_q {
        QueryProjection::Dense(w) => push_mat(out, q, Role::Query, w),
        QueryProjection::Spectral(s) => {
            push_mat(out, format!("{q}.U"), Role::SpectralBasis, &mut s.u);
            push_vec(out, format!("{q}.sigma"), Role::SpectralBasis, &mut s.sigma);
            push_mat(out, format!("{q}.V"), Role::SpectralBasis, &mut s.v);
            push_vec(out, format!("{q}.delta"), Role::Delta, &mut s.delta);
        }
        QueryProjection::Lora(l) => {
            push_mat(out, format!("{q}.W0"), Role::LoraBase, &mut l.w0);
            push_mat(out, format!("{q}.A"), Role::LoraFactor, &mut l.a);
            push_mat(out, format!("{q}.B"), Role::LoraFactor, &mut l.b);
        }
    }
    push_mat(out, format!("{prefix}.k"), Role::Other, &mut layer.w_k);
    push_mat(out, format!("{prefix}.v"), Role::Other, &mut layer.w_v);
}

fn attention_layer(d: usize, std: f64, rng: &mut ChaCha8Rng) -> AttentionLayer {
    AttentionLayer {
        w_q: QueryProjection::Dense(gaussian_matrix_with(d, d, 0.0, std, rng)),
        w_k: gaussian_matrix_with(d, d, 0.0, std, rng),
        w_v: gaussian_matrix_with(d, d, 0.0, std, rng),
    }
}

/// Sinusoidal embedding of `t` as a `1 × d` row of `(sin, cos)` pairs.
pub fn time_embedding(t: usize, d: usize) -> Matrix {
    let mut row = Matrix::zeros(1, d);
    for i in 0..d / 2 {
        let freq = TIME_BASE.powf(-2.0 * i as f64 / d as f64);
        let a = t as f64 * freq;
        row[(0, 2 * i)] = a.sin();
        row[(0, 2 * i + 1)] = a.cos();
    }
    row
}

/// Clip layout `F × C × H × W` to token rows `(f, y, x)` with `C` columns.
pub fn clip_to_tokens(data: &[f64], cfg: &DenoiserConfig) -> Result<Matrix> {
    let fl = cfg.frame_len();
    if data.is_empty() || !data.len().is_multiple_of(fl) {
        return Err(invalid(format!(
            "input of {} values is not a whole number of {}x{}x{} frames",
            data.len(),
            cfg.c,
            cfg.h,
            cfg.w
        )));
    }
    let frames = data.len() / fl;
    let n = cfg.tokens();
    Ok(Matrix::from_fn(frames * n, cfg.c, |r, c| {
        let (f, p) = (r / n, r % n);
        data[f * fl + c * n + p]
    }))
}

/// Inverse of [`clip_to_tokens`].
pub fn tokens_to_clip_layout(m: &Matrix, cfg: &DenoiserConfig) -> Vec<f64> {
    let n = cfg.tokens();
    let frames = m.rows() / n;
    let fl = cfg.frame_len();
    let mut out = vec![0.0; frames * fl];
    for r in 0..m.rows() {
        let (f, p) = (r / n, r % n);
        for c in 0..cfg.c {
            out[f * fl + c * n + p] = m[(r, c)];
        }
    }
    out
}

/// Scaled-Gaussian initialization of a single-frame (image) model.
pub fn init_image_model(config: DenoiserConfig, seed: u64) -> Result<ToyDenoiser> {
    init_image_model_with_std(config, seed, INIT_STD)
}

pub fn init_image_model_with_std(config: DenoiserConfig, seed: u64, std: f64) -> Result<ToyDenoiser> {
    config.validate()?;
    let DenoiserConfig { c, d, .. } = config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = |r: usize, cols: usize| gaussian_matrix_with(r, cols, 0.0, std, &mut rng);
    let pixel_w = g(d, c);
    let pos = g(config.tokens(), d);
    let time_w = g(d, d);
    let out_w = g(c, d);
    let prompt = g(config.prompt_vocab, d);
    let mut blocks = Vec::with_capacity(config.blocks);
    for _ in 0..config.blocks {
        let frame_attn = attention_layer(d, std, &mut rng);
        let cross_attn = attention_layer(d, std, &mut rng);
        blocks.push(Block {
            frame_ln: LayerNorm::identity(d),
            frame_attn,
            cross_ln: LayerNorm::identity(d),
            cross_attn,
            temporal: None,
            mlp_ln: LayerNorm::identity(d),
            fc1_w: gaussian_matrix_with(4 * d, d, 0.0, std, &mut rng),
            fc1_b: Matrix::zeros(1, 4 * d),
            fc2_w: gaussian_matrix_with(d, 4 * d, 0.0, std, &mut rng),
            fc2_b: Matrix::zeros(1, d),
        });
    }
    Ok(ToyDenoiser {
        config,
        pixel_w,
        pixel_b: Matrix::zeros(1, d),
        pos,
        time_w,
        time_b: Matrix::zeros(1, d),
        blocks,
        out_ln: LayerNorm::identity(d),
        out_w,
        out_b: Matrix::zeros(1, c),
        prompt,
    })
}

/// Adds an inert temporal-attention sub-layer to every block.
///
/// Frame attention keeps the image model's weights; the new value
/// projection is zero so outputs are unchanged until it is trained.
pub fn inflate(image: &ToyDenoiser, seed: u64) -> Result<ToyDenoiser> {
    if image.is_video() {
        return Err(invalid("model is already inflated"));
    }
    let d = image.config.d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut video = image.clone();
    for block in &mut video.blocks {
        let attn = AttentionLayer {
            w_q: QueryProjection::Dense(gaussian_matrix_with(d, d, 0.0, INIT_STD, &mut rng)),
            w_k: gaussian_matrix_with(d, d, 0.0, INIT_STD, &mut rng),
            w_v: Matrix::zeros(d, d),
        };
        block.temporal = Some((LayerNorm::identity(d), attn));
    }
    Ok(video)
}

/// One recorded forward pass.
pub struct ForwardPass {
    pub tape: Tape,
    pub output: Var,
    /// Leaves that require gradients, by parameter name. Query leaves carry
    /// the effective weight under the projection's base name.
    pub leaves: Vec<(String, Var)>,
}

struct Builder {
    tape: Tape,
    scope: Option<Tuning>,
    leaves: Vec<(String, Var)>,
}

impl Builder {
    fn param(&mut self, name: String, role: Role, m: &Matrix) -> Var {
        let needs = self.scope.is_some_and(|s| s.trains(role));
        let v = self.tape.leaf(m.clone(), needs);
        if needs {
            self.leaves.push((name, v));
        }
        v
    }

    fn query(&mut self, name: String, q: &QueryProjection) -> Var {
        let role = match q {
            QueryProjection::Dense(_) => Role::Query,
            QueryProjection::Spectral(_) => Role::Delta,
            QueryProjection::Lora(_) => Role::LoraFactor,
        };
        self.param(name, role, &q.effective_weight())
    }

    fn layer_norm(&mut self, prefix: &str, x: Var, ln: &LayerNorm) -> Result<Var> {
        let g = self.param(format!("{prefix}.ln.gamma"), Role::Other, &ln.gamma);
        let b = self.param(format!("{prefix}.ln.beta"), Role::Other, &ln.beta);
        self.tape.layer_norm(x, g, b)
    }

    fn linear(&mut self, prefix: &str, x: Var, w: &Matrix, b: &Matrix) -> Result<Var> {
        let w = self.param(format!("{prefix}.W"), Role::Other, w);
        let b = self.param(format!("{prefix}.b"), Role::Other, b);
        let y = self.tape.matmul_t(x, w)?;
        self.tape.add_row(y, b)
    }

    /// `h + Attention(LN(h))` with keys from `context` (or `LN(h)` itself).
    fn attention(
        &mut self,
        prefix: &str,
        h: Var,
        ln: &LayerNorm,
        layer: &AttentionLayer,
        context: Option<Var>,
        groups: Vec<crate::attention::AttentionGroup>,
    ) -> Result<Var> {
        let a = self.layer_norm(prefix, h, ln)?;
        let src = context.unwrap_or(a);
        let wq = self.query(format!("{prefix}.q"), &layer.w_q);
        let wk = self.param(format!("{prefix}.k"), Role::Other, &layer.w_k);
        let wv = self.param(format!("{prefix}.v"), Role::Other, &layer.w_v);
        let q = self.tape.matmul_t(a, wq)?;
        let k = self.tape.matmul_t(src, wk)?;
        let v = self.tape.matmul_t(src, wv)?;
        let o = self.tape.attention(q, k, v, groups)?;
        self.tape.add(h, o)
    }
}

impl ToyDenoiser {
    pub fn is_video(&self) -> bool {
        self.blocks.iter().any(|b| b.temporal.is_some())
    }

    fn check_inputs(&self, z: &[f64], t: usize, prompt: &PromptTokens) -> Result<()> {
        let cfg = &self.config;
        if t == 0 || t > cfg.t_max {
            return Err(invalid(format!("timestep {t} outside 1..={}", cfg.t_max)));
        }
        if prompt.len() != cfg.prompt_len {
            return Err(invalid(format!(
                "prompt has {} tokens, model expects {}",
                prompt.len(),
                cfg.prompt_len
            )));
        }
        if let Some(bad) = prompt.ids().iter().find(|&&id| id >= cfg.prompt_vocab) {
            return Err(invalid(format!("prompt token {bad} outside vocabulary of {}", cfg.prompt_vocab)));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("denoiser input".into()));
        }
        Ok(())
    }

    /// Records the forward pass; `scope` selects which parameters need
    /// gradients (`None` for inference).
    pub fn forward(&self, z: &[f64], t: usize, prompt: &PromptTokens, scope: Option<Tuning>) -> Result<ForwardPass> {
        self.check_inputs(z, t, prompt)?;
        let cfg = &self.config;
        let x_tokens = clip_to_tokens(z, cfg)?;
        let frames = x_tokens.rows() / cfg.tokens();
        let mut b = Builder {
            tape: Tape::new(),
            scope,
            leaves: Vec::new(),
        };

        let x = b.tape.leaf(x_tokens, false);
        let mut h = b.linear("embed.pixel", x, &self.pixel_w, &self.pixel_b)?;
        let pos = b.param("embed.pos".into(), Role::Other, &self.pos);
        h = b.tape.add_tiled(h, pos)?;
        let temb = b.tape.leaf(time_embedding(t, cfg.d), false);
        let te = b.linear("embed.time", temb, &self.time_w, &self.time_b)?;
        h = b.tape.add_row(h, te)?;

        let table = b.param("prompt".into(), Role::Prompt, &self.prompt);
        let p = b.tape.gather(table, prompt.ids())?;

        let rows = frames * cfg.tokens();
        let frame_groups = attention_groups(Variant::Frame, frames, cfg.tokens());
        let temporal_groups = attention_groups(Variant::Temporal, frames, cfg.tokens());
        let cross_groups = full_group(rows, cfg.prompt_len);

        for (i, blk) in self.blocks.iter().enumerate() {
            let pre = format!("blk{i}");
            h = b.attention(&format!("{pre}.frame"), h, &blk.frame_ln, &blk.frame_attn, None, frame_groups.clone())?;
            h = b.attention(&format!("{pre}.cross"), h, &blk.cross_ln, &blk.cross_attn, Some(p), cross_groups.clone())?;
            if let Some((ln, attn)) = &blk.temporal {
                h = b.attention(&format!("{pre}.temporal"), h, ln, attn, None, temporal_groups.clone())?;
            }
            let a = b.layer_norm(&format!("{pre}.mlp"), h, &blk.mlp_ln)?;
            let m = b.linear(&format!("{pre}.mlp.fc1"), a, &blk.fc1_w, &blk.fc1_b)?;
            let m = b.tape.silu(m);
            let m = b.linear(&format!("{pre}.mlp.fc2"), m, &blk.fc2_w, &blk.fc2_b)?;
            h = b.tape.add(h, m)?;
        }
        let a = b.layer_norm("out", h, &self.out_ln)?;
        let output = b.linear("out", a, &self.out_w, &self.out_b)?;
        Ok(ForwardPass {
            tape: b.tape,
            output,
            leaves: b.leaves,
        })
    }

    /// `ε̂(z_t, t, prompt)` in clip layout.
    pub fn predict(&self, z: &[f64], t: usize, prompt: &PromptTokens) -> Result<Vec<f64>> {
        let fwd = self.forward(z, t, prompt, None)?;
        let out = tokens_to_clip_layout(fwd.tape.value(fwd.output), &self.config);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("denoiser output".into()));
        }
        Ok(out)
    }

    fn attention_layers_mut(&mut self) -> Vec<(String, &mut AttentionLayer)> {
        let mut out = Vec::new();
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blk{i}.frame.q"), &mut blk.frame_attn));
            out.push((format!("blk{i}.cross.q"), &mut blk.cross_attn));
            if let Some((_, attn)) = &mut blk.temporal {
                out.push((format!("blk{i}.temporal.q"), attn));
            }
        }
        out
    }

    /// Every query projection with its parameter name.
    pub fn queries(&self) -> Vec<(String, &QueryProjection)> {
        let mut out = Vec::new();
        for (i, blk) in self.blocks.iter().enumerate() {
            out.push((format!("blk{i}.frame.q"), &blk.frame_attn.w_q));
            out.push((format!("blk{i}.cross.q"), &blk.cross_attn.w_q));
            if let Some((_, attn)) = &blk.temporal {
                out.push((format!("blk{i}.temporal.q"), &attn.w_q));
            }
        }
        out
    }

    pub fn query_dims(&self) -> Vec<(usize, usize)> {
        self.queries().iter().map(|(_, q)| q.dims()).collect()
    }

    pub fn spectral_layers(&self) -> Vec<&SpectralLayer> {
        self.queries()
            .into_iter()
            .filter_map(|(_, q)| match q {
                QueryProjection::Spectral(s) => Some(s),
                _ => None,
            })
            .collect()
    }

    /// Re-parameterizes every query projection for `mode`, keeping the
    /// current effective weights.
    pub fn adapt_queries(&mut self, mode: Tuning, lora_rank: usize, seed: u64) -> Result<()> {
        for (idx, (name, layer)) in self.attention_layers_mut().into_iter().enumerate() {
            let w = layer.w_q.effective_weight();
            layer.w_q = match (mode, &layer.w_q) {
                (Tuning::Save, QueryProjection::Spectral(_)) => continue,
                (Tuning::Save, _) => QueryProjection::Spectral(SpectralLayer::decompose(name, &w)?),
                (Tuning::Lora, QueryProjection::Lora(_)) => continue,
                (Tuning::Lora, _) => {
                    QueryProjection::Lora(LoraLayer::new(name, w, lora_rank, seed.wrapping_add(idx as u64))?)
                }
                (Tuning::Full, _) => QueryProjection::Dense(w),
            };
        }
        Ok(())
    }

    /// All parameter tensors in a fixed order.
    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        let ToyDenoiser {
            pixel_w,
            pixel_b,
            pos,
            time_w,
            time_b,
            blocks,
            out_ln,
            out_w,
            out_b,
            prompt,
            ..
        } = self;
        push_mat(&mut out, "embed.pixel.W".into(), Role::Other, pixel_w);
        push_mat(&mut out, "embed.pixel.b".into(), Role::Other, pixel_b);
        push_mat(&mut out, "embed.pos".into(), Role::Other, pos);
        push_mat(&mut out, "embed.time.W".into(), Role::Other, time_w);
        push_mat(&mut out, "embed.time.b".into(), Role::Other, time_b);
        for (i, blk) in blocks.iter_mut().enumerate() {
            let Block {
                frame_ln,
                frame_attn,
                cross_ln,
                cross_attn,
                temporal,
                mlp_ln,
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
            } = blk;
            push_ln(&mut out, &format!("blk{i}.frame"), frame_ln);
            push_attn(&mut out, &format!("blk{i}.frame"), frame_attn);
            push_ln(&mut out, &format!("blk{i}.cross"), cross_ln);
            push_attn(&mut out, &format!("blk{i}.cross"), cross_attn);
            if let Some((ln, attn)) = temporal {
                push_ln(&mut out, &format!("blk{i}.temporal"), ln);
                push_attn(&mut out, &format!("blk{i}.temporal"), attn);
            }
            push_ln(&mut out, &format!("blk{i}.mlp"), mlp_ln);
            push_mat(&mut out, format!("blk{i}.mlp.fc1.W"), Role::Other, fc1_w);
            push_mat(&mut out, format!("blk{i}.mlp.fc1.b"), Role::Other, fc1_b);
            push_mat(&mut out, format!("blk{i}.mlp.fc2.W"), Role::Other, fc2_w);
            push_mat(&mut out, format!("blk{i}.mlp.fc2.b"), Role::Other, fc2_b);
        }
        push_ln(&mut out, "out", out_ln);
        push_mat(&mut out, "out.W".into(), Role::Other, out_w);
        push_mat(&mut out, "out.b".into(), Role::Other, out_b);
        push_mat(&mut out, "prompt".into(), Role::Prompt, prompt);
        out
    }

    /// Snapshot of every tensor.
    pub fn tensors(&self) -> Vec<Tensor> {
        let mut copy = self.clone();
        copy.tensors_mut()
            .into_iter()
            .map(|t| Tensor {
                name: t.name,
                role: t.role,
                dims: t.dims,
                data: t.data.to_vec(),
            })
            .collect()
    }

    pub fn tunable_count(&self, mode: Tuning) -> usize {
        self.tensors()
            .iter()
            .filter(|t| mode.trains(t.role))
            .map(|t| t.data.len())
            .sum()
    }

    /// Largest absolute difference over tensors that `mode` must not write.
    pub fn frozen_max_diff(&self, other: &ToyDenoiser, mode: Tuning) -> Result<f64> {
        let (a, b) = (self.tensors(), other.tensors());
        if a.len() != b.len() {
            return Err(invalid("models have different parameter sets"));
        }
        let mut worst = 0.0f64;
        for (ta, tb) in a.iter().zip(&b) {
            if ta.name != tb.name || ta.dims != tb.dims {
                return Err(invalid(format!("parameter {} does not match {}", ta.name, tb.name)));
            }
            if mode.trains(ta.role) {
                continue;
            }
            for (x, y) in ta.data.iter().zip(&tb.data) {
                if x.to_bits() != y.to_bits() {
                    worst = worst.max((x - y).abs()).max(f64::MIN_POSITIVE);
                }
            }
        }
        Ok(worst)
    }

    /// Mean over spectral layers of `|δ_1| / σ_1`.
    pub fn mean_top_drift(&self) -> f64 {
        let layers = self.spectral_layers();
        if layers.is_empty() {
            return 0.0;
        }
        layers.iter().map(|l| l.top_relative_drift()).sum::<f64>() / layers.len() as f64
    }

    pub fn to_records(&self) -> Vec<Record> {
        let c = &self.config;
        let header = [c.h, c.w, c.c, c.d, c.blocks, c.prompt_vocab, c.prompt_len, c.t_max, self.is_video() as usize];
        let header: Vec<f64> = header.iter().map(|&v| v as f64).collect();
        let mut out = vec![Record::vector(CONFIG_RECORD, &header)];
        out.extend(self.tensors().into_iter().map(|t| Record {
            name: t.name,
            dims: t.dims,
            data: t.data,
        }));
        out
    }

    pub fn from_records(records: Vec<Record>) -> Result<Self> {
        let header = records
            .iter()
            .find(|r| r.name == CONFIG_RECORD)
            .ok_or_else(|| Error::Malformed("checkpoint has no config record".into()))?
            .to_vector()?;
        if header.len() != 9 || header.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
            return Err(Error::Malformed("config record must hold 9 non-negative integers".into()));
        }
        let h: Vec<usize> = header.iter().map(|&v| v as usize).collect();
        let config = DenoiserConfig {
            h: h[0],
            w: h[1],
            c: h[2],
            d: h[3],
            blocks: h[4],
            prompt_vocab: h[5],
            prompt_len: h[6],
            t_max: h[7],
        };
        let mut model = init_image_model_with_std(config, 0, 0.0)?;
        if h[8] == 1 {
            model = inflate(&model, 0)?;
        }

        let rest: Vec<Record> = records.into_iter().filter(|r| r.name != CONFIG_RECORD).collect();
        let spectral: BTreeMap<String, SpectralLayer> = Checkpoint::from_records(rest.clone())?
            .spectral
            .into_iter()
            .map(|s| (s.name.clone(), s))
            .collect();
        let by_name: BTreeMap<&str, &Record> = rest.iter().map(|r| (r.name.as_str(), r)).collect();
        if by_name.len() != rest.len() {
            return Err(Error::Malformed("duplicate record names".into()));
        }

        for (name, layer) in model.attention_layers_mut() {
            if let Some(s) = spectral.get(&name) {
                layer.w_q = QueryProjection::Spectral(s.clone());
            } else if let Some(w0) = by_name.get(format!("{name}.W0").as_str()) {
                let a = by_name
                    .get(format!("{name}.A").as_str())
                    .ok_or_else(|| Error::Malformed(format!("{name}.A missing")))?;
                let b = by_name
                    .get(format!("{name}.B").as_str())
                    .ok_or_else(|| Error::Malformed(format!("{name}.B missing")))?;
                layer.w_q =
                    QueryProjection::Lora(LoraLayer::from_parts(name, w0.to_matrix()?, a.to_matrix()?, b.to_matrix()?)?);
            }
        }

        let mut used = BTreeSet::new();
        for t in model.tensors_mut() {
            let rec = by_name
                .get(t.name.as_str())
                .ok_or_else(|| Error::Malformed(format!("checkpoint lacks tensor {}", t.name)))?;
            if rec.dims != t.dims {
                return Err(Error::Malformed(format!(
                    "tensor {} has dims {:?}, model expects {:?}",
                    t.name, rec.dims, t.dims
                )));
            }
            t.data.copy_from_slice(&rec.data);
            used.insert(t.name);
        }
        if let Some(extra) = rest.iter().find(|r| !used.contains(&r.name)) {
            return Err(Error::Malformed(format!("unexpected tensor {}", extra.name)));
        }
        Ok(model)
    }
}

impl NoisePredictor for ToyDenoiser {
    type Cond = PromptTokens;

    fn predict_noise(&self, z_t: &[f64], t: usize, cond: &PromptTokens) -> Result<Vec<f64>> {
        self.predict(z_t, t, cond)
    }
}

pub fn save_model(model: &ToyDenoiser, path: impl AsRef<Path>) -> Result<()> {
    write_records(path, &model.to_records())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ToyDenoiser> {
    ToyDenoiser::from_records(read_records(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian_matrix;

    fn random_input(frames: usize, cfg: &DenoiserConfig, seed: u64) -> Vec<f64> {
        gaussian_matrix(1, frames * cfg.frame_len(), 0.5, 0.3, seed).into_vec()
    }

    #[test]
    fn layout_round_trip() {
        let cfg = DenoiserConfig::tiny();
        let z = random_input(2, &cfg, 1);
        let tokens = clip_to_tokens(&z, &cfg).unwrap();
        assert_eq!(tokens.shape(), (2 * 64, 3));
        assert_eq!(tokens_to_clip_layout(&tokens, &cfg), z);
    }

    #[test]
    fn init_is_deterministic_and_shapes_hold() {
        let cfg = DenoiserConfig::tiny();
        let a = init_image_model(cfg, 3).unwrap();
        assert_eq!(a, init_image_model(cfg, 3).unwrap());
        assert_ne!(a, init_image_model(cfg, 4).unwrap());
        let z = random_input(1, &cfg, 2);
        let p = PromptTokens(vec![1, 5, 0]);
        let e = a.predict(&z, 500, &p).unwrap();
        assert_eq!(e.len(), z.len());
        assert!(e.iter().all(|v| v.is_finite()));
        assert_eq!(e, a.predict(&z, 500, &p).unwrap());
        a.predict(&z, 500, &PromptTokens::null(3)).unwrap();
    }

    #[test]
    fn input_validation() {
        let cfg = DenoiserConfig::tiny();
        let m = init_image_model(cfg, 3).unwrap();
        let z = random_input(1, &cfg, 2);
        let p = PromptTokens(vec![1, 5, 0]);
        assert!(m.predict(&z, 0, &p).is_err());
        assert!(m.predict(&z, 1001, &p).is_err());
        assert!(m.predict(&z[1..], 10, &p).is_err());
        assert!(m.predict(&z, 10, &PromptTokens(vec![1, 5])).is_err());
        assert!(m.predict(&z, 10, &PromptTokens(vec![1, 5, 13])).is_err());
        let bad = DenoiserConfig { d: 7, ..cfg };
        assert!(init_image_model(bad, 0).is_err());
    }

    #[test]
    fn inflation_keeps_outputs() {
        let cfg = DenoiserConfig::tiny();
        let image = init_image_model_with_std(cfg, 5, 0.3).unwrap();
        let video = inflate(&image, 6).unwrap();
        let p = PromptTokens(vec![2, 6, 9]);
        let z = random_input(3, &cfg, 7);
        assert_eq!(video.predict(&z, 321, &p).unwrap(), image.predict(&z, 321, &p).unwrap());

        let one = &z[..cfg.frame_len()];
        let single = image.predict(one, 321, &p).unwrap();
        assert_eq!(video.predict(&z, 321, &p).unwrap()[..cfg.frame_len()], single[..]);
        let same = [one, one, one].concat();
        let out = video.predict(&same, 321, &p).unwrap();
        for f in 0..3 {
            assert_eq!(out[f * cfg.frame_len()..(f + 1) * cfg.frame_len()], single[..]);
        }
        assert!(inflate(&video, 0).is_err());
    }

    #[test]
    fn adapting_queries_preserves_function_closely() {
        let cfg = DenoiserConfig::tiny();
        let video = inflate(&init_image_model_with_std(cfg, 5, 0.3).unwrap(), 6).unwrap();
        let z = random_input(2, &cfg, 8);
        let p = PromptTokens(vec![2, 6, 9]);
        let base = video.predict(&z, 100, &p).unwrap();
        for mode in [Tuning::Save, Tuning::Lora, Tuning::Full] {
            let mut m = video.clone();
            m.adapt_queries(mode, 1, 9).unwrap();
            let out = m.predict(&z, 100, &p).unwrap();
            let diff = out.iter().zip(&base).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-10, "{mode}: {diff}");
        }
        let mut save = video.clone();
        save.adapt_queries(Tuning::Save, 1, 0).unwrap();
        assert_eq!(save.spectral_layers().len(), 3);
        assert_eq!(save.tunable_count(Tuning::Save), 3 * 8 + 13 * 8);
        let mut lora = video;
        lora.adapt_queries(Tuning::Lora, 1, 0).unwrap();
        assert_eq!(lora.tunable_count(Tuning::Lora), 3 * 16 + 13 * 8);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DenoiserConfig::tiny();
        let image = init_image_model_with_std(cfg, 5, 0.3).unwrap();
        let mut video = inflate(&image, 6).unwrap();
        video.adapt_queries(Tuning::Save, 1, 0).unwrap();
        if let QueryProjection::Spectral(s) = &mut video.blocks[0].frame_attn.w_q {
            s.delta[0] = 0.125;
        }
        let mut lora = inflate(&image, 6).unwrap();
        lora.adapt_queries(Tuning::Lora, 2, 1).unwrap();
        for (i, m) in [image, video, lora].into_iter().enumerate() {
            let path = dir.path().join(format!("m{i}.ckpt"));
            save_model(&m, &path).unwrap();
            let back = load_model(&path).unwrap();
            assert_eq!(back, m);
            for (a, b) in back.tensors().iter().zip(m.tensors()) {
                assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }
}
