//! Transformer encoder classifier.
//!
//! Tokens from [`PatchEmbed`] pass through `L` pre-LN encoder blocks,
//!
//! ```text
//! y = x + MHSA(LN(x))
//! z = y + MLP(LN(y)),   MLP = Linear(d, r*d) -> GELU -> Linear(r*d, d)
//! ```
//!
//! then a final layer norm, a readout (class token or all tokens flattened),
//! a GELU MLP head and a linear map to `K` logits. Attention logits are
//! divided by `tau = c * sqrt(d_k)`.

mod attention;
mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::config::{format_list, parse_list, parse_value, KeyValue};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::rng::{self, Stream};
use crate::tensor::{normal_tensor, Bound, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::tokenizer::{EmbedConfig, PatchEmbed, PatchGrid, PatchMode, PosEncodingKind, INIT_STD};

pub use attention::{mhsa, mhsa_vars, scaled_dot_attention, AttentionWeights};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint, MAGIC};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Readout {
    #[default]
    ClassToken,
    Flatten,
}

impl fmt::Display for Readout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Readout::ClassToken => "class_token",
            Readout::Flatten => "flatten",
        })
    }
}

impl FromStr for Readout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class_token" => Ok(Readout::ClassToken),
            "flatten" => Ok(Readout::Flatten),
            _ => Err(Error::Config(format!("unknown readout `{s}` (class_token|flatten)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub patch_mode: PatchMode,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_head_units: Vec<usize>,
    pub encoder_mlp_ratio: f64,
    pub temperature_multiplier: f64,
    pub ln_eps: f64,
    pub num_classes: usize,
    pub readout: Readout,
    pub class_token: bool,
    pub pos_encoding: PosEncodingKind,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 72,
            channels: 3,
            patch_size: 6,
            patch_mode: PatchMode::Vanilla,
            dim: 64,
            heads: 4,
            layers: 8,
            mlp_head_units: vec![2048, 1024],
            encoder_mlp_ratio: 2.0,
            temperature_multiplier: 1.0,
            ln_eps: 1e-6,
            num_classes: 3,
            readout: Readout::ClassToken,
            class_token: true,
            pos_encoding: PosEncodingKind::Learnable1d,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        PatchGrid::new(self.image_size, self.patch_size, self.channels)?;
        if self.patch_mode == PatchMode::Spt && self.patch_size % 2 != 0 {
            return Err(Error::OddPatch(self.patch_size));
        }
        if self.dim == 0 || self.heads == 0 || self.layers == 0 || self.num_classes == 0 {
            return bad("dim, heads, layers and num_classes must be at least 1".into());
        }
        if self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if self.mlp_head_units.contains(&0) {
            return bad("mlp_head_units entries must be at least 1".into());
        }
        if !(self.temperature_multiplier > 0.0 && self.temperature_multiplier.is_finite()) {
            return bad(format!(
                "temperature_multiplier must be positive, got {}",
                self.temperature_multiplier
            ));
        }
        if !(self.ln_eps > 0.0) {
            return bad(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        if self.encoder_mlp_hidden() == 0 {
            return bad(format!("encoder_mlp_ratio {} gives an empty MLP", self.encoder_mlp_ratio));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.readout == Readout::ClassToken && !self.class_token {
            return bad("class_token readout needs class_token = true".into());
        }
        let even = matches!(
            self.pos_encoding,
            PosEncodingKind::Learnable2dConcat | PosEncodingKind::Sinusoidal10000 | PosEncodingKind::Sinusoidal1000
        );
        if even && self.dim % 2 != 0 {
            return Err(Error::OddDimension {
                kind: "this",
                dim: self.dim,
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `tau = c * sqrt(d_k)`.
    pub fn temperature(&self) -> f64 {
        self.temperature_multiplier * (self.head_dim() as f64).sqrt()
    }

    pub fn encoder_mlp_hidden(&self) -> usize {
        (self.encoder_mlp_ratio * self.dim as f64).round() as usize
    }

    pub fn grid(&self) -> PatchGrid {
        PatchGrid {
            image_size: self.image_size,
            patch_size: self.patch_size,
            channels: self.channels,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.grid().num_patches()
    }

    pub fn tokens_per_image(&self) -> usize {
        self.num_patches() + usize::from(self.class_token)
    }

    fn embed_config(&self) -> EmbedConfig {
        EmbedConfig {
            grid: self.grid(),
            mode: self.patch_mode,
            pos_encoding: self.pos_encoding,
            class_token: self.class_token,
            dim: self.dim,
            ln_eps: self.ln_eps,
        }
    }

    fn readout_width(&self) -> usize {
        match self.readout {
            Readout::ClassToken => self.dim,
            Readout::Flatten => self.dim * self.tokens_per_image(),
        }
    }
}

impl KeyValue for ModelConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "image_size" => self.image_size = parse_value(key, value)?,
            "channels" => self.channels = parse_value(key, value)?,
            "patch_size" => self.patch_size = parse_value(key, value)?,
            "patch_mode" | "mode" => self.patch_mode = value.parse()?,
            "dim" => self.dim = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "layers" => self.layers = parse_value(key, value)?,
            "mlp_head_units" => self.mlp_head_units = parse_list(key, value)?,
            "encoder_mlp_ratio" => self.encoder_mlp_ratio = parse_value(key, value)?,
            "temperature_multiplier" => self.temperature_multiplier = parse_value(key, value)?,
            "ln_eps" => self.ln_eps = parse_value(key, value)?,
            "num_classes" => self.num_classes = parse_value(key, value)?,
            "readout" => self.readout = value.parse()?,
            "class_token" => self.class_token = parse_value(key, value)?,
            "pos_encoding" => self.pos_encoding = value.parse()?,
            "dropout" => self.dropout = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("image_size", self.image_size.to_string()),
            ("channels", self.channels.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("patch_mode", self.patch_mode.to_string()),
            ("dim", self.dim.to_string()),
            ("heads", self.heads.to_string()),
            ("layers", self.layers.to_string()),
            ("mlp_head_units", format_list(&self.mlp_head_units)),
            ("encoder_mlp_ratio", self.encoder_mlp_ratio.to_string()),
            ("temperature_multiplier", self.temperature_multiplier.to_string()),
            ("ln_eps", self.ln_eps.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("readout", self.readout.to_string()),
            ("class_token", self.class_token.to_string()),
            ("pos_encoding", self.pos_encoding.to_string()),
            ("dropout", self.dropout.to_string()),
        ]
    }
}

/// Parameter handles of one encoder block.
#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    /// `[d, 3d]`, column blocks `[Q | K | V]`.
    pub w_qkv: ParamId,
    /// `[d, d]`.
    pub w_o: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

/// Graph handles of one encoder block.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln1: (Var, Var),
    pub w_qkv: Var,
    pub w_o: Var,
    pub ln2: (Var, Var),
    pub mlp1: (Var, Var),
    pub mlp2: (Var, Var),
}

impl BlockParams {
    fn register<T: Real>(store: &mut ParamStore<T>, i: usize, d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let name = |s: &str| format!("block{i}.{s}");
        Self {
            ln1_gamma: store.add(name("ln1.gamma"), Tensor::full(vec![d], T::one())),
            ln1_beta: store.add(name("ln1.beta"), Tensor::zeros(vec![d])),
            w_qkv: store.add(name("attn.qkv"), normal_tensor(vec![d, 3 * d], INIT_STD, rng)),
            w_o: store.add(name("attn.out"), normal_tensor(vec![d, d], INIT_STD, rng)),
            ln2_gamma: store.add(name("ln2.gamma"), Tensor::full(vec![d], T::one())),
            ln2_beta: store.add(name("ln2.beta"), Tensor::zeros(vec![d])),
            mlp_w1: store.add(name("mlp.fc1.weight"), normal_tensor(vec![d, hidden], INIT_STD, rng)),
            mlp_b1: store.add(name("mlp.fc1.bias"), Tensor::zeros(vec![hidden])),
            mlp_w2: store.add(name("mlp.fc2.weight"), normal_tensor(vec![hidden, d], INIT_STD, rng)),
            mlp_b2: store.add(name("mlp.fc2.bias"), Tensor::zeros(vec![d])),
        }
    }

    pub fn vars(&self, p: &Bound) -> BlockVars {
        BlockVars {
            ln1: (p[self.ln1_gamma], p[self.ln1_beta]),
            w_qkv: p[self.w_qkv],
            w_o: p[self.w_o],
            ln2: (p[self.ln2_gamma], p[self.ln2_beta]),
            mlp1: (p[self.mlp_w1], p[self.mlp_b1]),
            mlp2: (p[self.mlp_w2], p[self.mlp_b2]),
        }
    }
}

/// Shape and regularisation context of an encoder block application.
#[derive(Clone, Copy, Debug)]
pub struct BlockShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub tau: f64,
    pub ln_eps: f64,
    pub dropout: f64,
}

fn linear<T: Real>(g: &mut Graph<T>, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_rows(y, b)
}

fn maybe_dropout<T: Real>(g: &mut Graph<T>, x: Var, rate: f64, rng: Option<&mut Stream>) -> Result<Var> {
    match rng {
        Some(r) if rate > 0.0 => g.dropout(x, rate, r),
        _ => Ok(x),
    }
}

/// One pre-LN encoder block over `[batch * seq, d]` tokens.
pub fn encoder_block<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    w: &BlockVars,
    s: &BlockShape,
    rng: Option<&mut Stream>,
) -> Result<Var> {
    let eps = T::from_f64_lossy(s.ln_eps);
    let h = g.layer_norm(x, w.ln1.0, w.ln1.1, eps)?;
    let qkv = g.matmul(h, w.w_qkv)?;
    let heads = g.multi_head_attention(qkv, s.batch, s.seq, s.heads, T::from_f64_lossy(s.tau))?;
    let attn = g.matmul(heads, w.w_o)?;
    let y = g.add(x, attn)?;
    let h = g.layer_norm(y, w.ln2.0, w.ln2.1, eps)?;
    let h = linear(g, h, w.mlp1)?;
    let h = g.gelu(h);
    let h = maybe_dropout(g, h, s.dropout, rng)?;
    let h = linear(g, h, w.mlp2)?;
    g.add(y, h)
}

/// Per-part trainable scalar counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub embedding: usize,
    pub per_block: usize,
    pub encoder: usize,
    pub final_norm: usize,
    pub head: usize,
    pub total: usize,
}

/// A classifier and its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    embed: PatchEmbed,
    blocks: Vec<BlockParams>,
    final_ln: (ParamId, ParamId),
    head: Vec<(ParamId, ParamId)>,
}

impl<T: Real> Model<T> {
    /// Fresh model with weights drawn from the `init` substream of `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::substream(seed, "init", 0);
        let mut params = ParamStore::new();
        let embed = PatchEmbed::new(cfg.embed_config(), &mut params, &mut rng)?;
        let d = cfg.dim;
        let hidden = cfg.encoder_mlp_hidden();
        let blocks = (0..cfg.layers)
            .map(|i| BlockParams::register(&mut params, i, d, hidden, &mut rng))
            .collect();
        let final_ln = (
            params.add("norm.gamma", Tensor::full(vec![d], T::one())),
            params.add("norm.beta", Tensor::zeros(vec![d])),
        );
        let mut width = cfg.readout_width();
        let mut head = Vec::new();
        for (i, &units) in cfg.mlp_head_units.iter().chain([cfg.num_classes].iter()).enumerate() {
            let w = params.add(format!("head{i}.weight"), normal_tensor(vec![width, units], INIT_STD, &mut rng));
            let b = params.add(format!("head{i}.bias"), Tensor::zeros(vec![units]));
            head.push((w, b));
            width = units;
        }
        Ok(Self {
            cfg,
            params,
            embed,
            blocks,
            final_ln,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn embed(&self) -> &PatchEmbed {
        &self.embed
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.blocks
    }

    /// `[B * N, E]` projection input for a batch of images.
    pub fn patch_rows(&self, images: &[&ImageBuffer]) -> Result<Vec<T>> {
        self.embed.patch_rows(images)
    }

    pub fn block_shape(&self, batch: usize) -> BlockShape {
        BlockShape {
            batch,
            seq: self.cfg.tokens_per_image(),
            heads: self.cfg.heads,
            tau: self.cfg.temperature(),
            ln_eps: self.cfg.ln_eps,
            dropout: self.cfg.dropout,
        }
    }

    /// Encoder stack and final norm applied to `[B * n, d]` tokens.
    pub fn encode(&self, g: &mut Graph<T>, p: &Bound, tokens: Var, batch: usize, mut rng: Option<&mut Stream>) -> Result<Var> {
        let shape = self.block_shape(batch);
        let mut x = tokens;
        for block in &self.blocks {
            x = encoder_block(g, x, &block.vars(p), &shape, rng.as_deref_mut())?;
        }
        let (gamma, beta) = self.final_ln;
        g.layer_norm(x, p[gamma], p[beta], T::from_f64_lossy(self.cfg.ln_eps))
    }

    /// Readout, head MLP and output layer on encoded tokens; `[B, K]`.
    pub fn classify(&self, g: &mut Graph<T>, p: &Bound, encoded: Var, batch: usize, mut rng: Option<&mut Stream>) -> Result<Var> {
        let n = self.cfg.tokens_per_image();
        let mut x = match self.cfg.readout {
            Readout::ClassToken => {
                let rows: Vec<usize> = (0..batch).map(|b| b * n).collect();
                g.select_rows(encoded, &rows)?
            }
            Readout::Flatten => g.reshape(encoded, vec![batch, n * self.cfg.dim])?,
        };
        let (last, hidden) = self.head.split_last().expect("output layer");
        for &(w, b) in hidden {
            x = linear(g, x, (p[w], p[b]))?;
            x = g.gelu(x);
            x = maybe_dropout(g, x, self.cfg.dropout, rng.as_deref_mut())?;
        }
        linear(g, x, (p[last.0], p[last.1]))
    }

    /// Logits `[B, K]` from embedded tokens `[B * n, d]`.
    pub fn forward_tokens(&self, g: &mut Graph<T>, p: &Bound, tokens: Var, batch: usize, mut rng: Option<&mut Stream>) -> Result<Var> {
        let enc = self.encode(g, p, tokens, batch, rng.as_deref_mut())?;
        self.classify(g, p, enc, batch, rng)
    }

    /// Logits `[B, K]` from a `[B * N, E]` patch matrix. Dropout is active
    /// only when `rng` is given.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, patches: Var, batch: usize, mut rng: Option<&mut Stream>) -> Result<Var> {
        let tokens = self.embed.forward(g, p, patches, batch)?;
        self.forward_tokens(g, p, tokens, batch, rng.as_deref_mut())
    }

    /// Inference logits for a batch of images, row-major `[B, K]`.
    pub fn logits(&self, images: &[&ImageBuffer]) -> Result<Vec<T>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g);
        let rows = self.patch_rows(images)?;
        let x = g.constant(vec![images.len() * self.cfg.num_patches(), self.embed.input_elements()], rows)?;
        let out = self.forward(&mut g, &p, x, images.len(), None)?;
        Ok(g.value(out).to_vec())
    }

    /// Class probabilities for each image, evaluated in chunks of `chunk`.
    pub fn predict(&self, images: &[&ImageBuffer], chunk: usize) -> Result<Vec<Vec<f64>>> {
        let k = self.cfg.num_classes;
        let mut out = Vec::with_capacity(images.len());
        for part in images.chunks(chunk.max(1)) {
            let logits = self.logits(part)?;
            out.extend(logits.chunks_exact(k).map(|row| predict(&row.iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>())));
        }
        Ok(out)
    }

    pub fn count_params(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn param_breakdown(&self) -> ParamBreakdown {
        let c = &self.cfg;
        let d = c.dim;
        let e = self.embed.input_elements();
        let n = c.tokens_per_image();
        let ln_in = if c.patch_mode == PatchMode::Spt { 2 * e } else { 0 };
        let pos = match c.pos_encoding {
            PosEncodingKind::Learnable1d => n * d,
            PosEncodingKind::Learnable2dConcat => 2 * c.grid().side() * (d / 2) + usize::from(c.class_token) * d,
            _ => 0,
        };
        let embedding = ln_in + e * d + d + usize::from(c.class_token) * d + pos;
        let r = c.encoder_mlp_hidden();
        let per_block = 2 * d + 3 * d * d + d * d + 2 * d + (d * r + r) + (r * d + d);
        let mut head = 0;
        let mut width = c.readout_width();
        for &u in c.mlp_head_units.iter().chain([c.num_classes].iter()) {
            head += width * u + u;
            width = u;
        }
        let encoder = c.layers * per_block;
        ParamBreakdown {
            embedding,
            per_block,
            encoder,
            final_norm: 2 * d,
            head,
            total: embedding + encoder + 2 * d + head,
        }
    }

    /// Floating-point operations (2 per multiply-add) of all matrix products
    /// in one forward pass of a single image.
    pub fn estimate_flops(&self) -> u64 {
        estimate_flops(&self.cfg, self.embed.input_elements())
    }
}

/// `2 * MACs` of one single-image forward pass:
/// `N*E*d` (projection) `+ L*(3nd^2 + 2n^2 d + nd^2 + 2n*d*r)` (blocks) `+`
/// the head's `sum(in * out)`.
pub fn estimate_flops(cfg: &ModelConfig, input_elements: usize) -> u64 {
    let (d, n, np) = (cfg.dim as u64, cfg.tokens_per_image() as u64, cfg.num_patches() as u64);
    let r = cfg.encoder_mlp_hidden() as u64;
    let embed = np * input_elements as u64 * d;
    let block = 3 * n * d * d + 2 * n * n * d + n * d * d + 2 * n * d * r;
    let mut head = 0;
    let mut width = cfg.readout_width() as u64;
    for &u in cfg.mlp_head_units.iter().chain([cfg.num_classes].iter()) {
        head += width * u as u64;
        width = u as u64;
    }
    2 * (embed + cfg.layers as u64 * block + head)
}

/// Softmax over one logit row, in f64.
pub fn predict(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
