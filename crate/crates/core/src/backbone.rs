//! Desk-scale vision transformer with layer-wise prompt prepending.
//!
//! The encoder is pre-norm: each block computes `h + attn(ln1(h))` followed by
//! `h + mlp(ln2(h))`, and a final layer norm produces the token output. At a
//! prompted layer the g-prompt rows and then the e-prompt rows are prepended
//! to the token sequence before the block and dropped after it, so every
//! block emits exactly `num_patches + 1` tokens and the `[class]` token stays
//! at position 0.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{CodecError, Reader, Writer};
use crate::numerics::{Graph, NumericsError, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PCLB";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum BackboneError {
    #[error("invalid backbone config: {0}")]
    Config(String),
    #[error("invalid prompt plan: {0}")]
    Plan(String),
    #[error("image has {got} values, expected {expected} ({channels}x{size}x{size})")]
    ImageSize {
        got: usize,
        expected: usize,
        channels: usize,
        size: usize,
    },
    #[error("prompt shape {got:?} does not match plan, expected {expected:?}")]
    PromptShape {
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CodecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            embed_dim: 32,
            num_layers: 4,
            num_heads: 4,
            mlp_ratio: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), BackboneError> {
        let err = |m: String| Err(BackboneError::Config(m));
        if [
            self.image_size,
            self.patch_size,
            self.channels,
            self.embed_dim,
            self.num_layers,
            self.num_heads,
            self.mlp_ratio,
        ]
        .contains(&0)
        {
            return err(format!("all sizes must be positive: {self:?}"));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return err(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return err(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Token length including the `[class]` token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }
}

/// Which layers receive g- and e-prompts, and how many tokens each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptInsertionPlan {
    pub g_layers: Vec<usize>,
    pub e_layers: Vec<usize>,
    pub g_length: usize,
    pub e_length: usize,
}

impl Default for PromptInsertionPlan {
    fn default() -> Self {
        Self {
            g_layers: vec![0, 1],
            e_layers: vec![0, 1, 2, 3],
            g_length: 5,
            e_length: 8,
        }
    }
}

impl PromptInsertionPlan {
    /// No prompted layers at all.
    pub fn none() -> Self {
        Self {
            g_layers: Vec::new(),
            e_layers: Vec::new(),
            g_length: 0,
            e_length: 0,
        }
    }

    pub fn validate(&self, config: &BackboneConfig) -> Result<(), BackboneError> {
        for (name, layers) in [("g_layers", &self.g_layers), ("e_layers", &self.e_layers)] {
            let mut sorted = layers.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != layers.len() {
                return Err(BackboneError::Plan(format!(
                    "{name} has duplicates: {layers:?}"
                )));
            }
            if let Some(&l) = layers.iter().find(|&&l| l >= config.num_layers) {
                return Err(BackboneError::Plan(format!(
                    "{name} contains layer {l} but the backbone has {} layers",
                    config.num_layers
                )));
            }
        }
        Ok(())
    }

    /// Number of g-prompted layers (`H_g`).
    pub fn g_depth(&self) -> usize {
        self.g_layers.len()
    }

    /// Number of e-prompted layers (`H_e`).
    pub fn e_depth(&self) -> usize {
        self.e_layers.len()
    }

    pub fn g_shape(&self, d: usize) -> [usize; 3] {
        [self.g_depth(), self.g_length, d]
    }

    pub fn e_shape(&self, d: usize) -> [usize; 3] {
        [self.e_depth(), self.e_length, d]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_qkv: Tensor,
    pub b_qkv: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_mlp1: Tensor,
    pub b_mlp1: Tensor,
    pub w_mlp2: Tensor,
    pub b_mlp2: Tensor,
}

impl BlockParams {
    fn init(d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let lim = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        Self {
            ln1_gain: Tensor::full(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            w_qkv: Tensor::uniform(&[d, 3 * d], lim(d), rng),
            b_qkv: Tensor::zeros(&[3 * d]),
            w_out: Tensor::uniform(&[d, d], lim(d), rng),
            b_out: Tensor::zeros(&[d]),
            ln2_gain: Tensor::full(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
            w_mlp1: Tensor::uniform(&[d, hidden], lim(d), rng),
            b_mlp1: Tensor::zeros(&[hidden]),
            w_mlp2: Tensor::uniform(&[hidden, d], lim(hidden), rng),
            b_mlp2: Tensor::zeros(&[d]),
        }
    }

    const NAMES: [&'static str; 12] = [
        "ln1_gain", "ln1_bias", "w_qkv", "b_qkv", "w_out", "b_out", "ln2_gain", "ln2_bias",
        "w_mlp1", "b_mlp1", "w_mlp2", "b_mlp2",
    ];

    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_qkv,
            &self.b_qkv,
            &self.w_out,
            &self.b_out,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_mlp1,
            &self.b_mlp1,
            &self.w_mlp2,
            &self.b_mlp2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_qkv,
            &mut self.b_qkv,
            &mut self.w_out,
            &mut self.b_out,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_mlp1,
            &mut self.b_mlp1,
            &mut self.w_mlp2,
            &mut self.b_mlp2,
        ]
    }
}

/// Instrumented backbone pass counts.
#[derive(Debug, Default)]
pub struct PassCounters {
    forwards: AtomicU64,
    backwards: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PassCount {
    pub forwards: u64,
    pub backwards: u64,
}

impl std::ops::Sub for PassCount {
    type Output = PassCount;
    fn sub(self, rhs: Self) -> Self {
        PassCount {
            forwards: self.forwards - rhs.forwards,
            backwards: self.backwards - rhs.backwards,
        }
    }
}

impl PassCounters {
    pub fn record_forward(&self) {
        self.forwards.fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_backward(&self) {
        self.backwards.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> PassCount {
        PassCount {
            forwards: self.forwards.load(Ordering::Relaxed),
            backwards: self.backwards.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.forwards.store(0, Ordering::Relaxed);
        self.backwards.store(0, Ordering::Relaxed);
    }
}

#[derive(Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    pub class_token: Tensor,
    pub position: Tensor,
    pub blocks: Vec<BlockParams>,
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
    pub counters: PassCounters,
}

impl Clone for Backbone {
    /// Clones parameters; the copy starts with fresh counters.
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            patch_weight: self.patch_weight.clone(),
            patch_bias: self.patch_bias.clone(),
            class_token: self.class_token.clone(),
            position: self.position.clone(),
            blocks: self.blocks.clone(),
            norm_gain: self.norm_gain.clone(),
            norm_bias: self.norm_bias.clone(),
            counters: PassCounters::default(),
        }
    }
}

impl PartialEq for Backbone {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.named_params().eq(other.named_params())
    }
}

/// Backbone parameters registered on a graph.
#[derive(Debug, Clone)]
pub struct BoundBackbone {
    patch_weight: Var,
    patch_bias: Var,
    class_token: Var,
    position: Var,
    blocks: Vec<[Var; 12]>,
    norm_gain: Var,
    norm_bias: Var,
}

impl BoundBackbone {
    /// All parameter handles, in [`Backbone::named_params`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![
            self.patch_weight,
            self.patch_bias,
            self.class_token,
            self.position,
        ];
        for b in &self.blocks {
            v.extend_from_slice(b);
        }
        v.push(self.norm_gain);
        v.push(self.norm_bias);
        v
    }
}

/// Prompt rows for one forward pass: the whole g-prompt and one e-prompt,
/// each flattened to `[depth * length, D]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct PromptVars {
    pub g: Option<Var>,
    pub e: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `[class]` token output, `[1, D]`.
    pub feature: Var,
    /// Full token output, `[num_tokens, D]`.
    pub tokens: Var,
}

impl Backbone {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self, BackboneError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let blocks = (0..config.num_layers)
            .map(|_| BlockParams::init(d, d * config.mlp_ratio, &mut rng))
            .collect();
        Ok(Self {
            config,
            patch_weight: Tensor::uniform(
                &[config.patch_dim(), d],
                1.0 / (config.patch_dim() as f64).sqrt(),
                &mut rng,
            ),
            patch_bias: Tensor::zeros(&[d]),
            class_token: Tensor::uniform(&[1, d], 0.02, &mut rng),
            position: Tensor::uniform(&[config.num_tokens(), d], 0.02, &mut rng),
            blocks,
            norm_gain: Tensor::full(&[d], 1.0),
            norm_bias: Tensor::zeros(&[d]),
            counters: PassCounters::default(),
        })
    }

    pub fn named_params(&self) -> impl Iterator<Item = (String, &Tensor)> + '_ {
        let head = [
            ("patch_weight", &self.patch_weight),
            ("patch_bias", &self.patch_bias),
            ("class_token", &self.class_token),
            ("position", &self.position),
        ]
        .into_iter()
        .map(|(n, t)| (n.to_string(), t));
        let blocks = self.blocks.iter().enumerate().flat_map(|(i, b)| {
            BlockParams::NAMES
                .iter()
                .zip(b.tensors())
                .map(move |(n, t)| (format!("block{i}.{n}"), t))
        });
        let tail = [
            ("norm_gain", &self.norm_gain),
            ("norm_bias", &self.norm_bias),
        ]
        .into_iter()
        .map(|(n, t)| (n.to_string(), t));
        head.chain(blocks).chain(tail)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.patch_weight,
            &mut self.patch_bias,
            &mut self.class_token,
            &mut self.position,
        ];
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.push(&mut self.norm_gain);
        v.push(&mut self.norm_bias);
        v
    }

    pub fn num_params(&self) -> usize {
        self.named_params().map(|(_, t)| t.len()).sum()
    }

    /// Registers every parameter on `g`, trainable or frozen.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> BoundBackbone {
        let mut leaf = |t: &'a Tensor| if trainable { g.param(t) } else { g.constant(t) };
        let patch_weight = leaf(&self.patch_weight);
        let patch_bias = leaf(&self.patch_bias);
        let class_token = leaf(&self.class_token);
        let position = leaf(&self.position);
        let blocks = self
            .blocks
            .iter()
            .map(|b| b.tensors().map(&mut leaf))
            .collect();
        let norm_gain = leaf(&self.norm_gain);
        let norm_bias = leaf(&self.norm_bias);
        BoundBackbone {
            patch_weight,
            patch_bias,
            class_token,
            position,
            blocks,
            norm_gain,
            norm_bias,
        }
    }

    /// Cuts a channel-first image into `[num_patches, S*S*C]` rows.
    pub fn patchify(&self, image: &[f32]) -> Result<Tensor, BackboneError> {
        let c = &self.config;
        if image.len() != c.image_len() {
            return Err(BackboneError::ImageSize {
                got: image.len(),
                expected: c.image_len(),
                channels: c.channels,
                size: c.image_size,
            });
        }
        let (s, side, size) = (c.patch_size, c.image_size / c.patch_size, c.image_size);
        let mut data = Vec::with_capacity(c.num_patches() * c.patch_dim());
        for py in 0..side {
            for px in 0..side {
                for ch in 0..c.channels {
                    for dy in 0..s {
                        let row = ch * size * size + (py * s + dy) * size + px * s;
                        data.extend(image[row..row + s].iter().map(|&v| v as f64));
                    }
                }
            }
        }
        Ok(Tensor::new(&[c.num_patches(), c.patch_dim()], data)?)
    }

    /// `x_e`: class token followed by projected patches, plus positions.
    pub fn embed<'a>(
        &self,
        g: &mut Graph<'a>,
        bound: &BoundBackbone,
        image: &[f32],
    ) -> Result<Var, BackboneError> {
        let patches = g.constant_owned(self.patchify(image)?);
        let proj = g.matmul(patches, bound.patch_weight)?;
        let proj = g.add_bias(proj, bound.patch_bias)?;
        let tokens = g.concat_rows(&[bound.class_token, proj])?;
        Ok(g.add(tokens, bound.position)?)
    }

    fn attention<'a>(
        &self,
        g: &mut Graph<'a>,
        x: Var,
        p: &[Var; 12],
    ) -> Result<Var, BackboneError> {
        let d = self.config.embed_dim;
        let heads = self.config.num_heads;
        let dh = d / heads;
        let qkv = g.matmul(x, p[2])?;
        let qkv = g.add_bias(qkv, p[3])?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = g.slice_cols(qkv, h * dh, (h + 1) * dh)?;
            let k = g.slice_cols(qkv, d + h * dh, d + (h + 1) * dh)?;
            let v = g.slice_cols(qkv, 2 * d + h * dh, 2 * d + (h + 1) * dh)?;
            let scores = g.matmul_nt(q, k)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores);
            outs.push(g.matmul(attn, v)?);
        }
        let merged = if heads == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        let out = g.matmul(merged, p[4])?;
        Ok(g.add_bias(out, p[5])?)
    }

    fn block<'a>(&self, g: &mut Graph<'a>, h: Var, p: &[Var; 12]) -> Result<Var, BackboneError> {
        let n1 = g.layer_norm(h, p[0], p[1])?;
        let a = self.attention(g, n1, p)?;
        let h = g.add(h, a)?;
        let n2 = g.layer_norm(h, p[6], p[7])?;
        let m = g.matmul(n2, p[8])?;
        let m = g.add_bias(m, p[9])?;
        let m = g.gelu(m);
        let m = g.matmul(m, p[10])?;
        let m = g.add_bias(m, p[11])?;
        Ok(g.add(h, m)?)
    }

    fn check_prompt(
        g: &Graph<'_>,
        v: Option<Var>,
        rows: usize,
        d: usize,
    ) -> Result<(), BackboneError> {
        if let Some(v) = v {
            let t = g.value(v);
            if t.rows() != rows || t.cols() != d || t.shape().len() != 2 {
                return Err(BackboneError::PromptShape {
                    got: t.shape().to_vec(),
                    expected: vec![rows, d],
                });
            }
        }
        Ok(())
    }

    /// Runs the encoder over `x_e` with the given prompts. Zero-length
    /// prompts are skipped, which makes them identical to no prompt.
    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a>,
        bound: &BoundBackbone,
        x_e: Var,
        plan: &PromptInsertionPlan,
        prompts: PromptVars,
    ) -> Result<ForwardOutput, BackboneError> {
        let d = self.config.embed_dim;
        let tokens = self.config.num_tokens();
        Self::check_prompt(g, prompts.g, plan.g_depth() * plan.g_length, d)?;
        Self::check_prompt(g, prompts.e, plan.e_depth() * plan.e_length, d)?;

        let mut h = x_e;
        for (layer, p) in bound.blocks.iter().enumerate() {
            let mut prefix = Vec::with_capacity(2);
            if let (Some(gp), Some(pos)) =
                (prompts.g, plan.g_layers.iter().position(|&l| l == layer))
            {
                if plan.g_length > 0 {
                    prefix.push(g.slice_rows(
                        gp,
                        pos * plan.g_length,
                        (pos + 1) * plan.g_length,
                    )?);
                }
            }
            if let (Some(ep), Some(pos)) =
                (prompts.e, plan.e_layers.iter().position(|&l| l == layer))
            {
                if plan.e_length > 0 {
                    prefix.push(g.slice_rows(
                        ep,
                        pos * plan.e_length,
                        (pos + 1) * plan.e_length,
                    )?);
                }
            }
            if prefix.is_empty() {
                h = self.block(g, h, p)?;
            } else {
                let skip: usize = prefix.iter().map(|&v| g.value(v).rows()).sum();
                prefix.push(h);
                let joined = g.concat_rows(&prefix)?;
                let out = self.block(g, joined, p)?;
                h = g.slice_rows(out, skip, skip + tokens)?;
            }
        }
        let out = g.layer_norm(h, bound.norm_gain, bound.norm_bias)?;
        let feature = g.slice_rows(out, 0, 1)?;
        Ok(ForwardOutput {
            feature,
            tokens: out,
        })
    }

    /// One instrumented backbone pass over a batch of images.
    pub fn forward_batch<'a>(
        &self,
        g: &mut Graph<'a>,
        bound: &BoundBackbone,
        images: &[&[f32]],
        plan: &PromptInsertionPlan,
        prompts: PromptVars,
    ) -> Result<Vec<ForwardOutput>, BackboneError> {
        self.counters.record_forward();
        images
            .iter()
            .map(|img| {
                let x_e = self.embed(g, bound, img)?;
                self.forward(g, bound, x_e, plan, prompts)
            })
            .collect()
    }

    /// Gradient-free `[class]` features for a batch, with prompts given as
    /// plain tensors shaped `[depth, length, D]`.
    pub fn features(
        &self,
        images: &[&[f32]],
        plan: &PromptInsertionPlan,
        g_prompt: Option<&Tensor>,
        e_prompt: Option<&Tensor>,
    ) -> Result<Vec<Tensor>, BackboneError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let prompts = bind_prompts(
            &mut g,
            plan,
            self.config.embed_dim,
            g_prompt,
            e_prompt,
            false,
        )?;
        let outs = self.forward_batch(&mut g, &bound, images, plan, prompts)?;
        Ok(outs.iter().map(|o| g.value(o.feature).clone()).collect())
    }

    /// `logits = Wᵀ · feature`, with masked-out classes pinned far below
    /// every real logit.
    pub fn classify<'a>(
        g: &mut Graph<'a>,
        feature: Var,
        head: Var,
        mask: Option<&[bool]>,
    ) -> Result<Var, BackboneError> {
        let logits = g.matmul(feature, head)?;
        match mask {
            Some(keep) => Ok(g.mask_fill(logits, keep)?),
            None => Ok(logits),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = Writer::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        for v in [
            c.image_size,
            c.patch_size,
            c.channels,
            c.embed_dim,
            c.num_layers,
            c.num_heads,
            c.mlp_ratio,
        ] {
            w.u32(v as u32);
        }
        let params: Vec<_> = self.named_params().collect();
        w.u32(params.len() as u32);
        for (name, t) in params {
            w.blob(&name, t);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BackboneError> {
        let mut r = Reader::open(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let mut field = || r.u32("config").map(|v| v as usize);
        let config = BackboneConfig {
            image_size: field()?,
            patch_size: field()?,
            channels: field()?,
            embed_dim: field()?,
            num_layers: field()?,
            num_heads: field()?,
            mlp_ratio: field()?,
        };
        config.validate()?;
        let mut model = Backbone::new(config, 0)?;
        let names: Vec<String> = model.named_params().map(|(n, _)| n).collect();
        let count = r.u32("parameter count")? as usize;
        if count != names.len() {
            return Err(CodecError::Corrupt {
                offset: r.offset(),
                detail: format!("{count} parameters, config implies {}", names.len()),
            }
            .into());
        }
        for (name, slot) in names.iter().zip(model.params_mut()) {
            let t = r.blob(name)?;
            if t.shape() != slot.shape() {
                return Err(CodecError::Corrupt {
                    offset: r.offset(),
                    detail: format!(
                        "{name} has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    ),
                }
                .into());
            }
            *slot = t;
        }
        r.finish()?;
        Ok(model)
    }
}

/// Registers plain prompt tensors (`[depth, length, D]`) as flattened
/// `[depth * length, D]` graph nodes.
pub fn bind_prompts<'a>(
    g: &mut Graph<'a>,
    plan: &PromptInsertionPlan,
    d: usize,
    g_prompt: Option<&'a Tensor>,
    e_prompt: Option<&'a Tensor>,
    trainable: bool,
) -> Result<PromptVars, BackboneError> {
    let mut one =
        |t: Option<&'a Tensor>, expected: [usize; 3]| -> Result<Option<Var>, BackboneError> {
            let Some(t) = t else { return Ok(None) };
            if t.shape() != expected {
                return Err(BackboneError::PromptShape {
                    got: t.shape().to_vec(),
                    expected: expected.to_vec(),
                });
            }
            let v = if trainable { g.param(t) } else { g.constant(t) };
            Ok(Some(g.reshape(v, &[expected[0] * expected[1], d])?))
        };
    Ok(PromptVars {
        g: one(g_prompt, plan.g_shape(d))?,
        e: one(e_prompt, plan.e_shape(d))?,
    })
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    fn image(seed: u64, config: &BackboneConfig) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..config.image_len()).map(|_| rng.gen::<f32>()).collect()
    }

    fn small() -> BackboneConfig {
        BackboneConfig {
            image_size: 8,
            patch_size: 4,
            channels: 2,
            embed_dim: 8,
            num_layers: 3,
            num_heads: 2,
            mlp_ratio: 2,
        }
    }

    #[test]
    fn embed_shape_law() {
        let cfg = BackboneConfig::default();
        let bb = Backbone::new(cfg, 1).unwrap();
        let img = image(0, &cfg);
        let mut g = Graph::new();
        let bound = bb.bind(&mut g, false);
        let x = bb.embed(&mut g, &bound, &img).unwrap();
        assert_eq!(g.value(x).shape(), &[17, 32]);

        let x2 = bb.embed(&mut g, &bound, &img).unwrap();
        assert_eq!(g.value(x), g.value(x2));

        assert!(matches!(
            bb.embed(&mut g, &bound, &img[1..]),
            Err(BackboneError::ImageSize { .. })
        ));
    }

    #[test]
    fn zero_image_embeds_to_positions_plus_bias() {
        let cfg = small();
        let mut bb = Backbone::new(cfg, 2).unwrap();
        bb.patch_bias = Tensor::vector((0..8).map(|i| i as f64 * 0.1).collect());
        let img = vec![0.0f32; cfg.image_len()];
        let mut g = Graph::new();
        let bound = bb.bind(&mut g, false);
        let x = bb.embed(&mut g, &bound, &img).unwrap();
        let x = g.value(x);
        for t in 0..cfg.num_tokens() {
            for j in 0..8 {
                let base = if t == 0 {
                    bb.class_token.data()[j]
                } else {
                    bb.patch_bias.data()[j]
                };
                let expected = base + bb.position.row(t)[j];
                assert_eq!(x.row(t)[j], expected);
            }
        }
    }

    #[test]
    fn zero_length_prompts_match_promptless_forward_exactly() {
        let cfg = small();
        let bb = Backbone::new(cfg, 3).unwrap();
        let img = image(5, &cfg);
        let empty_plan = PromptInsertionPlan {
            g_layers: vec![0, 1],
            e_layers: vec![0, 1, 2],
            g_length: 0,
            e_length: 0,
        };
        let gp = Tensor::zeros(&empty_plan.g_shape(8));
        let ep = Tensor::zeros(&empty_plan.e_shape(8));
        let plain = bb.features(&[&img], &empty_plan, None, None).unwrap();
        let prompted = bb
            .features(&[&img], &empty_plan, Some(&gp), Some(&ep))
            .unwrap();
        assert_eq!(plain, prompted);
        assert_eq!(plain[0].shape(), &[1, 8]);

        let mut g = Graph::new();
        let bound = bb.bind(&mut g, false);
        let x = bb.embed(&mut g, &bound, &img).unwrap();
        let out = bb
            .forward(&mut g, &bound, x, &empty_plan, PromptVars::default())
            .unwrap();
        assert_eq!(g.value(out.tokens).shape(), &[cfg.num_tokens(), 8]);
    }

    #[test]
    fn prompts_change_features_but_not_output_shape() {
        let cfg = small();
        let bb = Backbone::new(cfg, 3).unwrap();
        let img = image(5, &cfg);
        let plan = PromptInsertionPlan {
            g_layers: vec![0],
            e_layers: vec![1, 2],
            g_length: 2,
            e_length: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gp = Tensor::uniform(&plan.g_shape(8), 1.0, &mut rng);
        let ep = Tensor::uniform(&plan.e_shape(8), 1.0, &mut rng);
        let mut g = Graph::new();
        let bound = bb.bind(&mut g, false);
        let pv = bind_prompts(&mut g, &plan, 8, Some(&gp), Some(&ep), true).unwrap();
        let x = bb.embed(&mut g, &bound, &img).unwrap();
        let out = bb.forward(&mut g, &bound, x, &plan, pv).unwrap();
        assert_eq!(g.value(out.tokens).shape(), &[cfg.num_tokens(), 8]);
        let plain = bb.features(&[&img], &plan, None, None).unwrap();
        assert_ne!(g.value(out.feature), &plain[0]);
    }

    #[test]
    fn mismatched_prompt_is_rejected() {
        let cfg = small();
        let bb = Backbone::new(cfg, 3).unwrap();
        let plan = PromptInsertionPlan {
            g_layers: vec![0],
            e_layers: vec![1],
            g_length: 2,
            e_length: 3,
        };
        let wrong = Tensor::zeros(&[1, 4, 8]);
        let img = image(0, &cfg);
        assert!(matches!(
            bb.features(&[&img], &plan, None, Some(&wrong)),
            Err(BackboneError::PromptShape { .. })
        ));
        let bad_plan = PromptInsertionPlan {
            e_layers: vec![7],
            ..plan
        };
        assert!(bad_plan.validate(&cfg).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = BackboneConfig::default();
        assert!(c.validate().is_ok());
        c.patch_size = 5;
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::default();
        c.num_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn classify_is_a_matrix_vector_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = Tensor::uniform(&[1, 6], 1.0, &mut rng);
        let w = Tensor::uniform(&[6, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let (vf, vw) = (g.constant(&f), g.constant(&w));
        let logits = Backbone::classify(&mut g, vf, vw, None).unwrap();
        for c in 0..4 {
            let oracle: f64 = (0..6).map(|j| f.data()[j] * w.data()[j * 4 + c]).sum();
            assert!((g.value(logits).data()[c] - oracle).abs() < 1e-12);
        }

        // Identity head returns the feature.
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        let onehot = Tensor::matrix(1, 4, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let (vo, ve) = (g.constant(&onehot), g.constant(&eye));
        let l = Backbone::classify(&mut g, vo, ve, None).unwrap();
        assert_eq!(g.value(l).data(), onehot.data());

        let mask = [false, true, false, true];
        let masked = Backbone::classify(&mut g, vf, vw, Some(&mask)).unwrap();
        let pred = g.value(masked).argmax();
        assert!(mask[pred]);
        assert!(Backbone::classify(&mut g, vf, vw, Some(&[false; 4])).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let bb = Backbone::new(small(), 9).unwrap();
        let bytes = bb.to_bytes();
        let back = Backbone::from_bytes(&bytes).unwrap();
        assert_eq!(back, bb);
        assert_eq!(back.to_bytes(), bytes);
        assert!(Backbone::from_bytes(&bytes[..bytes.len() - 9]).is_err());
    }

    #[test]
    fn forward_counter_counts_batches() {
        let cfg = small();
        let bb = Backbone::new(cfg, 1).unwrap();
        let imgs: Vec<Vec<f32>> = (0..3).map(|s| image(s, &cfg)).collect();
        let refs: Vec<&[f32]> = imgs.iter().map(|v| v.as_slice()).collect();
        let plan = PromptInsertionPlan::default();
        let plan = PromptInsertionPlan {
            g_layers: vec![0],
            e_layers: vec![0, 1],
            ..plan
        };
        bb.features(&refs, &plan, None, None).unwrap();
        assert_eq!(bb.counters.snapshot().forwards, 1);
    }
}
