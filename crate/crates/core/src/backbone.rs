//! Frozen dual-stream ViT encoder.
//!
//! Both streams share one set of frozen transformer blocks. The optical
//! stream reuses the frozen patch embedding while the auxiliary stream gets
//! its own trainable embedding; a single frozen positional table is resized
//! bicubically to the token grid and added to both.

use std::fmt;
use std::ops::RangeInclusive;

use ndarray::{Array3, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tensor, Var};
use crate::error::{config_err, shape_err, Result};
use crate::graph::Graph;
use crate::nn::{lecun_std, LayerNorm, Linear};
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::resample::{bicubic_matrix, resample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Rgb,
    Aux,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Rgb => "rgb",
            Modality::Aux => "aux",
        })
    }
}

/// A batch of tokens laid out `[B, H', W', C]` on the patch grid.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid {
    pub var: Var,
    pub modality: Modality,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl TokenGrid {
    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.height, self.width, self.channels]
    }

    pub fn with_var(self, var: Var) -> Self {
        Self { var, ..self }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub depth: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    /// 1-based block indices closing each stage; the last equals `depth`.
    pub taps: Vec<usize>,
    pub aux_channels: usize,
    pub mlp_ratio: usize,
    /// Native `[H'_0, W'_0]` grid of the positional table.
    pub pos_grid: [usize; 2],
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("depth", self.depth),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("patch_size", self.patch_size),
            ("aux_channels", self.aux_channels),
            ("mlp_ratio", self.mlp_ratio),
            ("pos_grid height", self.pos_grid[0]),
            ("pos_grid width", self.pos_grid[1]),
        ] {
            if v == 0 {
                return Err(config_err!("backbone.{name} must be positive"));
            }
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(config_err!(
                "backbone.embed_dim {} is not divisible by backbone.num_heads {}",
                self.embed_dim,
                self.num_heads
            ));
        }
        partition_stages(self).map(|_| ())
    }

    pub fn num_stages(&self) -> usize {
        self.taps.len()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Block ranges (1-based, inclusive) of each stage: stage `s` covers blocks
/// `t_{s-1}+1 ..= t_s` with `t_0 = 0`.
pub fn partition_stages(spec: &EncoderSpec) -> Result<Vec<RangeInclusive<usize>>> {
    if spec.taps.is_empty() {
        return Err(config_err!("backbone.taps must not be empty"));
    }
    let mut prev = 0;
    let mut ranges = Vec::with_capacity(spec.taps.len());
    for &t in &spec.taps {
        if t <= prev {
            return Err(config_err!(
                "backbone.taps must be strictly increasing and >= 1, got {:?}",
                spec.taps
            ));
        }
        if t > spec.depth {
            return Err(config_err!(
                "backbone.taps entry {t} exceeds depth {}",
                spec.depth
            ));
        }
        ranges.push(prev + 1..=t);
        prev = t;
    }
    if prev != spec.depth {
        return Err(config_err!(
            "last tap {prev} must equal depth {}",
            spec.depth
        ));
    }
    Ok(ranges)
}

/// `[B, C, H, W]` → `[B, H/p, W/p, C·p·p]`, flattening each patch in
/// `(channel, row, column)` order.
pub fn patchify(image: &Tensor, patch: usize, expected_channels: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 4 {
        return Err(shape_err!("expected a [B, C, H, W] image, got {s:?}"));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if c != expected_channels {
        return Err(shape_err!(
            "image has {c} channels, expected {expected_channels}"
        ));
    }
    if h % patch != 0 {
        return Err(shape_err!(
            "image height {h} is not divisible by patch size {patch}"
        ));
    }
    if w % patch != 0 {
        return Err(shape_err!(
            "image width {w} is not divisible by patch size {patch}"
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let v = image
        .view()
        .into_shape_with_order(IxDyn(&[b, c, gh, patch, gw, patch]))
        .map_err(|e| shape_err!("patchify: {e}"))?
        .permuted_axes(IxDyn(&[0, 2, 4, 1, 3, 5]));
    let out = v.as_standard_layout().into_owned();
    Ok(out
        .into_shape_with_order(IxDyn(&[b, gh, gw, c * patch * patch]))
        .expect("element count"))
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    fn new(store: &mut ParamStore, prefix: &str, spec: &EncoderSpec) -> Self {
        let c = spec.embed_dim;
        let hidden = c * spec.mlp_ratio;
        let g = ParamGroup::BackboneBlocks;
        Self {
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), c, g),
            qkv: Linear::new(store, &format!("{prefix}.attn.qkv"), c, 3 * c, true, g, Init::Normal(lecun_std(c))),
            proj: Linear::new(store, &format!("{prefix}.attn.proj"), c, c, true, g, Init::Normal(lecun_std(c))),
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), c, g),
            fc1: Linear::new(store, &format!("{prefix}.mlp.fc1"), c, hidden, true, g, Init::Normal(lecun_std(c))),
            fc2: Linear::new(store, &format!("{prefix}.mlp.fc2"), hidden, c, true, g, Init::Normal(lecun_std(hidden))),
        }
    }

    /// Multi-head scaled dot-product self-attention over all tokens.
    fn attention(&self, g: &mut Graph, x: Var, dims: [usize; 4], heads: usize) -> Var {
        let [b, h, w, c] = dims;
        let n = h * w;
        let dh = c / heads;
        let qkv = self.qkv.forward(g, x);
        let t = &mut g.tape;
        let qkv = t.reshape(qkv, &[b, n, 3, heads, dh]);
        let qkv = t.permute(qkv, &[2, 0, 3, 1, 4]);
        let qkv = t.reshape(qkv, &[3, b * heads, n, dh]);
        let split = |t: &mut crate::autograd::Tape, i| {
            let part = t.narrow(qkv, 0, i, 1);
            t.reshape(part, &[b * heads, n, dh])
        };
        let q = split(t, 0);
        let k = split(t, 1);
        let v = split(t, 2);
        let scores = t.bmm(q, k, true);
        let scores = t.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = t.softmax_last(scores);
        let out = t.bmm(attn, v, false);
        let out = t.reshape(out, &[b, heads, n, dh]);
        let out = t.permute(out, &[0, 2, 1, 3]);
        let out = t.reshape(out, &[b, h, w, c]);
        self.proj.forward(g, out)
    }

    /// Pre-LN residual block: `x + SA(LN(x))`, then `x + MLP(LN(x))`.
    pub fn forward(&self, g: &mut Graph, x: TokenGrid, heads: usize) -> TokenGrid {
        let n1 = self.norm1.forward(g, x.var);
        let sa = self.attention(g, n1, x.dims(), heads);
        let x1 = g.tape.add(x.var, sa);
        let n2 = self.norm2.forward(g, x1);
        let h = self.fc1.forward(g, n2);
        let h = g.tape.gelu(h);
        let m = self.fc2.forward(g, h);
        let out = g.tape.add(x1, m);
        x.with_var(out)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub spec: EncoderSpec,
    pub rgb_embed: Linear,
    pub aux_embed: Linear,
    pub pos_embed: ParamId,
    pub blocks: Vec<Block>,
    stages: Vec<RangeInclusive<usize>>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, spec: &EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let (c, p) = (spec.embed_dim, spec.patch_size);
        let rgb_in = 3 * p * p;
        let aux_in = spec.aux_channels * p * p;
        let rgb_embed = Linear::new(
            store,
            "backbone.patch_embed",
            rgb_in,
            c,
            true,
            ParamGroup::RgbPatchEmbed,
            Init::Normal(lecun_std(rgb_in)),
        );
        let aux_embed = Linear::new(
            store,
            "backbone.aux_patch_embed",
            aux_in,
            c,
            true,
            ParamGroup::AuxPatchEmbed,
            Init::Normal(lecun_std(aux_in)),
        );
        let pos_embed = store.register(
            "backbone.pos_embed",
            &[spec.pos_grid[0], spec.pos_grid[1], c],
            ParamGroup::PositionalEncoding,
            Init::Normal(0.02),
        );
        let blocks = (0..spec.depth)
            .map(|i| Block::new(store, &format!("backbone.blocks.{i}"), spec))
            .collect();
        Ok(Self {
            spec: spec.clone(),
            rgb_embed,
            aux_embed,
            pos_embed,
            blocks,
            stages: partition_stages(spec)?,
        })
    }

    pub fn stages(&self) -> &[RangeInclusive<usize>] {
        &self.stages
    }

    pub fn embed_rgb(&self, g: &mut Graph, image: &Tensor) -> Result<TokenGrid> {
        self.embed(g, image, Modality::Rgb)
    }

    pub fn embed_aux(&self, g: &mut Graph, image: &Tensor) -> Result<TokenGrid> {
        self.embed(g, image, Modality::Aux)
    }

    fn embed(&self, g: &mut Graph, image: &Tensor, modality: Modality) -> Result<TokenGrid> {
        let (channels, layer) = match modality {
            Modality::Rgb => (3, &self.rgb_embed),
            Modality::Aux => (self.spec.aux_channels, &self.aux_embed),
        };
        let patches = patchify(image, self.spec.patch_size, channels)
            .map_err(|e| shape_err!("{modality} embedding: {e}"))?;
        let s = patches.shape().to_vec();
        let x = g.input(patches);
        let var = layer.forward(g, x);
        let tokens = TokenGrid {
            var,
            modality,
            batch: s[0],
            height: s[1],
            width: s[2],
            channels: self.spec.embed_dim,
        };
        Ok(self.add_positional(g, tokens))
    }

    /// The positional table resampled to an `h × w` grid (`[h, w, C]`).
    pub fn positional_table(&self, store: &ParamStore, h: usize, w: usize) -> Array3<f64> {
        resize_positional(store.value(self.pos_embed), h, w)
    }

    pub fn add_positional(&self, g: &mut Graph, tokens: TokenGrid) -> TokenGrid {
        let table = self.positional_table(g.store(), tokens.height, tokens.width);
        let tiled = table
            .insert_axis(Axis(0))
            .broadcast((tokens.batch, tokens.height, tokens.width, tokens.channels))
            .expect("broadcast positional table")
            .to_owned()
            .into_dyn();
        let pos = g.input(tiled);
        tokens.with_var(g.tape.add(tokens.var, pos))
    }

    /// Runs the 1-based block `index`.
    pub fn run_block(&self, g: &mut Graph, tokens: TokenGrid, index: usize) -> Result<TokenGrid> {
        let block = index
            .checked_sub(1)
            .and_then(|i| self.blocks.get(i))
            .ok_or_else(|| config_err!("block index {index} outside 1..={}", self.blocks.len()))?;
        Ok(block.forward(g, tokens, self.spec.num_heads))
    }

    /// Runs both streams through the 1-based stage `s`.
    pub fn run_stage(
        &self,
        g: &mut Graph,
        s: usize,
        x: TokenGrid,
        y: TokenGrid,
    ) -> Result<(TokenGrid, TokenGrid)> {
        let range = s
            .checked_sub(1)
            .and_then(|i| self.stages.get(i))
            .cloned()
            .ok_or_else(|| config_err!("stage {s} outside 1..={}", self.stages.len()))?;
        let (mut x, mut y) = (x, y);
        for b in range {
            x = self.run_block(g, x, b)?;
            y = self.run_block(g, y, b)?;
        }
        Ok((x, y))
    }
}

/// Bicubic resize of a `[H0, W0, C]` table; identity at the native size.
pub fn resize_positional(table: &Tensor, h: usize, w: usize) -> Array3<f64> {
    let s = table.shape();
    let (h0, w0, c) = (s[0], s[1], s[2]);
    let as3 = |t: ArrayD<f64>| t.into_dimensionality::<ndarray::Ix3>().expect("3-D table");
    if (h0, w0) == (h, w) {
        return as3(table.clone());
    }
    let cf = table
        .view()
        .permuted_axes(IxDyn(&[2, 0, 1]))
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&[1, c, h0, w0]))
        .expect("element count");
    let out = resample(&cf, &bicubic_matrix(h, h0), &bicubic_matrix(w, w0));
    let out = out
        .into_shape_with_order(IxDyn(&[c, h, w]))
        .expect("element count")
        .permuted_axes(IxDyn(&[1, 2, 0]));
    as3(out.as_standard_layout().into_owned())
}
