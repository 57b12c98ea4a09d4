//! Transformer classification block: a four-level shifted-window transformer
//! over the fused map, followed by global average pooling and a two-logit
//! linear head.
//!
//! Within each level blocks alternate regular windows (shift 0) and shifted
//! windows (shift `window / 2`). Each block computes
//!
//! ```text
//! z_hat = Attn(LN(z)) + z
//! z'    = MLP(LN(z_hat)) + z_hat
//! ```
//!
//! where `Attn` is multi-head self-attention restricted to `window x window`
//! token windows with a learned relative position bias. Levels are joined by
//! patch merging (2x2 concat, LayerNorm, linear `4D -> 2D`).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;
use crate::layout;
use crate::nn::{Conv, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const LEVELS: usize = 4;

/// Additive logit offset for token pairs from different pre-shift regions.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TcbConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depths: [usize; LEVELS],
    pub heads: [usize; LEVELS],
    pub window_size: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
}

impl Default for TcbConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 96,
            depths: [2, 2, 6, 2],
            heads: [3, 6, 12, 24],
            window_size: 7,
            mlp_ratio: 4.0,
            num_classes: 2,
        }
    }
}

impl TcbConfig {
    /// The smallest configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 8,
            depths: [2, 2, 2, 2],
            heads: [1, 1, 1, 1],
            window_size: 7,
            mlp_ratio: 4.0,
            num_classes: 2,
        }
    }

    pub fn level_dim(&self, level: usize) -> usize {
        self.embed_dim << level
    }

    pub fn mlp_hidden(&self, dim: usize) -> usize {
        ((dim as f64) * self.mlp_ratio).round().max(1.0) as usize
    }

    /// Token grid side of every level for a square input of side `image_size`.
    pub fn level_sides(&self, image_size: usize) -> Result<[usize; LEVELS]> {
        if self.patch_size == 0 || !image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "input side {image_size} is not divisible by patch size {}",
                self.patch_size
            )));
        }
        let base = image_size / self.patch_size;
        if !base.is_multiple_of(1 << (LEVELS - 1)) {
            return Err(Error::Config(format!(
                "token grid {base} cannot be halved {} times",
                LEVELS - 1
            )));
        }
        Ok(std::array::from_fn(|i| base >> i))
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        if self.embed_dim == 0 || self.window_size == 0 || self.mlp_ratio <= 0.0 {
            return Err(Error::Config(format!("degenerate transformer config {self:?}")));
        }
        if self.num_classes != 2 {
            return Err(Error::Config(format!(
                "the prediction head has two outputs, got num_classes = {}",
                self.num_classes
            )));
        }
        let sides = self.level_sides(image_size)?;
        for level in 0..LEVELS {
            if sides[level] % self.window_size != 0 {
                return Err(Error::Config(format!(
                    "level {level} grid {} is not divisible by window size {}",
                    sides[level], self.window_size
                )));
            }
            if self.depths[level] == 0 || !self.depths[level].is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "level {level} depth {} must be a positive even number",
                    self.depths[level]
                )));
            }
            let dim = self.level_dim(level);
            if self.heads[level] == 0 || !dim.is_multiple_of(self.heads[level]) {
                return Err(Error::Config(format!(
                    "level {level}: {} heads do not divide {dim} channels",
                    self.heads[level]
                )));
            }
        }
        Ok(())
    }
}

/// A `(batch, h*w, dim)` token node together with its grid geometry.
#[derive(Clone, Copy, Debug)]
pub struct Tokens {
    pub node: NodeId,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
}

impl Tokens {
    pub fn from_node(g: &Graph, node: NodeId, height: usize, width: usize) -> Result<Self> {
        match *g.shape(node) {
            [b, n, d] if n == height * width => Ok(Self {
                node,
                batch: b,
                height,
                width,
                dim: d,
            }),
            _ => Err(Error::shape(
                "tokens",
                format!("{:?} is not a ({height}x{width})-token tensor", g.shape(node)),
            )),
        }
    }

    pub fn count(&self) -> usize {
        self.height * self.width
    }

    fn with_node(self, node: NodeId) -> Self {
        Self { node, ..self }
    }
}

/// Cyclically rolls the token grid by `-shift` on both axes (negative `shift` undoes it).
pub fn cyclic_shift(g: &mut Graph, t: Tokens, shift: isize) -> Result<Tokens> {
    let index = layout::cyclic_shift(t.batch, t.height, t.width, t.dim, shift);
    let node = g.gather(t.node, index, &[t.batch, t.count(), t.dim])?;
    Ok(t.with_node(node))
}

/// `(b, h*w, d)` → `(b * nW, ws*ws, d)`.
pub fn window_partition(g: &mut Graph, t: Tokens, ws: usize) -> Result<NodeId> {
    let index = layout::window_partition(t.batch, t.height, t.width, t.dim, ws)?;
    let windows = t.batch * (t.height / ws) * (t.width / ws);
    g.gather(t.node, index, &[windows, ws * ws, t.dim])
}

/// Inverse of [`window_partition`] for a grid of `height x width`.
pub fn window_reverse(g: &mut Graph, windows: NodeId, batch: usize, height: usize, width: usize, ws: usize) -> Result<Tokens> {
    let dim = *g.shape(windows).last().unwrap_or(&0);
    let expected = [batch * (height / ws) * (width / ws), ws * ws, dim];
    if !height.is_multiple_of(ws) || !width.is_multiple_of(ws) || g.shape(windows) != expected {
        return Err(Error::shape(
            "window_reverse",
            format!("{:?} does not tile a {height}x{width} grid with window {ws}", g.shape(windows)),
        ));
    }
    let index = layout::window_reverse(batch, height, width, dim, ws)?;
    let node = g.gather(windows, index, &[batch, height * width, dim])?;
    Tokens::from_node(g, node, height, width)
}

/// Additive attention mask `(nW, ws², ws²)` for shifted windows: pairs whose
/// tokens came from different regions before the cyclic shift get
/// [`MASK_VALUE`], all other pairs 0.
pub fn build_shift_mask(height: usize, width: usize, ws: usize, shift: usize) -> Result<Tensor> {
    if ws == 0 || !height.is_multiple_of(ws) || !width.is_multiple_of(ws) {
        return Err(Error::shape(
            "build_shift_mask",
            format!("grid {height}x{width} is not divisible by window {ws}"),
        ));
    }
    if shift >= ws {
        return Err(Error::InvalidArgument(format!("shift {shift} must be smaller than window {ws}")));
    }
    let region = |v: usize, n: usize| {
        if v < n - ws {
            0
        } else if v < n - shift {
            1
        } else {
            2
        }
    };
    let (nwy, nwx, n) = (height / ws, width / ws, ws * ws);
    let mut mask = Tensor::zeros(&[nwy * nwx, n, n]);
    if shift == 0 {
        return Ok(mask);
    }
    let data = mask.data_mut();
    for wy in 0..nwy {
        for wx in 0..nwx {
            let win = wy * nwx + wx;
            let label = |t: usize| {
                let (y, x) = (wy * ws + t / ws, wx * ws + t % ws);
                region(y, height) * 3 + region(x, width)
            };
            for i in 0..n {
                for j in 0..n {
                    if label(i) != label(j) {
                        data[(win * n + i) * n + j] = MASK_VALUE;
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// Windowed multi-head self-attention with relative position bias. Shift 0
/// gives W-MSA; a positive shift gives SW-MSA (cyclic shift, masked window
/// attention, inverse shift).
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub prefix: String,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
    qkv: Linear,
    proj: Linear,
}

impl WindowAttention {
    pub fn new(prefix: impl Into<String>, dim: usize, heads: usize, window: usize, shift: usize) -> Self {
        let prefix = prefix.into();
        Self {
            qkv: Linear::new(format!("{prefix}.qkv"), dim, 3 * dim),
            proj: Linear::new(format!("{prefix}.proj"), dim, dim),
            prefix,
            dim,
            heads,
            window,
            shift,
        }
    }

    pub fn table_name(&self) -> String {
        format!("{}.rel_bias_table", self.prefix)
    }

    pub fn proj(&self) -> &Linear {
        &self.proj
    }

    pub fn qkv(&self) -> &Linear {
        &self.qkv
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.qkv.init(store, rng)?;
        self.proj.init(store, rng)?;
        let side = 2 * self.window - 1;
        store.insert(self.table_name(), Tensor::zeros(&[side * side, self.heads]))
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamStore, x: Tokens) -> Result<Tokens> {
        self.forward_with_shift(g, params, x, self.shift)
    }

    pub fn forward_with_shift(&self, g: &mut Graph, params: &ParamStore, x: Tokens, shift: usize) -> Result<Tokens> {
        let ws = self.window;
        let shifted = if shift > 0 {
            cyclic_shift(g, x, shift as isize)?
        } else {
            x
        };
        let windows = window_partition(g, shifted, ws)?;
        let groups = g.shape(windows)[0];
        let n = ws * ws;
        let hd = self.dim / self.heads;
        let qkv = self.qkv.forward(g, params, windows)?;
        let split = |g: &mut Graph, part| {
            g.gather(qkv, layout::split_heads(groups, n, self.heads, hd, part), &[groups, self.heads, n, hd])
        };
        let q = split(g, 0)?;
        let k = split(g, 1)?;
        let v = split(g, 2)?;
        let table = g.param(params, &self.table_name())?;
        let bias = g.gather(table, layout::relative_bias_gather(ws, self.heads), &[self.heads, n, n])?;
        let mask = if shift > 0 {
            Some(build_shift_mask(x.height, x.width, ws, shift)?)
        } else {
            None
        };
        let scale = 1.0 / (hd as f64).sqrt();
        let attn = g.window_attention(q, k, v, Some(bias), mask.as_ref(), scale)?;
        let merged = g.gather(attn, layout::merge_heads(groups, n, self.heads, hd), &[groups, n, self.dim])?;
        let out = self.proj.forward(g, params, merged)?;
        let restored = window_reverse(g, out, x.batch, x.height, x.width, ws)?;
        if shift > 0 {
            cyclic_shift(g, restored, -(shift as isize))
        } else {
            Ok(restored)
        }
    }
}

/// One residual attention + MLP block.
#[derive(Clone, Debug)]
pub struct CswtBlock {
    pub prefix: String,
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl CswtBlock {
    pub fn new(prefix: impl Into<String>, dim: usize, heads: usize, window: usize, shift: usize, mlp_hidden: usize) -> Self {
        let prefix = prefix.into();
        Self {
            norm1: LayerNorm::new(format!("{prefix}.norm1"), dim),
            attn: WindowAttention::new(format!("{prefix}.attn"), dim, heads, window, shift),
            norm2: LayerNorm::new(format!("{prefix}.norm2"), dim),
            fc1: Linear::new(format!("{prefix}.mlp.fc1"), dim, mlp_hidden),
            fc2: Linear::new(format!("{prefix}.mlp.fc2"), mlp_hidden, dim),
            prefix,
        }
    }

    pub fn shift(&self) -> usize {
        self.attn.shift
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.norm1.init(store)?;
        self.attn.init(store, rng)?;
        self.norm2.init(store)?;
        self.fc1.init(store, rng)?;
        self.fc2.init(store, rng)
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamStore, z: Tokens) -> Result<Tokens> {
        let ln1 = self.norm1.forward(g, params, z.node)?;
        let attn = self.attn.forward(g, params, z.with_node(ln1))?;
        let z_hat = g.add(attn.node, z.node)?;
        let ln2 = self.norm2.forward(g, params, z_hat)?;
        let h = self.fc1.forward(g, params, ln2)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, params, h)?;
        let out = g.add(h, z_hat)?;
        Ok(z.with_node(out))
    }
}

/// 2x2 neighbourhood concat → LayerNorm(4D) → linear 4D → 2D (no bias).
#[derive(Clone, Debug)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerging {
    pub fn new(prefix: &str, dim: usize) -> Self {
        Self {
            norm: LayerNorm::new(format!("{prefix}.norm"), 4 * dim),
            reduction: Linear::new(format!("{prefix}.reduction"), 4 * dim, 2 * dim).without_bias(),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.norm.init(store)?;
        self.reduction.init(store, rng)
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamStore, t: Tokens) -> Result<Tokens> {
        let index = layout::patch_merge(t.batch, t.height, t.width, t.dim)?;
        let (h, w) = (t.height / 2, t.width / 2);
        let cat = g.gather(t.node, index, &[t.batch, h * w, 4 * t.dim])?;
        let normed = self.norm.forward(g, params, cat)?;
        let out = self.reduction.forward(g, params, normed)?;
        Tokens::from_node(g, out, h, w)
    }
}

pub struct Tcb {
    pub config: TcbConfig,
    pub in_channels: usize,
    pub image_size: usize,
    patch_embed: Conv,
    pub levels: Vec<Vec<CswtBlock>>,
    merges: Vec<PatchMerging>,
    head: Linear,
}

impl Tcb {
    pub fn new(config: TcbConfig, in_channels: usize, image_size: usize) -> Result<Self> {
        config.validate(image_size)?;
        let ps = config.patch_size;
        let patch_embed = Conv::new("tcb.patch_embed", in_channels, config.embed_dim, ps, ConvGeometry::new(ps, 0));
        let mut levels = Vec::with_capacity(LEVELS);
        let mut merges = Vec::with_capacity(LEVELS - 1);
        for level in 0..LEVELS {
            let dim = config.level_dim(level);
            let blocks = (0..config.depths[level])
                .map(|j| {
                    let shift = if j % 2 == 0 { 0 } else { config.window_size / 2 };
                    CswtBlock::new(
                        format!("tcb.level{level}.block{j}"),
                        dim,
                        config.heads[level],
                        config.window_size,
                        shift,
                        config.mlp_hidden(dim),
                    )
                })
                .collect();
            levels.push(blocks);
            if level + 1 < LEVELS {
                merges.push(PatchMerging::new(&format!("tcb.merge{level}"), dim));
            }
        }
        let head = Linear::new("tcb.head", config.level_dim(LEVELS - 1), config.num_classes);
        Ok(Self {
            config,
            in_channels,
            image_size,
            patch_embed,
            levels,
            merges,
            head,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.patch_embed.init(store, rng)?;
        for (level, blocks) in self.levels.iter().enumerate() {
            for b in blocks {
                b.init(store, rng)?;
            }
            if let Some(m) = self.merges.get(level) {
                m.init(store, rng)?;
            }
        }
        self.head.init(store, rng)
    }

    /// Non-overlapping patch projection: `(B, C, H, W)` → `(B, (H/p)(W/p), embed_dim)`.
    pub fn patch_embed(&self, g: &mut Graph, params: &ParamStore, x: NodeId) -> Result<Tokens> {
        let [_, _, h, w] = g.value(x).dims4()?;
        let p = self.config.patch_size;
        if h % p != 0 || w % p != 0 {
            return Err(Error::shape(
                "patch_embed",
                format!("input {h}x{w} is not divisible by patch size {p}"),
            ));
        }
        let y = self.patch_embed.forward(g, params, x)?;
        let [b, d, gh, gw] = g.value(y).dims4()?;
        let seq = g.permute(y, &[0, 2, 3, 1])?;
        let seq = g.reshape(seq, &[b, gh * gw, d])?;
        Tokens::from_node(g, seq, gh, gw)
    }

    /// Runs the four levels and returns the token tensor after every level.
    pub fn encode_levels(&self, g: &mut Graph, params: &ParamStore, x: NodeId) -> Result<Vec<Tokens>> {
        let mut t = self.patch_embed(g, params, x)?;
        let mut outs = Vec::with_capacity(LEVELS);
        for (level, blocks) in self.levels.iter().enumerate() {
            for b in blocks {
                t = b.forward(g, params, t)?;
            }
            outs.push(t);
            if let Some(m) = self.merges.get(level) {
                t = m.forward(g, params, t)?;
            }
        }
        Ok(outs)
    }

    /// `(B, C, H, W)` → `(B, 2)` logits.
    pub fn forward(&self, g: &mut Graph, params: &ParamStore, x: NodeId) -> Result<NodeId> {
        let levels = self.encode_levels(g, params, x)?;
        let last = levels.last().expect("four levels");
        let pooled = g.mean_tokens(last.node)?;
        self.head.forward(g, params, pooled)
    }
}
