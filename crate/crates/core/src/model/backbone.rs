//! Plain 3D convolutional U-Net encoder and decoder.

use crate::error::{Error, Result};
use crate::params::{init_rng, init_uniform, Ctx, ParamId, ParamStore};
use crate::tensor::{Float, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct ConvParams {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
}

impl ConvParams {
    pub fn build(store: &mut ParamStore, seed: u64, name: &str, group: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        let fan_in = (cin * k * k * k) as f64;
        let wname = format!("{name}.w");
        let w = store.add(&wname, group, init_uniform(&[cout, cin, k, k, k], (6.0 / fan_in).sqrt(), &mut init_rng(seed, &wname)))?;
        let b = store.add(&format!("{name}.b"), group, Tensor::zeros(&[cout]))?;
        Ok(Self { w, b, k })
    }

    pub fn apply<T: Float>(&self, ctx: &mut Ctx<T>, x: Var, stride: usize) -> Result<Var> {
        let (w, b) = (ctx.p(self.w), ctx.p(self.b));
        ctx.g.conv3d(x, w, Some(b), stride, self.k / 2)
    }

    pub fn apply_relu<T: Float>(&self, ctx: &mut Ctx<T>, x: Var, stride: usize) -> Result<Var> {
        let y = self.apply(ctx, x, stride)?;
        Ok(ctx.g.relu(y))
    }

    /// Convolution, per-channel instance normalization, ReLU. A single-voxel
    /// map has no spatial statistics and is left unnormalized.
    pub fn apply_norm_relu<T: Float>(&self, ctx: &mut Ctx<T>, x: Var, stride: usize) -> Result<Var> {
        let y = self.apply(ctx, x, stride)?;
        let y = instance_norm(ctx, y)?;
        Ok(ctx.g.relu(y))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub patch: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub token_dim: usize,
    pub n_classes: usize,
    /// Kernel of the full-resolution decoder conv (1 keeps it cheap).
    pub full_res_kernel: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { patch: 32, depth: 3, base_channels: 4, token_dim: 64, n_classes: 4, full_res_kernel: 1 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.patch % (1 << self.depth) != 0 {
            return Err(Error::Config(format!("patch {} must be divisible by 2^depth = {}", self.patch, 1 << self.depth)));
        }
        if self.base_channels < 1 || self.token_dim < 2 || self.n_classes < 2 {
            return Err(Error::Config("channels, token_dim and n_classes must be positive".into()));
        }
        if self.full_res_kernel % 2 == 0 {
            return Err(Error::Config("full_res_kernel must be odd".into()));
        }
        Ok(())
    }

    /// Channels of encoder level `l` (`l < depth`).
    pub fn channels(&self, l: usize) -> usize {
        self.base_channels << l
    }

    pub fn bottleneck_extent(&self) -> usize {
        self.patch >> self.depth
    }

    pub fn n_tokens(&self) -> usize {
        self.bottleneck_extent().pow(3)
    }
}

/// Initial background logit of the segmentation head.
pub const BACKGROUND_BIAS: f32 = 4.0;

#[derive(Debug, Clone)]
pub struct Encoder {
    pub stem: ConvParams,
    /// Per level `1..=depth`: stride-2 conv then a refining conv; the last
    /// level maps to the token dimension.
    pub down: Vec<(ConvParams, ConvParams)>,
}

#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub reduce: ConvParams,
    pub fuse: ConvParams,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    /// Stages from the deepest level (`depth - 1`) to level 0.
    pub stages: Vec<DecoderStage>,
    pub head: ConvParams,
}

pub struct Encoded {
    /// Bottleneck feature map `[d, s, s, s]`.
    pub features: Var,
    /// Skip features per level `0..depth`.
    pub skips: Vec<Var>,
}

impl Encoder {
    pub fn build(store: &mut ParamStore, seed: u64, cfg: &BackboneConfig) -> Result<Self> {
        let stem = ConvParams::build(store, seed, "backbone.stem", "backbone.stem", 1, cfg.channels(0), 3)?;
        let mut down = Vec::new();
        for l in 1..=cfg.depth {
            let cin = cfg.channels(l - 1);
            let cout = if l == cfg.depth { cfg.token_dim } else { cfg.channels(l) };
            let group = format!("backbone.enc{l}");
            down.push((
                ConvParams::build(store, seed, &format!("{group}.down"), &group, cin, cout, 3)?,
                ConvParams::build(store, seed, &format!("{group}.refine"), &group, cout, cout, 3)?,
            ));
        }
        Ok(Self { stem, down })
    }

    /// `x: [1, P, P, P]`.
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, x: Var, cfg: &BackboneConfig) -> Result<Encoded> {
        let p = cfg.patch;
        if ctx.g.shape(x) != [1, p, p, p] {
            return Err(Error::shape("encode", ctx.g.shape(x), &[1, p, p, p]));
        }
        let mut h = self.stem.apply_norm_relu(ctx, x, 1)?;
        let mut skips = vec![h];
        for (i, (down, refine)) in self.down.iter().enumerate() {
            h = down.apply_norm_relu(ctx, h, 2)?;
            h = refine.apply_norm_relu(ctx, h, 1)?;
            if i + 1 < self.down.len() {
                skips.push(h);
            }
        }
        Ok(Encoded { features: h, skips })
    }
}

impl Decoder {
    pub fn build(store: &mut ParamStore, seed: u64, cfg: &BackboneConfig) -> Result<Self> {
        let mut stages = Vec::new();
        for l in (0..cfg.depth).rev() {
            let c = cfg.channels(l);
            let cin = if l + 1 == cfg.depth { cfg.token_dim } else { cfg.channels(l + 1) };
            let k = if l == 0 { cfg.full_res_kernel } else { 3 };
            let group = format!("backbone.dec{l}");
            stages.push(DecoderStage {
                reduce: ConvParams::build(store, seed, &format!("{group}.reduce"), &group, cin, c, 1)?,
                fuse: ConvParams::build(store, seed, &format!("{group}.fuse"), &group, 2 * c, c, k)?,
            });
        }
        let head = ConvParams::build(store, seed, "backbone.head", "backbone.head", cfg.channels(0), cfg.n_classes, 1)?;
        // tumors are a few percent of a patch; starting with background favored
        // keeps the Dice gradient from inflating all foreground channels first
        store.get_mut(head.b).value.data_mut()[0] = BACKGROUND_BIAS;
        Ok(Self { stages, head })
    }

    /// One decoder stage: reduce, upsample, concatenate the skip, convolve.
    pub fn stage<T: Float>(&self, ctx: &mut Ctx<T>, i: usize, h: Var, skip: Var) -> Result<Var> {
        let s = &self.stages[i];
        let r = s.reduce.apply(ctx, h, 1)?;
        let up = ctx.g.upsample_nearest3d(r)?;
        if ctx.g.shape(up)[1..] != ctx.g.shape(skip)[1..] {
            return Err(Error::shape("decode", ctx.g.shape(up), ctx.g.shape(skip)));
        }
        let cat = ctx.g.concat(&[up, skip], 0)?;
        s.fuse.apply_norm_relu(ctx, cat, 1)
    }

    pub fn head<T: Float>(&self, ctx: &mut Ctx<T>, h: Var) -> Result<Var> {
        self.head.apply(ctx, h, 1)
    }
}

/// Normalizes every channel of `[C, D, H, W]` to zero mean, unit variance.
pub fn instance_norm<T: Float>(ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
    let s = ctx.g.shape(x).to_vec();
    let n: usize = s[1..].iter().product();
    if n < 2 {
        return Ok(x);
    }
    let flat = ctx.g.reshape(x, &[s[0], n])?;
    let y = ctx.g.layernorm(flat)?;
    ctx.g.reshape(y, &s)
}

/// `[d, s, s, s]` feature map to `[s³, d]` tokens.
pub fn to_tokens<T: Float>(ctx: &mut Ctx<T>, f: Var) -> Result<Var> {
    let s = ctx.g.shape(f).to_vec();
    let flat = ctx.g.reshape(f, &[s[0], s[1] * s[2] * s[3]])?;
    ctx.g.transpose(flat)
}

/// Inverse of [`to_tokens`] for a lattice of edge `s`.
pub fn from_tokens<T: Float>(ctx: &mut Ctx<T>, t: Var, s: usize) -> Result<Var> {
    let d = ctx.g.shape(t)[1];
    let tr = ctx.g.transpose(t)?;
    ctx.g.reshape(tr, &[d, s, s, s])
}
