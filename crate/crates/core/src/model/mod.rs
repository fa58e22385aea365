//! The segmentation network: U-Net backbone, optional D-MoE layers, prompt
//! encoders, cross-attention fusion, mask proposal and gating.

pub mod backbone;
pub mod fusion;
pub mod loss;

use crate::dmoe::{DmoeConfig, DmoeLayer, Routing};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore};
use crate::prompts::{render_prompt, AnatomyEncoder, ExternalEmbeddings, PromptRegistry, TextEncoder};
use crate::tensor::{Float, Tensor, Var};

pub use backbone::{BackboneConfig, Decoder, Encoder};
pub use fusion::{gate_output, Fusion, ProposalHead, Prompts};
pub use loss::{ce_loss, dice_loss};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub d_p: usize,
    pub attn_dim: usize,
    pub vocab: usize,
    pub proposal_hidden: usize,
    pub use_ap: bool,
    pub use_tp: bool,
    pub use_dmoe: bool,
    pub dmoe: DmoeConfig,
    /// 1: after the bottleneck; 2: also after the deepest decoder stage.
    pub dmoe_layers: usize,
    pub lambda_ce: f64,
    /// Organ ids, one anatomy channel each.
    pub organs: Vec<u8>,
    /// Tumor class ids; class `classes[i]` is output channel `i + 1`.
    pub classes: Vec<u8>,
    pub prompts: PromptRegistry,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            d_p: 64,
            attn_dim: 16,
            vocab: 1024,
            proposal_hidden: 32,
            use_ap: true,
            use_tp: true,
            use_dmoe: true,
            dmoe: DmoeConfig::default(),
            dmoe_layers: 2,
            lambda_ce: 1.0,
            organs: vec![1, 2, 3],
            classes: vec![1, 2, 3],
            prompts: PromptRegistry::default_registry(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.backbone.n_classes != self.classes.len() + 1 {
            return Err(Error::Config(format!(
                "n_classes {} must be the {} tumor classes plus background",
                self.backbone.n_classes,
                self.classes.len()
            )));
        }
        if !(1..=2).contains(&self.dmoe_layers) {
            return Err(Error::Config("dmoe_layers must be 1 or 2".into()));
        }
        if self.use_dmoe {
            self.dmoe.validate(self.backbone.token_dim)?;
            if self.dmoe_layers == 2 {
                self.dmoe.validate(self.dmoe_dims()[1])?;
            }
        }
        if self.use_tp {
            self.prompts.check_classes(&self.classes)?;
        }
        Ok(())
    }

    pub fn uses_prompts(&self) -> bool {
        self.use_ap || self.use_tp
    }

    /// Token dimensions of the D-MoE insertion points.
    pub fn dmoe_dims(&self) -> Vec<usize> {
        let b = &self.backbone;
        let mut dims = vec![b.token_dim];
        if self.dmoe_layers == 2 {
            dims.push(b.channels(b.depth - 1));
        }
        dims
    }

    /// Output channel of a tumor class id (0 for background).
    pub fn channel_of(&self, class_id: u8) -> Result<usize> {
        if class_id == 0 {
            return Ok(0);
        }
        self.classes
            .iter()
            .position(|c| *c == class_id)
            .map(|i| i + 1)
            .ok_or_else(|| Error::Registry(format!("unknown tumor class {class_id}")))
    }

    /// Groups trained during PEFT.
    pub fn is_peft_group(group: &str) -> bool {
        group.starts_with("dmoe.") || group.starts_with("fusion.") || group == "proposal"
    }
}

/// One training or evaluation patch.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    /// Intensities, `P³` values.
    pub image: &'a [f32],
    /// Organ id per voxel, tumors reported as their host organ.
    pub organ_mask: &'a [u8],
    /// Task (tumor class id of the case).
    pub task: u8,
    /// Output channel per voxel, for the loss.
    pub target: Option<&'a [u8]>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOpts {
    /// When false the D-MoE layers are skipped; with `B = 0` they are the
    /// identity, so this is exact during pretraining.
    pub dmoe_active: bool,
}

pub struct Output {
    /// Gated per-class logits `[C, P, P, P]`.
    pub logits: Var,
    pub theta: Option<Var>,
    pub attention: Option<Var>,
    pub dice: Option<Var>,
    pub ce: Option<Var>,
    pub loss: Option<Var>,
    pub routing: Vec<(Routing, Routing)>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub text: Option<TextEncoder>,
    pub anatomy: Option<AnatomyEncoder>,
    pub fusion: Option<Fusion>,
    pub proposal: Option<ProposalHead>,
    pub dmoe: Vec<DmoeLayer>,
    pub external_text: Option<ExternalEmbeddings>,
}

impl Network {
    /// Registers all parameters in a fresh store. Initial values depend only
    /// on `(seed, parameter name)`.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        Self::build_with(cfg, seed, None)
    }

    /// Like [`Network::build`]; precomputed text embeddings replace the
    /// learnable text encoder.
    pub fn build_with(cfg: &ModelConfig, seed: u64, external_text: Option<ExternalEmbeddings>) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let b = &cfg.backbone;
        let encoder = Encoder::build(&mut store, seed, b)?;
        let decoder = Decoder::build(&mut store, seed, b)?;
        if let Some(e) = &external_text {
            if e.dim != cfg.d_p {
                return Err(Error::Config(format!("external embeddings have dim {}, expected {}", e.dim, cfg.d_p)));
            }
            for c in &cfg.classes {
                e.get(*c)?;
            }
        }
        let text = if cfg.use_tp && external_text.is_none() {
            Some(TextEncoder::build(&mut store, seed, cfg.vocab, cfg.d_p)?)
        } else {
            None
        };
        let anatomy = if cfg.use_ap { Some(AnatomyEncoder::build(&mut store, seed, &cfg.organs, cfg.d_p)?) } else { None };
        let (fusion, proposal) = if cfg.uses_prompts() {
            (
                Some(Fusion::build(&mut store, seed, b.token_dim, cfg.d_p, cfg.attn_dim, cfg.use_tp, cfg.use_ap)?),
                Some(ProposalHead::build(&mut store, seed, b.token_dim, cfg.d_p, cfg.proposal_hidden, b.n_classes, cfg.use_tp)?),
            )
        } else {
            (None, None)
        };
        let dmoe = if cfg.use_dmoe {
            cfg.dmoe_dims()
                .iter()
                .enumerate()
                .map(|(i, d)| DmoeLayer::build(&mut store, seed, &format!("dmoe{i}"), *d, &cfg.classes, &cfg.dmoe))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let net = Self {
            cfg: cfg.clone(),
            encoder,
            decoder,
            text,
            anatomy,
            fusion,
            proposal,
            dmoe,
            external_text: if cfg.use_tp { external_text } else { None },
        };
        Ok((net, store))
    }

    fn text_embedding<T: Float>(&self, ctx: &mut Ctx<T>, task: u8) -> Result<Option<Var>> {
        if !self.cfg.use_tp {
            return Ok(None);
        }
        if let Some(ext) = &self.external_text {
            let v = ext.get(task)?;
            let t = Tensor::new(&[v.len()], v.iter().map(|x| T::of(*x as f64)).collect())?;
            return Ok(Some(ctx.g.constant(t)));
        }
        let spec = self.cfg.prompts.get(task)?;
        let enc = self.text.as_ref().expect("text encoder exists when TP is on");
        Ok(Some(enc.forward(ctx, &render_prompt(spec))?))
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, s: &Sample, opts: ForwardOpts) -> Result<Output> {
        let b = &self.cfg.backbone;
        let p = b.patch;
        if s.image.len() != p * p * p {
            return Err(Error::shape("forward", &[s.image.len()], &[p * p * p]));
        }
        self.cfg.channel_of(s.task)?;
        let x = ctx.g.constant(Tensor::new(&[1, p, p, p], s.image.iter().map(|v| T::of(*v as f64)).collect())?);
        let enc = self.encoder.forward(ctx, x, b)?;
        let bott = b.bottleneck_extent();
        let mut tokens = backbone::to_tokens(ctx, enc.features)?;
        let mut routing = Vec::new();
        let mut balance = Vec::new();
        let run_dmoe = opts.dmoe_active && !self.dmoe.is_empty();
        if run_dmoe {
            let out = self.dmoe[0].forward(ctx, tokens, s.task)?;
            tokens = out.tokens;
            routing.push((out.generic_routing, out.task_routing));
            balance.extend(out.balance_loss);
        }
        let f_img = tokens;

        let e_txt = self.text_embedding(ctx, s.task)?;
        let e_a = match &self.anatomy {
            Some(a) => Some(a.forward(ctx, s.organ_mask, [p, p, p])?),
            None => None,
        };
        let (dec_in, theta, attention) = match (&self.fusion, &self.proposal) {
            (Some(f), Some(ph)) => {
                let fused = f.forward(ctx, f_img, Prompts { text: e_txt, anatomy: e_a })?;
                let theta = ph.forward(ctx, fused.tokens, e_txt)?;
                (ctx.g.add(fused.tokens, f_img)?, Some(theta), Some(fused.attention))
            }
            _ => (f_img, None, None),
        };

        let mut h = backbone::from_tokens(ctx, dec_in, bott)?;
        for i in 0..self.decoder.stages.len() {
            let skip = enc.skips[b.depth - 1 - i];
            h = self.decoder.stage(ctx, i, h, skip)?;
            if i == 0 && run_dmoe && self.dmoe.len() > 1 {
                let e = ctx.g.shape(h)[1];
                let t = backbone::to_tokens(ctx, h)?;
                let out = self.dmoe[1].forward(ctx, t, s.task)?;
                routing.push((out.generic_routing, out.task_routing));
                balance.extend(out.balance_loss);
                h = backbone::from_tokens(ctx, out.tokens, e)?;
            }
        }
        let f_dec = self.decoder.head(ctx, h)?;
        let logits = match theta {
            Some(t) => gate_output(ctx, f_dec, t)?,
            None => f_dec,
        };

        let (mut dice, mut ce, mut loss) = (None, None, None);
        if let Some(target) = s.target {
            let probs = ctx.g.softmax(logits, 0)?;
            let d = dice_loss(ctx, probs, target)?;
            let mut total = d;
            if let Some(t) = theta {
                let class = (1..b.n_classes)
                    .filter(|c| target.iter().any(|v| *v as usize == *c))
                    .max_by_key(|c| target.iter().filter(|v| **v as usize == *c).count())
                    .unwrap_or(0);
                let c = ce_loss(ctx, t, class)?;
                let weighted = ctx.g.scale(c, self.cfg.lambda_ce);
                total = ctx.g.add(total, weighted)?;
                ce = Some(c);
            }
            for bl in balance {
                total = ctx.g.add(total, bl)?;
            }
            dice = Some(d);
            loss = Some(total);
        }
        Ok(Output { logits, theta, attention, dice, ce, loss, routing })
    }
}

/// Voxel-wise argmax over channels of `logits: [C, ...]`.
pub fn argmax_channels<T: Float>(logits: &Tensor<T>) -> Vec<u8> {
    let c = logits.shape()[0];
    let n = logits.numel() / c;
    let d = logits.data();
    (0..n)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if d[k * n + i] > d[best * n + i] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}
