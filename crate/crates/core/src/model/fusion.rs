//! Prompt-query cross-attention over image tokens, the mask-proposal head
//! and class-channel gating.

use crate::error::{Error, Result};
use crate::params::{init_rng, init_uniform, Ctx, ParamId, ParamStore};
use crate::prompts::linear_params;
use crate::tensor::{Float, Tensor, Var};

/// Query and output projections of one prompt.
#[derive(Debug, Clone)]
pub struct QueryParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wo: ParamId,
}

#[derive(Debug, Clone)]
pub struct Fusion {
    pub attn_dim: usize,
    pub wk: ParamId,
    pub wv: ParamId,
    pub bo: ParamId,
    pub txt: Option<QueryParams>,
    pub ap: Option<QueryParams>,
}

/// Prompt embeddings fed to fusion; `None` for a disabled prompt.
#[derive(Debug, Clone, Copy, Default)]
pub struct Prompts {
    pub text: Option<Var>,
    pub anatomy: Option<Var>,
}

pub struct Fused {
    /// `F_attn`, tokens `[m, d]`.
    pub tokens: Var,
    /// Attention `[n_queries, m]`.
    pub attention: Var,
}

fn matrix(store: &mut ParamStore, seed: u64, name: &str, group: &str, din: usize, dout: usize) -> Result<ParamId> {
    store.add(name, group, init_uniform(&[din, dout], (3.0 / din as f64).sqrt(), &mut init_rng(seed, name)))
}

impl QueryParams {
    fn build(store: &mut ParamStore, seed: u64, tag: &str, d_p: usize, da: usize, d: usize) -> Result<Self> {
        let group = format!("fusion.{tag}");
        Ok(Self {
            wq: matrix(store, seed, &format!("{group}.wq"), &group, d_p, da)?,
            bq: store.add(&format!("{group}.bq"), &group, Tensor::zeros(&[da]))?,
            wo: matrix(store, seed, &format!("{group}.wo"), &group, da, d)?,
        })
    }
}

fn row<T: Float>(ctx: &mut Ctx<T>, v: Var) -> Result<Var> {
    let n = ctx.g.value(v).numel();
    ctx.g.reshape(v, &[1, n])
}

impl Fusion {
    pub fn build(store: &mut ParamStore, seed: u64, d: usize, d_p: usize, attn_dim: usize, text: bool, anatomy: bool) -> Result<Self> {
        Ok(Self {
            attn_dim,
            wk: matrix(store, seed, "fusion.kv.wk", "fusion.kv", d, attn_dim)?,
            wv: matrix(store, seed, "fusion.kv.wv", "fusion.kv", d, attn_dim)?,
            bo: store.add("fusion.kv.bo", "fusion.kv", Tensor::zeros(&[d]))?,
            txt: if text { Some(QueryParams::build(store, seed, "txt", d_p, attn_dim, d)?) } else { None },
            ap: if anatomy { Some(QueryParams::build(store, seed, "ap", d_p, attn_dim, d)?) } else { None },
        })
    }

    /// Prompts query the image tokens; the attended contexts are projected
    /// to the token dimension, summed and added to every token.
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, f_img: Var, prompts: Prompts) -> Result<Fused> {
        let pairs: Vec<(&QueryParams, Var)> = [(self.txt.as_ref(), prompts.text), (self.ap.as_ref(), prompts.anatomy)]
            .into_iter()
            .filter_map(|(q, e)| match (q, e) {
                (Some(q), Some(e)) => Some(Ok((q, e))),
                (None, None) => None,
                _ => Some(Err(Error::Contract("prompt embedding and fusion query set disagree".into()))),
            })
            .collect::<Result<_>>()?;
        if pairs.is_empty() {
            return Err(Error::Contract("fusion needs at least one prompt".into()));
        }
        let (wk, wv) = (ctx.p(self.wk), ctx.p(self.wv));
        let k = ctx.g.matmul(f_img, wk)?;
        let v = ctx.g.matmul(f_img, wv)?;
        let mut queries = Vec::new();
        for (q, e) in &pairs {
            let e = row(ctx, *e)?;
            let (wq, bq) = (ctx.p(q.wq), ctx.p(q.bq));
            let qv = ctx.g.matmul(e, wq)?;
            queries.push(ctx.g.add_bias(qv, bq)?);
        }
        let qm = ctx.g.concat(&queries, 0)?;
        let kt = ctx.g.transpose(k)?;
        let scores = ctx.g.matmul(qm, kt)?;
        let scores = ctx.g.scale(scores, 1.0 / (self.attn_dim as f64).sqrt());
        let attention = ctx.g.softmax(scores, 1)?;
        let contexts = ctx.g.matmul(attention, v)?;
        let mut modulation = None;
        for (j, (q, _)) in pairs.iter().enumerate() {
            let c = ctx.g.narrow(contexts, 0, j, 1)?;
            let wo = ctx.p(q.wo);
            let o = ctx.g.matmul(c, wo)?;
            modulation = Some(match modulation {
                None => o,
                Some(acc) => ctx.g.add(acc, o)?,
            });
        }
        let modulation = modulation.expect("at least one prompt");
        let bo = ctx.p(self.bo);
        let modulation = ctx.g.add_bias(modulation, bo)?;
        let d = ctx.g.shape(modulation)[1];
        let modulation = ctx.g.reshape(modulation, &[d])?;
        let tokens = ctx.g.add_bias(f_img, modulation)?;
        Ok(Fused { tokens, attention })
    }
}

/// Two-layer MLP on `GAP(F_attn) ∥ e_txt` giving class logits `θ`.
#[derive(Debug, Clone)]
pub struct ProposalHead {
    pub l1: (ParamId, ParamId),
    pub l2: (ParamId, ParamId),
    pub uses_text: bool,
}

impl ProposalHead {
    pub fn build(store: &mut ParamStore, seed: u64, d: usize, d_p: usize, hidden: usize, n_classes: usize, uses_text: bool) -> Result<Self> {
        let din = d + if uses_text { d_p } else { 0 };
        Ok(Self {
            l1: linear_params(store, seed, "proposal.l1", "proposal", din, hidden)?,
            l2: linear_params(store, seed, "proposal.l2", "proposal", hidden, n_classes)?,
            uses_text,
        })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, f_attn: Var, e_txt: Option<Var>) -> Result<Var> {
        let gap = ctx.g.mean_axis(f_attn, 0)?;
        let input = match (self.uses_text, e_txt) {
            (true, Some(e)) => ctx.g.concat(&[gap, e], 0)?,
            (false, None) => gap,
            _ => return Err(Error::Contract("proposal text input disagrees with its configuration".into())),
        };
        let x = row(ctx, input)?;
        let (w1, b1) = (ctx.p(self.l1.0), ctx.p(self.l1.1));
        let h = ctx.g.matmul(x, w1)?;
        let h = ctx.g.add_bias(h, b1)?;
        let h = ctx.g.gelu(h);
        let (w2, b2) = (ctx.p(self.l2.0), ctx.p(self.l2.1));
        let y = ctx.g.matmul(h, w2)?;
        let y = ctx.g.add_bias(y, b2)?;
        let c = ctx.g.shape(y)[1];
        ctx.g.reshape(y, &[c])
    }
}

/// Multiplies class channel `c ≥ 1` of `f_dec: [C, ...]` by
/// `softmax(θ)[c]`; the background channel passes through.
pub fn gate_output<T: Float>(ctx: &mut Ctx<T>, f_dec: Var, theta: Var) -> Result<Var> {
    let c = ctx.g.shape(f_dec)[0];
    if ctx.g.shape(theta) != [c] || c < 2 {
        return Err(Error::shape("gate_output", ctx.g.shape(f_dec), ctx.g.shape(theta)));
    }
    let probs = ctx.g.softmax(theta, 0)?;
    let one = ctx.g.constant(Tensor::full(&[1], T::one()));
    let rest = ctx.g.narrow(probs, 0, 1, c - 1)?;
    let gate = ctx.g.concat(&[one, rest], 0)?;
    ctx.g.scale_rows(f_dec, gate)
}
