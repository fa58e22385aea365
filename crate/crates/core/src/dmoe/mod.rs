//! Dynamic mixture of low-rank experts with a generalized router over the
//! generic experts and one task router per task over `specific[t] ∥ generic`.

use crate::error::{Error, Result};
use crate::params::{init_rng, init_uniform, Ctx, ParamId, ParamStore};
use crate::tensor::{Float, Tensor, Var};

/// Keeps the `k` largest entries and sets the rest to `-inf`. Ties go to the
/// lowest index.
pub fn keep_top_k<T: Float>(v: &[T], k: usize) -> Result<Vec<T>> {
    let keep = top_k_mask(v, k)?;
    Ok(v.iter().zip(&keep).map(|(x, k)| if *k { *x } else { T::neg_infinity() }).collect())
}

pub fn top_k_mask<T: Float>(v: &[T], k: usize) -> Result<Vec<bool>> {
    if k == 0 || k > v.len() {
        return Err(Error::Contract(format!("top-k with k = {k} over {} candidates", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Contract("top-k input must be finite".into()));
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|a, b| v[*b].partial_cmp(&v[*a]).unwrap().then(a.cmp(b)));
    let mut keep = vec![false; v.len()];
    order[..k].iter().for_each(|i| keep[*i] = true);
    Ok(keep)
}

/// Routing weights of one token: `softmax(keep_top_k(xᵀW, k))` with `w`
/// row-major `[d, n]`. Evaluated in f64.
pub fn route(x: &[f64], w: &[f64], n: usize, k: usize) -> Result<Vec<f64>> {
    if w.len() != x.len() * n {
        return Err(Error::shape("route", &[x.len()], &[w.len() / n.max(1), n]));
    }
    let logits: Vec<f64> = (0..n).map(|j| x.iter().enumerate().map(|(i, xi)| xi * w[i * n + j]).sum()).collect();
    softmax_kept(&keep_top_k(&logits, k)?)
}

fn softmax_kept(z: &[f64]) -> Result<Vec<f64>> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| if v.is_finite() { (v - max).exp() } else { 0.0 }).collect();
    let s: f64 = e.iter().sum();
    Ok(e.iter().map(|v| v / s).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmoeConfig {
    /// Task-specific experts per task.
    pub k1: usize,
    /// Generic experts.
    pub k2: usize,
    /// Experts kept per token by each router.
    pub k: usize,
    pub rank: usize,
    pub alpha: f64,
    /// Weight of the optional importance-balancing loss; 0 disables it.
    pub balance_weight: f64,
}

impl Default for DmoeConfig {
    fn default() -> Self {
        Self { k1: 2, k2: 4, k: 2, rank: 4, alpha: 8.0, balance_weight: 0.0 }
    }
}

impl DmoeConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.rank < 1 || self.rank >= d {
            return Err(Error::Config(format!("expert rank {} must be in [1, {d})", self.rank)));
        }
        if self.k2 < 1 || self.k < 1 || self.k > self.k2 {
            return Err(Error::Config(format!("need 1 <= k ({}) <= k2 ({})", self.k, self.k2)));
        }
        Ok(())
    }

    /// Closed-form parameter count of one layer of token dimension `d`.
    pub fn closed_form_params(&self, d: usize, n_tasks: usize) -> usize {
        let experts = self.k2 + n_tasks * self.k1;
        let routers = d * self.k2 + n_tasks * d * (self.k1 + self.k2);
        experts * 2 * d * self.rank + routers
    }
}

/// Residual adapter `X + scale·(X·Aᵀ)·Bᵀ` on tokens `X: [m, d]`.
#[derive(Debug, Clone)]
pub struct LowRankExpert {
    pub a: ParamId,
    pub b: ParamId,
    pub scale: f64,
}

impl LowRankExpert {
    fn build(store: &mut ParamStore, seed: u64, prefix: &str, group: &str, d: usize, cfg: &DmoeConfig) -> Result<Self> {
        let aname = format!("{prefix}.A");
        let a = store.add(&aname, group, init_uniform(&[cfg.rank, d], (1.0 / d as f64).sqrt(), &mut init_rng(seed, &aname)))?;
        let b = store.add(&format!("{prefix}.B"), group, Tensor::zeros(&[d, cfg.rank]))?;
        Ok(Self { a, b, scale: cfg.alpha / cfg.rank as f64 })
    }

    /// The low-rank update `scale·(X·Aᵀ)·Bᵀ` without the residual.
    fn delta<T: Float>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (a, b) = (ctx.p(self.a), ctx.p(self.b));
        let at = ctx.g.transpose(a)?;
        let h = ctx.g.matmul(x, at)?;
        let bt = ctx.g.transpose(b)?;
        let y = ctx.g.matmul(h, bt)?;
        Ok(ctx.g.scale(y, self.scale))
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let d = self.delta(ctx, x)?;
        ctx.g.add(x, d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouterKind {
    Generalized,
    Task(u8),
}

#[derive(Debug, Clone)]
pub struct RouterState {
    pub w: ParamId,
    pub k: usize,
    pub n_candidates: usize,
    pub kind: RouterKind,
}

#[derive(Debug, Clone)]
pub struct ExpertBank {
    pub d: usize,
    pub generic: Vec<LowRankExpert>,
    pub specific: Vec<(u8, Vec<LowRankExpert>)>,
}

/// Routing decisions of one pass, kept for inspection and balancing.
#[derive(Debug, Clone, PartialEq)]
pub struct Routing {
    /// Row-major `[m, n_candidates]` weights.
    pub weights: Vec<f64>,
    pub n: usize,
}

impl Routing {
    pub fn selected(&self, token: usize) -> Vec<usize> {
        (0..self.n).filter(|j| self.weights[token * self.n + j] > 0.0).collect()
    }
}

#[derive(Debug, Clone)]
pub struct DmoeLayer {
    pub name: String,
    pub cfg: DmoeConfig,
    pub bank: ExpertBank,
    pub r_g: RouterState,
    pub r_t: Vec<RouterState>,
}

#[derive(Debug)]
pub struct MoeOutput {
    pub tokens: Var,
    pub generic_routing: Routing,
    pub task_routing: Routing,
    pub balance_loss: Option<Var>,
}

impl DmoeLayer {
    /// Registers layer `name` (e.g. `dmoe0`) for tokens of dimension `d`.
    /// Parameter groups are shared across layers: `dmoe.generic.{i}`,
    /// `dmoe.task{t}.{i}`, `dmoe.router.g` and `dmoe.router.t`.
    pub fn build(store: &mut ParamStore, seed: u64, name: &str, d: usize, tasks: &[u8], cfg: &DmoeConfig) -> Result<Self> {
        cfg.validate(d)?;
        let generic = (0..cfg.k2)
            .map(|i| LowRankExpert::build(store, seed, &format!("{name}.generic.{i}"), &format!("dmoe.generic.{i}"), d, cfg))
            .collect::<Result<Vec<_>>>()?;
        let mut specific = Vec::new();
        for t in tasks {
            let experts = (0..cfg.k1)
                .map(|i| LowRankExpert::build(store, seed, &format!("{name}.task{t}.{i}"), &format!("dmoe.task{t}.{i}"), d, cfg))
                .collect::<Result<Vec<_>>>()?;
            specific.push((*t, experts));
        }
        let router = |store: &mut ParamStore, pname: String, group: &str, n: usize, kind| -> Result<RouterState> {
            let w = store.add(&pname, group, init_uniform(&[d, n], (1.0 / d as f64).sqrt(), &mut init_rng(seed, &pname)))?;
            Ok(RouterState { w, k: cfg.k.min(n), n_candidates: n, kind })
        };
        let r_g = router(store, format!("{name}.router.g"), "dmoe.router.g", cfg.k2, RouterKind::Generalized)?;
        let r_t = tasks
            .iter()
            .map(|t| router(store, format!("{name}.router.t{t}"), "dmoe.router.t", cfg.k1 + cfg.k2, RouterKind::Task(*t)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { name: name.to_string(), cfg: cfg.clone(), bank: ExpertBank { d, generic, specific }, r_g, r_t })
    }

    pub fn tasks(&self) -> Vec<u8> {
        self.bank.specific.iter().map(|(t, _)| *t).collect()
    }

    fn task_index(&self, task: u8) -> Result<usize> {
        self.bank
            .specific
            .iter()
            .position(|(t, _)| *t == task)
            .ok_or_else(|| Error::Registry(format!("task {task} is not registered in {}", self.name)))
    }

    /// Routing weights `[m, n]` for tokens `x: [m, d]`; the top-k selection
    /// is a constant of the graph.
    fn weights<T: Float>(&self, ctx: &mut Ctx<T>, x: Var, router: &RouterState) -> Result<(Var, Routing)> {
        let w = ctx.p(router.w);
        let logits = ctx.g.matmul(x, w)?;
        let n = router.n_candidates;
        let mut keep = Vec::with_capacity(ctx.g.value(logits).numel());
        for row in ctx.g.data(logits).chunks(n) {
            keep.extend(top_k_mask(row, router.k)?);
        }
        let masked = ctx.g.mask_fill(logits, keep, f64::NEG_INFINITY)?;
        let probs = ctx.g.softmax(masked, 1)?;
        let routing = Routing { weights: ctx.g.data(probs).iter().map(|v| v.as_f64()).collect(), n };
        Ok((probs, routing))
    }

    /// `Σᵢ wᵢ·Eᵢ(x)`. Because the kept weights of a token sum to one this
    /// equals `x + Σᵢ wᵢ·δᵢ(x)`, which keeps the identity at init exact.
    /// Experts selected by no token are skipped.
    fn mix<T: Float>(&self, ctx: &mut Ctx<T>, x: Var, experts: &[&LowRankExpert], router: &RouterState) -> Result<(Var, Routing, Var)> {
        let (probs, routing) = self.weights(ctx, x, router)?;
        let m = ctx.g.shape(x)[0];
        let mut out = x;
        for (i, e) in experts.iter().enumerate() {
            if (0..m).all(|t| routing.weights[t * routing.n + i] == 0.0) {
                continue;
            }
            let col = ctx.g.narrow(probs, 1, i, 1)?;
            let col = ctx.g.reshape(col, &[m])?;
            let delta = e.delta(ctx, x)?;
            let weighted = ctx.g.scale_rows(delta, col)?;
            out = ctx.g.add(out, weighted)?;
        }
        Ok((out, routing, probs))
    }

    /// `n·Σ impᵢ² / (Σ imp)² − 1` with `impᵢ` the summed routing weight of
    /// candidate `i`; zero when importance is uniform.
    fn balance<T: Float>(&self, ctx: &mut Ctx<T>, probs: Var) -> Result<Var> {
        let n = ctx.g.shape(probs)[1];
        let m = ctx.g.shape(probs)[0] as f64;
        let imp = ctx.g.sum_axis(probs, 0)?;
        let sq = ctx.g.mul(imp, imp)?;
        let s = ctx.g.sum(sq);
        let s = ctx.g.scale(s, n as f64 / (m * m));
        Ok(ctx.g.add_scalar(s, -1.0))
    }

    /// Generalized pass over the generic experts, then the task pass over
    /// `specific[task] ∥ generic` applied to its output.
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, x: Var, task: u8) -> Result<MoeOutput> {
        let ti = self.task_index(task)?;
        let s = ctx.g.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.bank.d {
            return Err(Error::shape("moe_forward", &s, &[0, self.bank.d]));
        }
        let generic: Vec<&LowRankExpert> = self.bank.generic.iter().collect();
        let (xg, generic_routing, pg) = self.mix(ctx, x, &generic, &self.r_g)?;
        let pool: Vec<&LowRankExpert> = self.bank.specific[ti].1.iter().chain(self.bank.generic.iter()).collect();
        let (out, task_routing, pt) = self.mix(ctx, xg, &pool, &self.r_t[ti])?;
        let balance_loss = if self.cfg.balance_weight > 0.0 {
            let a = self.balance(ctx, pg)?;
            let b = self.balance(ctx, pt)?;
            let l = ctx.g.add(a, b)?;
            Some(ctx.g.scale(l, self.cfg.balance_weight))
        } else {
            None
        };
        Ok(MoeOutput { tokens: out, generic_routing, task_routing, balance_loss })
    }

    /// Parameters of this layer by enumeration.
    pub fn count_params(&self, store: &ParamStore) -> usize {
        let mut ids: Vec<ParamId> = Vec::new();
        let experts = self.bank.generic.iter().chain(self.bank.specific.iter().flat_map(|(_, e)| e.iter()));
        for e in experts {
            ids.extend([e.a, e.b]);
        }
        ids.push(self.r_g.w);
        ids.extend(self.r_t.iter().map(|r| r.w));
        ids.iter().map(|id| store.get(*id).value.numel()).sum()
    }
}
