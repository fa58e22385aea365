//! Central finite-difference checks of parameter gradients.
//!
//! The analytic side records the loss with every parameter tracked and reads
//! the gradients off the graph. The numeric side only re-evaluates the loss
//! with one scalar moved by `±h`, so it shares nothing with backpropagation.

use crate::error::Result;
use crate::params::{Ctx, ParamId, ParamStore};
use crate::rng::CounterRng;
use crate::tensor::Var;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Relative error accepted per scalar.
    pub tolerance: f64,
    /// Denominator floor: gradients below it are compared absolutely.
    pub abs_floor: f64,
    /// Scalars sampled per parameter tensor (all of them when smaller).
    pub per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-3, abs_floor: 1e-6, per_param: 4, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub samples: Vec<GradSample>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> usize {
        self.samples.iter().filter(|s| s.rel_err < self.tolerance).count()
    }

    pub fn pass_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.passed() as f64 / self.samples.len() as f64
    }

    pub fn worst(&self) -> Option<&GradSample> {
        self.samples.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradSample> {
        self.samples.iter().filter(|s| s.rel_err >= self.tolerance)
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic and central-difference gradients of `loss` for a sample
/// of scalars of every parameter accepted by `select`.
pub fn check_params(
    store: &ParamStore<f64>,
    loss: &dyn Fn(&mut Ctx<f64>) -> Result<Var>,
    select: &dyn Fn(&str) -> bool,
    cfg: &GradCheckConfig,
) -> Result<GradReport> {
    let mut ctx = Ctx::tracking_all(store);
    let l = loss(&mut ctx)?;
    ctx.g.backward(l)?;
    let analytic: std::collections::BTreeMap<ParamId, Vec<f64>> = ctx.param_grads().into_iter().collect();

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut c = Ctx::new(s);
        let l = loss(&mut c)?;
        Ok(c.g.data(l)[0])
    };
    let mut work = store.clone();
    let mut rng = CounterRng::new(cfg.seed);
    let mut samples = Vec::new();
    for (id, p) in store.iter() {
        if !select(&p.name) {
            continue;
        }
        let n = p.value.numel();
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        idx.truncate(cfg.per_param);
        idx.sort_unstable();
        for i in idx {
            let orig = p.value.data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + cfg.step;
            let up = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig - cfg.step;
            let down = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic.get(&id).map_or(0.0, |g| g[i]);
            samples.push(GradSample {
                param: p.name.clone(),
                index: i,
                analytic: a,
                numeric,
                rel_err: rel_err(a, numeric, cfg.abs_floor),
            });
        }
    }
    Ok(GradReport { samples, tolerance: cfg.tolerance })
}
