//! Soft Dice over foreground classes and proposal cross-entropy.

use crate::error::{Error, Result};
use crate::params::Ctx;
use crate::tensor::{Float, Tensor, Var};

pub const DICE_EPS: f64 = 1e-5;

/// `1 − mean_c (2Σp·g + ε)/(Σp + Σg + ε)` over classes `1..C` of
/// `probs: [C, ...]` against per-voxel class ids `target`.
pub fn dice_loss<T: Float>(ctx: &mut Ctx<T>, probs: Var, target: &[u8]) -> Result<Var> {
    let shape = ctx.g.shape(probs).to_vec();
    let c = shape[0];
    let n: usize = shape[1..].iter().product();
    if target.len() != n || c < 2 {
        return Err(Error::shape("dice_loss", &shape, &[target.len()]));
    }
    if let Some(bad) = target.iter().find(|t| **t as usize >= c) {
        return Err(Error::Registry(format!("target class {bad} outside {c} classes")));
    }
    let flat = ctx.g.reshape(probs, &[c, n])?;
    let mut total = None;
    for k in 1..c {
        let p = ctx.g.narrow(flat, 0, k, 1)?;
        let g: Vec<T> = target.iter().map(|t| if *t as usize == k { T::one() } else { T::zero() }).collect();
        let g_sum = target.iter().filter(|t| **t as usize == k).count() as f64;
        let gv = ctx.g.constant(Tensor::new(&[1, n], g)?);
        let inter = ctx.g.mul(p, gv)?;
        let inter = ctx.g.sum(inter);
        let num = ctx.g.scale(inter, 2.0);
        let num = ctx.g.add_scalar(num, DICE_EPS);
        let p_sum = ctx.g.sum(p);
        let den = ctx.g.add_scalar(p_sum, g_sum + DICE_EPS);
        let term = ctx.g.div(num, den)?;
        total = Some(match total {
            None => term,
            Some(t) => ctx.g.add(t, term)?,
        });
    }
    let mean = ctx.g.scale(total.expect("c >= 2"), -1.0 / (c - 1) as f64);
    Ok(ctx.g.add_scalar(mean, 1.0))
}

/// Cross-entropy of `softmax(theta)` against `class`.
pub fn ce_loss<T: Float>(ctx: &mut Ctx<T>, theta: Var, class: usize) -> Result<Var> {
    let c = ctx.g.value(theta).numel();
    if class >= c {
        return Err(Error::Registry(format!("class {class} outside {c} proposal classes")));
    }
    let logp = ctx.g.log_softmax(theta, 0)?;
    let pick = ctx.g.narrow(logp, 0, class, 1)?;
    let s = ctx.g.sum(pick);
    Ok(ctx.g.scale(s, -1.0))
}
