//! AdamW with bias correction and decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 5e-5, betas: (0.9, 0.999), weight_decay: 1e-2, eps: 1e-8 }
    }
}

/// First and second moments, one pair per trainable parameter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub step: u64,
    pub m: BTreeMap<ParamId, Vec<f64>>,
    pub v: BTreeMap<ParamId, Vec<f64>>,
}

impl Moments {
    pub fn for_trainable(store: &ParamStore) -> Self {
        let mut s = Self::default();
        for (id, p) in store.iter().filter(|(_, p)| p.trainable) {
            s.m.insert(id, vec![0.0; p.value.numel()]);
            s.v.insert(id, vec![0.0; p.value.numel()]);
        }
        s
    }
}

impl AdamW {
    /// Applies one update. `grads` must cover exactly the parameters that
    /// own moments; frozen parameters are never touched.
    pub fn step(&self, store: &mut ParamStore, moments: &mut Moments, grads: &BTreeMap<ParamId, Vec<f64>>) -> Result<()> {
        for (id, g) in grads {
            if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NanGradient(format!("{} (entry {bad})", store.get(*id).name)));
            }
            if !moments.m.contains_key(id) {
                return Err(Error::Contract(format!("gradient for frozen parameter {}", store.get(*id).name)));
            }
        }
        moments.step += 1;
        let t = moments.step as i32;
        let (b1, b2) = self.betas;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (id, m) in moments.m.iter_mut() {
            let v = moments.v.get_mut(id).expect("paired moments");
            let zero;
            let g = match grads.get(id) {
                Some(g) => g,
                None => {
                    zero = vec![0.0; m.len()];
                    &zero
                }
            };
            let p = store.get_mut(*id).value.data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let (mh, vh) = (m[i] / c1, v[i] / c2);
                let x = p[i] as f64;
                p[i] = (x - self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * x)) as f32;
            }
        }
        Ok(())
    }
}
