//! Named parameter registry with group tags and trainable flags.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::rng::{derive_key, hash_str, CounterRng};
use crate::tensor::{Float, Graph, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Float = f32> {
    pub name: String,
    pub group: String,
    pub trainable: bool,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Float = f32> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

/// Parameter counts, overall and per group.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
    pub per_group: BTreeMap<String, (usize, bool)>,
}

impl ParamCount {
    pub fn trainable_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.trainable as f64 / self.total as f64
        }
    }
}

/// Initialisers draw from a stream keyed by `(seed, name)`, so a parameter's
/// initial value does not depend on which other parameters exist.
pub fn init_rng(seed: u64, name: &str) -> CounterRng {
    CounterRng::new(derive_key(seed, hash_str(name)))
}

pub fn init_uniform(shape: &[usize], bound: f64, rng: &mut CounterRng) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-bound, bound) as f32).collect();
    Tensor::new(shape, data).expect("shape matches buffer")
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, group: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Registry(format!("parameter {name} registered twice")));
        }
        self.by_name.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            group: group.to_string(),
            trainable: true,
            value: value.with_requires_grad(false),
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|i| ParamId(*i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn groups(&self) -> Vec<String> {
        let mut g: Vec<String> = self.params.iter().map(|p| p.group.clone()).collect();
        g.sort();
        g.dedup();
        g
    }

    /// Sets every parameter's trainable flag from its group name.
    pub fn set_trainable_by_group(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(&p.group);
        }
    }

    pub fn count(&self) -> ParamCount {
        let mut c = ParamCount::default();
        for p in &self.params {
            let n = p.value.numel();
            c.total += n;
            if p.trainable {
                c.trainable += n;
            }
            let e = c.per_group.entry(p.group.clone()).or_insert((0, p.trainable));
            e.0 += n;
            e.1 &= p.trainable;
        }
        c
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group.clone(),
                    trainable: p.trainable,
                    value: p.value.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// A graph being recorded against a parameter store. Each parameter is bound
/// to a single leaf; trainable parameters are tracked for gradients.
pub struct Ctx<'a, T: Float = f32> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    track_frozen: bool,
}

impl<'a, T: Float> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self { g: Graph::new(), store, track_frozen: false }
    }

    /// Tracks every parameter, frozen or not (gradient checks).
    pub fn tracking_all(store: &'a ParamStore<T>) -> Self {
        Self { g: Graph::new(), store, track_frozen: true }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        let param = self.store.get(id);
        let track = self.track_frozen || param.trainable;
        self.g.bind(id.0, || param.value.clone().with_requires_grad(track))
    }

    /// Gradients of bound, tracked parameters after `g.backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<T>)> {
        self.g
            .bindings()
            .iter()
            .filter(|(_, v)| self.g.is_tracked(*v))
            .map(|(k, v)| {
                let grad = self
                    .g
                    .grad(*v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); self.g.value(*v).numel()]);
                (ParamId(*k), grad)
            })
            .collect()
    }
}
