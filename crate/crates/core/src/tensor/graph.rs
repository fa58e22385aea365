use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{split_axis, Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    LogSoftmax { x: Var, outer: usize, n: usize, inner: usize },
    SumAll(Var),
    SumAxis { x: Var, outer: usize, n: usize, inner: usize },
    LayerNorm { x: Var, n: usize, inv_std: Vec<f64> },
    Conv3d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Upsample2 { x: Var, c: usize, dims: [usize; 3] },
    Concat { xs: Vec<Var>, outer: usize, sizes: Vec<usize>, inner: usize },
    Narrow { x: Var, outer: usize, n: usize, start: usize, len: usize, inner: usize },
    MaskFill { x: Var, keep: Vec<bool> },
    GatherRows { table: Var, idx: Vec<usize>, d: usize },
    ScaleRows { x: Var, s: Var, inner: usize },
}

#[derive(Debug)]
struct Node<T: Float> {
    value: Tensor<T>,
    op: Op,
    tracked: bool,
}

/// Define-by-run tape. Nodes are appended in execution order, so reverse
/// index order is a valid reverse topological order for backward.
///
/// A graph can be differentiated once; a second [`Graph::backward`] call is
/// an error. Build a fresh graph for every forward pass.
#[derive(Debug)]
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
    bindings: HashMap<usize, Var>,
    binding_order: Vec<(usize, Var)>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
            bindings: HashMap::new(),
            binding_order: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: &[usize], data: Vec<T>, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        let value = Tensor::new(shape, data).expect("op produced a consistent buffer");
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Records `t`; gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, mut t: Tensor<T>) -> Var {
        let tracked = t.requires_grad();
        t.zero_grad();
        self.nodes.push(Node { value: t, op: Op::Leaf, tracked });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Returns the leaf registered under `key`, creating it on first use.
    /// Lets a parameter used at several sites map to a single leaf.
    pub fn bind(&mut self, key: usize, make: impl FnOnce() -> Tensor<T>) -> Var {
        if let Some(v) = self.bindings.get(&key) {
            return *v;
        }
        let v = self.leaf(make());
        self.bindings.insert(key, v);
        self.binding_order.push((key, v));
        v
    }

    /// Bound leaves in binding order.
    pub fn bindings(&self) -> &[(usize, Var)] {
        &self.binding_order
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Gradient of the last differentiated loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let out = matmul_raw(self.data(a), self.data(b), sa[0], sa[1], sb[1]);
        Ok(self.push(&[sa[0], sb[1]], out, Op::Matmul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::invalid_shape("transpose", &s, "expected a matrix"));
        }
        let out = transpose_raw(self.data(a), s[0], s[1]);
        Ok(self.push(&[s[1], s[0]], out, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let data = self.data(a).to_vec();
        Ok(self.push(shape, data, Op::Reshape(a), &[a]))
    }

    // ----- elementwise -----

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(self.shape(a).to_vec())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op) -> Result<Var> {
        let shape = self.same_shape(op, a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        Ok(self.push(&shape, out, node, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `x[..., n] + b[n]`, the only vector broadcast the engine supports.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::shape("add_bias", &sx, &sb));
        }
        let n = sb[0];
        let bias = self.data(b).to_vec();
        let out = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| *v + bias[i % n])
            .collect();
        Ok(self.push(&sx, out, Op::AddBias(x, b), &[x, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let s = self.shape(x).to_vec();
        let c_t = T::of(c);
        let out = self.data(x).iter().map(|v| *v * c_t).collect();
        self.push(&s, out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let s = self.shape(x).to_vec();
        let c_t = T::of(c);
        let out = self.data(x).iter().map(|v| *v + c_t).collect();
        self.push(&s, out, Op::AddScalar(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let out = self.data(x).iter().map(|v| v.max(T::zero())).collect();
        self.push(&s, out, Op::Relu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let out = self
            .data(x)
            .iter()
            .map(|v| {
                let x = v.as_f64();
                T::of(0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            })
            .collect();
        self.push(&s, out, Op::Gelu(x), &[x])
    }

    // ----- normalisations and reductions -----

    /// Softmax along `axis` with max subtraction. `-inf` entries map to exactly 0.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis("softmax", &shape, axis)?;
        if n == 0 {
            return Err(Error::invalid_shape("softmax", &shape, "empty axis"));
        }
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        let mut e = vec![0.0f64; n];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[at(j)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::DegenerateDistribution);
                }
                let mut sum = 0.0;
                for j in 0..n {
                    e[j] = (src[at(j)].as_f64() - max).exp();
                    sum += e[j];
                }
                for j in 0..n {
                    out[at(j)] = T::of(e[j] / sum);
                }
            }
        }
        Ok(self.push(&shape, out, Op::Softmax { x, outer, n, inner }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis("log_softmax", &shape, axis)?;
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[at(j)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::DegenerateDistribution);
                }
                let lse = max + (0..n).map(|j| (src[at(j)].as_f64() - max).exp()).sum::<f64>().ln();
                for j in 0..n {
                    out[at(j)] = T::of(src[at(j)].as_f64() - lse);
                }
            }
        }
        Ok(self.push(&shape, out, Op::LogSoftmax { x, outer, n, inner }, &[x]))
    }

    /// Sum of all elements, as a shape-`[]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().map(|v| v.as_f64()).sum();
        self.push(&[], vec![T::of(s)], Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis("sum_axis", &shape, axis)?;
        let src = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..n).map(|j| src[(o * n + j) * inner + i].as_f64()).sum();
                out[o * inner + i] = T::of(s);
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        Ok(self.push(&oshape, out, Op::SumAxis { x, outer, n, inner }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::invalid_shape("mean_axis", self.shape(x), format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n.max(1) as f64))
    }

    /// Normalises the last axis to zero mean and unit variance (no affine).
    pub fn layernorm(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::invalid_shape("layernorm", &shape, "scalar input"))?;
        let src = self.data(x);
        let rows = src.len() / n.max(1);
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = T::of((v.as_f64() - mean) * is);
            }
            inv_std.push(is);
        }
        Ok(self.push(&shape, out, Op::LayerNorm { x, n, inv_std }, &[x]))
    }

    // ----- spatial -----

    /// 3D cross-correlation of `x: [C_in, D, H, W]` with `w: [C_out, C_in, k, k, k]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 5 || sw[1] != sx[0] {
            return Err(Error::shape("conv3d", &sx, &sw));
        }
        let k = sw[2];
        if sw[3] != k || sw[4] != k || k % 2 == 0 {
            return Err(Error::invalid_shape("conv3d", &sw, "kernel must be cubic and odd-sized"));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::Contract(format!("conv3d: stride {stride} not in {{1, 2}}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape("conv3d bias", self.shape(b), &[sw[0]]));
            }
        }
        let inp = [sx[1], sx[2], sx[3]];
        let mut out = [0; 3];
        for (o, n) in out.iter_mut().zip(inp) {
            *o = ConvGeom::out_extent(n, k, stride, pad)
                .ok_or_else(|| Error::invalid_shape("conv3d", &sx, "output extent < 1"))?;
        }
        let geom = ConvGeom { cin: sx[0], cout: sw[0], k, stride, pad, inp, out };
        let data = kernels::conv3d_forward(self.data(x), self.data(w), b.map(|b| self.data(b)), &geom);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(&[sw[0], out[0], out[1], out[2]], data, Op::Conv3d { x, w, b, geom }, &inputs))
    }

    /// Nearest-neighbour ×2 upsampling of `[C, D, H, W]`.
    pub fn upsample_nearest3d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::invalid_shape("upsample_nearest3d", &s, "expected [C, D, H, W]"));
        }
        let dims = [s[1], s[2], s[3]];
        let out = kernels::upsample2_forward(self.data(x), s[0], dims);
        Ok(self.push(&[s[0], 2 * s[1], 2 * s[2], 2 * s[3]], out, Op::Upsample2 { x, c: s[0], dims }, &[x]))
    }

    // ----- structural -----

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = split_axis("concat", &base, axis)?;
        let mut sizes = Vec::with_capacity(xs.len());
        for v in xs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, n) in xs.iter().zip(&sizes) {
                out.extend_from_slice(&self.data(*v)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(&shape, out, Op::Concat { xs: xs.to_vec(), outer, sizes, inner }, xs))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis("narrow", &shape, axis)?;
        if start + len > n || len == 0 {
            return Err(Error::invalid_shape("narrow", &shape, format!("range {start}..{} on axis {axis}", start + len)));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        Ok(self.push(&oshape, out, Op::Narrow { x, outer, n, start, len, inner }, &[x]))
    }

    /// Keeps entries where `keep` is true and writes `fill` elsewhere.
    /// The mask is a constant: gradient reaches only kept entries.
    pub fn mask_fill(&mut self, x: Var, keep: Vec<bool>, fill: f64) -> Result<Var> {
        if keep.len() != self.value(x).numel() {
            return Err(Error::shape("mask_fill", self.shape(x), &[keep.len()]));
        }
        let f = T::of(fill);
        let shape = self.shape(x).to_vec();
        let out = self
            .data(x)
            .iter()
            .zip(&keep)
            .map(|(v, k)| if *k { *v } else { f })
            .collect();
        Ok(self.push(&shape, out, Op::MaskFill { x, keep }, &[x]))
    }

    /// Rows `idx` of `table: [V, d]`, giving `[idx.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || idx.iter().any(|i| *i >= s[0]) {
            return Err(Error::invalid_shape("gather_rows", &s, "row index out of range"));
        }
        let d = s[1];
        let src = self.data(table);
        let mut out = Vec::with_capacity(idx.len() * d);
        for i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(&[idx.len(), d], out, Op::GatherRows { table, idx: idx.to_vec(), d }, &[table]))
    }

    /// Multiplies every slice `x[i, ...]` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x).to_vec(), self.shape(s).to_vec());
        if sx.is_empty() || ss.len() != 1 || ss[0] != sx[0] {
            return Err(Error::shape("scale_rows", &sx, &ss));
        }
        let inner: usize = sx[1..].iter().product();
        let sv = self.data(s).to_vec();
        let out = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| *v * sv[i / inner.max(1)])
            .collect();
        Ok(self.push(&sx, out, Op::ScaleRows { x, s, inner }, &[x, s]))
    }

    // ----- backward -----

    /// Reverse pass from a scalar `loss`. Errors if this graph was already
    /// differentiated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract("backward called twice on the same graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid_shape("backward", self.shape(loss), "loss must be a scalar"));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].tracked;
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, g: Vec<T>| {
            if !nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                slot => *slot = Some(g),
            }
        };
        let y = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, n, p) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    // dA = dC · Bᵀ
                    let bt = transpose_raw(val(*b), n, p);
                    acc(*a, matmul_raw(gy, &bt, m, p, n));
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    let at = transpose_raw(val(*a), m, n);
                    acc(*b, matmul_raw(&at, gy, n, m, p));
                }
            }
            Op::Transpose(a) => {
                let s = nodes[a.0].value.shape();
                acc(*a, transpose_raw(gy, s[1], s[0]));
            }
            Op::Reshape(a) => acc(*a, gy.to_vec()),
            Op::Add(a, b) => {
                acc(*a, gy.to_vec());
                acc(*b, gy.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, gy.to_vec());
                acc(*b, gy.iter().map(|g| -*g).collect());
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, gy.iter().zip(val(*b)).map(|(g, y)| *g * *y).collect());
                }
                if wants(*b) {
                    acc(*b, gy.iter().zip(val(*a)).map(|(g, x)| *g * *x).collect());
                }
            }
            Op::Div(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                if wants(*a) {
                    acc(*a, gy.iter().zip(xb).map(|(g, d)| *g / *d).collect());
                }
                if wants(*b) {
                    acc(
                        *b,
                        gy.iter()
                            .zip(xa.iter().zip(xb))
                            .map(|(g, (n, d))| -*g * *n / (*d * *d))
                            .collect(),
                    );
                }
            }
            Op::AddBias(x, b) => {
                acc(*x, gy.to_vec());
                if wants(*b) {
                    let n = nodes[b.0].value.numel();
                    let mut gb = vec![0.0f64; n];
                    for (j, g) in gy.iter().enumerate() {
                        gb[j % n] += g.as_f64();
                    }
                    acc(*b, gb.into_iter().map(T::of).collect());
                }
            }
            Op::Scale(x, c) => {
                let c = T::of(*c);
                acc(*x, gy.iter().map(|g| *g * c).collect());
            }
            Op::AddScalar(x) => acc(*x, gy.to_vec()),
            Op::Relu(x) => acc(
                *x,
                gy.iter()
                    .zip(val(*x))
                    .map(|(g, v)| if *v > T::zero() { *g } else { T::zero() })
                    .collect(),
            ),
            Op::Gelu(x) => acc(
                *x,
                gy.iter()
                    .zip(val(*x))
                    .map(|(g, v)| {
                        let x = v.as_f64();
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *g * T::of(d)
                    })
                    .collect(),
            ),
            Op::Softmax { x, outer, n, inner } => {
                let (outer, n, inner) = (*outer, *n, *inner);
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + k;
                        let dot: f64 = (0..n).map(|j| y[at(j)].as_f64() * gy[at(j)].as_f64()).sum();
                        for j in 0..n {
                            gx[at(j)] = T::of(y[at(j)].as_f64() * (gy[at(j)].as_f64() - dot));
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::LogSoftmax { x, outer, n, inner } => {
                let (outer, n, inner) = (*outer, *n, *inner);
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + k;
                        let total: f64 = (0..n).map(|j| gy[at(j)].as_f64()).sum();
                        for j in 0..n {
                            gx[at(j)] = T::of(gy[at(j)].as_f64() - y[at(j)].as_f64().exp() * total);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::SumAll(x) => acc(*x, vec![gy[0]; nodes[x.0].value.numel()]),
            Op::SumAxis { x, outer, n, inner } => {
                let (outer, n, inner) = (*outer, *n, *inner);
                let mut gx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        gx[(o * n + j) * inner..(o * n + j + 1) * inner]
                            .copy_from_slice(&gy[o * inner..(o + 1) * inner]);
                    }
                }
                acc(*x, gx);
            }
            Op::LayerNorm { x, n, inv_std } => {
                let n = *n;
                let mut gx = vec![T::zero(); y.len()];
                for (r, is) in inv_std.iter().enumerate() {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &gy[r * n..(r + 1) * n]);
                    let mg = gr.iter().map(|g| g.as_f64()).sum::<f64>() / n as f64;
                    let mgy = gr.iter().zip(yr).map(|(g, v)| g.as_f64() * v.as_f64()).sum::<f64>() / n as f64;
                    for j in 0..n {
                        gx[r * n + j] = T::of(is * (gr[j].as_f64() - mg - yr[j].as_f64() * mgy));
                    }
                }
                acc(*x, gx);
            }
            Op::Conv3d { x, w, b, geom } => {
                if wants(*x) {
                    acc(*x, kernels::conv3d_backward_input(gy, val(*w), geom));
                }
                let need_b = b.is_some_and(wants);
                if wants(*w) || need_b {
                    let (gw, gb) = kernels::conv3d_backward_weight(gy, val(*x), geom);
                    acc(*w, gw);
                    if let Some(b) = b {
                        acc(*b, gb);
                    }
                }
            }
            Op::Upsample2 { x, c, dims } => acc(*x, kernels::upsample2_backward(gy, *c, *dims)),
            Op::Concat { xs, outer, sizes, inner } => {
                let total: usize = sizes.iter().sum();
                let mut off = 0;
                for (v, n) in xs.iter().zip(sizes) {
                    if wants(*v) {
                        let mut g = Vec::with_capacity(outer * n * inner);
                        for o in 0..*outer {
                            let base = (o * total + off) * inner;
                            g.extend_from_slice(&gy[base..base + n * inner]);
                        }
                        acc(*v, g);
                    }
                    off += n;
                }
            }
            Op::Narrow { x, outer, n, start, len, inner } => {
                let mut gx = vec![T::zero(); outer * n * inner];
                for o in 0..*outer {
                    let dst = (o * n + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&gy[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, gx);
            }
            Op::MaskFill { x, keep } => acc(
                *x,
                gy.iter()
                    .zip(keep)
                    .map(|(g, k)| if *k { *g } else { T::zero() })
                    .collect(),
            ),
            Op::GatherRows { table, idx, d } => {
                let mut gt = vec![T::zero(); nodes[table.0].value.numel()];
                for (r, i) in idx.iter().enumerate() {
                    for j in 0..*d {
                        gt[i * d + j] += gy[r * d + j];
                    }
                }
                acc(*table, gt);
            }
            Op::ScaleRows { x, s, inner } => {
                let inner = (*inner).max(1);
                let sv = val(*s);
                if wants(*x) {
                    acc(*x, gy.iter().enumerate().map(|(i, g)| *g * sv[i / inner]).collect());
                }
                if wants(*s) {
                    let xv = val(*x);
                    let gs = (0..sv.len())
                        .map(|r| {
                            let s: f64 = (r * inner..(r + 1) * inner)
                                .map(|i| gy[i].as_f64() * xv[i].as_f64())
                                .sum();
                            T::of(s)
                        })
                        .collect();
                    acc(*s, gs);
                }
            }
        }
    }
}

fn matmul_raw<T: Float>(a: &[T], b: &[T], m: usize, n: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * p];
    let mut row = vec![0.0f64; p];
    for i in 0..m {
        row.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..n {
            let a_ik = a[i * n + k].as_f64();
            for (r, bv) in row.iter_mut().zip(&b[k * p..(k + 1) * p]) {
                *r += a_ik * bv.as_f64();
            }
        }
        for (o, r) in out[i * p..(i + 1) * p].iter_mut().zip(&row) {
            *o = T::of(*r);
        }
    }
    out
}

fn transpose_raw<T: Float>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = g.matmul(i2, a).unwrap();
        assert_eq!(g.data(c), &[1.0, 2.0, 3.0, 4.0]);
        let r = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let col = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(r, col).unwrap();
        assert_eq!(g.data(c), &[11.0]);
        let err = g.matmul(r, r).unwrap_err();
        assert!(err.to_string().contains("[1, 2]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.data(y), &[0.5, 0.5]);

        let x = g.constant(t(&[3], &[3.0, f64::NEG_INFINITY, 2.0]));
        let y = g.softmax(x, 0).unwrap();
        let e = 1.0f64.exp();
        let expect = [e / (e + 1.0), 0.0, 1.0 / (e + 1.0)];
        for (a, b) in g.data(y).iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(g.data(y)[1], 0.0);
        assert!((g.data(y)[0] - 0.7311).abs() < 5e-5);

        let x = g.constant(t(&[2], &[1000.0, 1000.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.data(y), &[0.5, 0.5]);

        let x = g.constant(t(&[2], &[f64::NEG_INFINITY; 2]));
        assert!(matches!(g.softmax(x, 0), Err(Error::DegenerateDistribution)));
    }

    #[test]
    fn conv3d_examples() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..27).map(|i| i as f64).collect();
        let x = g.constant(t(&[1, 3, 3, 3], &data));
        let w = g.constant(t(&[1, 1, 1, 1, 1], &[1.0]));
        let y = g.conv3d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.data(y), &data[..]);

        let ones = g.constant(Tensor::full(&[1, 5, 5, 5], 1.0));
        let k = g.constant(Tensor::full(&[1, 1, 3, 3, 3], 1.0));
        let y = g.conv3d(ones, k, None, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 5, 5, 5]);
        assert_eq!(g.data(y)[(2 * 5 + 2) * 5 + 2], 27.0);
        assert_eq!(g.data(y)[0], 8.0);

        let y = g.conv3d(ones, k, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 3, 3]);

        let tiny = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        assert!(g.conv3d(tiny, k, None, 1, 0).is_err());
        let even = g.constant(Tensor::full(&[1, 1, 2, 2, 2], 1.0));
        assert!(g.conv3d(ones, even, None, 1, 0).is_err());
        assert!(g.conv3d(ones, k, None, 3, 1).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.data(y), &[0.0, 0.0, 2.0]);

        let c = g.constant(Tensor::full(&[4, 3], 2.5));
        let m = g.mean_axis(c, 0).unwrap();
        assert_eq!(g.data(m), &[2.5, 2.5, 2.5]);

        let x = g.constant(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -3.0, 0.5, 7.0, 2.0]));
        let y = g.layernorm(x).unwrap();
        for r in 0..2 {
            let row = &g.data(y)[r * 4..(r + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }

        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let err = g.add(a, b).unwrap_err();
        assert!(err.to_string().contains("[2]") && err.to_string().contains("[3]"));
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]).with_requires_grad(true));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);

        let mut g = Graph::new();
        let x = g.leaf(t(&[], &[1.5]).with_requires_grad(true));
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn untracked_inputs_receive_no_grad() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let y = g.mul(x, c).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn bind_reuses_leaf() {
        let mut g = Graph::<f32>::new();
        let a = g.bind(7, || Tensor::zeros(&[2]));
        let b = g.bind(7, || panic!("should be cached"));
        assert_eq!(a, b);
        assert_eq!(g.bindings().len(), 1);
    }
}
