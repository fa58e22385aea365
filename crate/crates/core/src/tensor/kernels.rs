//! Raw loops behind the spatial ops. Layout is channel-major `[C, D, H, W]`,
//! kernels are `[C_out, C_in, k, k, k]`.

use std::borrow::Cow;

use super::{Float, Strided};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub inp: [usize; 3],
    pub out: [usize; 3],
}

impl ConvGeom {
    /// Output extent along one axis, `None` when it would be < 1.
    pub fn out_extent(inp: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = inp + 2 * pad;
        if padded < k {
            return None;
        }
        Some((padded - k) / stride + 1)
    }

    fn in_len(&self) -> usize {
        self.inp.iter().product()
    }

    fn out_len(&self) -> usize {
        self.out.iter().product()
    }

    /// Output positions `o` for which input index `o * stride + tap - pad` is in bounds.
    #[inline]
    fn valid(&self, axis: usize, tap: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if p > tap { (p - tap).div_ceil(s) } else { 0 };
        let last = self.inp[axis] + p;
        if last <= tap {
            return (0, 0);
        }
        let hi = ((last - 1 - tap) / s + 1).min(self.out[axis]);
        (lo.min(hi), hi)
    }
}

/// Visits every (output row, input row) pair touched by kernel tap
/// `(kd, kh, kw)` and hands the caller the row offsets and the valid
/// output column range.
#[inline]
fn for_each_row(
    g: &ConvGeom,
    kd: usize,
    kh: usize,
    kw: usize,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let (d0, d1) = g.valid(0, kd);
    let (h0, h1) = g.valid(1, kh);
    let (w0, w1) = g.valid(2, kw);
    if w0 >= w1 {
        return;
    }
    let [_, ih_n, iw_n] = g.inp;
    let [_, oh_n, ow_n] = g.out;
    for od in d0..d1 {
        let id = od * g.stride + kd - g.pad;
        for oh in h0..h1 {
            let ih = oh * g.stride + kh - g.pad;
            f((od * oh_n + oh) * ow_n, (id * ih_n + ih) * iw_n, w0, w1);
        }
    }
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.k == 1 && g.stride == 1 && g.pad == 0
}

/// Unfolds `x` into the `[C_in * k³, out_len]` patch matrix.
fn im2col<'a, T: Float>(x: &'a [T], g: &ConvGeom) -> Cow<'a, [T]> {
    if is_pointwise(g) {
        return Cow::Borrowed(x);
    }
    let (isz, osz, k) = (g.in_len(), g.out_len(), g.k);
    let taps = k * k * k;
    let mut col = vec![T::zero(); g.cin * taps * osz];
    for ci in 0..g.cin {
        let in_c = &x[ci * isz..(ci + 1) * isz];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = (ci * taps + (kd * k + kh) * k + kw) * osz;
                    let dst = &mut col[row..row + osz];
                    for_each_row(g, kd, kh, kw, |orow, irow, w0, w1| {
                        let o = &mut dst[orow + w0..orow + w1];
                        if g.stride == 1 {
                            o.copy_from_slice(&in_c[irow + w0 + kw - g.pad..irow + w1 + kw - g.pad]);
                        } else {
                            for (j, v) in o.iter_mut().enumerate() {
                                *v = in_c[irow + (w0 + j) * g.stride + kw - g.pad];
                            }
                        }
                    });
                }
            }
        }
    }
    Cow::Owned(col)
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the input.
fn col2im<T: Float>(col: &[T], g: &ConvGeom) -> Vec<T> {
    let (isz, osz, k) = (g.in_len(), g.out_len(), g.k);
    let taps = k * k * k;
    let mut gin = vec![T::zero(); g.cin * isz];
    for ci in 0..g.cin {
        let gin_c = &mut gin[ci * isz..(ci + 1) * isz];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = (ci * taps + (kd * k + kh) * k + kw) * osz;
                    let src = &col[row..row + osz];
                    for_each_row(g, kd, kh, kw, |orow, irow, w0, w1| {
                        let o = &src[orow + w0..orow + w1];
                        if g.stride == 1 {
                            let i = &mut gin_c[irow + w0 + kw - g.pad..irow + w1 + kw - g.pad];
                            for (a, b) in i.iter_mut().zip(o) {
                                *a += *b;
                            }
                        } else {
                            for (j, b) in o.iter().enumerate() {
                                gin_c[irow + (w0 + j) * g.stride + kw - g.pad] += *b;
                            }
                        }
                    });
                }
            }
        }
    }
    gin
}


/// Direct shift-and-accumulate kernels. On wide stride-1 rows with few
/// channels they beat the unfold + GEMM path, which is memory bound there.
mod direct {
    use super::{for_each_row, ConvGeom, Float};

    pub fn forward<T: Float>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
        let (isz, osz, k) = (g.in_len(), g.out_len(), g.k);
        let taps = k * k * k;
        let mut out = vec![T::zero(); g.cout * osz];
        for co in 0..g.cout {
            let out_c = &mut out[co * osz..(co + 1) * osz];
            if let Some(b) = bias {
                out_c.iter_mut().for_each(|v| *v = b[co]);
            }
            for ci in 0..g.cin {
                let in_c = &x[ci * isz..(ci + 1) * isz];
                let wk = &w[(co * g.cin + ci) * taps..][..taps];
                for kd in 0..k {
                    for kh in 0..k {
                        for kw in 0..k {
                            let wv = wk[(kd * k + kh) * k + kw];
                            for_each_row(g, kd, kh, kw, |orow, irow, w0, w1| {
                                let o = &mut out_c[orow + w0..orow + w1];
                                let i = &in_c[irow + w0 + kw - g.pad..irow + w1 + kw - g.pad];
                                for (a, b) in o.iter_mut().zip(i) {
                                    *a += wv * *b;
                                }
                            });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward_input<T: Float>(gout: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
        let (isz, osz, k) = (g.in_len(), g.out_len(), g.k);
        let taps = k * k * k;
        let mut gin = vec![T::zero(); g.cin * isz];
        for ci in 0..g.cin {
            let gin_c = &mut gin[ci * isz..(ci + 1) * isz];
            for co in 0..g.cout {
                let go_c = &gout[co * osz..(co + 1) * osz];
                let wk = &w[(co * g.cin + ci) * taps..][..taps];
                for kd in 0..k {
                    for kh in 0..k {
                        for kw in 0..k {
                            let wv = wk[(kd * k + kh) * k + kw];
                            for_each_row(g, kd, kh, kw, |orow, irow, w0, w1| {
                                let o = &go_c[orow + w0..orow + w1];
                                let i = &mut gin_c[irow + w0 + kw - g.pad..irow + w1 + kw - g.pad];
                                for (a, b) in i.iter_mut().zip(o) {
                                    *a += wv * *b;
                                }
                            });
                        }
                    }
                }
            }
        }
        gin
    }

    pub fn backward_weight<T: Float>(gout: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
        let (isz, osz, k) = (g.in_len(), g.out_len(), g.k);
        let taps = k * k * k;
        let mut gw = vec![T::zero(); g.cout * g.cin * taps];
        for co in 0..g.cout {
            let go_c = &gout[co * osz..(co + 1) * osz];
            for ci in 0..g.cin {
                let in_c = &x[ci * isz..(ci + 1) * isz];
                for kd in 0..k {
                    for kh in 0..k {
                        for kw in 0..k {
                            let mut acc = 0.0f64;
                            for_each_row(g, kd, kh, kw, |orow, irow, w0, w1| {
                                let o = &go_c[orow + w0..orow + w1];
                                let i = &in_c[irow + w0 + kw - g.pad..irow + w1 + kw - g.pad];
                                let mut s = T::zero();
                                for (a, b) in o.iter().zip(i) {
                                    s += *a * *b;
                                }
                                acc += s.as_f64();
                            });
                            gw[((co * g.cin + ci) * taps) + (kd * k + kh) * k + kw] = T::of(acc);
                        }
                    }
                }
            }
        }
        gw
    }
}

/// Picks the direct kernels for wide stride-1 rows with small channel products.
fn use_direct(g: &ConvGeom) -> bool {
    g.stride == 1 && g.k > 1 && g.out[2] >= 16 && g.cin * g.cout <= 32
}

pub(crate) fn conv3d_forward<T: Float>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    if use_direct(g) {
        return direct::forward(x, w, bias, g);
    }
    let osz = g.out_len();
    let kdim = g.cin * g.k * g.k * g.k;
    let col = im2col(x, g);
    let mut out = vec![T::zero(); g.cout * osz];
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(osz).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b[co]);
        }
    }
    T::gemm(
        g.cout,
        kdim,
        osz,
        T::one(),
        Strided::row_major(w, kdim),
        Strided::row_major(&col, osz),
        T::one(),
        &mut out,
        osz,
    );
    out
}

pub(crate) fn conv3d_backward_input<T: Float>(gout: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    if use_direct(g) {
        return direct::backward_input(gout, w, g);
    }
    let osz = g.out_len();
    let kdim = g.cin * g.k * g.k * g.k;
    let mut dcol = vec![T::zero(); kdim * osz];
    T::gemm(
        kdim,
        g.cout,
        osz,
        T::one(),
        Strided::transposed(w, kdim),
        Strided::row_major(gout, osz),
        T::zero(),
        &mut dcol,
        osz,
    );
    if is_pointwise(g) {
        dcol
    } else {
        col2im(&dcol, g)
    }
}

/// Kernel and bias gradients. The bias reduction runs in `f64`.
pub(crate) fn conv3d_backward_weight<T: Float>(gout: &[T], x: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let osz = g.out_len();
    let kdim = g.cin * g.k * g.k * g.k;
    let gb = gout
        .chunks(osz)
        .map(|c| T::of(c.iter().map(|v| v.as_f64()).sum()))
        .collect();
    if use_direct(g) {
        return (direct::backward_weight(gout, x, g), gb);
    }
    let col = im2col(x, g);
    let mut gw = vec![T::zero(); g.cout * kdim];
    T::gemm(
        g.cout,
        osz,
        kdim,
        T::one(),
        Strided::row_major(gout, osz),
        Strided::transposed(&col, osz),
        T::zero(),
        &mut gw,
        kdim,
    );
    (gw, gb)
}

/// Nearest-neighbour ×2 upsampling of `[C, D, H, W]`.
pub(crate) fn upsample2_forward<T: Float>(x: &[T], c: usize, dims: [usize; 3]) -> Vec<T> {
    let [d, h, w] = dims;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut out = vec![T::zero(); c * od * oh * ow];
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                let src = ((ch * d + z / 2) * h + y / 2) * w;
                let dst = ((ch * od + z) * oh + y) * ow;
                for xx in 0..ow {
                    out[dst + xx] = x[src + xx / 2];
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample2_forward`]: sums each 2×2×2 block.
pub(crate) fn upsample2_backward<T: Float>(gout: &[T], c: usize, dims: [usize; 3]) -> Vec<T> {
    let [d, h, w] = dims;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut gin = vec![T::zero(); c * d * h * w];
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                let dst = ((ch * d + z / 2) * h + y / 2) * w;
                let src = ((ch * od + z) * oh + y) * ow;
                for xx in 0..ow {
                    gin[dst + xx / 2] += gout[src + xx];
                }
            }
        }
    }
    gin
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 7-loop reference with explicit bounds checks.
    fn naive(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let k = g.k;
        let mut out = vec![0.0; g.cout * g.out.iter().product::<usize>()];
        let [id, ih, iw] = g.inp;
        let [od, oh, ow] = g.out;
        for co in 0..g.cout {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = 0.0;
                        for ci in 0..g.cin {
                            for a in 0..k {
                                for b in 0..k {
                                    for c in 0..k {
                                        let pz = (z * g.stride + a) as isize - g.pad as isize;
                                        let py = (y * g.stride + b) as isize - g.pad as isize;
                                        let px = (xx * g.stride + c) as isize - g.pad as isize;
                                        if pz < 0 || py < 0 || px < 0 || pz >= id as isize || py >= ih as isize || px >= iw as isize {
                                            continue;
                                        }
                                        let xi = ((ci * id + pz as usize) * ih + py as usize) * iw + px as usize;
                                        s += x[xi] * w[(((co * g.cin + ci) * k + a) * k + b) * k + c];
                                    }
                                }
                            }
                        }
                        out[((co * od + z) * oh + y) * ow + xx] = s;
                    }
                }
            }
        }
        out
    }

    fn geom(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, inp: [usize; 3]) -> ConvGeom {
        let out = inp.map(|n| ConvGeom::out_extent(n, k, stride, pad).unwrap());
        ConvGeom { cin, cout, k, stride, pad, inp, out }
    }

    fn ramp(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * 0.37 + seed).sin() * 1.3).collect()
    }

    #[test]
    fn forward_matches_naive_over_geometries() {
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 1, 0), (5, 2, 2), (3, 2, 0)] {
            let g = geom(2, 3, k, s, p, [5, 6, 7]);
            let x = ramp(2 * 5 * 6 * 7, 0.1);
            let w = ramp(3 * 2 * k * k * k, 0.7);
            let fast = conv3d_forward(&x, &w, None, &g);
            let slow = naive(&x, &w, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s} p={p}");
            }
        }
    }

    #[test]
    fn backward_passes_are_adjoint() {
        // <conv(x), y> = <x, conv^T(y)> and = <w, dW(y, x)>
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 2, 2)] {
            let g = geom(2, 3, k, s, p, [6, 5, 4]);
            let x = ramp(g.cin * 120, 0.3);
            let w = ramp(g.cout * g.cin * k * k * k, 1.1);
            let y = ramp(g.cout * g.out.iter().product::<usize>(), 2.0);
            let fx = conv3d_forward(&x, &w, None, &g);
            let lhs: f64 = fx.iter().zip(&y).map(|(a, b)| a * b).sum();
            let gi = conv3d_backward_input(&y, &w, &g);
            let rhs: f64 = gi.iter().zip(&x).map(|(a, b)| a * b).sum();
            let (gw, _) = conv3d_backward_weight(&y, &x, &g);
            let rhs2: f64 = gw.iter().zip(&w).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
            assert!((lhs - rhs2).abs() < 1e-9 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn direct_and_gemm_paths_agree() {
        let g = geom(2, 3, 3, 1, 1, [4, 5, 17]);
        assert!(use_direct(&g));
        let x = ramp(2 * 4 * 5 * 17, 0.2);
        let w = ramp(3 * 2 * 27, 0.9);
        let y = ramp(3 * 4 * 5 * 17, 1.7);
        let slow = naive(&x, &w, &g);
        for (a, b) in direct::forward(&x, &w, None, &g).iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
        let gi = direct::backward_input(&y, &w, &g);
        let fx = conv3d_forward(&x, &w, None, &g);
        let lhs: f64 = fx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = gi.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
        let gw = direct::backward_weight(&y, &x, &g);
        let rhs2: f64 = gw.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs2).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn upsample_adjoint() {
        let x = ramp(2 * 2 * 3 * 2, 0.0);
        let y = ramp(2 * 4 * 6 * 4, 1.0);
        let ux = upsample2_forward(&x, 2, [2, 3, 2]);
        let lhs: f64 = ux.iter().zip(&y).map(|(a, b)| a * b).sum();
        let gy = upsample2_backward(&y, 2, [2, 3, 2]);
        let rhs: f64 = gy.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
