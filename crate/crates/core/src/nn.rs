//! Differentiable layers used by the generator, each with a hand-written
//! backward pass. Parameters live in one flat buffer owned by the generator;
//! layers only remember their offsets into it.

use crate::image::{reflect_index, Image};
use crate::scalar::Scalar;

pub(crate) const LEAKY_SLOPE: f64 = 0.2;
pub(crate) const BN_EPS: f64 = 1e-5;

/// Hands out consecutive ranges of the flat parameter buffer.
#[derive(Default)]
pub(crate) struct ParamAlloc {
    len: usize,
}

impl ParamAlloc {
    pub fn take(&mut self, n: usize) -> usize {
        let off = self.len;
        self.len += n;
        off
    }

    pub fn len(&self) -> usize {
        self.len
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub w: usize,
    pub b: usize,
}

impl Conv {
    pub fn new(alloc: &mut ParamAlloc, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let w = alloc.take(cout * cin * k * k);
        let b = alloc.take(cout);
        Conv {
            cin,
            cout,
            k,
            stride,
            w,
            b,
        }
    }

    fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and bias.
    pub fn init<T: Scalar>(&self, params: &mut [T], mut uniform: impl FnMut() -> f64) {
        let bound = 1.0 / (self.fan_in() as f64).sqrt();
        let nw = self.cout * self.fan_in();
        for p in &mut params[self.w..self.w + nw] {
            *p = T::lit((2.0 * uniform() - 1.0) * bound);
        }
        for p in &mut params[self.b..self.b + self.cout] {
            *p = T::lit((2.0 * uniform() - 1.0) * bound);
        }
    }

    fn out_size(&self, n: usize) -> usize {
        let pad = self.k / 2;
        (n + 2 * pad - self.k) / self.stride + 1
    }

    /// Reflected source row for every `(ky, oy)` and column for every
    /// `(kx, ox)`.
    fn taps(&self, h: usize, w: usize) -> Taps {
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let pad = (self.k / 2) as isize;
        let src = |k: usize, o: usize, n: usize| {
            reflect_index((o * self.stride) as isize + k as isize - pad, n)
        };
        let rows = (0..self.k).flat_map(|ky| (0..ho).map(move |oy| (ky, oy))).map(|(ky, oy)| src(ky, oy, h)).collect();
        let cols: Vec<usize> =
            (0..self.k).flat_map(|kx| (0..wo).map(move |ox| (kx, ox))).map(|(kx, ox)| src(kx, ox, w)).collect();
        // Output columns whose source needs no reflection form one run.
        let runs = (0..self.k)
            .map(|kx| {
                let inside = |ox: usize| {
                    let s = (ox * self.stride) as isize + kx as isize - pad;
                    s >= 0 && (s as usize) < w
                };
                let lo = (0..wo).find(|&ox| inside(ox)).unwrap_or(wo);
                let hi = (lo..wo).find(|&ox| !inside(ox)).unwrap_or(wo);
                (lo, hi)
            })
            .collect();
        Taps { ho, wo, w, stride: self.stride, rows, cols, runs }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    /// Column matrix with `cin * k * k` rows of `ho * wo` entries.
    fn im2col<T: Scalar>(&self, x: &Image<T>, taps: &Taps) -> Vec<T> {
        let n = taps.ho * taps.wo;
        let mut col = vec![T::zero(); self.fan_in() * n];
        let mut blocks = col.chunks_exact_mut(n);
        for ci in 0..self.cin {
            let plane = x.plane(ci);
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let dst = blocks.next().expect("one block per tap");
                    taps.gather(ky, kx, plane, dst);
                }
            }
        }
        col
    }

    /// Returns the output and the column matrix the backward pass needs
    /// (empty for pointwise convolutions, which read the input directly).
    pub fn forward<T: Scalar>(&self, params: &[T], x: &Image<T>) -> (Image<T>, Vec<T>) {
        debug_assert_eq!(x.channels(), self.cin);
        let (h, w) = (x.height(), x.width());
        let kk = self.fan_in();
        let weights = &params[self.w..self.w + self.cout * kk];
        let bias = &params[self.b..self.b + self.cout];
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let n = ho * wo;
        let mut out = Image::zeros(self.cout, ho, wo);
        let data = out.data_mut();
        for (co, &b) in bias.iter().enumerate() {
            data[co * n..(co + 1) * n].fill(b);
        }
        if self.is_pointwise() {
            T::gemm(self.cout, kk, n, T::one(), weights, kk as isize, 1, x.data(), n as isize, 1, T::one(), data, n as isize, 1);
            return (out, Vec::new());
        }
        let col = self.im2col(x, &self.taps(h, w));
        T::gemm(self.cout, kk, n, T::one(), weights, kk as isize, 1, &col, n as isize, 1, T::one(), data, n as isize, 1);
        (out, col)
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_input_grad` is set. `col` is what `forward` returned for `x`.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        grads: &mut [T],
        x: &Image<T>,
        col: &[T],
        grad_out: &Image<T>,
        need_input_grad: bool,
    ) -> Option<Image<T>> {
        let (h, w) = (x.height(), x.width());
        let kk = self.fan_in();
        let n = grad_out.pixels();
        let go = grad_out.data();

        for co in 0..self.cout {
            grads[self.b + co] += go[co * n..(co + 1) * n].iter().copied().sum::<T>();
        }
        let weights = &params[self.w..self.w + self.cout * kk];
        let dw = &mut grads[self.w..self.w + self.cout * kk];
        let col = if self.is_pointwise() { x.data() } else { col };
        debug_assert_eq!(col.len(), kk * n);

        // dW += dOut (cout x n) * col^T (n x kk)
        T::gemm(self.cout, n, kk, T::one(), go, n as isize, 1, col, 1, n as isize, T::one(), dw, kk as isize, 1);
        if !need_input_grad {
            return None;
        }
        let mut dx = Image::zeros(self.cin, h, w);
        if self.is_pointwise() {
            T::gemm(kk, self.cout, n, T::one(), weights, 1, kk as isize, go, n as isize, 1, T::zero(), dx.data_mut(), n as isize, 1);
            return Some(dx);
        }
        // dCol = W^T (kk x cout) * dOut (cout x n)
        let mut dcol = vec![T::zero(); kk * n];
        T::gemm(kk, self.cout, n, T::one(), weights, 1, kk as isize, go, n as isize, 1, T::zero(), &mut dcol, n as isize, 1);
        let taps = self.taps(h, w);
        let mut blocks = dcol.chunks_exact(n);
        for ci in 0..self.cin {
            let plane = dx.plane_mut(ci);
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let src = blocks.next().expect("one block per tap");
                    taps.scatter_add(ky, kx, src, plane);
                }
            }
        }
        Some(dx)
    }
}

struct Taps {
    ho: usize,
    wo: usize,
    w: usize,
    stride: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
    /// Per `kx`, the output column range `[lo, hi)` read without reflection.
    runs: Vec<(usize, usize)>,
}

impl Taps {
    /// `dst[oy, ox] = plane[rows[ky, oy], cols[kx, ox]]`.
    fn gather<T: Copy>(&self, ky: usize, kx: usize, plane: &[T], dst: &mut [T]) {
        let rows = &self.rows[ky * self.ho..(ky + 1) * self.ho];
        let cols = &self.cols[kx * self.wo..(kx + 1) * self.wo];
        let (lo, hi) = self.runs[kx];
        for (oy, &sy) in rows.iter().enumerate() {
            let src = &plane[sy * self.w..(sy + 1) * self.w];
            let out = &mut dst[oy * self.wo..(oy + 1) * self.wo];
            for ox in (0..lo).chain(hi..self.wo) {
                out[ox] = src[cols[ox]];
            }
            if lo < hi {
                let s0 = cols[lo];
                if self.stride == 1 {
                    out[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                } else {
                    for (o, &v) in out[lo..hi].iter_mut().zip(src[s0..].iter().step_by(self.stride)) {
                        *o = v;
                    }
                }
            }
        }
    }

    /// Adjoint of `gather`.
    fn scatter_add<T: Scalar>(&self, ky: usize, kx: usize, src: &[T], plane: &mut [T]) {
        let rows = &self.rows[ky * self.ho..(ky + 1) * self.ho];
        let cols = &self.cols[kx * self.wo..(kx + 1) * self.wo];
        let (lo, hi) = self.runs[kx];
        for (oy, &sy) in rows.iter().enumerate() {
            let dst = &mut plane[sy * self.w..(sy + 1) * self.w];
            let g = &src[oy * self.wo..(oy + 1) * self.wo];
            for ox in (0..lo).chain(hi..self.wo) {
                dst[cols[ox]] += g[ox];
            }
            if lo < hi {
                let s0 = cols[lo];
                if self.stride == 1 {
                    for (d, &v) in dst[s0..s0 + hi - lo].iter_mut().zip(&g[lo..hi]) {
                        *d += v;
                    }
                } else {
                    for (d, &v) in dst[s0..].iter_mut().step_by(self.stride).zip(&g[lo..hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Per-channel normalization over the spatial extent (batch of one, always
/// in training mode) with learnable scale and shift.
#[derive(Clone, Debug)]
pub(crate) struct BatchNorm {
    pub c: usize,
    pub gamma: usize,
    pub beta: usize,
}

pub(crate) struct BnCache<T> {
    xhat: Image<T>,
    inv_std: Vec<T>,
}

impl BatchNorm {
    pub fn new(alloc: &mut ParamAlloc, c: usize) -> Self {
        BatchNorm {
            c,
            gamma: alloc.take(c),
            beta: alloc.take(c),
        }
    }

    pub fn init<T: Scalar>(&self, params: &mut [T]) {
        params[self.gamma..self.gamma + self.c].fill(T::one());
        params[self.beta..self.beta + self.c].fill(T::zero());
    }

    pub fn forward<T: Scalar>(&self, params: &[T], x: &Image<T>) -> (Image<T>, BnCache<T>) {
        let n = x.pixels();
        let nf = T::from_usize_lossy(n);
        let eps = T::lit(BN_EPS);
        let mut xhat = x.clone();
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(self.c);
        for c in 0..self.c {
            let plane = x.plane(c);
            let mean = plane.iter().copied().sum::<T>() / nf;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            let (g, b) = (params[self.gamma + c], params[self.beta + c]);
            let xh = xhat.plane_mut(c);
            for v in xh.iter_mut() {
                *v = (*v - mean) * is;
            }
            for (o, &h) in out.plane_mut(c).iter_mut().zip(xhat.plane(c)) {
                *o = g * h + b;
            }
        }
        (out, BnCache { xhat, inv_std })
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        grads: &mut [T],
        cache: &BnCache<T>,
        grad_out: &Image<T>,
    ) -> Image<T> {
        let n = grad_out.pixels();
        let nf = T::from_usize_lossy(n);
        let mut dx = Image::zeros(self.c, grad_out.height(), grad_out.width());
        for c in 0..self.c {
            let dy = grad_out.plane(c);
            let xh = cache.xhat.plane(c);
            let sum_dy: T = dy.iter().copied().sum();
            let sum_dy_xh: T = dy.iter().zip(xh).map(|(&a, &b)| a * b).sum();
            grads[self.gamma + c] += sum_dy_xh;
            grads[self.beta + c] += sum_dy;
            let scale = params[self.gamma + c] * cache.inv_std[c] / nf;
            for ((d, &g), &h) in dx.plane_mut(c).iter_mut().zip(dy).zip(xh) {
                *d = scale * (nf * g - sum_dy - h * sum_dy_xh);
            }
        }
        dx
    }
}

pub(crate) fn leaky_relu<T: Scalar>(x: &Image<T>) -> Image<T> {
    let slope = T::lit(LEAKY_SLOPE);
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

/// Gradient through leaky ReLU given the pre-activation values.
pub(crate) fn leaky_relu_backward<T: Scalar>(pre: &Image<T>, grad_out: &Image<T>) -> Image<T> {
    let slope = T::lit(LEAKY_SLOPE);
    pre.zip_map(grad_out, |p, g| if p > T::zero() { g } else { g * slope })
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

/// Doubles the spatial size.
pub(crate) fn upsample2<T: Scalar>(x: &Image<T>, mode: UpsampleMode) -> Image<T> {
    let (c, h, w) = x.shape();
    match mode {
        UpsampleMode::Nearest => Image::from_fn(c, 2 * h, 2 * w, |ci, y, xx| x.get(ci, y / 2, xx / 2)),
        UpsampleMode::Bilinear => {
            let ys = bilinear_taps(h);
            let xs = bilinear_taps(w);
            let mut out = Image::zeros(c, 2 * h, 2 * w);
            for ci in 0..c {
                let src = x.plane(ci);
                let dst = out.plane_mut(ci);
                for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                    let wy = T::lit(wy);
                    for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                        let wx = T::lit(wx);
                        let top = src[y0 * w + x0] * (T::one() - wx) + src[y0 * w + x1] * wx;
                        let bot = src[y1 * w + x0] * (T::one() - wx) + src[y1 * w + x1] * wx;
                        dst[oy * 2 * w + ox] = top * (T::one() - wy) + bot * wy;
                    }
                }
            }
            out
        }
    }
}

pub(crate) fn upsample2_backward<T: Scalar>(
    grad_out: &Image<T>,
    h: usize,
    w: usize,
    mode: UpsampleMode,
) -> Image<T> {
    let c = grad_out.channels();
    let mut dx = Image::zeros(c, h, w);
    match mode {
        UpsampleMode::Nearest => {
            for ci in 0..c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        let g = grad_out.get(ci, y, xx);
                        let i = dx.index(ci, y / 2, xx / 2);
                        dx.data_mut()[i] += g;
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ys = bilinear_taps(h);
            let xs = bilinear_taps(w);
            for ci in 0..c {
                let go = grad_out.plane(ci);
                let dst = dx.plane_mut(ci);
                for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                    let wy = T::lit(wy);
                    for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                        let wx = T::lit(wx);
                        let g = go[oy * 2 * w + ox];
                        let gt = g * (T::one() - wy);
                        let gb = g * wy;
                        dst[y0 * w + x0] += gt * (T::one() - wx);
                        dst[y0 * w + x1] += gt * wx;
                        dst[y1 * w + x0] += gb * (T::one() - wx);
                        dst[y1 * w + x1] += gb * wx;
                    }
                }
            }
        }
    }
    dx
}

/// Half-pixel-centred source taps for a factor-2 bilinear upsample.
fn bilinear_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Centered spatial crop to `(h, w)`; returns the crop and its offsets.
pub(crate) fn center_crop<T: Scalar>(x: &Image<T>, h: usize, w: usize) -> (Image<T>, usize, usize) {
    let top = (x.height() - h) / 2;
    let left = (x.width() - w) / 2;
    if top == 0 && left == 0 && x.height() == h && x.width() == w {
        return (x.clone(), 0, 0);
    }
    (x.crop(top, left, h, w), top, left)
}

pub(crate) fn center_crop_backward<T: Scalar>(
    grad: &Image<T>,
    full_h: usize,
    full_w: usize,
    top: usize,
    left: usize,
) -> Image<T> {
    if grad.height() == full_h && grad.width() == full_w {
        return grad.clone();
    }
    let mut dx = Image::zeros(grad.channels(), full_h, full_w);
    for c in 0..grad.channels() {
        for y in 0..grad.height() {
            for x in 0..grad.width() {
                dx.set(c, y + top, x + left, grad.get(c, y, x));
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64) / ((1u64 << 53) as f64)
    }

    fn rand_image(c: usize, h: usize, w: usize, seed: &mut u64) -> Image<f64> {
        Image::from_fn(c, h, w, |_, _, _| lcg(seed) - 0.5)
    }

    /// Direct convolution with reflection padding.
    fn naive_conv(conv: &Conv, params: &[f64], x: &Image<f64>) -> Image<f64> {
        let pad = (conv.k / 2) as isize;
        let ho = conv.out_size(x.height());
        let wo = conv.out_size(x.width());
        Image::from_fn(conv.cout, ho, wo, |co, oy, ox| {
            let mut acc = params[conv.b + co];
            for ci in 0..conv.cin {
                for ky in 0..conv.k {
                    for kx in 0..conv.k {
                        let sy = reflect_index((oy * conv.stride + ky) as isize - pad, x.height());
                        let sx = reflect_index((ox * conv.stride + kx) as isize - pad, x.width());
                        let wi = conv.w + ((co * conv.cin + ci) * conv.k + ky) * conv.k + kx;
                        acc += params[wi] * x.get(ci, sy, sx);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut seed = 7;
        for &(k, stride, h, w) in &[(3, 1, 5, 6), (3, 2, 7, 5), (1, 1, 4, 4), (5, 1, 6, 6), (3, 2, 2, 3)] {
            let mut alloc = ParamAlloc::default();
            let conv = Conv::new(&mut alloc, 2, 3, k, stride);
            let params: Vec<f64> = (0..alloc.len()).map(|_| lcg(&mut seed) - 0.5).collect();
            let x = rand_image(2, h, w, &mut seed);
            let (fast, _) = conv.forward(&params, &x);
            let slow = naive_conv(&conv, &params, &x);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "k={k} s={stride}");
        }
    }

    /// Checks `<grad_out, d f(x)>` against finite differences for every
    /// parameter and input element.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut seed = 11;
        for &(k, stride) in &[(3, 1), (3, 2), (1, 1)] {
            let mut alloc = ParamAlloc::default();
            let conv = Conv::new(&mut alloc, 2, 2, k, stride);
            let mut params: Vec<f64> = (0..alloc.len()).map(|_| lcg(&mut seed) - 0.5).collect();
            let mut x = rand_image(2, 5, 4, &mut seed);
            let (out, col) = conv.forward(&params, &x);
            let go = rand_image(out.channels(), out.height(), out.width(), &mut seed);
            let objective = |p: &[f64], x: &Image<f64>| -> f64 {
                let (o, _) = conv.forward(p, x);
                o.data().iter().zip(go.data()).map(|(a, b)| a * b).sum()
            };
            let mut grads = vec![0.0; params.len()];
            let dx = conv.backward(&params, &mut grads, &x, &col, &go, true).unwrap();
            let h = 1e-6;
            for i in 0..params.len() {
                let orig = params[i];
                params[i] = orig + h;
                let fp = objective(&params, &x);
                params[i] = orig - h;
                let fm = objective(&params, &x);
                params[i] = orig;
                assert!(((fp - fm) / (2.0 * h) - grads[i]).abs() < 1e-7);
            }
            for i in 0..x.len() {
                let orig = x.data()[i];
                x.data_mut()[i] = orig + h;
                let fp = objective(&params, &x);
                x.data_mut()[i] = orig - h;
                let fm = objective(&params, &x);
                x.data_mut()[i] = orig;
                assert!(((fp - fm) / (2.0 * h) - dx.data()[i]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let mut seed = 3;
        let mut alloc = ParamAlloc::default();
        let bn = BatchNorm::new(&mut alloc, 2);
        let mut params: Vec<f64> = (0..alloc.len()).map(|_| lcg(&mut seed) + 0.5).collect();
        let mut x = rand_image(2, 3, 4, &mut seed);
        let go = rand_image(2, 3, 4, &mut seed);
        let objective = |p: &[f64], x: &Image<f64>| -> f64 {
            let (o, _) = bn.forward(p, x);
            o.data().iter().zip(go.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = bn.forward(&params, &x);
        let mut grads = vec![0.0; params.len()];
        let dx = bn.backward(&params, &mut grads, &cache, &go);
        let h = 1e-6;
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + h;
            let fp = objective(&params, &x);
            params[i] = orig - h;
            let fm = objective(&params, &x);
            params[i] = orig;
            assert!(((fp - fm) / (2.0 * h) - grads[i]).abs() < 1e-6);
        }
        for i in 0..x.len() {
            let orig = x.data()[i];
            x.data_mut()[i] = orig + h;
            let fp = objective(&params, &x);
            x.data_mut()[i] = orig - h;
            let fm = objective(&params, &x);
            x.data_mut()[i] = orig;
            assert!(((fp - fm) / (2.0 * h) - dx.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let mut seed = 5;
        for mode in [UpsampleMode::Nearest, UpsampleMode::Bilinear] {
            let x = rand_image(2, 3, 5, &mut seed);
            let g = rand_image(2, 6, 10, &mut seed);
            let lhs: f64 = upsample2(&x, mode).data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let dx = upsample2_backward(&g, 3, 5, mode);
            let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_upsample_preserves_constants() {
        let x = Image::<f64>::filled(1, 3, 4, 0.25);
        let up = upsample2(&x, UpsampleMode::Bilinear);
        assert!(up.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}
