use super::{kinks, Real, Shape, Tensor4};
use crate::error::{Error, Result};

/// Borrowed view of a square convolution kernel `(C_out, C_in, k, k)` with an
/// optional per-output-channel bias. Stride is 1 and zero padding is
/// `(k - 1) / 2`, so spatial dimensions are preserved.
#[derive(Debug, Clone, Copy)]
pub struct ConvKernel<'a, T> {
    weight: &'a Tensor4<T>,
    bias: Option<&'a [T]>,
}

impl<'a, T: Real> ConvKernel<'a, T> {
    pub fn new(weight: &'a Tensor4<T>, bias: Option<&'a [T]>) -> Result<Self> {
        let s = weight.shape();
        if s.h != s.w {
            return Err(Error::config(format!("kernel must be square, got {s}")));
        }
        if s.h.is_multiple_of(2) {
            return Err(Error::config(format!(
                "kernel size must be odd for same padding, got {}",
                s.h
            )));
        }
        if let Some(b) = bias {
            if b.len() != s.n {
                return Err(Error::shape(format!(
                    "bias length {} does not match {} output channels",
                    b.len(),
                    s.n
                )));
            }
        }
        Ok(ConvKernel { weight, bias })
    }

    pub fn weight(&self) -> &'a Tensor4<T> {
        self.weight
    }

    pub fn bias(&self) -> Option<&'a [T]> {
        self.bias
    }

    pub fn size(&self) -> usize {
        self.weight.shape().h
    }

    pub fn padding(&self) -> usize {
        (self.size() - 1) / 2
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    fn check_input(&self, x: Shape) -> Result<()> {
        if x.c != self.in_channels() {
            return Err(Error::shape(format!(
                "conv expects {} input channels, input has shape {x}",
                self.in_channels()
            )));
        }
        Ok(())
    }
}

/// Output positions `[lo, hi)` along one axis for which `pos + d` stays in `[0, len)`.
#[inline]
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).clamp(0, len as isize) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

/// Same-padded, stride-1 cross-correlation plus bias.
pub fn conv2d<T: Real>(x: &Tensor4<T>, kernel: &ConvKernel<'_, T>) -> Result<Tensor4<T>> {
    let xs = x.shape();
    kernel.check_input(xs)?;
    let (c_in, c_out, k, p) = (
        kernel.in_channels(),
        kernel.out_channels(),
        kernel.size(),
        kernel.padding() as isize,
    );
    let (h, w) = (xs.h, xs.w);
    let wt = kernel.weight.data();
    let mut out = Tensor4::zeros(Shape::new(xs.n, c_out, h, w));
    let plane = h * w;
    let od = out.data_mut();
    for n in 0..xs.n {
        for co in 0..c_out {
            let o = &mut od[(n * c_out + co) * plane..][..plane];
            if let Some(b) = kernel.bias {
                o.fill(b[co]);
            }
            for ci in 0..c_in {
                let ip = x.plane(n, ci);
                for ky in 0..k {
                    let dy = ky as isize - p;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..k {
                        let wv = wt[((co * c_in + ci) * k + ky) * k + kx];
                        let dx = kx as isize - p;
                        let (x0, x1) = valid_range(w, dx);
                        if x0 == x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let iy = (y as isize + dy) as usize;
                            let orow = &mut o[y * w + x0..y * w + x1];
                            let irow = &ip[iy * w + (x0 as isize + dx) as usize..][..x1 - x0];
                            for (ov, &iv) in orow.iter_mut().zip(irow) {
                                *ov = *ov + wv * iv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor4<T>,
    kernel: &ConvKernel<'_, T>,
    grad_out: &Tensor4<T>,
) -> Result<ConvGrads<T>> {
    let xs = x.shape();
    kernel.check_input(xs)?;
    let (c_in, c_out, k, p) = (
        kernel.in_channels(),
        kernel.out_channels(),
        kernel.size(),
        kernel.padding() as isize,
    );
    let (h, w) = (xs.h, xs.w);
    let expected = Shape::new(xs.n, c_out, h, w);
    if grad_out.shape() != expected {
        return Err(Error::shape(format!(
            "conv grad has shape {}, expected {expected}",
            grad_out.shape()
        )));
    }
    let wt = kernel.weight.data();
    let plane = h * w;
    let mut gx = Tensor4::zeros(xs);
    let mut gw = Tensor4::zeros(kernel.weight.shape());
    let mut gb = vec![T::zero(); c_out];
    {
        let gxd = gx.data_mut();
        let gwd = gw.data_mut();
        for n in 0..xs.n {
            for co in 0..c_out {
                let go = grad_out.plane(n, co);
                gb[co] = gb[co] + go.iter().copied().sum();
                for ci in 0..c_in {
                    let ip = x.plane(n, ci);
                    let gi = &mut gxd[(n * c_in + ci) * plane..][..plane];
                    for ky in 0..k {
                        let dy = ky as isize - p;
                        let (y0, y1) = valid_range(h, dy);
                        for kx in 0..k {
                            let wi = ((co * c_in + ci) * k + ky) * k + kx;
                            let wv = wt[wi];
                            let dx = kx as isize - p;
                            let (x0, x1) = valid_range(w, dx);
                            if x0 == x1 {
                                continue;
                            }
                            let mut acc = T::zero();
                            for y in y0..y1 {
                                let iy = (y as isize + dy) as usize;
                                let ix0 = (x0 as isize + dx) as usize;
                                let grow = &go[y * w + x0..y * w + x1];
                                let irow = &ip[iy * w + ix0..][..x1 - x0];
                                let gir = &mut gi[iy * w + ix0..][..x1 - x0];
                                for ((&g, &iv), gv) in grow.iter().zip(irow).zip(gir.iter_mut()) {
                                    acc = acc + g * iv;
                                    *gv = *gv + wv * g;
                                }
                            }
                            gwd[wi] = gwd[wi] + acc;
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Over `(H, W)`, producing `(N, C, 1, 1)`.
    Spatial,
    /// Over `C`, producing `(N, 1, H, W)`.
    Channel,
}

fn reduced_shape(s: Shape, axis: Axis) -> Result<Shape> {
    match axis {
        Axis::Spatial if s.h == 0 || s.w == 0 => Err(Error::shape(format!(
            "cannot reduce empty spatial axis of {s}"
        ))),
        Axis::Channel if s.c == 0 => Err(Error::shape(format!(
            "cannot reduce empty channel axis of {s}"
        ))),
        Axis::Spatial => Ok(Shape::new(s.n, s.c, 1, 1)),
        Axis::Channel => Ok(Shape::new(s.n, 1, s.h, s.w)),
    }
}

/// First index of the maximum in scan order.
#[inline]
fn argmax_strided<T: Real>(data: &[T], start: usize, stride: usize, count: usize) -> usize {
    let mut best = 0;
    let mut best_v = data[start];
    for i in 1..count {
        let v = data[start + i * stride];
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

pub fn reduce<T: Real>(x: &Tensor4<T>, kind: ReduceKind, axis: Axis) -> Result<Tensor4<T>> {
    let s = x.shape();
    let os = reduced_shape(s, axis)?;
    let d = x.data();
    let mut out = Tensor4::zeros(os);
    let plane = s.plane();
    match axis {
        Axis::Spatial => {
            let inv = T::one() / T::of(plane as f64);
            for nc in 0..s.n * s.c {
                let p = &d[nc * plane..][..plane];
                out.data_mut()[nc] = match kind {
                    ReduceKind::Mean => p.iter().copied().sum::<T>() * inv,
                    ReduceKind::Max => p[argmax_strided(p, 0, 1, plane)],
                };
            }
            if kind == ReduceKind::Max {
                kinks::record(|hs| {
                    for nc in 0..s.n * s.c {
                        hs.push(argmax_strided(d, nc * plane, 1, plane) as u64);
                    }
                });
            }
        }
        Axis::Channel => {
            let inv = T::one() / T::of(s.c as f64);
            for n in 0..s.n {
                for i in 0..plane {
                    let start = n * s.c * plane + i;
                    out.data_mut()[n * plane + i] = match kind {
                        ReduceKind::Mean => (0..s.c).map(|c| d[start + c * plane]).sum::<T>() * inv,
                        ReduceKind::Max => d[start + argmax_strided(d, start, plane, s.c) * plane],
                    };
                }
            }
            if kind == ReduceKind::Max {
                kinks::record(|hs| {
                    for n in 0..s.n {
                        for i in 0..plane {
                            hs.push(argmax_strided(d, n * s.c * plane + i, plane, s.c) as u64);
                        }
                    }
                });
            }
        }
    }
    Ok(out)
}

/// Mean spreads the gradient uniformly; max routes it to the first maximal
/// element in scan order.
pub fn reduce_backward<T: Real>(
    x: &Tensor4<T>,
    kind: ReduceKind,
    axis: Axis,
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let s = x.shape();
    let os = reduced_shape(s, axis)?;
    if grad_out.shape() != os {
        return Err(Error::shape(format!(
            "reduce grad has shape {}, expected {os}",
            grad_out.shape()
        )));
    }
    let d = x.data();
    let g = grad_out.data();
    let plane = s.plane();
    let mut gx = Tensor4::zeros(s);
    let gd = gx.data_mut();
    match axis {
        Axis::Spatial => {
            let inv = T::one() / T::of(plane as f64);
            for nc in 0..s.n * s.c {
                match kind {
                    ReduceKind::Mean => gd[nc * plane..][..plane].fill(g[nc] * inv),
                    ReduceKind::Max => {
                        gd[nc * plane + argmax_strided(d, nc * plane, 1, plane)] = g[nc]
                    }
                }
            }
        }
        Axis::Channel => {
            let inv = T::one() / T::of(s.c as f64);
            for n in 0..s.n {
                for i in 0..plane {
                    let start = n * s.c * plane + i;
                    let gv = g[n * plane + i];
                    match kind {
                        ReduceKind::Mean => {
                            for c in 0..s.c {
                                gd[start + c * plane] = gv * inv;
                            }
                        }
                        ReduceKind::Max => {
                            gd[start + argmax_strided(d, start, plane, s.c) * plane] = gv;
                        }
                    }
                }
            }
        }
    }
    Ok(gx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
}

/// Logistic function. The result is kept strictly inside `(0, 1)` even where
/// the exact value rounds to an endpoint.
#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    let y = if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    };
    let hi = T::one() - T::epsilon() / T::of(2.0);
    y.max(T::min_positive_value()).min(hi)
}

/// `σ'(v) = σ(v)·σ(−v)`, accurate where `σ(v)` rounds to 1.
#[inline]
pub fn sigmoid_grad<T: Real>(v: T) -> T {
    sigmoid(v) * sigmoid(-v)
}

pub fn pointwise<T: Real>(x: &Tensor4<T>, act: Activation) -> Tensor4<T> {
    match act {
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Relu => {
            kinks::record(|h| {
                for &v in x.data() {
                    h.push((v > T::zero()) as u64);
                }
            });
            x.map(|v| if v > T::zero() { v } else { T::zero() })
        }
    }
}

/// `input` and `output` are the forward operands of [`pointwise`].
pub fn pointwise_backward<T: Real>(
    input: &Tensor4<T>,
    output: &Tensor4<T>,
    act: Activation,
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    match act {
        Activation::Sigmoid => input.zip_map(grad_out, |v, g| g * sigmoid_grad(v)),
        Activation::Relu => {
            output.zip_map(grad_out, |y, g| if y > T::zero() { g } else { T::zero() })
        }
    }
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax_vec<T: Real>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::shape("softmax of an empty vector"));
    }
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = v.iter().map(|&z| (z - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    Ok(e.into_iter().map(|x| x / s).collect())
}

/// Gradient w.r.t. the logits given the softmax output `p` and `dL/dp`.
pub fn softmax_backward<T: Real>(p: &[T], grad_p: &[T]) -> Vec<T> {
    let dot: T = p.iter().zip(grad_p).map(|(&a, &b)| a * b).sum();
    p.iter()
        .zip(grad_p)
        .map(|(&pi, &gi)| pi * (gi - dot))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Strides into `b` when walking `a`; broadcast axes get stride 0.
fn broadcast_strides(a: Shape, b: Shape) -> Result<[usize; 4]> {
    let (ad, bd) = (a.dims(), b.dims());
    let dense = [b.c * b.h * b.w, b.h * b.w, b.w, 1];
    let mut st = [0; 4];
    for i in 0..4 {
        if bd[i] == ad[i] {
            st[i] = if bd[i] == 1 { 0 } else { dense[i] };
        } else if bd[i] != 1 {
            return Err(Error::shape(format!("cannot broadcast {b} onto {a}")));
        }
    }
    Ok(st)
}

fn for_each_broadcast(a: Shape, st: [usize; 4], mut f: impl FnMut(usize, usize)) {
    let mut ai = 0;
    for n in 0..a.n {
        for c in 0..a.c {
            for h in 0..a.h {
                let base = n * st[0] + c * st[1] + h * st[2];
                for w in 0..a.w {
                    f(ai, base + w * st[3]);
                    ai += 1;
                }
            }
        }
    }
}

/// Elementwise `a op b` where every dim of `b` equals the matching dim of
/// `a` or is 1.
pub fn broadcast_binary<T: Real>(
    a: &Tensor4<T>,
    b: &Tensor4<T>,
    op: BinaryOp,
) -> Result<Tensor4<T>> {
    let st = broadcast_strides(a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = Tensor4::zeros(a.shape());
    let od = out.data_mut();
    for_each_broadcast(a.shape(), st, |i, j| {
        od[i] = match op {
            BinaryOp::Add => ad[i] + bd[j],
            BinaryOp::Sub => ad[i] - bd[j],
            BinaryOp::Mul => ad[i] * bd[j],
        }
    });
    Ok(out)
}

/// Returns `(dL/da, dL/db)`; the `b` gradient is summed over broadcast axes.
pub fn broadcast_binary_backward<T: Real>(
    a: &Tensor4<T>,
    b: &Tensor4<T>,
    op: BinaryOp,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let st = broadcast_strides(a.shape(), b.shape())?;
    a.expect_same_shape(grad_out)?;
    let (ad, bd, g) = (a.data(), b.data(), grad_out.data());
    let mut ga = Tensor4::zeros(a.shape());
    let mut gb = Tensor4::zeros(b.shape());
    {
        let (gad, gbd) = (ga.data_mut(), gb.data_mut());
        for_each_broadcast(a.shape(), st, |i, j| match op {
            BinaryOp::Add => {
                gad[i] = g[i];
                gbd[j] = gbd[j] + g[i];
            }
            BinaryOp::Sub => {
                gad[i] = g[i];
                gbd[j] = gbd[j] - g[i];
            }
            BinaryOp::Mul => {
                gad[i] = g[i] * bd[j];
                gbd[j] = gbd[j] + g[i] * ad[i];
            }
        });
    }
    Ok((ga, gb))
}

pub fn concat_channels<T: Real>(parts: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat of zero tensors"))?
        .shape();
    for p in parts {
        let s = p.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape(format!("cannot concat {s} with {first}")));
        }
    }
    let c: usize = parts.iter().map(|p| p.shape().c).sum();
    let plane = first.plane();
    let mut data = Vec::with_capacity(first.n * c * plane);
    for n in 0..first.n {
        for p in parts {
            let pc = p.shape().c;
            data.extend_from_slice(&p.data()[n * pc * plane..][..pc * plane]);
        }
    }
    Tensor4::from_vec(Shape::new(first.n, c, first.h, first.w), data)
}

pub fn split_channels<T: Real>(x: &Tensor4<T>, sizes: &[usize]) -> Result<Vec<Tensor4<T>>> {
    let s = x.shape();
    if sizes.iter().sum::<usize>() != s.c {
        return Err(Error::shape(format!(
            "channel split {sizes:?} does not cover {s}"
        )));
    }
    let plane = s.plane();
    let mut out = Vec::with_capacity(sizes.len());
    let mut c0 = 0;
    for &sz in sizes {
        let mut data = Vec::with_capacity(s.n * sz * plane);
        for n in 0..s.n {
            data.extend_from_slice(&x.data()[(n * s.c + c0) * plane..][..sz * plane]);
        }
        out.push(Tensor4::from_vec(Shape::new(s.n, sz, s.h, s.w), data)?);
        c0 += sz;
    }
    Ok(out)
}

/// 2x2, stride-2 max pooling. Returns the output and, for each output
/// element, the flat input index that won.
pub fn max_pool2<T: Real>(x: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<usize>)> {
    let s = x.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::shape(format!(
            "max_pool2 needs even spatial dims, got {s}"
        )));
    }
    let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let d = x.data();
    let mut out = Tensor4::zeros(os);
    let mut arg = Vec::with_capacity(os.numel());
    let od = out.data_mut();
    let mut oi = 0;
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for y in 0..os.h {
            for xx in 0..os.w {
                let cands = [
                    base + 2 * y * s.w + 2 * xx,
                    base + 2 * y * s.w + 2 * xx + 1,
                    base + (2 * y + 1) * s.w + 2 * xx,
                    base + (2 * y + 1) * s.w + 2 * xx + 1,
                ];
                let mut best = cands[0];
                for &c in &cands[1..] {
                    if d[c] > d[best] {
                        best = c;
                    }
                }
                od[oi] = d[best];
                arg.push(best);
                oi += 1;
            }
        }
    }
    kinks::record(|h| {
        for &a in &arg {
            h.push(a as u64);
        }
    });
    Ok((out, arg))
}

pub fn max_pool2_backward<T: Real>(
    input_shape: Shape,
    argmax: &[usize],
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    if argmax.len() != grad_out.shape().numel() {
        return Err(Error::shape("pool argmax does not match gradient"));
    }
    let mut gx = Tensor4::zeros(input_shape);
    let gd = gx.data_mut();
    for (&a, &g) in argmax.iter().zip(grad_out.data()) {
        gd[a] = gd[a] + g;
    }
    Ok(gx)
}

/// Saved forward state of a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    pub xhat: Tensor4<T>,
    pub count: usize,
}

fn check_affine<T>(s: Shape, gamma: &[T], beta: &[T]) -> Result<()> {
    if gamma.len() != s.c || beta.len() != s.c {
        return Err(Error::shape(format!(
            "batch norm affine params of length {}/{} for input {s}",
            gamma.len(),
            beta.len()
        )));
    }
    Ok(())
}

/// Per-channel normalization with batch statistics.
pub fn batch_norm_train<T: Real>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Tensor4<T>, BatchNormCache<T>)> {
    let s = x.shape();
    check_affine(s, gamma, beta)?;
    let plane = s.plane();
    let m = s.n * plane;
    if m == 0 {
        return Err(Error::shape("batch norm over an empty batch"));
    }
    let inv_m = T::one() / T::of(m as f64);
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            acc = acc + x.plane(n, c).iter().copied().sum::<T>();
        }
        mean[c] = acc * inv_m;
        let mut acc = T::zero();
        for n in 0..s.n {
            acc = acc
                + x.plane(n, c)
                    .iter()
                    .map(|&v| (v - mean[c]) * (v - mean[c]))
                    .sum::<T>();
        }
        var[c] = acc * inv_m;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let xhat = Tensor4::from_fn(s, |n, c, h, w| (x.at(n, c, h, w) - mean[c]) * inv_std[c]);
    let y = Tensor4::from_fn(s, |n, c, h, w| gamma[c] * xhat.at(n, c, h, w) + beta[c]);
    Ok((
        y,
        BatchNormCache {
            mean,
            var,
            inv_std,
            xhat,
            count: m,
        },
    ))
}

/// Returns `(dL/dx, dL/dgamma, dL/dbeta)`.
pub fn batch_norm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: &[T],
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Vec<T>, Vec<T>)> {
    let s = cache.xhat.shape();
    cache.xhat.expect_same_shape(grad_out)?;
    let m = T::of(cache.count as f64);
    let mut gbeta = vec![T::zero(); s.c];
    let mut ggamma = vec![T::zero(); s.c];
    for c in 0..s.c {
        for n in 0..s.n {
            let g = grad_out.plane(n, c);
            let xh = cache.xhat.plane(n, c);
            gbeta[c] = gbeta[c] + g.iter().copied().sum::<T>();
            ggamma[c] = ggamma[c] + g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
        }
    }
    let gx = Tensor4::from_fn(s, |n, c, h, w| {
        let k = gamma[c] * cache.inv_std[c] / m;
        k * (m * grad_out.at(n, c, h, w) - gbeta[c] - cache.xhat.at(n, c, h, w) * ggamma[c])
    });
    Ok((gx, ggamma, gbeta))
}

pub fn batch_norm_eval<T: Real>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> Result<Tensor4<T>> {
    let s = x.shape();
    check_affine(s, gamma, beta)?;
    check_affine(s, running_mean, running_var)?;
    let scale: Vec<T> = (0..s.c)
        .map(|c| gamma[c] / (running_var[c] + eps).sqrt())
        .collect();
    Ok(Tensor4::from_fn(s, |n, c, h, w| {
        (x.at(n, c, h, w) - running_mean[c]) * scale[c] + beta[c]
    }))
}
