//! Forward and backward kernels for the network primitives.
//!
//! All kernels accept `[c,h,w]` tensors (a batch of one) or `[n,c,h,w]`
//! batches and return tensors of the same rank. They are pure functions;
//! [`crate::tape::Tape`] stitches them together for reverse-mode autodiff.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn with_batch_rank<T: Scalar>(like: &Tensor<T>, n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if like.shape().len() == 3 {
        vec![c, h, w]
    } else {
        vec![n, c, h, w]
    }
}

/// Output spatial size of a convolution along one axis.
pub fn conv_out_dim(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    let padded = size + 2 * pad;
    if kernel > padded {
        return Err(Error::shape(format!("kernel {kernel} does not fit input {size} with padding {pad}")));
    }
    if (padded - kernel) % stride != 0 {
        return Err(Error::shape(format!(
            "(size {size} + 2*pad {pad} - kernel {kernel}) is not divisible by stride {stride}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

struct ConvGeom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let (n, c_in, h, w) = input.nchw()?;
        let &[c_out, wc, kh, kw] = weight.shape() else {
            return Err(Error::shape(format!("conv weights must be [c_out,c_in,kh,kw], got {:?}", weight.shape())));
        };
        if wc != c_in {
            return Err(Error::shape(format!(
                "input {:?} has {c_in} channels but weights {:?} expect {wc}",
                input.shape(),
                weight.shape()
            )));
        }
        let ho = conv_out_dim(h, kh, stride, pad)?;
        let wo = conv_out_dim(w, kw, stride, pad)?;
        Ok(Self { n, c_in, h, w, c_out, kh, kw, ho, wo, stride, pad })
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose stride-1 input column `ox + kx − pad` is in range.
    fn valid_span(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).min(self.wo);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.wo).max(lo);
        (lo, hi)
    }

    /// Unfolds one sample `[c_in,h,w]` into `cols[k, p]`, rows ordered (c, ky, kx).
    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        let p = self.p();
        let mut row = 0;
        for c in 0..self.c_in {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let out_row = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        if self.stride == 1 {
                            let (lo, hi) = self.valid_span(kx);
                            out_row[..lo].fill(T::zero());
                            out_row[hi..].fill(T::zero());
                            if lo < hi {
                                let start = lo + kx - self.pad;
                                out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                            }
                            continue;
                        }
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Scatter-adds `cols[k, p]` back into one sample `[c_in,h,w]`.
    fn col2im<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        let p = self.p();
        let mut row = 0;
        for c in 0..self.c_in {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        if self.stride == 1 {
                            let (lo, hi) = self.valid_span(kx);
                            if lo < hi {
                                let start = lo + kx - self.pad;
                                let src_row = &src[oy * self.wo + lo..oy * self.wo + hi];
                                for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(src_row) {
                                    *d = *d + v;
                                }
                            }
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] = dst[ix as usize] + src[oy * self.wo + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// 2-D cross-correlation (no kernel flip) with bias.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, weight, stride, pad)?;
    if bias.shape() != [g.c_out] {
        return Err(Error::shape(format!("bias {:?} does not match {} output channels", bias.shape(), g.c_out)));
    }
    let (k, p) = (g.k(), g.p());
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * p;
    let mut out = vec![T::zero(); g.n * out_sz];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for s in 0..g.n {
        let img = &input.data()[s * in_sz..(s + 1) * in_sz];
        let dst = &mut out[s * out_sz..(s + 1) * out_sz];
        for (co, chunk) in dst.chunks_mut(p).enumerate() {
            chunk.fill(bias.data()[co]);
        }
        let b: &[T] = if g.is_pointwise() {
            img
        } else {
            g.im2col(img, &mut cols);
            &cols
        };
        T::gemm(g.c_out, k, p, weight.data(), k as isize, 1, b, p as isize, 1, T::one(), dst, p as isize, 1);
    }
    Tensor::new(&with_batch_rank(input, g.n, g.c_out, g.ho, g.wo), out)
}

/// Gradients of [`conv2d`] w.r.t. input (if requested), weights and bias.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(input, weight, stride, pad)?;
    let expect = with_batch_rank(input, g.n, g.c_out, g.ho, g.wo);
    if grad_out.shape() != expect.as_slice() {
        return Err(Error::shape(format!("conv output gradient {:?}, expected {expect:?}", grad_out.shape())));
    }
    let (k, p) = (g.k(), g.p());
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * p;
    let mut dw = vec![T::zero(); g.c_out * k];
    let mut db = vec![T::zero(); g.c_out];
    let mut dx = if need_input_grad { vec![T::zero(); input.len()] } else { Vec::new() };
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcols = if need_input_grad && !g.is_pointwise() { vec![T::zero(); k * p] } else { Vec::new() };
    for s in 0..g.n {
        let img = &input.data()[s * in_sz..(s + 1) * in_sz];
        let go = &grad_out.data()[s * out_sz..(s + 1) * out_sz];
        for (co, chunk) in go.chunks(p).enumerate() {
            db[co] = db[co] + chunk.iter().copied().sum::<T>();
        }
        let b: &[T] = if g.is_pointwise() {
            img
        } else {
            g.im2col(img, &mut cols);
            &cols
        };
        // dW[co,k] += dOut[co,p] * cols[k,p]^T
        T::gemm(g.c_out, p, k, go, p as isize, 1, b, 1, p as isize, T::one(), &mut dw, k as isize, 1);
        if need_input_grad {
            let dimg = &mut dx[s * in_sz..(s + 1) * in_sz];
            if g.is_pointwise() {
                T::gemm(k, g.c_out, p, weight.data(), 1, k as isize, go, p as isize, 1, T::zero(), dimg, p as isize, 1);
            } else {
                T::gemm(
                    k,
                    g.c_out,
                    p,
                    weight.data(),
                    1,
                    k as isize,
                    go,
                    p as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    p as isize,
                    1,
                );
                g.col2im(&dcols, dimg);
            }
        }
    }
    Ok(ConvGrads {
        input: if need_input_grad { Some(Tensor::new(input.shape(), dx)?) } else { None },
        weight: Tensor::new(weight.shape(), dw)?,
        bias: Tensor::new(&[g.c_out], db)?,
    })
}

pub fn leaky_relu<T: Scalar>(input: &Tensor<T>, slope: T) -> Result<Tensor<T>> {
    if !(slope > T::zero() && slope < T::one()) {
        return Err(Error::invalid(format!("leaky slope {slope} must lie in (0,1)")));
    }
    input.ensure_finite("leaky_relu input")?;
    Ok(input.map(|x| if x > T::zero() { x } else { slope * x }))
}

pub fn leaky_relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>, slope: T) -> Result<Tensor<T>> {
    input.zip_map(grad_out, |x, g| if x > T::zero() { g } else { slope * g })
}

fn check_even<T: Scalar>(input: &Tensor<T>, op: &str) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = input.nchw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("{op} needs even spatial dims, got {:?}", input.shape())));
    }
    Ok((n, c, h, w))
}

/// 2x2 stride-2 max pooling. Also returns the flat input index of each
/// selected maximum (ties resolve to the first in row-major order).
pub fn max_pool2_with_indices<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (n, c, h, w) = check_even(input, "max_pool2")?;
    let (ho, wo) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let r0 = base + 2 * oy * w + 2 * ox;
                let mut best = r0;
                for cand in [r0 + 1, r0 + w, r0 + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(&with_batch_rank(input, n, c, ho, wo), out)?, idx))
}

pub fn max_pool2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(max_pool2_with_indices(input)?.0)
}

pub fn max_pool2_backward<T: Scalar>(
    input_shape: &[usize],
    indices: &[u32],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if indices.len() != grad_out.len() {
        return Err(Error::shape("max_pool2 gradient does not match saved indices"));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in indices.iter().zip(grad_out.data()) {
        d[i as usize] = d[i as usize] + g;
    }
    Ok(dx)
}

/// Space-to-channel reshuffle: `out[(2*dy+dx)*c + ch, y, x] = in[ch, 2y+dy, 2x+dx]`.
pub fn reorg2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_even(input, "reorg2")?;
    let (ho, wo) = (h / 2, w / 2);
    let x = input.data();
    let mut out = vec![T::zero(); input.len()];
    for s in 0..n {
        for block in 0..4 {
            let (dy, dx) = (block / 2, block % 2);
            for ch in 0..c {
                let src = s * c * h * w + ch * h * w;
                let dst = s * 4 * c * ho * wo + (block * c + ch) * ho * wo;
                for y in 0..ho {
                    for xx in 0..wo {
                        out[dst + y * wo + xx] = x[src + (2 * y + dy) * w + 2 * xx + dx];
                    }
                }
            }
        }
    }
    Tensor::new(&with_batch_rank(input, n, 4 * c, ho, wo), out)
}

/// Inverse permutation of [`reorg2`]; also its backward pass.
pub fn reorg2_inverse<T: Scalar>(reorged: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c4, ho, wo) = reorged.nchw()?;
    if c4 % 4 != 0 {
        return Err(Error::shape(format!(
            "reorg2 inverse needs a channel count divisible by 4, got {:?}",
            reorged.shape()
        )));
    }
    let (c, h, w) = (c4 / 4, ho * 2, wo * 2);
    let g = reorged.data();
    let mut out = vec![T::zero(); reorged.len()];
    for s in 0..n {
        for block in 0..4 {
            let (dy, dx) = (block / 2, block % 2);
            for ch in 0..c {
                let dst = s * c * h * w + ch * h * w;
                let src = s * c4 * ho * wo + (block * c + ch) * ho * wo;
                for y in 0..ho {
                    for xx in 0..wo {
                        out[dst + (2 * y + dy) * w + 2 * xx + dx] = g[src + y * wo + xx];
                    }
                }
            }
        }
    }
    Tensor::new(&with_batch_rank(reorged, n, c, h, w), out)
}

/// Channel concatenation, `a` first.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (na, ca, ha, wa) = a.nchw()?;
    let (nb, cb, hb, wb) = b.nchw()?;
    if a.shape().len() != b.shape().len() || na != nb || ha != hb || wa != wb {
        return Err(Error::shape(format!(
            "concat needs equal batch and spatial dims: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (sa, sb) = (ca * ha * wa, cb * hb * wb);
    let mut out = Vec::with_capacity(a.len() + b.len());
    for s in 0..na {
        out.extend_from_slice(&a.data()[s * sa..(s + 1) * sa]);
        out.extend_from_slice(&b.data()[s * sb..(s + 1) * sb]);
    }
    Tensor::new(&with_batch_rank(a, na, ca + cb, ha, wa), out)
}

/// Splits a channel-concatenated tensor back into its `[.., ca, ..]` and rest parts.
pub fn split_channels<T: Scalar>(t: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = t.nchw()?;
    if ca == 0 || ca >= c {
        return Err(Error::shape(format!("cannot split {:?} at channel {ca}", t.shape())));
    }
    let cb = c - ca;
    let (sa, sb) = (ca * h * w, cb * h * w);
    let mut a = Vec::with_capacity(n * sa);
    let mut b = Vec::with_capacity(n * sb);
    for s in 0..n {
        let base = s * (sa + sb);
        a.extend_from_slice(&t.data()[base..base + sa]);
        b.extend_from_slice(&t.data()[base + sa..base + sa + sb]);
    }
    Ok((Tensor::new(&with_batch_rank(t, n, ca, h, w), a)?, Tensor::new(&with_batch_rank(t, n, cb, h, w), b)?))
}

fn check_channel_vec<T: Scalar>(name: &str, v: &Tensor<T>, c: usize) -> Result<()> {
    if v.shape() != [c] {
        return Err(Error::shape(format!("batch norm {name} has shape {:?}, input has {c} channels", v.shape())));
    }
    Ok(())
}

/// Per-channel `(x - mean) / sqrt(var + eps) * gamma + beta` with fixed statistics.
pub fn batch_norm_infer<T: Scalar>(
    input: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.nchw()?;
    for (name, v) in [("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)] {
        check_channel_vec(name, v, c)?;
    }
    if eps <= T::zero() {
        return Err(Error::invalid("batch norm eps must be positive"));
    }
    if var.data().iter().any(|&v| v < T::zero()) {
        return Err(Error::invalid("batch norm variance must be non-negative"));
    }
    let hw = h * w;
    let mut out = input.data().to_vec();
    for s in 0..n {
        for ch in 0..c {
            let inv = T::one() / (var.data()[ch] + eps).sqrt();
            let (m, gm, bt) = (mean.data()[ch], gamma.data()[ch], beta.data()[ch]);
            for v in &mut out[(s * c + ch) * hw..(s * c + ch + 1) * hw] {
                *v = (*v - m) * inv * gm + bt;
            }
        }
    }
    Tensor::new(input.shape(), out)
}

/// Batch statistics and normalized activations saved by [`batch_norm_train`].
pub struct BnSaved<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    pub xhat: Vec<T>,
}

/// Normalizes with the statistics of the batch itself (biased variance).
pub fn batch_norm_train<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let (n, c, h, w) = input.nchw()?;
    check_channel_vec("gamma", gamma, c)?;
    check_channel_vec("beta", beta, c)?;
    if eps <= T::zero() {
        return Err(Error::invalid("batch norm eps must be positive"));
    }
    let hw = h * w;
    let m = (n * hw) as f64;
    let x = input.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = 0.0f64;
        for s in 0..n {
            acc += x[(s * c + ch) * hw..(s * c + ch + 1) * hw].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mu = acc / m;
        let mut acc2 = 0.0f64;
        for s in 0..n {
            acc2 += x[(s * c + ch) * hw..(s * c + ch + 1) * hw]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mu;
                    d * d
                })
                .sum::<f64>();
        }
        let v = acc2 / m;
        mean[ch] = T::from_f64(mu);
        var[ch] = T::from_f64(v);
        inv_std[ch] = T::from_f64(1.0 / (v + eps.as_f64()).sqrt());
    }
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for s in 0..n {
        for ch in 0..c {
            let range = (s * c + ch) * hw..(s * c + ch + 1) * hw;
            let (mu, is, g, b) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in range {
                let xh = (x[i] - mu) * is;
                xhat[i] = xh;
                out[i] = xh * g + b;
            }
        }
    }
    Ok((Tensor::new(input.shape(), out)?, BnSaved { mean, var, inv_std, xhat }))
}

/// Gradients of [`batch_norm_train`] w.r.t. (input, gamma, beta).
pub fn batch_norm_train_backward<T: Scalar>(
    saved: &BnSaved<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = grad_out.nchw()?;
    let hw = h * w;
    let m = (n * hw) as f64;
    let gy = grad_out.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = vec![T::zero(); gy.len()];
    for ch in 0..c {
        let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
        for s in 0..n {
            for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                sum_g += gy[i].as_f64();
                sum_gx += gy[i].as_f64() * saved.xhat[i].as_f64();
            }
        }
        dgamma[ch] = T::from_f64(sum_gx);
        dbeta[ch] = T::from_f64(sum_g);
        let g = gamma.data()[ch].as_f64();
        let scale = g * saved.inv_std[ch].as_f64() / m;
        for s in 0..n {
            for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                let v = scale * (m * gy[i].as_f64() - sum_g - saved.xhat[i].as_f64() * sum_gx);
                dx[i] = T::from_f64(v);
            }
        }
    }
    Ok((Tensor::new(grad_out.shape(), dx)?, Tensor::new(&[c], dgamma)?, Tensor::new(&[c], dbeta)?))
}

/// Gradients of [`batch_norm_infer`] w.r.t. (input, gamma, beta).
pub fn batch_norm_infer_backward<T: Scalar>(
    input: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: T,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = input.nchw()?;
    let hw = h * w;
    let mut dx = grad_out.data().to_vec();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let inv = T::one() / (var.data()[ch] + eps).sqrt();
        let (m, g) = (mean.data()[ch], gamma.data()[ch]);
        for s in 0..n {
            for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                let gy = dx[i];
                dgamma[ch] = dgamma[ch] + gy * (input.data()[i] - m) * inv;
                dbeta[ch] = dbeta[ch] + gy;
                dx[i] = gy * inv * g;
            }
        }
    }
    Ok((Tensor::new(input.shape(), dx)?, Tensor::new(&[c], dgamma)?, Tensor::new(&[c], dbeta)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct quadruple loop over (c_out, y, x) x (c_in, ky, kx).
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (_, ci, h, wd) = x.nchw().unwrap();
        let &[co, _, kh, kw] = w.shape() else { unreachable!() };
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.data()[(c * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((o * ci + c) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out[(o * ho + y) * wo + xx] = acc;
                }
            }
        }
        Tensor::new(&[co, ho, wo], out).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::<f64>::from_fn(&[1, 3, 4], |i| i as f64 - 5.0);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_constant_input_all_ones_kernel() {
        let x = Tensor::<f64>::full(&[1, 5, 5], 2.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 18.0));
    }

    #[test]
    fn conv_matches_direct_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let ci = rng.random_range(1..=4);
            let co = rng.random_range(1..=4);
            let k = [1usize, 2, 3][rng.random_range(0..3)];
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..=1);
            // choose h, w <= 8 that the stride divides
            let pick = |rng: &mut ChaCha8Rng| loop {
                let s = rng.random_range(k.max(1)..=8);
                if (s + 2 * pad - k) % stride == 0 {
                    break s;
                }
            };
            let (h, w) = (pick(&mut rng), pick(&mut rng));
            let x = rand_tensor(&mut rng, &[ci, h, w]);
            let wt = rand_tensor(&mut rng, &[co, ci, k, k]);
            let b = rand_tensor(&mut rng, &[co]);
            let got = conv2d(&x, &wt, &b, stride, pad).unwrap();
            let want = naive_conv(&x, &wt, &b, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (g, e) in got.data().iter().zip(want.data()) {
                assert!((g - e).abs() <= 1e-12 * e.abs().max(1.0), "{g} vs {e}");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_naming_both_shapes() {
        let x = Tensor::<f64>::zeros(&[2, 4, 4]);
        let w = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap_err().to_string();
        assert!(err.contains("[2, 4, 4]") && err.contains("[1, 3, 3, 3]"), "{err}");
    }

    #[test]
    fn conv_is_linear_in_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 3, 6, 6]);
        let w1 = rand_tensor(&mut rng, &[4, 3, 3, 3]);
        let w2 = rand_tensor(&mut rng, &[4, 3, 3, 3]);
        let zero = Tensor::zeros(&[4]);
        let (a, b) = (0.7, -1.3);
        let mix = w1.zip_map(&w2, |p, q| a * p + b * q).unwrap();
        let lhs = conv2d(&x, &mix, &zero, 1, 1).unwrap();
        let r1 = conv2d(&x, &w1, &zero, 1, 1).unwrap();
        let r2 = conv2d(&x, &w2, &zero, 1, 1).unwrap();
        for i in 0..lhs.len() {
            let rhs = a * r1.data()[i] + b * r2.data()[i];
            assert!((lhs.data()[i] - rhs).abs() <= 1e-10 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn leaky_examples() {
        let y = leaky_relu(&Tensor::from_vec(vec![1.0f64, -1.0]), 0.1).unwrap();
        assert_eq!(y.data(), &[1.0, -0.1]);
        let pos = Tensor::from_vec(vec![0.5f64, 3.0]);
        assert_eq!(leaky_relu(&pos, 0.1).unwrap(), pos);
        let g =
            leaky_relu_backward(&Tensor::from_vec(vec![2.0f64, -3.0]), &Tensor::from_vec(vec![1.0, 1.0]), 0.1).unwrap();
        assert_eq!(g.data(), &[1.0, 0.1]);
        assert!(leaky_relu(&pos, 1.5).is_err());
        assert!(leaky_relu(&Tensor::from_vec(vec![f64::NAN]), 0.1).is_err());
    }

    #[test]
    fn max_pool_examples() {
        let x = Tensor::<f64>::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(max_pool2(&x).unwrap().data(), &[4.0]);
        let c = Tensor::<f64>::full(&[2, 4, 6], 1.5);
        let p = max_pool2(&c).unwrap();
        assert_eq!(p.shape(), &[2, 2, 3]);
        assert!(p.data().iter().all(|&v| v == 1.5));
        assert!(max_pool2(&Tensor::<f64>::zeros(&[1, 3, 4])).is_err());
    }

    #[test]
    fn max_pool_ties_route_to_first_row_major() {
        let x = Tensor::<f64>::full(&[1, 2, 2], 1.0);
        let (_, idx) = max_pool2_with_indices(&x).unwrap();
        assert_eq!(idx, vec![0]);
        let g = max_pool2_backward(x.shape(), &idx, &Tensor::full(&[1, 1, 1], 1.0)).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_matches_window_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = rand_tensor(&mut rng, &[1, 4, 4]);
            let p = max_pool2(&x).unwrap();
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(x.data()[(2 * oy + dy) * 4 + 2 * ox + dx]);
                        }
                    }
                    assert_eq!(p.data()[oy * 2 + ox], m);
                }
            }
        }
    }

    #[test]
    fn reorg_layout_and_inverse() {
        let x = Tensor::<f64>::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = reorg2(&x).unwrap();
        assert_eq!(r.shape(), &[4, 1, 1]);
        assert_eq!(r.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(reorg2_inverse(&r).unwrap().shape(), &[1, 2, 2]);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[2, 4, 4]);
        let r = reorg2(&x).unwrap();
        assert_eq!(r.shape(), &[8, 2, 2]);
        assert_eq!(reorg2_inverse(&r).unwrap(), x);
        let mut a = x.data().to_vec();
        let mut b = r.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        assert!(reorg2(&Tensor::<f64>::zeros(&[1, 3, 2])).is_err());
    }

    #[test]
    fn concat_and_split() {
        let a = Tensor::<f64>::full(&[1, 2, 2], 1.0);
        let b = Tensor::<f64>::full(&[1, 2, 2], 2.0);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2, 2]);
        assert_eq!(&c.data()[..4], &[1.0; 4]);
        let (a2, b2) = split_channels(&c, 1).unwrap();
        assert_eq!((a2, b2), (a, b));
        assert!(concat_channels(&Tensor::<f64>::zeros(&[1, 2, 2]), &Tensor::zeros(&[1, 2, 4])).is_err());
        // a zero-channel tensor cannot even be constructed
        assert!(Tensor::<f64>::new(&[0, 2, 2], vec![]).is_err());
    }

    #[test]
    fn batch_norm_infer_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[3, 4, 4]);
        let ones = Tensor::full(&[3], 1.0);
        let zeros = Tensor::zeros(&[3]);
        let y = batch_norm_infer(&x, &zeros, &ones, &ones, &zeros, 1e-12).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
        let beta = Tensor::full(&[3], 0.25);
        let y = batch_norm_infer(&x, &zeros, &ones, &zeros, &beta, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));

        let mean = rand_tensor(&mut rng, &[3]);
        let var = rand_tensor(&mut rng, &[3]).map(|v| v.abs());
        let gamma = rand_tensor(&mut rng, &[3]);
        let beta = rand_tensor(&mut rng, &[3]);
        let y = batch_norm_infer(&x, &mean, &var, &gamma, &beta, 1e-3).unwrap();
        for c in 0..3 {
            for i in 0..16 {
                let xi = x.data()[c * 16 + i];
                let want = (xi - mean.data()[c]) / (var.data()[c] + 1e-3).sqrt() * gamma.data()[c] + beta.data()[c];
                let got = y.data()[c * 16 + i];
                assert!((got - want).abs() <= 1e-12 * want.abs().max(1e-300));
            }
        }
        assert!(batch_norm_infer(&x, &Tensor::zeros(&[2]), &ones, &ones, &zeros, 1e-5).is_err());
    }
}
