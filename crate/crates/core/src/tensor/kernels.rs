//! Forward kernels and the matching vector-Jacobian products.
//!
//! Everything here is a pure function over [`Tensor`]s; the tape in
//! `tape.rs` only stitches these together.

use super::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Output shape of a broadcasting binary op. Ranks must match; each pair
/// of dimensions must be equal or contain a 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("broadcast rank mismatch: {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

fn strides_in(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    // merge neighbouring dims whose strides compose, so the inner loop
    // runs over the longest possible stretch
    let (mut dims, mut ta, mut tb) = (Vec::new(), Vec::new(), Vec::new());
    for d in 0..out.len() {
        if out[d] == 1 {
            continue;
        }
        match dims.last_mut() {
            Some(n) if *ta.last().unwrap() == sa[d] * out[d] && *tb.last().unwrap() == sb[d] * out[d] => {
                *n *= out[d];
                *ta.last_mut().unwrap() = sa[d];
                *tb.last_mut().unwrap() = sb[d];
            }
            _ => {
                dims.push(out[d]);
                ta.push(sa[d]);
                tb.push(sb[d]);
            }
        }
    }
    let Some(&inner) = dims.last() else {
        f(0, 0, 0);
        return;
    };
    let rank = dims.len();
    let (ia, ib) = (ta[rank - 1], tb[rank - 1]);
    let numel: usize = dims.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for start in (0..numel).step_by(inner) {
        for i in 0..inner {
            f(start + i, oa + i * ia, ob + i * ib);
        }
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += ta[d];
            ob += tb[d];
            if idx[d] < dims[d] {
                break;
            }
            oa -= ta[d] * dims[d];
            ob -= tb[d] * dims[d];
            idx[d] = 0;
        }
    }
}

pub fn binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape(), data);
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let sa = strides_in(a.shape(), &out);
    let sb = strides_in(b.shape(), &out);
    let mut data = vec![T::zero(); out.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    Tensor::new(&out, data)
}

/// Gradients of a broadcasting binary op `out = f(a, b)` given the local
/// partials `da(x, y)` and `db(x, y)`; broadcast dimensions are summed.
pub fn binary_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &[T],
    da: impl Fn(T, T) -> T,
    db: impl Fn(T, T) -> T,
) -> (Vec<T>, Vec<T>) {
    let mut ga = vec![T::zero(); a.numel()];
    let mut gb = vec![T::zero(); b.numel()];
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == b.shape() {
        for i in 0..grad.len() {
            ga[i] = grad[i] * da(ad[i], bd[i]);
            gb[i] = grad[i] * db(ad[i], bd[i]);
        }
        return (ga, gb);
    }
    let out = broadcast_shape(a.shape(), b.shape()).expect("validated in forward");
    let sa = strides_in(a.shape(), &out);
    let sb = strides_in(b.shape(), &out);
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| {
        ga[ia] = ga[ia] + grad[o] * da(ad[ia], bd[ib]);
        gb[ib] = gb[ib] + grad[o] * db(ad[ia], bd[ib]);
    });
    (ga, gb)
}

fn expect_rank<T: Scalar>(t: &Tensor<T>, rank: usize, op: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(format!("{op} expects rank {rank}, got shape {:?}", t.shape())));
    }
    Ok(())
}

/// Output spatial extent of a convolution.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], bias: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 {
            return Err(Error::shape(format!("conv2d expects rank-4 input and kernel, got {x:?} and {k:?}")));
        }
        if x[1] != k[1] {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input has {} channels, kernel expects {}",
                x[1], k[1]
            )));
        }
        if bias != [k[0]] {
            return Err(Error::shape(format!("conv2d bias shape {bias:?} does not match {} output channels", k[0])));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be at least 1"));
        }
        let (ho, wo) = match (conv_out_dim(x[2], k[2], stride, padding), conv_out_dim(x[3], k[3], stride, padding)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d kernel {}x{} exceeds padded input {}x{}",
                    k[2],
                    k[3],
                    x[2] + 2 * padding,
                    x[3] + 2 * padding
                )))
            }
        };
        Ok(ConvGeom {
            batch: x[0],
            cin: x[1],
            h: x[2],
            w: x[3],
            cout: k[0],
            kh: k[2],
            kw: k[3],
            ho,
            wo,
            stride,
            padding,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.batch * self.ho * self.wo
    }
}

/// Output positions `o` with a valid source `o·stride + k − padding` in
/// `0..limit`, as a half-open range.
fn valid_range(k: usize, stride: usize, padding: usize, limit: usize, out: usize) -> (usize, usize) {
    let lo = if padding > k { (padding - k).div_ceil(stride) } else { 0 };
    let hi = if limit + padding > k { ((limit + padding - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds input patches into a `[Cin·kh·kw, B·Ho·Wo]` matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let mut cols = vec![T::zero(); g.patch() * g.cols()];
    im2col_into(x, g, 0, g.batch, &mut cols);
    cols
}

/// Unfolds images `b0..b0 + nb` into `cols`, laid out `[Cin·kh·kw, nb·Ho·Wo]`.
/// Padding positions are left untouched, so `cols` must arrive zeroed.
fn im2col_into<T: Scalar>(x: &[T], g: &ConvGeom, b0: usize, nb: usize, cols: &mut [T]) {
    let plane = g.ho * g.wo;
    let ncols = nb * plane;
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(ki, g.stride, g.padding, g.h, g.ho);
            for kj in 0..g.kw {
                let (ox_lo, ox_hi) = valid_range(kj, g.stride, g.padding, g.w, g.wo);
                if ox_lo == ox_hi {
                    continue;
                }
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..nb {
                    let img = (b0 + b) * g.cin + ci;
                    let src = &x[img * g.h * g.w..(img + 1) * g.h * g.w];
                    let dst = &mut dst_row[b * plane..(b + 1) * plane];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ki - g.padding;
                        let src_row = &src[iy * g.w..(iy + 1) * g.w];
                        let dst = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        let ix0 = ox_lo * g.stride + kj - g.padding;
                        if g.stride == 1 {
                            dst[ox_lo..ox_hi].copy_from_slice(&src_row[ix0..ix0 + ox_hi - ox_lo]);
                        } else {
                            for (d, &v) in dst[ox_lo..ox_hi].iter_mut().zip(src_row[ix0..].iter().step_by(g.stride)) {
                                *d = v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let mut x = vec![T::zero(); g.batch * g.cin * g.h * g.w];
    col2im_add(cols, g, 0, g.batch, &mut x);
    x
}

/// Accumulates the columns of images `b0..b0 + nb` into the full input gradient.
fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, b0: usize, nb: usize, x: &mut [T]) {
    let plane = g.ho * g.wo;
    let ncols = nb * plane;
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(ki, g.stride, g.padding, g.h, g.ho);
            for kj in 0..g.kw {
                let (ox_lo, ox_hi) = valid_range(kj, g.stride, g.padding, g.w, g.wo);
                if ox_lo == ox_hi {
                    continue;
                }
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..nb {
                    let img = (b0 + b) * g.cin + ci;
                    let dst = &mut x[img * g.h * g.w..(img + 1) * g.h * g.w];
                    let src = &src_row[b * plane..(b + 1) * plane];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ki - g.padding;
                        let dst_row = &mut dst[iy * g.w..(iy + 1) * g.w];
                        let src = &src[oy * g.wo + ox_lo..oy * g.wo + ox_hi];
                        let ix0 = ox_lo * g.stride + kj - g.padding;
                        for (d, &v) in dst_row[ix0..].iter_mut().step_by(g.stride).zip(src) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// Column buffers are sized to roughly this many elements so they stay in
/// cache.
const CONV_CHUNK_ELEMS: usize = 1 << 16;

impl ConvGeom {
    /// Images per im2col chunk.
    fn chunk(&self) -> usize {
        (CONV_CHUNK_ELEMS / (self.patch() * self.ho * self.wo).max(1)).clamp(1, self.batch.max(1))
    }

    /// Image ranges `(b0, nb)` covering the batch in chunks.
    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let chunk = self.chunk();
        (0..self.batch).step_by(chunk).map(move |b0| (b0, chunk.min(self.batch - b0)))
    }
}

/// 2-D cross-correlation, optionally followed by ReLU, without keeping
/// anything for a backward pass.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    relu: bool,
) -> Result<(Tensor<T>, ConvGeom)> {
    let (out, _, g) = conv2d_impl(x, kernel, bias, stride, padding, relu, false)?;
    Ok((out, g))
}

/// Like [`conv2d`], but also returns the unfolded input, chunk after chunk,
/// for [`conv2d_backward`].
pub fn conv2d_keep<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    relu: bool,
) -> Result<(Tensor<T>, Vec<T>, ConvGeom)> {
    conv2d_impl(x, kernel, bias, stride, padding, relu, true)
}

/// Patches are unfolded a few images at a time so the GEMM reads them from
/// cache. With `keep` each chunk lands in one long buffer, otherwise a single
/// scratch chunk is reused.
fn conv2d_impl<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    relu: bool,
    keep: bool,
) -> Result<(Tensor<T>, Vec<T>, ConvGeom)> {
    let g = ConvGeom::new(x.shape(), kernel.shape(), bias.shape(), stride, padding)?;
    let plane = g.ho * g.wo;
    let patch = g.patch();
    let mut cols = vec![T::zero(); patch * plane * if keep { g.batch } else { g.chunk() }];
    let mut tmp = vec![T::zero(); g.cout * g.chunk() * plane];
    let mut out = vec![T::zero(); g.batch * g.cout * plane];
    let bd = bias.data();
    for (b0, nb) in g.chunks() {
        let ncols = nb * plane;
        let cols = if keep {
            &mut cols[patch * b0 * plane..patch * (b0 + nb) * plane]
        } else {
            // Padding slots depend only on the chunk size, so they stay zero
            // until the short final chunk changes the layout.
            if nb < g.chunk() {
                cols.fill(T::zero());
            }
            &mut cols[..patch * ncols]
        };
        im2col_into(x.data(), &g, b0, nb, cols);
        let tmp = &mut tmp[..g.cout * ncols];
        gemm(g.cout, patch, ncols, kernel.data(), false, cols, false, tmp, false);
        for b in 0..nb {
            let dst = &mut out[(b0 + b) * g.cout * plane..(b0 + b + 1) * g.cout * plane];
            for (co, dst) in dst.chunks_mut(plane).enumerate() {
                let src = &tmp[co * ncols + b * plane..co * ncols + (b + 1) * plane];
                if relu {
                    for (d, &s) in dst.iter_mut().zip(src) {
                        let v = s + bd[co];
                        *d = if v > T::zero() { v } else { T::zero() };
                    }
                } else {
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s + bd[co];
                    }
                }
            }
        }
    }
    let out = Tensor::new(&[g.batch, g.cout, g.ho, g.wo], out)?;
    Ok((out, if keep { cols } else { Vec::new() }, g))
}

/// Returns `(d_input, d_kernel, d_bias)` given the columns from
/// [`conv2d_keep`]. For a fused ReLU, `grad` must already be masked.
pub fn conv2d_backward<T: Scalar>(
    kernel: &[T],
    cols: &[T],
    g: &ConvGeom,
    grad: &[T],
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let plane = g.ho * g.wo;
    let patch = g.patch();
    let mut gtmp = vec![T::zero(); g.cout * g.chunk() * plane];
    let mut dcols = if need_input { vec![T::zero(); patch * g.chunk() * plane] } else { Vec::new() };
    let mut dx = if need_input { vec![T::zero(); g.batch * g.cin * g.h * g.w] } else { Vec::new() };
    let mut dbias = vec![T::zero(); g.cout];
    let mut dkernel = vec![T::zero(); g.cout * patch];
    for (b0, nb) in g.chunks() {
        let ncols = nb * plane;
        let gtmp = &mut gtmp[..g.cout * ncols];
        for b in 0..nb {
            let src = &grad[(b0 + b) * g.cout * plane..(b0 + b + 1) * g.cout * plane];
            for (co, src) in src.chunks(plane).enumerate() {
                gtmp[co * ncols + b * plane..co * ncols + (b + 1) * plane].copy_from_slice(src);
                dbias[co] = dbias[co] + src.iter().copied().sum::<T>();
            }
        }
        let cols = &cols[patch * b0 * plane..patch * (b0 + nb) * plane];
        gemm(g.cout, ncols, patch, gtmp, false, cols, true, &mut dkernel, b0 > 0);
        if need_input {
            let dcols = &mut dcols[..patch * ncols];
            gemm(patch, g.cout, ncols, kernel, true, gtmp, false, dcols, false);
            col2im_add(dcols, g, b0, nb, &mut dx);
        }
    }
    (need_input.then_some(dx), dkernel, dbias)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// `[B, C, H, W] -> [B, C]` spatial mean.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    channel_mean(x)
}

/// Per-instance, per-channel spatial mean: `[B, C, H, W] -> [B, C]`.
pub fn channel_mean<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(x, 4, "channel_mean")?;
    let s = x.shape();
    let hw = s[2] * s[3];
    let inv = T::one() / T::from_usize(hw).unwrap();
    let data = x.data().chunks(hw).map(|c| c.iter().copied().sum::<T>() * inv).collect();
    Tensor::new(&[s[0], s[1]], data)
}

/// Per-instance, per-channel `sqrt(population variance + eps)`.
pub fn channel_std<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    expect_rank(x, 4, "channel_std")?;
    let s = x.shape();
    let hw = s[2] * s[3];
    let inv = T::one() / T::from_usize(hw).unwrap();
    let data = x
        .data()
        .chunks(hw)
        .map(|c| {
            let mu = c.iter().copied().sum::<T>() * inv;
            let var = c.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv;
            (var + eps).sqrt()
        })
        .collect();
    Tensor::new(&[s[0], s[1]], data)
}

/// [`channel_mean`] and [`channel_std`] in one pass over `x`.
pub fn channel_stats<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<(Tensor<T>, Tensor<T>)> {
    expect_rank(x, 4, "channel_stats")?;
    let s = x.shape();
    let hw = s[2] * s[3];
    let inv = T::one() / T::from_usize(hw).unwrap();
    let (mut mean, mut std) = (Vec::with_capacity(s[0] * s[1]), Vec::with_capacity(s[0] * s[1]));
    for c in x.data().chunks(hw) {
        let mu = c.iter().copied().sum::<T>() * inv;
        let var = c.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv;
        mean.push(mu);
        std.push((var + eps).sqrt());
    }
    Ok((Tensor::new(&[s[0], s[1]], mean)?, Tensor::new(&[s[0], s[1]], std)?))
}

/// `x[b, c] · scale[b, c] + shift[b, c]` over each `[H, W]` plane.
pub fn channel_affine<T: Scalar>(x: &Tensor<T>, scale: &Tensor<T>, shift: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(x, 4, "channel_affine")?;
    let s = x.shape();
    if scale.shape() != [s[0], s[1]] || shift.shape() != [s[0], s[1]] {
        return Err(Error::shape(format!(
            "channel_affine coefficients {:?} and {:?} do not match features {s:?}",
            scale.shape(),
            shift.shape()
        )));
    }
    let hw = s[2] * s[3];
    let mut out = Vec::with_capacity(x.numel());
    for ((c, &a), &b) in x.data().chunks(hw).zip(scale.data()).zip(shift.data()) {
        out.extend(c.iter().map(|&v| v * a + b));
    }
    Tensor::new(s, out)
}

/// Returns `(d_x, d_scale, d_shift)`.
pub fn channel_affine_backward<T: Scalar>(x: &Tensor<T>, scale: &[T], grad: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let s = x.shape();
    let hw = s[2] * s[3];
    let mut dx = Vec::with_capacity(x.numel());
    let (mut dscale, mut dshift) = (Vec::with_capacity(scale.len()), Vec::with_capacity(scale.len()));
    for ((c, gc), &a) in x.data().chunks(hw).zip(grad.chunks(hw)).zip(scale) {
        dx.extend(gc.iter().map(|&gv| gv * a));
        dscale.push(c.iter().zip(gc).map(|(&v, &gv)| v * gv).sum());
        dshift.push(gc.iter().copied().sum());
    }
    (dx, dscale, dshift)
}

/// Backward of [`channel_std`] given its output `sigma`.
pub fn channel_std_backward<T: Scalar>(x: &Tensor<T>, sigma: &[T], grad: &[T]) -> Vec<T> {
    let s = x.shape();
    let hw = s[2] * s[3];
    let inv = T::one() / T::from_usize(hw).unwrap();
    let mut dx = vec![T::zero(); x.numel()];
    for (i, (chunk, dchunk)) in x.data().chunks(hw).zip(dx.chunks_mut(hw)).enumerate() {
        let mu = chunk.iter().copied().sum::<T>() * inv;
        let scale = grad[i] * inv / sigma[i];
        for (d, &v) in dchunk.iter_mut().zip(chunk) {
            *d = scale * (v - mu);
        }
    }
    dx
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(a, 2, "matmul")?;
    expect_rank(b, 2, "matmul")?;
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    if b.shape()[0] != k {
        return Err(Error::shape(format!("matmul inner dims: {:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::new(&[m, n], out)
}

/// `x [N, in] · weightᵀ [in, out] + bias [out]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(x, 2, "linear")?;
    expect_rank(weight, 2, "linear")?;
    let (n, fin) = (x.shape()[0], x.shape()[1]);
    let fout = weight.shape()[0];
    if weight.shape()[1] != fin || bias.shape() != [fout] {
        return Err(Error::shape(format!(
            "linear: input {:?}, weight {:?}, bias {:?}",
            x.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let mut out = vec![T::zero(); n * fout];
    gemm(n, fin, fout, x.data(), false, weight.data(), true, &mut out, false);
    for row in out.chunks_mut(fout) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v = *v + b;
        }
    }
    Tensor::new(&[n, fout], out)
}

/// Scales each row of a rank-2 tensor to unit Euclidean norm, dividing by
/// `max(norm, eps)`.
pub fn l2_normalize<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    expect_rank(x, 2, "l2_normalize")?;
    let d = x.shape()[1];
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
        row.iter_mut().for_each(|v| *v = *v / norm);
    }
    Tensor::new(x.shape(), out)
}

pub fn l2_normalize_backward<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, grad: &[T], eps: T) -> Vec<T> {
    let d = x.shape()[1];
    let mut dx = vec![T::zero(); x.numel()];
    for (((xr, yr), gr), dr) in x.data().chunks(d).zip(y.data().chunks(d)).zip(grad.chunks(d)).zip(dx.chunks_mut(d)) {
        let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm > eps {
            let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
            for i in 0..d {
                dr[i] = (gr[i] - yr[i] * dot) / norm;
            }
        } else {
            for i in 0..d {
                dr[i] = gr[i] / eps;
            }
        }
    }
    dx
}

/// Row-wise `log Σ exp`: `[N, K] -> [N]`, shifted by the row maximum.
pub fn log_sum_exp<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(x, 2, "log_sum_exp")?;
    let k = x.shape()[1];
    let data = x
        .data()
        .chunks(k)
        .map(|row| {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
        })
        .collect();
    Tensor::new(&[x.shape()[0]], data)
}

pub fn log_sum_exp_backward<T: Scalar>(x: &Tensor<T>, out: &[T], grad: &[T]) -> Vec<T> {
    let k = x.shape()[1];
    let mut dx = vec![T::zero(); x.numel()];
    for (i, (row, drow)) in x.data().chunks(k).zip(dx.chunks_mut(k)).enumerate() {
        for (d, &v) in drow.iter_mut().zip(row) {
            *d = grad[i] * (v - out[i]).exp();
        }
    }
    dx
}

/// Picks `x[i, index[i]]` from a rank-2 tensor.
pub fn gather_rows<T: Scalar>(x: &Tensor<T>, index: &[usize]) -> Result<Tensor<T>> {
    expect_rank(x, 2, "gather_rows")?;
    let (n, k) = (x.shape()[0], x.shape()[1]);
    if index.len() != n {
        return Err(Error::shape(format!("gather_rows: {} indices for {n} rows", index.len())));
    }
    if let Some(&bad) = index.iter().find(|&&j| j >= k) {
        return Err(Error::usage(format!("gather_rows: index {bad} out of range for {k} columns")));
    }
    let data = index.iter().enumerate().map(|(i, &j)| x.data()[i * k + j]).collect();
    Tensor::new(&[n], data)
}

/// Rows `start..end` along the leading axis.
pub fn slice_rows<T: Scalar>(x: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
    let n = x.shape().first().copied().unwrap_or(0);
    if start > end || end > n {
        return Err(Error::usage(format!("slice_rows: range {start}..{end} out of bounds for {n} rows")));
    }
    let per = x.numel() / n.max(1);
    let mut shape = x.shape().to_vec();
    shape[0] = end - start;
    Tensor::new(&shape, x.data()[start * per..end * per].to_vec())
}

pub fn sum<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(x.data().iter().copied().sum())
}

pub fn mean<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(x.data().iter().copied().sum::<T>() / T::from_usize(x.numel()).unwrap())
}

pub fn scale<T: Scalar>(x: &Tensor<T>, c: T) -> Tensor<T> {
    Tensor::new(x.shape(), x.data().iter().map(|&v| v * c).collect()).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Textbook nested-loop cross-correlation.
    fn direct_conv(x: &Tensor<f64>, k: &Tensor<f64>, bias: &[f64], stride: usize, pad: usize) -> Vec<f64> {
        let (b, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; b * cout * ho * wo];
        for n in 0..b {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * stride + i) as isize - pad as isize;
                                    let ix = (ox * stride + j) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x.data()[((n * cin + ci) * h + iy as usize) * w + ix as usize]
                                            * k.data()[((co * cin + ci) * kh + i) * kw + j];
                                    }
                                }
                            }
                        }
                        out[((n * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn geometry() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, usize, usize, usize)> {
        // (batch, cin, cout, h, w, kh, kw, stride, padding)
        (1..3usize, 1..4usize, 1..4usize, 1..7usize, 1..7usize, 1..4usize, 1..4usize, 1..4usize, 0..3usize)
            .prop_filter("kernel fits padded input", |&(_, _, _, h, w, kh, kw, _, p)| kh <= h + 2 * p && kw <= w + 2 * p)
    }

    #[test]
    fn fused_channel_stats_match_separate_kernels() {
        let x = Tensor::from_fn(&[3, 2, 4, 5], |i| ((i * 29) % 23) as f64 / 7.0 - 1.0);
        let (mu, sigma) = channel_stats(&x, 1e-6).unwrap();
        assert_eq!(mu, channel_mean(&x).unwrap());
        assert_eq!(sigma, channel_std(&x, 1e-6).unwrap());
    }

    #[test]
    fn channel_affine_scales_each_plane() {
        let x = Tensor::from_fn(&[2, 2, 1, 3], |i| i as f64);
        let scale = Tensor::new(&[2, 2], vec![1.0, 2.0, 0.0, -1.0]).unwrap();
        let shift = Tensor::new(&[2, 2], vec![0.0, 1.0, 5.0, 0.5]).unwrap();
        let y = channel_affine(&x, &scale, &shift).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 2.0, 7.0, 9.0, 11.0, 5.0, 5.0, 5.0, -8.5, -9.5, -10.5]);
        assert!(channel_affine(&x, &shift, &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn chunked_conv_matches_whole_batch_formulas() {
        // Large enough that the batch splits into several chunks plus a short one.
        let (b, cin, cout, h, w, s, p) = (9, 3, 5, 32, 16, 1, 1);
        let x = Tensor::from_fn(&[b, cin, h, w], |i| ((i * 31) % 17) as f64 / 17.0 - 0.5);
        let k = Tensor::from_fn(&[cout, cin, 3, 3], |i| ((i * 7) % 5) as f64 / 5.0 - 0.4);
        let bias = Tensor::from_fn(&[cout], |i| i as f64 * 0.1);
        let g = ConvGeom::new(x.shape(), k.shape(), bias.shape(), s, p).unwrap();
        assert!(g.chunk() < b && b % g.chunk() != 0);

        let (out, _) = conv2d(&x, &k, &bias, s, p, false).unwrap();
        let (kept, cols, _) = conv2d_keep(&x, &k, &bias, s, p, false).unwrap();
        let (rectified, _) = conv2d(&x, &k, &bias, s, p, true).unwrap();
        assert_eq!(rectified, relu(&out));
        let expected = direct_conv(&x, &k, bias.data(), s, p);
        for ((a, c), e) in out.data().iter().zip(kept.data()).zip(&expected) {
            assert!((a - e).abs() < 1e-12 && a == c);
        }

        let grad: Vec<f64> = (0..out.numel()).map(|i| ((i * 13) % 9) as f64 - 4.0).collect();
        let (dx, dk, db) = conv2d_backward(k.data(), &cols, &g, &grad, true);
        // Whole-batch reference in `[Cout, B·Ho·Wo]` layout.
        let plane = g.ho * g.wo;
        let mut gmat = vec![0.0; cout * b * plane];
        for bi in 0..b {
            for co in 0..cout {
                gmat[co * b * plane + bi * plane..co * b * plane + (bi + 1) * plane]
                    .copy_from_slice(&grad[(bi * cout + co) * plane..(bi * cout + co + 1) * plane]);
            }
        }
        let full = im2col(x.data(), &g);
        let mut dk_ref = vec![0.0; cout * g.patch()];
        gemm(cout, g.cols(), g.patch(), &gmat, false, &full, true, &mut dk_ref, false);
        let mut dcols = vec![0.0; g.patch() * g.cols()];
        gemm(g.patch(), cout, g.cols(), k.data(), true, &gmat, false, &mut dcols, false);
        let dx_ref = col2im(&dcols, &g);
        for (a, e) in dk.iter().zip(&dk_ref).chain(dx.unwrap().iter().zip(&dx_ref)) {
            assert!((a - e).abs() < 1e-9);
        }
        for (co, d) in db.iter().enumerate() {
            let e: f64 = gmat[co * b * plane..(co + 1) * b * plane].iter().sum();
            assert!((d - e).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn conv_matches_direct_loops((b, cin, cout, h, w, kh, kw, s, p) in geometry(), seed in 0u64..1000) {
            let mut v = seed as f64;
            let mut next = move || { v = (v * 16807.0 + 0.5) % 2147.0; v / 2147.0 - 0.5 };
            let x = Tensor::from_fn(&[b, cin, h, w], |_| next());
            let k = Tensor::from_fn(&[cout, cin, kh, kw], |_| next());
            let bias = Tensor::from_fn(&[cout], |_| next());
            let (out, _) = conv2d(&x, &k, &bias, s, p, false).unwrap();
            let expected = direct_conv(&x, &k, bias.data(), s, p);
            prop_assert_eq!(out.numel(), expected.len());
            for (a, e) in out.data().iter().zip(&expected) {
                prop_assert!((a - e).abs() < 1e-12);
            }
        }

        #[test]
        fn col2im_is_the_adjoint_of_im2col((b, cin, cout, h, w, kh, kw, s, p) in geometry()) {
            let g = ConvGeom::new(&[b, cin, h, w], &[cout, cin, kh, kw], &[cout], s, p).unwrap();
            let x: Vec<f64> = (0..b * cin * h * w).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
            let c: Vec<f64> = (0..g.patch() * g.cols()).map(|i| ((i * 53) % 13) as f64 - 6.0).collect();
            let lhs: f64 = im2col(&x, &g).iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(col2im(&c, &g)).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }
    }
}
