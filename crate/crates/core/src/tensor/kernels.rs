//! Forward and backward kernels behind every graph operation.
//!
//! These are plain functions over [`Tensor`] so they can be composed directly
//! (the model tests rebuild a forward pass from them without the graph).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor};

/// Upsampling factors supported by both upsampling modes.
pub const UPSAMPLE_FACTORS: [usize; 4] = [2, 4, 8, 16];

fn conv_out_size(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Unfolds one image (`C x H x W`) into `[C*kh*kw, oh*ow]` columns.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let p = oh * ow;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &img[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds columns back onto an image, accumulating overlaps.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    img: &mut [T],
) {
    let p = oh * ow;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            img[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(kernel: &Tensor<impl Scalar>, stride: usize, pad: usize) -> bool {
    kernel.height() == 1 && kernel.width() == 1 && stride == 1 && pad == 0
}

fn conv_geometry<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    let [_, c, h, w] = input.dims();
    let [oc, ic, kh, kw] = kernel.dims();
    if ic != c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: input.dims(),
            right: kernel.dims(),
        });
    }
    if bias.len() != oc {
        return Err(Error::ShapeMismatch {
            op: "conv2d bias",
            left: kernel.dims(),
            right: bias.dims(),
        });
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be at least 1"));
    }
    match (
        conv_out_size(h, kh, stride, pad),
        conv_out_size(w, kw, stride, pad),
    ) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 && oc > 0 => Ok((oh, ow)),
        _ => Err(Error::invalid(
            "conv2d",
            format!(
                "zero-sized output for input {:?}, kernel {:?}, stride {stride}, pad {pad}",
                input.dims(),
                kernel.dims()
            ),
        )),
    }
}

/// Zero-padded 2-D cross-correlation with bias.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (oh, ow) = conv_geometry(input, kernel, bias, stride, pad)?;
    let [n, c, h, w] = input.dims();
    let [oc, _, kh, kw] = kernel.dims();
    let p = oh * ow;
    let k = c * kh * kw;
    let mut out = Tensor::zeros([n, oc, oh, ow]);
    let pointwise = is_pointwise(kernel, stride, pad);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    for b in 0..n {
        let img = &input.data()[b * c * h * w..(b + 1) * c * h * w];
        let cols: &[T] = if pointwise {
            img
        } else {
            im2col(img, c, h, w, kh, kw, stride, pad, oh, ow, &mut cols);
            &cols
        };
        let dst = &mut out.data_mut()[b * oc * p..(b + 1) * oc * p];
        for (o, row) in dst.chunks_mut(p).enumerate() {
            row.fill(bias.data()[o]);
        }
        T::gemm(
            oc,
            k,
            p,
            T::one(),
            kernel.data(),
            k as isize,
            1,
            cols,
            p as isize,
            1,
            T::one(),
            dst,
            p as isize,
            1,
        );
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
///
/// The input gradient is skipped when `need_input` is false.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = input.dims();
    let [oc, _, kh, kw] = kernel.dims();
    let [_, _, oh, ow] = grad_out.dims();
    let p = oh * ow;
    let k = c * kh * kw;
    let pointwise = is_pointwise(kernel, stride, pad);
    let mut grad_kernel = Tensor::zeros(kernel.dims());
    let mut grad_bias = Tensor::zeros([oc, 1, 1, 1]);
    let mut grad_input = need_input.then(|| Tensor::zeros(input.dims()));
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcols = if need_input && !pointwise {
        vec![T::zero(); k * p]
    } else {
        Vec::new()
    };
    for b in 0..n {
        let img = &input.data()[b * c * h * w..(b + 1) * c * h * w];
        let dy = &grad_out.data()[b * oc * p..(b + 1) * oc * p];
        for (o, row) in dy.chunks(p).enumerate() {
            grad_bias.data_mut()[o] += row.iter().fold(T::zero(), |a, &v| a + v);
        }
        let cols_ref: &[T] = if pointwise {
            img
        } else {
            im2col(img, c, h, w, kh, kw, stride, pad, oh, ow, &mut cols);
            &cols
        };
        // dK += dY * cols^T
        T::gemm(
            oc,
            p,
            k,
            T::one(),
            dy,
            p as isize,
            1,
            cols_ref,
            1,
            p as isize,
            T::one(),
            grad_kernel.data_mut(),
            k as isize,
            1,
        );
        if let Some(gi) = grad_input.as_mut() {
            let gimg = &mut gi.data_mut()[b * c * h * w..(b + 1) * c * h * w];
            if pointwise {
                // dX = K^T * dY directly.
                T::gemm(
                    k,
                    oc,
                    p,
                    T::one(),
                    kernel.data(),
                    1,
                    k as isize,
                    dy,
                    p as isize,
                    1,
                    T::one(),
                    gimg,
                    p as isize,
                    1,
                );
            } else {
                T::gemm(
                    k,
                    oc,
                    p,
                    T::one(),
                    kernel.data(),
                    1,
                    k as isize,
                    dy,
                    p as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    p as isize,
                    1,
                );
                col2im(&dcols, c, h, w, kh, kw, stride, pad, oh, ow, gimg);
            }
        }
    }
    (grad_input, grad_kernel, grad_bias)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.dims(), data).expect("same dims")
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

/// Takes the forward output `y = sigmoid(x)`.
pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| g * y * (T::one() - y))
        .collect();
    Tensor::from_vec(output.dims(), data).expect("same dims")
}

/// 2x2 max pooling with stride 2.
pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims();
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::invalid(
            "maxpool2",
            format!("spatial dims must be even and non-zero, got {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            let src = input.plane(b, ch);
            let base = out.offset(b, ch, 0, 0);
            let dst = &mut out.data_mut()[base..base + oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = 2 * oy * w + 2 * ox;
                    dst[oy * ow + ox] = src[i].max(src[i + 1]).max(src[i + w]).max(src[i + w + 1]);
                }
            }
        }
    }
    Ok(out)
}

/// Routes each pooled gradient to the first maximal element of its block.
pub fn maxpool2_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input.dims();
    let (oh, ow) = (h / 2, w / 2);
    let mut grad = Tensor::zeros(input.dims());
    for b in 0..n {
        for ch in 0..c {
            let src = input.plane(b, ch);
            let g = grad_out.plane(b, ch);
            let base = grad.offset(b, ch, 0, 0);
            let dst = &mut grad.data_mut()[base..base + h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = 2 * oy * w + 2 * ox;
                    let mut best = i;
                    for j in [i + 1, i + w, i + w + 1] {
                        if src[j] > src[best] {
                            best = j;
                        }
                    }
                    dst[best] += g[oy * ow + ox];
                }
            }
        }
    }
    grad
}

/// Channel concatenation in input order.
pub fn concat<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("concat", "needs at least one input"))?;
    let [n, _, h, w] = first.dims();
    for t in inputs {
        let [tn, _, th, tw] = t.dims();
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left: first.dims(),
                right: t.dims(),
            });
        }
    }
    let total: usize = inputs.iter().map(|t| t.channels()).sum();
    let plane = h * w;
    let mut data = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for t in inputs {
            let c = t.channels();
            data.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    Tensor::from_vec([n, total, h, w], data)
}

/// Channel block `[offset, offset + len)`.
pub fn channel_block<T: Scalar>(input: &Tensor<T>, offset: usize, len: usize) -> Tensor<T> {
    let [n, c, h, w] = input.dims();
    let plane = h * w;
    let mut data = Vec::with_capacity(n * len * plane);
    for b in 0..n {
        let start = (b * c + offset) * plane;
        data.extend_from_slice(&input.data()[start..start + len * plane]);
    }
    Tensor::from_vec([n, len, h, w], data).expect("block dims")
}

pub fn validate_slice_sizes(channels: usize, sizes: &[usize]) -> Result<()> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::invalid("slice", "every slice size must be at least 1"));
    }
    let total: usize = sizes.iter().sum();
    if total != channels {
        return Err(Error::invalid(
            "slice",
            format!("sizes {sizes:?} sum to {total}, input has {channels} channels"),
        ));
    }
    Ok(())
}

/// Partitions channels into consecutive blocks of the given sizes.
pub fn slice<T: Scalar>(input: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    validate_slice_sizes(input.channels(), sizes)?;
    let mut offset = 0;
    Ok(sizes
        .iter()
        .map(|&len| {
            let t = channel_block(input, offset, len);
            offset += len;
            t
        })
        .collect())
}

/// Adds `grad` into channel block `[offset, offset + len)` of `target`.
pub fn add_channel_block<T: Scalar>(target: &mut Tensor<T>, offset: usize, grad: &Tensor<T>) {
    let [n, c, h, w] = target.dims();
    let plane = h * w;
    let len = grad.channels();
    for b in 0..n {
        let dst = &mut target.data_mut()[(b * c + offset) * plane..(b * c + offset + len) * plane];
        let src = &grad.data()[b * len * plane..(b + 1) * len * plane];
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
}

pub fn check_factor(factor: usize) -> Result<()> {
    if UPSAMPLE_FACTORS.contains(&factor) {
        Ok(())
    } else {
        Err(Error::invalid(
            "upsample",
            format!("factor {factor} is not one of {UPSAMPLE_FACTORS:?}"),
        ))
    }
}

/// Source taps for half-pixel bilinear interpolation with edge clamping.
fn bilinear_taps(out: usize, factor: usize, size: usize) -> (usize, usize, f64) {
    let src = ((out as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(size - 1);
    let i1 = (i0 + 1).min(size - 1);
    (i0, i1, src - i0 as f64)
}

/// Parameter-free bilinear upsampling (half-pixel centres, clamped edges).
pub fn upsample_bilinear<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    check_factor(factor)?;
    let [n, c, h, w] = input.dims();
    let (oh, ow) = (h * factor, w * factor);
    let ys: Vec<_> = (0..oh).map(|o| bilinear_taps(o, factor, h)).collect();
    let xs: Vec<_> = (0..ow).map(|o| bilinear_taps(o, factor, w)).collect();
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            let src = input.plane(b, ch);
            let base = out.offset(b, ch, 0, 0);
            let dst = &mut out.data_mut()[base..base + oh * ow];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let fy = T::from_f64_lossy(fy);
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let fx = T::from_f64_lossy(fx);
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    dst[oy * ow + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
    }
    Ok(out)
}

pub fn upsample_bilinear_backward<T: Scalar>(
    input_dims: Dims,
    grad_out: &Tensor<T>,
    factor: usize,
) -> Tensor<T> {
    let [n, c, h, w] = input_dims;
    let (oh, ow) = (h * factor, w * factor);
    let ys: Vec<_> = (0..oh).map(|o| bilinear_taps(o, factor, h)).collect();
    let xs: Vec<_> = (0..ow).map(|o| bilinear_taps(o, factor, w)).collect();
    let mut grad = Tensor::zeros(input_dims);
    for b in 0..n {
        for ch in 0..c {
            let g = grad_out.plane(b, ch);
            let base = grad.offset(b, ch, 0, 0);
            let dst = &mut grad.data_mut()[base..base + h * w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let fy = T::from_f64_lossy(fy);
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let fx = T::from_f64_lossy(fx);
                    let v = g[oy * ow + ox];
                    let top = v * (T::one() - fy);
                    let bot = v * fy;
                    dst[y0 * w + x0] += top * (T::one() - fx);
                    dst[y0 * w + x1] += top * fx;
                    dst[y1 * w + x0] += bot * (T::one() - fx);
                    dst[y1 * w + x1] += bot * fx;
                }
            }
        }
    }
    grad
}

/// Depthwise `[channels, 1, 2f, 2f]` kernel whose transposed convolution
/// reproduces bilinear interpolation.
pub fn bilinear_kernel<T: Scalar>(channels: usize, factor: usize) -> Tensor<T> {
    let size = 2 * factor;
    let center = factor as f64 - 0.5;
    let tap = |i: usize| 1.0 - (i as f64 - center).abs() / factor as f64;
    Tensor::from_fn([channels, 1, size, size], |_, _, y, x| {
        T::from_f64_lossy(tap(y) * tap(x))
    })
}

/// Transposed-convolution taps `(padded source index, kernel index)` for one
/// output coordinate. The source is edge-replicated by one pixel on each side.
#[inline]
fn learned_taps(out: usize, factor: usize) -> [(usize, usize); 2] {
    let t = out + factor + factor / 2;
    let hi = t / factor;
    [(hi, t - hi * factor), (hi - 1, t - (hi - 1) * factor)]
}

#[inline]
fn clamp_src(padded: usize, size: usize) -> usize {
    padded.saturating_sub(1).min(size - 1)
}

fn check_learned_kernel<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, factor: usize) -> Result<()> {
    check_factor(factor)?;
    let expected = [input.channels(), 1, 2 * factor, 2 * factor];
    if kernel.dims() != expected {
        return Err(Error::ShapeMismatch {
            op: "upsample(learned) kernel",
            left: expected,
            right: kernel.dims(),
        });
    }
    Ok(())
}

/// Learned upsampling: depthwise transposed convolution (kernel `2f`, stride
/// `f`) over an edge-replicated input, cropped to exactly `f` times the input.
/// With [`bilinear_kernel`] weights it equals [`upsample_bilinear`].
pub fn upsample_learned<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    factor: usize,
) -> Result<Tensor<T>> {
    check_learned_kernel(input, kernel, factor)?;
    let [n, c, h, w] = input.dims();
    let (oh, ow) = (h * factor, w * factor);
    let ks = 2 * factor;
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            let src = input.plane(b, ch);
            let k = kernel.plane(ch, 0);
            let base = out.offset(b, ch, 0, 0);
            let dst = &mut out.data_mut()[base..base + oh * ow];
            for oy in 0..oh {
                let ty = learned_taps(oy, factor);
                for ox in 0..ow {
                    let tx = learned_taps(ox, factor);
                    let mut acc = T::zero();
                    for &(py, ky) in &ty {
                        let sy = clamp_src(py, h);
                        for &(px, kx) in &tx {
                            acc += src[sy * w + clamp_src(px, w)] * k[ky * ks + kx];
                        }
                    }
                    dst[oy * ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

pub fn upsample_learned_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    factor: usize,
) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = input.dims();
    let (oh, ow) = (h * factor, w * factor);
    let ks = 2 * factor;
    let mut grad_in = Tensor::zeros(input.dims());
    let mut grad_k = Tensor::zeros(kernel.dims());
    for b in 0..n {
        for ch in 0..c {
            let src = input.plane(b, ch);
            let g = grad_out.plane(b, ch);
            let k = kernel.plane(ch, 0).to_vec();
            let gi_base = grad_in.offset(b, ch, 0, 0);
            let gk_base = grad_k.offset(ch, 0, 0, 0);
            for oy in 0..oh {
                let ty = learned_taps(oy, factor);
                for ox in 0..ow {
                    let tx = learned_taps(ox, factor);
                    let v = g[oy * ow + ox];
                    for &(py, ky) in &ty {
                        let sy = clamp_src(py, h);
                        for &(px, kx) in &tx {
                            let si = sy * w + clamp_src(px, w);
                            grad_in.data_mut()[gi_base + si] += v * k[ky * ks + kx];
                            grad_k.data_mut()[gk_base + ky * ks + kx] += v * src[si];
                        }
                    }
                }
            }
        }
    }
    (grad_in, grad_k)
}

#[inline]
fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (T::one() + (-z.abs()).exp()).ln()
}

/// Class weights `(positive, negative)` for a binary target.
///
/// Positives are weighted by the negative fraction and vice versa; a target
/// with only one class falls back to unit weights.
pub fn class_weights<T: Scalar>(target: &Tensor<T>) -> (T, T) {
    let total = target.len();
    let positives = target.data().iter().filter(|&&v| v > T::from_f64_lossy(0.5)).count();
    if positives == 0 || positives == total {
        return (T::one(), T::one());
    }
    let total = T::from_usize(total).expect("count fits");
    let pos = T::from_usize(positives).expect("count fits");
    ((total - pos) / total, pos / total)
}

/// Class-balanced sigmoid cross-entropy, averaged over pixels.
///
/// Returns the loss and its gradient with respect to the logits.
pub fn balanced_bce<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if logits.dims() != target.dims() {
        return Err(Error::ShapeMismatch {
            op: "balanced_bce",
            left: logits.dims(),
            right: target.dims(),
        });
    }
    if let Some(v) = target
        .data()
        .iter()
        .find(|&&v| v != T::zero() && v != T::one())
    {
        return Err(Error::invalid(
            "balanced_bce",
            format!("target must be binary, found {v}"),
        ));
    }
    let (wp, wn) = class_weights(target);
    let inv_n = T::one() / T::from_usize(logits.len()).expect("count fits");
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(logits.dims());
    for ((&x, &y), g) in logits
        .data()
        .iter()
        .zip(target.data())
        .zip(grad.data_mut())
    {
        let p = sigmoid_scalar(x);
        if y == T::one() {
            loss += wp * softplus(-x);
            *g = wp * (p - T::one()) * inv_n;
        } else {
            loss += wn * softplus(x);
            *g = wn * p * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}
