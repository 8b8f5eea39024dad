//! Forward and backward math for each layer kind, as pure functions.
//!
//! Spatial tensors are `(channels, height, width)`; convolution weights are
//! `(out_channels, in_channels, kernel, kernel)`; fully connected weights are
//! `(out, in)`.

use rand::Rng;

use super::spec::{ConvSpec, LrnSpec, PoolSpec};
use super::{LayerState, Scalar, ShapeError, Tensor};

/// Which gradients a backward call should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Want {
    pub input: bool,
    pub params: bool,
}

#[derive(Debug)]
pub struct ParamGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weights: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

fn chw(t: &Tensor<impl Scalar>, what: &'static str) -> Result<[usize; 3], ShapeError> {
    match *t.shape() {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(ShapeError::Mismatch {
            what,
            expected: "(channels, height, width)".into(),
            found: t.shape().to_vec(),
        }),
    }
}

/// Output index range `[lo, hi)` such that `o * stride + offset - pad` lies in `[0, extent)`.
#[inline]
fn valid_range(out: usize, stride: usize, offset: usize, pad: usize, extent: usize) -> (usize, usize) {
    let lo = if offset >= pad {
        0
    } else {
        (pad - offset).div_ceil(stride)
    };
    let hi = if extent + pad > offset {
        ((extent + pad - offset - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn conv_geometry<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    conv: &ConvSpec,
) -> Result<([usize; 3], [usize; 3]), ShapeError> {
    let [c, h, w] = chw(input, "conv input")?;
    let expected = [conv.out_channels, c, conv.kernel, conv.kernel];
    if weights.shape() != expected {
        return Err(ShapeError::Mismatch {
            what: "conv filters",
            expected: format!("{expected:?}"),
            found: weights.shape().to_vec(),
        });
    }
    let oh = conv.output_extent(h).ok_or_else(|| ShapeError::Mismatch {
        what: "conv input height",
        expected: format!(">= {}", conv.kernel.saturating_sub(2 * conv.pad)),
        found: input.shape().to_vec(),
    })?;
    let ow = conv.output_extent(w).ok_or_else(|| ShapeError::Mismatch {
        what: "conv input width",
        expected: format!(">= {}", conv.kernel.saturating_sub(2 * conv.pad)),
        found: input.shape().to_vec(),
    })?;
    Ok(([c, h, w], [conv.out_channels, oh, ow]))
}

/// Unrolls input patches into a `(c·k·k, oh·ow)` matrix; padding reads as zero.
fn im2col<T: Scalar>(x: &[T], [c, h, w]: [usize; 3], [oh, ow]: [usize; 2], conv: &ConvSpec) -> Vec<T> {
    let (k, s, p) = (conv.kernel, conv.stride, conv.pad);
    let mut col = vec![T::zero(); c * k * k * oh * ow];
    for ci in 0..c {
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(oh, s, ky, p, h);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(ow, s, kx, p, w);
                let row = &mut col[((ci * k + ky) * k + kx) * oh * ow..][..oh * ow];
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - p;
                    let src = &x[(ci * h + iy) * w..][..w];
                    for ox in ox_lo..ox_hi {
                        row[oy * ow + ox] = src[ox * s + kx - p];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
fn col2im<T: Scalar>(col: &[T], [c, h, w]: [usize; 3], [oh, ow]: [usize; 2], conv: &ConvSpec) -> Vec<T> {
    let (k, s, p) = (conv.kernel, conv.stride, conv.pad);
    let mut x = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(oh, s, ky, p, h);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(ow, s, kx, p, w);
                let row = &col[((ci * k + ky) * k + kx) * oh * ow..][..oh * ow];
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - p;
                    let dst = &mut x[(ci * h + iy) * w..][..w];
                    for ox in ox_lo..ox_hi {
                        let ix = ox * s + kx - p;
                        dst[ix] = dst[ix] + row[oy * ow + ox];
                    }
                }
            }
        }
    }
    x
}

/// Zero-padded 2-D convolution (cross-correlation) with one bias per filter.
pub fn conv_forward<T: Scalar>(
    input: &Tensor<T>,
    layer: &LayerState<T>,
    conv: &ConvSpec,
) -> Result<Tensor<T>, ShapeError> {
    let ([c, h, w], [oc, oh, ow]) = conv_geometry(input, &layer.weights, conv)?;
    let patch = c * conv.kernel * conv.kernel;
    let col = im2col(input.data(), [c, h, w], [oh, ow], conv);
    let mut out = Vec::with_capacity(oc * oh * ow);
    for &b in layer.bias.data() {
        out.extend(std::iter::repeat_n(b, oh * ow));
    }
    T::gemm(oc, patch, oh * ow, layer.weights.data(), false, &col, false, T::one(), &mut out);
    Tensor::from_vec(&[oc, oh, ow], out)
}

pub fn conv_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    conv: &ConvSpec,
    grad_out: &Tensor<T>,
    want: Want,
) -> Result<ParamGrads<T>, ShapeError> {
    let ([c, h, w], [oc, oh, ow]) = conv_geometry(input, weights, conv)?;
    if grad_out.shape() != [oc, oh, ow] {
        return Err(ShapeError::Mismatch {
            what: "conv output gradient",
            expected: format!("{:?}", [oc, oh, ow]),
            found: grad_out.shape().to_vec(),
        });
    }
    let patch = c * conv.kernel * conv.kernel;
    let g = grad_out.data();
    let (mut gw, mut gb) = (None, None);
    if want.params {
        let col = im2col(input.data(), [c, h, w], [oh, ow], conv);
        let mut dw = vec![T::zero(); oc * patch];
        T::gemm(oc, oh * ow, patch, g, false, &col, true, T::zero(), &mut dw);
        gw = Some(Tensor::from_vec(weights.shape(), dw)?);
        let db = g.chunks_exact(oh * ow).map(|plane| plane.iter().copied().sum()).collect();
        gb = Some(Tensor::from_vec(&[oc], db)?);
    }
    let gx = if want.input {
        let mut dcol = vec![T::zero(); patch * oh * ow];
        T::gemm(patch, oc, oh * ow, weights.data(), true, g, false, T::zero(), &mut dcol);
        Some(Tensor::from_vec(&[c, h, w], col2im(&dcol, [c, h, w], [oh, ow], conv))?)
    } else {
        None
    };
    Ok(ParamGrads {
        input: gx,
        weights: gw,
        bias: gb,
    })
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Passes the gradient where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data).expect("relu shapes agree")
}

/// Max pooling without padding. Also returns, per output cell, the flat input
/// index of the winner; ties go to the first element in row-major scan order.
pub fn maxpool_forward<T: Scalar>(
    input: &Tensor<T>,
    pool: &PoolSpec,
) -> Result<(Tensor<T>, Vec<usize>), ShapeError> {
    let [c, h, w] = chw(input, "maxpool input")?;
    let too_small = || ShapeError::Mismatch {
        what: "maxpool input",
        expected: format!("spatial extents >= {}", pool.window),
        found: input.shape().to_vec(),
    };
    let oh = pool.output_extent(h).ok_or_else(too_small)?;
    let ow = pool.output_extent(w).ok_or_else(too_small)?;
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = ci * h * w + oy * pool.stride * w + ox * pool.stride;
                let mut best = x[best_idx];
                for dy in 0..pool.window {
                    let row = ci * h * w + (oy * pool.stride + dy) * w + ox * pool.stride;
                    for dx in 0..pool.window {
                        let v = x[row + dx];
                        if v > best {
                            best = v;
                            best_idx = row + dx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::from_vec(&[c, oh, ow], out)?, argmax))
}

pub fn maxpool_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] = d[idx] + g;
    }
    gx
}

/// Channel window `[lo, hi)` around channel `ch`; the window of size `n`
/// starts `(n - 1) / 2` channels below.
#[inline]
fn lrn_window(ch: usize, size: usize, channels: usize) -> (usize, usize) {
    let before = (size - 1) / 2;
    let lo = ch.saturating_sub(before);
    let hi = (ch + size - before).min(channels);
    (lo, hi)
}

/// Returns the normalized output and the per-element denominators base
/// `k + alpha * sum x^2`, which the backward pass reuses.
pub fn lrn_forward<T: Scalar>(
    input: &Tensor<T>,
    lrn: &LrnSpec,
) -> Result<(Tensor<T>, Tensor<T>), ShapeError> {
    let [c, h, w] = chw(input, "lrn input")?;
    let plane = h * w;
    let x = input.data();
    let alpha = T::from(lrn.alpha).unwrap();
    let beta = T::from(lrn.beta).unwrap();
    let k = T::from(lrn.k).unwrap();
    let sq: Vec<T> = x.iter().map(|&v| v * v).collect();
    let mut scale = vec![k; c * plane];
    for ch in 0..c {
        let (lo, hi) = lrn_window(ch, lrn.size, c);
        for j in lo..hi {
            let src = &sq[j * plane..(j + 1) * plane];
            let dst = &mut scale[ch * plane..(ch + 1) * plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + alpha * s;
            }
        }
    }
    let out = x
        .iter()
        .zip(&scale)
        .map(|(&v, &s)| v * s.powf(-beta))
        .collect();
    Ok((
        Tensor::from_vec(&[c, h, w], out)?,
        Tensor::from_vec(&[c, h, w], scale)?,
    ))
}

pub fn lrn_backward<T: Scalar>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    lrn: &LrnSpec,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>, ShapeError> {
    let [c, h, w] = chw(input, "lrn input")?;
    let plane = h * w;
    let alpha = T::from(lrn.alpha).unwrap();
    let beta = T::from(lrn.beta).unwrap();
    let two = T::from(2.0).unwrap();
    let x = input.data();
    let s = scale.data();
    let g = grad_out.data();
    let pow: Vec<T> = s.iter().map(|&v| v.powf(-beta)).collect();
    // t_c = g_c * x_c * s_c^(-beta - 1)
    let t: Vec<T> = (0..x.len()).map(|i| g[i] * x[i] * pow[i] / s[i]).collect();
    let mut gx: Vec<T> = (0..x.len()).map(|i| g[i] * pow[i]).collect();
    let coef = two * alpha * beta;
    for ch in 0..c {
        // channel `j` contributes to every output channel whose window contains it
        let (lo, hi) = lrn_window(ch, lrn.size, c);
        for j in lo..hi {
            for p in 0..plane {
                let i = j * plane + p;
                gx[i] = gx[i] - coef * x[i] * t[ch * plane + p];
            }
        }
    }
    Tensor::from_vec(&[c, h, w], gx)
}

fn fc_check<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<(usize, usize), ShapeError> {
    let (out, inp) = match *weights.shape() {
        [o, i] => (o, i),
        _ => {
            return Err(ShapeError::Mismatch {
                what: "fc weights",
                expected: "(out, in)".into(),
                found: weights.shape().to_vec(),
            })
        }
    };
    if input.len() != inp {
        return Err(ShapeError::Mismatch {
            what: "fc input",
            expected: format!("{inp} elements"),
            found: input.shape().to_vec(),
        });
    }
    Ok((out, inp))
}

/// Fully connected layer over the flattened input.
pub fn fc_forward<T: Scalar>(input: &Tensor<T>, layer: &LayerState<T>) -> Result<Tensor<T>, ShapeError> {
    let (out, inp) = fc_check(input, &layer.weights)?;
    let x = input.data();
    let w = layer.weights.data();
    let b = layer.bias.data();
    let y = (0..out)
        .map(|o| {
            w[o * inp..(o + 1) * inp]
                .iter()
                .zip(x)
                .fold(b[o], |acc, (&wv, &xv)| acc + wv * xv)
        })
        .collect();
    Tensor::from_vec(&[out], y)
}

pub fn fc_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    want: Want,
) -> Result<ParamGrads<T>, ShapeError> {
    let (out, inp) = fc_check(input, weights)?;
    let x = input.data();
    let w = weights.data();
    let g = grad_out.data();
    let gx = want.input.then(|| {
        let mut gx = vec![T::zero(); inp];
        for o in 0..out {
            let go = g[o];
            for (d, &wv) in gx.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                *d = *d + go * wv;
            }
        }
        gx
    });
    let gw = want.params.then(|| {
        let mut gw = Vec::with_capacity(out * inp);
        for &go in g.iter().take(out) {
            gw.extend(x.iter().map(|&xv| go * xv));
        }
        gw
    });
    Ok(ParamGrads {
        input: gx.map(|d| Tensor::from_vec(input.shape(), d)).transpose()?,
        weights: gw.map(|d| Tensor::from_vec(&[out, inp], d)).transpose()?,
        bias: want.params.then(|| grad_out.clone()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Eval,
}

/// Inverted dropout: in train mode each unit is zeroed with probability `p` and
/// survivors are scaled by `1 / (1 - p)`; eval mode is the identity. Returns the
/// multiplicative mask applied (absent in eval mode).
pub fn dropout_forward<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    p: f64,
    mode: DropoutMode,
    rng: &mut R,
) -> (Tensor<T>, Option<Vec<T>>) {
    if mode == DropoutMode::Eval || p == 0.0 {
        return (input.clone(), None);
    }
    let keep = T::from(1.0 / (1.0 - p)).unwrap();
    let mask: Vec<T> = (0..input.len())
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    let out = apply_mask(input, &mask);
    (out, Some(mask))
}

pub fn apply_mask<T: Scalar>(input: &Tensor<T>, mask: &[T]) -> Tensor<T> {
    let data = input.data().iter().zip(mask).map(|(&x, &m)| x * m).collect();
    Tensor::from_vec(input.shape(), data).expect("mask matches input")
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total = exps.iter().fold(T::zero(), |a, &e| a + e);
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy of the softmax against `label`; returns `(loss, dloss/dlogits)`.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, label: usize) -> Result<(T, Tensor<T>), ShapeError> {
    let z = logits.data();
    if label >= z.len() {
        return Err(ShapeError::LabelOutOfRange {
            label,
            classes: z.len(),
        });
    }
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let sum = z.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
    let log_norm = max + sum.ln();
    let loss = log_norm - z[label];
    let mut grad: Vec<T> = z.iter().map(|&v| (v - log_norm).exp()).collect();
    grad[label] = grad[label] - T::one();
    Ok((loss, Tensor::from_vec(logits.shape(), grad)?))
}
