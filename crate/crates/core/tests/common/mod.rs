//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's layer math.
#![allow(dead_code)]

/// Convolution by explicit zero-padding followed by a quadruple loop nest.
pub fn brute_conv(
    input: &[f64],
    [c, h, w]: [usize; 3],
    weights: &[f64],
    bias: &[f64],
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 3]) {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut padded = vec![0.0; c * ph * pw];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                padded[(ci * ph + y + pad) * pw + x + pad] = input[(ci * h + y) * w + x];
            }
        }
    }
    let oh = (ph - kernel) / stride + 1;
    let ow = (pw - kernel) / stride + 1;
    let mut out = vec![0.0; out_channels * oh * ow];
    for o in 0..out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[o];
                for ci in 0..c {
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let wv = weights[((o * c + ci) * kernel + ky) * kernel + kx];
                            acc += wv * padded[(ci * ph + oy * stride + ky) * pw + ox * stride + kx];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (out, [out_channels, oh, ow])
}

pub fn brute_maxpool(input: &[f64], [c, h, w]: [usize; 3], window: usize, stride: usize) -> (Vec<f64>, [usize; 3]) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::new();
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let cells = (0..window).flat_map(|dy| (0..window).map(move |dx| (dy, dx)));
                let m = cells
                    .map(|(dy, dx)| input[(ci * h + oy * stride + dy) * w + ox * stride + dx])
                    .fold(f64::NEG_INFINITY, f64::max);
                out.push(m);
            }
        }
    }
    (out, [c, oh, ow])
}

/// Direct per-element evaluation of `x_c / (k + alpha * sum_window x^2)^beta`.
pub fn brute_lrn(input: &[f64], [c, h, w]: [usize; 3], size: usize, alpha: f64, beta: f64, k: f64) -> Vec<f64> {
    let mut out = vec![0.0; input.len()];
    for ch in 0..c {
        let first = ch as isize - ((size as isize - 1) / 2);
        for p in 0..h * w {
            let mut sum = 0.0;
            for j in first..first + size as isize {
                if j >= 0 && (j as usize) < c {
                    let v = input[j as usize * h * w + p];
                    sum += v * v;
                }
            }
            out[ch * h * w + p] = input[ch * h * w + p] / (k + alpha * sum).powf(beta);
        }
    }
    out
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let plus = f(&probe);
            probe[i] = x[i] - eps;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
