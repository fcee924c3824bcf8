//! Layer kinds and their per-sample forward/backward kernels.
//!
//! Activations are laid out height x width x channels. Convolutions are
//! valid-padded and lowered to a matrix product over an im2col buffer.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv2d { filters: usize, kernel: usize, stride: usize },
    MaxPool2d { size: usize },
    Relu,
    Flatten,
    Dense { units: usize },
    Softmax,
}

impl LayerSpec {
    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// Output shape for a given input shape, or `None` if incompatible.
    pub fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d { filters, kernel, stride } => {
                let [h, w, _c] = *input else { return None };
                if kernel == 0 || stride == 0 || filters == 0 || kernel > h || kernel > w {
                    return None;
                }
                Some(vec![(h - kernel) / stride + 1, (w - kernel) / stride + 1, filters])
            }
            LayerSpec::MaxPool2d { size } => {
                let [h, w, c] = *input else { return None };
                if size == 0 || size > h || size > w {
                    return None;
                }
                Some(vec![h / size, w / size, c])
            }
            LayerSpec::Relu => Some(input.to_vec()),
            LayerSpec::Flatten => Some(vec![input.iter().product()]),
            LayerSpec::Dense { units } => {
                let [_n] = *input else { return None };
                (units > 0).then(|| vec![units])
            }
            LayerSpec::Softmax => {
                let [_n] = *input else { return None };
                Some(input.to_vec())
            }
        }
    }

    /// `(weight shape, bias shape)` for parametric layers.
    pub fn param_shapes(&self, input: &[usize]) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d { filters, kernel, .. } => {
                let c = *input.get(2)?;
                Some((vec![kernel, kernel, c, filters], vec![filters]))
            }
            LayerSpec::Dense { units } => Some((vec![*input.first()?, units], vec![units])),
            _ => None,
        }
    }

    pub fn fan_in(&self, input: &[usize]) -> usize {
        match *self {
            LayerSpec::Conv2d { kernel, .. } => kernel * kernel * input.get(2).copied().unwrap_or(1),
            LayerSpec::Dense { .. } => input.first().copied().unwrap_or(1),
            _ => 0,
        }
    }
}

/// State a layer keeps from its forward pass for the backward pass.
pub(crate) enum Cache {
    None,
    Cols(Vec<f64>),
    Argmax(Vec<usize>),
    Output(Vec<f64>),
}

fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slices are sized m*k, k*n, m*n and the strides describe
    // exactly those row-major (or transposed) layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(input: &[f64], h: usize, w: usize, c: usize, kernel: usize, stride: usize, oh: usize, ow: usize) -> Vec<f64> {
    let k = kernel * kernel * c;
    let mut cols = vec![0.0; oh * ow * k];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * k..(oy * ow + ox + 1) * k];
            for ky in 0..kernel {
                let iy = oy * stride + ky;
                let src = (iy * w + ox * stride) * c;
                let dst = ky * kernel * c;
                row[dst..dst + kernel * c].copy_from_slice(&input[src..src + kernel * c]);
            }
        }
    }
    debug_assert!(h >= (oh - 1) * stride + kernel);
    cols
}

fn col2im(dcols: &[f64], w: usize, c: usize, kernel: usize, stride: usize, oh: usize, ow: usize, dinput: &mut [f64]) {
    let k = kernel * kernel * c;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &dcols[(oy * ow + ox) * k..(oy * ow + ox + 1) * k];
            for ky in 0..kernel {
                let iy = oy * stride + ky;
                let dst = (iy * w + ox * stride) * c;
                let src = ky * kernel * c;
                for (d, s) in dinput[dst..dst + kernel * c].iter_mut().zip(&row[src..src + kernel * c]) {
                    *d += s;
                }
            }
        }
    }
}

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Forward one sample through one layer.
pub(crate) fn forward(
    spec: &LayerSpec,
    in_shape: &[usize],
    out_shape: &[usize],
    params: Option<(&[f64], &[f64])>,
    input: &[f64],
    keep_cache: bool,
) -> (Vec<f64>, Cache) {
    match *spec {
        LayerSpec::Conv2d { filters, kernel, stride } => {
            let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
            let (oh, ow) = (out_shape[0], out_shape[1]);
            let (weight, bias) = params.expect("conv has parameters");
            let cols = im2col(input, h, w, c, kernel, stride, oh, ow);
            let mut out = Vec::with_capacity(oh * ow * filters);
            for _ in 0..oh * ow {
                out.extend_from_slice(bias);
            }
            gemm(oh * ow, kernel * kernel * c, filters, &cols, false, weight, false, &mut out, 1.0);
            (out, if keep_cache { Cache::Cols(cols) } else { Cache::None })
        }
        LayerSpec::MaxPool2d { size } => {
            let (w, c) = (in_shape[1], in_shape[2]);
            let (oh, ow) = (out_shape[0], out_shape[1]);
            let mut out = Vec::with_capacity(oh * ow * c);
            let mut arg = Vec::with_capacity(if keep_cache { oh * ow * c } else { 0 });
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for py in 0..size {
                            for px in 0..size {
                                let i = ((oy * size + py) * w + ox * size + px) * c + ch;
                                if input[i] > best {
                                    best = input[i];
                                    best_i = i;
                                }
                            }
                        }
                        out.push(best);
                        if keep_cache {
                            arg.push(best_i);
                        }
                    }
                }
            }
            (out, if keep_cache { Cache::Argmax(arg) } else { Cache::None })
        }
        LayerSpec::Relu => (input.iter().map(|&v| v.max(0.0)).collect(), Cache::None),
        LayerSpec::Flatten => (input.to_vec(), Cache::None),
        LayerSpec::Dense { units } => {
            let (weight, bias) = params.expect("dense has parameters");
            let mut out = bias.to_vec();
            gemm(1, in_shape[0], units, input, false, weight, false, &mut out, 1.0);
            (out, Cache::None)
        }
        LayerSpec::Softmax => {
            let out = softmax(input);
            let cache = if keep_cache { Cache::Output(out.clone()) } else { Cache::None };
            (out, cache)
        }
    }
}

/// Backward one sample through one layer. Parameter gradients are
/// accumulated into `grads` when the layer is parametric.
pub(crate) fn backward(
    spec: &LayerSpec,
    in_shape: &[usize],
    out_shape: &[usize],
    params: Option<(&[f64], &[f64])>,
    input: &[f64],
    cache: &Cache,
    dout: &[f64],
    grads: Option<(&mut [f64], &mut [f64])>,
) -> Vec<f64> {
    match *spec {
        LayerSpec::Conv2d { filters, kernel, stride } => {
            let (w, c) = (in_shape[1], in_shape[2]);
            let (oh, ow) = (out_shape[0], out_shape[1]);
            let k = kernel * kernel * c;
            let Cache::Cols(cols) = cache else { unreachable!("conv cache") };
            let (weight, _) = params.expect("conv has parameters");
            if let Some((gw, gb)) = grads {
                gemm(k, oh * ow, filters, cols, true, dout, false, gw, 1.0);
                for row in dout.chunks(filters) {
                    for (b, d) in gb.iter_mut().zip(row) {
                        *b += d;
                    }
                }
            }
            let mut dcols = vec![0.0; oh * ow * k];
            gemm(oh * ow, filters, k, dout, false, weight, true, &mut dcols, 0.0);
            let mut dinput = vec![0.0; input.len()];
            col2im(&dcols, w, c, kernel, stride, oh, ow, &mut dinput);
            dinput
        }
        LayerSpec::MaxPool2d { .. } => {
            let Cache::Argmax(arg) = cache else { unreachable!("pool cache") };
            let mut dinput = vec![0.0; input.len()];
            for (&i, d) in arg.iter().zip(dout) {
                dinput[i] += d;
            }
            dinput
        }
        LayerSpec::Relu => input.iter().zip(dout).map(|(&x, &d)| if x > 0.0 { d } else { 0.0 }).collect(),
        LayerSpec::Flatten => dout.to_vec(),
        LayerSpec::Dense { units } => {
            let n_in = in_shape[0];
            let (weight, _) = params.expect("dense has parameters");
            if let Some((gw, gb)) = grads {
                gemm(n_in, 1, units, input, false, dout, false, gw, 1.0);
                for (b, d) in gb.iter_mut().zip(dout) {
                    *b += d;
                }
            }
            let mut dinput = vec![0.0; n_in];
            gemm(1, units, n_in, dout, false, weight, true, &mut dinput, 0.0);
            dinput
        }
        LayerSpec::Softmax => {
            let Cache::Output(p) = cache else { unreachable!("softmax cache") };
            let dot: f64 = p.iter().zip(dout).map(|(a, b)| a * b).sum();
            p.iter().zip(dout).map(|(pi, di)| pi * (di - dot)).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_of_the_reference_stack() {
        let conv = LayerSpec::Conv2d { filters: 16, kernel: 3, stride: 1 };
        assert_eq!(conv.output_shape(&[128, 128, 1]), Some(vec![126, 126, 16]));
        let pool = LayerSpec::MaxPool2d { size: 2 };
        assert_eq!(pool.output_shape(&[61, 61, 32]), Some(vec![30, 30, 32]));
        assert_eq!(LayerSpec::Dense { units: 4 }.output_shape(&[3, 3]), None);
        assert_eq!(conv.output_shape(&[2, 2, 1]), None);
    }

    #[test]
    fn one_by_one_kernel_by_hand() {
        // 4x4 single-channel input, 1x1 kernel with weight 2 and bias 1
        let input: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let spec = LayerSpec::Conv2d { filters: 1, kernel: 1, stride: 1 };
        let (out, _) = forward(&spec, &[4, 4, 1], &[4, 4, 1], Some((&[2.0], &[1.0])), &input, false);
        let expected: Vec<f64> = (0..16).map(|v| 2.0 * v as f64 + 1.0).collect();
        assert_eq!(out, expected);
    }

    #[test]
    fn three_by_three_kernel_by_hand() {
        // all-ones 3x3 kernel over a 4x4 ramp: each output is its window sum
        let input: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let spec = LayerSpec::Conv2d { filters: 1, kernel: 3, stride: 1 };
        let (out, _) = forward(&spec, &[4, 4, 1], &[2, 2, 1], Some((&[1.0; 9], &[0.0])), &input, false);
        // window at (0,0): 0+1+2+4+5+6+8+9+10 = 45; shifting right adds 9, down adds 36
        assert_eq!(out, vec![45.0, 54.0, 81.0, 90.0]);
    }

    #[test]
    fn maxpool_routes_to_argmax() {
        let input = vec![1.0, 3.0, 2.0, 0.0];
        let spec = LayerSpec::MaxPool2d { size: 2 };
        let (out, cache) = forward(&spec, &[2, 2, 1], &[1, 1, 1], None, &input, true);
        assert_eq!(out, vec![3.0]);
        let d = backward(&spec, &[2, 2, 1], &[1, 1, 1], None, &input, &cache, &[5.0], None);
        assert_eq!(d, vec![0.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_is_normalized() {
        let p = softmax(&[1000.0, -1000.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| v.is_finite()));
    }
}
