//! Temporal max pooling, 1-D valid cross-correlation and dense layers, with
//! their backward passes. Signals are `channels x length` row-major slices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_width: usize,
    pub pool_width: usize,
}

/// Where temporal max pooling sits relative to the convolution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolOrder {
    /// `relu(b + K * pool(x))`
    #[default]
    PoolThenConv,
    /// `pool(relu(b + K * x))`
    ConvThenPool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative given the pre-activation. ReLU uses 0 at the kink.
    #[inline]
    pub fn grad(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => f64::from(u8::from(pre > 0.0)),
            Activation::Identity => 1.0,
        }
    }
}

impl ConvLayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel_width == 0 || self.pool_width == 0 {
            return Err(Error::Config(format!("conv layer {self:?} has a zero dimension")));
        }
        Ok(())
    }

    /// Output length for an input of length `len`, or `None` when too short.
    pub fn output_length(&self, len: usize, order: PoolOrder) -> Option<usize> {
        match order {
            PoolOrder::PoolThenConv => (len / self.pool_width + 1).checked_sub(self.kernel_width).filter(|&l| l > 0),
            PoolOrder::ConvThenPool => (len + 1)
                .checked_sub(self.kernel_width)
                .map(|l| l / self.pool_width)
                .filter(|&l| l > 0),
        }
    }

    pub fn kernel_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_width
    }
}

/// Non-overlapping max pooling along time. Returns pooled values and the
/// input position of each maximum (first one on ties).
pub fn max_pool(input: &[f64], channels: usize, len: usize, width: usize) -> (Vec<f64>, Vec<usize>) {
    let out_len = len / width;
    let mut pooled = Vec::with_capacity(channels * out_len);
    let mut argmax = Vec::with_capacity(channels * out_len);
    for c in 0..channels {
        let row = &input[c * len..(c + 1) * len];
        for j in 0..out_len {
            let start = j * width;
            let mut best = start;
            for t in start + 1..start + width {
                if row[t] > row[best] {
                    best = t;
                }
            }
            pooled.push(row[best]);
            argmax.push(c * len + best);
        }
    }
    (pooled, argmax)
}

/// Valid cross-correlation plus bias: `out[o][l] = b[o] + sum_c sum_t K[o][c][t] x[c][l+t]`.
pub fn correlate(input: &[f64], in_channels: usize, len: usize, kernel: &[f64], bias: &[f64], kw: usize) -> Vec<f64> {
    let out_channels = bias.len();
    let out_len = len + 1 - kw;
    let mut out = vec![0.0; out_channels * out_len];
    for o in 0..out_channels {
        let row = &mut out[o * out_len..(o + 1) * out_len];
        row.iter_mut().for_each(|v| *v = bias[o]);
        for c in 0..in_channels {
            let x = &input[c * len..(c + 1) * len];
            let k = &kernel[(o * in_channels + c) * kw..(o * in_channels + c + 1) * kw];
            for (t, &kv) in k.iter().enumerate() {
                for (r, &xv) in row.iter_mut().zip(&x[t..t + out_len]) {
                    *r += kv * xv;
                }
            }
        }
    }
    out
}

/// Everything the backward pass needs from one conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTrace {
    pub input_len: usize,
    /// Signal fed to the correlation (pooled input, or the raw input when
    /// pooling comes after).
    pub conv_input: Vec<f64>,
    pub conv_input_len: usize,
    pub pre_activation: Vec<f64>,
    pub argmax: Vec<usize>,
    pub output_len: usize,
}

/// One conv layer forward. Returns the activation map (`out_channels x
/// output_len`) and its trace.
pub fn conv_forward(
    input: &[f64],
    len: usize,
    spec: &ConvLayerSpec,
    kernel: &[f64],
    bias: &[f64],
    order: PoolOrder,
    layer: usize,
) -> Result<(Vec<f64>, ConvTrace)> {
    if input.len() != spec.in_channels * len {
        return Err(Error::Shape(format!(
            "conv layer {layer}: expected {} x {len} input values, got {}",
            spec.in_channels,
            input.len()
        )));
    }
    let output_len = spec.output_length(len, order).ok_or_else(|| {
        Error::Shape(format!(
            "conv layer {layer}: input length {len} too short for pool {} and kernel {}",
            spec.pool_width, spec.kernel_width
        ))
    })?;
    match order {
        PoolOrder::PoolThenConv => {
            let (pooled, argmax) = max_pool(input, spec.in_channels, len, spec.pool_width);
            let plen = len / spec.pool_width;
            let pre = correlate(&pooled, spec.in_channels, plen, kernel, bias, spec.kernel_width);
            let out = pre.iter().map(|&v| v.max(0.0)).collect();
            Ok((
                out,
                ConvTrace {
                    input_len: len,
                    conv_input: pooled,
                    conv_input_len: plen,
                    pre_activation: pre,
                    argmax,
                    output_len,
                },
            ))
        }
        PoolOrder::ConvThenPool => {
            let pre = correlate(input, spec.in_channels, len, kernel, bias, spec.kernel_width);
            let clen = len + 1 - spec.kernel_width;
            let act: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
            let (out, argmax) = max_pool(&act, spec.out_channels, clen, spec.pool_width);
            Ok((
                out,
                ConvTrace {
                    input_len: len,
                    conv_input: input.to_vec(),
                    conv_input_len: len,
                    pre_activation: pre,
                    argmax,
                    output_len,
                },
            ))
        }
    }
}

/// Accumulates kernel and bias gradients of one conv layer and, when
/// `want_input` is set, returns the gradient with respect to its input.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    grad_out: &[f64],
    trace: &ConvTrace,
    spec: &ConvLayerSpec,
    kernel: &[f64],
    order: PoolOrder,
    grad_kernel: &mut [f64],
    grad_bias: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let (cin, cout, kw) = (spec.in_channels, spec.out_channels, spec.kernel_width);
    let clen = trace.conv_input_len;
    let pre_len = clen + 1 - kw;

    // Gradient at the correlation output (before ReLU).
    let mut grad_pre = vec![0.0; cout * pre_len];
    match order {
        PoolOrder::PoolThenConv => {
            for ((g, &go), &p) in grad_pre.iter_mut().zip(grad_out).zip(&trace.pre_activation) {
                *g = if p > 0.0 { go } else { 0.0 };
            }
        }
        PoolOrder::ConvThenPool => {
            for (&go, &pos) in grad_out.iter().zip(&trace.argmax) {
                if trace.pre_activation[pos] > 0.0 {
                    grad_pre[pos] += go;
                }
            }
        }
    }

    let mut grad_conv_input = want_input.then(|| vec![0.0; cin * clen]);
    for o in 0..cout {
        let gp = &grad_pre[o * pre_len..(o + 1) * pre_len];
        grad_bias[o] += gp.iter().sum::<f64>();
        for c in 0..cin {
            let x = &trace.conv_input[c * clen..(c + 1) * clen];
            let base = (o * cin + c) * kw;
            for t in 0..kw {
                let mut acc = 0.0;
                for (g, xv) in gp.iter().zip(&x[t..t + pre_len]) {
                    acc += g * xv;
                }
                grad_kernel[base + t] += acc;
                if let Some(gi) = grad_conv_input.as_mut() {
                    let kv = kernel[base + t];
                    for (dst, g) in gi[c * clen + t..c * clen + t + pre_len].iter_mut().zip(gp) {
                        *dst += kv * g;
                    }
                }
            }
        }
    }

    let gci = grad_conv_input?;
    match order {
        PoolOrder::ConvThenPool => Some(gci),
        PoolOrder::PoolThenConv => {
            let mut grad_in = vec![0.0; cin * trace.input_len];
            for (&g, &pos) in gci.iter().zip(&trace.argmax) {
                grad_in[pos] += g;
            }
            Some(grad_in)
        }
    }
}

/// Dense layer `f(b + W^T v)` with `W` stored `in x out`. Returns
/// `(pre_activation, output)`.
pub fn fc_forward(v: &[f64], weights: &[f64], bias: &[f64], activation: Activation) -> Result<(Vec<f64>, Vec<f64>)> {
    let out_dim = bias.len();
    if out_dim == 0 || weights.len() != v.len() * out_dim {
        return Err(Error::Shape(format!(
            "dense layer: {} weights for {} inputs and {} outputs",
            weights.len(),
            v.len(),
            out_dim
        )));
    }
    let mut pre = bias.to_vec();
    for (i, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        let row = &weights[i * out_dim..(i + 1) * out_dim];
        for (p, &w) in pre.iter_mut().zip(row) {
            *p += w * vi;
        }
    }
    let out = pre.iter().map(|&p| activation.apply(p)).collect();
    Ok((pre, out))
}

/// Accumulates dense-layer gradients and returns the gradient at its input.
pub fn fc_backward(
    grad_out: &[f64],
    input: &[f64],
    pre: &[f64],
    weights: &[f64],
    activation: Activation,
    grad_weights: &mut [f64],
    grad_bias: &mut [f64],
) -> Vec<f64> {
    let out_dim = pre.len();
    let grad_pre: Vec<f64> = grad_out.iter().zip(pre).map(|(g, &p)| g * activation.grad(p)).collect();
    for (gb, g) in grad_bias.iter_mut().zip(&grad_pre) {
        *gb += g;
    }
    let mut grad_in = vec![0.0; input.len()];
    for (i, &vi) in input.iter().enumerate() {
        let row = &weights[i * out_dim..(i + 1) * out_dim];
        let grow = &mut grad_weights[i * out_dim..(i + 1) * out_dim];
        let mut acc = 0.0;
        for ((gw, &w), &g) in grow.iter_mut().zip(row).zip(&grad_pre) {
            *gw += vi * g;
            acc += w * g;
        }
        grad_in[i] = acc;
    }
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(cin: usize, cout: usize, kw: usize, pool: usize) -> ConvLayerSpec {
        ConvLayerSpec { in_channels: cin, out_channels: cout, kernel_width: kw, pool_width: pool }
    }

    #[test]
    fn pool_then_identity_kernel() {
        let (out, trace) =
            conv_forward(&[1.0, 2.0, 3.0, 4.0], 4, &spec(1, 1, 1, 2), &[1.0], &[0.0], PoolOrder::PoolThenConv, 0).unwrap();
        assert_eq!(trace.conv_input, vec![2.0, 4.0]);
        assert_eq!(out, vec![2.0, 4.0]);
        assert_eq!(trace.argmax, vec![1, 3]);
    }

    #[test]
    fn hand_convolution_with_relu() {
        let (out, trace) =
            conv_forward(&[1.0, -2.0, 3.0], 3, &spec(1, 1, 2, 1), &[1.0, 1.0], &[0.0], PoolOrder::PoolThenConv, 0).unwrap();
        assert_eq!(trace.pre_activation, vec![-1.0, 1.0]);
        assert_eq!(out, vec![0.0, 1.0]);
    }

    #[test]
    fn zero_input_zero_output() {
        let kernel = [0.3, -0.2, 0.5, 0.1, 0.7, -0.9];
        let (out, _) = conv_forward(&[0.0; 12], 6, &spec(2, 1, 3, 2), &kernel, &[0.0], PoolOrder::PoolThenConv, 0).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_short_names_layer() {
        let err = conv_forward(&[1.0; 4], 4, &spec(1, 1, 3, 2), &[1.0; 3], &[0.0], PoolOrder::PoolThenConv, 7).unwrap_err();
        assert!(err.to_string().contains("conv layer 7"));
    }

    #[test]
    fn conv_then_pool_order() {
        // correlate [1,3,2,5] with [1] -> same, relu, pool 2 -> [3,5]
        let (out, trace) =
            conv_forward(&[1.0, 3.0, 2.0, 5.0], 4, &spec(1, 1, 1, 2), &[1.0], &[0.0], PoolOrder::ConvThenPool, 0).unwrap();
        assert_eq!(out, vec![3.0, 5.0]);
        assert_eq!(trace.output_len, 2);
    }

    #[test]
    fn output_length_formula() {
        let s = spec(1, 1, 5, 2);
        assert_eq!(s.output_length(64, PoolOrder::PoolThenConv), Some(28));
        assert_eq!(s.output_length(9, PoolOrder::PoolThenConv), None);
        assert_eq!(s.output_length(64, PoolOrder::ConvThenPool), Some(30));
    }

    #[test]
    fn dense_examples() {
        let eye = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(fc_forward(&[1.0, -1.0], &eye, &[0.0, 0.0], Activation::Relu).unwrap().1, vec![1.0, 0.0]);
        // W = [[1,2],[3,4]] stored in x out, W^T [1,1] = [4, 6]
        let w = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(fc_forward(&[1.0, 1.0], &w, &[0.0, 0.0], Activation::Identity).unwrap().1, vec![4.0, 6.0]);
        assert_eq!(fc_forward(&[0.0, 0.0], &w, &[0.5, -0.5], Activation::Relu).unwrap().1, vec![0.5, 0.0]);
        assert!(fc_forward(&[1.0], &w, &[0.0, 0.0], Activation::Relu).is_err());
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        let (pre, _) = fc_forward(&[1.0, 2.0], &[-1.0, -1.0], &[0.0], Activation::Relu).unwrap();
        let mut gw = vec![0.0; 2];
        let mut gb = vec![0.0; 1];
        fc_backward(&[1.0], &[1.0, 2.0], &pre, &[-1.0, -1.0], Activation::Relu, &mut gw, &mut gb);
        assert_eq!(gw, vec![0.0, 0.0]);
        assert_eq!(gb, vec![0.0]);
    }
}
