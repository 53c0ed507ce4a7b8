use crate::error::{Error, Result};

use super::layers::{conv_backward, conv_forward, fc_backward, fc_forward, Activation, ConvTrace};
use super::NetworkParams;

/// Norms below this are replaced by it in the cosine denominator.
pub const COSINE_EPS: f64 = 1e-12;

/// Intermediate values of one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchTrace {
    pub conv: Vec<ConvTrace>,
    /// Input of each dense layer (the first is the flattened conv output).
    pub dense_inputs: Vec<Vec<f64>>,
    pub dense_pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub generation: u64,
    pub x: BranchTrace,
    pub y: BranchTrace,
    pub similarity: f64,
    /// Set when an output norm fell below [`COSINE_EPS`].
    pub guarded: bool,
}

impl ForwardTrace {
    pub fn ox(&self) -> &[f64] {
        &self.x.output
    }

    pub fn oy(&self) -> &[f64] {
        &self.y.output
    }
}

/// One training example: two flattened `channels x length` tensors and the
/// taste-similarity label.
#[derive(Debug, Clone, Copy)]
pub struct PairInput<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub label: f64,
}

/// Gradient of the loss, laid out like [`NetworkParams::values`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
}

impl Gradients {
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn dense_activation(params: &NetworkParams, layer: usize) -> Activation {
    let arch = params.architecture();
    if layer == arch.hidden.len() {
        arch.output_activation
    } else {
        Activation::Relu
    }
}

fn forward_branch(params: &NetworkParams, input: &[f64]) -> Result<BranchTrace> {
    let arch = params.architecture();
    if input.len() != arch.input_len() {
        return Err(Error::Shape(format!(
            "network expects {} x {} inputs ({} values), got {}",
            arch.input_channels,
            arch.input_length,
            arch.input_len(),
            input.len()
        )));
    }
    let mut signal = input.to_vec();
    let mut len = arch.input_length;
    let mut conv = Vec::with_capacity(arch.conv.len());
    for (i, spec) in arch.conv.iter().enumerate() {
        let (kernel, bias) = params.conv_layer(i);
        let (out, trace) = conv_forward(&signal, len, spec, kernel, bias, arch.order, i)?;
        len = trace.output_len;
        signal = out;
        conv.push(trace);
    }
    let n_dense = arch.hidden.len() + 1;
    let mut dense_inputs = Vec::with_capacity(n_dense);
    let mut dense_pre = Vec::with_capacity(n_dense);
    for l in 0..n_dense {
        let (w, b) = params.dense_layer(l);
        let (pre, out) = fc_forward(&signal, w, b, dense_activation(params, l))?;
        dense_inputs.push(std::mem::replace(&mut signal, out));
        dense_pre.push(pre);
    }
    Ok(BranchTrace {
        conv,
        dense_inputs,
        dense_pre,
        output: signal,
    })
}

fn backward_branch(params: &NetworkParams, trace: &BranchTrace, grad_output: &[f64], grads: &mut [f64]) {
    let arch = params.architecture();
    let dense_slots = arch.dense_slots();
    let mut grad = grad_output.to_vec();
    for l in (0..dense_slots.len()).rev() {
        let s = dense_slots[l];
        let (w, _) = params.dense_layer(l);
        let (gw, gb) = grads[s.weights..s.bias + s.bias_len].split_at_mut(s.weights_len);
        grad = fc_backward(&grad, &trace.dense_inputs[l], &trace.dense_pre[l], w, dense_activation(params, l), gw, gb);
    }
    let conv_slots = arch.conv_slots();
    for i in (0..conv_slots.len()).rev() {
        let s = conv_slots[i];
        let (k, _) = params.conv_layer(i);
        let (gk, gb) = grads[s.weights..s.bias + s.bias_len].split_at_mut(s.weights_len);
        match conv_backward(&grad, &trace.conv[i], &arch.conv[i], k, arch.order, gk, gb, i > 0) {
            Some(g) => grad = g,
            None => break,
        }
    }
}

/// Cosine similarity with norms floored at [`COSINE_EPS`]. Returns the
/// similarity and whether the floor was hit.
pub fn cosine(a: &[f64], b: &[f64]) -> (f64, bool) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let guarded = na < COSINE_EPS || nb < COSINE_EPS;
    let s = dot / (na.max(COSINE_EPS) * nb.max(COSINE_EPS));
    (s.clamp(-1.0, 1.0), guarded)
}

/// Runs both branches with the same parameters and returns the cosine of
/// their outputs.
pub fn forward_pair(params: &NetworkParams, x: &[f64], y: &[f64]) -> Result<(f64, ForwardTrace)> {
    let tx = forward_branch(params, x)?;
    let ty = forward_branch(params, y)?;
    let (similarity, guarded) = cosine(&tx.output, &ty.output);
    Ok((
        similarity,
        ForwardTrace {
            generation: params.generation(),
            x: tx,
            y: ty,
            similarity,
            guarded,
        },
    ))
}

/// Similarity without keeping a trace.
pub fn predict(params: &NetworkParams, x: &[f64], y: &[f64]) -> Result<f64> {
    Ok(cosine(&forward_branch(params, x)?.output, &forward_branch(params, y)?.output).0)
}

pub fn forward_batch(params: &NetworkParams, batch: &[PairInput]) -> Result<Vec<ForwardTrace>> {
    batch.iter().map(|p| forward_pair(params, p.x, p.y).map(|(_, t)| t)).collect()
}

/// Mean squared difference between predictions and labels.
pub fn mse(predictions: &[f64], labels: &[f64]) -> f64 {
    let n = predictions.len().max(1) as f64;
    predictions.iter().zip(labels).map(|(p, l)| (p - l) * (p - l)).sum::<f64>() / n
}

/// Batch loss `(1/n) sum (Sim - Sim_t)^2`.
pub fn loss(params: &NetworkParams, batch: &[PairInput]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("loss needs a non-empty batch".into()));
    }
    let preds = batch.iter().map(|p| predict(params, p.x, p.y)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<f64> = batch.iter().map(|p| p.label).collect();
    Ok(mse(&preds, &labels))
}

/// Exact gradient of the batch loss. `traces` must come from
/// [`forward_batch`] on the same parameters and batch.
pub fn backward(params: &NetworkParams, batch: &[PairInput], traces: &[ForwardTrace]) -> Result<Gradients> {
    if batch.len() != traces.len() {
        return Err(Error::Shape(format!("{} pairs but {} traces", batch.len(), traces.len())));
    }
    let mut grads = vec![0.0; params.len()];
    let n = batch.len() as f64;
    for (pair, trace) in batch.iter().zip(traces) {
        if trace.generation != params.generation() {
            return Err(Error::StaleTrace {
                trace: trace.generation,
                current: params.generation(),
            });
        }
        let d_sim = 2.0 * (trace.similarity - pair.label) / n;
        if d_sim == 0.0 {
            continue;
        }
        let (ox, oy) = (trace.ox(), trace.oy());
        let nx = ox.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = oy.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (nxg, nyg) = (nx.max(COSINE_EPS), ny.max(COSINE_EPS));
        let s = trace.similarity;
        // ds/dox = oy / (|ox||oy|) - s ox / |ox|^2 (norm term drops when floored)
        let gx: Vec<f64> = ox
            .iter()
            .zip(oy)
            .map(|(a, b)| d_sim * (b / (nxg * nyg) - if nx >= COSINE_EPS { s * a / (nx * nx) } else { 0.0 }))
            .collect();
        let gy: Vec<f64> = oy
            .iter()
            .zip(ox)
            .map(|(b, a)| d_sim * (a / (nxg * nyg) - if ny >= COSINE_EPS { s * b / (ny * ny) } else { 0.0 }))
            .collect();
        backward_branch(params, &trace.x, &gx, &mut grads);
        backward_branch(params, &trace.y, &gy, &mut grads);
    }
    Ok(Gradients { values: grads })
}
