//! Shared-weight temporal convolution network that maps two songs' attribute
//! tensors to the cosine similarity of their embeddings, trained by MSE
//! against taste similarity.
//!
//! Each branch computes `relu(b_i + K_i * tmP(X_i))` per conv layer, then
//! dense layers `f(b_l + W_l^T v)`; both branches read the same
//! [`NetworkParams`].

mod layers;
mod network;
mod train;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use layers::{
    conv_backward, conv_forward, correlate, fc_backward, fc_forward, max_pool, Activation, ConvLayerSpec, ConvTrace,
    PoolOrder,
};
pub use network::{
    backward, cosine, forward_batch, forward_pair, loss, mse, predict, BranchTrace, ForwardTrace, Gradients,
    PairInput, COSINE_EPS,
};
pub use train::{
    evaluate, read_history_csv, train, write_history_csv, EpochLoss, NetCheckpoint, Optimizer, OptimizerState, TrainConfig, TrainOutcome,
    CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};

/// Conv layer as configured: input channels are implied by the previous layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvConfig {
    pub channels: usize,
    pub kernel: usize,
    pub pool: usize,
}

/// Layer sizes as written in a configuration file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub conv: Vec<ConvConfig>,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub order: PoolOrder,
    pub output_activation: Activation,
}

impl Default for ArchitectureConfig {
    /// Two conv layers (pool 2, kernel 5) and dense 800 -> 600 -> 20.
    fn default() -> Self {
        ArchitectureConfig {
            conv: vec![
                ConvConfig { channels: 16, kernel: 5, pool: 2 },
                ConvConfig { channels: 16, kernel: 5, pool: 2 },
            ],
            hidden: vec![800, 600],
            output: 20,
            order: PoolOrder::PoolThenConv,
            output_activation: Activation::Identity,
        }
    }
}

impl ArchitectureConfig {
    /// Desk-scale variant with dense widths 200 -> 150 -> 20.
    pub fn desk() -> Self {
        ArchitectureConfig {
            conv: vec![
                ConvConfig { channels: 8, kernel: 5, pool: 2 },
                ConvConfig { channels: 8, kernel: 5, pool: 2 },
            ],
            hidden: vec![200, 150],
            ..Default::default()
        }
    }

    pub fn resolve(&self, input_channels: usize, input_length: usize) -> Result<Architecture> {
        let mut conv = Vec::with_capacity(self.conv.len());
        let mut cin = input_channels;
        for c in &self.conv {
            conv.push(ConvLayerSpec {
                in_channels: cin,
                out_channels: c.channels,
                kernel_width: c.kernel,
                pool_width: c.pool,
            });
            cin = c.channels;
        }
        Architecture::new(
            input_channels,
            input_length,
            conv,
            self.hidden.clone(),
            self.output,
            self.order,
            self.output_activation,
        )
    }
}

/// Fully resolved network shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_channels: usize,
    pub input_length: usize,
    pub conv: Vec<ConvLayerSpec>,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub order: PoolOrder,
    pub output_activation: Activation,
}

/// Offsets of one layer's tensors inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Slot {
    pub weights: usize,
    pub weights_len: usize,
    pub bias: usize,
    pub bias_len: usize,
}

impl Architecture {
    pub fn new(
        input_channels: usize,
        input_length: usize,
        conv: Vec<ConvLayerSpec>,
        hidden: Vec<usize>,
        output: usize,
        order: PoolOrder,
        output_activation: Activation,
    ) -> Result<Architecture> {
        let arch = Architecture {
            input_channels,
            input_length,
            conv,
            hidden,
            output,
            order,
            output_activation,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.input_length == 0 || self.output == 0 {
            return Err(Error::Config("network input and output sizes must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        let mut cin = self.input_channels;
        for (i, spec) in self.conv.iter().enumerate() {
            spec.validate()?;
            if spec.in_channels != cin {
                return Err(Error::Config(format!(
                    "conv layer {i} expects {} input channels but receives {cin}",
                    spec.in_channels
                )));
            }
            cin = spec.out_channels;
        }
        self.conv_output_len()?;
        Ok(())
    }

    /// Length of the last conv activation map.
    pub fn conv_output_len(&self) -> Result<usize> {
        let mut len = self.input_length;
        for (i, spec) in self.conv.iter().enumerate() {
            len = spec.output_length(len, self.order).ok_or_else(|| {
                Error::Shape(format!(
                    "conv layer {i}: input length {len} too short for pool {} and kernel {}",
                    spec.pool_width, spec.kernel_width
                ))
            })?;
        }
        Ok(len)
    }

    /// Flattened width entering the first dense layer.
    pub fn flat_width(&self) -> usize {
        let channels = self.conv.last().map_or(self.input_channels, |c| c.out_channels);
        channels * self.conv_output_len().expect("validated architecture")
    }

    pub fn input_len(&self) -> usize {
        self.input_channels * self.input_length
    }

    /// Dense layer widths as `(in, out)` pairs, output layer last.
    pub fn dense_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut cin = self.flat_width();
        for &h in self.hidden.iter().chain(std::iter::once(&self.output)) {
            dims.push((cin, h));
            cin = h;
        }
        dims
    }

    pub(crate) fn conv_slots(&self) -> Vec<Slot> {
        self.slots().0
    }

    pub(crate) fn dense_slots(&self) -> Vec<Slot> {
        self.slots().1
    }

    fn slots(&self) -> (Vec<Slot>, Vec<Slot>) {
        let mut offset = 0;
        let mut take = |weights_len: usize, bias_len: usize| {
            let s = Slot {
                weights: offset,
                weights_len,
                bias: offset + weights_len,
                bias_len,
            };
            offset += weights_len + bias_len;
            s
        };
        let conv = self.conv.iter().map(|c| take(c.kernel_len(), c.out_channels)).collect();
        let dense = self.dense_dims().into_iter().map(|(i, o)| take(i * o, o)).collect();
        (conv, dense)
    }

    pub fn parameter_count(&self) -> usize {
        let conv: usize = self.conv.iter().map(|c| c.kernel_len() + c.out_channels).sum();
        let dense: usize = self.dense_dims().iter().map(|(i, o)| i * o + o).sum();
        conv + dense
    }
}

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// The single parameter set read by both branches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkParams {
    architecture: Architecture,
    values: Vec<f64>,
    #[serde(skip, default = "next_generation")]
    generation: u64,
}

impl PartialEq for NetworkParams {
    fn eq(&self, other: &Self) -> bool {
        self.architecture == other.architecture && self.values == other.values
    }
}

impl NetworkParams {
    /// He-style uniform initialisation, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// zero biases.
    pub fn init(architecture: Architecture, seed: u64) -> NetworkParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; architecture.parameter_count()];
        let conv_fan: Vec<usize> = architecture.conv.iter().map(|c| c.in_channels * c.kernel_width).collect();
        let dense_fan: Vec<usize> = architecture.dense_dims().iter().map(|d| d.0).collect();
        let slots = architecture.conv_slots().into_iter().zip(conv_fan).chain(architecture.dense_slots().into_iter().zip(dense_fan));
        for (slot, fan_in) in slots {
            let limit = (6.0 / fan_in as f64).sqrt();
            for v in &mut values[slot.weights..slot.weights + slot.weights_len] {
                *v = rng.random_range(-limit..limit);
            }
        }
        NetworkParams {
            architecture,
            values,
            generation: next_generation(),
        }
    }

    pub fn from_values(architecture: Architecture, values: Vec<f64>) -> Result<NetworkParams> {
        architecture.validate()?;
        if values.len() != architecture.parameter_count() {
            return Err(Error::Shape(format!(
                "architecture needs {} parameters, got {}",
                architecture.parameter_count(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("parameters must be finite".into()));
        }
        Ok(NetworkParams {
            architecture,
            values,
            generation: next_generation(),
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access; invalidates outstanding forward traces.
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.generation = next_generation();
        &mut self.values
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Kernel and bias of conv layer `i`.
    pub fn conv_layer(&self, i: usize) -> (&[f64], &[f64]) {
        let s = self.architecture.conv_slots()[i];
        (&self.values[s.weights..s.bias], &self.values[s.bias..s.bias + s.bias_len])
    }

    /// Weights (`in x out`) and bias of dense layer `i`.
    pub fn dense_layer(&self, i: usize) -> (&[f64], &[f64]) {
        let s = self.architecture.dense_slots()[i];
        (&self.values[s.weights..s.bias], &self.values[s.bias..s.bias + s.bias_len])
    }
}
