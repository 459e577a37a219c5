//! Fully connected tanh networks over a flat parameter vector.

mod batch;
mod checkpoint;

pub use batch::{forward_batch, BatchTape, ChannelSet};
pub use checkpoint::{load_checkpoint, read_header, save_checkpoint, CheckpointHeader};

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, VarHandle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    pub hidden_layers: usize,
    pub width: usize,
}

impl MlpConfig {
    pub fn new(in_dim: usize, out_dim: usize, hidden_layers: usize, width: usize) -> Result<Self> {
        let c = Self {
            in_dim,
            out_dim,
            hidden_layers,
            width,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.in_dim) {
            return Err(Error::Config(format!("in_dim must be 2 or 3, got {}", self.in_dim)));
        }
        if self.out_dim != 1 && self.out_dim != 3 {
            return Err(Error::Config(format!("out_dim must be 1 or 3, got {}", self.out_dim)));
        }
        if self.hidden_layers == 0 || self.width == 0 {
            return Err(Error::Config("need at least one hidden layer of nonzero width".into()));
        }
        Ok(())
    }

    /// (fan_in, fan_out) of every dense layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.in_dim;
        for _ in 0..self.hidden_layers {
            dims.push((fan_in, self.width));
            fan_in = self.width;
        }
        dims.push((fan_in, self.out_dim));
        dims
    }

    pub fn num_weights(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Forward,
    Inverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Offset of the row-major `fan_out x fan_in` weight block.
    pub weights: usize,
    pub bias: usize,
}

/// Where each layer's weights and biases live in the flat vector. The
/// trainable PDE parameters, if any, follow the network weights.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub config: MlpConfig,
    pub layers: Vec<LayerSlot>,
    pub num_net: usize,
    pub num_pde: usize,
}

impl ParamLayout {
    pub fn new(config: MlpConfig, num_pde: usize) -> Self {
        let mut layers = Vec::new();
        let mut off = 0;
        for (fan_in, fan_out) in config.layer_dims() {
            let weights = off;
            let bias = weights + fan_in * fan_out;
            off = bias + fan_out;
            layers.push(LayerSlot {
                fan_in,
                fan_out,
                weights,
                bias,
            });
        }
        Self {
            config,
            layers,
            num_net: off,
            num_pde,
        }
    }

    pub fn len(&self) -> usize {
        self.num_net + self.num_pde
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stable 64-bit fingerprint (FNV-1a) of the layout, used by checkpoints.
    pub fn fingerprint(&self) -> u64 {
        let c = &self.config;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in [c.in_dim, c.out_dim, c.hidden_layers, c.width, self.num_pde] {
            for b in (v as u64).to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn net(&self) -> &[f64] {
        &self.values[..self.layout.num_net]
    }

    pub fn pde(&self) -> &[f64] {
        &self.values[self.layout.num_net..]
    }
}

/// Glorot-uniform weights, zero biases, PDE parameters copied verbatim.
pub fn init_params(config: MlpConfig, mode: Mode, pde_param_init: &[f64], seed: u64) -> Result<ParamVector> {
    config.validate()?;
    match (mode, pde_param_init.len()) {
        (Mode::Forward, 0) => {}
        (Mode::Forward, n) => {
            return Err(Error::Config(format!("forward mode takes no PDE parameters, got {n}")))
        }
        (Mode::Inverse, 0) => {
            return Err(Error::Config("inverse mode needs initial PDE parameter values".into()))
        }
        (Mode::Inverse, _) => {}
    }
    let layout = ParamLayout::new(config, pde_param_init.len());
    let mut values = vec![0.0; layout.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for slot in &layout.layers {
        let bound = (6.0 / (slot.fan_in + slot.fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        for w in &mut values[slot.weights..slot.bias] {
            *w = dist.sample(&mut rng);
        }
    }
    values[layout.num_net..].copy_from_slice(pde_param_init);
    Ok(ParamVector { layout, values })
}

/// Dense forward pass on the jet graph. `params` are the lifted network
/// weights in layout order (PDE parameter handles, if present, are ignored).
pub fn forward(g: &mut Graph, layout: &ParamLayout, params: &[VarHandle], inputs: &[VarHandle]) -> Result<Vec<VarHandle>> {
    if inputs.len() != layout.config.in_dim {
        return Err(Error::Dimension(format!(
            "network expects {} inputs, got {}",
            layout.config.in_dim,
            inputs.len()
        )));
    }
    if params.len() < layout.num_net {
        return Err(Error::Dimension(format!(
            "network needs {} parameters, got {}",
            layout.num_net,
            params.len()
        )));
    }
    let last = layout.layers.len() - 1;
    let mut act = inputs.to_vec();
    for (l, slot) in layout.layers.iter().enumerate() {
        let mut next = Vec::with_capacity(slot.fan_out);
        for o in 0..slot.fan_out {
            let mut acc = params[slot.bias + o];
            for (i, &a) in act.iter().enumerate() {
                let w = params[slot.weights + o * slot.fan_in + i];
                let prod = g.mul(w, a)?;
                acc = g.add(acc, prod)?;
            }
            next.push(if l < last { g.tanh(acc)? } else { acc });
        }
        act = next;
    }
    Ok(act)
}

/// Plain value forward pass for a single input point.
pub fn eval_point(layout: &ParamLayout, params: &[f64], input: &[f64]) -> Vec<f64> {
    let last = layout.layers.len() - 1;
    let mut act = input.to_vec();
    for (l, slot) in layout.layers.iter().enumerate() {
        let w = &params[slot.weights..slot.bias];
        let b = &params[slot.bias..slot.bias + slot.fan_out];
        act = (0..slot.fan_out)
            .map(|o| {
                let z = b[o]
                    + w[o * slot.fan_in..(o + 1) * slot.fan_in]
                        .iter()
                        .zip(&act)
                        .map(|(w, a)| w * a)
                        .sum::<f64>();
                if l < last {
                    z.tanh()
                } else {
                    z
                }
            })
            .collect();
    }
    act
}
