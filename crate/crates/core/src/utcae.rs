//! U-shaped temporal convolutional auto-encoder.
//!
//! Applied per site along time. The encoder halves the time axis `P-1` times
//! (conv → ReLU → max-pool), a bottom conv works at the coarsest resolution,
//! and the decoder climbs back up with nearest-neighbour upsampling, a
//! concatenated skip tensor from the matching encoder level and a conv that
//! folds `2·D_r` channels back to `D_r`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{Conv, Dropout};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const CONV_WIDTH: usize = 3;

#[derive(Clone, Debug)]
pub struct UtcaeParams {
    pub levels: usize,
    pub channels: usize,
    pub encoder: Vec<Conv>,
    pub bottom: Conv,
    /// Indexed by level, applied from the coarsest level upward.
    pub decoder: Vec<Conv>,
}

impl UtcaeParams {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        levels: usize,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if levels == 0 {
            return Err(Error::Config("UTCAE needs at least one pyramid level".into()));
        }
        let mut encoder = Vec::with_capacity(levels - 1);
        for i in 0..levels - 1 {
            encoder.push(Conv::new(params, &format!("{prefix}.enc{i}"), CONV_WIDTH, channels, channels, rng)?);
        }
        let bottom = Conv::new(params, &format!("{prefix}.bottom"), CONV_WIDTH, channels, channels, rng)?;
        let mut decoder = Vec::with_capacity(levels - 1);
        for i in 0..levels - 1 {
            decoder.push(Conv::new(params, &format!("{prefix}.dec{i}"), CONV_WIDTH, 2 * channels, channels, rng)?);
        }
        Ok(Self { levels, channels, encoder, bottom, decoder })
    }

    /// Time lengths seen at each pyramid level for an input of length `t`.
    pub fn level_lengths(&self, t: usize) -> Vec<usize> {
        let mut lens = vec![t];
        for _ in 1..self.levels {
            let last = *lens.last().unwrap();
            lens.push(last.div_ceil(2));
        }
        lens
    }
}

pub fn utcae_node(g: &mut Graph, params: &ParamSet, ut: &UtcaeParams, x: NodeId, dropout: &mut Dropout) -> Result<NodeId> {
    let (_, t, c) = g.value(x).dims3()?;
    if t == 0 {
        return Err(Error::shape("utcae", "empty time axis"));
    }
    if c != ut.channels {
        return Err(Error::shape("utcae", format!("{c} channels, expected {}", ut.channels)));
    }
    let mut skips = Vec::with_capacity(ut.levels - 1);
    let mut cur = x;
    for conv in &ut.encoder {
        let h = conv.forward(g, params, cur)?;
        let h = g.relu(h);
        skips.push(h);
        let len = g.shape(h)[1];
        let even = if len % 2 == 1 { g.pad_edge(h, 1)? } else { h };
        let pooled = g.max_pool2(even)?;
        cur = dropout.apply(g, pooled)?;
    }
    let bottom = ut.bottom.forward(g, params, cur)?;
    cur = g.relu(bottom);
    for (conv, &skip) in ut.decoder.iter().zip(&skips).rev() {
        let len = g.shape(skip)[1];
        let up = g.upsample2(cur, len)?;
        let cat = g.concat(&[up, skip], 2)?;
        let h = conv.forward(g, params, cat)?;
        cur = g.relu(h);
    }
    Ok(cur)
}

/// Inference-mode evaluation on a plain tensor.
pub fn utcae_forward(params: &ParamSet, ut: &UtcaeParams, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let out = utcae_node(&mut g, params, ut, xn, &mut Dropout::disabled())?;
    Ok(g.value(out).clone())
}
