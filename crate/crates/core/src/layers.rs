//! Small building blocks shared by the model components.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// Whether a forward pass is part of training (dropout active) or inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout with its own seeded stream. Inactive in eval mode.
#[derive(Debug)]
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn new(mode: Mode, rate: f64, seed: u64) -> Self {
        let active = mode == Mode::Train && rate > 0.0;
        Self { rate, rng: active.then(|| ChaCha8Rng::seed_from_u64(seed)) }
    }

    pub fn disabled() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn apply(&mut self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let Some(rng) = self.rng.as_mut() else { return Ok(x) };
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        let mask = Tensor::from_fn(g.shape(x).to_vec(), |_| if rng.gen::<f64>() < keep { scale } else { 0.0 });
        g.mul_const(x, mask)
    }
}

/// Dense layer `x·W + b` applied over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weight: params.add_fan_in(format!("{name}.weight"), [d_in, d_out], d_in, rng),
            bias: params.add_fan_in(format!("{name}.bias"), [d_out], d_in, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: NodeId) -> Result<NodeId> {
        let (w, b) = (g.param(params, self.weight), g.param(params, self.bias));
        g.affine(x, w, b)
    }
}

/// Same-length temporal convolution `[L×T×C_in] → [L×T×C_out]`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        width: usize,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if width.is_multiple_of(2) {
            return Err(Error::Config(format!("{name}: convolution width {width} must be odd")));
        }
        let fan = width * c_in;
        Ok(Self {
            weight: params.add_fan_in(format!("{name}.weight"), [width, c_in, c_out], fan, rng),
            bias: params.add_fan_in(format!("{name}.bias"), [c_out], fan, rng),
        })
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: NodeId) -> Result<NodeId> {
        let (w, b) = (g.param(params, self.weight), g.param(params, self.bias));
        g.conv1d(x, w, b)
    }
}
