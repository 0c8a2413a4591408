//! Joint processing block: separate UTCAE refinement of the energy and
//! weather latents, then an MKST transfer from weather to energy with a
//! residual on the energy path.

use rand::Rng;

use crate::attention::{mkst_attention_node, MkParams, SpatialRelationMatrix};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::Dropout;
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::utcae::{utcae_node, UtcaeParams};

#[derive(Clone, Debug)]
pub struct JpbParams {
    pub energy: UtcaeParams,
    pub weather: UtcaeParams,
    pub attention: MkParams,
}

impl JpbParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        levels: usize,
        d_model: usize,
        d_head: usize,
        kernel_sizes: &[usize],
        zero_output: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            energy: UtcaeParams::new(params, &format!("{prefix}.utcae_energy"), levels, d_model, rng)?,
            weather: UtcaeParams::new(params, &format!("{prefix}.utcae_weather"), levels, d_model, rng)?,
            attention: MkParams::new(params, &format!("{prefix}.mkst"), d_model, d_head, kernel_sizes, zero_output, rng)?,
        })
    }
}

/// Returns `(E_out, W_out)`.
pub fn jpb_node(
    g: &mut Graph,
    params: &ParamSet,
    block: &JpbParams,
    energy: NodeId,
    weather: NodeId,
    y: NodeId,
    dropout: &mut Dropout,
) -> Result<(NodeId, NodeId)> {
    let (le, te, _) = g.value(energy).dims3()?;
    let (lw, tw, _) = g.value(weather).dims3()?;
    let (ly, lyw) = g.value(y).dims2()?;
    if ly != le || lyw != lw || te != tw {
        return Err(Error::shape("jpb", format!("E {:?}, W {:?}, Y {:?}", g.shape(energy), g.shape(weather), g.shape(y))));
    }
    let e_u = utcae_node(g, params, &block.energy, energy, dropout)?;
    let w_out = utcae_node(g, params, &block.weather, weather, dropout)?;
    let transfer = mkst_attention_node(g, params, &block.attention, w_out, w_out, e_u, y)?;
    let e_out = g.add(transfer, e_u)?;
    Ok((e_out, w_out))
}

/// Inference-mode evaluation on plain tensors.
pub fn jpb_forward(
    params: &ParamSet,
    block: &JpbParams,
    energy: &Tensor,
    weather: &Tensor,
    y: &SpatialRelationMatrix,
) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let (e, w, yn) = (g.constant(energy.clone()), g.constant(weather.clone()), g.constant(y.tensor().clone()));
    let (eo, wo) = jpb_node(&mut g, params, block, e, w, yn, &mut Dropout::disabled())?;
    Ok((g.value(eo).clone(), g.value(wo).clone()))
}
