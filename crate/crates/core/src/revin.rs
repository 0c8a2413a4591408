//! Reversible instance normalization of the energy history.
//!
//! Each sample's history is z-scored per site with its own statistics and
//! passed through a learnable per-site affine map; model outputs go through
//! the inverse so predictions come back on the original scale.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Lower bound on the per-site standard deviation.
pub const STD_FLOOR: f64 = 1e-5;
/// Added to the affine scale before dividing by it on the way out.
pub const AFFINE_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct RevinState {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

/// Per-site mean and clamped population standard deviation of `[L × T × 1]`.
pub fn instance_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (l, t, _) = x.dims3()?;
    if l == 0 || t == 0 {
        return Err(Error::shape("revin", format!("empty history {:?}", x.shape())));
    }
    let chunk = x.len() / l;
    let mut mean = Vec::with_capacity(l);
    let mut std = Vec::with_capacity(l);
    for site in x.data().chunks(chunk) {
        let m = site.iter().sum::<f64>() / chunk as f64;
        let var = site.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / chunk as f64;
        mean.push(m);
        std.push(var.sqrt().max(STD_FLOOR));
    }
    Ok((mean, std))
}

fn check_affine(l: usize, scale: &[f64], shift: &[f64]) -> Result<()> {
    if scale.len() != l || shift.len() != l {
        return Err(Error::shape("revin", format!("{l} sites, affine of {} / {}", scale.len(), shift.len())));
    }
    Ok(())
}

/// Normalize `e_h` with its own statistics followed by `x·scale + shift`.
pub fn revin_apply(e_h: &Tensor, scale: &[f64], shift: &[f64]) -> Result<(Tensor, RevinState)> {
    let (mean, std) = instance_stats(e_h)?;
    check_affine(mean.len(), scale, shift)?;
    let chunk = e_h.len() / mean.len();
    let mut out = e_h.clone();
    for (l, site) in out.data_mut().chunks_mut(chunk).enumerate() {
        site.iter_mut().for_each(|v| *v = (*v - mean[l]) / std[l] * scale[l] + shift[l]);
    }
    Ok((out, RevinState { mean, std, scale: scale.to_vec(), shift: shift.to_vec() }))
}

/// Undo the affine map, then the instance z-score.
pub fn revin_invert(y: &Tensor, state: &RevinState) -> Result<Tensor> {
    let l = y.shape().first().copied().unwrap_or(0);
    if l != state.mean.len() {
        return Err(Error::shape("revin", format!("{:?} against {} sites", y.shape(), state.mean.len())));
    }
    let chunk = y.len() / l;
    let mut out = y.clone();
    for (i, site) in out.data_mut().chunks_mut(chunk).enumerate() {
        site.iter_mut().for_each(|v| {
            *v = (*v - state.shift[i]) / (state.scale[i] + AFFINE_EPS) * state.std[i] + state.mean[i];
        });
    }
    Ok(out)
}

/// Graph form of [`revin_apply`]; statistics are treated as constants.
pub(crate) fn apply_node(g: &mut Graph, x: NodeId, scale: NodeId, shift: NodeId) -> Result<(NodeId, Vec<f64>, Vec<f64>)> {
    let (mean, std) = instance_stats(g.value(x))?;
    let mul: Vec<f64> = std.iter().map(|s| 1.0 / s).collect();
    let add: Vec<f64> = mean.iter().zip(&std).map(|(m, s)| -m / s).collect();
    let z = g.site_scale_shift(x, &mul, &add)?;
    Ok((g.site_affine(z, scale, shift)?, mean, std))
}

pub(crate) fn invert_node(g: &mut Graph, y: NodeId, scale: NodeId, shift: NodeId, mean: &[f64], std: &[f64]) -> Result<NodeId> {
    let z = g.site_affine_inv(y, scale, shift, AFFINE_EPS)?;
    g.site_scale_shift(z, std, mean)
}
