use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::ForecastSample;
use crate::error::{Error, Result};
use crate::forecaster::Model;
use crate::graph::{Graph, NodeId};
use crate::layers::Mode;
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so that entries where both
/// gradients are (numerically) zero do not blow up.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub total: usize,
    /// Name and offset of the worst entry.
    pub worst: Option<(String, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare reverse-mode gradients of a scalar objective with central
/// differences on `count` randomly chosen parameter entries (all of them
/// when `count` exceeds the total).
pub fn check_gradients(
    params: &ParamSet,
    objective: impl Fn(&mut Graph, &ParamSet) -> Result<NodeId>,
    epsilon: f64,
    count: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("finite-difference epsilon must be positive, got {epsilon}")));
    }
    let mut g = Graph::new();
    let root = objective(&mut g, params)?;
    let grads = g.param_grads(&g.backward(root)?, params);

    let total = params.num_scalars();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, total, count.min(total)).into_vec();
    picks.sort_unstable();

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let r = objective(&mut g, p)?;
        Ok(g.value(r).data()[0])
    };
    let mut probe = params.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: picks.len(), total, worst: None };
    for flat in picks {
        let (id, off) = params.locate(flat).expect("index within parameter count");
        let orig = params.get(id).data()[off];
        probe.get_mut(id).data_mut()[off] = orig + epsilon;
        let plus = eval(&probe)?;
        probe.get_mut(id).data_mut()[off] = orig - epsilon;
        let minus = eval(&probe)?;
        probe.get_mut(id).data_mut()[off] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = relative_error(grads[id.index()].data()[off], numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((params.name(id).to_string(), off));
        }
    }
    Ok(report)
}

/// Fixed random projection of a tensor-valued output onto a scalar, so every
/// output element contributes to the checked gradient.
pub fn random_weights(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Gradient check of the whole forecaster on one sample in eval mode.
/// `fraction` of the parameter entries (at least 20) are probed.
pub fn gradient_check(model: &Model, sample: &ForecastSample, epsilon: f64, fraction: f64, seed: u64) -> Result<GradCheckReport> {
    let d = &model.config.dims;
    let weights = random_weights(&[d.energy_sites, d.horizon, 1], seed ^ 0x5eed);
    let count = ((model.params.num_scalars() as f64 * fraction).ceil() as usize).max(20);
    let probe = model.clone();
    check_gradients(
        &model.params,
        |g, p| {
            // objective is evaluated against whichever parameter set is probed
            let mut m = probe.clone();
            m.params = p.clone();
            let out = m.forward_nodes(g, sample, Mode::Eval, 0)?;
            g.dot(out.prediction, &weights)
        },
        epsilon,
        count,
        seed,
    )
}
