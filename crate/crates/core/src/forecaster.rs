//! End-to-end forecasting model.
//!
//! Energy and weather inputs are lifted to `D_r`, tagged with projected
//! one-hot site encodings, and the future energy latents are bootstrapped from
//! weather by an MKST transfer. Past and future are then processed jointly by
//! a stack of JPBs, split again, and a final MKST transfer with residual feeds
//! a linear output head.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    mkst_attention_node, spatial_weights_node, validate_kernels, MkParams, SpatialEncodingParams, SpatialRelationMatrix,
};
use crate::data::{ForecastSample, NormalizationStats, ProblemDims};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::jpb::{jpb_node, JpbParams};
use crate::layers::{Dropout, Linear, Mode};
use crate::params::{ParamId, ParamSet};
use crate::revin;
use crate::tensor::Tensor;

pub const MODEL_FORMAT: i64 = 1;

fn default_format() -> i64 {
    MODEL_FORMAT
}

/// Architecture hyperparameters; independent of the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    #[serde(default = "default_format")]
    pub format: i64,
    /// Latent width `D_r`.
    pub d_model: usize,
    /// Per-head query/key/value width (`D_K = D_V`).
    pub d_head: usize,
    /// One head per kernel width; `Υ = kernel_sizes.len()`.
    pub kernel_sizes: Vec<usize>,
    /// UTCAE pyramid depth `P`.
    pub levels: usize,
    /// Number of stacked JPBs `φ`.
    pub blocks: usize,
    /// Spatial matching width `D_Λ`.
    pub d_lambda: usize,
    pub dropout: f64,
    pub revin: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            format: MODEL_FORMAT,
            d_model: 48,
            d_head: 16,
            kernel_sizes: vec![3, 5, 7],
            levels: 4,
            blocks: 3,
            d_lambda: 16,
            dropout: 0.1,
            revin: true,
        }
    }
}

impl Architecture {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let arch: Self = toml::from_str(text)
            .map_err(|e| Error::ConfigList { count: 1, errors: vec![format!("model config: {}", e.message())] })?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.format != MODEL_FORMAT {
            errors.push(format!("unsupported `format` {}, expected {MODEL_FORMAT}", self.format));
        }
        if let Err(e) = validate_kernels(&self.kernel_sizes) {
            errors.push(e.to_string());
        }
        if self.d_head == 0 || self.kernel_sizes.len() * self.d_head != self.d_model {
            errors.push(format!(
                "{} heads × d_head {} must equal d_model {}",
                self.kernel_sizes.len(),
                self.d_head,
                self.d_model
            ));
        }
        for (key, v) in [("levels", self.levels), ("blocks", self.blocks), ("d_lambda", self.d_lambda)] {
            if v == 0 {
                errors.push(format!("`{key}` must be at least 1"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errors.push(format!("`dropout` must lie in [0, 1), got {}", self.dropout));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigList { count: errors.len(), errors })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dims: ProblemDims,
    pub arch: Architecture,
}

impl ModelConfig {
    /// Width of the one-hot site encoding, `D_S = L_E + L_W`.
    pub fn site_encoding_dim(&self) -> usize {
        self.dims.energy_sites + self.dims.weather_sites
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let d = &self.dims;
        if d.energy_sites == 0 || d.weather_sites == 0 || d.history == 0 || d.horizon == 0 || d.weather_vars == 0 {
            return Err(Error::Config(format!("all problem dimensions must be positive: {d:?}")));
        }
        Ok(())
    }
}

/// Dataset context stored alongside the weights so a checkpoint can be
/// applied to new data without the training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub site_ids: Vec<String>,
    pub location_ids: Vec<String>,
    pub variable_names: Vec<String>,
    /// Calendar encodings were appended to the weather variables.
    pub time_features: bool,
    pub stats: Option<NormalizationStats>,
}

#[derive(Clone, Debug)]
struct Layout {
    energy_in: Linear,
    weather_in: Linear,
    site_in: Linear,
    spatial: SpatialEncodingParams,
    bootstrap: MkParams,
    blocks: Vec<JpbParams>,
    last: MkParams,
    head: Linear,
    revin: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub meta: ModelMeta,
    layout: Layout,
}

/// Output nodes of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    /// `[L_E × T_f × 1]` in the sample's (normalized) units.
    pub prediction: NodeId,
    /// `[L_E × L_W]`
    pub relation: NodeId,
}

#[derive(Clone, Debug)]
pub struct Predictions {
    pub outputs: Vec<Tensor>,
    pub seconds: Vec<f64>,
}

fn finite(g: &Graph, node: NodeId, stage: &str) -> Result<NodeId> {
    if g.value(node).is_finite() {
        Ok(node)
    } else {
        Err(Error::NonFinite { stage: stage.to_string() })
    }
}

impl Model {
    /// Fresh model with seeded initialization. Attention blocks sitting on a
    /// residual path start with a zero output projection.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let a = &config.arch;
        let d = a.d_model;
        let layout = Layout {
            energy_in: Linear::new(&mut p, "input.energy", 1, d, &mut rng),
            weather_in: Linear::new(&mut p, "input.weather", config.dims.weather_vars, d, &mut rng),
            site_in: Linear::new(&mut p, "input.site", config.site_encoding_dim(), d, &mut rng),
            spatial: SpatialEncodingParams::new(&mut p, d, a.d_lambda, &mut rng)?,
            bootstrap: MkParams::new(&mut p, "bootstrap", d, a.d_head, &a.kernel_sizes, false, &mut rng)?,
            blocks: (0..a.blocks)
                .map(|i| JpbParams::new(&mut p, &format!("jpb{i}"), a.levels, d, a.d_head, &a.kernel_sizes, true, &mut rng))
                .collect::<Result<_>>()?,
            last: MkParams::new(&mut p, "final", d, a.d_head, &a.kernel_sizes, true, &mut rng)?,
            head: Linear::new(&mut p, "head", d, 1, &mut rng),
            revin: a.revin.then(|| {
                let l = config.dims.energy_sites;
                (p.add("revin.scale", Tensor::full([l], 1.0)), p.add("revin.shift", Tensor::zeros([l])))
            }),
        };
        Ok(Self { config, params: p, meta: ModelMeta::default(), layout })
    }

    /// Rebuild a model around stored weights, checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: ParamSet, meta: ModelMeta) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.copy_from(&params)?;
        model.meta = meta;
        Ok(model)
    }

    /// One-hot encodings lifted to `D_r`: `([L_E × D_r], [L_W × D_r])`.
    fn site_encodings(&self, g: &mut Graph) -> Result<(NodeId, NodeId)> {
        let (le, lw) = (self.config.dims.energy_sites, self.config.dims.weather_sites);
        let ds = le + lw;
        let onehot = |offset: usize, n: usize| Tensor::from_fn([n, ds], |i| if i % ds == offset + i / ds { 1.0 } else { 0.0 });
        let se = g.constant(onehot(0, le));
        let sw = g.constant(onehot(le, lw));
        let se = self.layout.site_in.forward(g, &self.params, se)?;
        let sw = self.layout.site_in.forward(g, &self.params, sw)?;
        Ok((se, sw))
    }

    /// Build the forward pass into `g`. `dropout_seed` only matters in
    /// training mode.
    pub fn forward_nodes(&self, g: &mut Graph, sample: &ForecastSample, mode: Mode, dropout_seed: u64) -> Result<ForwardNodes> {
        self.config.dims.check_sample(sample)?;
        let p = &self.params;
        let l = &self.layout;
        let th = self.config.dims.history;
        let mut drop = Dropout::new(mode, self.config.arch.dropout, dropout_seed);

        let mut eh = g.constant(sample.energy_history.clone());
        let mut stats = None;
        if let Some((scale, shift)) = l.revin {
            let (s, b) = (g.param(p, scale), g.param(p, shift));
            let (z, mean, std) = revin::apply_node(g, eh, s, b)?;
            eh = z;
            stats = Some((s, b, mean, std));
        }
        let wh = g.constant(sample.weather_history.clone());
        let wf = g.constant(sample.weather_future.clone());

        let eh = l.energy_in.forward(g, p, eh)?;
        let eh = drop.apply(g, eh)?;
        let wh = l.weather_in.forward(g, p, wh)?;
        let wh = drop.apply(g, wh)?;
        let wf = l.weather_in.forward(g, p, wf)?;
        let wf = drop.apply(g, wf)?;

        let (se, sw) = self.site_encodings(g)?;
        let eh = g.add_site_row(eh, se)?;
        let wh = g.add_site_row(wh, sw)?;
        let wf = g.add_site_row(wf, sw)?;
        let eh = finite(g, eh, "input projection")?;

        let y = spatial_weights_node(g, p, &l.spatial, se, sw)?;
        let y = finite(g, y, "spatial weights")?;

        let ef = mkst_attention_node(g, p, &l.bootstrap, wf, wh, eh, y)?;
        let ef = finite(g, ef, "bootstrap attention")?;

        let mut e = g.concat(&[eh, ef], 1)?;
        let mut w = g.concat(&[wh, wf], 1)?;
        for (i, block) in l.blocks.iter().enumerate() {
            let (eo, wo) = jpb_node(g, p, block, e, w, y, &mut drop)?;
            e = finite(g, eo, &format!("jpb {i}"))?;
            w = wo;
        }
        let t = self.config.dims.history + self.config.dims.horizon;
        let (eh, ef) = (g.slice_time(e, 0, th)?, g.slice_time(e, th, t)?);
        let (wh, wf) = (g.slice_time(w, 0, th)?, g.slice_time(w, th, t)?);

        let transfer = mkst_attention_node(g, p, &l.last, wf, wh, eh, y)?;
        let out = g.add(transfer, ef)?;
        let out = finite(g, out, "final attention")?;
        let mut pred = l.head.forward(g, p, out)?;
        if let Some((s, b, mean, std)) = stats {
            pred = revin::invert_node(g, pred, s, b, &mean, &std)?;
        }
        let pred = finite(g, pred, "output head")?;
        Ok(ForwardNodes { prediction: pred, relation: y })
    }

    /// Unclipped prediction `[L_E × T_f × 1]`.
    pub fn forward(&self, sample: &ForecastSample, mode: Mode, dropout_seed: u64) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward_nodes(&mut g, sample, mode, dropout_seed)?;
        Ok(g.value(out.prediction).clone())
    }

    /// The learned relation matrix; depends on parameters only.
    pub fn spatial_weights(&self) -> Result<SpatialRelationMatrix> {
        let mut g = Graph::new();
        let (se, sw) = self.site_encodings(&mut g)?;
        let y = spatial_weights_node(&mut g, &self.params, &self.layout.spatial, se, sw)?;
        SpatialRelationMatrix::new(g.value(y).clone())
    }

    /// Eval-mode predictions for every sample, clipped to `[0, 1]`, in input
    /// order. All shapes are checked before any work; the first offending
    /// sample aborts the batch.
    pub fn predict_batch(&self, samples: &[ForecastSample]) -> Result<Predictions> {
        if samples.is_empty() {
            return Err(Error::Empty("prediction batch".into()));
        }
        for (index, s) in samples.iter().enumerate() {
            self.config.dims.check_sample(s).map_err(|e| Error::Sample { index, source: Box::new(e) })?;
        }
        let results: Vec<(Tensor, f64)> = samples
            .par_iter()
            .enumerate()
            .map(|(index, s)| {
                let start = Instant::now();
                let out = self.forward(s, Mode::Eval, 0).map_err(|e| Error::Sample { index, source: Box::new(e) })?;
                Ok((out.map(|v| v.clamp(0.0, 1.0)), start.elapsed().as_secs_f64()))
            })
            .collect::<Result<_>>()?;
        let (outputs, seconds) = results.into_iter().unzip();
        Ok(Predictions { outputs, seconds })
    }
}
