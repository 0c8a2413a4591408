//! Attention mechanisms: scaled dot-product, multi-head, multi-sized-kernel
//! (MK), spatio-temporal (ST) and their composition MKST, plus the learned
//! spatial relation matrix that maps energy sites onto weather sites.
//!
//! Every mechanism exists as a graph builder (`*_node`) used by the model and
//! training code, and as a plain tensor function for direct evaluation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// Tolerance on the row sums of a [`SpatialRelationMatrix`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Row-stochastic `[L_V × L_K]` matrix relating value sites to key sites.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialRelationMatrix(Tensor);

impl SpatialRelationMatrix {
    pub fn new(y: Tensor) -> Result<Self> {
        let (rows, cols) = y.dims2()?;
        for r in 0..rows {
            let row = &y.data()[r * cols..(r + 1) * cols];
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&v| v < 0.0 || !v.is_finite()) || (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::NotRowStochastic { row: r, sum });
            }
        }
        Ok(Self(y))
    }

    pub fn identity(n: usize) -> Self {
        Self(Tensor::identity(n))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.0.shape()[1]
    }

    /// Column index of each row's largest weight (first on ties).
    pub fn row_argmax(&self) -> Vec<usize> {
        let cols = self.cols();
        self.0
            .data()
            .chunks(cols)
            .map(|row| {
                row.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0
            })
            .collect()
    }
}

/// One head of a multi-sized-kernel attention: its own query/key convolutions
/// of width `kernel` and a value projection.
#[derive(Clone, Debug)]
pub struct MkHead {
    pub kernel: usize,
    pub query_weight: ParamId,
    pub query_bias: ParamId,
    pub key_weight: ParamId,
    pub key_bias: ParamId,
    pub value_proj: ParamId,
}

#[derive(Clone, Debug)]
pub struct MkParams {
    pub d_model: usize,
    pub d_head: usize,
    pub heads: Vec<MkHead>,
    /// `[Υ·D_V × D_r]`, shared by every value site.
    pub out_proj: ParamId,
}

impl MkParams {
    /// Register a new MK/MKST parameter block under `prefix`.
    ///
    /// With `zero_output` the output projection starts at zero, so a residual
    /// block built on top of it begins as the identity.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        d_model: usize,
        d_head: usize,
        kernel_sizes: &[usize],
        zero_output: bool,
        rng: &mut R,
    ) -> Result<Self> {
        validate_kernels(kernel_sizes)?;
        if kernel_sizes.len() * d_head != d_model {
            return Err(Error::Config(format!("{} heads × D_V {d_head} must equal D_r {d_model}", kernel_sizes.len())));
        }
        let mut heads = Vec::with_capacity(kernel_sizes.len());
        for (i, &c) in kernel_sizes.iter().enumerate() {
            let fan = c * d_model;
            heads.push(MkHead {
                kernel: c,
                query_weight: params.add_fan_in(format!("{prefix}.head{i}.query.weight"), [c, d_model, d_head], fan, rng),
                query_bias: params.add_fan_in(format!("{prefix}.head{i}.query.bias"), [d_head], fan, rng),
                key_weight: params.add_fan_in(format!("{prefix}.head{i}.key.weight"), [c, d_model, d_head], fan, rng),
                key_bias: params.add_fan_in(format!("{prefix}.head{i}.key.bias"), [d_head], fan, rng),
                value_proj: params.add_fan_in(format!("{prefix}.head{i}.value"), [d_model, d_head], d_model, rng),
            });
        }
        let cat = kernel_sizes.len() * d_head;
        let out_proj = if zero_output {
            params.add(format!("{prefix}.out"), Tensor::zeros([cat, d_model]))
        } else {
            params.add_fan_in(format!("{prefix}.out"), [cat, d_model], cat, rng)
        };
        Ok(Self { d_model, d_head, heads, out_proj })
    }

    pub fn kernel_sizes(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.kernel).collect()
    }
}

pub fn validate_kernels(kernel_sizes: &[usize]) -> Result<()> {
    if kernel_sizes.is_empty() {
        return Err(Error::Config("at least one kernel size is required".into()));
    }
    if let Some(c) = kernel_sizes.iter().find(|&&c| c == 0 || c % 2 == 0) {
        return Err(Error::Config(format!("kernel size {c} must be odd and positive")));
    }
    Ok(())
}

/// Linear maps that turn projected site encodings into spatial matching keys.
#[derive(Clone, Debug)]
pub struct SpatialEncodingParams {
    /// `C_E`: `[D_r × D_Λ]`
    pub energy: ParamId,
    /// `C_W`: `[D_r × D_Λ]`
    pub weather: ParamId,
    pub d_lambda: usize,
}

impl SpatialEncodingParams {
    /// `C_E` starts at zero, which makes the initial relation matrix uniform.
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, d_model: usize, d_lambda: usize, rng: &mut R) -> Result<Self> {
        if d_lambda == 0 {
            return Err(Error::Config("D_Λ must be positive".into()));
        }
        Ok(Self {
            energy: params.add("spatial.energy_key", Tensor::zeros([d_model, d_lambda])),
            weather: params.add_fan_in("spatial.weather_key", [d_model, d_lambda], d_model, rng),
            d_lambda,
        })
    }
}

/// Projections for classic multi-head attention.
#[derive(Clone, Debug)]
pub struct HeadProjection {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
}

// ---------------------------------------------------------------------------
// Graph builders
// ---------------------------------------------------------------------------

/// Rank-2 `[N × D]` node viewed as a single batch `[1 × N × D]`.
fn as_batch(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    match *g.shape(x) {
        [n, d] => g.reshape(x, [1, n, d]),
        [_, _, _] => Ok(x),
        _ => Err(Error::shape("attention input", format!("{:?}", g.shape(x)))),
    }
}

/// Scaled dot-product attention over batched `[B × N × D]` inputs. Returns
/// `(output, weights)`.
pub fn sdpa_node(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId) -> Result<(NodeId, NodeId)> {
    let d_k = *g.shape(q).last().unwrap_or(&0);
    if d_k == 0 {
        return Err(Error::shape("sdpa", "D_K must be at least 1"));
    }
    if g.shape(k).get(1) != g.shape(v).get(1) {
        return Err(Error::shape("sdpa", format!("keys {:?} vs values {:?}", g.shape(k), g.shape(v))));
    }
    let s = g.scores(q, k, 1.0 / (d_k as f64).sqrt())?;
    let m = g.softmax(s);
    Ok((g.bmm(m, v)?, m))
}

pub fn multi_head_node(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: &[(NodeId, NodeId, NodeId)],
    out_proj: NodeId,
) -> Result<NodeId> {
    let d_model = *g.shape(q).last().unwrap_or(&0);
    if heads.is_empty() || !d_model.is_multiple_of(heads.len()) {
        return Err(Error::Config(format!("D_r {d_model} not divisible by {} heads", heads.len())));
    }
    let (q, k, v) = (as_batch(g, q)?, as_batch(g, k)?, as_batch(g, v)?);
    let mut outs = Vec::with_capacity(heads.len());
    for &(sq, sk, sv) in heads {
        let qh = g.linear(q, sq)?;
        let kh = g.linear(k, sk)?;
        let vh = g.linear(v, sv)?;
        outs.push(sdpa_node(g, qh, kh, vh)?.0);
    }
    let cat = g.concat(&outs, 2)?;
    let out = g.linear(cat, out_proj)?;
    let (_, n, d) = g.value(out).dims3()?;
    g.reshape(out, [n, d])
}

fn head_inputs(
    g: &mut Graph,
    params: &ParamSet,
    head: &MkHead,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> Result<(NodeId, NodeId, NodeId)> {
    let (qw, qb) = (g.param(params, head.query_weight), g.param(params, head.query_bias));
    let (kw, kb) = (g.param(params, head.key_weight), g.param(params, head.key_bias));
    let sv = g.param(params, head.value_proj);
    Ok((g.conv1d(q, qw, qb)?, g.conv1d(k, kw, kb)?, g.linear(v, sv)?))
}

/// Multi-sized-kernel attention on flat `[N × D_r]` queries, keys and values.
pub fn mk_attention_node(g: &mut Graph, params: &ParamSet, mk: &MkParams, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
    let (q, k, v) = (as_batch(g, q)?, as_batch(g, k)?, as_batch(g, v)?);
    let mut outs = Vec::with_capacity(mk.heads.len());
    // Heads run one after another: their kernel widths differ.
    for head in &mk.heads {
        let (qh, kh, vh) = head_inputs(g, params, head, q, k, v)?;
        outs.push(sdpa_node(g, qh, kh, vh)?.0);
    }
    let cat = g.concat(&outs, 2)?;
    let so = g.param(params, mk.out_proj);
    let out = g.linear(cat, so)?;
    let (_, n, d) = g.value(out).dims3()?;
    g.reshape(out, [n, d])
}

/// Node ids of a spatio-temporal attention evaluation.
#[derive(Clone, Copy, Debug)]
pub struct StNodes {
    /// `[L_V × T_Q × D_v]`
    pub output: NodeId,
    /// Per key-site temporal weights `M`, `[L_K × T_Q × T_K]`.
    pub weights: NodeId,
    /// Site-mixed weights `B`, `[L_V × T_Q × T_K]`.
    pub mixed: NodeId,
}

/// Spatio-temporal attention: per-key-site temporal attention matrices mixed
/// into each value site through the rows of `y`.
pub fn st_attention_node(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId, y: NodeId) -> Result<StNodes> {
    let (lk, tq, dk) = g.value(q).dims3()?;
    let (lk2, tk, dk2) = g.value(k).dims3()?;
    let (lv, tk2, _) = g.value(v).dims3()?;
    let (ly, ly2) = g.value(y).dims2()?;
    if lk != lk2 || dk != dk2 || tk != tk2 || ly != lv || ly2 != lk {
        return Err(Error::shape(
            "st_attention",
            format!("q {:?}, k {:?}, v {:?}, y {:?}", g.shape(q), g.shape(k), g.shape(v), g.shape(y)),
        ));
    }
    if dk == 0 {
        return Err(Error::shape("st_attention", "D_K must be at least 1"));
    }
    let s = g.scores(q, k, 1.0 / (dk as f64).sqrt())?;
    let m = g.softmax(s);
    let flat = g.reshape(m, [lk, tq * tk])?;
    let mixed = g.linear(y, flat)?;
    let b = g.reshape(mixed, [lv, tq, tk])?;
    let output = g.bmm(b, v)?;
    Ok(StNodes { output, weights: m, mixed: b })
}

/// Multi-sized-kernel spatio-temporal attention.
///
/// `q`, `k`: `[L_K × T × D_r]` (weather side), `v`: `[L_V × T_K × D_r]`,
/// `y`: `[L_V × L_K]`. Output `[L_V × T_Q × D_r]`.
pub fn mkst_attention_node(
    g: &mut Graph,
    params: &ParamSet,
    mk: &MkParams,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    y: NodeId,
) -> Result<NodeId> {
    let mut outs = Vec::with_capacity(mk.heads.len());
    for head in &mk.heads {
        let (qh, kh, vh) = head_inputs(g, params, head, q, k, v)?;
        outs.push(st_attention_node(g, qh, kh, vh, y)?.output);
    }
    let cat = g.concat(&outs, 2)?;
    let so = g.param(params, mk.out_proj);
    g.linear(cat, so)
}

/// Relation matrix from projected site encodings:
/// `softmax((S_E·C_E)(S_W·C_W)ᵀ / √D_Λ)`.
pub fn spatial_weights_node(
    g: &mut Graph,
    params: &ParamSet,
    enc: &SpatialEncodingParams,
    energy_sites: NodeId,
    weather_sites: NodeId,
) -> Result<NodeId> {
    let ce = g.param(params, enc.energy);
    let cw = g.param(params, enc.weather);
    let le = g.linear(energy_sites, ce)?;
    let lw = g.linear(weather_sites, cw)?;
    let (ne, d) = g.value(le).dims2()?;
    let (nw, _) = g.value(lw).dims2()?;
    let le = g.reshape(le, [1, ne, d])?;
    let lw = g.reshape(lw, [1, nw, d])?;
    let s = g.scores(le, lw, 1.0 / (enc.d_lambda as f64).sqrt())?;
    let y = g.softmax(s);
    g.reshape(y, [ne, nw])
}

// ---------------------------------------------------------------------------
// Plain tensor API
// ---------------------------------------------------------------------------

/// Batched matrix product `[N1×N2×N3] ⊗ [N1×N3×N4] → [N1×N2×N4]`.
pub fn bmm(b: &Tensor, d: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (bn, dn) = (g.constant(b.clone()), g.constant(d.clone()));
    let out = g.bmm(bn, dn)?;
    Ok(g.value(out).clone())
}

/// Scaled dot-product attention on `[N_Q × D_K]`, `[N_K × D_K]`, `[N_K × D_V]`.
/// Returns `(output, weights)`.
pub fn sdpa(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let (nq, dq) = q.dims2()?;
    let (nk, dk) = k.dims2()?;
    let (nv, _) = v.dims2()?;
    if dq != dk || nk != nv {
        return Err(Error::shape("sdpa", format!("{:?}, {:?}, {:?}", q.shape(), k.shape(), v.shape())));
    }
    let mut g = Graph::new();
    let qn = g.constant(q.clone().reshape([1, nq, dq])?);
    let kn = g.constant(k.clone().reshape([1, nk, dk])?);
    let vn = g.constant(v.clone().reshape([1, nv, v.shape()[1]])?);
    let (out, m) = sdpa_node(&mut g, qn, kn, vn)?;
    let out = g.value(out).clone().reshape([nq, v.shape()[1]])?;
    let m = g.value(m).clone().reshape([nq, nk])?;
    Ok((out, m))
}

/// Classic multi-head attention with explicit per-head projections.
pub fn multi_head(q: &Tensor, k: &Tensor, v: &Tensor, heads: &[HeadProjection], out_proj: &Tensor) -> Result<Tensor> {
    let (_, d_model) = q.dims2()?;
    if heads.is_empty() || d_model % heads.len() != 0 {
        return Err(Error::Config(format!("D_r {d_model} not divisible by {} heads", heads.len())));
    }
    let mut g = Graph::new();
    let (qn, kn, vn) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let nodes: Vec<_> =
        heads.iter().map(|h| (g.constant(h.query.clone()), g.constant(h.key.clone()), g.constant(h.value.clone()))).collect();
    let so = g.constant(out_proj.clone());
    let out = multi_head_node(&mut g, qn, kn, vn, &nodes, so)?;
    Ok(g.value(out).clone())
}

/// Same-length 1-D convolution of `[L × T × D_in]` with `weight[c × D_in × D_out]`.
pub fn conv_project(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (xn, wn, bn) = (g.constant(x.clone()), g.constant(weight.clone()), g.constant(bias.clone()));
    let out = g.conv1d(xn, wn, bn)?;
    Ok(g.value(out).clone())
}

pub fn mk_attention(params: &ParamSet, mk: &MkParams, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (qn, kn, vn) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = mk_attention_node(&mut g, params, mk, qn, kn, vn)?;
    Ok(g.value(out).clone())
}

/// Spatio-temporal attention result with its intermediate weight tensors.
#[derive(Clone, Debug)]
pub struct StAttention {
    pub output: Tensor,
    pub weights: Tensor,
    pub mixed: Tensor,
}

pub fn st_attention(q: &Tensor, k: &Tensor, v: &Tensor, y: &Tensor) -> Result<StAttention> {
    SpatialRelationMatrix::new(y.clone())?;
    let mut g = Graph::new();
    let (qn, kn, vn, yn) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()), g.constant(y.clone()));
    let nodes = st_attention_node(&mut g, qn, kn, vn, yn)?;
    Ok(StAttention {
        output: g.value(nodes.output).clone(),
        weights: g.value(nodes.weights).clone(),
        mixed: g.value(nodes.mixed).clone(),
    })
}

pub fn mkst_attention(
    params: &ParamSet,
    mk: &MkParams,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    y: &SpatialRelationMatrix,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let (qn, kn, vn, yn) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()), g.constant(y.tensor().clone()));
    let out = mkst_attention_node(&mut g, params, mk, qn, kn, vn, yn)?;
    Ok(g.value(out).clone())
}

/// Relation matrix from already projected site encodings `[L_E × D_r]`, `[L_W × D_r]`.
pub fn spatial_weights(
    params: &ParamSet,
    enc: &SpatialEncodingParams,
    energy_sites: &Tensor,
    weather_sites: &Tensor,
) -> Result<SpatialRelationMatrix> {
    let mut g = Graph::new();
    let (en, wn) = (g.constant(energy_sites.clone()), g.constant(weather_sites.clone()));
    let y = spatial_weights_node(&mut g, params, enc, en, wn)?;
    Ok(SpatialRelationMatrix(g.value(y).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn bmm_with_identity_batch_returns_rhs() {
        let mut r = rng();
        let d = Tensor::uniform([3, 4, 2], 1.0, &mut r);
        let eye = Tensor::stack(&[Tensor::identity(4), Tensor::identity(4), Tensor::identity(4)]).unwrap();
        assert_eq!(bmm(&eye, &d).unwrap(), d);
    }

    #[test]
    fn bmm_single_batch_is_matmul() {
        let mut r = rng();
        let a = Tensor::uniform([3, 4], 1.0, &mut r);
        let b = Tensor::uniform([4, 5], 1.0, &mut r);
        let batched = bmm(&a.clone().reshape([1, 3, 4]).unwrap(), &b.clone().reshape([1, 4, 5]).unwrap()).unwrap();
        assert_eq!(batched.reshape([3, 5]).unwrap(), a.matmul(&b).unwrap());
    }

    #[test]
    fn bmm_rejects_mismatched_inner_dims() {
        assert!(bmm(&Tensor::zeros([2, 3, 4]), &Tensor::zeros([2, 3, 5])).is_err());
        assert!(bmm(&Tensor::zeros([2, 3, 4]), &Tensor::zeros([3, 4, 5])).is_err());
    }

    #[test]
    fn sdpa_single_key_returns_value_row() {
        let q = Tensor::new([2, 2], vec![5.0, -3.0, 0.1, 9.0]).unwrap();
        let k = Tensor::new([1, 2], vec![0.3, 0.4]).unwrap();
        let v = Tensor::new([1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let (out, _) = sdpa(&q, &k, &v).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn sdpa_symmetric_scores_average_values() {
        let q = Tensor::new([1, 2], vec![0.0, 0.0]).unwrap();
        let k = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = Tensor::new([2, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        let (out, m) = sdpa(&q, &k, &v).unwrap();
        assert_eq!(out.data(), &[1.0, 1.0]);
        assert_eq!(m.data(), &[0.5, 0.5]);
    }

    #[test]
    fn multi_head_zero_output_projection_annihilates() {
        let mut r = rng();
        let q = Tensor::uniform([3, 4], 1.0, &mut r);
        let heads: Vec<_> = (0..2)
            .map(|_| HeadProjection {
                query: Tensor::uniform([4, 2], 1.0, &mut r),
                key: Tensor::uniform([4, 2], 1.0, &mut r),
                value: Tensor::uniform([4, 2], 1.0, &mut r),
            })
            .collect();
        let out = multi_head(&q, &q, &q, &heads, &Tensor::zeros([4, 4])).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn multi_head_rejects_indivisible_width() {
        let q = Tensor::zeros([2, 5]);
        let h = HeadProjection { query: Tensor::zeros([5, 2]), key: Tensor::zeros([5, 2]), value: Tensor::zeros([5, 2]) };
        assert!(matches!(multi_head(&q, &q, &q, &[h.clone(), h], &Tensor::zeros([4, 5])), Err(Error::Config(_))));
    }

    #[test]
    fn conv_width_one_identity_copies_channel() {
        let mut r = rng();
        let x = Tensor::uniform([2, 6, 3], 1.0, &mut r);
        let mut w = Tensor::zeros([1, 3, 1]);
        w.set(&[0, 1, 0], 1.0);
        let out = conv_project(&x, &w, &Tensor::zeros([1])).unwrap();
        for l in 0..2 {
            for t in 0..6 {
                assert_eq!(out.at(&[l, t, 0]), x.at(&[l, t, 1]));
            }
        }
    }

    #[test]
    fn conv_averaging_kernel_attenuates_edges() {
        let x = Tensor::full([1, 6, 1], 3.0);
        let w = Tensor::full([3, 1, 1], 1.0 / 3.0);
        let out = conv_project(&x, &w, &Tensor::zeros([1])).unwrap();
        for t in 1..5 {
            assert!((out.at(&[0, t, 0]) - 3.0).abs() < 1e-12);
        }
        assert!((out.at(&[0, 0, 0]) - 2.0).abs() < 1e-12);
        assert!((out.at(&[0, 5, 0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn even_kernel_is_rejected() {
        let mut p = ParamSet::new();
        assert!(MkParams::new(&mut p, "mk", 8, 4, &[3, 4], false, &mut rng()).is_err());
        assert!(MkParams::new(&mut p, "mk", 8, 4, &[3], false, &mut rng()).is_err());
    }

    #[test]
    fn relation_matrix_validation() {
        assert!(SpatialRelationMatrix::new(Tensor::new([1, 2], vec![0.5, 0.6]).unwrap()).is_err());
        assert!(SpatialRelationMatrix::new(Tensor::new([1, 2], vec![1.2, -0.2]).unwrap()).is_err());
        assert!(SpatialRelationMatrix::new(Tensor::new([1, 2], vec![0.25, 0.75]).unwrap()).is_ok());
        let y = SpatialRelationMatrix::new(Tensor::new([2, 3], vec![0.2, 0.5, 0.3, 0.6, 0.2, 0.2]).unwrap()).unwrap();
        assert_eq!(y.row_argmax(), vec![1, 0]);
    }

    #[test]
    fn st_attention_rejects_non_stochastic_mixing() {
        let q = Tensor::zeros([2, 3, 2]);
        let v = Tensor::zeros([1, 3, 2]);
        let y = Tensor::new([1, 2], vec![0.7, 0.7]).unwrap();
        assert!(matches!(st_attention(&q, &q, &v, &y), Err(Error::NotRowStochastic { .. })));
    }

    #[test]
    fn zero_energy_key_gives_uniform_relation() {
        let mut r = rng();
        let mut p = ParamSet::new();
        let enc = SpatialEncodingParams::new(&mut p, 6, 4, &mut r).unwrap();
        let se = Tensor::uniform([2, 6], 1.0, &mut r);
        let sw = Tensor::uniform([5, 6], 1.0, &mut r);
        let y = spatial_weights(&p, &enc, &se, &sw).unwrap();
        assert!(y.tensor().data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }
}
