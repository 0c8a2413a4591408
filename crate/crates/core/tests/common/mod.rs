//! Straight-loop reference implementations used as test oracles, plus small
//! helpers. Nothing here touches the autodiff graph.

#![allow(dead_code, clippy::needless_range_loop)]

use chrono::{TimeZone, Utc};
use mkst_core::data::ForecastSample;
use mkst_core::{Model, ParamSet, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type M2 = Vec<Vec<f64>>;
pub type A3 = Vec<M2>;

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

pub fn rand_stochastic(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::from_fn([rows, cols], |_| rng.gen_range(0.01..1.0));
    for row in t.data_mut().chunks_mut(cols) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

pub fn to_m2(t: &Tensor) -> M2 {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| (0..c).map(|j| t.at(&[i, j])).collect()).collect()
}

pub fn to_a3(t: &Tensor) -> A3 {
    let s = t.shape();
    (0..s[0]).map(|i| (0..s[1]).map(|j| (0..s[2]).map(|k| t.at(&[i, j, k])).collect()).collect()).collect()
}

pub fn flat2(m: &M2) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn flat3(a: &A3) -> Vec<f64> {
    a.iter().flatten().flatten().copied().collect()
}

/// Max absolute difference divided by the reference's max magnitude.
pub fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len(), "length mismatch");
    let diff = got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = want.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn param<'a>(p: &'a ParamSet, name: &str) -> &'a Tensor {
    p.get(p.find(name).unwrap_or_else(|| panic!("no parameter `{name}`")))
}

// ---------------------------------------------------------------------------
// dense algebra
// ---------------------------------------------------------------------------

pub fn matmul(a: &M2, b: &M2) -> M2 {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

/// `x·W + b` on every row of every site.
pub fn affine3(x: &A3, w: &Tensor, b: Option<&Tensor>) -> A3 {
    let wm = to_m2(w);
    x.iter()
        .map(|site| {
            let mut y = matmul(site, &wm);
            if let Some(b) = b {
                for row in &mut y {
                    for (o, bb) in row.iter_mut().zip(b.data()) {
                        *o += bb;
                    }
                }
            }
            y
        })
        .collect()
}

pub fn bmm(b: &A3, d: &A3) -> A3 {
    b.iter().zip(d).map(|(x, y)| matmul(x, y)).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `(softmax(QKᵀ/√d)·V, weights)`.
pub fn sdpa(q: &M2, k: &M2, v: &M2) -> (M2, M2) {
    let d = q[0].len() as f64;
    let mut weights = Vec::new();
    for qi in q {
        let scores: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
        weights.push(softmax(&scores));
    }
    (matmul(&weights, v), weights)
}

/// Zero-padded same-length convolution, `w[c × C_in × C_out]`.
pub fn conv(x: &A3, w: &Tensor, b: &Tensor) -> A3 {
    let (c, cin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let pad = (c - 1) as isize / 2;
    x.iter()
        .map(|site| {
            let t = site.len() as isize;
            (0..t)
                .map(|ti| {
                    (0..cout)
                        .map(|o| {
                            let mut s = b.data()[o];
                            for j in 0..c {
                                let src = ti + j as isize - pad;
                                if src < 0 || src >= t {
                                    continue;
                                }
                                for i in 0..cin {
                                    s += site[src as usize][i] * w.at(&[j, i, o]);
                                }
                            }
                            s
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub struct St {
    pub output: A3,
    pub weights: A3,
    pub mixed: A3,
}

/// `M_i = softmax(Q_i K_iᵀ/√d)`, `B_j = Σ_i y_ji M_i`, `out_j = B_j V_j`.
pub fn st_attention(q: &A3, k: &A3, v: &A3, y: &M2) -> St {
    let weights: A3 = q.iter().zip(k).map(|(qi, ki)| sdpa(qi, ki, ki).1).collect();
    let (tq, tk) = (weights[0].len(), weights[0][0].len());
    let mixed: A3 = y
        .iter()
        .map(|yj| {
            let mut b = vec![vec![0.0; tk]; tq];
            for (i, m) in weights.iter().enumerate() {
                for r in 0..tq {
                    for c in 0..tk {
                        b[r][c] += yj[i] * m[r][c];
                    }
                }
            }
            b
        })
        .collect();
    St { output: bmm(&mixed, v), weights, mixed }
}

fn heads(p: &ParamSet, prefix: &str) -> usize {
    (0..).take_while(|i| p.find(&format!("{prefix}.head{i}.value")).is_some()).count()
}

/// Per head: conv queries/keys, project values, ST-attention; then
/// concatenate heads and apply the shared output projection.
pub fn mkst(p: &ParamSet, prefix: &str, q: &A3, k: &A3, v: &A3, y: &M2) -> A3 {
    let outs: Vec<A3> = (0..heads(p, prefix))
        .map(|h| {
            let n = |s: &str| format!("{prefix}.head{h}.{s}");
            let qh = conv(q, param(p, &n("query.weight")), param(p, &n("query.bias")));
            let kh = conv(k, param(p, &n("key.weight")), param(p, &n("key.bias")));
            let vh = affine3(v, param(p, &n("value")), None);
            st_attention(&qh, &kh, &vh, y).output
        })
        .collect();
    let cat: A3 = (0..outs[0].len())
        .map(|l| (0..outs[0][l].len()).map(|t| outs.iter().flat_map(|o| o[l][t].clone()).collect()).collect())
        .collect();
    affine3(&cat, param(p, &format!("{prefix}.out")), None)
}

/// Flat MK-attention: one site, plain SDPA per head.
pub fn mk_attention(p: &ParamSet, prefix: &str, q: &M2, k: &M2, v: &M2) -> M2 {
    let one = |m: &M2| vec![m.clone()];
    let y = vec![vec![1.0]];
    mkst(p, prefix, &one(q), &one(k), &one(v), &y).remove(0)
}

fn relu3(x: A3) -> A3 {
    x.into_iter().map(|s| s.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect()).collect()
}

fn pool(x: &A3) -> A3 {
    x.iter()
        .map(|site| {
            let t = site.len();
            (0..t.div_ceil(2))
                .map(|i| {
                    let a = &site[2 * i];
                    let b = &site[(2 * i + 1).min(t - 1)];
                    a.iter().zip(b).map(|(x, y)| x.max(*y)).collect()
                })
                .collect()
        })
        .collect()
}

pub fn utcae(p: &ParamSet, prefix: &str, x: &A3) -> A3 {
    let levels = (0..).take_while(|i| p.find(&format!("{prefix}.enc{i}.weight")).is_some()).count();
    let c = |name: String, x: &A3| relu3(conv(x, param(p, &format!("{name}.weight")), param(p, &format!("{name}.bias"))));
    let mut skips = Vec::new();
    let mut cur = x.clone();
    for i in 0..levels {
        let h = c(format!("{prefix}.enc{i}"), &cur);
        cur = pool(&h);
        skips.push(h);
    }
    cur = c(format!("{prefix}.bottom"), &cur);
    for i in (0..levels).rev() {
        let skip = &skips[i];
        let cat: A3 = skip
            .iter()
            .zip(&cur)
            .map(|(s_site, c_site)| {
                s_site.iter().enumerate().map(|(t, s_row)| c_site[t / 2].iter().chain(s_row).copied().collect()).collect()
            })
            .collect();
        cur = c(format!("{prefix}.dec{i}"), &cat);
    }
    cur
}

pub fn add3(a: &A3, b: &A3) -> A3 {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(r, s)| r.iter().zip(s).map(|(u, v)| u + v).collect()).collect()).collect()
}

/// `(E_out, W_out)`.
pub fn jpb(p: &ParamSet, prefix: &str, e: &A3, w: &A3, y: &M2) -> (A3, A3) {
    let eu = utcae(p, &format!("{prefix}.utcae_energy"), e);
    let wo = utcae(p, &format!("{prefix}.utcae_weather"), w);
    let t = mkst(p, &format!("{prefix}.mkst"), &wo, &wo, &eu, y);
    (add3(&t, &eu), wo)
}

pub fn spatial_weights(p: &ParamSet, se: &M2, sw: &M2) -> M2 {
    let ce = to_m2(param(p, "spatial.energy_key"));
    let cw = to_m2(param(p, "spatial.weather_key"));
    let (a, b) = (matmul(se, &ce), matmul(sw, &cw));
    sdpa(&a, &b, &b).1
}

fn slice_t(x: &A3, lo: usize, hi: usize) -> A3 {
    x.iter().map(|s| s[lo..hi].to_vec()).collect()
}

fn concat_t(a: &A3, b: &A3) -> A3 {
    a.iter().zip(b).map(|(x, y)| x.iter().chain(y).cloned().collect()).collect()
}

fn add_rows(x: &A3, rows: &M2) -> A3 {
    x.iter().zip(rows).map(|(site, r)| site.iter().map(|v| v.iter().zip(r).map(|(a, b)| a + b).collect()).collect()).collect()
}

/// Whole eval-mode forecaster, written out step by step.
pub fn forecast(model: &Model, s: &ForecastSample) -> A3 {
    let p = &model.params;
    let dims = model.config.dims;
    let (le, lw) = (dims.energy_sites, dims.weather_sites);
    let mut eh = to_a3(&s.energy_history);
    let revin = model.config.arch.revin;
    let mut stats = Vec::new();
    if revin {
        let (g, b) = (param(p, "revin.scale"), param(p, "revin.shift"));
        for (l, site) in eh.iter_mut().enumerate() {
            let n = site.len() as f64;
            let m = site.iter().map(|r| r[0]).sum::<f64>() / n;
            let sd = (site.iter().map(|r| (r[0] - m).powi(2)).sum::<f64>() / n).sqrt().max(1e-5);
            for r in site.iter_mut() {
                r[0] = (r[0] - m) / sd * g.data()[l] + b.data()[l];
            }
            stats.push((m, sd));
        }
    }
    let lin = |x: &A3, name: &str| affine3(x, param(p, &format!("{name}.weight")), Some(param(p, &format!("{name}.bias"))));
    let eh = lin(&eh, "input.energy");
    let wh = lin(&to_a3(&s.weather_history), "input.weather");
    let wf = lin(&to_a3(&s.weather_future), "input.weather");

    let ds = le + lw;
    let onehot = |i: usize| (0..ds).map(|j| if i == j { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let enc = lin(&vec![(0..ds).map(onehot).collect()], "input.site").remove(0);
    let (se, sw) = (enc[..le].to_vec(), enc[le..].to_vec());
    let eh = add_rows(&eh, &se);
    let wh = add_rows(&wh, &sw);
    let wf = add_rows(&wf, &sw);
    let y = spatial_weights(p, &se, &sw);

    let ef = mkst(p, "bootstrap", &wf, &wh, &eh, &y);
    let mut e = concat_t(&eh, &ef);
    let mut w = concat_t(&wh, &wf);
    for i in 0..model.config.arch.blocks {
        let (eo, wo) = jpb(p, &format!("jpb{i}"), &e, &w, &y);
        e = eo;
        w = wo;
    }
    let (th, t) = (dims.history, dims.history + dims.horizon);
    let out = add3(&mkst(p, "final", &slice_t(&w, th, t), &slice_t(&w, 0, th), &slice_t(&e, 0, th), &y), &slice_t(&e, th, t));
    let mut pred = lin(&out, "head");
    if revin {
        let (g, b) = (param(p, "revin.scale"), param(p, "revin.shift"));
        for (l, site) in pred.iter_mut().enumerate() {
            for r in site.iter_mut() {
                r[0] = (r[0] - b.data()[l]) / (g.data()[l] + 1e-10) * stats[l].1 + stats[l].0;
            }
        }
    }
    pred
}

pub fn random_sample(model: &Model, rng: &mut ChaCha8Rng) -> ForecastSample {
    let d = model.config.dims;
    ForecastSample {
        energy_history: Tensor::from_fn([d.energy_sites, d.history, 1], |_| rng.gen_range(0.0..1.0)),
        weather_history: rand_tensor(&[d.weather_sites, d.history, d.weather_vars], rng),
        weather_future: rand_tensor(&[d.weather_sites, d.horizon, d.weather_vars], rng),
        target: Some(Tensor::from_fn([d.energy_sites, d.horizon, 1], |_| rng.gen_range(0.0..1.0))),
        issue_time: Utc.with_ymd_and_hms(2013, 1, 1, 0, 0, 0).unwrap(),
    }
}

/// Give every parameter (including zero-initialised ones) a random value so
/// oracle comparisons exercise every path.
pub fn randomize(params: &mut ParamSet, rng: &mut ChaCha8Rng, scale: f64) {
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

/// Synthetic spatial-mapping data, windowed, split and normalized.
pub fn synthetic_prepared(
    spec: &mkst_core::synthetic::SyntheticSpec,
    history: usize,
    horizon: usize,
    stride: usize,
    train_days: i64,
) -> (mkst_core::data::Prepared, Vec<usize>) {
    use mkst_core::data::{prepare_dataset, DatasetConfig, EnergyType, IngestReport, SplitBoundaries};
    use mkst_core::synthetic::{generate, start_time};
    let syn = generate(spec).unwrap();
    let t0 = start_time();
    let total_days = (spec.hours / 24) as i64;
    let cfg = DatasetConfig {
        energy_type: EnergyType::Wind,
        energy_files: vec![],
        weather_files: vec![],
        variables: None,
        history,
        horizon,
        stride,
        splits: SplitBoundaries {
            train_end: t0 + chrono::Duration::days(train_days),
            validation_end: t0 + chrono::Duration::days(total_days),
            test_end: None,
        },
        capacity: Default::default(),
        max_interpolated_gap: 0,
    };
    (prepare_dataset(syn.dataset, IngestReport::default(), &cfg).unwrap(), syn.driver)
}
