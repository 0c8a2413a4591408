//! Error metrics per site and averaged, plus CSV reports.

use std::io::Write;

use serde::Serialize;

use crate::data::{ForecastSample, Instant};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ALL_SITES: &str = "ALL";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SiteScore {
    pub site: String,
    pub mae: f64,
    pub rmse: f64,
    /// In the capacity's unit (e.g. MW) when capacities were given.
    pub mae_mw: Option<f64>,
    pub rmse_mw: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SiteMetrics {
    /// Declaration order of the dataset.
    pub sites: Vec<SiteScore>,
    /// Arithmetic mean of the per-site values.
    pub all: SiteScore,
}

fn average(name: &str, scores: &[SiteScore]) -> SiteScore {
    let n = scores.len() as f64;
    let mean = |f: &dyn Fn(&SiteScore) -> f64| scores.iter().map(f).sum::<f64>() / n;
    let mean_opt = |f: &dyn Fn(&SiteScore) -> Option<f64>| {
        scores.iter().map(f).collect::<Option<Vec<f64>>>().map(|v| v.iter().sum::<f64>() / n)
    };
    SiteScore {
        site: name.to_string(),
        mae: mean(&|s| s.mae),
        rmse: mean(&|s| s.rmse),
        mae_mw: mean_opt(&|s| s.mae_mw),
        rmse_mw: mean_opt(&|s| s.rmse_mw),
    }
}

/// MAE and RMSE per site over every forecast step of every sample.
///
/// `predictions` and `targets` are `[L_E × T_f × 1]` per sample in
/// normalized units; with `capacities` the scores are also reported scaled
/// back to physical units.
pub fn compute_metrics(
    predictions: &[Tensor],
    targets: &[Tensor],
    site_ids: &[String],
    capacities: Option<&[f64]>,
) -> Result<SiteMetrics> {
    if predictions.is_empty() {
        return Err(Error::Empty("no predictions to score".into()));
    }
    if predictions.len() != targets.len() {
        return Err(Error::shape("metrics", format!("{} predictions, {} targets", predictions.len(), targets.len())));
    }
    let l = site_ids.len();
    if capacities.is_some_and(|c| c.len() != l) {
        return Err(Error::shape("metrics", format!("{l} sites but {} capacities", capacities.unwrap().len())));
    }
    let mut abs = vec![0.0; l];
    let mut sq = vec![0.0; l];
    let mut count = 0usize;
    for (i, (p, t)) in predictions.iter().zip(targets).enumerate() {
        if p.shape() != t.shape() || p.shape().first() != Some(&l) {
            return Err(Error::Sample {
                index: i,
                source: Box::new(Error::shape("metrics", format!("{:?} vs {:?} for {l} sites", p.shape(), t.shape()))),
            });
        }
        if !t.is_finite() {
            return Err(Error::Sample { index: i, source: Box::new(Error::NonFinite { stage: "target".into() }) });
        }
        let per_site = p.len() / l;
        for (site, (pc, tc)) in p.data().chunks(per_site).zip(t.data().chunks(per_site)).enumerate() {
            for (a, b) in pc.iter().zip(tc) {
                abs[site] += (a - b).abs();
                sq[site] += (a - b) * (a - b);
            }
        }
        count += per_site;
    }
    let sites: Vec<SiteScore> = site_ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let mae = abs[i] / count as f64;
            let rmse = (sq[i] / count as f64).sqrt();
            let cap = capacities.map(|c| c[i]);
            SiteScore { site: id.clone(), mae, rmse, mae_mw: cap.map(|c| mae * c), rmse_mw: cap.map(|c| rmse * c) }
        })
        .collect();
    let all = average(ALL_SITES, &sites);
    Ok(SiteMetrics { sites, all })
}

/// Cell-wise mean over repeated runs with the same site layout.
pub fn run_mean(runs: &[SiteMetrics]) -> Result<SiteMetrics> {
    let first = runs.first().ok_or_else(|| Error::Empty("no runs to average".into()))?;
    for r in runs {
        if r.sites.len() != first.sites.len() || r.sites.iter().zip(&first.sites).any(|(a, b)| a.site != b.site) {
            return Err(Error::shape("run_mean", "runs cover different sites"));
        }
    }
    let cell = |i: Option<usize>| {
        let scores: Vec<SiteScore> = runs.iter().map(|r| i.map_or(&r.all, |i| &r.sites[i]).clone()).collect();
        average(&scores[0].site, &scores)
    };
    Ok(SiteMetrics { sites: (0..first.sites.len()).map(|i| cell(Some(i))).collect(), all: cell(None) })
}

/// `site,mae,rmse[,mae_mw,rmse_mw]` with one row per site and a final `ALL`.
pub fn write_metrics_csv<W: Write>(out: W, metrics: &SiteMetrics) -> Result<()> {
    let physical = metrics.all.mae_mw.is_some();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["site", "mae", "rmse"];
    if physical {
        header.extend(["mae_mw", "rmse_mw"]);
    }
    w.write_record(&header)?;
    for s in metrics.sites.iter().chain(std::iter::once(&metrics.all)) {
        let mut row = vec![s.site.clone(), s.mae.to_string(), s.rmse.to_string()];
        if physical {
            row.push(s.mae_mw.unwrap_or(f64::NAN).to_string());
            row.push(s.rmse_mw.unwrap_or(f64::NAN).to_string());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub timestamp: Instant,
    pub site: String,
    pub target: f64,
    pub prediction: f64,
}

/// Hourly target/prediction pairs for every site, restricted to
/// `[span.0, span.1)` when a span is given. Rows are ordered by site, then time.
pub fn trace_rows(
    samples: &[ForecastSample],
    predictions: &[Tensor],
    site_ids: &[String],
    span: Option<(Instant, Instant)>,
) -> Result<Vec<TraceRow>> {
    if samples.len() != predictions.len() {
        return Err(Error::shape("trace", format!("{} samples, {} predictions", samples.len(), predictions.len())));
    }
    let mut rows = Vec::new();
    for (site, id) in site_ids.iter().enumerate() {
        for (s, p) in samples.iter().zip(predictions) {
            let target = s.target.as_ref().ok_or_else(|| Error::Empty("sample has no target".into()))?;
            let tf = s.horizon();
            for (h, ts) in s.forecast_times().into_iter().enumerate() {
                if span.is_some_and(|(a, b)| ts < a || ts >= b) {
                    continue;
                }
                rows.push(TraceRow {
                    timestamp: ts,
                    site: id.clone(),
                    target: target.data()[site * tf + h],
                    prediction: p.data()[site * tf + h],
                });
            }
        }
    }
    Ok(rows)
}

/// `timestamp,site,target,prediction`; timestamps in RFC 3339 UTC.
pub fn write_trace_csv<W: Write>(out: W, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["timestamp", "site", "target", "prediction"])?;
    for r in rows {
        w.write_record([
            r.timestamp.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
            r.site.clone(),
            r.target.to_string(),
            r.prediction.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}
