use chrono::Duration;

use super::{encode_cyclical, Dataset, DatasetSplit, ForecastSample, SplitBoundaries, CYCLICAL_FEATURES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Samples cut from a dataset. `too_short` flags a series that could not
/// hold a single window.
#[derive(Clone, Debug)]
pub struct Windows {
    pub samples: Vec<ForecastSample>,
    pub too_short: bool,
}

/// Number of windows of `history + horizon` steps, issued every `stride`
/// steps, that fit in `len` steps.
pub fn window_count(len: usize, history: usize, horizon: usize, stride: usize) -> usize {
    if stride == 0 || len < history + horizon {
        0
    } else {
        (len - history - horizon) / stride + 1
    }
}

/// Cut every window whose issue index `t` satisfies `t ≥ T_h`,
/// `t + T_f ≤ len`, stepping by `stride` from `T_h`.
pub fn build_windows(ds: &Dataset, history: usize, horizon: usize, stride: usize) -> Result<Windows> {
    if stride == 0 || history == 0 || horizon == 0 {
        return Err(Error::Config(format!("T_h ({history}), T_f ({horizon}) and stride ({stride}) must all be positive")));
    }
    let n = window_count(ds.len(), history, horizon, stride);
    if n == 0 {
        log::warn!("series of {} steps is shorter than one {}+{} window", ds.len(), history, horizon);
        return Ok(Windows { samples: Vec::new(), too_short: true });
    }
    let l_e = ds.energy.len();
    let l_w = ds.weather.len();
    let d_w = ds.variable_names.len();
    let samples = (0..n)
        .map(|i| {
            let t = history + i * stride;
            let energy = |lo: usize, hi: usize| {
                let mut data = Vec::with_capacity(l_e * (hi - lo));
                for e in &ds.energy {
                    data.extend_from_slice(&e.values[lo..hi]);
                }
                Tensor::new([l_e, hi - lo, 1], data)
            };
            let weather = |lo: usize, hi: usize| {
                let mut data = Vec::with_capacity(l_w * (hi - lo) * d_w);
                for w in &ds.weather {
                    data.extend_from_slice(&w.variables.data()[lo * d_w..hi * d_w]);
                }
                Tensor::new([l_w, hi - lo, d_w], data)
            };
            Ok(ForecastSample {
                energy_history: energy(t - history, t)?,
                weather_history: weather(t - history, t)?,
                weather_future: weather(t, t + horizon)?,
                target: Some(energy(t, t + horizon)?),
                issue_time: ds.timeline[t],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Windows { samples, too_short: false })
}

/// Assign samples to train/validation/test by their forecast window, then
/// drop samples of an earlier split whose window reaches into the history
/// of the next split, so no timestamp is shared across a boundary.
pub fn split_samples(samples: Vec<ForecastSample>, bounds: &SplitBoundaries) -> DatasetSplit {
    let mut split = DatasetSplit::default();
    for s in samples {
        let start = s.issue_time;
        let end = s.issue_time + Duration::hours(s.horizon() as i64);
        if end <= bounds.train_end {
            split.train.push(s);
        } else if start >= bounds.train_end && end <= bounds.validation_end {
            split.validation.push(s);
        } else if start >= bounds.validation_end && bounds.test_end.is_none_or(|t| end <= t) {
            split.test.push(s);
        }
    }
    purge_overlap(&mut split.train, &split.validation);
    purge_overlap(&mut split.validation, &split.test);
    if split.validation.is_empty() {
        purge_overlap(&mut split.train, &split.test);
    }
    split
}

fn purge_overlap(earlier: &mut Vec<ForecastSample>, later: &[ForecastSample]) {
    if let Some(first) = later.iter().map(ForecastSample::first_touched).min() {
        earlier.retain(|s| s.last_touched() < first);
    }
}

/// Append hour/month/season encodings to every weather location's variables.
pub fn append_time_features(samples: &mut [ForecastSample]) -> Result<()> {
    for s in samples {
        let hist_start = s.first_touched();
        s.weather_history = with_time_features(&s.weather_history, hist_start)?;
        s.weather_future = with_time_features(&s.weather_future, s.issue_time)?;
    }
    Ok(())
}

fn with_time_features(w: &Tensor, start: super::Instant) -> Result<Tensor> {
    let (l, t, d) = w.dims3()?;
    let feats: Vec<[f64; CYCLICAL_FEATURES]> = (0..t).map(|h| encode_cyclical(start + Duration::hours(h as i64))).collect();
    let d_out = d + CYCLICAL_FEATURES;
    let mut data = Vec::with_capacity(l * t * d_out);
    for li in 0..l {
        for (ti, f) in feats.iter().enumerate() {
            data.extend_from_slice(&w.data()[(li * t + ti) * d..(li * t + ti + 1) * d]);
            data.extend_from_slice(f);
        }
    }
    Tensor::new([l, t, d_out], data)
}
