use std::collections::HashSet;

use chrono::Duration;
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, ForecastSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Training-split statistics used to scale every split, kept for inversion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub weather_sites: usize,
    pub weather_vars: usize,
    /// `[L_W × D_W]`, row-major.
    pub weather_mean: Vec<f64>,
    pub weather_std: Vec<f64>,
    /// Divisor per energy site; 1.0 when the series is already in `[0, 1]`.
    pub capacities: Vec<f64>,
    pub warnings: Vec<String>,
}

impl NormalizationStats {
    fn check(&self, s: &ForecastSample) -> Result<()> {
        let (l, _, d) = s.weather_history.dims3()?;
        if l != self.weather_sites || d != self.weather_vars || s.energy_history.shape()[0] != self.capacities.len() {
            return Err(Error::shape(
                "normalize",
                format!(
                    "sample weather {:?} / energy {:?} vs stats for {} locations × {} vars, {} sites",
                    s.weather_history.shape(),
                    s.energy_history.shape(),
                    self.weather_sites,
                    self.weather_vars,
                    self.capacities.len()
                ),
            ));
        }
        Ok(())
    }

    fn map_weather(&self, w: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let (d, t) = (self.weather_vars, w.shape()[1]);
        let mut out = w.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let l = i / (t * d);
            let k = l * d + i % d;
            *v = f(*v, self.weather_mean[k], self.weather_std[k]);
        }
        out
    }

    fn map_energy(&self, e: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let per_site = e.len() / self.capacities.len();
        let mut out = e.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = f(*v, self.capacities[i / per_site]);
        }
        out
    }

    pub fn apply(&self, s: &ForecastSample) -> Result<ForecastSample> {
        self.check(s)?;
        let z = |x: f64, m: f64, sd: f64| (x - m) / sd;
        Ok(ForecastSample {
            energy_history: self.map_energy(&s.energy_history, |x, c| x / c),
            weather_history: self.map_weather(&s.weather_history, z),
            weather_future: self.map_weather(&s.weather_future, z),
            target: s.target.as_ref().map(|t| self.map_energy(t, |x, c| x / c)),
            issue_time: s.issue_time,
        })
    }

    pub fn invert(&self, s: &ForecastSample) -> Result<ForecastSample> {
        self.check(s)?;
        let un = |x: f64, m: f64, sd: f64| x * sd + m;
        Ok(ForecastSample {
            energy_history: self.map_energy(&s.energy_history, |x, c| x * c),
            weather_history: self.map_weather(&s.weather_history, un),
            weather_future: self.map_weather(&s.weather_future, un),
            target: s.target.as_ref().map(|t| self.map_energy(t, |x, c| x * c)),
            issue_time: s.issue_time,
        })
    }

    /// Energy tensor `[L_E × ..]` back in physical units.
    pub fn energy_to_physical(&self, e: &Tensor) -> Tensor {
        self.map_energy(e, |x, c| x * c)
    }
}

/// Z-score weather per location and variable with statistics from the
/// training split only (each hour counted once), and divide energy by
/// capacity where one is declared.
///
/// `capacities` holds one entry per energy site. Must run before calendar
/// features are appended.
pub fn normalize(split: DatasetSplit, capacities: &[Option<f64>]) -> Result<DatasetSplit> {
    if split.stats.is_some() {
        return Err(Error::Config("split is already normalized".into()));
    }
    let first = split.train.first().ok_or_else(|| Error::Empty("training split has no samples".into()))?;
    let (l_w, _, d_w) = first.weather_history.dims3()?;
    let l_e = first.energy_history.shape()[0];
    if capacities.len() != l_e {
        return Err(Error::Config(format!("{} capacities for {l_e} energy sites", capacities.len())));
    }

    // each distinct training hour contributes once, whichever window holds it
    let visit = |f: &mut dyn FnMut(&[f64], usize)| {
        let mut seen = HashSet::new();
        for s in &split.train {
            for (tensor, start) in [(&s.weather_history, s.first_touched()), (&s.weather_future, s.issue_time)] {
                let t = tensor.shape()[1];
                for h in 0..t {
                    let stamp = (start + Duration::hours(h as i64)).timestamp();
                    if !seen.insert(stamp) {
                        continue;
                    }
                    for l in 0..l_w {
                        let base = (l * t + h) * d_w;
                        f(&tensor.data()[base..base + d_w], l);
                    }
                }
            }
        }
    };
    let mut sum = vec![0.0; l_w * d_w];
    let mut count = 0usize;
    visit(&mut |row, l| {
        if l == 0 {
            count += 1;
        }
        for (k, v) in row.iter().enumerate() {
            sum[l * d_w + k] += v;
        }
    });
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0; l_w * d_w];
    visit(&mut |row, l| {
        for (k, v) in row.iter().enumerate() {
            let dlt = v - mean[l * d_w + k];
            sq[l * d_w + k] += dlt * dlt;
        }
    });
    let mut warnings = Vec::new();
    let std: Vec<f64> = sq
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let sd = (s / count as f64).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                let msg = format!("weather location {} variable {} has zero variance; stddev set to 1", k / d_w, k % d_w);
                log::warn!("{msg}");
                warnings.push(msg);
                1.0
            }
        })
        .collect();
    let stats = NormalizationStats {
        weather_sites: l_w,
        weather_vars: d_w,
        weather_mean: mean,
        weather_std: std,
        capacities: capacities.iter().map(|c| c.unwrap_or(1.0)).collect(),
        warnings,
    };
    let norm = |v: Vec<ForecastSample>| v.iter().map(|s| stats.apply(s)).collect::<Result<Vec<_>>>();
    Ok(DatasetSplit {
        train: norm(split.train)?,
        validation: norm(split.validation)?,
        test: norm(split.test)?,
        stats: Some(stats),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Instant;
    use chrono::{TimeZone, Utc};

    fn sample(issue_h: i64, weather: impl Fn(i64) -> f64) -> ForecastSample {
        let t0: Instant = Utc.with_ymd_and_hms(2012, 1, 1, 0, 0, 0).unwrap();
        let issue = t0 + Duration::hours(issue_h);
        let hist: Vec<f64> = (issue_h - 2..issue_h).map(&weather).collect();
        let fut: Vec<f64> = (issue_h..issue_h + 2).map(&weather).collect();
        ForecastSample {
            energy_history: Tensor::new([1, 2, 1], vec![10.0, 20.0]).unwrap(),
            weather_history: Tensor::new([1, 2, 1], hist).unwrap(),
            weather_future: Tensor::new([1, 2, 1], fut).unwrap(),
            target: Some(Tensor::new([1, 2, 1], vec![30.0, 40.0]).unwrap()),
            issue_time: issue,
        }
    }

    #[test]
    fn constant_column_becomes_zeros() {
        let split = DatasetSplit { train: vec![sample(2, |_| 7.0)], ..Default::default() };
        let out = normalize(split, &[None]).unwrap();
        assert!(out.train[0].weather_history.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.stats.as_ref().unwrap().warnings.len(), 1);
    }

    #[test]
    fn definition_value() {
        let stats = NormalizationStats {
            weather_sites: 1,
            weather_vars: 1,
            weather_mean: vec![5.0],
            weather_std: vec![2.0],
            capacities: vec![1.0],
            warnings: vec![],
        };
        let mut s = sample(2, |_| 9.0);
        s.target = None;
        assert_eq!(stats.apply(&s).unwrap().weather_future.data(), &[2.0, 2.0]);
    }

    #[test]
    fn overlapping_windows_count_each_hour_once() {
        // hours 0..6 carry value h; windows overlap on hours 2..4
        let split = DatasetSplit { train: vec![sample(2, |h| h as f64), sample(4, |h| h as f64)], ..Default::default() };
        let stats = normalize(split, &[None]).unwrap().stats.unwrap();
        assert!((stats.weather_mean[0] - 2.5).abs() < 1e-12);
        let var: f64 = (0..6).map(|h| (h as f64 - 2.5).powi(2)).sum::<f64>() / 6.0;
        assert!((stats.weather_std[0] - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn capacity_scales_energy_and_round_trips() {
        let split = DatasetSplit {
            train: vec![sample(2, |h| h as f64 * 1.7 + 3.0)],
            test: vec![sample(9, |h| (h as f64).sin() * 40.0)],
            ..Default::default()
        };
        let raw_test = split.test[0].clone();
        let out = normalize(split, &[Some(50.0)]).unwrap();
        assert_eq!(out.train[0].energy_history.data(), &[0.2, 0.4]);
        let back = out.stats.as_ref().unwrap().invert(&out.test[0]).unwrap();
        for (a, b) in [
            (&back.weather_history, &raw_test.weather_history),
            (&back.weather_future, &raw_test.weather_future),
            (&back.energy_history, &raw_test.energy_history),
        ] {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn refuses_double_normalization_and_empty_train() {
        assert!(normalize(DatasetSplit::default(), &[]).is_err());
        let split = DatasetSplit { train: vec![sample(2, |h| h as f64)], ..Default::default() };
        let once = normalize(split, &[None]).unwrap();
        assert!(normalize(once, &[None]).is_err());
    }
}
