//! Synthetic datasets with a known spatial structure: every energy site is a
//! lagged, smooth function of exactly one weather location.

use chrono::{Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EnergySeries, Instant, WeatherSeries};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub weather_sites: usize,
    pub energy_sites: usize,
    pub variables: usize,
    pub hours: usize,
    /// Hours by which energy trails its driving weather.
    pub lag: usize,
    /// Standard deviation of additive noise on the energy series.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { weather_sites: 4, energy_sites: 2, variables: 2, hours: 24 * 60, lag: 2, noise: 0.0, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct Synthetic {
    pub dataset: Dataset,
    /// `driver[e]` is the weather location that generates energy site `e`.
    pub driver: Vec<usize>,
}

pub fn start_time() -> Instant {
    Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap()
}

/// Smooth random signal: a sum of sinusoids with random periods
/// between 5 and 60 hours.
fn smooth_signal(rng: &mut ChaCha8Rng, hours: usize) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> =
        (0..4).map(|_| (rng.gen_range(5.0..60.0), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.4..1.0))).collect();
    let norm = waves.iter().map(|w| w.2 * w.2).sum::<f64>().sqrt();
    (0..hours)
        .map(|t| waves.iter().map(|&(p, ph, a)| a * (std::f64::consts::TAU * t as f64 / p + ph).sin()).sum::<f64>() / norm)
        .collect()
}

/// Energy in `[0, 1]` from the driving location's first two variables.
pub fn response(w0: f64, w1: f64) -> f64 {
    0.5 + 0.45 * (1.2 * w0 + 0.4 * w1).tanh()
}

pub fn generate(spec: &SyntheticSpec) -> Result<Synthetic> {
    if spec.energy_sites == 0 || spec.weather_sites < spec.energy_sites || spec.variables == 0 {
        return Err(Error::Config(format!("need 1 ≤ energy sites ≤ weather sites and at least one variable, got {spec:?}")));
    }
    if spec.hours <= spec.lag {
        return Err(Error::Config("series must be longer than the lag".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let timeline: Vec<Instant> = (0..spec.hours).map(|h| start_time() + Duration::hours(h as i64)).collect();
    let d = spec.variables;
    let signals: Vec<Vec<Vec<f64>>> =
        (0..spec.weather_sites).map(|_| (0..d).map(|_| smooth_signal(&mut rng, spec.hours)).collect()).collect();

    let mut sites: Vec<usize> = (0..spec.weather_sites).collect();
    sites.shuffle(&mut rng);
    let driver = sites[..spec.energy_sites].to_vec();

    let weather = signals
        .iter()
        .enumerate()
        .map(|(l, vars)| WeatherSeries {
            location_id: format!("w{l}"),
            timestamps: timeline.clone(),
            variables: Tensor::from_fn([spec.hours, d], |i| vars[i % d][i / d]),
        })
        .collect();
    let energy = driver
        .iter()
        .enumerate()
        .map(|(e, &l)| {
            let v = &signals[l];
            let values = (0..spec.hours)
                .map(|t| {
                    let s = t.saturating_sub(spec.lag);
                    let w1 = if d > 1 { v[1][s] } else { 0.0 };
                    let noise = if spec.noise > 0.0 { spec.noise * rng.gen_range(-1.0..1.0) } else { 0.0 };
                    (response(v[0][s], w1) + noise).clamp(0.0, 1.0)
                })
                .collect();
            EnergySeries { site_id: format!("e{e}"), timestamps: timeline.clone(), values }
        })
        .collect();
    let names = (0..d).map(|i| format!("x{i}")).collect();
    Ok(Synthetic { dataset: Dataset::new(energy, weather, names)?, driver })
}
