//! Energy/weather time series: ingestion, windowing, splitting and scaling.

mod calendar;
mod config;
mod ingest;
mod normalize;
mod pipeline;
mod window;

pub use calendar::{encode_cyclical, season_of, CYCLICAL_FEATURES};
pub use config::{DatasetConfig, EnergyType, SplitBoundaries, DATASET_FORMAT};
pub use ingest::{ingest, parse_timestamp, IngestOptions, IngestReport, RejectedRow};
pub use normalize::{normalize, NormalizationStats};
pub use pipeline::{prepare, prepare_dataset, write_dataset_csv, Prepared};
pub use window::{append_time_features, build_windows, split_samples, window_count, Windows};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Instant = DateTime<Utc>;

#[derive(Clone, Debug, PartialEq)]
pub struct EnergySeries {
    pub site_id: String,
    pub timestamps: Vec<Instant>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeatherSeries {
    pub location_id: String,
    pub timestamps: Vec<Instant>,
    /// `[time × D_W]`
    pub variables: Tensor,
}

impl WeatherSeries {
    pub fn num_variables(&self) -> usize {
        self.variables.shape()[1]
    }
}

/// Energy and weather series that share one gap-free hourly timeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub timeline: Vec<Instant>,
    pub energy: Vec<EnergySeries>,
    pub weather: Vec<WeatherSeries>,
    pub variable_names: Vec<String>,
}

impl Dataset {
    /// Assemble a dataset, checking that every series sits on the same hourly
    /// timeline.
    pub fn new(energy: Vec<EnergySeries>, weather: Vec<WeatherSeries>, variable_names: Vec<String>) -> Result<Self> {
        let first = energy.first().ok_or_else(|| Error::Empty("no energy series".into()))?;
        if weather.is_empty() {
            return Err(Error::Empty("no weather series".into()));
        }
        let timeline = first.timestamps.clone();
        if timeline.is_empty() {
            return Err(Error::Empty(format!("energy series `{}` has no rows", first.site_id)));
        }
        for w in timeline.windows(2) {
            if w[1] - w[0] != Duration::hours(1) {
                return Err(Error::Misaligned(format!("non-hourly step {} -> {}", w[0], w[1])));
            }
        }
        let check = |id: &str, ts: &[Instant]| -> Result<()> {
            if ts.first() != timeline.first() {
                let offset = match (ts.first(), timeline.first()) {
                    (Some(a), Some(b)) => format!("{} hour(s)", (*a - *b).num_hours()),
                    _ => "empty series".into(),
                };
                return Err(Error::Misaligned(format!(
                    "series `{id}` starts at {:?}, reference `{}` starts at {} (offset {offset})",
                    ts.first(),
                    first.site_id,
                    timeline[0]
                )));
            }
            if ts != timeline {
                return Err(Error::Misaligned(format!(
                    "series `{id}` has {} steps ending {:?}, reference has {} ending {}",
                    ts.len(),
                    ts.last(),
                    timeline.len(),
                    timeline[timeline.len() - 1]
                )));
            }
            Ok(())
        };
        for e in &energy {
            check(&e.site_id, &e.timestamps)?;
            if e.values.len() != timeline.len() || e.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Ingest {
                    path: Default::default(),
                    reason: format!("energy series `{}` has missing or non-finite values", e.site_id),
                });
            }
        }
        let d_w = variable_names.len();
        for w in &weather {
            check(&w.location_id, &w.timestamps)?;
            if w.variables.shape() != [timeline.len(), d_w] || !w.variables.is_finite() {
                return Err(Error::Ingest {
                    path: Default::default(),
                    reason: format!("weather series `{}` must be a finite [{} × {d_w}] matrix", w.location_id, timeline.len()),
                });
            }
        }
        Ok(Self { timeline, energy, weather, variable_names })
    }

    pub fn len(&self) -> usize {
        self.timeline.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timeline.is_empty()
    }

    pub fn site_ids(&self) -> Vec<String> {
        self.energy.iter().map(|e| e.site_id.clone()).collect()
    }

    pub fn location_ids(&self) -> Vec<String> {
        self.weather.iter().map(|w| w.location_id.clone()).collect()
    }
}

/// One forecasting instance issued at `issue_time`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastSample {
    /// `[L_E × T_h × 1]` energy over `[t−T_h, t)`.
    pub energy_history: Tensor,
    /// `[L_W × T_h × D_W]`
    pub weather_history: Tensor,
    /// `[L_W × T_f × D_W]` weather over `[t, t+T_f)`.
    pub weather_future: Tensor,
    /// `[L_E × T_f × 1]`; absent for pure prediction requests.
    pub target: Option<Tensor>,
    pub issue_time: Instant,
}

impl ForecastSample {
    pub fn history_len(&self) -> usize {
        self.energy_history.shape()[1]
    }

    pub fn horizon(&self) -> usize {
        self.weather_future.shape()[1]
    }

    /// Hourly timestamps covered by the forecast window.
    pub fn forecast_times(&self) -> Vec<Instant> {
        (0..self.horizon()).map(|h| self.issue_time + Duration::hours(h as i64)).collect()
    }

    pub fn first_touched(&self) -> Instant {
        self.issue_time - Duration::hours(self.history_len() as i64)
    }

    pub fn last_touched(&self) -> Instant {
        self.issue_time + Duration::hours(self.horizon() as i64 - 1)
    }
}

/// Chronologically disjoint train/validation/test samples.
#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<ForecastSample>,
    pub validation: Vec<ForecastSample>,
    pub test: Vec<ForecastSample>,
    pub stats: Option<NormalizationStats>,
}

/// Shape summary derived from a dataset, used to size the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemDims {
    pub energy_sites: usize,
    pub weather_sites: usize,
    pub history: usize,
    pub horizon: usize,
    pub weather_vars: usize,
}

impl ProblemDims {
    pub fn check_sample(&self, s: &ForecastSample) -> Result<()> {
        let want = [
            ("energy_history", s.energy_history.shape(), vec![self.energy_sites, self.history, 1]),
            ("weather_history", s.weather_history.shape(), vec![self.weather_sites, self.history, self.weather_vars]),
            ("weather_future", s.weather_future.shape(), vec![self.weather_sites, self.horizon, self.weather_vars]),
        ];
        for (name, got, expected) in want {
            if got != expected.as_slice() {
                return Err(Error::shape("sample", format!("{name} is {got:?}, model expects {expected:?}")));
            }
        }
        if let Some(t) = &s.target {
            if t.shape() != [self.energy_sites, self.horizon, 1] {
                return Err(Error::shape("sample", format!("target is {:?}", t.shape())));
            }
        }
        Ok(())
    }
}
