use std::f64::consts::PI;

use chrono::{Datelike, Timelike};

use super::Instant;

/// Number of values emitted by [`encode_cyclical`]: (cos, sin) for hour, month
/// and season.
pub const CYCLICAL_FEATURES: usize = 6;

/// Meteorological season index: DJF → 0, MAM → 1, JJA → 2, SON → 3.
pub fn season_of(month: u32) -> u32 {
    (month % 12) / 3
}

fn polar(phase: f64, period: f64) -> [f64; 2] {
    let angle = 2.0 * PI * phase / period;
    [angle.cos(), angle.sin()]
}

/// Hour of day (period 24), month of year (1-based, period 12) and season
/// (period 4) as points on the unit circle, in that order.
pub fn encode_cyclical(t: Instant) -> [f64; CYCLICAL_FEATURES] {
    let [hc, hs] = polar(t.hour() as f64, 24.0);
    let [mc, ms] = polar(t.month() as f64, 12.0);
    let [sc, ss] = polar(season_of(t.month()) as f64, 4.0);
    [hc, hs, mc, ms, sc, ss]
}
