//! Discrete time features: log-scale interval buckets and UTC calendar fields.

use chrono::{DateTime, Datelike};

use crate::error::{Error, Result};

pub const NUM_BUCKETS: usize = 64;
pub const YEAR_SLOTS: usize = 128;
pub const MONTH_SLOTS: usize = 12;
pub const DAY_SLOTS: usize = 31;
pub const WEEKDAY_SLOTS: usize = 7;

/// `min(B−1, ⌊log2(1 + τ/60)⌋)` for a gap of `tau` seconds.
pub fn interval_bucket(tau: i64) -> usize {
    bucket_with_limit(tau, NUM_BUCKETS)
}

pub fn bucket_with_limit(tau: i64, buckets: usize) -> usize {
    let minutes = tau.max(0) as f64 / 60.0;
    let b = (1.0 + minutes).log2().floor();
    (b as usize).min(buckets - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Calendar {
    pub year: i32,
    /// 1–12.
    pub month: u32,
    /// 1–31.
    pub day: u32,
    /// Monday = 0.
    pub weekday: u32,
}

impl Calendar {
    pub fn from_timestamp(ts: i64) -> Self {
        let dt = DateTime::from_timestamp(ts, 0).unwrap_or_default();
        Self {
            year: dt.year(),
            month: dt.month(),
            day: dt.day(),
            weekday: dt.weekday().num_days_from_monday(),
        }
    }

    /// Row indices into the year, month, day and weekday tables.
    pub fn slots(&self) -> [usize; 4] {
        [
            (self.year - 1970).clamp(0, YEAR_SLOTS as i32 - 1) as usize,
            self.month as usize - 1,
            self.day as usize - 1,
            self.weekday as usize,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeFeatures {
    /// `intervals[k] = t[k+1] − t[k]`.
    pub intervals: Vec<i64>,
    pub buckets: Vec<usize>,
    pub calendar: Vec<Calendar>,
}

pub fn compute_time_features(timestamps: &[i64]) -> Result<TimeFeatures> {
    if let Some(w) = timestamps.windows(2).find(|w| w[1] < w[0]) {
        return Err(Error::InvalidInput(format!("timestamps decrease: {} then {}", w[0], w[1])));
    }
    let intervals: Vec<i64> = timestamps.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(TimeFeatures {
        buckets: intervals.iter().map(|&t| interval_bucket(t)).collect(),
        calendar: timestamps.iter().map(|&t| Calendar::from_timestamp(t)).collect(),
        intervals,
    })
}
