//! Parsing of charging-session, weather, and POI files; aggregation onto the
//! 30-minute availability grid; window extraction and dataset splitting.

mod artifacts;
mod attributes;
mod sessions;
mod windows;

pub use artifacts::{
    read_connector_counts_csv, read_distance_matrix_csv, read_poi_csv, read_processed_dir,
    write_availability_csv, write_dynamic_attributes_csv, write_matrix_csv,
    write_static_attributes_csv, write_stations_csv, ProcessedData, StationRecord,
    AVAILABILITY_FILE, DYNAMIC_ATTRIBUTES_FILE, STATIC_ATTRIBUTES_FILE, STATIONS_FILE,
};
pub use attributes::{encode_poi, encode_weather, parse_weather, WeatherReport, POI_CATEGORIES};
pub use sessions::{aggregate_availability, parse_sessions, SessionReport, SkippedRow};
pub use windows::{
    make_windows, split_dataset, split_indices, split_indices_chronological, SplitIndices,
    WindowSample, WindowSet, SPLIT_RATIOS,
};

use crate::nncore::Tensor;
use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STEP_MINUTES: i64 = 30;
/// 30-minute steps per day, the time-of-day slot count.
pub const STEPS_PER_DAY: usize = 48;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("unknown station id `{0}` (not present in connector counts)")]
    UnknownStation(String),
    #[error("connector count for station `{station}` must be >= 1, got {count}")]
    BadConnectorCount { station: String, count: u32 },
    #[error("unknown POI category `{got}`; valid categories: {valid}")]
    UnknownPoiCategory { got: String, valid: String },
    #[error("no POI category for station `{0}`")]
    MissingPoi(String),
    #[error("uncovered grid start: first weather record at {first_record} is after grid origin {origin}")]
    UncoveredGridStart { first_record: String, origin: String },
    #[error("weather row {row}: unknown description `{text}` with no earlier known label")]
    UnknownLeadingWeather { row: usize, text: String },
    #[error("series too short: T = {t}, need at least L + 1 + M = {required}")]
    SeriesTooShort { t: usize, required: usize },
    #[error("split ratios {0:?} do not sum to 1")]
    BadRatios([f64; 3]),
    #[error("need at least 3 samples to split, got {0}")]
    TooFewSamples(usize),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("station mismatch: {0}")]
    StationMismatch(String),
    #[error("time grid invalid: {0}")]
    InvalidGrid(String),
    #[error("malformed file {path} line {line}: {detail}")]
    Malformed { path: String, line: usize, detail: String },
}

/// Charger hardware class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChargerType {
    Slow,
    Fast,
    Rapid,
}

impl ChargerType {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "slow" => Some(Self::Slow),
            "fast" => Some(Self::Fast),
            "rapid" => Some(Self::Rapid),
            _ => None,
        }
    }
}

/// One raw charge event.
#[derive(Debug, Clone, PartialEq)]
pub struct ChargingSession {
    pub station_id: String,
    pub connector_id: String,
    /// UTC minutes since the Unix epoch.
    pub start: i64,
    /// UTC minutes since the Unix epoch; `end >= start`.
    pub end: i64,
    pub energy_kwh: f64,
    pub lat: f64,
    pub lon: f64,
    pub charger_type: ChargerType,
}

impl ChargingSession {
    pub fn duration_minutes(&self) -> i64 {
        self.end - self.start
    }
}

/// Fixed 30-minute time grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeGrid {
    origin_min: i64,
    count: usize,
}

impl TimeGrid {
    pub fn new(origin_min: i64, count: usize) -> Result<Self, IngestError> {
        if count == 0 {
            return Err(IngestError::InvalidGrid("count must be >= 1".into()));
        }
        Ok(Self { origin_min, count })
    }

    /// Grid covering `[min_start, max_end]` rounded outward to step bounds.
    pub fn covering(min_start: i64, max_end: i64) -> Result<Self, IngestError> {
        if max_end < min_start {
            return Err(IngestError::InvalidGrid(format!(
                "span end {max_end} before start {min_start}"
            )));
        }
        let origin = min_start.div_euclid(STEP_MINUTES) * STEP_MINUTES;
        let end = max_end.div_euclid(STEP_MINUTES) * STEP_MINUTES
            + if max_end % STEP_MINUTES == 0 && max_end > origin { 0 } else { STEP_MINUTES };
        let count = ((end - origin) / STEP_MINUTES).max(1) as usize;
        Self::new(origin, count)
    }

    pub fn origin_min(&self) -> i64 {
        self.origin_min
    }

    pub fn step_minutes(&self) -> i64 {
        STEP_MINUTES
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Start of step `k` in UTC minutes.
    pub fn step_start(&self, k: usize) -> i64 {
        self.origin_min + (k as i64) * STEP_MINUTES
    }

    pub fn end_min(&self) -> i64 {
        self.step_start(self.count)
    }

    /// Time-of-day slot (0..48) of step `k`.
    pub fn time_of_day_slot(&self, k: usize) -> usize {
        (self.step_start(k).rem_euclid(24 * 60) / STEP_MINUTES) as usize
    }
}

/// N stations x T steps of availability in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct AvailabilitySeries {
    pub grid: TimeGrid,
    pub station_ids: Vec<String>,
    pub connector_counts: Vec<u32>,
    /// [N, T]
    pub values: Tensor<f64>,
}

impl AvailabilitySeries {
    pub fn n_stations(&self) -> usize {
        self.station_ids.len()
    }

    pub fn value(&self, station: usize, step: usize) -> f64 {
        self.values.at2(station, step)
    }
}

/// Per-station one-hot POI category matrix (N x 8).
#[derive(Debug, Clone, PartialEq)]
pub struct StaticAttributes {
    pub station_ids: Vec<String>,
    /// [N, 8]
    pub alpha: Tensor<f64>,
}

impl StaticAttributes {
    pub fn n_categories(&self) -> usize {
        self.alpha.shape()[1]
    }
}

/// Time-varying per-station attributes in [0,1] on the availability grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicAttributes {
    pub grid: TimeGrid,
    pub station_ids: Vec<String>,
    /// [N, w, T]
    pub beta: Tensor<f64>,
    pub w: usize,
}

/// Parse `YYYY-MM-DD HH:MM` into UTC minutes.
pub fn parse_timestamp_minutes(s: &str) -> Option<i64> {
    NaiveDateTime::parse_from_str(s.trim(), "%Y-%m-%d %H:%M")
        .ok()
        .map(|dt| dt.and_utc().timestamp() / 60)
}

/// Format UTC minutes as `YYYY-MM-DD HH:MM`.
pub fn format_timestamp_minutes(min: i64) -> String {
    chrono::DateTime::from_timestamp(min * 60, 0)
        .map(|dt| dt.naive_utc().format("%Y-%m-%d %H:%M").to_string())
        .unwrap_or_else(|| format!("minute {min}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestamp_round_trip() {
        let m = parse_timestamp_minutes("2018-03-05 08:00").unwrap();
        assert_eq!(format_timestamp_minutes(m), "2018-03-05 08:00");
        assert_eq!(parse_timestamp_minutes("2018-03-05 08:45").unwrap() - m, 45);
    }

    #[test]
    fn bad_timestamp_rejected() {
        assert!(parse_timestamp_minutes("05/03/2018 08:00").is_none());
        assert!(parse_timestamp_minutes("2018-03-05").is_none());
    }

    #[test]
    fn covering_grid_rounds_outward() {
        let start = parse_timestamp_minutes("2018-03-05 08:10").unwrap();
        let end = parse_timestamp_minutes("2018-03-05 09:05").unwrap();
        let grid = TimeGrid::covering(start, end).unwrap();
        assert_eq!(format_timestamp_minutes(grid.origin_min()), "2018-03-05 08:00");
        assert_eq!(grid.count(), 3); // 08:00-08:30, 08:30-09:00, 09:00-09:30
    }

    #[test]
    fn time_of_day_slot_wraps_daily() {
        let origin = parse_timestamp_minutes("2018-03-05 23:30").unwrap();
        let grid = TimeGrid::new(origin, 4).unwrap();
        assert_eq!(grid.time_of_day_slot(0), 47);
        assert_eq!(grid.time_of_day_slot(1), 0);
        assert_eq!(grid.time_of_day_slot(2), 1);
    }

    #[test]
    fn charger_type_parse_is_exactly_three_values() {
        assert_eq!(ChargerType::parse("Rapid"), Some(ChargerType::Rapid));
        assert_eq!(ChargerType::parse(" slow "), Some(ChargerType::Slow));
        assert_eq!(ChargerType::parse("fast"), Some(ChargerType::Fast));
        assert_eq!(ChargerType::parse("turbo"), None);
    }
}
