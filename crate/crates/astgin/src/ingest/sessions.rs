//! Session-file parsing and aggregation into the availability series.

use super::{
    AvailabilitySeries, ChargerType, ChargingSession, IngestError, TimeGrid,
    parse_timestamp_minutes, STEP_MINUTES,
};
use crate::nncore::Tensor;
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Read;

/// One rejected input row and why it was rejected.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SkippedRow {
    /// 1-based data-row index (header excluded).
    pub row: usize,
    pub reason: String,
}

/// Outcome of [`parse_sessions`]: per-type counts and the skip list.
#[derive(Debug, Clone, Default, Serialize)]
pub struct SessionReport {
    pub parsed: usize,
    pub skipped: Vec<SkippedRow>,
    pub slow: usize,
    pub fast: usize,
    pub rapid: usize,
}

const SESSION_COLUMNS: [&str; 8] = [
    "station_id",
    "connector_id",
    "start",
    "end",
    "energy_kwh",
    "lat",
    "lon",
    "charger_type",
];

/// Parse the comma-delimited session file. Unparseable rows are skipped and
/// reported, never silently dropped; a missing column is a hard error.
pub fn parse_sessions(
    input: impl Read,
) -> Result<(Vec<ChargingSession>, SessionReport), IngestError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let headers = reader.headers()?.clone();
    let mut col = BTreeMap::new();
    for name in SESSION_COLUMNS {
        let idx = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))?;
        col.insert(name, idx);
    }

    let mut sessions = Vec::new();
    let mut report = SessionReport::default();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let skip = |reason: String, report: &mut SessionReport| {
            report.skipped.push(SkippedRow { row, reason });
        };
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                skip(format!("unreadable row: {e}"), &mut report);
                continue;
            }
        };
        let field = |name: &str| record.get(col[name]).map(str::trim);
        if SESSION_COLUMNS.iter().any(|name| field(name).is_none()) {
            skip("too few fields".into(), &mut report);
            continue;
        }
        let station_id = field("station_id").unwrap();
        let Some(start) = parse_timestamp_minutes(field("start").unwrap()) else {
            skip(format!("unparseable start `{}`", field("start").unwrap()), &mut report);
            continue;
        };
        let Some(end) = parse_timestamp_minutes(field("end").unwrap()) else {
            skip(format!("unparseable end `{}`", field("end").unwrap()), &mut report);
            continue;
        };
        if end < start {
            skip("negative duration".into(), &mut report);
            continue;
        }
        let Ok(energy_kwh) = field("energy_kwh").unwrap().parse::<f64>() else {
            skip(format!("unparseable energy `{}`", field("energy_kwh").unwrap()), &mut report);
            continue;
        };
        if !(energy_kwh >= 0.0) {
            skip("negative energy".into(), &mut report);
            continue;
        }
        let (Ok(lat), Ok(lon)) =
            (field("lat").unwrap().parse::<f64>(), field("lon").unwrap().parse::<f64>())
        else {
            skip("unparseable coordinates".into(), &mut report);
            continue;
        };
        let Some(charger_type) = ChargerType::parse(field("charger_type").unwrap()) else {
            skip(format!("unknown charger type `{}`", field("charger_type").unwrap()), &mut report);
            continue;
        };
        match charger_type {
            ChargerType::Slow => report.slow += 1,
            ChargerType::Fast => report.fast += 1,
            ChargerType::Rapid => report.rapid += 1,
        }
        sessions.push(ChargingSession {
            station_id: station_id.to_string(),
            connector_id: field("connector_id").unwrap().to_string(),
            start,
            end,
            energy_kwh,
            lat,
            lon,
            charger_type,
        });
    }
    report.parsed = sessions.len();
    Ok((sessions, report))
}

/// Aggregate sessions into per-window availability
/// `x = 1 - occupied_minutes / (30 * connectors)`, sessions clipped to window
/// boundaries. Returns the series and the number of windows clamped up to 0.
///
/// Station order is the sorted key order of `connector_counts`; an empty
/// session list yields an all-ones (fully available) series.
pub fn aggregate_availability(
    sessions: &[ChargingSession],
    grid: TimeGrid,
    connector_counts: &BTreeMap<String, u32>,
) -> Result<(AvailabilitySeries, u64), IngestError> {
    let station_ids: Vec<String> = connector_counts.keys().cloned().collect();
    let counts: Vec<u32> = connector_counts.values().copied().collect();
    for (id, &c) in station_ids.iter().zip(&counts) {
        if c < 1 {
            return Err(IngestError::BadConnectorCount { station: id.clone(), count: c });
        }
    }
    let index: BTreeMap<&str, usize> =
        station_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

    let n = station_ids.len();
    let t = grid.count();
    let mut occupied = vec![0.0f64; n * t];
    for s in sessions {
        let &si = index
            .get(s.station_id.as_str())
            .ok_or_else(|| IngestError::UnknownStation(s.station_id.clone()))?;
        if s.end <= grid.origin_min() || s.start >= grid.end_min() || s.end == s.start {
            continue;
        }
        let first = ((s.start - grid.origin_min()).div_euclid(STEP_MINUTES)).max(0) as usize;
        let last = (((s.end - 1 - grid.origin_min()).div_euclid(STEP_MINUTES)) as usize)
            .min(t.saturating_sub(1));
        for k in first..=last {
            let w_start = grid.step_start(k);
            let w_end = w_start + STEP_MINUTES;
            let overlap = (s.end.min(w_end) - s.start.max(w_start)).max(0);
            occupied[si * t + k] += overlap as f64;
        }
    }

    let mut values = Tensor::zeros([n, t]);
    let mut clamped = 0u64;
    for si in 0..n {
        let cap = STEP_MINUTES as f64 * counts[si] as f64;
        for k in 0..t {
            let mut x = 1.0 - occupied[si * t + k] / cap;
            if x < 0.0 {
                x = 0.0;
                clamped += 1;
            }
            values.set2(si, k, x.min(1.0));
        }
    }
    Ok((
        AvailabilitySeries { grid, station_ids, connector_counts: counts, values },
        clamped,
    ))
}
