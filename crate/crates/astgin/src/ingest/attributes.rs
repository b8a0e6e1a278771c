//! Weather-label parsing/encoding and POI one-hot encoding.

use super::{
    format_timestamp_minutes, parse_timestamp_minutes, DynamicAttributes, IngestError,
    StaticAttributes, TimeGrid,
};
use crate::nncore::Tensor;
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Read;

/// Fixed POI category order; one-hot columns follow this order.
pub const POI_CATEGORIES: [&str; 8] = [
    "transportation",
    "catering",
    "shopping",
    "education",
    "accommodation",
    "medical",
    "living",
    "other",
];

/// Keyword table mapping weather descriptions to severity labels 1-5.
/// More specific phrases are matched first.
const WEATHER_KEYWORDS: [(&str, u8); 5] = [
    ("heavy rain", 5),
    ("light rain", 4),
    ("foggy", 3),
    ("cloudy", 2),
    ("sunny", 1),
];

#[derive(Debug, Clone, Default, Serialize)]
pub struct WeatherReport {
    pub records: usize,
    pub warnings: Vec<String>,
}

fn label_for(description: &str) -> Option<u8> {
    let lower = description.to_ascii_lowercase();
    WEATHER_KEYWORDS.iter().find(|(kw, _)| lower.contains(kw)).map(|&(_, l)| l)
}

/// Parse hourly weather records into `(timestamp_minutes, label 1-5)` pairs.
/// Unknown descriptions carry the most recent known label forward with a
/// warning; out-of-order timestamps are sorted with a warning.
pub fn parse_weather(
    input: impl Read,
) -> Result<(Vec<(i64, u8)>, WeatherReport), IngestError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let headers = reader.headers()?.clone();
    let ts_col = headers
        .iter()
        .position(|h| h.trim() == "timestamp")
        .ok_or_else(|| IngestError::MissingColumn("timestamp".to_string()))?;
    let desc_col = headers
        .iter()
        .position(|h| h.trim() == "description")
        .ok_or_else(|| IngestError::MissingColumn("description".to_string()))?;

    let mut report = WeatherReport::default();
    let mut records: Vec<(i64, u8)> = Vec::new();
    let mut last_known: Option<u8> = None;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let (Some(ts_raw), Some(desc)) = (record.get(ts_col), record.get(desc_col)) else {
            return Err(IngestError::Malformed {
                path: "weather".into(),
                line: row,
                detail: "too few fields".into(),
            });
        };
        let ts = parse_timestamp_minutes(ts_raw).ok_or_else(|| IngestError::Malformed {
            path: "weather".into(),
            line: row,
            detail: format!("unparseable timestamp `{ts_raw}`"),
        })?;
        let label = match label_for(desc) {
            Some(l) => {
                last_known = Some(l);
                l
            }
            None => {
                let carried = last_known.ok_or_else(|| IngestError::UnknownLeadingWeather {
                    row,
                    text: desc.trim().to_string(),
                })?;
                report.warnings.push(format!(
                    "row {row}: unknown description `{}` carried forward as label {carried}",
                    desc.trim()
                ));
                carried
            }
        };
        records.push((ts, label));
    }
    if records.is_empty() {
        return Err(IngestError::EmptyInput("weather file has no records".into()));
    }
    if records.windows(2).any(|w| w[0].0 > w[1].0) {
        report.warnings.push("timestamps out of order; sorted".to_string());
        records.sort_by_key(|&(ts, _)| ts);
    }
    report.records = records.len();
    Ok((records, report))
}

/// Sample weather onto the 30-minute grid: each step takes the label of the
/// most recent record at or before the step start, normalized to
/// `(label - 1) / 4`, identical for every station.
pub fn encode_weather(
    records: &[(i64, u8)],
    grid: TimeGrid,
    station_ids: &[String],
) -> Result<DynamicAttributes, IngestError> {
    if records.is_empty() {
        return Err(IngestError::EmptyInput("no weather records".into()));
    }
    if records[0].0 > grid.origin_min() {
        return Err(IngestError::UncoveredGridStart {
            first_record: format_timestamp_minutes(records[0].0),
            origin: format_timestamp_minutes(grid.origin_min()),
        });
    }
    let n = station_ids.len();
    let t = grid.count();
    let mut per_step = vec![0.0f64; t];
    let mut cursor = 0usize;
    for (k, slot) in per_step.iter_mut().enumerate() {
        let step_start = grid.step_start(k);
        while cursor + 1 < records.len() && records[cursor + 1].0 <= step_start {
            cursor += 1;
        }
        *slot = (records[cursor].1 as f64 - 1.0) / 4.0;
    }
    let mut beta = Tensor::zeros([n, 1, t]);
    for si in 0..n {
        beta.data_mut()[si * t..(si + 1) * t].copy_from_slice(&per_step);
    }
    Ok(DynamicAttributes { grid, station_ids: station_ids.to_vec(), beta, w: 1 })
}

/// One-hot POI rows in the fixed category order. Category names may carry a
/// trailing " services"; anything else is a hard error listing valid names.
pub fn encode_poi(
    poi_table: &BTreeMap<String, String>,
    station_ids: &[String],
) -> Result<StaticAttributes, IngestError> {
    let n = station_ids.len();
    let p = POI_CATEGORIES.len();
    let mut alpha = Tensor::zeros([n, p]);
    for (si, id) in station_ids.iter().enumerate() {
        let raw = poi_table.get(id).ok_or_else(|| IngestError::MissingPoi(id.clone()))?;
        let name = raw.trim().to_ascii_lowercase();
        let name = name.strip_suffix(" services").unwrap_or(&name);
        let col = POI_CATEGORIES.iter().position(|c| *c == name).ok_or_else(|| {
            IngestError::UnknownPoiCategory {
                got: raw.trim().to_string(),
                valid: POI_CATEGORIES.join(", "),
            }
        })?;
        alpha.set2(si, col, 1.0);
    }
    Ok(StaticAttributes { station_ids: station_ids.to_vec(), alpha })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn weather_label_table() {
        let csv = "timestamp,description\n\
                   2018-03-05 08:00,Sunny\n\
                   2018-03-05 09:00,heavy rain\n\
                   2018-03-05 10:00,light rainy\n\
                   2018-03-05 11:00,foggy\n\
                   2018-03-05 12:00,cloudy\n";
        let (records, report) = parse_weather(csv.as_bytes()).unwrap();
        let labels: Vec<u8> = records.iter().map(|&(_, l)| l).collect();
        assert_eq!(labels, vec![1, 5, 4, 3, 2]);
        assert!(report.warnings.is_empty());
    }

    #[test]
    fn unknown_description_carries_forward_with_warning() {
        let csv = "timestamp,description\n\
                   2018-03-05 08:00,cloudy\n\
                   2018-03-05 09:00,drizzle?\n";
        let (records, report) = parse_weather(csv.as_bytes()).unwrap();
        assert_eq!(records[1].1, 2);
        assert_eq!(report.warnings.len(), 1);
        assert!(report.warnings[0].contains("drizzle?"));
    }

    #[test]
    fn unknown_leading_description_is_error() {
        let csv = "timestamp,description\n2018-03-05 08:00,drizzle?\n";
        assert!(matches!(
            parse_weather(csv.as_bytes()),
            Err(IngestError::UnknownLeadingWeather { row: 1, .. })
        ));
    }

    #[test]
    fn empty_weather_is_error() {
        let csv = "timestamp,description\n";
        assert!(matches!(parse_weather(csv.as_bytes()), Err(IngestError::EmptyInput(_))));
    }

    #[test]
    fn non_monotone_timestamps_sorted_with_warning() {
        let csv = "timestamp,description\n\
                   2018-03-05 09:00,cloudy\n\
                   2018-03-05 08:00,sunny\n";
        let (records, report) = parse_weather(csv.as_bytes()).unwrap();
        assert!(records[0].0 < records[1].0);
        assert_eq!(records[0].1, 1);
        assert!(report.warnings.iter().any(|w| w.contains("out of order")));
    }

    #[test]
    fn encode_weather_steps_take_most_recent_hourly_label() {
        // sunny at 17:00 covers the 17:00 and 17:30 steps: value 0
        let origin = parse_timestamp_minutes("2018-03-05 17:00").unwrap();
        let grid = TimeGrid::new(origin, 4).unwrap();
        let records = vec![
            (origin, 1u8),
            (parse_timestamp_minutes("2018-03-05 18:00").unwrap(), 5u8),
        ];
        let dyn_attrs = encode_weather(&records, grid, &ids(&["A", "B"])).unwrap();
        assert_eq!(dyn_attrs.w, 1);
        // steps: 17:00 -> 0.0, 17:30 -> 0.0, 18:00 -> 1.0, 18:30 -> 1.0
        for station in 0..2 {
            assert_eq!(dyn_attrs.beta.at3(station, 0, 0), 0.0);
            assert_eq!(dyn_attrs.beta.at3(station, 0, 1), 0.0);
            assert_eq!(dyn_attrs.beta.at3(station, 0, 2), 1.0);
            assert_eq!(dyn_attrs.beta.at3(station, 0, 3), 1.0);
        }
    }

    #[test]
    fn weather_normalization_values() {
        let origin = parse_timestamp_minutes("2018-03-05 00:00").unwrap();
        let grid = TimeGrid::new(origin, 1).unwrap();
        for (label, expected) in [(1u8, 0.0), (2, 0.25), (3, 0.5), (4, 0.75), (5, 1.0)] {
            let dyn_attrs = encode_weather(&[(origin, label)], grid, &ids(&["A"])).unwrap();
            assert_eq!(dyn_attrs.beta.at3(0, 0, 0), expected);
        }
    }

    #[test]
    fn weather_constant_across_stations() {
        let origin = parse_timestamp_minutes("2018-03-05 00:00").unwrap();
        let grid = TimeGrid::new(origin, 3).unwrap();
        let records = vec![(origin - 30, 2u8), (origin + 60, 4u8)];
        let d = encode_weather(&records, grid, &ids(&["A", "B", "C"])).unwrap();
        for k in 0..3 {
            let v0 = d.beta.at3(0, 0, k);
            assert_eq!(d.beta.at3(1, 0, k), v0);
            assert_eq!(d.beta.at3(2, 0, k), v0);
        }
    }

    #[test]
    fn weather_after_origin_is_error() {
        let origin = parse_timestamp_minutes("2018-03-05 00:00").unwrap();
        let grid = TimeGrid::new(origin, 1).unwrap();
        assert!(matches!(
            encode_weather(&[(origin + 10, 1)], grid, &ids(&["A"])),
            Err(IngestError::UncoveredGridStart { .. })
        ));
    }

    #[test]
    fn poi_one_hot_placement() {
        let table = BTreeMap::from([
            ("A".to_string(), "education".to_string()),
            ("B".to_string(), "other".to_string()),
            ("C".to_string(), "Education Services".to_string()),
        ]);
        let s = encode_poi(&table, &ids(&["A", "B", "C"])).unwrap();
        assert_eq!(s.alpha.row(0), &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(s.alpha.row(1), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        // same category -> identical rows
        assert_eq!(s.alpha.row(2), s.alpha.row(0));
        // every row sums to exactly 1
        for i in 0..3 {
            assert_eq!(s.alpha.row(i).iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn unknown_poi_category_lists_valid_names() {
        let table = BTreeMap::from([("A".to_string(), "arcade".to_string())]);
        let err = encode_poi(&table, &ids(&["A"])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("arcade"));
        assert!(msg.contains("transportation"));
        assert!(msg.contains("other"));
    }

    #[test]
    fn missing_poi_station_is_error() {
        let table = BTreeMap::new();
        assert!(matches!(
            encode_poi(&table, &ids(&["A"])),
            Err(IngestError::MissingPoi(s)) if s == "A"
        ));
    }
}
