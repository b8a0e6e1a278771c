//! Readers and writers for the on-disk dataset artifacts.
//!
//! A processed dataset directory holds:
//!   availability.csv         timestamp column + one column per station id
//!   static_attributes.csv    station_id + 8 one-hot POI columns
//!   dynamic_attributes.csv   timestamp column + one column per station id
//!   stations.csv             station_id,lat,lon,connectors
//!
//! Floats are written with shortest round-trip formatting, so write -> read
//! is exact.

use super::{
    format_timestamp_minutes, parse_timestamp_minutes, AvailabilitySeries, DynamicAttributes,
    IngestError, StaticAttributes, TimeGrid, POI_CATEGORIES, STEP_MINUTES,
};
use crate::nncore::Tensor;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

pub const AVAILABILITY_FILE: &str = "availability.csv";
pub const STATIC_ATTRIBUTES_FILE: &str = "static_attributes.csv";
pub const DYNAMIC_ATTRIBUTES_FILE: &str = "dynamic_attributes.csv";
pub const STATIONS_FILE: &str = "stations.csv";

/// Station metadata row persisted by ingest: coordinates and connector count.
#[derive(Debug, Clone, PartialEq)]
pub struct StationRecord {
    pub station_id: String,
    pub lat: f64,
    pub lon: f64,
    pub connectors: u32,
}

/// Everything the training pipeline needs, read back from a processed dir.
#[derive(Debug, Clone)]
pub struct ProcessedData {
    pub avail: AvailabilitySeries,
    pub alpha: StaticAttributes,
    pub beta: DynamicAttributes,
    pub stations: Vec<StationRecord>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io { path: path.display().to_string(), source }
}

fn malformed(path: &Path, line: usize, detail: impl Into<String>) -> IngestError {
    IngestError::Malformed { path: path.display().to_string(), line, detail: detail.into() }
}

pub fn write_availability_csv(
    series: &AvailabilitySeries,
    path: &Path,
) -> Result<(), IngestError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    writeln!(w, "timestamp,{}", series.station_ids.join(",")).map_err(io_err(path))?;
    for k in 0..series.grid.count() {
        let mut row = format_timestamp_minutes(series.grid.step_start(k));
        for si in 0..series.n_stations() {
            row.push(',');
            row.push_str(&format!("{}", series.value(si, k)));
        }
        writeln!(w, "{row}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_static_attributes_csv(
    attrs: &StaticAttributes,
    path: &Path,
) -> Result<(), IngestError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    writeln!(w, "station_id,{}", POI_CATEGORIES.join(",")).map_err(io_err(path))?;
    for (si, id) in attrs.station_ids.iter().enumerate() {
        let cells: Vec<String> =
            (0..POI_CATEGORIES.len()).map(|c| format!("{}", attrs.alpha.at2(si, c) as u8)).collect();
        writeln!(w, "{id},{}", cells.join(",")).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Single-factor (weather) dynamic attributes, one column per station.
pub fn write_dynamic_attributes_csv(
    attrs: &DynamicAttributes,
    path: &Path,
) -> Result<(), IngestError> {
    if attrs.w != 1 {
        return Err(IngestError::InvalidGrid(format!(
            "dynamic attribute file supports w = 1, got w = {}",
            attrs.w
        )));
    }
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    writeln!(w, "timestamp,{}", attrs.station_ids.join(",")).map_err(io_err(path))?;
    for k in 0..attrs.grid.count() {
        let mut row = format_timestamp_minutes(attrs.grid.step_start(k));
        for si in 0..attrs.station_ids.len() {
            row.push(',');
            row.push_str(&format!("{}", attrs.beta.at3(si, 0, k)));
        }
        writeln!(w, "{row}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_stations_csv(stations: &[StationRecord], path: &Path) -> Result<(), IngestError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    writeln!(w, "station_id,lat,lon,connectors").map_err(io_err(path))?;
    for s in stations {
        writeln!(w, "{},{},{},{}", s.station_id, s.lat, s.lon, s.connectors)
            .map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Square matrix with a station-id header row and leading id column
/// (graph exports and the road-distance override input).
pub fn write_matrix_csv(
    ids: &[String],
    matrix: &Tensor<f64>,
    path: &Path,
) -> Result<(), IngestError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    writeln!(w, "station_id,{}", ids.join(",")).map_err(io_err(path))?;
    for (i, id) in ids.iter().enumerate() {
        let cells: Vec<String> =
            (0..ids.len()).map(|j| format!("{}", matrix.at2(i, j))).collect();
        writeln!(w, "{id},{}", cells.join(",")).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_distance_matrix_csv(path: &Path) -> Result<(Vec<String>, Tensor<f64>), IngestError> {
    let mut reader = open_csv(path)?;
    let headers = reader.headers()?.clone();
    let ids: Vec<String> = headers.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let n = ids.len();
    if n == 0 {
        return Err(malformed(path, 1, "no station columns"));
    }
    let mut matrix = Tensor::zeros([n, n]);
    let mut rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if i >= n {
            return Err(malformed(path, i + 2, "more rows than station columns"));
        }
        let row_id = record.get(0).unwrap_or("").trim();
        if row_id != ids[i] {
            return Err(malformed(
                path,
                i + 2,
                format!("row id `{row_id}` does not match column id `{}`", ids[i]),
            ));
        }
        if record.len() != n + 1 {
            return Err(malformed(path, i + 2, format!("expected {} cells", n + 1)));
        }
        for j in 0..n {
            let cell = record.get(j + 1).unwrap().trim();
            let v: f64 = cell
                .parse()
                .map_err(|_| malformed(path, i + 2, format!("bad value `{cell}`")))?;
            matrix.set2(i, j, v);
        }
        rows += 1;
    }
    if rows != n {
        return Err(malformed(path, rows + 1, format!("expected {n} rows, got {rows}")));
    }
    Ok((ids, matrix))
}

/// `station_id,category` table.
pub fn read_poi_csv(path: &Path) -> Result<std::collections::BTreeMap<String, String>, IngestError> {
    let mut reader = open_csv(path)?;
    let headers = reader.headers()?.clone();
    let id_col = headers
        .iter()
        .position(|h| h.trim() == "station_id")
        .ok_or_else(|| IngestError::MissingColumn("station_id".into()))?;
    let cat_col = headers
        .iter()
        .position(|h| h.trim() == "category")
        .ok_or_else(|| IngestError::MissingColumn("category".into()))?;
    let mut out = std::collections::BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let (Some(id), Some(cat)) = (record.get(id_col), record.get(cat_col)) else {
            return Err(malformed(path, i + 2, "too few fields"));
        };
        out.insert(id.trim().to_string(), cat.trim().to_string());
    }
    if out.is_empty() {
        return Err(IngestError::EmptyInput(path.display().to_string()));
    }
    Ok(out)
}

/// `station_id,connectors` table.
pub fn read_connector_counts_csv(
    path: &Path,
) -> Result<std::collections::BTreeMap<String, u32>, IngestError> {
    let mut reader = open_csv(path)?;
    let headers = reader.headers()?.clone();
    let id_col = headers
        .iter()
        .position(|h| h.trim() == "station_id")
        .ok_or_else(|| IngestError::MissingColumn("station_id".into()))?;
    let conn_col = headers
        .iter()
        .position(|h| h.trim() == "connectors")
        .ok_or_else(|| IngestError::MissingColumn("connectors".into()))?;
    let mut out = std::collections::BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let (Some(id), Some(raw)) = (record.get(id_col), record.get(conn_col)) else {
            return Err(malformed(path, i + 2, "too few fields"));
        };
        let count: u32 = raw
            .trim()
            .parse()
            .map_err(|_| malformed(path, i + 2, format!("bad connector count `{raw}`")))?;
        out.insert(id.trim().to_string(), count);
    }
    if out.is_empty() {
        return Err(IngestError::EmptyInput(path.display().to_string()));
    }
    Ok(out)
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>, IngestError> {
    csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => IngestError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        },
        _ => IngestError::Csv(e),
    })
}

struct TimedTable {
    grid: TimeGrid,
    station_ids: Vec<String>,
    /// [N, T]
    values: Tensor<f64>,
}

fn read_timed_table(path: &Path, range_check: bool) -> Result<TimedTable, IngestError> {
    let mut reader = open_csv(path)?;
    let headers = reader.headers()?.clone();
    if headers.get(0).map(str::trim) != Some("timestamp") {
        return Err(malformed(path, 1, "first column must be `timestamp`"));
    }
    let station_ids: Vec<String> = headers.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let n = station_ids.len();
    if n == 0 {
        return Err(malformed(path, 1, "no station columns"));
    }
    let mut origin = None;
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut count = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let ts_raw = record.get(0).unwrap_or("").trim();
        let ts = parse_timestamp_minutes(ts_raw)
            .ok_or_else(|| malformed(path, line, format!("bad timestamp `{ts_raw}`")))?;
        match origin {
            None => origin = Some(ts),
            Some(o) => {
                if ts != o + (count as i64) * STEP_MINUTES {
                    return Err(malformed(
                        path,
                        line,
                        format!("timestamp {ts_raw} breaks the 30-minute grid"),
                    ));
                }
            }
        }
        if record.len() != n + 1 {
            return Err(malformed(path, line, format!("expected {} cells", n + 1)));
        }
        for (si, column) in columns.iter_mut().enumerate() {
            let cell = record.get(si + 1).unwrap().trim();
            let v: f64 = cell
                .parse()
                .map_err(|_| malformed(path, line, format!("bad value `{cell}`")))?;
            if range_check && !(0.0..=1.0).contains(&v) {
                return Err(malformed(path, line, format!("value {v} outside [0,1]")));
            }
            column.push(v);
        }
        count += 1;
    }
    let origin = origin.ok_or_else(|| IngestError::EmptyInput(path.display().to_string()))?;
    let grid = TimeGrid::new(origin, count)?;
    let mut values = Tensor::zeros([n, count]);
    for (si, column) in columns.iter().enumerate() {
        values.data_mut()[si * count..(si + 1) * count].copy_from_slice(column);
    }
    Ok(TimedTable { grid, station_ids, values })
}

fn read_stations_csv(path: &Path) -> Result<Vec<StationRecord>, IngestError> {
    let mut reader = open_csv(path)?;
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        if record.len() < 4 {
            return Err(malformed(path, line, "expected 4 cells"));
        }
        let parse_f = |idx: usize| -> Result<f64, IngestError> {
            record
                .get(idx)
                .unwrap()
                .trim()
                .parse()
                .map_err(|_| malformed(path, line, format!("bad number `{}`", record.get(idx).unwrap())))
        };
        let connectors: u32 = record
            .get(3)
            .unwrap()
            .trim()
            .parse()
            .map_err(|_| malformed(path, line, "bad connector count"))?;
        out.push(StationRecord {
            station_id: record.get(0).unwrap().trim().to_string(),
            lat: parse_f(1)?,
            lon: parse_f(2)?,
            connectors,
        });
    }
    if out.is_empty() {
        return Err(IngestError::EmptyInput(path.display().to_string()));
    }
    Ok(out)
}

fn read_static_attributes_csv(path: &Path) -> Result<StaticAttributes, IngestError> {
    let mut reader = open_csv(path)?;
    let headers = reader.headers()?.clone();
    let expected: Vec<&str> = std::iter::once("station_id").chain(POI_CATEGORIES).collect();
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(malformed(path, 1, format!("header {got:?} != {expected:?}")));
    }
    let p = POI_CATEGORIES.len();
    let mut ids = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        ids.push(record.get(0).unwrap_or("").trim().to_string());
        let mut sum = 0.0;
        for c in 0..p {
            let cell = record.get(c + 1).unwrap_or("").trim();
            let v: f64 = cell
                .parse()
                .map_err(|_| malformed(path, line, format!("bad value `{cell}`")))?;
            if v != 0.0 && v != 1.0 {
                return Err(malformed(path, line, format!("one-hot cell {v} not 0/1")));
            }
            sum += v;
            rows.push(v);
        }
        if sum != 1.0 {
            return Err(malformed(path, line, "one-hot row does not sum to 1"));
        }
    }
    if ids.is_empty() {
        return Err(IngestError::EmptyInput(path.display().to_string()));
    }
    let n = ids.len();
    Ok(StaticAttributes { station_ids: ids, alpha: Tensor::from_vec(vec![n, p], rows) })
}

/// Load all four artifacts of a processed dataset directory and
/// cross-validate station order and grids.
pub fn read_processed_dir(dir: &Path) -> Result<ProcessedData, IngestError> {
    let avail_table = read_timed_table(&dir.join(AVAILABILITY_FILE), true)?;
    let alpha = read_static_attributes_csv(&dir.join(STATIC_ATTRIBUTES_FILE))?;
    let dyn_table = read_timed_table(&dir.join(DYNAMIC_ATTRIBUTES_FILE), true)?;
    let stations = read_stations_csv(&dir.join(STATIONS_FILE))?;

    let ids = &avail_table.station_ids;
    let station_ids_of = |records: &[StationRecord]| -> Vec<String> {
        records.iter().map(|s| s.station_id.clone()).collect()
    };
    if alpha.station_ids != *ids
        || dyn_table.station_ids != *ids
        || station_ids_of(&stations) != *ids
    {
        return Err(IngestError::StationMismatch(
            "artifact files disagree on station ids or order".into(),
        ));
    }
    if dyn_table.grid != avail_table.grid {
        return Err(IngestError::GridMismatch(
            "dynamic attributes are on a different grid than availability".into(),
        ));
    }
    let n = ids.len();
    let t = avail_table.grid.count();
    let mut beta = Tensor::zeros([n, 1, t]);
    beta.data_mut().copy_from_slice(dyn_table.values.data());
    let connector_counts: Vec<u32> = stations.iter().map(|s| s.connectors).collect();
    for (s, &c) in stations.iter().zip(&connector_counts) {
        if c < 1 {
            return Err(IngestError::BadConnectorCount { station: s.station_id.clone(), count: c });
        }
    }
    Ok(ProcessedData {
        avail: AvailabilitySeries {
            grid: avail_table.grid,
            station_ids: ids.clone(),
            connector_counts,
            values: avail_table.values,
        },
        alpha,
        beta: DynamicAttributes {
            grid: dyn_table.grid,
            station_ids: dyn_table.station_ids,
            beta,
            w: 1,
        },
        stations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn sample_data(dir: &Path) {
        let origin = parse_timestamp_minutes("2018-03-05 00:00").unwrap();
        let grid = TimeGrid::new(origin, 4).unwrap();
        let ids = vec!["A".to_string(), "B".to_string()];
        let avail = AvailabilitySeries {
            grid,
            station_ids: ids.clone(),
            connector_counts: vec![2, 1],
            values: Tensor::from_vec(
                vec![2, 4],
                vec![1.0, 0.25, 1.0 / 3.0, 0.9999, 0.0, 1.0, 0.5, 0.125],
            ),
        };
        let alpha = super::super::encode_poi(
            &BTreeMap::from([
                ("A".to_string(), "education".to_string()),
                ("B".to_string(), "other".to_string()),
            ]),
            &ids,
        )
        .unwrap();
        let beta = super::super::encode_weather(&[(origin, 3)], grid, &ids).unwrap();
        let stations = vec![
            StationRecord { station_id: "A".into(), lat: 56.46, lon: -2.97, connectors: 2 },
            StationRecord { station_id: "B".into(), lat: 56.48, lon: -2.99, connectors: 1 },
        ];
        write_availability_csv(&avail, &dir.join(AVAILABILITY_FILE)).unwrap();
        write_static_attributes_csv(&alpha, &dir.join(STATIC_ATTRIBUTES_FILE)).unwrap();
        write_dynamic_attributes_csv(&beta, &dir.join(DYNAMIC_ATTRIBUTES_FILE)).unwrap();
        write_stations_csv(&stations, &dir.join(STATIONS_FILE)).unwrap();
    }

    #[test]
    fn processed_dir_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        sample_data(dir.path());
        let data = read_processed_dir(dir.path()).unwrap();
        assert_eq!(data.avail.station_ids, vec!["A", "B"]);
        assert_eq!(data.avail.connector_counts, vec![2, 1]);
        assert_eq!(data.avail.value(0, 2), 1.0 / 3.0);
        assert_eq!(data.avail.value(0, 3), 0.9999);
        assert_eq!(data.alpha.alpha.at2(0, 3), 1.0);
        assert_eq!(data.beta.beta.at3(1, 0, 0), 0.5);
        assert_eq!(data.stations[1].connectors, 1);
    }

    #[test]
    fn matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dist.csv");
        let ids = vec!["A".to_string(), "B".to_string()];
        let m = Tensor::from_vec(vec![2, 2], vec![0.0, 123.456789, 123.456789, 0.0]);
        write_matrix_csv(&ids, &m, &path).unwrap();
        let (rids, rm) = read_distance_matrix_csv(&path).unwrap();
        assert_eq!(rids, ids);
        assert_eq!(rm, m);
    }

    #[test]
    fn grid_break_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(AVAILABILITY_FILE);
        std::fs::write(
            &path,
            "timestamp,A\n2018-03-05 00:00,1.0\n2018-03-05 01:30,0.5\n",
        )
        .unwrap();
        assert!(matches!(
            read_timed_table(&path, true),
            Err(IngestError::Malformed { .. })
        ));
    }

    #[test]
    fn out_of_range_availability_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(AVAILABILITY_FILE);
        std::fs::write(&path, "timestamp,A\n2018-03-05 00:00,1.5\n").unwrap();
        assert!(read_timed_table(&path, true).is_err());
    }
}
