//! Deterministic synthetic-data generator with known spatial, periodic,
//! weather, and POI effects, emitting files in the ingest CSV schemas so the
//! whole pipeline runs unchanged without the real dataset.

use crate::graph::{GraphError, StationGraph};
use crate::ingest::{
    encode_poi, encode_weather, format_timestamp_minutes, parse_timestamp_minutes,
    write_availability_csv, AvailabilitySeries, DynamicAttributes, IngestError, StaticAttributes,
    TimeGrid, POI_CATEGORIES, STEPS_PER_DAY,
};
use crate::nncore::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use thiserror::Error;

/// Fixed generation anchors: trace origin, disc radius, connectors per
/// station, and the base availability level.
const ORIGIN_TIMESTAMP: &str = "2018-03-05 00:00";
const DISC_RADIUS_KM: f64 = 3.0;
const CENTER_LAT: f64 = 56.462;
const CENTER_LON: f64 = -2.97;
const CONNECTORS_PER_STATION: u32 = 2;
pub const BASE_AVAILABILITY: f64 = 0.5;

const WEATHER_NAMES: [&str; 5] = ["sunny", "cloudy", "foggy", "light rainy", "heavy rainy"];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_stations: usize,
    pub days: usize,
    pub seed: u64,
    pub daily_amplitude: f64,
    pub weather_effect: f64,
    /// Per-POI-category phase offset of the daily cycle, in hours.
    pub poi_phase_shift: f64,
    /// Convex weight of the neighbor-average term, in [0,1).
    pub spatial_smoothing: f64,
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_stations: 10,
            days: 14,
            seed: 7,
            daily_amplitude: 0.15,
            weather_effect: 0.2,
            poi_phase_shift: 3.0,
            spatial_smoothing: 0.2,
            noise_std: 0.05,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), SynthError> {
        let fail = |msg: String| Err(SynthError::InvalidConfig(msg));
        if self.n_stations < 2 {
            return fail(format!("n_stations must be >= 2, got {}", self.n_stations));
        }
        if self.days < 1 {
            return fail("days must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.spatial_smoothing) {
            return fail(format!("spatial_smoothing {} outside [0,1)", self.spatial_smoothing));
        }
        if self.noise_std < 0.0 {
            return fail(format!("noise_std {} negative", self.noise_std));
        }
        Ok(())
    }
}

/// Full synthetic dataset, both in-memory and ready to serialize.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub avail: AvailabilitySeries,
    pub alpha: StaticAttributes,
    pub beta: DynamicAttributes,
    pub graph: StationGraph,
    /// Hourly weather labels 1-5 backing `beta`.
    pub hourly_weather: Vec<(i64, u8)>,
    pub poi: BTreeMap<String, String>,
    pub connectors: Vec<u32>,
}

fn station_id(i: usize) -> String {
    format!("S{i:03}")
}

/// Generate the dataset. Availability is
/// `clamp((1-s)*own + s*neighbor_avg + noise, 0, 1)` where the own signal is
/// `base + daily sinusoid (POI-phase-shifted) + weather_effect*(1-severity)`,
/// then quantized to whole connector-minutes so that emitted sessions
/// aggregate back to exactly these values.
pub fn generate(config: &SynthConfig) -> Result<SynthData, SynthError> {
    config.validate()?;
    let n = config.n_stations;
    let t = config.days * STEPS_PER_DAY;
    let origin = parse_timestamp_minutes(ORIGIN_TIMESTAMP).expect("fixed origin");
    let grid = TimeGrid::new(origin, t)?;
    let station_ids: Vec<String> = (0..n).map(station_id).collect();

    // independent streams so that changing one knob never shifts the others
    let mut rng_coords = ChaCha8Rng::seed_from_u64(config.seed ^ 0x636f6f7264);
    let mut rng_weather = ChaCha8Rng::seed_from_u64(config.seed ^ 0x77656174);
    let mut rng_noise = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6e6f6973);

    let coords: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            let r = DISC_RADIUS_KM * rng_coords.gen::<f64>().sqrt();
            let theta = 2.0 * std::f64::consts::PI * rng_coords.gen::<f64>();
            let lat = CENTER_LAT + r * theta.sin() / 111.32;
            let lon = CENTER_LON + r * theta.cos() / (111.32 * CENTER_LAT.to_radians().cos());
            (lat, lon)
        })
        .collect();
    let graph = StationGraph::from_coords(station_ids.clone(), coords, None, None)?;

    let poi: BTreeMap<String, String> = station_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), POI_CATEGORIES[i % POI_CATEGORIES.len()].to_string()))
        .collect();
    let alpha = encode_poi(&poi, &station_ids)?;

    // hourly 5-state Markov chain: stay 0.8,步 +-1 with 0.1 each,
    // folded at the boundaries
    let hours = config.days * 24;
    let mut hourly_weather = Vec::with_capacity(hours);
    let mut state: i32 = rng_weather.gen_range(1..=5);
    for h in 0..hours {
        let roll: f64 = rng_weather.gen();
        if roll >= 0.8 {
            let delta = if roll < 0.9 { -1 } else { 1 };
            let next = state + delta;
            if (1..=5).contains(&next) {
                state = next;
            }
        }
        hourly_weather.push((origin + (h as i64) * 60, state as u8));
    }
    let beta = encode_weather(&hourly_weather, grid, &station_ids)?;

    // per-station deterministic signal
    let phase_hours: Vec<f64> = (0..n)
        .map(|i| (i % POI_CATEGORIES.len()) as f64 * config.poi_phase_shift)
        .collect();
    let mut own = Tensor::zeros([n, t]);
    for si in 0..n {
        for k in 0..t {
            let hour_of_day = (grid.step_start(k).rem_euclid(24 * 60)) as f64 / 60.0;
            let daily = config.daily_amplitude
                * (2.0 * std::f64::consts::PI * (hour_of_day - phase_hours[si]) / 24.0).sin();
            let severity = beta.beta.at3(si, 0, k);
            own.set2(
                si,
                k,
                BASE_AVAILABILITY + daily + config.weather_effect * (1.0 - severity),
            );
        }
    }

    // adjacency-weighted neighbor average (self excluded)
    let s = config.spatial_smoothing;
    let noise = Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE)).unwrap();
    let cap = 30.0 * CONNECTORS_PER_STATION as f64;
    let mut values = Tensor::zeros([n, t]);
    for si in 0..n {
        let mut weight_sum = 0.0;
        for sj in 0..n {
            if sj != si {
                weight_sum += graph.adjacency.at2(si, sj);
            }
        }
        for k in 0..t {
            let neighbor_avg = if weight_sum > 0.0 {
                let mut acc = 0.0;
                for sj in 0..n {
                    if sj != si {
                        acc += graph.adjacency.at2(si, sj) * own.at2(sj, k);
                    }
                }
                acc / weight_sum
            } else {
                own.at2(si, k)
            };
            let eps = if config.noise_std > 0.0 { noise.sample(&mut rng_noise) } else { 0.0 };
            let x = ((1.0 - s) * own.at2(si, k) + s * neighbor_avg + eps).clamp(0.0, 1.0);
            // quantize to whole occupied connector-minutes
            let occupied = ((1.0 - x) * cap).round().clamp(0.0, cap);
            values.set2(si, k, 1.0 - occupied / cap);
        }
    }

    let connectors = vec![CONNECTORS_PER_STATION; n];
    Ok(SynthData {
        avail: AvailabilitySeries {
            grid,
            station_ids,
            connector_counts: connectors.clone(),
            values,
        },
        alpha,
        beta,
        graph,
        hourly_weather,
        poi,
        connectors,
    })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io { path: path.display().to_string(), source }
}

/// Write the raw-input CSVs (sessions, weather, poi, connectors) plus a
/// ground-truth availability file. Running ingest over the emitted inputs
/// with this grid reproduces `data.avail` exactly.
pub fn write_dataset(data: &SynthData, dir: &Path) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let n = data.avail.n_stations();
    let t = data.avail.grid.count();
    let grid = data.avail.grid;

    let sessions_path = dir.join("sessions.csv");
    let mut w = BufWriter::new(File::create(&sessions_path).map_err(io_err(&sessions_path))?);
    writeln!(w, "station_id,connector_id,start,end,energy_kwh,lat,lon,charger_type")
        .map_err(io_err(&sessions_path))?;
    let charger_names = ["slow", "fast", "rapid"];
    let coords = data.graph.coords.as_ref().expect("generated graph has coordinates");
    for si in 0..n {
        let id = &data.avail.station_ids[si];
        let (lat, lon) = coords[si];
        let charger = charger_names[si % 3];
        let cap = 30 * data.connectors[si] as i64;
        let mut any = false;
        for k in 0..t {
            let occupied = ((1.0 - data.avail.value(si, k)) * cap as f64).round() as i64;
            if occupied == 0 {
                continue;
            }
            any = true;
            let w_start = grid.step_start(k);
            let full = occupied / 30;
            let rem = occupied % 30;
            for c in 0..full {
                writeln!(
                    w,
                    "{id},{c},{},{},{},{lat},{lon},{charger}",
                    format_timestamp_minutes(w_start),
                    format_timestamp_minutes(w_start + 30),
                    30.0 * 0.1
                )
                .map_err(io_err(&sessions_path))?;
            }
            if rem > 0 {
                writeln!(
                    w,
                    "{id},{full},{},{},{},{lat},{lon},{charger}",
                    format_timestamp_minutes(w_start),
                    format_timestamp_minutes(w_start + rem),
                    rem as f64 * 0.1
                )
                .map_err(io_err(&sessions_path))?;
            }
        }
        if !any {
            // zero-length marker session so ingest still sees coordinates
            let w_start = grid.step_start(0);
            writeln!(
                w,
                "{id},0,{},{},0,{lat},{lon},{charger}",
                format_timestamp_minutes(w_start),
                format_timestamp_minutes(w_start)
            )
            .map_err(io_err(&sessions_path))?;
        }
    }
    w.flush().map_err(io_err(&sessions_path))?;

    let weather_path = dir.join("weather.csv");
    let mut w = BufWriter::new(File::create(&weather_path).map_err(io_err(&weather_path))?);
    writeln!(w, "timestamp,description").map_err(io_err(&weather_path))?;
    for &(ts, label) in &data.hourly_weather {
        writeln!(
            w,
            "{},{}",
            format_timestamp_minutes(ts),
            WEATHER_NAMES[(label - 1) as usize]
        )
        .map_err(io_err(&weather_path))?;
    }
    w.flush().map_err(io_err(&weather_path))?;

    let poi_path = dir.join("poi.csv");
    let mut w = BufWriter::new(File::create(&poi_path).map_err(io_err(&poi_path))?);
    writeln!(w, "station_id,category").map_err(io_err(&poi_path))?;
    for (id, cat) in &data.poi {
        writeln!(w, "{id},{cat}").map_err(io_err(&poi_path))?;
    }
    w.flush().map_err(io_err(&poi_path))?;

    let conn_path = dir.join("connectors.csv");
    let mut w = BufWriter::new(File::create(&conn_path).map_err(io_err(&conn_path))?);
    writeln!(w, "station_id,connectors").map_err(io_err(&conn_path))?;
    for (id, c) in data.avail.station_ids.iter().zip(&data.connectors) {
        writeln!(w, "{id},{c}").map_err(io_err(&conn_path))?;
    }
    w.flush().map_err(io_err(&conn_path))?;

    write_availability_csv(&data.avail, &dir.join("availability_truth.csv"))?;
    Ok(())
}

/// Pearson correlation between city-mean availability and (1 - severity).
pub fn weather_availability_correlation(data: &SynthData) -> f64 {
    let n = data.avail.n_stations();
    let t = data.avail.grid.count();
    let mut xs = Vec::with_capacity(t);
    let mut ys = Vec::with_capacity(t);
    for k in 0..t {
        let mean_avail =
            (0..n).map(|si| data.avail.value(si, k)).sum::<f64>() / n as f64;
        xs.push(1.0 - data.beta.beta.at3(0, 0, k));
        ys.push(mean_avail);
    }
    pearson(&xs, &ys)
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}
