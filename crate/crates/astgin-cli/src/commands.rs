//! Implementations of the pipeline subcommands.

use crate::config::{ConfigError, GraphConfig, Overrides, RunConfig};
use anyhow::{bail, Context, Result};
use astgin::graph::StationGraph;
use astgin::ingest::{
    self, aggregate_availability, encode_poi, encode_weather, format_timestamp_minutes,
    make_windows, parse_sessions, parse_timestamp_minutes, parse_weather,
    read_connector_counts_csv, read_poi_csv, read_processed_dir, split_indices,
    split_indices_chronological, write_availability_csv, write_dynamic_attributes_csv,
    write_matrix_csv, write_static_attributes_csv, write_stations_csv, ProcessedData,
    SplitIndices, StationRecord, TimeGrid, WindowSet, SPLIT_RATIOS,
};
use astgin::nncore::gradcheck::{grad_check_case, DEFAULT_H, DEFAULT_TOLERANCE};
use astgin::synth;
use astgin::trainer::{baselines, Pipeline, SplitKind};
use astgin::ParameterStore;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Numerical failure (exit code 3).
#[derive(Debug)]
pub struct NumericalError(pub String);

impl std::fmt::Display for NumericalError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for NumericalError {}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_sha256: String,
    artifacts: Vec<String>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn write_manifest(out: &Path, command: &str, config_hash: String, artifacts: &[&str]) -> Result<()> {
    let manifest = Manifest {
        command,
        config_sha256: config_hash,
        artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
    };
    write_json(&out.join("manifest.json"), &manifest)
}

fn ensure_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("cannot create output directory {}", out.display()))
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("missing file {}", path.display()),
        ));
    }
    Ok(())
}

#[derive(Serialize)]
struct IngestReportFile {
    stations: usize,
    sessions_parsed: usize,
    sessions_skipped: usize,
    sessions_by_type: BTreeMap<&'static str, usize>,
    skipped: Vec<ingest::SkippedRow>,
    clamped_windows: u64,
    weather_warnings: Vec<String>,
    grid_origin: String,
    grid_steps: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_ingest(
    sessions_path: &Path,
    weather_path: &Path,
    poi_path: &Path,
    connectors_path: &Path,
    out: &Path,
    grid_origin: Option<&str>,
    grid_steps: Option<usize>,
) -> Result<()> {
    for p in [sessions_path, weather_path, poi_path, connectors_path] {
        require_file(p)?;
    }
    ensure_out_dir(out)?;

    let file = std::fs::File::open(sessions_path)
        .with_context(|| format!("cannot open {}", sessions_path.display()))?;
    let (sessions, session_report) = parse_sessions(file)?;
    let connector_counts = read_connector_counts_csv(connectors_path)?;

    let grid = match (grid_origin, grid_steps) {
        (Some(origin), Some(steps)) => {
            let origin_min = parse_timestamp_minutes(origin).ok_or_else(|| {
                ConfigError(format!("bad --grid-origin `{origin}`, expected YYYY-MM-DD HH:MM"))
            })?;
            TimeGrid::new(origin_min, steps)?
        }
        (None, None) => {
            if sessions.is_empty() {
                bail!(ConfigError(
                    "no valid sessions to infer the time grid from; pass --grid-origin/--grid-steps"
                        .into()
                ));
            }
            let min_start = sessions.iter().map(|s| s.start).min().unwrap();
            let max_end = sessions.iter().map(|s| s.end).max().unwrap();
            TimeGrid::covering(min_start, max_end)?
        }
        _ => bail!(ConfigError(
            "--grid-origin and --grid-steps must be given together".into()
        )),
    };

    let (series, clamped) = aggregate_availability(&sessions, grid, &connector_counts)?;

    // station coordinates from their first session
    let mut coords: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for s in &sessions {
        coords.entry(s.station_id.as_str()).or_insert((s.lat, s.lon));
    }
    let mut stations = Vec::with_capacity(series.station_ids.len());
    for (id, connectors) in series.station_ids.iter().zip(&series.connector_counts) {
        let &(lat, lon) = coords.get(id.as_str()).ok_or_else(|| {
            ConfigError(format!("no session provides coordinates for station `{id}`"))
        })?;
        stations.push(StationRecord { station_id: id.clone(), lat, lon, connectors: *connectors });
    }

    let weather_file = std::fs::File::open(weather_path)
        .with_context(|| format!("cannot open {}", weather_path.display()))?;
    let (records, weather_report) = parse_weather(weather_file)?;
    let dynamic = encode_weather(&records, grid, &series.station_ids)?;

    let poi_table = read_poi_csv(poi_path)?;
    let alpha = encode_poi(&poi_table, &series.station_ids)?;

    write_availability_csv(&series, &out.join(ingest::AVAILABILITY_FILE))?;
    write_static_attributes_csv(&alpha, &out.join(ingest::STATIC_ATTRIBUTES_FILE))?;
    write_dynamic_attributes_csv(&dynamic, &out.join(ingest::DYNAMIC_ATTRIBUTES_FILE))?;
    write_stations_csv(&stations, &out.join(ingest::STATIONS_FILE))?;

    let report = IngestReportFile {
        stations: series.station_ids.len(),
        sessions_parsed: session_report.parsed,
        sessions_skipped: session_report.skipped.len(),
        sessions_by_type: BTreeMap::from([
            ("slow", session_report.slow),
            ("fast", session_report.fast),
            ("rapid", session_report.rapid),
        ]),
        skipped: session_report.skipped.clone(),
        clamped_windows: clamped,
        weather_warnings: weather_report.warnings.clone(),
        grid_origin: format_timestamp_minutes(grid.origin_min()),
        grid_steps: grid.count(),
    };
    write_json(&out.join("ingest_report.json"), &report)?;

    let hash = {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in [sessions_path, weather_path, poi_path, connectors_path] {
            h.update(p.display().to_string().as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect::<String>()
    };
    write_manifest(
        out,
        "ingest",
        hash,
        &[
            ingest::AVAILABILITY_FILE,
            ingest::STATIC_ATTRIBUTES_FILE,
            ingest::DYNAMIC_ATTRIBUTES_FILE,
            ingest::STATIONS_FILE,
            "ingest_report.json",
        ],
    )?;

    println!(
        "ingested {} stations, {} sessions ({} skipped), {} windows, {} clamped",
        report.stations,
        report.sessions_parsed,
        report.sessions_skipped,
        grid.count(),
        clamped
    );
    Ok(())
}

fn build_graph(data: &ProcessedData, graph_cfg: &GraphConfig) -> Result<StationGraph> {
    let ids: Vec<String> = data.stations.iter().map(|s| s.station_id.clone()).collect();
    let graph = match &graph_cfg.distance_matrix {
        Some(path) => {
            require_file(path)?;
            let (file_ids, dist) = ingest::read_distance_matrix_csv(path)?;
            if file_ids != ids {
                bail!(ConfigError(format!(
                    "distance matrix stations {file_ids:?} do not match dataset stations"
                )));
            }
            StationGraph::from_distance_matrix(ids, dist, graph_cfg.sigma, graph_cfg.kappa)?
        }
        None => {
            let coords: Vec<(f64, f64)> = data.stations.iter().map(|s| (s.lat, s.lon)).collect();
            StationGraph::from_coords(ids, coords, graph_cfg.sigma, graph_cfg.kappa)?
        }
    };
    Ok(graph)
}

struct LoadedDataset {
    data: ProcessedData,
    graph: StationGraph,
    windows: WindowSet,
}

fn load_dataset(cfg: &RunConfig) -> Result<LoadedDataset> {
    let data_dir = cfg
        .data_dir
        .as_ref()
        .ok_or_else(|| ConfigError("config is missing data_dir".into()))?;
    if !data_dir.is_dir() {
        bail!(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("data directory {} does not exist", data_dir.display()),
        ));
    }
    let data = read_processed_dir(data_dir)?;
    let graph = build_graph(&data, &cfg.graph)?;
    let windows = make_windows(&data.avail, Some(&data.beta), cfg.train.l, cfg.train.horizon_steps)?;
    Ok(LoadedDataset { data, graph, windows })
}

fn make_split(cfg: &RunConfig, n: usize) -> Result<SplitIndices> {
    Ok(match cfg.train.split {
        SplitKind::Random => split_indices(n, SPLIT_RATIOS, cfg.train.seed)?,
        SplitKind::Chronological => split_indices_chronological(n, SPLIT_RATIOS)?,
    })
}

pub fn cmd_train(config_path: &Path, overrides: &Overrides, out: Option<&Path>) -> Result<()> {
    let mut cfg = RunConfig::load(config_path)?;
    overrides.apply(&mut cfg)?;
    let out = resolve_out(&cfg, out)?;
    ensure_out_dir(&out)?;

    let ds = load_dataset(&cfg)?;
    let split = make_split(&cfg, ds.windows.samples.len())?;
    let pipeline =
        Pipeline::<f32>::new(cfg.train.clone(), &cfg.arch, &ds.graph, &ds.windows, Some(&ds.data.alpha))?;
    let (store, report) = pipeline.train(&ds.windows, Some(&ds.data.alpha), &split)?;

    store.save(&out.join("checkpoint.txt"))?;
    write_json(&out.join("train_report.json"), &report)?;
    write_matrix_csv(&ds.graph.station_ids, &ds.graph.adjacency, &out.join("adjacency.csv"))?;
    write_matrix_csv(
        &ds.graph.station_ids,
        &ds.graph.normalized,
        &out.join("normalized_adjacency.csv"),
    )?;
    let base_reports = baselines(&ds.windows, &split)?;
    write_json(&out.join("baselines.json"), &base_reports)?;
    write_manifest(
        &out,
        "train",
        cfg.sha256(),
        &[
            "checkpoint.txt",
            "train_report.json",
            "adjacency.csv",
            "normalized_adjacency.csv",
            "baselines.json",
        ],
    )?;
    println!(
        "trained {} epochs (best {}), test accuracy {:.4}, rmse {:.4}",
        report.epochs, report.best_epoch, report.test_metrics.accuracy, report.test_metrics.rmse
    );
    Ok(())
}

fn resolve_out(cfg: &RunConfig, flag: Option<&Path>) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| ConfigError("no output directory: pass --out or set out_dir".into()).into())
}

fn load_pipeline_and_store(
    cfg: &RunConfig,
    checkpoint: &Path,
) -> Result<(LoadedDataset, Pipeline<f32>, ParameterStore<f32>, SplitIndices)> {
    require_file(checkpoint)?;
    let ds = load_dataset(cfg)?;
    let split = make_split(cfg, ds.windows.samples.len())?;
    let pipeline =
        Pipeline::<f32>::new(cfg.train.clone(), &cfg.arch, &ds.graph, &ds.windows, Some(&ds.data.alpha))?;
    let store = ParameterStore::<f32>::load(checkpoint)?;
    Ok((ds, pipeline, store, split))
}

pub fn cmd_evaluate(
    config_path: &Path,
    overrides: &Overrides,
    checkpoint: &Path,
    out: Option<&Path>,
    dump_predictions: bool,
    dump_attention: bool,
) -> Result<()> {
    let mut cfg = RunConfig::load(config_path)?;
    overrides.apply(&mut cfg)?;
    let out = resolve_out(&cfg, out)?;
    ensure_out_dir(&out)?;
    let (ds, pipeline, store, split) = load_pipeline_and_store(&cfg, checkpoint)?;

    let (metrics, preds) = pipeline.evaluate(&store, &ds.windows, Some(&ds.data.alpha), &split.test)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    let mut artifacts = vec!["metrics.json"];

    if dump_predictions {
        let mut text = String::from("time,station,truth,prediction\n");
        for (i, &(start, j, station)) in preds.coords.iter().enumerate() {
            let step = start + cfg.train.l + 1 + j;
            text.push_str(&format!(
                "{},{},{},{}\n",
                format_timestamp_minutes(ds.data.avail.grid.step_start(step)),
                ds.data.avail.station_ids[station],
                preds.y_true[i],
                preds.y_pred[i],
            ));
        }
        std::fs::write(out.join("predictions.csv"), text)?;
        artifacts.push("predictions.csv");
    }
    if dump_attention {
        let maps =
            pipeline.attention_maps(&store, &ds.windows, Some(&ds.data.alpha), split.test[0])?;
        let mut text = String::from("map,row,col,weight\n");
        for (name, weights, _) in &maps {
            let shape = weights.shape().to_vec();
            let (rows, cols) = (shape[shape.len() - 2], shape[shape.len() - 1]);
            let lanes = weights.len() / (rows * cols);
            for lane in 0..lanes {
                for r in 0..rows {
                    for c in 0..cols {
                        let v = weights.data()[(lane * rows + r) * cols + c];
                        text.push_str(&format!("{name}.h{lane},{r},{c},{v}\n"));
                    }
                }
            }
        }
        std::fs::write(out.join("attention_maps.csv"), text)?;
        artifacts.push("attention_maps.csv");
    }
    write_manifest(&out, "evaluate", cfg.sha256(), &artifacts)?;
    println!(
        "test metrics: rmse {:.4}, r2 {:.4}, var {:.4}, mae {:.4}, accuracy {:.4} ({} points)",
        metrics.rmse, metrics.r2, metrics.var_score, metrics.mae, metrics.accuracy, metrics.n_points
    );
    Ok(())
}

pub fn cmd_forecast(
    config_path: &Path,
    overrides: &Overrides,
    checkpoint: &Path,
    clamp: bool,
    out: Option<&Path>,
) -> Result<()> {
    let mut cfg = RunConfig::load(config_path)?;
    overrides.apply(&mut cfg)?;
    let out = resolve_out(&cfg, out)?;
    ensure_out_dir(&out)?;
    let (ds, pipeline, store, _) = load_pipeline_and_store(&cfg, checkpoint)?;

    let pred = pipeline.forecast(&store, &ds.data.avail, Some(&ds.data.alpha), Some(&ds.data.beta))?;
    let mut text = format!("timestamp,{}\n", ds.data.avail.station_ids.join(","));
    let end = ds.data.avail.grid.end_min();
    for j in 0..cfg.train.horizon_steps {
        let ts = format_timestamp_minutes(end + (j as i64) * ds.data.avail.grid.step_minutes());
        let mut row = ts;
        for station in 0..ds.data.avail.n_stations() {
            let mut v = pred.at2(j, station);
            if clamp {
                v = v.clamp(0.0, 1.0);
            }
            row.push_str(&format!(",{v}"));
        }
        text.push_str(&row);
        text.push('\n');
    }
    std::fs::write(out.join("forecast.csv"), text)?;
    write_manifest(&out, "forecast", cfg.sha256(), &["forecast.csv"])?;
    println!("forecast written for {} steps", cfg.train.horizon_steps);
    Ok(())
}

#[derive(Serialize)]
struct PerturbEntry {
    sigma: f64,
    metrics: astgin::metrics::MetricsReport,
}

pub fn cmd_perturb(
    config_path: &Path,
    overrides: &Overrides,
    checkpoint: &Path,
    sigmas: &str,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<()> {
    let mut cfg = RunConfig::load(config_path)?;
    overrides.apply(&mut cfg)?;
    let out = resolve_out(&cfg, out)?;
    ensure_out_dir(&out)?;
    let sigma_values: Vec<f64> = sigmas
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| ConfigError(format!("bad sigma value `{s}`")).into())
        })
        .collect::<Result<_>>()?;
    if sigma_values.iter().any(|&s| s < 0.0) {
        bail!(ConfigError("sigmas must be nonnegative".into()));
    }
    let (ds, pipeline, store, split) = load_pipeline_and_store(&cfg, checkpoint)?;
    let noise_seed = seed.unwrap_or(cfg.train.seed);
    let results = pipeline.perturb_eval(
        &store,
        &ds.windows,
        Some(&ds.data.alpha),
        &split.test,
        &sigma_values,
        noise_seed,
    )?;
    let entries: Vec<PerturbEntry> =
        results.into_iter().map(|(sigma, metrics)| PerturbEntry { sigma, metrics }).collect();
    write_json(&out.join("perturb_report.json"), &entries)?;
    write_manifest(&out, "perturb", cfg.sha256(), &["perturb_report.json"])?;
    for e in &entries {
        println!("sigma {:.4}: accuracy {:.4}, rmse {:.4}", e.sigma, e.metrics.accuracy, e.metrics.rmse);
    }
    Ok(())
}

pub fn cmd_synth(config_path: Option<&Path>, overrides: &Overrides, out: &Path) -> Result<()> {
    let mut cfg = match config_path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg)?;
    ensure_out_dir(out)?;
    let data = synth::generate(&cfg.synth)?;
    synth::write_dataset(&data, out)?;
    write_manifest(
        out,
        "synth",
        cfg.sha256(),
        &[
            "sessions.csv",
            "weather.csv",
            "poi.csv",
            "connectors.csv",
            "availability_truth.csv",
        ],
    )?;
    println!(
        "synthetic dataset: {} stations, {} steps, seed {}",
        cfg.synth.n_stations,
        data.avail.grid.count(),
        cfg.synth.seed
    );
    Ok(())
}

#[derive(Serialize)]
struct GradcheckRow {
    op: String,
    max_rel_err: f64,
    pass: bool,
}

pub fn cmd_gradcheck(seeds: u64, out: Option<&Path>) -> Result<()> {
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    for seed in 0..seeds {
        for case in astgin::gradcheck_registry(seed) {
            let err = grad_check_case(&case, DEFAULT_H)
                .map_err(|e| NumericalError(format!("{}: {e}", case.name)))?;
            let slot = worst.entry(case.name).or_insert(0.0);
            if err > *slot {
                *slot = err;
            }
        }
    }
    let rows: Vec<GradcheckRow> = worst
        .into_iter()
        .map(|(op, max_rel_err)| GradcheckRow { op, max_rel_err, pass: max_rel_err < DEFAULT_TOLERANCE })
        .collect();
    println!("{:<24} {:>12}  result", "op", "max rel err");
    for row in &rows {
        println!(
            "{:<24} {:>12.3e}  {}",
            row.op,
            row.max_rel_err,
            if row.pass { "pass" } else { "FAIL" }
        );
    }
    if let Some(out) = out {
        ensure_out_dir(out)?;
        write_json(&out.join("gradcheck.json"), &rows)?;
        write_manifest(out, "gradcheck", format!("seeds-{seeds}"), &["gradcheck.json"])?;
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.op.as_str()).collect();
    if !failed.is_empty() {
        bail!(NumericalError(format!("gradient checks failed for: {}", failed.join(", "))));
    }
    Ok(())
}
